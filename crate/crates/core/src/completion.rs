//! Stage-II completion: parsing-conditioned generator with global/local
//! conditional discriminators, perceptual loss, and adversarial training.
//!
//! The generator consumes a 7-channel stack — masked image (3), the
//! parsing map as grayscale repeated three times (3), and the hole mask (1)
//! — downsamples to 1/4 resolution, runs residual + dilated blocks, and
//! restores resolution with stride-2 deconvolutions ending in tanh.

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, Checkpoint, NetKind};
use crate::data::{apply_mask, sample_hole_mask, BoxRect, HoleMask, LabeledPortrait, MaskMode};
use crate::error::{Error, Result};
use crate::nn::{
    self, apply_stat_updates, forward_plan, Activation, Adam, BoundParams, ForwardCtx, LayerSpec,
    ParamStore,
};
use crate::parsing::parse_forward;
use crate::tensor::{Graph, Var};

pub const PROB_CLAMP: f64 = 1e-7;

// ---- generator ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub n_front_resblocks: usize,
    pub dilation_rates: Vec<usize>,
    pub n_back_resblocks: usize,
    /// Drops the local discriminator and adds generator dropout.
    pub extrapolation_mode: bool,
    pub dropout_rate: f64,
    /// Class count of the parsing maps fed as conditioning.
    pub num_classes: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 16,
            n_front_resblocks: 4,
            dilation_rates: vec![2, 4, 8],
            n_back_resblocks: 4,
            extrapolation_mode: false,
            dropout_rate: 0.5,
            num_classes: crate::data::SYNTHETIC_NUM_CLASSES,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0
            || self.n_front_resblocks == 0
            || self.n_back_resblocks == 0
            || self.dilation_rates.is_empty()
        {
            return Err(Error::Validation("generator counts must be >= 1".into()));
        }
        if self.dilation_rates.iter().any(|&r| r == 0) {
            return Err(Error::Validation("dilation rates must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Validation("dropout rate must be in [0,1)".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation("need >= 2 parsing classes".into()));
        }
        Ok(())
    }

    /// Downsampling factor of the bottleneck (two stride-2 convs).
    pub const STRIDE: usize = 4;

    pub fn plan(&self) -> Vec<LayerSpec> {
        let c = self.base_channels;
        let mut plan = vec![
            LayerSpec::conv("g.in", 7, c, 7, 1, 1, true, Activation::Relu),
            LayerSpec::conv("g.down0", c, 2 * c, 3, 2, 1, true, Activation::Relu),
            LayerSpec::conv("g.down1", 2 * c, 4 * c, 3, 2, 1, true, Activation::Relu),
        ];
        for i in 0..self.n_front_resblocks {
            plan.push(LayerSpec::Residual {
                name: format!("g.front{i}"),
                channels: 4 * c,
            });
        }
        for (i, &r) in self.dilation_rates.iter().enumerate() {
            plan.push(LayerSpec::conv(
                &format!("g.dil{i}"),
                4 * c,
                4 * c,
                3,
                1,
                r,
                true,
                Activation::Relu,
            ));
        }
        for i in 0..self.n_back_resblocks {
            plan.push(LayerSpec::Residual {
                name: format!("g.back{i}"),
                channels: 4 * c,
            });
            if self.extrapolation_mode {
                plan.push(LayerSpec::Dropout {
                    name: format!("g.back{i}.drop"),
                    rate: self.dropout_rate,
                });
            }
        }
        plan.push(LayerSpec::Deconv {
            name: "g.up0".into(),
            in_ch: 4 * c,
            out_ch: 2 * c,
            kernel: 3,
            stride: 2,
            pad: 1,
            out_pad: 1,
            norm: true,
            act: Activation::Relu,
        });
        plan.push(LayerSpec::Deconv {
            name: "g.up1".into(),
            in_ch: 2 * c,
            out_ch: c,
            kernel: 3,
            stride: 2,
            pad: 1,
            out_pad: 1,
            norm: true,
            act: Activation::Relu,
        });
        plan.push(LayerSpec::conv(
            "g.out",
            c,
            3,
            7,
            1,
            1,
            false,
            Activation::Tanh,
        ));
        plan
    }
}

pub fn init_generator_params(config: &GeneratorConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    nn::register_plan(&mut store, &mut rng, &config.plan());
    store
}

/// Label map → grayscale conditioning plane in [-1,1].
pub fn parsing_to_gray(labels: &Array2<usize>, num_classes: usize) -> Array2<f64> {
    let denom = (num_classes - 1).max(1) as f64;
    labels.mapv(|l| 2.0 * l as f64 / denom - 1.0)
}

/// Assemble the 7-channel generator input stack.
pub fn stack_generator_input(
    masked_image: &Array3<f64>,
    parsing_gray: &Array2<f64>,
    mask: &HoleMask,
) -> Result<Array3<f64>> {
    let (c, h, w) = masked_image.dim();
    if c != 3 {
        return Err(Error::shape(
            "3 channels",
            format!("{c}"),
            "generator image input",
        ));
    }
    if parsing_gray.dim() != (h, w) || mask.mask.dim() != (h, w) {
        return Err(Error::shape(
            format!("{h}x{w}"),
            format!("{:?} / {:?}", parsing_gray.dim(), mask.mask.dim()),
            "generator conditioning",
        ));
    }
    let mut out = Array3::zeros((7, h, w));
    for ch in 0..3 {
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&masked_image.index_axis(ndarray::Axis(0), ch));
    }
    for ch in 3..6 {
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(parsing_gray);
    }
    out.index_axis_mut(ndarray::Axis(0), 6)
        .assign(&mask.as_f64());
    Ok(out)
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    let s = GeneratorConfig::STRIDE;
    if h % s != 0 || w % s != 0 {
        return Err(Error::shape(
            format!("size divisible by {s}"),
            format!("{h}x{w}"),
            "generator input",
        ));
    }
    Ok(())
}

fn generator_forward_var(
    g: &mut Graph,
    config: &GeneratorConfig,
    bound: &BoundParams,
    ctx: &mut ForwardCtx,
    input: Var,
) -> Var {
    forward_plan(g, bound, ctx, &config.plan(), input)
}

/// Raw generator output in [-1,1], same size as the input.
pub fn complete_forward(
    masked_image: &Array3<f64>,
    parsing_map: &Array2<usize>,
    mask: &HoleMask,
    checkpoint: &Checkpoint,
) -> Result<Array3<f64>> {
    complete_forward_with(masked_image, parsing_map, mask, checkpoint, None)
}

/// As [`complete_forward`] but keeps dropout live when an rng is supplied
/// (extrapolation-mode sampling at inference).
pub fn complete_forward_with(
    masked_image: &Array3<f64>,
    parsing_map: &Array2<usize>,
    mask: &HoleMask,
    checkpoint: &Checkpoint,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Array3<f64>> {
    checkpoint.expect_kind(NetKind::Generator)?;
    let config: GeneratorConfig = checkpoint.config()?;
    config.validate()?;
    let (_, h, w) = masked_image.dim();
    check_divisible(h, w)?;
    let gray = parsing_to_gray(parsing_map, config.num_classes);
    let input = stack_generator_input(masked_image, &gray, mask)?;
    let mut g = Graph::new();
    let x = g.constant(input.into_dyn());
    let bound = checkpoint.params.bind_frozen(&mut g);
    let mut ctx = ForwardCtx::eval();
    ctx.dropout_rng = dropout_rng;
    let out = generator_forward_var(&mut g, &config, &bound, &mut ctx, x);
    Ok(g.value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap())
}

// ---- perception extractor / perceptual loss ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum ExtractorKind {
    Identity,
    SeededRandom {
        seed: u64,
        base_channels: usize,
    },
    /// Imported pretrained weights (e.g. converted VGG-19 stages) stored in
    /// the native checkpoint format with `stage{i}.w` / `stage{i}.b` entries.
    Pretrained {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PerceptionConfig {
    pub kind: ExtractorKind,
    pub layer_count: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig {
            kind: ExtractorKind::SeededRandom {
                seed: 0x5eed,
                base_channels: 4,
            },
            layer_count: 5,
        }
    }
}

/// Frozen feature extractor tapped after every stage.
pub struct Extractor {
    stages: Vec<Vec<LayerSpec>>,
    params: ParamStore,
}

pub fn build_extractor(config: &PerceptionConfig) -> Result<Extractor> {
    if config.layer_count == 0 {
        return Err(Error::Validation(
            "perception layer_count must be >= 1".into(),
        ));
    }
    match &config.kind {
        ExtractorKind::Identity => Ok(Extractor {
            stages: Vec::new(),
            params: ParamStore::new(),
        }),
        ExtractorKind::SeededRandom {
            seed,
            base_channels,
        } => {
            let mut stages = Vec::new();
            let mut in_ch = 3;
            for i in 0..config.layer_count {
                let out_ch = base_channels << i.min(3);
                stages.push(vec![LayerSpec::conv(
                    &format!("stage{i}"),
                    in_ch,
                    out_ch,
                    3,
                    2,
                    1,
                    false,
                    Activation::Relu,
                )]);
                in_ch = out_ch;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut params = ParamStore::new();
            for s in &stages {
                nn::register_plan(&mut params, &mut rng, s);
            }
            Ok(Extractor { stages, params })
        }
        ExtractorKind::Pretrained { path } => {
            let ckpt = load_checkpoint(path)?;
            let mut stages = Vec::new();
            for i in 0..config.layer_count {
                let name = format!("stage{i}");
                if !ckpt.params.contains(&format!("{name}.w")) {
                    return Err(Error::Checkpoint(format!(
                        "extractor weights missing {name}.w"
                    )));
                }
                let shape = ckpt.params.get(&format!("{name}.w")).shape().to_vec();
                let (out_ch, in_ch, k) = (shape[0], shape[1], shape[2]);
                stages.push(vec![LayerSpec::conv(
                    &name,
                    in_ch,
                    out_ch,
                    k,
                    2,
                    1,
                    false,
                    Activation::Relu,
                )]);
            }
            Ok(Extractor {
                stages,
                params: ckpt.params,
            })
        }
    }
}

impl Extractor {
    /// Feature taps for `x`; identity extractor returns `[x]`.
    pub fn features_var(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        if self.stages.is_empty() {
            return vec![x];
        }
        let bound = self.params.bind_frozen(g);
        let mut ctx = ForwardCtx::eval();
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for s in &self.stages {
            cur = forward_plan(g, &bound, &mut ctx, s, cur);
            taps.push(cur);
        }
        taps
    }

    pub fn features(&self, image: &Array3<f64>) -> Vec<ndarray::ArrayD<f64>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone().into_dyn());
        self.features_var(&mut g, x)
            .into_iter()
            .map(|v| g.value(v).clone())
            .collect()
    }
}

/// Unnormalized sum over taps of squared L2 feature distance.
pub fn perceptual_loss_var(g: &mut Graph, a: Var, b: Var, extractor: &Extractor) -> Var {
    let fa = extractor.features_var(g, a);
    let fb = extractor.features_var(g, b);
    let mut total: Option<Var> = None;
    for (x, y) in fa.into_iter().zip(fb) {
        let d = g.sub(x, y);
        let s = g.sum_squares(d);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    total.expect("at least one tap")
}

pub fn perceptual_loss(a: &Array3<f64>, b: &Array3<f64>, extractor: &Extractor) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
            "perceptual_loss",
        ));
    }
    let mut g = Graph::new();
    let av = g.constant(a.clone().into_dyn());
    let bv = g.constant(b.clone().into_dyn());
    let l = perceptual_loss_var(&mut g, av, bv, extractor);
    Ok(g.scalar_value(l))
}

// ---- local patch ----

/// Hole-centered local-discriminator window: 128/256 of the image height,
/// clamped inside the canvas.
pub fn local_patch_window(hole: &BoxRect, h: usize, w: usize) -> BoxRect {
    let side = (128 * h / 256).max(1).min(h).min(w);
    let (cy, cx) = hole.center();
    let y0 = (cy as isize - side as isize / 2).clamp(0, (h - side) as isize) as usize;
    let x0 = (cx as isize - side as isize / 2).clamp(0, (w - side) as isize) as usize;
    BoxRect {
        x0,
        y0,
        w: side,
        h: side,
    }
}

/// Crop the same hole-centered window out of the image and the parsing plane.
pub fn crop_local(
    image: &Array3<f64>,
    parsing_gray: &Array2<f64>,
    hole: &BoxRect,
) -> (Array3<f64>, Array2<f64>, BoxRect) {
    let (_, h, w) = image.dim();
    let win = local_patch_window(hole, h, w);
    let img = image
        .slice(ndarray::s![
            ..,
            win.y0..win.y0 + win.h,
            win.x0..win.x0 + win.w
        ])
        .to_owned();
    let par = parsing_gray
        .slice(ndarray::s![win.y0..win.y0 + win.h, win.x0..win.x0 + win.w])
        .to_owned();
    (img, par, win)
}

// ---- discriminators ----

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    pub base_channels: usize,
}

/// DCGAN-style critic: kernel 4, stride 2 on all but the final conv
/// (stride 1), `log2(input) − 1` conv layers total, sigmoid head over the
/// spatial mean of the 1-channel final map. Conditioned on 3 image +
/// 3 parsing channels.
pub fn discriminator_plan(config: &DiscriminatorConfig) -> Vec<LayerSpec> {
    let n_layers = (config.input_size as f64).log2() as usize - 1;
    let mut plan = Vec::with_capacity(n_layers);
    let mut in_ch = 6;
    for i in 0..n_layers {
        let last = i + 1 == n_layers;
        let out_ch = if last {
            1
        } else {
            (config.base_channels << i).min(config.base_channels * 8)
        };
        plan.push(LayerSpec::Conv {
            name: format!("d{i}"),
            in_ch,
            out_ch,
            kernel: 4,
            stride: if last { 1 } else { 2 },
            pad: 1,
            dilation: 1,
            norm: !last && i > 0,
            act: if last {
                Activation::None
            } else {
                Activation::LeakyRelu
            },
        });
        in_ch = out_ch;
    }
    plan
}

pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub plan: Vec<LayerSpec>,
    pub params: ParamStore,
}

pub fn init_discriminator(config: DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
    if !config.input_size.is_power_of_two() || config.input_size < 4 {
        return Err(Error::Validation(format!(
            "discriminator input size {} must be a power of two >= 4",
            config.input_size
        )));
    }
    let plan = discriminator_plan(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    nn::register_plan(&mut params, &mut rng, &plan);
    Ok(Discriminator {
        config,
        plan,
        params,
    })
}

fn disc_prob_var(
    g: &mut Graph,
    d: &Discriminator,
    bound: &BoundParams,
    ctx: &mut ForwardCtx,
    image: Var,
    parsing_gray: Var,
) -> Var {
    let p3 = g.concat(&[parsing_gray, parsing_gray, parsing_gray], 0);
    let x = g.concat(&[image, p3], 0);
    let y = forward_plan(g, bound, ctx, &d.plan, x);
    let m = g.mean_all(y);
    let p = g.sigmoid(m);
    g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Graph-side critic probability for a differentiable `image` node; the
/// critic parameters themselves are bound frozen. `parsing_gray` is a
/// `1xHxW` node.
pub fn discriminator_prob_var(
    g: &mut Graph,
    d: &Discriminator,
    image: Var,
    parsing_gray: Var,
) -> Var {
    let bound = d.params.bind_frozen(g);
    let mut ctx = ForwardCtx::eval();
    disc_prob_var(g, d, &bound, &mut ctx, image, parsing_gray)
}

/// Probability in (0,1) that the (image, parsing) pair is real.
pub fn discriminator_forward(
    d: &Discriminator,
    image: &Array3<f64>,
    parsing_gray: &Array2<f64>,
) -> Result<f64> {
    let (c, h, w) = image.dim();
    if c != 3 || h != d.config.input_size || w != d.config.input_size {
        return Err(Error::shape(
            format!("3x{0}x{0}", d.config.input_size),
            format!("{c}x{h}x{w}"),
            "discriminator input",
        ));
    }
    if parsing_gray.dim() != (h, w) {
        return Err(Error::shape(
            format!("{h}x{w}"),
            format!("{:?}", parsing_gray.dim()),
            "discriminator parsing",
        ));
    }
    let mut g = Graph::new();
    let img = g.constant(image.clone().into_dyn());
    let par1 = g.constant(
        parsing_gray
            .clone()
            .into_shape_with_order((1, h, w))
            .unwrap()
            .into_dyn(),
    );
    let bound = d.params.bind_frozen(&mut g);
    let mut ctx = ForwardCtx::eval();
    let p = disc_prob_var(&mut g, d, &bound, &mut ctx, img, par1);
    Ok(g.scalar_value(p))
}

// ---- losses ----

/// `d_loss = −[log d_real + log(1 − d_fake)]`; `g_loss = −log d_fake`
/// (non-saturating surrogate). Probabilities are clamped away from {0,1}.
pub fn gan_losses(d_real: f64, d_fake: f64) -> (f64, f64) {
    let r = d_real.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let f = d_fake.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let d_loss = -(r.ln() + (1.0 - f).ln());
    let g_loss = -f.ln();
    (d_loss, g_loss)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CompletionLossConfig {
    pub lambda_p: f64,
    pub lambda_g: f64,
    pub lambda_l: f64,
}

impl Default for CompletionLossConfig {
    fn default() -> Self {
        CompletionLossConfig {
            lambda_p: 100.0,
            lambda_g: 1.0,
            lambda_l: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub perceptual: f64,
    pub adv_global: f64,
    pub adv_local: f64,
    pub total: f64,
}

pub fn combine_components(
    perceptual: f64,
    adv_global: f64,
    adv_local: f64,
    cfg: &CompletionLossConfig,
) -> LossComponents {
    LossComponents {
        perceptual,
        adv_global,
        adv_local,
        total: cfg.lambda_p * perceptual + cfg.lambda_g * adv_global + cfg.lambda_l * adv_local,
    }
}

/// Full generator objective evaluated on concrete images: perceptual term
/// against the ground truth plus the adversarial terms from both critics.
#[allow(clippy::too_many_arguments)]
pub fn completion_loss(
    result: &Array3<f64>,
    gt: &Array3<f64>,
    parsing_gray: &Array2<f64>,
    hole: &BoxRect,
    extractor: &Extractor,
    d_global: &Discriminator,
    d_local: Option<&Discriminator>,
    cfg: &CompletionLossConfig,
) -> Result<LossComponents> {
    let lp = perceptual_loss(gt, result, extractor)?;
    let pg = discriminator_forward(d_global, result, parsing_gray)?;
    let (_, adv_g) = gan_losses(0.5, pg);
    let adv_l = match d_local {
        Some(dl) => {
            let (patch, ppatch, _) = crop_local(result, parsing_gray, hole);
            let pl = discriminator_forward(dl, &patch, &ppatch)?;
            gan_losses(0.5, pl).1
        }
        None => 0.0,
    };
    Ok(combine_components(lp, adv_g, adv_l, cfg))
}

// ---- training ----

pub enum ParsingSource<'a> {
    GroundTruth,
    Frozen(&'a Checkpoint),
}

pub struct TrainedCompletion {
    pub generator: Checkpoint,
    pub disc_global: Checkpoint,
    pub disc_local: Option<Checkpoint>,
    /// Number of local-discriminator updates performed (0 in extrapolation
    /// mode).
    pub local_updates: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn train_completion(
    dataset: &[LabeledPortrait],
    parsing_source: ParsingSource,
    gen_config: &GeneratorConfig,
    perc_config: &PerceptionConfig,
    loss_config: &CompletionLossConfig,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<TrainedCompletion> {
    gen_config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("train_completion: empty dataset".into()));
    }
    let (_, hh, ww) = dataset[0].image.dim();
    check_divisible(hh, ww)?;
    let extractor = build_extractor(perc_config)?;

    let mut gen_params = init_generator_params(gen_config, seed);
    let global_size = hh.min(ww).next_power_of_two().min(hh.min(ww));
    if global_size != hh || global_size != ww {
        return Err(Error::Validation(format!(
            "training images must be square powers of two for the critics, got {hh}x{ww}"
        )));
    }
    let mut dg = init_discriminator(
        DiscriminatorConfig {
            input_size: global_size,
            base_channels: gen_config.base_channels / 2 + 1,
        },
        seed ^ 0xd15c,
    )?;
    let local_size = (128 * hh / 256).max(4);
    let mut dl = if gen_config.extrapolation_mode {
        None
    } else {
        Some(init_discriminator(
            DiscriminatorConfig {
                input_size: local_size,
                base_channels: gen_config.base_channels / 2 + 1,
            },
            seed ^ 0x10ca1,
        )?)
    };

    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut opt_g = Adam::new(lr);
    let mut opt_dg = Adam::new(lr);
    let mut opt_dl = Adam::new(lr);
    let mut trace = Vec::with_capacity(epochs);
    let mut local_updates = 0usize;
    let mut step = 0usize;

    for _epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for sample in dataset {
            let mode = if gen_config.extrapolation_mode {
                if step % 2 == 0 {
                    MaskMode::ExtrapDown
                } else {
                    MaskMode::ExtrapUp
                }
            } else {
                MaskMode::TrainRandom
            };
            step += 1;
            let hole = sample_hole_mask(sample, &mut mask_rng, mode, (hh, ww))?;
            let masked = apply_mask(&sample.image, &hole, [0.0; 3])?;
            let gray = match &parsing_source {
                ParsingSource::GroundTruth => {
                    parsing_to_gray(&sample.labels, gen_config.num_classes)
                }
                ParsingSource::Frozen(ckpt) => {
                    let out = parse_forward(&masked, &hole, ckpt)?;
                    parsing_to_gray(&out.label_map, gen_config.num_classes)
                }
            };
            let input = stack_generator_input(&masked, &gray, &hole)?;
            let hole_box = hole.holes[0];

            // -- discriminator step --
            {
                let mut g = Graph::new();
                let x = g.constant(input.clone().into_dyn());
                let gb = gen_params.bind_frozen(&mut g);
                let mut gctx = ForwardCtx::eval();
                let fake = generator_forward_var(&mut g, gen_config, &gb, &mut gctx, x);
                let real = g.constant(sample.image.clone().into_dyn());
                let par1 = g.constant(
                    gray.clone()
                        .into_shape_with_order((1, hh, ww))
                        .unwrap()
                        .into_dyn(),
                );

                let db = dg.params.bind(&mut g);
                let mut dctx = ForwardCtx::train();
                let p_real = disc_prob_var(&mut g, &dg, &db, &mut dctx, real, par1);
                let p_fake = disc_prob_var(&mut g, &dg, &db, &mut dctx, fake, par1);
                let mut d_loss = d_loss_var(&mut g, p_real, p_fake);

                let mut local_bind = None;
                if let Some(dl) = &dl {
                    let win = local_patch_window(&hole_box, hh, ww);
                    let real_p = g.crop(real, win.y0, win.x0, win.h, win.w);
                    let fake_p = g.crop(fake, win.y0, win.x0, win.h, win.w);
                    let par_p = g.crop(par1, win.y0, win.x0, win.h, win.w);
                    let db_l = dl.params.bind(&mut g);
                    let pr = disc_prob_var(&mut g, dl, &db_l, &mut dctx, real_p, par_p);
                    let pf = disc_prob_var(&mut g, dl, &db_l, &mut dctx, fake_p, par_p);
                    let dll = d_loss_var(&mut g, pr, pf);
                    d_loss = g.add(d_loss, dll);
                    local_bind = Some(db_l);
                }

                let grads = g.backward(d_loss);
                opt_dg.step(&mut dg.params, &db.grads(&grads));
                apply_stat_updates(&mut dg.params, &dctx.stat_updates, 0.1);
                if let (Some(dl), Some(db_l)) = (&mut dl, local_bind) {
                    opt_dl.step(&mut dl.params, &db_l.grads(&grads));
                    local_updates += 1;
                }
            }

            // -- generator step --
            {
                let mut g = Graph::new();
                let x = g.constant(input.into_dyn());
                let gb = gen_params.bind(&mut g);
                let mut gctx = ForwardCtx::train();
                let fake = generator_forward_var(&mut g, gen_config, &gb, &mut gctx, x);
                let gt = g.constant(sample.image.clone().into_dyn());
                let par1 = g.constant(
                    gray.clone()
                        .into_shape_with_order((1, hh, ww))
                        .unwrap()
                        .into_dyn(),
                );

                let lp = perceptual_loss_var(&mut g, gt, fake, &extractor);

                let db = dg.params.bind_frozen(&mut g);
                let mut dctx = ForwardCtx::train();
                let p_fake = disc_prob_var(&mut g, &dg, &db, &mut dctx, fake, par1);
                let adv_g = neg_log_var(&mut g, p_fake);

                let mut loss = g.scale(lp, loss_config.lambda_p);
                let wg = g.scale(adv_g, loss_config.lambda_g);
                loss = g.add(loss, wg);
                if let Some(dl) = &dl {
                    let win = local_patch_window(&hole_box, hh, ww);
                    let fake_p = g.crop(fake, win.y0, win.x0, win.h, win.w);
                    let par_p = g.crop(par1, win.y0, win.x0, win.h, win.w);
                    let db_l = dl.params.bind_frozen(&mut g);
                    let pf = disc_prob_var(&mut g, dl, &db_l, &mut dctx, fake_p, par_p);
                    let adv_l = neg_log_var(&mut g, pf);
                    let wl = g.scale(adv_l, loss_config.lambda_l);
                    loss = g.add(loss, wl);
                }
                let lv = g.scalar_value(loss);
                if !lv.is_finite() {
                    return Err(Error::Numerical(format!("non-finite completion loss {lv}")));
                }
                epoch_loss += lv;
                let grads = g.backward(loss);
                opt_g.step(&mut gen_params, &gb.grads(&grads));
                apply_stat_updates(&mut gen_params, &gctx.stat_updates, 0.1);
            }
        }
        trace.push(epoch_loss / dataset.len() as f64);
    }

    let mut generator = Checkpoint::new(
        NetKind::Generator,
        gen_params,
        serde_json::to_string(gen_config).expect("config serializes"),
    );
    generator.rng_state = serde_json::to_vec(&mask_rng).expect("rng serializes");
    generator.loss_trace = trace;
    let disc_global = Checkpoint::new(
        NetKind::DiscGlobal,
        dg.params,
        serde_json::to_string(&dg.config).expect("config serializes"),
    );
    let disc_local = dl.map(|d| {
        Checkpoint::new(
            NetKind::DiscLocal,
            d.params,
            serde_json::to_string(&d.config).expect("config serializes"),
        )
    });
    Ok(TrainedCompletion {
        generator,
        disc_global,
        disc_local,
        local_updates,
    })
}

fn d_loss_var(g: &mut Graph, p_real: Var, p_fake: Var) -> Var {
    let lr = g.ln(p_real);
    let one = g.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), 1.0));
    let omf = g.sub(one, p_fake);
    let lf = g.ln(omf);
    let s = g.add(lr, lf);
    g.neg(s)
}

fn neg_log_var(g: &mut Graph, p: Var) -> Var {
    let l = g.ln(p);
    g.neg(l)
}

// ---- inference ----

pub struct MultiHoleResult {
    pub image: Array3<f64>,
    /// Generator invocations performed (1 for any nonempty mask).
    pub forward_passes: usize,
}

/// Fill every hole in one pass and composite the known pixels back in.
pub fn infer_multi_hole(
    masked_image: &Array3<f64>,
    parsing_map: &Array2<usize>,
    mask: &HoleMask,
    checkpoint: &Checkpoint,
) -> Result<MultiHoleResult> {
    infer_multi_hole_with(masked_image, parsing_map, mask, checkpoint, None)
}

pub fn infer_multi_hole_with(
    masked_image: &Array3<f64>,
    parsing_map: &Array2<usize>,
    mask: &HoleMask,
    checkpoint: &Checkpoint,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<MultiHoleResult> {
    if mask.is_empty() {
        return Ok(MultiHoleResult {
            image: masked_image.clone(),
            forward_passes: 0,
        });
    }
    let raw = complete_forward_with(masked_image, parsing_map, mask, checkpoint, dropout_rng)?;
    let (c, h, w) = masked_image.dim();
    let mut out = masked_image.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.mask[[y, x]] != 0 {
                for ch in 0..c {
                    out[[ch, y, x]] = raw[[ch, y, x]];
                }
            }
        }
    }
    Ok(MultiHoleResult {
        image: out,
        forward_passes: 1,
    })
}
