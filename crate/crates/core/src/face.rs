//! Residual face refinement: crop a face-centered window from the
//! completion output, predict an additive residual with a small network F,
//! and train F adversarially (with the completion network frozen).

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NetKind};
use crate::completion::{
    complete_forward, init_discriminator, parsing_to_gray, perceptual_loss_var, Discriminator,
    DiscriminatorConfig, Extractor, PerceptionConfig, PROB_CLAMP,
};
use crate::data::{apply_mask, sample_hole_mask, BoxRect, HoleMask, LabeledPortrait, MaskMode};
use crate::error::{Error, Result};
use crate::nn::{
    self, apply_stat_updates, forward_plan, Activation, Adam, ForwardCtx, LayerSpec, ParamStore,
};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FaceConfig {
    pub base_channels: usize,
    pub n_resblocks: usize,
    /// Perceptual weight of the refinement objective.
    pub lambda: f64,
    pub face_classes: Vec<usize>,
    pub num_classes: usize,
}

impl Default for FaceConfig {
    fn default() -> Self {
        FaceConfig {
            base_channels: 8,
            n_resblocks: 4,
            lambda: 10.0,
            face_classes: vec![crate::data::FACE_CLASS],
            num_classes: crate::data::SYNTHETIC_NUM_CLASSES,
        }
    }
}

impl FaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.n_resblocks == 0 {
            return Err(Error::Validation("face network counts must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Validation("lambda must be >= 0".into()));
        }
        if self.face_classes.is_empty() {
            return Err(Error::Validation("need at least one face class".into()));
        }
        Ok(())
    }

    /// Residual network plan: 7-channel crop stack in, residual image out.
    pub fn plan(&self) -> Vec<LayerSpec> {
        let c = self.base_channels;
        let mut plan = vec![
            LayerSpec::conv("f.in", 7, c, 3, 1, 1, true, Activation::Relu),
            LayerSpec::conv("f.down0", c, 2 * c, 3, 2, 1, true, Activation::Relu),
            LayerSpec::conv("f.down1", 2 * c, 4 * c, 3, 2, 1, true, Activation::Relu),
        ];
        for i in 0..self.n_resblocks {
            plan.push(LayerSpec::Residual {
                name: format!("f.res{i}"),
                channels: 4 * c,
            });
        }
        for (i, (ic, oc)) in [(4 * c, 2 * c), (2 * c, c)].into_iter().enumerate() {
            plan.push(LayerSpec::Deconv {
                name: format!("f.up{i}"),
                in_ch: ic,
                out_ch: oc,
                kernel: 3,
                stride: 2,
                pad: 1,
                out_pad: 1,
                norm: true,
                act: Activation::Relu,
            });
        }
        plan.push(LayerSpec::conv(
            "f.out",
            c,
            3,
            3,
            1,
            1,
            false,
            Activation::None,
        ));
        plan
    }
}

pub fn init_face_params(config: &FaceConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    nn::register_plan(&mut store, &mut rng, &config.plan());
    store
}

/// Round-half-up integer centroid of the face-class pixels.
pub fn face_center(parsing_map: &Array2<usize>, face_classes: &[usize]) -> Result<(usize, usize)> {
    let (h, w) = parsing_map.dim();
    let mut sy = 0.0;
    let mut sx = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if face_classes.contains(&parsing_map[[y, x]]) {
                sy += y as f64;
                sx += x as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Precondition("no face pixels in parsing map".into()));
    }
    let cy = (sy / n as f64 + 0.5).floor() as usize;
    let cx = (sx / n as f64 + 0.5).floor() as usize;
    Ok((cy.min(h - 1), cx.min(w - 1)))
}

/// Face window side: 64/256 of the image height, floored to a multiple of 4
/// (the face network downsampling factor), minimum 4.
pub fn face_window_side(h: usize) -> usize {
    ((64 * h / 256).max(4) / 4) * 4
}

/// Clamped face window centered at `(cy, cx)`.
pub fn face_window(cy: usize, cx: usize, h: usize, w: usize) -> BoxRect {
    let side = face_window_side(h).min(h).min(w);
    let y0 = (cy as isize - side as isize / 2).clamp(0, (h - side) as isize) as usize;
    let x0 = (cx as isize - side as isize / 2).clamp(0, (w - side) as isize) as usize;
    BoxRect {
        x0,
        y0,
        w: side,
        h: side,
    }
}

fn crop3(image: &Array3<f64>, win: &BoxRect) -> Array3<f64> {
    image
        .slice(s![.., win.y0..win.y0 + win.h, win.x0..win.x0 + win.w])
        .to_owned()
}

fn crop2<T: Clone>(plane: &Array2<T>, win: &BoxRect) -> Array2<T> {
    plane
        .slice(s![win.y0..win.y0 + win.h, win.x0..win.x0 + win.w])
        .to_owned()
}

fn stack_face_input(g_f: &Array3<f64>, p_f: &Array2<f64>, m_f: &Array2<f64>) -> Array3<f64> {
    let (_, h, w) = g_f.dim();
    let mut out = Array3::zeros((7, h, w));
    for ch in 0..3 {
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&g_f.index_axis(ndarray::Axis(0), ch));
    }
    for ch in 3..6 {
        out.index_axis_mut(ndarray::Axis(0), ch).assign(p_f);
    }
    out.index_axis_mut(ndarray::Axis(0), 6).assign(m_f);
    out
}

fn face_residual(config: &FaceConfig, params: &ParamStore, input: Array3<f64>) -> Array3<f64> {
    let mut g = Graph::new();
    let x = g.constant(input.into_dyn());
    let bound = params.bind_frozen(&mut g);
    let mut ctx = ForwardCtx::eval();
    let out = forward_plan(&mut g, &bound, &mut ctx, &config.plan(), x);
    g.value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
}

/// Add the predicted residual inside the face window only; clamp to [-1,1].
pub fn refine_face(
    completion_output: &Array3<f64>,
    parsing_map: &Array2<usize>,
    mask: &HoleMask,
    checkpoint: &Checkpoint,
) -> Result<Array3<f64>> {
    checkpoint.expect_kind(NetKind::Face)?;
    let config: FaceConfig = checkpoint.config()?;
    config.validate()?;
    let (_, h, w) = completion_output.dim();
    if parsing_map.dim() != (h, w) || mask.mask.dim() != (h, w) {
        return Err(Error::shape(
            format!("{h}x{w}"),
            format!("{:?} / {:?}", parsing_map.dim(), mask.mask.dim()),
            "refine_face inputs",
        ));
    }
    let (cy, cx) = face_center(parsing_map, &config.face_classes)?;
    let win = face_window(cy, cx, h, w);
    let gray = parsing_to_gray(parsing_map, config.num_classes);
    let g_f = crop3(completion_output, &win);
    let p_f = crop2(&gray, &win);
    let m_f = crop2(&mask.as_f64(), &win);
    let r_f = face_residual(
        &config,
        &checkpoint.params,
        stack_face_input(&g_f, &p_f, &m_f),
    );

    let mut out = completion_output.clone();
    for ch in 0..3 {
        for y in 0..win.h {
            for x in 0..win.w {
                let v = out[[ch, win.y0 + y, win.x0 + x]] + r_f[[ch, y, x]];
                out[[ch, win.y0 + y, win.x0 + x]] = v.clamp(-1.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Literal refinement objective value:
/// `λ·Σᵢ‖Φᵢ(x̂_f) − Φᵢ(R̂_f)‖² + log(1 − D_f(p_f, R̂_f))`.
pub fn face_objective(
    gt_crop: &Array3<f64>,
    refined_crop: &Array3<f64>,
    p_f: &Array2<f64>,
    extractor: &Extractor,
    d_face: &Discriminator,
    lambda: f64,
) -> Result<f64> {
    let lp = crate::completion::perceptual_loss(gt_crop, refined_crop, extractor)?;
    let p = crate::completion::discriminator_forward(d_face, refined_crop, p_f)?;
    Ok(lambda * lp + (1.0 - p).max(PROB_CLAMP).ln())
}

pub struct TrainedFace {
    pub face: Checkpoint,
    pub disc_face: Checkpoint,
    /// FNV hash of the completion parameters before/after training; equal by
    /// the frozen-G contract.
    pub g_hash_before: u64,
    pub g_hash_after: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn train_face(
    dataset: &[LabeledPortrait],
    frozen_g: &Checkpoint,
    config: &FaceConfig,
    perc_config: &PerceptionConfig,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<TrainedFace> {
    config.validate()?;
    frozen_g.expect_kind(NetKind::Generator)?;
    let gen_config: crate::completion::GeneratorConfig = frozen_g.config()?;
    let faced: Vec<&LabeledPortrait> = dataset
        .iter()
        .filter(|s| face_center(&s.labels, &config.face_classes).is_ok())
        .collect();
    if faced.is_empty() {
        return Err(Error::Validation(
            "train_face: no samples with face pixels".into(),
        ));
    }
    let (_, hh, ww) = faced[0].image.dim();
    let side = face_window_side(hh).min(hh).min(ww);
    if !side.is_power_of_two() {
        return Err(Error::Validation(format!(
            "face window side {side} must be a power of two for the critic"
        )));
    }
    let extractor = crate::completion::build_extractor(perc_config)?;
    let g_hash_before = frozen_g.params.content_hash();

    let mut f_params = init_face_params(config, seed);
    let mut df = init_discriminator(
        DiscriminatorConfig {
            input_size: side,
            base_channels: config.base_channels,
        },
        seed ^ 0xface,
    )?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut opt_f = Adam::new(lr);
    let mut opt_d = Adam::new(lr);
    let mut trace = Vec::with_capacity(epochs);

    for _epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for sample in &faced {
            let hole = sample_hole_mask(sample, &mut mask_rng, MaskMode::Face, (hh, ww))?;
            let masked = apply_mask(&sample.image, &hole, [0.0; 3])?;
            let gray = parsing_to_gray(&sample.labels, gen_config.num_classes);
            let completed = complete_forward(&masked, &sample.labels, &hole, frozen_g)?;

            let (cy, cx) = face_center(&sample.labels, &config.face_classes)?;
            let win = face_window(cy, cx, hh, ww);
            let g_f = crop3(&completed, &win);
            let p_f = crop2(&gray, &win);
            let m_f = crop2(&hole.as_f64(), &win);
            let gt_f = crop3(&sample.image, &win);
            let input = stack_face_input(&g_f, &p_f, &m_f);

            // -- face-discriminator step --
            {
                let mut g = Graph::new();
                let x = g.constant(input.clone().into_dyn());
                let fb = f_params.bind_frozen(&mut g);
                let mut fctx = ForwardCtx::eval();
                let plan = config.plan();
                let r = forward_plan(&mut g, &fb, &mut fctx, &plan, x);
                let base = g.constant(g_f.clone().into_dyn());
                let refined = g.add(base, r);
                let real = g.constant(gt_f.clone().into_dyn());

                let db = df.params.bind(&mut g);
                let mut dctx = ForwardCtx::train();
                let p_real = disc_prob(&mut g, &df, &db, &mut dctx, real, &p_f);
                let p_fake = disc_prob(&mut g, &df, &db, &mut dctx, refined, &p_f);
                let lr_ = g.ln(p_real);
                let one = g.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), 1.0));
                let omf = g.sub(one, p_fake);
                let lf = g.ln(omf);
                let sum = g.add(lr_, lf);
                let d_loss = g.neg(sum);
                let grads = g.backward(d_loss);
                opt_d.step(&mut df.params, &db.grads(&grads));
                apply_stat_updates(&mut df.params, &dctx.stat_updates, 0.1);
            }

            // -- face-network step --
            {
                let mut g = Graph::new();
                let x = g.constant(input.into_dyn());
                let fb = f_params.bind(&mut g);
                let mut fctx = ForwardCtx::train();
                let plan = config.plan();
                let r = forward_plan(&mut g, &fb, &mut fctx, &plan, x);
                let base = g.constant(g_f.into_dyn());
                let refined = g.add(base, r);
                let gt = g.constant(gt_f.into_dyn());
                let lp = perceptual_loss_var(&mut g, gt, refined, &extractor);
                let db = df.params.bind_frozen(&mut g);
                let mut dctx = ForwardCtx::train();
                let p_fake = disc_prob(&mut g, &df, &db, &mut dctx, refined, &p_f);
                let lnp = g.ln(p_fake);
                let adv = g.neg(lnp);
                let wl = g.scale(lp, config.lambda);
                let loss = g.add(wl, adv);
                let lv = g.scalar_value(loss);
                if !lv.is_finite() {
                    return Err(Error::Numerical(format!("non-finite face loss {lv}")));
                }
                epoch_loss += lv;
                let grads = g.backward(loss);
                opt_f.step(&mut f_params, &fb.grads(&grads));
                apply_stat_updates(&mut f_params, &fctx.stat_updates, 0.1);
            }
        }
        trace.push(epoch_loss / faced.len() as f64);
    }

    let g_hash_after = frozen_g.params.content_hash();
    debug_assert_eq!(g_hash_before, g_hash_after);
    let mut face = Checkpoint::new(
        NetKind::Face,
        f_params,
        serde_json::to_string(config).expect("config serializes"),
    );
    face.rng_state = serde_json::to_vec(&mask_rng).expect("rng serializes");
    face.loss_trace = trace;
    let disc_face = Checkpoint::new(
        NetKind::DiscFace,
        df.params,
        serde_json::to_string(&df.config).expect("config serializes"),
    );
    Ok(TrainedFace {
        face,
        disc_face,
        g_hash_before,
        g_hash_after,
    })
}

fn disc_prob(
    g: &mut Graph,
    d: &Discriminator,
    bound: &nn::BoundParams,
    ctx: &mut ForwardCtx,
    image: Var,
    parsing_gray: &Array2<f64>,
) -> Var {
    let (h, w) = parsing_gray.dim();
    let par = g.constant(
        parsing_gray
            .clone()
            .into_shape_with_order((1, h, w))
            .unwrap()
            .into_dyn(),
    );
    let p3 = g.concat(&[par, par, par], 0);
    let x = g.concat(&[image, p3], 0);
    let y = forward_plan(g, bound, ctx, &d.plan, x);
    let m = g.mean_all(y);
    let p = g.sigmoid(m);
    g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
}
