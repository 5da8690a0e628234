//! Stage-I human parsing network: shared residual backbone, ASPP parsing
//! head, pose-heatmap subnet, and a single-pass refinement subnet trained
//! with a spatially weighted softmax loss that up-weights hole pixels.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NetKind};
use crate::data::{
    self, apply_mask, make_pose_heatmaps, sample_hole_mask, HoleMask, LabeledPortrait, MaskMode,
};
use crate::error::{Error, Result};
use crate::nn::{
    self, apply_stat_updates, forward_plan, Activation, BoundParams, ForwardCtx, LayerSpec,
    ParamStore, SgdMomentum,
};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ParsingNetConfig {
    pub backbone_channels: Vec<usize>,
    pub backbone_stages_shared: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    pub pose_subnet_convs: usize,
    pub refine_subnet_convs: usize,
    pub head_channels: usize,
    pub num_classes: usize,
    pub num_keypoints: usize,
    /// Hole-pixel weight in the spatially weighted loss.
    pub alpha: f64,
    /// Balance between the parsing and pose terms (assumed equal by default).
    pub pose_loss_weight: f64,
}

impl Default for ParsingNetConfig {
    fn default() -> Self {
        ParsingNetConfig {
            backbone_channels: vec![16, 32, 64, 128],
            backbone_stages_shared: 4,
            aspp_rates: vec![2, 4, 6],
            aspp_channels: 64,
            pose_subnet_convs: 4,
            refine_subnet_convs: 3,
            head_channels: 64,
            num_classes: data::SYNTHETIC_NUM_CLASSES,
            num_keypoints: data::SYNTHETIC_NUM_KEYPOINTS,
            alpha: 9.0,
            pose_loss_weight: 1.0,
        }
    }
}

impl ParsingNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Validation("alpha must be >= 0".into()));
        }
        if self.backbone_channels.len() != self.backbone_stages_shared
            || self.backbone_stages_shared == 0
        {
            return Err(Error::Validation(
                "backbone_channels must list one entry per shared stage".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &r in &self.aspp_rates {
            if r == 0 || !seen.insert(r) {
                return Err(Error::Validation(
                    "aspp rates must be positive and distinct".into(),
                ));
            }
        }
        if self.num_classes < 2 || self.num_keypoints == 0 {
            return Err(Error::Validation(
                "need >= 2 classes and >= 1 keypoint".into(),
            ));
        }
        Ok(())
    }

    /// Total backbone stride: every stage but the last halves the resolution.
    pub fn stride(&self) -> usize {
        1 << (self.backbone_stages_shared - 1)
    }

    fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().unwrap()
    }

    pub fn plans(&self) -> ParsingPlans {
        let mut backbone = Vec::new();
        let mut in_ch = 3;
        for (i, &ch) in self.backbone_channels.iter().enumerate() {
            let stride = if i + 1 < self.backbone_stages_shared {
                2
            } else {
                1
            };
            backbone.push(LayerSpec::conv(
                &format!("bb{i}"),
                in_ch,
                ch,
                3,
                stride,
                1,
                true,
                Activation::Relu,
            ));
            backbone.push(LayerSpec::Residual {
                name: format!("bb{i}.res"),
                channels: ch,
            });
            in_ch = ch;
        }

        let fc = self.feature_channels();
        let ac = self.aspp_channels;
        let mut aspp_branches = Vec::new();
        aspp_branches.push(vec![LayerSpec::conv(
            "aspp1x1",
            fc,
            ac,
            1,
            1,
            1,
            true,
            Activation::Relu,
        )]);
        for &r in &self.aspp_rates {
            aspp_branches.push(vec![LayerSpec::conv(
                &format!("aspp_r{r}"),
                fc,
                ac,
                3,
                1,
                r,
                true,
                Activation::Relu,
            )]);
        }
        let fuse_in = ac * aspp_branches.len();
        let parsing_head = vec![
            LayerSpec::conv("aspp.fuse", fuse_in, ac, 1, 1, 1, true, Activation::Relu),
            LayerSpec::conv(
                "p0.head",
                ac,
                self.num_classes,
                1,
                1,
                1,
                false,
                Activation::None,
            ),
        ];

        let mut pose = Vec::new();
        let mut pc = fc;
        for i in 0..self.pose_subnet_convs {
            pose.push(LayerSpec::conv(
                &format!("pose{i}"),
                pc,
                self.head_channels,
                3,
                1,
                1,
                true,
                Activation::Relu,
            ));
            pc = self.head_channels;
        }
        pose.push(LayerSpec::conv(
            "pose.head",
            pc,
            self.num_keypoints,
            1,
            1,
            1,
            false,
            Activation::None,
        ));

        let mut refine = Vec::new();
        let mut rc = fc + self.num_classes + self.num_keypoints;
        for i in 0..self.refine_subnet_convs {
            refine.push(LayerSpec::conv(
                &format!("ref{i}"),
                rc,
                self.head_channels,
                3,
                1,
                1,
                true,
                Activation::Relu,
            ));
            rc = self.head_channels;
        }
        refine.push(LayerSpec::conv(
            "ref.head",
            rc,
            self.num_classes,
            1,
            1,
            1,
            false,
            Activation::None,
        ));

        ParsingPlans {
            backbone,
            aspp_branches,
            parsing_head,
            pose,
            refine,
        }
    }
}

/// The layer plans for every subnet; the conformance tests introspect these.
pub struct ParsingPlans {
    pub backbone: Vec<LayerSpec>,
    pub aspp_branches: Vec<Vec<LayerSpec>>,
    pub parsing_head: Vec<LayerSpec>,
    pub pose: Vec<LayerSpec>,
    pub refine: Vec<LayerSpec>,
}

impl ParsingPlans {
    fn all(&self) -> Vec<&[LayerSpec]> {
        let mut v: Vec<&[LayerSpec]> = vec![&self.backbone];
        for b in &self.aspp_branches {
            v.push(b);
        }
        v.push(&self.parsing_head);
        v.push(&self.pose);
        v.push(&self.refine);
        v
    }
}

pub fn init_parsing_params(config: &ParsingNetConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for plan in config.plans().all() {
        nn::register_plan(&mut store, &mut rng, plan);
    }
    store
}

#[derive(Debug, Clone)]
pub struct ParsingOutput {
    /// Initial class scores at the feature stride.
    pub p0: Array3<f64>,
    /// Pose heatmaps at the feature stride.
    pub h: Array3<f64>,
    /// Refined class scores at the feature stride.
    pub p: Array3<f64>,
    /// Argmax of `p` upsampled to the input size.
    pub label_map: Array2<usize>,
    /// Number of refinement passes executed (always 1).
    pub refinement_passes: usize,
}

struct ForwardVars {
    p0: Var,
    h: Var,
    p: Var,
    refinement_passes: usize,
}

fn forward_net(
    g: &mut Graph,
    config: &ParsingNetConfig,
    bound: &BoundParams,
    ctx: &mut ForwardCtx,
    image: Var,
) -> ForwardVars {
    let plans = config.plans();
    let feat = forward_plan(g, bound, ctx, &plans.backbone, image);
    let branches: Vec<Var> = plans
        .aspp_branches
        .iter()
        .map(|b| forward_plan(g, bound, ctx, b, feat))
        .collect();
    let fused = g.concat(&branches, 0);
    let p0 = forward_plan(g, bound, ctx, &plans.parsing_head, fused);
    let h = forward_plan(g, bound, ctx, &plans.pose, feat);
    let mut passes = 0;
    let p = {
        passes += 1;
        let stacked = g.concat(&[feat, p0, h], 0);
        forward_plan(g, bound, ctx, &plans.refine, stacked)
    };
    ForwardVars {
        p0,
        h,
        p,
        refinement_passes: passes,
    }
}

/// Run the parsing network on a masked image. One refinement pass, no
/// iteration; `label_map` is the argmax of the bilinearly upsampled refined
/// scores.
pub fn parse_forward(
    masked_image: &Array3<f64>,
    mask: &HoleMask,
    checkpoint: &Checkpoint,
) -> Result<ParsingOutput> {
    checkpoint.expect_kind(NetKind::Parsing)?;
    let config: ParsingNetConfig = checkpoint.config()?;
    config.validate()?;
    let (c, hh, ww) = masked_image.dim();
    if c != 3 {
        return Err(Error::shape(
            "3 channels",
            format!("{c}"),
            "parse_forward input",
        ));
    }
    if mask.mask.dim() != (hh, ww) {
        return Err(Error::shape(
            format!("{hh}x{ww}"),
            format!("{:?}", mask.mask.dim()),
            "parse_forward mask",
        ));
    }
    let stride = config.stride();
    if hh % stride != 0 || ww % stride != 0 {
        return Err(Error::shape(
            format!("size divisible by {stride}"),
            format!("{hh}x{ww}"),
            "parse_forward input",
        ));
    }
    let mut g = Graph::new();
    let img = g.constant(masked_image.clone().into_dyn());
    let bound = checkpoint.params.bind(&mut g);
    let mut ctx = ForwardCtx::eval();
    let out = forward_net(&mut g, &config, &bound, &mut ctx, img);
    let to3 = |g: &Graph, v: Var| -> Array3<f64> {
        g.value(v)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
    };
    let p = to3(&g, out.p);
    let p_full = data::bilinear_resize(&p, hh, ww);
    let mut label_map = Array2::zeros((hh, ww));
    for y in 0..hh {
        for x in 0..ww {
            let mut best = 0;
            for ci in 1..config.num_classes {
                if p_full[[ci, y, x]] > p_full[[best, y, x]] {
                    best = ci;
                }
            }
            label_map[[y, x]] = best;
        }
    }
    Ok(ParsingOutput {
        p0: to3(&g, out.p0),
        h: to3(&g, out.h),
        p,
        label_map,
        refinement_passes: out.refinement_passes,
    })
}

/// Hole-weighted softmax cross-entropy:
/// `(1/(W·H)) Σ (α·m + 1) · CE(scores, target)`.
pub fn spatial_weighted_loss(
    scores: &Array3<f64>,
    target: &Array2<usize>,
    mask: &Array2<u8>,
    alpha: f64,
) -> Result<f64> {
    let (c, h, w) = scores.dim();
    if target.dim() != (h, w) || mask.dim() != (h, w) {
        return Err(Error::shape(
            format!("{h}x{w}"),
            format!("{:?} / {:?}", target.dim(), mask.dim()),
            "spatial_weighted_loss",
        ));
    }
    if alpha < 0.0 {
        return Err(Error::Validation("alpha must be >= 0".into()));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= c) {
        return Err(Error::Validation(format!(
            "target label {bad} >= {c} classes"
        )));
    }
    let mut g = Graph::new();
    let s = g.constant(scores.clone().into_dyn());
    let loss = swl_var(&mut g, s, target, mask, alpha);
    Ok(g.scalar_value(loss))
}

/// Graph-side form of the weighted loss for training.
pub fn swl_var(
    g: &mut Graph,
    scores: Var,
    target: &Array2<usize>,
    mask: &Array2<u8>,
    alpha: f64,
) -> Var {
    let weights = mask.mapv(|m| alpha * m as f64 + 1.0);
    g.spatial_weighted_ce(scores, target.clone(), weights)
}

/// Mean squared heatmap error.
pub fn pose_loss(h_pred: &Array3<f64>, h_gt: &Array3<f64>) -> Result<f64> {
    if h_pred.dim() != h_gt.dim() {
        return Err(Error::shape(
            format!("{:?}", h_gt.dim()),
            format!("{:?}", h_pred.dim()),
            "pose_loss",
        ));
    }
    let n = h_pred.len() as f64;
    Ok(h_pred
        .iter()
        .zip(h_gt.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Downsample a pixel mask to the feature grid by nearest sampling.
fn downsample_mask(mask: &Array2<u8>, nh: usize, nw: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((nh, nw), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / nh as f64) as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / nw as f64) as usize;
        mask[[sy.min(h - 1), sx.min(w - 1)]]
    })
}

/// Train the parsing network with SGD + momentum. Loss per step:
/// weighted CE on p0 and p plus the pose MSE.
pub fn train_parsing(
    dataset: &[LabeledPortrait],
    config: &ParsingNetConfig,
    lr: f64,
    momentum: f64,
    epochs: usize,
    seed: u64,
) -> Result<Checkpoint> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("train_parsing: empty dataset".into()));
    }
    let stride = config.stride();
    let (_, hh, ww) = dataset[0].image.dim();
    if hh % stride != 0 || ww % stride != 0 {
        return Err(Error::shape(
            format!("size divisible by {stride}"),
            format!("{hh}x{ww}"),
            "train_parsing dataset",
        ));
    }
    let (fh, fw) = (hh / stride, ww / stride);
    let sigma = data::heatmap_sigma(hh) / stride as f64;

    let mut params = init_parsing_params(config, seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut opt = SgdMomentum::new(lr, momentum);
    let mut trace = Vec::with_capacity(epochs);

    for _epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for sample in dataset {
            let hole = sample_hole_mask(sample, &mut mask_rng, MaskMode::TrainRandom, (hh, ww))?;
            let masked = apply_mask(&sample.image, &hole, [0.0; 3])?;
            let target = data::nearest_resize_labels(&sample.labels, fh, fw);
            let mask_ds = downsample_mask(&hole.mask, fh, fw);
            let kps: Vec<_> = sample
                .keypoints
                .iter()
                .map(|k| data::Keypoint {
                    x: k.x / stride as f64,
                    y: k.y / stride as f64,
                    visible: k.visible,
                })
                .collect();
            let h_gt = make_pose_heatmaps(&kps, sigma, (fh, fw));

            let mut g = Graph::new();
            let img = g.constant(masked.into_dyn());
            let bound = params.bind(&mut g);
            let mut ctx = ForwardCtx::train();
            let out = forward_net(&mut g, config, &bound, &mut ctx, img);
            let l0 = swl_var(&mut g, out.p0, &target, &mask_ds, config.alpha);
            let l1 = swl_var(&mut g, out.p, &target, &mask_ds, config.alpha);
            let hgt = g.constant(h_gt.into_dyn());
            let lp = g.mse(out.h, hgt);
            let lp = g.scale(lp, config.pose_loss_weight);
            let sum01 = g.add(l0, l1);
            let loss = g.add(sum01, lp);
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("non-finite parsing loss {lv}")));
            }
            epoch_loss += lv;
            let grads = g.backward(loss);
            let by_name = bound.grads(&grads);
            opt.step(&mut params, &by_name);
            apply_stat_updates(&mut params, &ctx.stat_updates, 0.1);
        }
        trace.push(epoch_loss / dataset.len() as f64);
    }

    let mut ckpt = Checkpoint::new(
        NetKind::Parsing,
        params,
        serde_json::to_string(config).expect("config serializes"),
    );
    ckpt.rng_state = serde_json::to_vec(&mask_rng).expect("rng serializes");
    ckpt.loss_trace = trace;
    Ok(ckpt)
}

/// Mean IoU over the classes present in gt ∪ pred (within the region).
pub fn mean_iou(
    pred_labels: &Array2<usize>,
    gt_labels: &Array2<usize>,
    region: Option<&Array2<u8>>,
) -> Result<f64> {
    if pred_labels.dim() != gt_labels.dim() {
        return Err(Error::shape(
            format!("{:?}", gt_labels.dim()),
            format!("{:?}", pred_labels.dim()),
            "mean_iou",
        ));
    }
    let (h, w) = gt_labels.dim();
    let nc = pred_labels.iter().chain(gt_labels.iter()).max().unwrap() + 1;
    let mut inter = vec![0usize; nc];
    let mut union = vec![0usize; nc];
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if region.map(|r| r[[y, x]] != 0).unwrap_or(true) {
                count += 1;
                let (p, t) = (pred_labels[[y, x]], gt_labels[[y, x]]);
                if p == t {
                    inter[p] += 1;
                    union[p] += 1;
                } else {
                    union[p] += 1;
                    union[t] += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Precondition("mean_iou region is empty".into()));
    }
    let mut total = 0.0;
    let mut classes = 0usize;
    for c in 0..nc {
        if union[c] > 0 {
            total += inter[c] as f64 / union[c] as f64;
            classes += 1;
        }
    }
    Ok(total / classes as f64)
}

/// Fill + parse convenience used by the pipeline and the CLI.
pub fn parse_with_fill(
    image: &Array3<f64>,
    mask: &HoleMask,
    mean_pixel: [f64; 3],
    checkpoint: &Checkpoint,
) -> Result<ParsingOutput> {
    let masked = apply_mask(image, mask, mean_pixel)?;
    parse_forward(&masked, mask, checkpoint)
}

/// Scores for a one-hot parsing of the given label map (used to condition
/// Stage II on ground-truth parsing in tests).
pub fn one_hot_scores(labels: &Array2<usize>, num_classes: usize) -> Array3<f64> {
    let (h, w) = labels.dim();
    let mut out = Array3::zeros((num_classes, h, w));
    for y in 0..h {
        for x in 0..w {
            out[[labels[[y, x]], y, x]] = 1.0;
        }
    }
    out
}
