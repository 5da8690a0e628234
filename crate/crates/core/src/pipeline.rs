//! Orchestration: run configs, the three-stage inference chain
//! (parse → complete → face → blend) and the extrapolation driver.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blend::{poisson_blend, BlendProblem};
use crate::checkpoint::{Checkpoint, NetKind};
use crate::completion::{infer_multi_hole_with, GeneratorConfig};
use crate::data::{apply_mask, DatasetConfig, HoleMask};
use crate::error::{Error, Result};
use crate::face::{refine_face, FaceConfig};
use crate::parsing::{parse_forward, ParsingNetConfig};

// ---- run config ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub parsing: ParsingNetConfig,
    pub generator: GeneratorConfig,
    pub perception: crate::completion::PerceptionConfig,
    pub loss: crate::completion::CompletionLossConfig,
    pub face: FaceConfig,
    pub seed: u64,
    pub epochs: usize,
    pub lr_parse: f64,
    pub momentum: f64,
    pub lr_complete: f64,
    pub lr_face: f64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            parsing: ParsingNetConfig::default(),
            generator: GeneratorConfig::default(),
            perception: crate::completion::PerceptionConfig::default(),
            loss: crate::completion::CompletionLossConfig::default(),
            face: FaceConfig::default(),
            seed: 0,
            epochs: 1,
            lr_parse: 1e-4,
            momentum: 0.9,
            lr_complete: 2e-4,
            lr_face: 2e-4,
            out_dir: PathBuf::from("out"),
        }
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| Error::Validation(format!("bad config: {e}")))
}

// ---- inference chain ----

pub struct PipelineCheckpoints {
    pub parsing: Checkpoint,
    pub generator: Checkpoint,
    pub face: Option<Checkpoint>,
}

impl PipelineCheckpoints {
    fn validate(&self) -> Result<()> {
        self.parsing.expect_kind(NetKind::Parsing)?;
        self.generator.expect_kind(NetKind::Generator)?;
        if let Some(f) = &self.face {
            f.expect_kind(NetKind::Face)?;
        }
        Ok(())
    }
}

/// Instrumented stage log; order is part of the pipeline contract.
#[derive(Debug, Clone, PartialEq)]
pub enum StageEvent {
    Parse,
    Complete { forward_passes: usize },
    FaceRefined,
    FaceSkipped { reason: String },
    Blend { holes: usize },
}

pub struct InferenceOutcome {
    pub image: Array3<f64>,
    pub parsing: Array2<usize>,
    pub stages: Vec<StageEvent>,
}

/// Reflect-pad to a multiple of `stride` on both axes (bottom/right).
fn reflect_pad(image: &Array3<f64>, stride: usize) -> (Array3<f64>, usize, usize) {
    let (c, h, w) = image.dim();
    let nh = h.div_ceil(stride) * stride;
    let nw = w.div_ceil(stride) * stride;
    if (nh, nw) == (h, w) {
        return (image.clone(), h, w);
    }
    let mut out = Array3::zeros((c, nh, nw));
    for ch in 0..c {
        for y in 0..nh {
            let sy = if y < h {
                y
            } else {
                2 * h - 2 - y.min(2 * h - 2)
            };
            for x in 0..nw {
                let sx = if x < w {
                    x
                } else {
                    2 * w - 2 - x.min(2 * w - 2)
                };
                out[[ch, y, x]] = image[[ch, sy, sx]];
            }
        }
    }
    (out, h, w)
}

fn pad_mask(mask: &HoleMask, nh: usize, nw: usize) -> HoleMask {
    let (h, w) = mask.mask.dim();
    if (nh, nw) == (h, w) {
        return mask.clone();
    }
    let mut m = Array2::zeros((nh, nw));
    m.slice_mut(s![..h, ..w]).assign(&mask.mask);
    HoleMask {
        mask: m,
        holes: mask.holes.clone(),
    }
}

pub fn run_inference(
    image: &Array3<f64>,
    mask: &HoleMask,
    checkpoints: &PipelineCheckpoints,
    mean_pixel: [f64; 3],
) -> Result<InferenceOutcome> {
    run_inference_with(image, mask, checkpoints, mean_pixel, None)
}

/// As [`run_inference`]; a dropout rng keeps generator dropout live
/// (extrapolation-mode sampling).
pub fn run_inference_with(
    image: &Array3<f64>,
    mask: &HoleMask,
    checkpoints: &PipelineCheckpoints,
    mean_pixel: [f64; 3],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<InferenceOutcome> {
    checkpoints.validate()?;
    let (_, h, w) = image.dim();
    if mask.mask.dim() != (h, w) {
        return Err(Error::shape(
            format!("{h}x{w}"),
            format!("{:?}", mask.mask.dim()),
            "run_inference mask",
        ));
    }
    if mask.is_empty() {
        return Ok(InferenceOutcome {
            image: image.clone(),
            parsing: Array2::zeros((h, w)),
            stages: Vec::new(),
        });
    }

    let parse_cfg: ParsingNetConfig = checkpoints.parsing.config()?;
    let stride = parse_cfg.stride().max(GeneratorConfig::STRIDE);
    let (padded, oh, ow) = reflect_pad(image, stride);
    let (_, ph, pw) = padded.dim();
    let pmask = pad_mask(mask, ph, pw);
    let mut stages = Vec::new();

    let masked = apply_mask(&padded, &pmask, mean_pixel)?;
    let parsed = parse_forward(&masked, &pmask, &checkpoints.parsing)?;
    stages.push(StageEvent::Parse);

    let completed = infer_multi_hole_with(
        &masked,
        &parsed.label_map,
        &pmask,
        &checkpoints.generator,
        dropout_rng,
    )?;
    stages.push(StageEvent::Complete {
        forward_passes: completed.forward_passes,
    });
    let mut result = completed.image;

    match &checkpoints.face {
        Some(face_ckpt) => {
            let face_cfg: FaceConfig = face_ckpt.config()?;
            match crate::face::face_center(&parsed.label_map, &face_cfg.face_classes) {
                Ok(_) => {
                    result = refine_face(&result, &parsed.label_map, &pmask, face_ckpt)?;
                    // the residual window may spill over known pixels;
                    // re-composite so the outside-mask contract holds
                    for y in 0..ph {
                        for x in 0..pw {
                            if pmask.mask[[y, x]] == 0 {
                                for c in 0..3 {
                                    result[[c, y, x]] = masked[[c, y, x]];
                                }
                            }
                        }
                    }
                    stages.push(StageEvent::FaceRefined);
                }
                Err(e) => stages.push(StageEvent::FaceSkipped {
                    reason: e.to_string(),
                }),
            }
        }
        None => stages.push(StageEvent::FaceSkipped {
            reason: "no face checkpoint".into(),
        }),
    }

    // Poisson-blend each hole against the original content
    let mut blended = 0usize;
    for hole in &pmask.holes {
        let mut hole_mask = Array2::zeros((ph, pw));
        let mut any = false;
        for y in hole.y0..(hole.y0 + hole.h).min(ph) {
            for x in hole.x0..(hole.x0 + hole.w).min(pw) {
                if pmask.mask[[y, x]] != 0 {
                    hole_mask[[y, x]] = 1u8;
                    any = true;
                }
            }
        }
        if !any {
            continue;
        }
        let problem = BlendProblem::new(result.clone(), padded.clone(), hole_mask);
        let solved = poisson_blend(&problem)?;
        // keep only the hole interior from the solve
        for y in hole.y0..(hole.y0 + hole.h).min(ph) {
            for x in hole.x0..(hole.x0 + hole.w).min(pw) {
                if pmask.mask[[y, x]] != 0 {
                    for c in 0..3 {
                        result[[c, y, x]] = solved[[c, y, x]];
                    }
                }
            }
        }
        blended += 1;
    }
    stages.push(StageEvent::Blend { holes: blended });

    // exact outside-mask preservation from the original input
    let mut out = image.clone();
    for y in 0..oh {
        for x in 0..ow {
            if mask.mask[[y, x]] != 0 {
                for c in 0..3 {
                    out[[c, y, x]] = result[[c, y, x]].clamp(-1.0, 1.0);
                }
            }
        }
    }
    let parsing = parsed.label_map.slice(s![..oh, ..ow]).to_owned();
    Ok(InferenceOutcome {
        image: out,
        parsing,
        stages,
    })
}

// ---- extrapolation ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtrapDirection {
    Down,
    Up,
}

/// Rows appended for a canvas of height `h`.
pub fn extrapolation_rows(h: usize, direction: ExtrapDirection) -> usize {
    match direction {
        ExtrapDirection::Down => 64 * h / 256,
        ExtrapDirection::Up => 32 * h / 256,
    }
    .max(1)
}

pub fn extrapolate(
    image: &Array3<f64>,
    direction: ExtrapDirection,
    checkpoints: &PipelineCheckpoints,
    mean_pixel: [f64; 3],
    seed: u64,
) -> Result<InferenceOutcome> {
    let gen_cfg: GeneratorConfig = checkpoints.generator.config()?;
    if !gen_cfg.extrapolation_mode {
        return Err(Error::Validation(
            "extrapolate requires a checkpoint trained in extrapolation mode".into(),
        ));
    }
    let (c, h, w) = image.dim();
    let n = extrapolation_rows(h, direction);
    let mut canvas = Array3::zeros((c, h + n, w));
    for ch in 0..c {
        canvas
            .index_axis_mut(ndarray::Axis(0), ch)
            .fill(mean_pixel[ch]);
    }
    let (dst0, strip0) = match direction {
        ExtrapDirection::Down => (0, h),
        ExtrapDirection::Up => (n, 0),
    };
    canvas.slice_mut(s![.., dst0..dst0 + h, ..]).assign(image);
    let strip = crate::data::BoxRect {
        x0: 0,
        y0: strip0,
        w,
        h: n,
    };
    let mask = HoleMask::from_boxes(h + n, w, vec![strip]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcome = run_inference_with(&canvas, &mask, checkpoints, mean_pixel, Some(&mut rng))?;
    debug_assert_eq!(
        outcome.image.slice(s![.., dst0..dst0 + h, ..]),
        image.view()
    );
    Ok(outcome)
}
