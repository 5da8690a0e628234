//! Dataset ingestion, synthetic articulated-figure generation, hole-mask
//! sampling, augmentation and pose-heatmap rendering.
//!
//! Images are CHW `f64` in [-1,1]; labels are `H×W` class indices with 0 as
//! background. Disk layout: `root/images/<id>.png`, `root/labels/<id>.png`
//! (single channel, pixel value = class index) and `root/keypoints.json`
//! mapping id to a `K×3` array `[x, y, visible]`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};

pub const SYNTHETIC_NUM_CLASSES: usize = 7;
pub const SYNTHETIC_NUM_KEYPOINTS: usize = 16;
/// Class index of the head/face region in synthetic data.
pub const FACE_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPortrait {
    pub image: Array3<f64>,
    pub labels: Array2<usize>,
    pub keypoints: Vec<Keypoint>,
    pub source_id: String,
}

impl LabeledPortrait {
    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }

    pub fn validate(&self, num_classes: usize, num_keypoints: usize) -> Result<()> {
        let (c, h, w) = self.image.dim();
        if c != 3 {
            return Err(Error::Validation(format!(
                "{}: image must have 3 channels",
                self.source_id
            )));
        }
        if self.labels.dim() != (h, w) {
            return Err(Error::Validation(format!(
                "{}: image/label size mismatch",
                self.source_id
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!(
                "{}: label value {bad} >= num_classes {num_classes}",
                self.source_id
            )));
        }
        if self.keypoints.len() != num_keypoints {
            return Err(Error::Validation(format!(
                "{}: expected {num_keypoints} keypoints, got {}",
                self.source_id,
                self.keypoints.len()
            )));
        }
        for (i, k) in self.keypoints.iter().enumerate() {
            if k.visible && !(k.x >= 0.0 && k.x < w as f64 && k.y >= 0.0 && k.y < h as f64) {
                return Err(Error::Validation(format!(
                    "{}: keypoint {i} out of bounds ({}, {})",
                    self.source_id, k.x, k.y
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl BoxRect {
    pub fn center(&self) -> (usize, usize) {
        (self.y0 + self.h / 2, self.x0 + self.w / 2)
    }

    pub fn intersects(&self, other: &BoxRect) -> bool {
        self.x0 < other.x0 + other.w
            && other.x0 < self.x0 + self.w
            && self.y0 < other.y0 + other.h
            && other.y0 < self.y0 + self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoleMask {
    pub mask: Array2<u8>,
    pub holes: Vec<BoxRect>,
}

impl HoleMask {
    pub fn empty(h: usize, w: usize) -> Self {
        HoleMask {
            mask: Array2::zeros((h, w)),
            holes: Vec::new(),
        }
    }

    pub fn from_boxes(h: usize, w: usize, boxes: Vec<BoxRect>) -> Self {
        let mut mask = Array2::zeros((h, w));
        for b in &boxes {
            for y in b.y0..(b.y0 + b.h).min(h) {
                for x in b.x0..(b.x0 + b.w).min(w) {
                    mask[[y, x]] = 1;
                }
            }
        }
        HoleMask { mask, holes: boxes }
    }

    /// Decompose an arbitrary binary mask into connected components and their
    /// bounding boxes (used for free-form inference masks).
    pub fn from_mask(mask: Array2<u8>) -> Self {
        let (h, w) = mask.dim();
        let mut seen = Array2::<u8>::zeros((h, w));
        let mut holes = Vec::new();
        let mut stack = Vec::new();
        for sy in 0..h {
            for sx in 0..w {
                if mask[[sy, sx]] == 0 || seen[[sy, sx]] == 1 {
                    continue;
                }
                let (mut x0, mut x1, mut y0, mut y1) = (sx, sx, sy, sy);
                stack.push((sy, sx));
                seen[[sy, sx]] = 1;
                while let Some((y, x)) = stack.pop() {
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    let push = |yy: usize,
                                xx: usize,
                                seen: &mut Array2<u8>,
                                stack: &mut Vec<(usize, usize)>| {
                        if mask[[yy, xx]] == 1 && seen[[yy, xx]] == 0 {
                            seen[[yy, xx]] = 1;
                            stack.push((yy, xx));
                        }
                    };
                    if y > 0 {
                        push(y - 1, x, &mut seen, &mut stack);
                    }
                    if y + 1 < h {
                        push(y + 1, x, &mut seen, &mut stack);
                    }
                    if x > 0 {
                        push(y, x - 1, &mut seen, &mut stack);
                    }
                    if x + 1 < w {
                        push(y, x + 1, &mut seen, &mut stack);
                    }
                }
                holes.push(BoxRect {
                    x0,
                    y0,
                    w: x1 - x0 + 1,
                    h: y1 - y0 + 1,
                });
            }
        }
        HoleMask { mask, holes }
    }

    pub fn is_empty(&self) -> bool {
        self.mask.iter().all(|&m| m == 0)
    }

    /// Check the rectangle-mask invariants: box union equals the 1-pixel set
    /// and boxes are pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.mask.dim();
        let mut cover = Array2::<u8>::zeros((h, w));
        for (i, b) in self.holes.iter().enumerate() {
            for j in 0..i {
                if b.intersects(&self.holes[j]) {
                    return Err(Error::Validation(format!("hole boxes {j} and {i} overlap")));
                }
            }
            if b.x0 + b.w > w || b.y0 + b.h > h {
                return Err(Error::Validation(format!("hole box {i} out of bounds")));
            }
            for y in b.y0..b.y0 + b.h {
                for x in b.x0..b.x0 + b.w {
                    cover[[y, x]] = 1;
                }
            }
        }
        if cover != self.mask {
            return Err(Error::Validation(
                "box union differs from mask pixels".into(),
            ));
        }
        Ok(())
    }

    pub fn as_f64(&self) -> Array2<f64> {
        self.mask.mapv(|m| m as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    TrainRandom,
    Face,
    ExtrapDown,
    ExtrapUp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub split: String,
    pub num_classes: usize,
    pub num_keypoints: usize,
    pub image_size: usize,
    pub flip_label_pairs: Vec<(usize, usize)>,
    pub flip_keypoint_pairs: Vec<(usize, usize)>,
    pub mean_pixel: [f64; 3],
    pub scale_range: (f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: PathBuf::from("."),
            split: "train".into(),
            num_classes: SYNTHETIC_NUM_CLASSES,
            num_keypoints: SYNTHETIC_NUM_KEYPOINTS,
            image_size: 256,
            // head=1 torso=2 left-arm=3 right-arm=4 left-leg=5 right-leg=6
            flip_label_pairs: vec![(3, 4), (5, 6)],
            flip_keypoint_pairs: vec![(2, 3), (4, 5), (6, 7), (10, 11), (12, 13), (14, 15)],
            mean_pixel: [0.0, 0.0, 0.0],
            scale_range: (0.8, 1.2),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        for &(a, b) in &self.flip_label_pairs {
            if a >= self.num_classes || b >= self.num_classes {
                return Err(Error::Validation(format!(
                    "flip label pair ({a},{b}) out of range"
                )));
            }
        }
        for &(a, b) in &self.flip_keypoint_pairs {
            if a >= self.num_keypoints || b >= self.num_keypoints {
                return Err(Error::Validation(format!(
                    "flip keypoint pair ({a},{b}) out of range"
                )));
            }
        }
        if self.mean_pixel.iter().any(|m| !(-1.0..=1.0).contains(m)) {
            return Err(Error::Validation("mean_pixel must lie in [-1,1]^3".into()));
        }
        Ok(())
    }
}

// ---- PNG io ----

pub fn save_image_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (_, h, w) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| ((image[[c, y, x]] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_image_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = p[c] as f64 / 127.5 - 1.0;
            }
        }
    }
    Ok(out)
}

pub fn save_labels_png(path: &Path, labels: &Array2<usize>) -> Result<()> {
    let (h, w) = labels.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([labels[[y, x]] as u8]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_labels_png(path: &Path) -> Result<Array2<usize>> {
    let img = image::open(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as usize
    }))
}

/// Load a binary mask PNG (nonzero = unknown).
pub fn load_mask_png(path: &Path) -> Result<HoleMask> {
    let img = image::open(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask = Array2::from_shape_fn((h, w), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32)[0] != 0)
    });
    Ok(HoleMask::from_mask(mask))
}

// ---- dataset loading / saving ----

pub fn load_dataset(config: &DatasetConfig) -> Result<Vec<LabeledPortrait>> {
    config.validate()?;
    let images_dir = config.root.join("images");
    let labels_dir = config.root.join("labels");
    let kp_path = config.root.join("keypoints.json");
    if !images_dir.is_dir() {
        return Ok(Vec::new());
    }
    let keypoints: BTreeMap<String, Vec<[f64; 3]>> = if kp_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&kp_path)?).map_err(|e| Error::Load {
            path: kp_path.clone(),
            reason: e.to_string(),
        })?
    } else {
        BTreeMap::new()
    };
    let mut ids: Vec<String> = std::fs::read_dir(&images_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension().map(|x| x == "png").unwrap_or(false) {
                p.file_stem().map(|s| s.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    ids.sort();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let image = load_image_png(&images_dir.join(format!("{id}.png")))?;
        let label_path = labels_dir.join(format!("{id}.png"));
        if !label_path.exists() {
            return Err(Error::Load {
                path: label_path,
                reason: format!("missing label map for sample {id}"),
            });
        }
        let labels = load_labels_png(&label_path)?;
        let kps = keypoints
            .get(&id)
            .map(|rows| {
                rows.iter()
                    .map(|r| Keypoint {
                        x: r[0],
                        y: r[1],
                        visible: r[2] != 0.0,
                    })
                    .collect()
            })
            .unwrap_or_else(|| {
                vec![
                    Keypoint {
                        x: 0.0,
                        y: 0.0,
                        visible: false
                    };
                    config.num_keypoints
                ]
            });
        let sample = LabeledPortrait {
            image,
            labels,
            keypoints: kps,
            source_id: id,
        };
        sample.validate(config.num_classes, config.num_keypoints)?;
        out.push(sample);
    }
    Ok(out)
}

pub fn save_dataset(root: &Path, samples: &[LabeledPortrait]) -> Result<()> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("labels"))?;
    let mut kps: BTreeMap<String, Vec<[f64; 3]>> = BTreeMap::new();
    for s in samples {
        save_image_png(
            &root.join("images").join(format!("{}.png", s.source_id)),
            &s.image,
        )?;
        save_labels_png(
            &root.join("labels").join(format!("{}.png", s.source_id)),
            &s.labels,
        )?;
        kps.insert(
            s.source_id.clone(),
            s.keypoints
                .iter()
                .map(|k| [k.x, k.y, f64::from(u8::from(k.visible))])
                .collect(),
        );
    }
    std::fs::write(
        root.join("keypoints.json"),
        serde_json::to_string_pretty(&kps).unwrap(),
    )?;
    Ok(())
}

// ---- synthetic articulated figures ----

fn splitmix(seed: u64, i: u64) -> u64 {
    let mut z = seed.wrapping_add(i.wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

struct Capsule {
    a: (f64, f64), // (x, y)
    b: (f64, f64),
    radius: f64,
    class: usize,
    color: [f64; 3],
}

fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Deterministic synthetic stick figures: head, torso, two arms and two legs
/// as filled capsules on a textured background, with keypoints at the joints.
pub fn generate_synthetic_figures(
    count: usize,
    seed: u64,
    size: (usize, usize),
    num_classes: usize,
) -> Result<Vec<LabeledPortrait>> {
    let (h, w) = size;
    if h < 32 || w < 32 {
        return Err(Error::Precondition(format!(
            "size {h}x{w} too small for a figure (min 32x32)"
        )));
    }
    if num_classes < SYNTHETIC_NUM_CLASSES {
        return Err(Error::Precondition(format!(
            "need at least {SYNTHETIC_NUM_CLASSES} classes for the synthetic parts"
        )));
    }
    let samples = exec::map_indices(Parallelism::default(), count, |i| {
        render_figure(splitmix(seed, i as u64), h, w, i)
    });
    Ok(samples)
}

fn render_figure(seed: u64, h: usize, w: usize, index: usize) -> LabeledPortrait {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hf = h as f64;
    let wf = w as f64;
    let jit = |rng: &mut ChaCha8Rng, amp: f64| rng.gen_range(-amp..amp);

    let cx = wf * 0.5 + jit(&mut rng, wf * 0.06);
    let head_c = (
        cx + jit(&mut rng, wf * 0.02),
        hf * 0.15 + jit(&mut rng, hf * 0.02),
    );
    let head_r = hf * 0.075;
    let neck = (cx, hf * 0.25);
    let pelvis = (
        cx + jit(&mut rng, wf * 0.02),
        hf * 0.53 + jit(&mut rng, hf * 0.02),
    );
    let shoulder_dx = wf * 0.11;
    let l_sho = (cx - shoulder_dx, neck.1 + hf * 0.02);
    let r_sho = (cx + shoulder_dx, neck.1 + hf * 0.02);
    let arm_len = hf * 0.15;
    let arm_angle = |rng: &mut ChaCha8Rng, side: f64| {
        // angle from straight-down, spread outwards
        let a: f64 = rng.gen_range(0.15..0.9);
        (side * a.sin() * arm_len, a.cos() * arm_len)
    };
    let (dx, dy) = arm_angle(&mut rng, -1.0);
    let l_elb = (l_sho.0 + dx, l_sho.1 + dy);
    let (dx, dy) = arm_angle(&mut rng, -1.0);
    let l_wri = (l_elb.0 + dx * 0.9, l_elb.1 + dy * 0.9);
    let (dx, dy) = arm_angle(&mut rng, 1.0);
    let r_elb = (r_sho.0 + dx, r_sho.1 + dy);
    let (dx, dy) = arm_angle(&mut rng, 1.0);
    let r_wri = (r_elb.0 + dx * 0.9, r_elb.1 + dy * 0.9);
    let hip_dx = wf * 0.055;
    let l_hip = (pelvis.0 - hip_dx, pelvis.1);
    let r_hip = (pelvis.0 + hip_dx, pelvis.1);
    let leg_spread = |rng: &mut ChaCha8Rng, side: f64| side * rng.gen_range(0.0..wf * 0.06);
    let l_knee = (l_hip.0 + leg_spread(&mut rng, -1.0), hf * 0.73);
    let r_knee = (r_hip.0 + leg_spread(&mut rng, 1.0), hf * 0.73);
    let l_ank = (l_knee.0 + jit(&mut rng, wf * 0.03), hf * 0.92);
    let r_ank = (r_knee.0 + jit(&mut rng, wf * 0.03), hf * 0.92);
    let torso_center = ((neck.0 + pelvis.0) * 0.5, (neck.1 + pelvis.1) * 0.5);

    let clampk = |p: (f64, f64)| (p.0.clamp(0.0, wf - 1.0), p.1.clamp(0.0, hf - 1.0));
    let keypoints: Vec<Keypoint> = [
        (head_c.0, hf * 0.08), // head top
        neck,
        l_sho,
        r_sho,
        l_elb,
        r_elb,
        l_wri,
        r_wri,
        torso_center,
        pelvis,
        l_hip,
        r_hip,
        l_knee,
        r_knee,
        l_ank,
        r_ank,
    ]
    .into_iter()
    .map(|p| {
        let (x, y) = clampk(p);
        Keypoint {
            x: x.round(),
            y: y.round(),
            visible: true,
        }
    })
    .collect();

    // per-sample color jitter around a fixed palette
    let col = |base: [f64; 3], rng: &mut ChaCha8Rng| {
        let j = rng.gen_range(-0.12..0.12);
        [
            (base[0] + j).clamp(-1.0, 1.0),
            (base[1] + j).clamp(-1.0, 1.0),
            (base[2] + j).clamp(-1.0, 1.0),
        ]
    };
    let head_col = col([0.85, 0.55, 0.35], &mut rng);
    let torso_col = col([-0.2, 0.1, 0.7], &mut rng);
    let larm_col = col([0.7, -0.3, -0.3], &mut rng);
    let rarm_col = col([0.7, 0.5, -0.5], &mut rng);
    let lleg_col = col([-0.5, 0.5, -0.2], &mut rng);
    let rleg_col = col([-0.3, -0.6, 0.4], &mut rng);

    let arm_r = hf * 0.028;
    let leg_r = hf * 0.038;
    // draw order: legs, torso, arms, head (later wins)
    let capsules = vec![
        Capsule {
            a: l_hip,
            b: l_knee,
            radius: leg_r,
            class: 5,
            color: lleg_col,
        },
        Capsule {
            a: l_knee,
            b: l_ank,
            radius: leg_r,
            class: 5,
            color: lleg_col,
        },
        Capsule {
            a: r_hip,
            b: r_knee,
            radius: leg_r,
            class: 6,
            color: rleg_col,
        },
        Capsule {
            a: r_knee,
            b: r_ank,
            radius: leg_r,
            class: 6,
            color: rleg_col,
        },
        Capsule {
            a: neck,
            b: pelvis,
            radius: hf * 0.07,
            class: 2,
            color: torso_col,
        },
        Capsule {
            a: l_sho,
            b: l_elb,
            radius: arm_r,
            class: 3,
            color: larm_col,
        },
        Capsule {
            a: l_elb,
            b: l_wri,
            radius: arm_r,
            class: 3,
            color: larm_col,
        },
        Capsule {
            a: r_sho,
            b: r_elb,
            radius: arm_r,
            class: 4,
            color: rarm_col,
        },
        Capsule {
            a: r_elb,
            b: r_wri,
            radius: arm_r,
            class: 4,
            color: rarm_col,
        },
        Capsule {
            a: head_c,
            b: head_c,
            radius: head_r,
            class: 1,
            color: head_col,
        },
    ];

    // textured background: two-corner gradient plus a sinusoidal weave
    let g0: [f64; 3] = [
        rng.gen_range(-0.8..0.3),
        rng.gen_range(-0.8..0.3),
        rng.gen_range(-0.8..0.3),
    ];
    let g1: [f64; 3] = [
        rng.gen_range(-0.2..0.8),
        rng.gen_range(-0.2..0.8),
        rng.gen_range(-0.2..0.8),
    ];
    let freq = rng.gen_range(2.0..6.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut image = Array3::zeros((3, h, w));
    let mut labels = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let ty = y as f64 / hf;
            let tx = x as f64 / wf;
            let weave = 0.08
                * ((tx * freq * std::f64::consts::TAU + phase).sin()
                    + (ty * freq * std::f64::consts::TAU).cos());
            for c in 0..3 {
                image[[c, y, x]] = (g0[c] * (1.0 - ty) + g1[c] * ty + weave).clamp(-1.0, 1.0);
            }
            for cap in &capsules {
                if dist_to_segment(x as f64, y as f64, cap.a, cap.b) <= cap.radius {
                    labels[[y, x]] = cap.class;
                    for c in 0..3 {
                        image[[c, y, x]] = cap.color[c];
                    }
                }
            }
        }
    }

    LabeledPortrait {
        image,
        labels,
        keypoints,
        source_id: format!("synthetic_{index:05}"),
    }
}

// ---- hole-mask sampling ----

fn label_bbox(labels: &Array2<usize>, pred: impl Fn(usize) -> bool) -> Option<BoxRect> {
    let (h, w) = labels.dim();
    let (mut x0, mut x1, mut y0, mut y1) = (w, 0usize, h, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if pred(labels[[y, x]]) {
                any = true;
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    any.then(|| BoxRect {
        x0,
        y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

/// Sample a hole mask for one training/inference mode. Rectangle sizes follow
/// the 256-scale protocol (train sides in [64,128], face 32x32, extrapolation
/// strips of 64 and 32 rows) scaled proportionally to the image height.
pub fn sample_hole_mask(
    sample: &LabeledPortrait,
    rng: &mut ChaCha8Rng,
    mode: MaskMode,
    image_size: (usize, usize),
) -> Result<HoleMask> {
    let (h, w) = image_size;
    let scale = h as f64 / 256.0;
    match mode {
        MaskMode::ExtrapDown => {
            let rows = ((64.0 * scale).round() as usize).max(1);
            Ok(HoleMask::from_boxes(
                h,
                w,
                vec![BoxRect {
                    x0: 0,
                    y0: h - rows,
                    w,
                    h: rows,
                }],
            ))
        }
        MaskMode::ExtrapUp => {
            let rows = ((32.0 * scale).round() as usize).max(1);
            Ok(HoleMask::from_boxes(
                h,
                w,
                vec![BoxRect {
                    x0: 0,
                    y0: 0,
                    w,
                    h: rows,
                }],
            ))
        }
        MaskMode::TrainRandom => {
            let body = label_bbox(&sample.labels, |l| l > 0).ok_or_else(|| {
                Error::Precondition("train-random mask needs at least one body pixel".into())
            })?;
            let lo = ((64.0 * scale).round() as usize).clamp(1, h);
            let hi = ((128.0 * scale).round() as usize).clamp(lo, h);
            let rw = rng.gen_range(lo..=hi).min(w);
            let rh = rng.gen_range(lo..=hi).min(h);
            // rejection-sample a placement overlapping the body
            for _ in 0..64 {
                let x0 = rng.gen_range(0..=w - rw);
                let y0 = rng.gen_range(0..=h - rh);
                let cand = BoxRect {
                    x0,
                    y0,
                    w: rw,
                    h: rh,
                };
                if cand.intersects(&body) {
                    return Ok(HoleMask::from_boxes(h, w, vec![cand]));
                }
            }
            let (by, bx) = body.center();
            let x0 = bx.saturating_sub(rw / 2).min(w - rw);
            let y0 = by.saturating_sub(rh / 2).min(h - rh);
            Ok(HoleMask::from_boxes(
                h,
                w,
                vec![BoxRect {
                    x0,
                    y0,
                    w: rw,
                    h: rh,
                }],
            ))
        }
        MaskMode::Face => {
            let face = label_bbox(&sample.labels, |l| l == FACE_CLASS).ok_or_else(|| {
                Error::Precondition("face mask mode requires face-class pixels".into())
            })?;
            let side = ((32.0 * scale).round() as usize).max(1);
            let (rw, rh) = (side.min(w), side.min(h));
            let place = |lo: usize, extent: usize, r: usize, max: usize, rng: &mut ChaCha8Rng| {
                if extent >= r {
                    rng.gen_range(lo..=lo + extent - r)
                } else {
                    // face box smaller than the crop: center and clamp
                    (lo + extent / 2).saturating_sub(r / 2).min(max - r)
                }
            };
            let x0 = place(face.x0, face.w, rw, w, rng);
            let y0 = place(face.y0, face.h, rh, h, rng);
            Ok(HoleMask::from_boxes(
                h,
                w,
                vec![BoxRect {
                    x0,
                    y0,
                    w: rw,
                    h: rh,
                }],
            ))
        }
    }
}

// ---- augmentation ----

pub fn bilinear_resize(image: &Array3<f64>, nh: usize, nw: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, nh, nw));
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    for ci in 0..c {
        for y in 0..nh {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f64;
            for x in 0..nw {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f64;
                let v = image[[ci, y0, x0]] * (1.0 - ty) * (1.0 - tx)
                    + image[[ci, y0, x1]] * (1.0 - ty) * tx
                    + image[[ci, y1, x0]] * ty * (1.0 - tx)
                    + image[[ci, y1, x1]] * ty * tx;
                out[[ci, y, x]] = v;
            }
        }
    }
    out
}

pub fn nearest_resize_labels(labels: &Array2<usize>, nh: usize, nw: usize) -> Array2<usize> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((nh, nw), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / nh as f64 - 0.5)
            .round()
            .max(0.0) as usize)
            .min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / nw as f64 - 0.5)
            .round()
            .max(0.0) as usize)
            .min(w - 1);
        labels[[sy, sx]]
    })
}

/// Mirror image, labels (with class pair swap) and keypoints (with index
/// pair swap). Applying it twice restores the sample.
pub fn flip_sample(sample: &LabeledPortrait, config: &DatasetConfig) -> LabeledPortrait {
    let (c, h, w) = sample.image.dim();
    let mut image = Array3::zeros((c, h, w));
    let mut labels = Array2::zeros((h, w));
    let mut swap_class = vec![0usize; config.num_classes];
    for (i, s) in swap_class.iter_mut().enumerate() {
        *s = i;
    }
    for &(a, b) in &config.flip_label_pairs {
        swap_class[a] = b;
        swap_class[b] = a;
    }
    for y in 0..h {
        for x in 0..w {
            let sx = w - 1 - x;
            for ci in 0..c {
                image[[ci, y, x]] = sample.image[[ci, y, sx]];
            }
            labels[[y, x]] = swap_class[sample.labels[[y, sx]]];
        }
    }
    let mut keypoints: Vec<Keypoint> = sample
        .keypoints
        .iter()
        .map(|k| Keypoint {
            x: (w - 1) as f64 - k.x,
            y: k.y,
            visible: k.visible,
        })
        .collect();
    for &(a, b) in &config.flip_keypoint_pairs {
        keypoints.swap(a, b);
    }
    LabeledPortrait {
        image,
        labels,
        keypoints,
        source_id: sample.source_id.clone(),
    }
}

/// Random scale, crop back to the original size and left-right flip with
/// probability 1/2.
pub fn augment(
    sample: &LabeledPortrait,
    rng: &mut ChaCha8Rng,
    config: &DatasetConfig,
) -> LabeledPortrait {
    let (_, h, w) = sample.image.dim();
    let (lo, hi) = config.scale_range;
    let s = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let nh = ((h as f64 * s).round() as usize).max(1);
    let nw = ((w as f64 * s).round() as usize).max(1);
    let image_s = bilinear_resize(&sample.image, nh, nw);
    let labels_s = nearest_resize_labels(&sample.labels, nh, nw);
    let kscale_y = nh as f64 / h as f64;
    let kscale_x = nw as f64 / w as f64;

    // crop (or mean-pad when the scale shrank the canvas) back to h x w
    let off = |extent: usize, target: usize, rng: &mut ChaCha8Rng| -> (isize, usize) {
        if extent >= target {
            let max = extent - target;
            let o = if max > 0 { rng.gen_range(0..=max) } else { 0 };
            (o as isize, 0)
        } else {
            let pad = (target - extent) / 2;
            (-(pad as isize), pad)
        }
    };
    let (oy, _py) = off(nh, h, rng);
    let (ox, _px) = off(nw, w, rng);

    let mut image = Array3::from_shape_fn((3, h, w), |(c, _, _)| config.mean_pixel[c]);
    let mut labels = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let sy = y as isize + oy;
            let sx = x as isize + ox;
            if sy >= 0 && sx >= 0 && (sy as usize) < nh && (sx as usize) < nw {
                for c in 0..3 {
                    image[[c, y, x]] = image_s[[c, sy as usize, sx as usize]];
                }
                labels[[y, x]] = labels_s[[sy as usize, sx as usize]];
            }
        }
    }
    let keypoints: Vec<Keypoint> = sample
        .keypoints
        .iter()
        .map(|k| {
            let x = k.x * kscale_x - ox as f64;
            let y = k.y * kscale_y - oy as f64;
            let inside = x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64;
            Keypoint {
                x: if inside { x } else { 0.0 },
                y: if inside { y } else { 0.0 },
                visible: k.visible && inside,
            }
        })
        .collect();

    let out = LabeledPortrait {
        image,
        labels,
        keypoints,
        source_id: sample.source_id.clone(),
    };
    if rng.gen::<f64>() < 0.5 {
        flip_sample(&out, config)
    } else {
        out
    }
}

// ---- network input construction ----

/// Replace masked pixels with the dataset mean pixel.
pub fn apply_mask(
    image: &Array3<f64>,
    mask: &HoleMask,
    mean_pixel: [f64; 3],
) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if mask.mask.dim() != (h, w) {
        return Err(Error::shape(
            format!("{h}x{w}"),
            format!("{:?}", mask.mask.dim()),
            "apply_mask",
        ));
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.mask[[y, x]] == 1 {
                for ci in 0..c {
                    out[[ci, y, x]] = mean_pixel[ci];
                }
            }
        }
    }
    Ok(out)
}

/// Gaussian keypoint heatmaps with peak 1 at the (rounded) keypoint pixel;
/// invisible keypoints yield all-zero channels.
pub fn make_pose_heatmaps(keypoints: &[Keypoint], sigma: f64, size: (usize, usize)) -> Array3<f64> {
    assert!(sigma > 0.0);
    let (h, w) = size;
    let k = keypoints.len();
    let mut out = Array3::zeros((k, h, w));
    for (ki, kp) in keypoints.iter().enumerate() {
        if !kp.visible {
            continue;
        }
        let cy = kp.y.round();
        let cx = kp.x.round();
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                out[[ki, y, x]] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    out
}

/// Heatmap sigma for a given image height (3 px at 256, scaled).
pub fn heatmap_sigma(height: usize) -> f64 {
    (3.0 * height as f64 / 256.0).max(0.5)
}
