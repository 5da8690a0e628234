use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use portraitfill::checkpoint::{Checkpoint, NetKind};
use portraitfill::completion::{
    build_extractor, init_discriminator, init_generator_params, DiscriminatorConfig, ExtractorKind,
    GeneratorConfig, PerceptionConfig,
};
use portraitfill::data::{generate_synthetic_figures, HoleMask};
use portraitfill::face::{
    face_center, face_objective, face_window, init_face_params, refine_face, train_face, FaceConfig,
};
use portraitfill::metrics::l1_error;

fn tiny_gen() -> GeneratorConfig {
    GeneratorConfig {
        base_channels: 4,
        n_front_resblocks: 2,
        dilation_rates: vec![2, 4],
        n_back_resblocks: 2,
        ..Default::default()
    }
}

fn tiny_face() -> FaceConfig {
    FaceConfig {
        base_channels: 4,
        n_resblocks: 2,
        ..Default::default()
    }
}

fn face_checkpoint(cfg: &FaceConfig, seed: u64) -> Checkpoint {
    Checkpoint::new(
        NetKind::Face,
        init_face_params(cfg, seed),
        serde_json::to_string(cfg).unwrap(),
    )
}

// ---- face_center ----

#[test]
fn single_face_pixel_is_its_own_centroid() {
    let mut labels = Array2::zeros((32, 32));
    labels[[10, 20]] = 1usize;
    assert_eq!(face_center(&labels, &[1]).unwrap(), (10, 20));
}

#[test]
fn two_by_two_block_rounds_half_up() {
    let mut labels = Array2::zeros((32, 32));
    for y in 10..12 {
        for x in 20..22 {
            labels[[y, x]] = 1usize;
        }
    }
    // centroid (10.5, 20.5) -> (11, 21)
    assert_eq!(face_center(&labels, &[1]).unwrap(), (11, 21));
}

#[test]
fn no_face_pixels_is_an_error_not_a_crash() {
    let labels = Array2::<usize>::zeros((8, 8));
    assert!(face_center(&labels, &[1]).is_err());
}

// ---- refine_face ----

fn labels_with_face_at(h: usize, w: usize, cy: usize, cx: usize) -> Array2<usize> {
    let mut labels = Array2::zeros((h, w));
    labels[[cy, cx]] = 1usize;
    labels
}

#[test]
fn zero_weight_head_leaves_image_unchanged() {
    let cfg = tiny_face();
    let mut ckpt = face_checkpoint(&cfg, 1);
    ckpt.params.get_mut("f.out.w").fill(0.0);
    ckpt.params.get_mut("f.out.b").fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = Array3::from_shape_simple_fn((3, 64, 64), || rng.gen_range(-0.9..0.9));
    let labels = labels_with_face_at(64, 64, 30, 30);
    let out = refine_face(&img, &labels, &HoleMask::empty(64, 64), &ckpt).unwrap();
    assert_eq!(out, img);
}

#[test]
fn residual_changes_only_the_face_window() {
    let cfg = tiny_face();
    let ckpt = face_checkpoint(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Array3::from_shape_simple_fn((3, 64, 64), || rng.gen_range(-0.5..0.5));
    let labels = labels_with_face_at(64, 64, 30, 30);
    let out = refine_face(&img, &labels, &HoleMask::empty(64, 64), &ckpt).unwrap();
    let win = face_window(30, 30, 64, 64);
    assert_eq!(win.w, 16);
    let mut inside_changed = false;
    for y in 0..64 {
        for x in 0..64 {
            let inside =
                (win.y0..win.y0 + win.h).contains(&y) && (win.x0..win.x0 + win.w).contains(&x);
            for c in 0..3 {
                if inside {
                    inside_changed |= out[[c, y, x]] != img[[c, y, x]];
                } else {
                    assert_eq!(
                        out[[c, y, x]],
                        img[[c, y, x]],
                        "({c},{y},{x}) outside window"
                    );
                }
            }
        }
    }
    assert!(inside_changed);
    assert!(out.iter().all(|&v| (-1.0..=1.0).contains(&v)));
}

#[test]
fn corner_face_window_is_clamped() {
    let cfg = tiny_face();
    let ckpt = face_checkpoint(&cfg, 3);
    let img = Array3::zeros((3, 64, 64));
    let labels = labels_with_face_at(64, 64, 0, 0);
    let out = refine_face(&img, &labels, &HoleMask::empty(64, 64), &ckpt).unwrap();
    assert_eq!(out.dim(), (3, 64, 64));
    let win = face_window(0, 0, 64, 64);
    assert_eq!((win.y0, win.x0), (0, 0));
}

#[test]
fn refine_propagates_missing_face_error() {
    let ckpt = face_checkpoint(&tiny_face(), 4);
    let img = Array3::zeros((3, 64, 64));
    let labels = Array2::zeros((64, 64));
    assert!(refine_face(&img, &labels, &HoleMask::empty(64, 64), &ckpt).is_err());
}

// ---- objective ----

#[test]
fn lambda_zero_objective_is_adversarial_only() {
    let ex = build_extractor(&PerceptionConfig {
        kind: ExtractorKind::Identity,
        layer_count: 1,
    })
    .unwrap();
    let d = init_discriminator(
        DiscriminatorConfig {
            input_size: 16,
            base_channels: 4,
        },
        5,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Array3::from_shape_simple_fn((3, 16, 16), || rng.gen_range(-1.0..1.0));
    let b = Array3::from_shape_simple_fn((3, 16, 16), || rng.gen_range(-1.0..1.0));
    let gray = Array2::zeros((16, 16));
    let p = portraitfill::completion::discriminator_forward(&d, &b, &gray).unwrap();
    let obj = face_objective(&a, &b, &gray, &ex, &d, 0.0).unwrap();
    assert!((obj - (1.0 - p).ln()).abs() < 1e-12);
}

#[test]
fn objective_matches_scalar_oracle() {
    let ex = build_extractor(&PerceptionConfig::default()).unwrap();
    let d = init_discriminator(
        DiscriminatorConfig {
            input_size: 16,
            base_channels: 4,
        },
        6,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Array3::from_shape_simple_fn((3, 16, 16), || rng.gen_range(-1.0..1.0));
    let b = Array3::from_shape_simple_fn((3, 16, 16), || rng.gen_range(-1.0..1.0));
    let gray = Array2::zeros((16, 16));
    let lp = portraitfill::completion::perceptual_loss(&a, &b, &ex).unwrap();
    let p = portraitfill::completion::discriminator_forward(&d, &b, &gray).unwrap();
    let oracle = 10.0 * lp + (1.0 - p).ln();
    let obj = face_objective(&a, &b, &gray, &ex, &d, 10.0).unwrap();
    assert!((obj - oracle).abs() <= 1e-6 * oracle.abs().max(1.0));
}

// ---- training ----

fn gen_ckpt(seed: u64) -> Checkpoint {
    let cfg = tiny_gen();
    Checkpoint::new(
        NetKind::Generator,
        init_generator_params(&cfg, seed),
        serde_json::to_string(&cfg).unwrap(),
    )
}

#[test]
fn training_keeps_generator_frozen() {
    let data = generate_synthetic_figures(2, 51, (64, 64), 7).unwrap();
    let g = gen_ckpt(9);
    let out = train_face(
        &data,
        &g,
        &tiny_face(),
        &PerceptionConfig::default(),
        2e-4,
        1,
        11,
    )
    .unwrap();
    assert_eq!(out.g_hash_before, out.g_hash_after);
    assert_eq!(out.face.loss_trace.len(), 1);
}

#[test]
fn training_errors_without_face_samples() {
    let mut data = generate_synthetic_figures(2, 52, (64, 64), 7).unwrap();
    for s in &mut data {
        s.labels.mapv_inplace(|l| if l == 1 { 0 } else { l });
    }
    let g = gen_ckpt(9);
    assert!(train_face(
        &data,
        &g,
        &tiny_face(),
        &PerceptionConfig::default(),
        2e-4,
        1,
        11
    )
    .is_err());
}

#[test]
fn overfitting_reduces_face_window_l1() {
    let data = generate_synthetic_figures(4, 53, (64, 64), 7).unwrap();
    let g = gen_ckpt(13);
    let cfg = tiny_face();
    // identity extractor makes the perceptual term a pixel-space L2, the
    // cleanest way to verify the residual learns toward the ground truth
    let perc = PerceptionConfig {
        kind: ExtractorKind::Identity,
        layer_count: 1,
    };
    let trained = train_face(&data, &g, &cfg, &perc, 1e-3, 60, 17).unwrap();
    let mut before = 0.0;
    let mut after = 0.0;
    let mut n = 0.0;
    for s in &data {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hole = portraitfill::data::sample_hole_mask(
            s,
            &mut rng,
            portraitfill::data::MaskMode::Face,
            (64, 64),
        )
        .unwrap();
        let masked = portraitfill::data::apply_mask(&s.image, &hole, [0.0; 3]).unwrap();
        let completed =
            portraitfill::completion::complete_forward(&masked, &s.labels, &hole, &g).unwrap();
        let refined = refine_face(&completed, &s.labels, &hole, &trained.face).unwrap();
        let (cy, cx) = face_center(&s.labels, &[1]).unwrap();
        let win = face_window(cy, cx, 64, 64);
        let mut region = Array2::zeros((64, 64));
        for y in win.y0..win.y0 + win.h {
            for x in win.x0..win.x0 + win.w {
                region[[y, x]] = 1u8;
            }
        }
        before += l1_error(&completed, &s.image, Some(&region)).unwrap();
        after += l1_error(&refined, &s.image, Some(&region)).unwrap();
        n += 1.0;
    }
    assert!(
        after / n < before / n,
        "face-window L1 did not improve: {} -> {}",
        before / n,
        after / n
    );
}
