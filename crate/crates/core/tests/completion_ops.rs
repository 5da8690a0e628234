use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use portraitfill::checkpoint::{Checkpoint, NetKind};
use portraitfill::completion::{
    build_extractor, combine_components, complete_forward, completion_loss, crop_local,
    discriminator_forward, discriminator_plan, gan_losses, infer_multi_hole, init_discriminator,
    init_generator_params, parsing_to_gray, perceptual_loss, train_completion,
    CompletionLossConfig, DiscriminatorConfig, ExtractorKind, GeneratorConfig, ParsingSource,
    PerceptionConfig,
};
use portraitfill::data::{generate_synthetic_figures, BoxRect, HoleMask};
use portraitfill::nn::LayerSpec;

fn tiny_gen() -> GeneratorConfig {
    GeneratorConfig {
        base_channels: 4,
        n_front_resblocks: 2,
        dilation_rates: vec![2, 4],
        n_back_resblocks: 2,
        ..Default::default()
    }
}

fn gen_checkpoint(cfg: &GeneratorConfig, seed: u64) -> Checkpoint {
    Checkpoint::new(
        NetKind::Generator,
        init_generator_params(cfg, seed),
        serde_json::to_string(cfg).unwrap(),
    )
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_simple_fn((c, h, w), || rng.gen_range(-1.0..1.0))
}

// ---- complete_forward ----

#[test]
fn forward_output_matches_size_and_tanh_range() {
    let cfg = tiny_gen();
    let ckpt = gen_checkpoint(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (h, w) in [(32, 32), (32, 80)] {
        let img = random_image(&mut rng, 3, h, w);
        let parsing = Array2::from_shape_simple_fn((h, w), || rng.gen_range(0..7));
        let mask = HoleMask::from_boxes(
            h,
            w,
            vec![BoxRect {
                x0: 4,
                y0: 4,
                w: 8,
                h: 8,
            }],
        );
        let out = complete_forward(&img, &parsing, &mask, &ckpt).unwrap();
        assert_eq!(out.dim(), (3, h, w));
        assert!(out
            .iter()
            .all(|&v| (-1.0..=1.0).contains(&v) && v.is_finite()));
    }
}

#[test]
fn forward_rejects_indivisible_and_wrong_channel_inputs() {
    let cfg = tiny_gen();
    let ckpt = gen_checkpoint(&cfg, 3);
    let parsing = Array2::zeros((30, 30));
    let mask = HoleMask::empty(30, 30);
    assert!(complete_forward(&Array3::zeros((3, 30, 30)), &parsing, &mask, &ckpt).is_err());
    let parsing = Array2::zeros((32, 32));
    let mask = HoleMask::empty(32, 32);
    assert!(complete_forward(&Array3::zeros((4, 32, 32)), &parsing, &mask, &ckpt).is_err());
}

#[test]
fn generator_plan_shape_contract() {
    let cfg = GeneratorConfig::default();
    let plan = cfg.plan();
    // 7-channel input, kernel-7 first and last, all others kernel 3 or 4-free
    match &plan[0] {
        LayerSpec::Conv { in_ch, kernel, .. } => {
            assert_eq!(*in_ch, 7);
            assert_eq!(*kernel, 7);
        }
        other => panic!("unexpected first layer {other:?}"),
    }
    match plan.last().unwrap() {
        LayerSpec::Conv { kernel, out_ch, .. } => {
            assert_eq!(*kernel, 7);
            assert_eq!(*out_ch, 3);
        }
        other => panic!("unexpected last layer {other:?}"),
    }
    let stride2_down = plan
        .iter()
        .filter(|l| matches!(l, LayerSpec::Conv { stride: 2, .. }))
        .count();
    let stride2_up = plan
        .iter()
        .filter(|l| matches!(l, LayerSpec::Deconv { stride: 2, .. }))
        .count();
    assert_eq!(stride2_down, 2, "downsamples to 1/4 resolution");
    assert_eq!(stride2_up, 2, "restores resolution");
    for l in &plan[1..plan.len() - 1] {
        if let LayerSpec::Conv { kernel, .. } | LayerSpec::Deconv { kernel, .. } = l {
            assert_eq!(*kernel, 3);
        }
    }
}

// ---- perceptual loss ----

#[test]
fn perceptual_identity_extractor_constant_offset() {
    let ex = build_extractor(&PerceptionConfig {
        kind: ExtractorKind::Identity,
        layer_count: 1,
    })
    .unwrap();
    let a = Array3::zeros((3, 4, 4));
    assert_eq!(perceptual_loss(&a, &a, &ex).unwrap(), 0.0);
    let b = a.mapv(|v| v + 0.5);
    let n = 48.0;
    assert!((perceptual_loss(&a, &b, &ex).unwrap() - n * 0.25).abs() < 1e-12);
}

#[test]
fn perceptual_random_extractor_matches_layerwise_oracle_and_is_symmetric() {
    let ex = build_extractor(&PerceptionConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_image(&mut rng, 3, 32, 32);
    let b = random_image(&mut rng, 3, 32, 32);
    let loss = perceptual_loss(&a, &b, &ex).unwrap();
    let fa = ex.features(&a);
    let fb = ex.features(&b);
    assert_eq!(fa.len(), 5);
    let mut oracle = 0.0;
    for (x, y) in fa.iter().zip(fb.iter()) {
        for (u, v) in x.iter().zip(y.iter()) {
            oracle += (u - v) * (u - v);
        }
    }
    assert!(
        (loss - oracle).abs() <= 1e-5 * oracle.max(1.0),
        "{loss} vs {oracle}"
    );
    let rev = perceptual_loss(&b, &a, &ex).unwrap();
    assert!((loss - rev).abs() < 1e-9);
    assert!(loss >= 0.0);
}

// ---- crop_local ----

#[test]
fn local_crop_centered_and_corner_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = random_image(&mut rng, 3, 256, 256);
    let gray = Array2::zeros((256, 256));
    let central = BoxRect {
        x0: 96,
        y0: 96,
        w: 64,
        h: 64,
    };
    let (patch, _, win) = crop_local(&img, &gray, &central);
    assert_eq!(patch.dim(), (3, 128, 128));
    assert_eq!((win.y0, win.x0), (64, 64));
    let corner = BoxRect {
        x0: 0,
        y0: 0,
        w: 10,
        h: 10,
    };
    let (_, _, win) = crop_local(&img, &gray, &corner);
    assert_eq!((win.y0, win.x0, win.h, win.w), (0, 0, 128, 128));
}

#[test]
fn local_crop_always_in_bounds_and_contains_center_over_1000_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(16..200) * 2, rng.gen_range(16..200) * 2);
        let bw = rng.gen_range(1..=w);
        let bh = rng.gen_range(1..=h);
        let hole = BoxRect {
            x0: rng.gen_range(0..=w - bw),
            y0: rng.gen_range(0..=h - bh),
            w: bw,
            h: bh,
        };
        let win = portraitfill::completion::local_patch_window(&hole, h, w);
        assert!(win.y0 + win.h <= h && win.x0 + win.w <= w);
        let (cy, cx) = hole.center();
        assert!(
            (win.y0..win.y0 + win.h).contains(&cy) && (win.x0..win.x0 + win.w).contains(&cx),
            "{hole:?} -> {win:?}"
        );
    }
}

// ---- discriminators ----

#[test]
fn discriminator_layer_counts_follow_input_size() {
    for (size, n) in [(256, 7), (128, 6), (64, 5), (32, 4)] {
        let plan = discriminator_plan(&DiscriminatorConfig {
            input_size: size,
            base_channels: 8,
        });
        assert_eq!(plan.len(), n, "size {size}");
        for (i, l) in plan.iter().enumerate() {
            let LayerSpec::Conv { kernel, stride, .. } = l else {
                panic!("non-conv layer")
            };
            assert_eq!(*kernel, 4);
            assert_eq!(*stride, if i + 1 == plan.len() { 1 } else { 2 });
        }
    }
}

#[test]
fn zeroed_final_layer_gives_exactly_half() {
    let mut d = init_discriminator(
        DiscriminatorConfig {
            input_size: 32,
            base_channels: 4,
        },
        0,
    )
    .unwrap();
    let last = d.plan.len() - 1;
    d.params.get_mut(&format!("d{last}.w")).fill(0.0);
    d.params.get_mut(&format!("d{last}.b")).fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random_image(&mut rng, 3, 32, 32);
    let gray = Array2::zeros((32, 32));
    assert_eq!(discriminator_forward(&d, &img, &gray).unwrap(), 0.5);
}

#[test]
fn discriminator_rejects_wrong_size_and_stays_finite() {
    let d = init_discriminator(
        DiscriminatorConfig {
            input_size: 32,
            base_channels: 4,
        },
        5,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!(discriminator_forward(
        &d,
        &random_image(&mut rng, 3, 16, 16),
        &Array2::zeros((16, 16))
    )
    .is_err());
    for _ in 0..20 {
        let p = discriminator_forward(
            &d,
            &random_image(&mut rng, 3, 32, 32),
            &Array2::zeros((32, 32)),
        )
        .unwrap();
        assert!(p.is_finite() && (0.0..1.0).contains(&p));
    }
}

// ---- gan losses ----

#[test]
fn gan_loss_analytic_points() {
    let (d, g) = gan_losses(0.5, 0.5);
    assert!((d - 2.0 * 2.0f64.ln()).abs() < 1e-12);
    assert!((g - 2.0f64.ln()).abs() < 1e-12);
    let (d, _) = gan_losses(1.0, 0.0);
    assert!(d < 1e-5, "{d}");
}

#[test]
fn g_loss_gradient_matches_finite_differences() {
    let f = 0.37;
    let eps = 1e-6;
    let fd = (gan_losses(0.5, f + eps).1 - gan_losses(0.5, f - eps).1) / (2.0 * eps);
    let analytic = -1.0 / f;
    assert!((fd - analytic).abs() < 1e-4 * analytic.abs());
}

// ---- completion loss ----

#[test]
fn completion_loss_degenerate_weights_and_component_sum() {
    let ex = build_extractor(&PerceptionConfig::default()).unwrap();
    let dg = init_discriminator(
        DiscriminatorConfig {
            input_size: 32,
            base_channels: 4,
        },
        7,
    )
    .unwrap();
    let dl = init_discriminator(
        DiscriminatorConfig {
            input_size: 16,
            base_channels: 4,
        },
        8,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let result = random_image(&mut rng, 3, 32, 32);
    let gt = random_image(&mut rng, 3, 32, 32);
    let gray = Array2::zeros((32, 32));
    let hole = BoxRect {
        x0: 8,
        y0: 8,
        w: 8,
        h: 8,
    };

    let only_p = CompletionLossConfig {
        lambda_p: 100.0,
        lambda_g: 0.0,
        lambda_l: 0.0,
    };
    let c = completion_loss(&result, &gt, &gray, &hole, &ex, &dg, Some(&dl), &only_p).unwrap();
    let lp = perceptual_loss(&gt, &result, &ex).unwrap();
    assert!((c.total - 100.0 * lp).abs() < 1e-10 * lp.max(1.0));

    let cfg = CompletionLossConfig::default();
    let c = completion_loss(&result, &gt, &gray, &hole, &ex, &dg, Some(&dl), &cfg).unwrap();
    let recomputed =
        cfg.lambda_p * c.perceptual + cfg.lambda_g * c.adv_global + cfg.lambda_l * c.adv_local;
    assert!((c.total - recomputed).abs() < 1e-10);
}

#[test]
fn completion_loss_with_half_probability_critics() {
    let ex = build_extractor(&PerceptionConfig::default()).unwrap();
    let mut dg = init_discriminator(
        DiscriminatorConfig {
            input_size: 32,
            base_channels: 4,
        },
        9,
    )
    .unwrap();
    let mut dl = init_discriminator(
        DiscriminatorConfig {
            input_size: 16,
            base_channels: 4,
        },
        10,
    )
    .unwrap();
    for d in [&mut dg, &mut dl] {
        let last = d.plan.len() - 1;
        d.params.get_mut(&format!("d{last}.w")).fill(0.0);
        d.params.get_mut(&format!("d{last}.b")).fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gt = random_image(&mut rng, 3, 32, 32);
    let gray = Array2::zeros((32, 32));
    let hole = BoxRect {
        x0: 8,
        y0: 8,
        w: 8,
        h: 8,
    };
    let c = completion_loss(
        &gt,
        &gt,
        &gray,
        &hole,
        &ex,
        &dg,
        Some(&dl),
        &CompletionLossConfig::default(),
    )
    .unwrap();
    assert!((c.total - 2.0 * 2.0f64.ln()).abs() < 1e-10, "{}", c.total);
}

// ---- training ----

#[test]
fn training_rejects_empty_dataset() {
    let r = train_completion(
        &[],
        ParsingSource::GroundTruth,
        &tiny_gen(),
        &PerceptionConfig::default(),
        &CompletionLossConfig::default(),
        2e-4,
        1,
        0,
    );
    assert!(r.is_err());
}

#[test]
fn training_is_deterministic_and_updates_local_critic() {
    let data = generate_synthetic_figures(3, 17, (32, 32), 7).unwrap();
    let run = || {
        train_completion(
            &data,
            ParsingSource::GroundTruth,
            &tiny_gen(),
            &PerceptionConfig::default(),
            &CompletionLossConfig::default(),
            2e-4,
            2,
            41,
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.generator.loss_trace, b.generator.loss_trace);
    assert_eq!(a.generator.params, b.generator.params);
    assert_eq!(a.local_updates, 6);
    assert!(a.disc_local.is_some());
}

#[test]
fn extrapolation_mode_never_updates_local_critic() {
    let data = generate_synthetic_figures(2, 19, (32, 32), 7).unwrap();
    let cfg = GeneratorConfig {
        extrapolation_mode: true,
        ..tiny_gen()
    };
    let out = train_completion(
        &data,
        ParsingSource::GroundTruth,
        &cfg,
        &PerceptionConfig::default(),
        &CompletionLossConfig::default(),
        2e-4,
        1,
        43,
    )
    .unwrap();
    assert_eq!(out.local_updates, 0);
    assert!(out.disc_local.is_none());
}

#[test]
fn every_generator_parameter_receives_gradient() {
    use portraitfill::nn::ForwardCtx;
    use portraitfill::tensor::Graph;

    let cfg = tiny_gen();
    let params = init_generator_params(&cfg, 23);
    let ex = build_extractor(&PerceptionConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = Array3::from_shape_simple_fn((7, 32, 32), || rng.gen_range(-1.0..1.0));
    let gt = random_image(&mut rng, 3, 32, 32);

    let mut g = Graph::new();
    let x = g.constant(input.into_dyn());
    let bound = params.bind(&mut g);
    let mut ctx = ForwardCtx::train();
    let out = portraitfill::nn::forward_plan(&mut g, &bound, &mut ctx, &cfg.plan(), x);
    let gtv = g.constant(gt.into_dyn());
    let loss = portraitfill::completion::perceptual_loss_var(&mut g, gtv, out, &ex);
    let grads = g.backward(loss);
    let by_name = bound.grads(&grads);
    for e in params.entries().iter().filter(|e| e.trainable) {
        let gr = by_name
            .get(&e.name)
            .unwrap_or_else(|| panic!("no grad for {}", e.name));
        assert!(gr.iter().any(|&v| v != 0.0), "all-zero grad for {}", e.name);
    }
}

// ---- multi-hole inference ----

#[test]
fn empty_mask_returns_input_unchanged() {
    let ckpt = gen_checkpoint(&tiny_gen(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = random_image(&mut rng, 3, 32, 32);
    let parsing = Array2::zeros((32, 32));
    let out = infer_multi_hole(&img, &parsing, &HoleMask::empty(32, 32), &ckpt).unwrap();
    assert_eq!(out.image, img);
    assert_eq!(out.forward_passes, 0);
}

#[test]
fn three_holes_filled_in_one_pass_with_exact_compositing() {
    let ckpt = gen_checkpoint(&tiny_gen(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = random_image(&mut rng, 3, 64, 64);
    let parsing = Array2::from_shape_simple_fn((64, 64), || rng.gen_range(0..7));
    let mask = HoleMask::from_boxes(
        64,
        64,
        vec![
            BoxRect {
                x0: 2,
                y0: 2,
                w: 8,
                h: 8,
            },
            BoxRect {
                x0: 40,
                y0: 8,
                w: 10,
                h: 12,
            },
            BoxRect {
                x0: 20,
                y0: 44,
                w: 12,
                h: 10,
            },
        ],
    );
    let masked = portraitfill::data::apply_mask(&img, &mask, [0.0; 3]).unwrap();
    let out = infer_multi_hole(&masked, &parsing, &mask, &ckpt).unwrap();
    assert_eq!(out.forward_passes, 1);
    for y in 0..64 {
        for x in 0..64 {
            for c in 0..3 {
                if mask.mask[[y, x]] == 0 {
                    assert_eq!(out.image[[c, y, x]], masked[[c, y, x]]);
                }
            }
        }
    }
    // synthesized content differs from the mean fill somewhere in each hole
    for b in &mask.holes {
        let mut changed = false;
        for y in b.y0..b.y0 + b.h {
            for x in b.x0..b.x0 + b.w {
                if (0..3).any(|c| out.image[[c, y, x]] != masked[[c, y, x]]) {
                    changed = true;
                }
            }
        }
        assert!(changed, "hole {b:?} untouched");
    }
}

// ---- conditioning ----

#[test]
fn parsing_gray_range_and_repetition() {
    let labels = Array2::from_shape_vec((1, 3), vec![0usize, 3, 6]).unwrap();
    let gray = parsing_to_gray(&labels, 7);
    assert_eq!(gray[[0, 0]], -1.0);
    assert_eq!(gray[[0, 1]], 0.0);
    assert_eq!(gray[[0, 2]], 1.0);
    let img = Array3::zeros((3, 1, 3));
    let mask = HoleMask::empty(1, 3);
    let stack = portraitfill::completion::stack_generator_input(&img, &gray, &mask).unwrap();
    assert_eq!(stack.dim(), (7, 1, 3));
    for ch in 3..6 {
        for x in 0..3 {
            assert_eq!(stack[[ch, 0, x]], gray[[0, x]]);
        }
    }
}

#[test]
fn degenerate_weight_combiner_is_exact() {
    let cfg = CompletionLossConfig {
        lambda_p: 100.0,
        lambda_g: 0.0,
        lambda_l: 0.0,
    };
    let c = combine_components(0.321, 5.0, 7.0, &cfg);
    assert_eq!(c.total, 100.0 * 0.321);
}
