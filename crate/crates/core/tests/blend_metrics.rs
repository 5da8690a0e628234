use ndarray::{Array2, Array3};

use portraitfill::blend::{poisson_blend, poisson_blend_with, residual_ratio, BlendProblem};
use portraitfill::exec::Parallelism;
use portraitfill::metrics::{frechet_distance, l1_error, psnr, ssim, EvalReport, PSNR_CAP_DB};

fn smooth_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let fy = y as f64 / h as f64;
        let fx = x as f64 / w as f64;
        let s = seed as f64 * 0.37 + c as f64;
        0.6 * ((fy * (3.0 + s)).sin() * (fx * (2.0 + s * 0.5)).cos())
    })
}

fn center_mask(h: usize, w: usize) -> Array2<u8> {
    Array2::from_shape_fn((h, w), |(y, x)| {
        u8::from(y >= h / 4 && y < 3 * h / 4 && x >= w / 4 && x < 3 * w / 4)
    })
}

// ---- poisson blending ----

#[test]
fn empty_mask_returns_target() {
    let p = BlendProblem::new(
        smooth_image(1, 32, 32),
        smooth_image(2, 32, 32),
        Array2::zeros((32, 32)),
    );
    assert_eq!(poisson_blend(&p).unwrap(), p.target);
}

#[test]
fn source_equal_target_returns_target() {
    let img = smooth_image(3, 32, 32);
    let p = BlendProblem::new(img.clone(), img.clone(), center_mask(32, 32));
    let out = poisson_blend(&p).unwrap();
    for (a, b) in out.iter().zip(img.iter()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn constant_offset_source_recovers_target() {
    let target = smooth_image(4, 64, 64);
    let source = target.mapv(|v| v + 0.2);
    let p = BlendProblem::new(source, target.clone(), center_mask(64, 64));
    let out = poisson_blend(&p).unwrap();
    for (a, b) in out.iter().zip(target.iter()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn boundary_pixels_are_bit_exact() {
    let p = BlendProblem::new(
        smooth_image(5, 64, 64),
        smooth_image(6, 64, 64),
        center_mask(64, 64),
    );
    let out = poisson_blend(&p).unwrap();
    for y in 0..64 {
        for x in 0..64 {
            if p.mask[[y, x]] == 0 {
                for c in 0..3 {
                    assert!(out[[c, y, x]].to_bits() == p.target[[c, y, x]].to_bits());
                }
            }
        }
    }
}

#[test]
fn residual_ratio_meets_tolerance_on_64x64() {
    let p = BlendProblem::new(
        smooth_image(7, 64, 64),
        smooth_image(8, 64, 64),
        center_mask(64, 64),
    );
    let out = poisson_blend(&p).unwrap();
    let ratio = residual_ratio(&p, &out);
    assert!(ratio <= 1e-6, "residual ratio {ratio}");
}

#[test]
fn harmonic_interior_respects_maximum_principle() {
    // linear-ramp source has zero Laplacian, so the solution is harmonic and
    // bounded by its boundary values
    let target = smooth_image(9, 48, 48);
    let source =
        Array3::from_shape_fn((3, 48, 48), |(_, y, x)| (y as f64 + 2.0 * x as f64) / 100.0);
    let mask = center_mask(48, 48);
    let p = BlendProblem::new(source, target.clone(), mask.clone());
    let out = poisson_blend(&p).unwrap();
    for c in 0..3 {
        let mut bmin = f64::MAX;
        let mut bmax = f64::MIN;
        for y in 0..48 {
            for x in 0..48 {
                if mask[[y, x]] == 0 {
                    let adjacent = [
                        (y.wrapping_sub(1), x),
                        (y + 1, x),
                        (y, x.wrapping_sub(1)),
                        (y, x + 1),
                    ]
                    .iter()
                    .any(|&(ny, nx)| ny < 48 && nx < 48 && mask[[ny, nx]] == 1);
                    if adjacent {
                        bmin = bmin.min(target[[c, y, x]]);
                        bmax = bmax.max(target[[c, y, x]]);
                    }
                }
            }
        }
        for y in 0..48 {
            for x in 0..48 {
                if mask[[y, x]] == 1 {
                    let v = out[[c, y, x]];
                    assert!(
                        v >= bmin - 1e-6 && v <= bmax + 1e-6,
                        "{v} outside [{bmin},{bmax}]"
                    );
                }
            }
        }
    }
}

#[test]
fn nonconvergence_is_reported_with_residual() {
    let mut p = BlendProblem::new(
        smooth_image(10, 64, 64),
        smooth_image(11, 64, 64),
        center_mask(64, 64),
    );
    p.max_iterations = 1;
    let err = poisson_blend(&p).unwrap_err().to_string();
    assert!(err.contains("converge"), "{err}");
}

#[test]
fn parallel_solve_matches_sequential_bitwise() {
    let p = BlendProblem::new(
        smooth_image(12, 48, 48),
        smooth_image(13, 48, 48),
        center_mask(48, 48),
    );
    let seq = poisson_blend_with(&p, Parallelism::Sequential).unwrap();
    let par = poisson_blend_with(&p, Parallelism::default()).unwrap();
    assert_eq!(seq, par);
}

// ---- metrics ----

fn pseudo_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
    Array3::from_shape_fn((3, h, w), |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

#[test]
fn l1_zero_for_identical_and_255_for_full_range() {
    let a = pseudo_image(1, 8, 8);
    assert_eq!(l1_error(&a, &a, None).unwrap(), 0.0);
    let lo = Array3::from_elem((3, 8, 8), -1.0);
    let hi = Array3::from_elem((3, 8, 8), 1.0);
    assert!((l1_error(&lo, &hi, None).unwrap() - 255.0).abs() < 1e-12);
}

#[test]
fn l1_matches_scalar_oracle() {
    let a = pseudo_image(2, 4, 4);
    let b = pseudo_image(3, 4, 4);
    let mut sum = 0.0;
    for c in 0..3 {
        for y in 0..4 {
            for x in 0..4 {
                sum += (a[[c, y, x]] - b[[c, y, x]]).abs() * 127.5;
            }
        }
    }
    let oracle = sum / 48.0;
    assert!((l1_error(&a, &b, None).unwrap() - oracle).abs() < 1e-10);
    assert!((l1_error(&a, &b, None).unwrap() - l1_error(&b, &a, None).unwrap()).abs() < 1e-12);
}

#[test]
fn l1_region_restriction_and_empty_region_error() {
    let a = pseudo_image(4, 8, 8);
    let mut b = a.clone();
    b[[0, 0, 0]] += 0.4;
    let mut region = Array2::<u8>::zeros((8, 8));
    region[[7, 7]] = 1;
    // difference lies outside the region
    assert_eq!(l1_error(&a, &b, Some(&region)).unwrap(), 0.0);
    let empty = Array2::<u8>::zeros((8, 8));
    assert!(l1_error(&a, &b, Some(&empty)).is_err());
}

#[test]
fn psnr_cap_and_zero_db() {
    let a = pseudo_image(5, 8, 8);
    assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP_DB);
    let lo = Array3::from_elem((3, 8, 8), -1.0);
    let hi = Array3::from_elem((3, 8, 8), 1.0);
    assert!((psnr(&lo, &hi, None).unwrap()).abs() < 1e-12);
}

#[test]
fn psnr_matches_formula_and_decreases_with_mse() {
    let a = pseudo_image(6, 8, 8);
    let b = pseudo_image(7, 8, 8);
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = (x - y) * 127.5;
        sum += d * d;
    }
    let mse = sum / a.len() as f64;
    let oracle = 10.0 * (255.0f64 * 255.0 / mse).log10();
    assert!((psnr(&a, &b, None).unwrap() - oracle).abs() < 1e-9);

    let mut last = f64::MAX;
    for amp in [0.01, 0.05, 0.2, 0.5] {
        let shifted = a.mapv(|v| v + amp);
        let p = psnr(&a, &shifted, None).unwrap();
        assert!(p < last, "psnr must strictly decrease with mse");
        last = p;
    }
}

#[test]
fn ssim_identical_is_one_and_inversion_is_negative() {
    let a = pseudo_image(8, 16, 16);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    // strong zero-mean pattern against its negation
    let pat = Array3::from_shape_fn(
        (3, 16, 16),
        |(_, y, x)| if (y + x) % 2 == 0 { 0.8 } else { -0.8 },
    );
    let neg = pat.mapv(|v| -v);
    assert!(ssim(&pat, &neg).unwrap() < 0.0);
}

#[test]
fn ssim_rejects_images_smaller_than_window() {
    let a = pseudo_image(9, 8, 8);
    assert!(ssim(&a, &a).is_err());
}

#[test]
fn ssim_matches_windowed_oracle_on_16x16() {
    let a = pseudo_image(10, 16, 16);
    let b = pseudo_image(11, 16, 16);
    // independent direct evaluation of the windowed formula
    let sigma: f64 = 1.5;
    let mut win = vec![0.0; 121];
    let mut wsum = 0.0;
    for i in 0..11 {
        for j in 0..11 {
            let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp();
            win[i * 11 + j] = v;
            wsum += v;
        }
    }
    for v in &mut win {
        *v /= wsum;
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut total = 0.0;
    let mut count = 0;
    for ch in 0..3 {
        for y in 0..=5 {
            for x in 0..=5 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        ma += win[i * 11 + j] * (a[[ch, y + i, x + j]] + 1.0) * 127.5;
                        mb += win[i * 11 + j] * (b[[ch, y + i, x + j]] + 1.0) * 127.5;
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let da = (a[[ch, y + i, x + j]] + 1.0) * 127.5 - ma;
                        let db = (b[[ch, y + i, x + j]] + 1.0) * 127.5 - mb;
                        va += win[i * 11 + j] * da * da;
                        vb += win[i * 11 + j] * db * db;
                        cov += win[i * 11 + j] * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    let oracle = total / count as f64;
    assert!((ssim(&a, &b).unwrap() - oracle).abs() < 1e-6);
}

#[test]
fn frechet_identical_sets_are_zero() {
    let f = Array2::from_shape_fn((20, 3), |(i, j)| (i as f64 * 0.3 + j as f64).sin());
    assert!(frechet_distance(&f, &f).unwrap() < 1e-6);
}

#[test]
fn frechet_one_dimensional_analytic_case() {
    // sample mean 0, sample variance 1 (ddof = 1)
    let r = (0.5f64).sqrt();
    let a = Array2::from_shape_vec((2, 1), vec![-r, r]).unwrap();
    let b = a.mapv(|v| v + 1.0);
    let d = frechet_distance(&a, &b).unwrap();
    assert!((d - 1.0).abs() < 1e-4, "{d}");
}

#[test]
fn frechet_matches_closed_form_for_diagonal_gaussians() {
    // independent columns => diagonal covariances => closed form
    // d² = Σ (μa-μb)² + Σ (σa + σb − 2·sqrt(σa·σb))
    let n = 64;
    let mut a = Array2::zeros((n, 2));
    let mut b = Array2::zeros((n, 2));
    for i in 0..n {
        let t = i as f64 / n as f64 * std::f64::consts::TAU;
        a[[i, 0]] = 2.0 * t.sin();
        a[[i, 1]] = 0.5 * (3.0 * t).sin();
        b[[i, 0]] = 1.0 + 0.7 * t.sin();
        b[[i, 1]] = -0.5 + 1.3 * (3.0 * t).sin();
    }
    let stats = |f: &Array2<f64>, c: usize| {
        let mu = f.column(c).sum() / n as f64;
        let var =
            f.column(c).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1) as f64 + 1e-6;
        (mu, var)
    };
    let mut oracle = 0.0;
    for c in 0..2 {
        let (ma, va) = stats(&a, c);
        let (mb, vb) = stats(&b, c);
        oracle += (ma - mb).powi(2) + va + vb - 2.0 * (va * vb).sqrt();
    }
    let d = frechet_distance(&a, &b).unwrap();
    assert!((d - oracle).abs() < 1e-4, "{d} vs {oracle}");
    let d_rev = frechet_distance(&b, &a).unwrap();
    assert!((d - d_rev).abs() < 1e-8);
}

#[test]
fn frechet_rejects_non_finite() {
    let mut f = Array2::zeros((4, 2));
    f[[0, 0]] = f64::NAN;
    assert!(frechet_distance(&f, &Array2::zeros((4, 2))).is_err());
}

#[test]
fn report_aggregates_equal_mean_of_samples() {
    let report = EvalReport {
        sample_count: 3,
        l1_entire: vec![1.0, 2.5, 4.0],
        ..Default::default()
    };
    let agg = EvalReport::aggregate(&report.l1_entire);
    let mean = (1.0 + 2.5 + 4.0) / 3.0;
    assert!((agg - mean).abs() < 1e-12);
    assert!(report.to_text().contains("l1_entire=2.500000"));
}
