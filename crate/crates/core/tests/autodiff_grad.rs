//! Finite-difference checks for every differentiable op in the engine.

use ndarray::{ArrayD, IxDyn};
use portraitfill::tensor::{Arr, ConvCfg, ConvTCfg, Graph, Var};

fn pseudo(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Arr {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            lo + (hi - lo) * ((state >> 11) as f64 / (1u64 << 53) as f64)
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}

/// Check d(scalar f)/d(inputs[i]) against central differences for each input.
fn check_grad<F>(inputs: &[Arr], f: F, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);

    let eps = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("missing grad").clone();
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            *plus[i].as_slice_mut().unwrap().get_mut(idx).unwrap() += eps;
            *minus[i].as_slice_mut().unwrap().get_mut(idx).unwrap() -= eps;
            let eval = |ins: &[Arr]| {
                let mut gg = Graph::new();
                let vs: Vec<Var> = ins.iter().map(|a| gg.leaf(a.clone(), false)).collect();
                let l = f(&mut gg, &vs);
                gg.scalar_value(l)
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < tol,
                "input {i} elem {idx}: fd {fd} vs analytic {an}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let a = pseudo(&[2, 3, 3], 1, -1.0, 1.0);
    let b = pseudo(&[2, 3, 3], 2, -1.0, 1.0);
    check_grad(
        &[a.clone(), b.clone()],
        |g, v| {
            let s = g.add(v[0], v[1]);
            let m = g.mul(s, v[0]);
            let t = g.tanh(m);
            let sc = g.scale(t, 0.7);
            let n = g.neg(sc);
            let p = g.add_scalar(n, 2.0);
            let l = g.ln(p);
            g.sum_all(l)
        },
        1e-6,
    );
    check_grad(
        &[a.clone()],
        |g, v| {
            let r = g.leaky_relu(v[0], 0.2);
            let s = g.sigmoid(r);
            g.sum_squares(s)
        },
        1e-5,
    );
    check_grad(
        &[a],
        |g, v| {
            let r = g.relu(v[0]);
            g.mean_all(r)
        },
        1e-4,
    );
}

#[test]
fn clamp_passes_gradient_inside_range() {
    let a = pseudo(&[8], 3, -0.4, 0.4);
    check_grad(
        &[a],
        |g, v| {
            let c = g.clamp(v[0], -0.9, 0.9);
            g.sum_squares(c)
        },
        1e-6,
    );
}

#[test]
fn concat_and_crop() {
    let a = pseudo(&[2, 4, 4], 4, -1.0, 1.0);
    let b = pseudo(&[3, 4, 4], 5, -1.0, 1.0);
    check_grad(
        &[a, b],
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 0);
            let cr = g.crop(c, 1, 0, 2, 3);
            g.sum_squares(cr)
        },
        1e-6,
    );
}

#[test]
fn conv2d_grads() {
    let x = pseudo(&[2, 6, 5], 6, -1.0, 1.0);
    let w = pseudo(&[3, 2, 3, 3], 7, -0.5, 0.5);
    let b = pseudo(&[3], 8, -0.2, 0.2);
    for cfg in [
        ConvCfg::new(3, 1, 1, 1),
        ConvCfg::new(3, 2, 1, 1),
        ConvCfg::new(3, 1, 2, 2),
    ] {
        check_grad(
            &[x.clone(), w.clone(), b.clone()],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), cfg);
                g.sum_squares(y)
            },
            1e-5,
        );
    }
}

#[test]
fn conv_transpose2d_grads() {
    let x = pseudo(&[2, 4, 3], 9, -1.0, 1.0);
    let w = pseudo(&[2, 3, 3, 3], 10, -0.5, 0.5);
    let b = pseudo(&[3], 11, -0.2, 0.2);
    let cfg = ConvTCfg {
        kernel: 3,
        stride: 2,
        pad: 1,
        out_pad: 1,
    };
    check_grad(
        &[x, w, b],
        move |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), cfg);
            g.sum_squares(y)
        },
        1e-5,
    );
}

#[test]
fn instance_norm_grads() {
    let x = pseudo(&[2, 4, 4], 12, -1.0, 1.0);
    let gamma = pseudo(&[2], 13, 0.5, 1.5);
    let beta = pseudo(&[2], 14, -0.3, 0.3);
    check_grad(
        &[x, gamma, beta],
        |g, v| {
            let y = g.instance_norm(v[0], v[1], v[2], 1e-5);
            let t = g.tanh(y);
            g.sum_squares(t)
        },
        1e-4,
    );
}

#[test]
fn channel_affine_grads() {
    let x = pseudo(&[3, 3, 3], 15, -1.0, 1.0);
    check_grad(
        &[x],
        |g, v| {
            let y = g.channel_affine(v[0], vec![0.5, -1.2, 2.0], vec![0.1, 0.0, -0.4]);
            g.sum_squares(y)
        },
        1e-6,
    );
}

#[test]
fn spatial_ce_grads() {
    let scores = pseudo(&[4, 3, 3], 16, -2.0, 2.0);
    let target = ndarray::Array2::from_shape_fn((3, 3), |(i, j)| (i * 2 + j) % 4);
    let weights =
        ndarray::Array2::from_shape_fn((3, 3), |(i, j)| if (i + j) % 2 == 0 { 10.0 } else { 1.0 });
    check_grad(
        &[scores],
        move |g, v| g.spatial_weighted_ce(v[0], target.clone(), weights.clone()),
        1e-5,
    );
}

#[test]
fn dropout_mask_grads() {
    let x = pseudo(&[2, 3, 3], 17, -1.0, 1.0);
    let mask = pseudo(&[2, 3, 3], 18, 0.0, 2.0).mapv(|v| if v > 1.0 { 2.0 } else { 0.0 });
    check_grad(
        &[x],
        move |g, v| {
            let y = g.dropout(v[0], mask.clone());
            g.sum_squares(y)
        },
        1e-6,
    );
}

#[test]
fn mse_composite() {
    let a = pseudo(&[2, 3, 3], 19, -1.0, 1.0);
    let b = pseudo(&[2, 3, 3], 20, -1.0, 1.0);
    check_grad(&[a, b], |g, v| g.mse(v[0], v[1]), 1e-6);
}
