//! A small reverse-mode automatic differentiation engine over `f64` ndarrays.
//!
//! Nodes live in an arena ([`Graph`]); each op records the data its backward
//! pass needs. Networks rebuild the graph every step (define-by-run) and
//! parameters enter as gradient-requiring leaves. Everything is `f64` so the
//! same engine serves training and the finite-difference gradient checks.

pub mod conv;

use ndarray::{ArrayD, ArrayView2, ArrayViewD, Axis, IxDyn, Slice};

use crate::exec::Parallelism;
pub use conv::{ConvCfg, ConvTCfg};

pub type Arr = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Dropout(Var, Arr),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Crop {
        x: Var,
        y0: usize,
        x0: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cfg: ConvCfg,
        cols: ndarray::Array2<f64>,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cfg: ConvTCfg,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        xhat: Arr,
    },
    SpatialCe {
        scores: Var,
        target: ndarray::Array2<usize>,
        weights: ndarray::Array2<f64>,
        soft: Arr,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<f64>,
    },
    SumSquares(Var),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    value: Arr,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    par: Parallelism,
}

fn scalar(v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            par: Parallelism::default(),
        }
    }

    pub fn with_parallelism(par: Parallelism) -> Self {
        Graph {
            nodes: Vec::new(),
            par,
        }
    }

    pub fn parallelism(&self) -> Parallelism {
        self.par
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Arr, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Arr, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Arr) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().unwrap()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Elementwise multiply by a precomputed dropout mask (keep-scale baked in).
    pub fn dropout(&mut self, a: Var, mask: Arr) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.shape(), mask.shape());
        let v = &self.nodes[a.0].value * &mask;
        let rg = self.rg(a);
        self.push(v, Op::Dropout(a, mask), rg)
    }

    // ---- shape ----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<ArrayViewD<f64>> =
            parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Spatial crop of a CHW tensor.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        let v = self.nodes[x.0]
            .value
            .slice_axis(Axis(1), Slice::from(y0..y0 + h))
            .slice_axis(Axis(2), Slice::from(x0..x0 + w))
            .to_owned();
        let rg = self.rg(x);
        self.push(v, Op::Crop { x, y0, x0 }, rg)
    }

    // ---- structured ----

    /// 2-D convolution of a CHW input with an OIHW weight.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: ConvCfg) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (c_in, h, win) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        debug_assert_eq!(wv.shape()[1], c_in, "conv weight in-channels");
        let c_out = wv.shape()[0];
        let k = cfg.kernel;
        let (ho, wo) = cfg.out_size(h, win);
        let x3 = xv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let cols = conv::im2col(self.par, x3, cfg);
        let w_mat = wv
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .unwrap();
        let mut out = conv::matmul(self.par, w_mat, cols.view());
        if let Some(bv) = b {
            let bias = self.nodes[bv.0].value.clone();
            for (mut row, bb) in out.rows_mut().into_iter().zip(bias.iter()) {
                row.mapv_inplace(|v| v + bb);
            }
        }
        let v = out.into_shape_with_order(IxDyn(&[c_out, ho, wo])).unwrap();
        let rg = self.rg(x) || self.rg(w) || b.map(|bb| self.rg(bb)).unwrap_or(false);
        self.push(v, Op::Conv2d { x, w, b, cfg, cols }, rg)
    }

    /// Transposed 2-D convolution; weight layout IOHW (`C_in, C_out, k, k`).
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: ConvTCfg) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (c_in, h, win) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        debug_assert_eq!(wv.shape()[0], c_in, "convT weight in-channels");
        let c_out = wv.shape()[1];
        let k = cfg.kernel;
        let x_mat = xv.view().into_shape_with_order((c_in, h * win)).unwrap();
        let w_mat = wv
            .view()
            .into_shape_with_order((c_in, c_out * k * k))
            .unwrap();
        let w_t = w_mat.t().as_standard_layout().to_owned();
        let cols = conv::matmul(self.par, w_t.view(), x_mat);
        let mut out = conv::col2im_transposed(self.par, cols.view(), c_out, h, win, cfg);
        if let Some(bv) = b {
            let bias = self.nodes[bv.0].value.clone();
            for (mut plane, bb) in out.outer_iter_mut().zip(bias.iter()) {
                plane.mapv_inplace(|v| v + bb);
            }
        }
        let v = out.into_dyn();
        let rg = self.rg(x) || self.rg(w) || b.map(|bb| self.rg(bb)).unwrap_or(false);
        self.push(v, Op::ConvT2d { x, w, b, cfg }, rg)
    }

    /// Per-channel normalization over the spatial extent (batch size 1), with
    /// learned scale and shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let g = self.nodes[gamma.0].value.clone();
        let bt = self.nodes[beta.0].value.clone();
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(c);
        let n = (h * w) as f64;
        for mut plane in xhat.axis_iter_mut(Axis(0)) {
            let mean = plane.sum() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let istd = 1.0 / (var + eps).sqrt();
            plane.mapv_inplace(|v| (v - mean) * istd);
            inv_std.push(istd);
        }
        let mut out = xhat.clone();
        for (ci, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (gc, bc) = (g[ci], bt[ci]);
            plane.mapv_inplace(|v| v * gc + bc);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            },
            rg,
        )
    }

    /// Mean over pixels of `weights[i,j] * softmax-cross-entropy(scores[:,i,j], target[i,j])`.
    pub fn spatial_weighted_ce(
        &mut self,
        scores: Var,
        target: ndarray::Array2<usize>,
        weights: ndarray::Array2<f64>,
    ) -> Var {
        let sv = &self.nodes[scores.0].value;
        let (c, h, w) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
        debug_assert_eq!(target.dim(), (h, w));
        let mut soft = sv.clone();
        let mut total = 0.0;
        for i in 0..h {
            for j in 0..w {
                let mut maxv = f64::NEG_INFINITY;
                for ci in 0..c {
                    maxv = maxv.max(sv[[ci, i, j]]);
                }
                let mut denom = 0.0;
                for ci in 0..c {
                    denom += (sv[[ci, i, j]] - maxv).exp();
                }
                let log_denom = denom.ln() + maxv;
                for ci in 0..c {
                    soft[[ci, i, j]] = (sv[[ci, i, j]] - log_denom).exp();
                }
                let t = target[[i, j]];
                debug_assert!(t < c);
                total += weights[[i, j]] * (log_denom - sv[[t, i, j]]);
            }
        }
        let v = scalar(total / (h * w) as f64);
        let rg = self.rg(scores);
        self.push(
            v,
            Op::SpatialCe {
                scores,
                target,
                weights,
                soft,
            },
            rg,
        )
    }

    /// Per-channel `x * scale + shift` with constant coefficients (frozen
    /// normalization statistics at inference).
    pub fn channel_affine(&mut self, x: Var, scale: Vec<f64>, shift: Vec<f64>) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        for (ci, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (s, t) = (scale[ci], shift[ci]);
            plane.mapv_inplace(|v| v * s + t);
        }
        let rg = self.rg(x);
        self.push(out, Op::ChannelAffine { x, scale }, rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = scalar(self.nodes[a.0].value.iter().map(|x| x * x).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumSquares(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = scalar(self.nodes[a.0].value.sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let v = scalar(self.nodes[a.0].value.sum() / n);
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ss = self.sum_squares(d);
        let n = self.nodes[a.0].value.len() as f64;
        self.scale(ss, 1.0 / n)
    }

    // ---- backward ----

    /// Reverse-accumulate gradients from a scalar root. Returns per-node
    /// gradients; query with [`Graph::grad`] afterwards.
    pub fn backward(&mut self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, id: usize, g: &Arr, grads: &mut [Option<Arr>]) {
        let par = self.par;
        let acc = |grads: &mut [Option<Arr>], v: Var, delta: Arr| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = g * &self.nodes[b.0].value;
                let gb = g * &self.nodes[a.0].value;
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, c) => acc(grads, *a, g.mapv(|x| x * c)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Neg(a) => acc(grads, *a, g.mapv(|x| -x)),
            Op::Ln(a) => {
                let ga = g / &self.nodes[a.0].value;
                acc(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let xv = &self.nodes[a.0].value;
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga).and(xv).for_each(|gg, &x| {
                    if x <= *lo || x >= *hi {
                        *gg = 0.0;
                    }
                });
                acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let xv = &self.nodes[a.0].value;
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga).and(xv).for_each(|gg, &x| {
                    if x <= 0.0 {
                        *gg = 0.0;
                    }
                });
                acc(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let xv = &self.nodes[a.0].value;
                let mut ga = g.clone();
                ndarray::Zip::from(&mut ga).and(xv).for_each(|gg, &x| {
                    if x <= 0.0 {
                        *gg *= slope;
                    }
                });
                acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let yv = &self.nodes[id].value;
                let ga = g * &yv.mapv(|y| 1.0 - y * y);
                acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let yv = &self.nodes[id].value;
                let ga = g * &yv.mapv(|y| y * (1.0 - y));
                acc(grads, *a, ga);
            }
            Op::Dropout(a, mask) => acc(grads, *a, g * mask),
            Op::Concat { parts, axis } => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    let gp = g
                        .slice_axis(Axis(*axis), Slice::from(off..off + len))
                        .to_owned();
                    acc(grads, *p, gp);
                    off += len;
                }
            }
            Op::Crop { x, y0, x0 } => {
                let xs = self.nodes[x.0].value.shape();
                let (h, w) = (
                    self.nodes[id].value.shape()[1],
                    self.nodes[id].value.shape()[2],
                );
                let mut gx = ArrayD::zeros(IxDyn(xs));
                gx.slice_axis_mut(Axis(1), Slice::from(*y0..y0 + h))
                    .slice_axis_mut(Axis(2), Slice::from(*x0..x0 + w))
                    .assign(g);
                acc(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, cfg, cols } => {
                let wv = &self.nodes[w.0].value;
                let (c_out, c_in) = (wv.shape()[0], wv.shape()[1]);
                let k = cfg.kernel;
                let xs = self.nodes[x.0].value.shape();
                let (h, win) = (xs[1], xs[2]);
                let g_mat: ArrayView2<f64> = g
                    .view()
                    .into_shape_with_order((c_out, g.len() / c_out))
                    .unwrap();
                if self.nodes[w.0].requires_grad {
                    let cols_t = cols.t().as_standard_layout().to_owned();
                    let dw = conv::matmul(par, g_mat, cols_t.view());
                    acc(
                        grads,
                        *w,
                        dw.into_shape_with_order(IxDyn(&[c_out, c_in, k, k]))
                            .unwrap(),
                    );
                }
                if let Some(bv) = b {
                    if self.nodes[bv.0].requires_grad {
                        let db: Vec<f64> = g_mat.rows().into_iter().map(|r| r.sum()).collect();
                        acc(
                            grads,
                            *bv,
                            ArrayD::from_shape_vec(IxDyn(&[c_out]), db).unwrap(),
                        );
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let w_mat = wv
                        .view()
                        .into_shape_with_order((c_out, c_in * k * k))
                        .unwrap();
                    let w_t = w_mat.t().as_standard_layout().to_owned();
                    let dcols = conv::matmul(par, w_t.view(), g_mat);
                    let dx = conv::col2im(par, dcols.view(), c_in, h, win, *cfg);
                    acc(grads, *x, dx.into_dyn());
                }
            }
            Op::ConvT2d { x, w, b, cfg } => {
                let wv = &self.nodes[w.0].value;
                let (c_in, c_out) = (wv.shape()[0], wv.shape()[1]);
                let k = cfg.kernel;
                let xs = self.nodes[x.0].value.shape();
                let (h, win) = (xs[1], xs[2]);
                let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let gcols = conv::im2col_transposed(par, g3, h, win, *cfg);
                if self.nodes[w.0].requires_grad {
                    let x_mat = self.nodes[x.0]
                        .value
                        .view()
                        .into_shape_with_order((c_in, h * win))
                        .unwrap();
                    let gcols_t = gcols.t().as_standard_layout().to_owned();
                    let dw = conv::matmul(par, x_mat, gcols_t.view());
                    acc(
                        grads,
                        *w,
                        dw.into_shape_with_order(IxDyn(&[c_in, c_out, k, k]))
                            .unwrap(),
                    );
                }
                if let Some(bv) = b {
                    if self.nodes[bv.0].requires_grad {
                        let db: Vec<f64> = g3.outer_iter().map(|p| p.sum()).collect();
                        acc(
                            grads,
                            *bv,
                            ArrayD::from_shape_vec(IxDyn(&[c_out]), db).unwrap(),
                        );
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let w_mat = wv
                        .view()
                        .into_shape_with_order((c_in, c_out * k * k))
                        .unwrap();
                    let dx = conv::matmul(par, w_mat, gcols.view());
                    acc(
                        grads,
                        *x,
                        dx.into_shape_with_order(IxDyn(&[c_in, h, win])).unwrap(),
                    );
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            } => {
                let c = xhat.shape()[0];
                let n = (xhat.len() / c) as f64;
                let gm = &self.nodes[gamma.0].value;
                if self.nodes[beta.0].requires_grad {
                    let db: Vec<f64> = g
                        .view()
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap()
                        .outer_iter()
                        .map(|p| p.sum())
                        .collect();
                    acc(
                        grads,
                        *beta,
                        ArrayD::from_shape_vec(IxDyn(&[c]), db).unwrap(),
                    );
                }
                if self.nodes[gamma.0].requires_grad {
                    let prod = g * xhat;
                    let dg: Vec<f64> = prod
                        .view()
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap()
                        .outer_iter()
                        .map(|p| p.sum())
                        .collect();
                    acc(
                        grads,
                        *gamma,
                        ArrayD::from_shape_vec(IxDyn(&[c]), dg).unwrap(),
                    );
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = ArrayD::zeros(xhat.raw_dim());
                    let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let xh3 = xhat.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    for ci in 0..c {
                        let gc = gm[ci];
                        let istd = inv_std[ci];
                        let gp = g3.index_axis(Axis(0), ci);
                        let xp = xh3.index_axis(Axis(0), ci);
                        let sum_dxhat: f64 = gp.iter().map(|v| v * gc).sum();
                        let sum_dxhat_xhat: f64 =
                            gp.iter().zip(xp.iter()).map(|(v, xh)| v * gc * xh).sum();
                        let mut dp = dx
                            .view_mut()
                            .into_dimensionality::<ndarray::Ix3>()
                            .unwrap()
                            .index_axis_move(Axis(0), ci);
                        ndarray::Zip::from(&mut dp)
                            .and(&gp)
                            .and(&xp)
                            .for_each(|d, &gg, &xh| {
                                let dxhat = gg * gc;
                                *d = istd / n * (n * dxhat - sum_dxhat - xh * sum_dxhat_xhat);
                            });
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::SpatialCe {
                scores,
                target,
                weights,
                soft,
            } => {
                if self.nodes[scores.0].requires_grad {
                    let gs = *g.iter().next().unwrap();
                    let (c, h, w) = (soft.shape()[0], soft.shape()[1], soft.shape()[2]);
                    let mut dx = soft.clone();
                    let norm = gs / (h * w) as f64;
                    for i in 0..h {
                        for j in 0..w {
                            let t = target[[i, j]];
                            let wij = weights[[i, j]];
                            for ci in 0..c {
                                let ind = if ci == t { 1.0 } else { 0.0 };
                                dx[[ci, i, j]] = norm * wij * (soft[[ci, i, j]] - ind);
                            }
                        }
                    }
                    acc(grads, *scores, dx);
                }
            }
            Op::ChannelAffine { x, scale } => {
                if self.nodes[x.0].requires_grad {
                    let mut gx = g.clone();
                    for (ci, mut plane) in gx.axis_iter_mut(Axis(0)).enumerate() {
                        let s = scale[ci];
                        plane.mapv_inplace(|v| v * s);
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::SumSquares(a) => {
                let gs = *g.iter().next().unwrap();
                let ga = self.nodes[a.0].value.mapv(|x| 2.0 * x * gs);
                acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let gs = *g.iter().next().unwrap();
                acc(
                    grads,
                    *a,
                    ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gs),
                );
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gs = *g.iter().next().unwrap() / n;
                acc(
                    grads,
                    *a,
                    ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gs),
                );
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
