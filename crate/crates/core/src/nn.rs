//! Parameter storage, initialization, sequential layer plans and optimizers.
//!
//! Networks are described by a flat [`LayerSpec`] plan; the plan is the single
//! source of truth both for parameter registration and for the forward pass,
//! and it is what the architecture-conformance tests introspect.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Arr, ConvCfg, ConvTCfg, Gradients, Graph, Var};

// ---- parameter store ----

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arr,
    pub trainable: bool,
}

/// Ordered map of named tensors. Order is creation order, which fixes the
/// optimizer update order and the checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr, trainable: bool) {
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> &Arr {
        &self.entries[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no param {name}"))]
        .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no param {name}"));
        &mut self.entries[i].value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    /// Bind every entry into the graph; trainable entries become
    /// gradient-requiring leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let mut vars = BTreeMap::new();
        for e in &self.entries {
            vars.insert(e.name.clone(), g.leaf(e.value.clone(), e.trainable));
        }
        BoundParams { vars }
    }

    /// Bind every entry as a constant (no gradients), for frozen networks.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        let mut vars = BTreeMap::new();
        for e in &self.entries {
            vars.insert(e.name.clone(), g.leaf(e.value.clone(), false));
        }
        BoundParams { vars }
    }

    /// FNV-1a hash over the raw bytes of every tensor, for frozen-parameter
    /// assertions.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for v in e.value.iter() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound param {name}"))
    }

    /// Collect gradients keyed by parameter name.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Arr> {
        self.vars
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}

// ---- init ----

/// Standard normal via Box-Muller on a seeded stream.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    use rand::Rng;
    let n = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        out.push(r * th.cos());
        if out.len() < n {
            out.push(r * th.sin());
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), out).unwrap()
}

pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f64).sqrt();
    randn(rng, shape).mapv(|v| v * std)
}

// ---- layer plans ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        norm: bool,
        act: Activation,
    },
    Deconv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        norm: bool,
        act: Activation,
    },
    /// Two 3x3 stride-1 convs (norm + ReLU after the first, norm after the
    /// second) plus the identity skip, ReLU on the sum.
    Residual {
        name: String,
        channels: usize,
    },
    Dropout {
        name: String,
        rate: f64,
    },
}

impl LayerSpec {
    pub fn conv(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        norm: bool,
        act: Activation,
    ) -> Self {
        // "same"-style padding keeping out = in/stride for odd kernels.
        let pad = dilation * (kernel - 1) / 2;
        LayerSpec::Conv {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            dilation,
            norm,
            act,
        }
    }

    pub fn out_channels(&self, in_ch: usize) -> usize {
        match self {
            LayerSpec::Conv { out_ch, .. } | LayerSpec::Deconv { out_ch, .. } => *out_ch,
            LayerSpec::Residual { channels, .. } => *channels,
            LayerSpec::Dropout { .. } => in_ch,
        }
    }
}

fn register_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: [usize; 4],
    fan_in: usize,
    norm: bool,
    out_ch: usize,
) {
    store.insert(&format!("{name}.w"), he_normal(rng, &shape, fan_in), true);
    if !norm {
        // a bias before normalization is cancelled by the mean subtraction
        store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_ch])), true);
    }
    if norm {
        store.insert(
            &format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[out_ch]), 1.0),
            true,
        );
        store.insert(
            &format!("{name}.beta"),
            ArrayD::zeros(IxDyn(&[out_ch])),
            true,
        );
        store.insert(
            &format!("{name}.rmean"),
            ArrayD::zeros(IxDyn(&[out_ch])),
            false,
        );
        store.insert(
            &format!("{name}.rvar"),
            ArrayD::from_elem(IxDyn(&[out_ch]), 1.0),
            false,
        );
    }
}

/// Register parameters for a sequential plan.
pub fn register_plan(store: &mut ParamStore, rng: &mut ChaCha8Rng, plan: &[LayerSpec]) {
    for spec in plan {
        match spec {
            LayerSpec::Conv {
                name,
                in_ch,
                out_ch,
                kernel,
                norm,
                ..
            } => {
                register_conv(
                    store,
                    rng,
                    name,
                    [*out_ch, *in_ch, *kernel, *kernel],
                    in_ch * kernel * kernel,
                    *norm,
                    *out_ch,
                );
            }
            LayerSpec::Deconv {
                name,
                in_ch,
                out_ch,
                kernel,
                norm,
                ..
            } => {
                store.insert(
                    &format!("{name}.w"),
                    he_normal(
                        rng,
                        &[*in_ch, *out_ch, *kernel, *kernel],
                        in_ch * kernel * kernel,
                    ),
                    true,
                );
                if !norm {
                    store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[*out_ch])), true);
                }
                if *norm {
                    store.insert(
                        &format!("{name}.gamma"),
                        ArrayD::from_elem(IxDyn(&[*out_ch]), 1.0),
                        true,
                    );
                    store.insert(
                        &format!("{name}.beta"),
                        ArrayD::zeros(IxDyn(&[*out_ch])),
                        true,
                    );
                    store.insert(
                        &format!("{name}.rmean"),
                        ArrayD::zeros(IxDyn(&[*out_ch])),
                        false,
                    );
                    store.insert(
                        &format!("{name}.rvar"),
                        ArrayD::from_elem(IxDyn(&[*out_ch]), 1.0),
                        false,
                    );
                }
            }
            LayerSpec::Residual { name, channels } => {
                for half in ["a", "b"] {
                    register_conv(
                        store,
                        rng,
                        &format!("{name}.{half}"),
                        [*channels, *channels, 3, 3],
                        channels * 9,
                        true,
                        *channels,
                    );
                }
            }
            LayerSpec::Dropout { .. } => {}
        }
    }
}

/// Forward-pass mode. Normalization always uses live per-sample statistics
/// (batch size 1 makes it instance normalization, and instance norm keeps
/// per-sample statistics at inference); `Train` additionally records
/// running-stat updates for diagnostics. `Eval` disables dropout unless an
/// rng is supplied (extrapolation inference keeps dropout live).
pub struct ForwardCtx<'a> {
    pub train: bool,
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    /// (layer name, batch mean, batch var) collected during training.
    pub stat_updates: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            dropout_rng: None,
            stat_updates: Vec::new(),
        }
    }
    pub fn train() -> Self {
        ForwardCtx {
            train: true,
            dropout_rng: None,
            stat_updates: Vec::new(),
        }
    }
}

const NORM_EPS: f64 = 1e-5;

fn apply_norm(g: &mut Graph, bound: &BoundParams, ctx: &mut ForwardCtx, name: &str, x: Var) -> Var {
    if ctx.train {
        let xv = g.value(x);
        let c = xv.shape()[0];
        let n = (xv.len() / c) as f64;
        let mut means = Vec::with_capacity(c);
        let mut vars = Vec::with_capacity(c);
        for plane in xv.axis_iter(Axis(0)) {
            let m = plane.sum() / n;
            let v = plane.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / n;
            means.push(m);
            vars.push(v);
        }
        ctx.stat_updates.push((name.to_string(), means, vars));
    }
    g.instance_norm(
        x,
        bound.var(&format!("{name}.gamma")),
        bound.var(&format!("{name}.beta")),
        NORM_EPS,
    )
}

fn apply_act(g: &mut Graph, act: Activation, x: Var) -> Var {
    match act {
        Activation::None => x,
        Activation::Relu => g.relu(x),
        Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
        Activation::Tanh => g.tanh(x),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

fn conv_block(
    g: &mut Graph,
    bound: &BoundParams,
    ctx: &mut ForwardCtx,
    name: &str,
    cfg: ConvCfg,
    norm: bool,
    act: Activation,
    x: Var,
) -> Var {
    let w = bound.var(&format!("{name}.w"));
    let b = if norm {
        None
    } else {
        Some(bound.var(&format!("{name}.b")))
    };
    let mut y = g.conv2d(x, w, b, cfg);
    if norm {
        y = apply_norm(g, bound, ctx, name, y);
    }
    apply_act(g, act, y)
}

/// Run a sequential plan.
pub fn forward_plan(
    g: &mut Graph,
    bound: &BoundParams,
    ctx: &mut ForwardCtx,
    plan: &[LayerSpec],
    mut x: Var,
) -> Var {
    for spec in plan {
        x = match spec {
            LayerSpec::Conv {
                name,
                kernel,
                stride,
                pad,
                dilation,
                norm,
                act,
                ..
            } => {
                let cfg = ConvCfg {
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                    dilation: *dilation,
                };
                conv_block(g, bound, ctx, name, cfg, *norm, *act, x)
            }
            LayerSpec::Deconv {
                name,
                kernel,
                stride,
                pad,
                out_pad,
                norm,
                act,
                ..
            } => {
                let cfg = ConvTCfg {
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                    out_pad: *out_pad,
                };
                let w = bound.var(&format!("{name}.w"));
                let b = if *norm {
                    None
                } else {
                    Some(bound.var(&format!("{name}.b")))
                };
                let mut y = g.conv_transpose2d(x, w, b, cfg);
                if *norm {
                    y = apply_norm(g, bound, ctx, name, y);
                }
                apply_act(g, *act, y)
            }
            LayerSpec::Residual { name, .. } => {
                let cfg = ConvCfg {
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    dilation: 1,
                };
                let h = conv_block(
                    g,
                    bound,
                    ctx,
                    &format!("{name}.a"),
                    cfg,
                    true,
                    Activation::Relu,
                    x,
                );
                let h = conv_block(
                    g,
                    bound,
                    ctx,
                    &format!("{name}.b"),
                    cfg,
                    true,
                    Activation::None,
                    h,
                );
                let s = g.add(x, h);
                g.relu(s)
            }
            LayerSpec::Dropout { rate, .. } => {
                let active = ctx.train || ctx.dropout_rng.is_some();
                if active {
                    if let Some(rng) = ctx.dropout_rng.as_deref_mut() {
                        use rand::Rng;
                        let shape = g.value(x).raw_dim();
                        let keep = 1.0 - rate;
                        let mask = ArrayD::from_shape_simple_fn(shape, || {
                            if rng.gen::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        g.dropout(x, mask)
                    } else {
                        x
                    }
                } else {
                    x
                }
            }
        };
    }
    x
}

/// Fold collected batch statistics into the running estimates.
pub fn apply_stat_updates(
    store: &mut ParamStore,
    updates: &[(String, Vec<f64>, Vec<f64>)],
    momentum: f64,
) {
    for (name, means, vars) in updates {
        let rm = store.get_mut(&format!("{name}.rmean"));
        for (r, m) in rm.iter_mut().zip(means) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let rv = store.get_mut(&format!("{name}.rvar"));
        for (r, v) in rv.iter_mut().zip(vars) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

// ---- optimizers ----

pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Arr>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Arr>) {
        for e in store.iter_mut() {
            if !e.trainable {
                continue;
            }
            let Some(gr) = grads.get(&e.name) else {
                continue;
            };
            let v = self
                .velocity
                .entry(e.name.clone())
                .or_insert_with(|| ArrayD::zeros(e.value.raw_dim()));
            ndarray::Zip::from(v.view_mut())
                .and(gr)
                .for_each(|vv, &gg| {
                    *vv = self.momentum * *vv + gg;
                });
            ndarray::Zip::from(&mut e.value)
                .and(v.view())
                .for_each(|p, &vv| {
                    *p -= self.lr * vv;
                });
        }
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Arr>) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for e in store.iter_mut() {
            if !e.trainable {
                continue;
            }
            let Some(gr) = grads.get(&e.name) else {
                continue;
            };
            let m = self
                .m
                .entry(e.name.clone())
                .or_insert_with(|| ArrayD::zeros(e.value.raw_dim()));
            let v = self
                .v
                .entry(e.name.clone())
                .or_insert_with(|| ArrayD::zeros(e.value.raw_dim()));
            ndarray::Zip::from(m.view_mut())
                .and(gr)
                .for_each(|mm, &gg| {
                    *mm = self.beta1 * *mm + (1.0 - self.beta1) * gg;
                });
            ndarray::Zip::from(v.view_mut())
                .and(gr)
                .for_each(|vv, &gg| {
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * gg * gg;
                });
            ndarray::Zip::from(&mut e.value)
                .and(m.view())
                .and(v.view())
                .for_each(|p, &mm, &vv| {
                    let mhat = mm / b1t;
                    let vhat = vv / b2t;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
