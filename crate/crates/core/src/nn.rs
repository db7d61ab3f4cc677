//! Parameter store, initializers, optimizers and learning-rate schedules
//! shared by every trainable model in the crate.

use indexmap::IndexMap;
use ndarray::{Array2, Array4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Arr, Gradients, Tape, Var};

/// Named parameter arrays with deterministic iteration order.
#[derive(Debug, Clone, Default)]
pub struct Params {
    map: IndexMap<String, Arr>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Arr {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Copy every entry whose name starts with `prefix` into `dst` under the
    /// same names. Used to warm-start one model from another.
    pub fn copy_prefix_into(&self, prefix: &str, dst: &mut Params) {
        for (k, v) in &self.map {
            if k.starts_with(prefix) {
                *dst.map.get_mut(k).expect("destination missing parameter") = v.clone();
            }
        }
    }
}

/// Tape bindings for a parameter set: every parameter becomes a leaf node.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn bind(tape: &mut Tape, params: &Params) -> Bound {
        let mut vars = IndexMap::new();
        for (k, v) in params.iter() {
            vars.insert(k.clone(), tape.leaf(v.clone()));
        }
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collect gradients for every bound parameter (zeros where the graph
    /// did not touch a parameter).
    pub fn grads(&self, params: &Params, mut g: Gradients) -> IndexMap<String, Arr> {
        let mut out = IndexMap::new();
        for (k, v) in &self.vars {
            let grad = g
                .take(*v)
                .unwrap_or_else(|| Arr::zeros(IxDyn(params.get(k).shape())));
            out.insert(k.clone(), grad);
        }
        out
    }
}

// ---- initializers ----

pub fn he_normal_conv<R: Rng>(rng: &mut R, cout: usize, cin: usize, k: usize) -> Arr {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Array4::from_shape_fn((cout, cin, k, k), |_| dist.sample(rng)).into_dyn()
}

pub fn xavier_uniform<R: Rng>(rng: &mut R, din: usize, dout: usize) -> Arr {
    let lim = (6.0 / (din + dout) as f64).sqrt();
    Array2::from_shape_fn((din, dout), |_| rng.random::<f64>() * 2.0 * lim - lim).into_dyn()
}

pub fn normal_init<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Arr {
    let dist = Normal::new(0.0, std).unwrap();
    Arr::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    Arr::ones(IxDyn(shape))
}

// ---- layer helpers ----

/// Register `name.w` (din x dout, Xavier) and `name.b` (dout, zeros).
pub fn linear_init<R: Rng>(params: &mut Params, rng: &mut R, name: &str, din: usize, dout: usize) {
    params.insert(format!("{name}.w"), xavier_uniform(rng, din, dout));
    params.insert(format!("{name}.b"), zeros(&[dout]));
}

/// `x (n, din) -> (n, dout)` through the `name` linear layer.
pub fn linear_fwd(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Var {
    let y = tape.matmul(x, bound.var(&format!("{name}.w")));
    tape.add_bias_row(y, bound.var(&format!("{name}.b")))
}

/// Register `name.w` (cout x cin x k x k, He) and `name.b` (cout, zeros).
pub fn conv_init<R: Rng>(
    params: &mut Params,
    rng: &mut R,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
) {
    params.insert(format!("{name}.w"), he_normal_conv(rng, cout, cin, k));
    params.insert(format!("{name}.b"), zeros(&[cout]));
}

/// NCHW conv + channel bias through the `name` conv layer.
pub fn conv_fwd(
    tape: &mut Tape,
    bound: &Bound,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let y = tape.conv2d(x, bound.var(&format!("{name}.w")), stride, pad);
    tape.add_bias_chan(y, bound.var(&format!("{name}.b")))
}

// ---- optimizers ----

/// Plain SGD with optional momentum (0.0 = vanilla).
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    vel: IndexMap<String, Arr>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, vel: IndexMap::new() }
    }

    pub fn step(&mut self, params: &mut Params, grads: &IndexMap<String, Arr>) {
        for (name, g) in grads {
            let p = params.get_mut(name);
            if self.momentum == 0.0 {
                p.zip_mut_with(g, |pv, gv| *pv -= self.lr * gv);
            } else {
                let v = self
                    .vel
                    .entry(name.clone())
                    .or_insert_with(|| Arr::zeros(IxDyn(g.shape())));
                v.zip_mut_with(g, |vv, gv| *vv = *vv * self.momentum + gv);
                p.zip_mut_with(v, |pv, vv| *pv -= self.lr * vv);
            }
        }
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: IndexMap<String, Arr>,
    v: IndexMap<String, Arr>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &IndexMap<String, Arr>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(IxDyn(g.shape())));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(IxDyn(g.shape())));
            m.zip_mut_with(g, |mv, gv| *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv);
            v.zip_mut_with(g, |vv, gv| *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv);
            let p = params.get_mut(name);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pv);
            });
        }
    }
}

/// Learning-rate schedule: constant, or linear warmup into polynomial decay.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum LrSchedule {
    Constant(f64),
    WarmupPoly { peak: f64, warmup_steps: usize, total_steps: usize, power: f64 },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::WarmupPoly { peak, warmup_steps, total_steps, power } => {
                if step < warmup_steps {
                    peak * (step + 1) as f64 / warmup_steps.max(1) as f64
                } else {
                    let span = (total_steps.saturating_sub(warmup_steps)).max(1) as f64;
                    let done = (step - warmup_steps) as f64;
                    let frac = (1.0 - done / span).max(0.0);
                    peak * frac.powf(power)
                }
            }
        }
    }
}

/// One training-log row; `branch` names the loss being optimized (e.g.
/// "teacher", "student", "wsss").
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogRow {
    pub round: usize,
    pub branch: String,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, round: usize, branch: &str, loss: f64) {
        self.rows.push(LogRow { round, branch: branch.into(), loss });
    }

    /// CSV with header `round,branch,loss`; floats via Rust's shortest
    /// round-trip formatting, so identical runs give identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,branch,loss\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.round, r.branch, r.loss));
        }
        out
    }
}

/// Deterministic stream splitting for nested loops.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        s = s
            .wrapping_add(t)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
        s ^= s >> 31;
    }
    s
}

/// Guard against diverging training: non-finite losses abort the run.
pub fn check_finite(loss: f64, context: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite loss in {context}: {loss}")))
    }
}

/// Convert an HWC u8 image to a CHW float array scaled to [0, 1].
pub fn image_to_chw(pixels: &ndarray::Array3<u8>) -> ndarray::Array3<f64> {
    let (h, w, c) = pixels.dim();
    ndarray::Array3::from_shape_fn((c, h, w), |(ci, hi, wi)| {
        pixels[[hi, wi, ci]] as f64 / 255.0
    })
}

/// Stack CHW float images into an NCHW batch.
pub fn stack_batch(images: &[ndarray::Array3<f64>]) -> ndarray::Array4<f64> {
    assert!(!images.is_empty());
    let (c, h, w) = images[0].dim();
    let mut out = ndarray::Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    out
}
