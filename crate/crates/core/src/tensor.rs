//! Minimal reverse-mode autodiff over `ndarray` dynamic arrays.
//!
//! A [`Tape`] records each operation as a node; [`Tape::backward`] replays the
//! recording in reverse to accumulate gradients. Everything is `f64` so the
//! whole stack can be validated against central finite differences (see the
//! tests at the bottom of this module: every op must agree with FD to a
//! relative error below 1e-4).
//!
//! The op set is deliberately small: exactly what the attention pools, the
//! small ViT, the U-Net and the losses in this crate need. Shapes are checked
//! with assertions — mismatches are programming errors, not runtime data
//! errors.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix4, IxDyn};

pub type Arr = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBiasRow(Var, Var),
    AddBiasChan(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    Row(Var, usize),
    Cols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatChan(Var, Var),
    ColMax(Var, Vec<usize>),
    GlobalAvgPool(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize, cols: Array2<f64> },
    UpsampleNearest2(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    RowNormalize { x: Var, eps: f64, norms: Vec<f64> },
    MulConst(Var, Arr),
    BceLogits { z: Var, targets: Arr },
}

struct Node {
    op: Op,
    value: Arr,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    g: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.g[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.g[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(1 + exp(x)).
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Arr) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf4(&mut self, value: Array4<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn value2(&self, v: Var) -> ArrayView2<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected 2-d value")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Extract a single-element value as a plain float.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        assert_eq!(a.len(), 1, "scalar() on value of shape {:?}", a.shape());
        *a.iter().next().unwrap()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div: shape mismatch");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(Op::Div(a, b), v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * k);
        self.push(Op::Scale(a, k), v)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + k);
        self.push(Op::AddScalar(a), v)
    }

    /// `(n, m) + (m,)` broadcast over rows.
    pub fn add_bias_row(&mut self, a: Var, bias: Var) -> Var {
        let m = self.shape(a)[1];
        assert_eq!(self.shape(bias), &[m], "add_bias_row: bias shape");
        let b1 = self.nodes[bias.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let v = &self.value2(a) + &b1.insert_axis(Axis(0));
        self.push(Op::AddBiasRow(a, bias), v.into_dyn())
    }

    /// `(b, c, h, w) + (c,)` broadcast over batch and space.
    pub fn add_bias_chan(&mut self, a: Var, bias: Var) -> Var {
        let c = self.shape(a)[1];
        assert_eq!(self.shape(bias), &[c], "add_bias_chan: bias shape");
        let mut v = self.nodes[a.0].value.clone();
        let b = &self.nodes[bias.0].value;
        for (ci, mut lane) in v.axis_iter_mut(Axis(1)).enumerate() {
            lane += b[[ci]];
        }
        self.push(Op::AddBiasChan(a, bias), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid_op(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh_op(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(Op::Gelu(a), v)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value2(a).dot(&self.value2(b));
        self.push(Op::MatMul(a, b), v.into_dyn())
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value2(a).t().as_standard_layout().to_owned();
        self.push(Op::Transpose(a), v.into_dyn())
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(self.nodes[a.0].value.len(), n, "reshape: element count");
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: non-contiguous value");
        self.push(Op::Reshape(a), v)
    }

    /// Row-wise softmax of a 2-d value.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value2(a);
        let mut v = x.to_owned();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|e| e / s);
        }
        self.push(Op::SoftmaxRows(a), v.into_dyn())
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Op::SumAll(a), ndarray::arr1(&[s]).into_dyn())
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.nodes[a.0].value.sum() / n;
        self.push(Op::MeanAll(a), ndarray::arr1(&[s]).into_dyn())
    }

    /// Select one row of a 2-d value, keeping it 2-d: `(n, m) -> (1, m)`.
    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let x = self.value2(a);
        assert!(i < x.nrows(), "row index out of range");
        let v = x.row(i).insert_axis(Axis(0)).to_owned();
        self.push(Op::Row(a, i), v.into_dyn())
    }

    /// Select a column range of a 2-d value: `(n, m) -> (n, hi - lo)`.
    pub fn cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let x = self.value2(a);
        assert!(lo < hi && hi <= x.ncols(), "cols range out of bounds");
        let v = x.slice(ndarray::s![.., lo..hi]).to_owned();
        self.push(Op::Cols(a, lo, hi), v.into_dyn())
    }

    /// Concatenate 2-d values with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayView2<'_, f64>> = parts.iter().map(|p| self.value2(*p)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols");
        self.push(Op::ConcatCols(parts.to_vec()), v.into_dyn())
    }

    /// Concatenate 4-d values along the channel axis.
    pub fn concat_chan(&mut self, a: Var, b: Var) -> Var {
        let va = self.nodes[a.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let vb = self.nodes[b.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let v = ndarray::concatenate(Axis(1), &[va, vb]).expect("concat_chan");
        self.push(Op::ConcatChan(a, b), v.into_dyn())
    }

    /// Column-wise max of a 2-d value: `(n, m) -> (1, m)`.
    pub fn col_max(&mut self, a: Var) -> Var {
        let x = self.value2(a);
        let (n, m) = x.dim();
        assert!(n > 0);
        let mut idx = vec![0usize; m];
        let mut v = Array2::<f64>::zeros((1, m));
        for j in 0..m {
            let mut best = f64::NEG_INFINITY;
            for i in 0..n {
                if x[[i, j]] > best {
                    best = x[[i, j]];
                    idx[j] = i;
                }
            }
            v[[0, j]] = best;
        }
        self.push(Op::ColMax(a, idx), v.into_dyn())
    }

    /// `(b, c, h, w) -> (b, c)` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let x = self.nodes[a.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = x.dim();
        let mut v = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let mut s = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        s += x[[bi, ci, hi, wi]];
                    }
                }
                v[[bi, ci]] = s / (h * w) as f64;
            }
        }
        self.push(Op::GlobalAvgPool(a), v.into_dyn())
    }

    /// 2-d convolution, NCHW x (out, in, kh, kw), zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (b, cin, h, wd) = xv.dim();
        let (cout, cin2, kh, kw) = wv.dim();
        assert_eq!(cin, cin2, "conv2d: channel mismatch");
        assert!(stride >= 1);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let cols = im2col(&xv, kh, kw, stride, pad, oh, ow);
        let wflat = wv
            .to_shape((cout, cin * kh * kw))
            .expect("conv2d: weight reshape")
            .to_owned();
        let y2 = cols.dot(&wflat.t()); // (b*oh*ow, cout)
        let y = y2
            .into_shape_with_order((b, oh, ow, cout))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        self.push(Op::Conv2d { x, w, stride, pad, cols }, y.into_dyn())
    }

    /// Nearest-neighbour 2x spatial upsample of an NCHW value.
    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let x = self.nodes[a.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = x.dim();
        let mut v = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let e = x[[bi, ci, hi, wi]];
                        v[[bi, ci, 2 * hi, 2 * wi]] = e;
                        v[[bi, ci, 2 * hi + 1, 2 * wi]] = e;
                        v[[bi, ci, 2 * hi, 2 * wi + 1]] = e;
                        v[[bi, ci, 2 * hi + 1, 2 * wi + 1]] = e;
                    }
                }
            }
        }
        self.push(Op::UpsampleNearest2(a), v.into_dyn())
    }

    /// Per-row layer norm of a 2-d value with learned gain/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value2(x).to_owned();
        let (n, m) = xv.dim();
        assert_eq!(self.shape(gamma), &[m]);
        assert_eq!(self.shape(beta), &[m]);
        let g = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let be = self.nodes[beta.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let mut xhat = Array2::<f64>::zeros((n, m));
        let mut inv_std = vec![0.0; n];
        let mut y = Array2::<f64>::zeros((n, m));
        for i in 0..n {
            let row = xv.row(i);
            let mu = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let xh = (row[j] - mu) * is;
                xhat[[i, j]] = xh;
                y[[i, j]] = g[j] * xh + be[j];
            }
        }
        self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, y.into_dyn())
    }

    /// Scale each row of a 2-d value to unit L2 norm (plus `eps` in the
    /// denominator, so zero rows stay zero).
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value2(x).to_owned();
        let (n, _m) = xv.dim();
        let mut norms = vec![0.0; n];
        let mut y = xv.clone();
        for i in 0..n {
            let nr = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = nr;
            let d = nr + eps;
            y.row_mut(i).mapv_inplace(|v| v / d);
        }
        self.push(Op::RowNormalize { x, eps, norms }, y.into_dyn())
    }

    /// Elementwise multiply by a constant array (e.g. a 0/1 mask).
    pub fn mul_const(&mut self, a: Var, k: Arr) -> Var {
        assert_eq!(self.shape(a), k.shape(), "mul_const: shape mismatch");
        let v = &self.nodes[a.0].value * &k;
        self.push(Op::MulConst(a, k), v)
    }

    /// Elementwise binary cross-entropy on logits against constant targets:
    /// `softplus(z) - t * z`, which is `-(t ln s(z) + (1-t) ln(1-s(z)))`
    /// evaluated stably.
    pub fn bce_with_logits(&mut self, z: Var, targets: Arr) -> Var {
        assert_eq!(self.shape(z), targets.shape(), "bce: shape mismatch");
        let zv = &self.nodes[z.0].value;
        let mut v = zv.clone();
        ndarray::Zip::from(&mut v).and(&targets).for_each(|o, &t| {
            *o = softplus(*o) - t * *o;
        });
        self.push(Op::BceLogits { z, targets }, v)
    }

    // ---- backward ----

    /// Accumulate gradients of a single-element `root` with respect to every
    /// node on the tape.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut g: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Arr::ones(self.nodes[root.0].value.raw_dim()));

        for i in (0..=root.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            self.accumulate(i, &gi, &mut g);
            g[i] = Some(gi);
        }
        Gradients { g }
    }

    fn accumulate(&self, i: usize, gi: &Arr, g: &mut [Option<Arr>]) {
        let add_to = |g: &mut [Option<Arr>], v: Var, delta: Arr| {
            match &mut g[v.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(g, *a, gi.clone());
                add_to(g, *b, gi.clone());
            }
            Op::Sub(a, b) => {
                add_to(g, *a, gi.clone());
                add_to(g, *b, gi.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                add_to(g, *a, gi * &self.nodes[b.0].value);
                add_to(g, *b, gi * &self.nodes[a.0].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                add_to(g, *a, gi / bv);
                let av = &self.nodes[a.0].value;
                add_to(g, *b, -(gi * av) / (bv * bv));
            }
            Op::AddBiasRow(a, bias) => {
                add_to(g, *a, gi.clone());
                let g2 = gi.view().into_dimensionality::<Ix2>().unwrap();
                add_to(g, *bias, g2.sum_axis(Axis(0)).into_dyn());
            }
            Op::AddBiasChan(a, bias) => {
                add_to(g, *a, gi.clone());
                let g4 = gi.view().into_dimensionality::<Ix4>().unwrap();
                let c = g4.dim().1;
                let mut db = Array1::<f64>::zeros(c);
                for (ci, lane) in g4.axis_iter(Axis(1)).enumerate() {
                    db[ci] = lane.sum();
                }
                add_to(g, *bias, db.into_dyn());
            }
            Op::Scale(a, k) => add_to(g, *a, gi.mapv(|x| x * k)),
            Op::AddScalar(a) => add_to(g, *a, gi.clone()),
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                add_to(g, *a, gi * &mask);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                add_to(g, *a, gi * &(y * &y.mapv(|v| 1.0 - v)));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                add_to(g, *a, gi * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Gelu(a) => {
                let d = self.nodes[a.0].value.mapv(|x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
                });
                add_to(g, *a, gi * &d);
            }
            Op::MatMul(a, b) => {
                let g2 = gi.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.value2(*a);
                let bv = self.value2(*b);
                add_to(g, *a, g2.dot(&bv.t()).into_dyn());
                add_to(g, *b, av.t().dot(&g2).into_dyn());
            }
            Op::Transpose(a) => {
                let g2 = gi.view().into_dimensionality::<Ix2>().unwrap();
                add_to(g, *a, g2.t().as_standard_layout().to_owned().into_dyn());
            }
            Op::Reshape(a) => {
                let src_shape = self.nodes[a.0].value.raw_dim();
                let d = gi.clone().into_shape_with_order(src_shape).unwrap();
                add_to(g, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = self.value2(Var(i));
                let g2 = gi.view().into_dimensionality::<Ix2>().unwrap();
                let mut d = Array2::<f64>::zeros(y.dim());
                for r in 0..y.nrows() {
                    let dot: f64 = y.row(r).iter().zip(g2.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.ncols() {
                        d[[r, c]] = y[[r, c]] * (g2[[r, c]] - dot);
                    }
                }
                add_to(g, *a, d.into_dyn());
            }
            Op::SumAll(a) => {
                let s = gi.iter().next().copied().unwrap();
                add_to(g, *a, Arr::from_elem(self.nodes[a.0].value.raw_dim(), s));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let s = gi.iter().next().copied().unwrap() / n;
                add_to(g, *a, Arr::from_elem(self.nodes[a.0].value.raw_dim(), s));
            }
            Op::Row(a, r) => {
                let mut d = Array2::<f64>::zeros(self.value2(*a).dim());
                let g2 = gi.view().into_dimensionality::<Ix2>().unwrap();
                d.row_mut(*r).assign(&g2.row(0));
                add_to(g, *a, d.into_dyn());
            }
            Op::Cols(a, lo, _hi) => {
                let mut d = Array2::<f64>::zeros(self.value2(*a).dim());
                let g2 = gi.view().into_dimensionality::<Ix2>().unwrap();
                d.slice_mut(ndarray::s![.., *lo..*lo + g2.ncols()]).assign(&g2);
                add_to(g, *a, d.into_dyn());
            }
            Op::ConcatCols(parts) => {
                let g2 = gi.view().into_dimensionality::<Ix2>().unwrap();
                let mut off = 0;
                for p in parts {
                    let w = self.value2(*p).ncols();
                    let d = g2.slice(ndarray::s![.., off..off + w]).to_owned();
                    add_to(g, *p, d.into_dyn());
                    off += w;
                }
            }
            Op::ConcatChan(a, b) => {
                let g4 = gi.view().into_dimensionality::<Ix4>().unwrap();
                let ca = self.nodes[a.0].value.shape()[1];
                let da = g4.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
                let db = g4.slice(ndarray::s![.., ca.., .., ..]).to_owned();
                add_to(g, *a, da.into_dyn());
                add_to(g, *b, db.into_dyn());
            }
            Op::ColMax(a, idx) => {
                let mut d = Array2::<f64>::zeros(self.value2(*a).dim());
                let g2 = gi.view().into_dimensionality::<Ix2>().unwrap();
                for (j, &r) in idx.iter().enumerate() {
                    d[[r, j]] += g2[[0, j]];
                }
                add_to(g, *a, d.into_dyn());
            }
            Op::GlobalAvgPool(a) => {
                let x = self.nodes[a.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let (b, c, h, w) = x.dim();
                let g2 = gi.view().into_dimensionality::<Ix2>().unwrap();
                let mut d = Array4::<f64>::zeros((b, c, h, w));
                let k = 1.0 / (h * w) as f64;
                for bi in 0..b {
                    for ci in 0..c {
                        let e = g2[[bi, ci]] * k;
                        d.slice_mut(ndarray::s![bi, ci, .., ..]).fill(e);
                    }
                }
                add_to(g, *a, d.into_dyn());
            }
            Op::Conv2d { x, w, stride, pad, cols } => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let (b, cin, h, wd) = xv.dim();
                let (cout, _, kh, kw) = wv.dim();
                let g4 = gi.view().into_dimensionality::<Ix4>().unwrap();
                let (_, _, oh, ow) = g4.dim();
                let gmat = g4
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((b * oh * ow, cout))
                    .unwrap();
                let wflat = wv.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
                let dw = gmat
                    .t()
                    .dot(cols)
                    .into_shape_with_order((cout, cin, kh, kw))
                    .unwrap();
                let dcols = gmat.dot(&wflat); // (b*oh*ow, cin*kh*kw)
                let dx = col2im(&dcols, b, cin, h, wd, kh, kw, *stride, *pad, oh, ow);
                add_to(g, *x, dx.into_dyn());
                add_to(g, *w, dw.into_dyn());
            }
            Op::UpsampleNearest2(a) => {
                let g4 = gi.view().into_dimensionality::<Ix4>().unwrap();
                let (b, c, h2, w2) = g4.dim();
                let mut d = Array4::<f64>::zeros((b, c, h2 / 2, w2 / 2));
                for bi in 0..b {
                    for ci in 0..c {
                        for hi in 0..h2 {
                            for wi in 0..w2 {
                                d[[bi, ci, hi / 2, wi / 2]] += g4[[bi, ci, hi, wi]];
                            }
                        }
                    }
                }
                add_to(g, *a, d.into_dyn());
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let g2 = gi.view().into_dimensionality::<Ix2>().unwrap();
                let (n, m) = xhat.dim();
                let gv = self.nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap();
                let mut dgamma = Array1::<f64>::zeros(m);
                let mut dbeta = Array1::<f64>::zeros(m);
                let mut dx = Array2::<f64>::zeros((n, m));
                for r in 0..n {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for c in 0..m {
                        let dxh = g2[[r, c]] * gv[c];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[[r, c]];
                        dgamma[c] += g2[[r, c]] * xhat[[r, c]];
                        dbeta[c] += g2[[r, c]];
                    }
                    mean_dxhat /= m as f64;
                    mean_dxhat_xhat /= m as f64;
                    for c in 0..m {
                        let dxh = g2[[r, c]] * gv[c];
                        dx[[r, c]] =
                            inv_std[r] * (dxh - mean_dxhat - xhat[[r, c]] * mean_dxhat_xhat);
                    }
                }
                add_to(g, *x, dx.into_dyn());
                add_to(g, *gamma, dgamma.into_dyn());
                add_to(g, *beta, dbeta.into_dyn());
            }
            Op::RowNormalize { x, eps, norms } => {
                let xv = self.value2(*x);
                let g2 = gi.view().into_dimensionality::<Ix2>().unwrap();
                let (n, m) = xv.dim();
                let mut dx = Array2::<f64>::zeros((n, m));
                for r in 0..n {
                    let d = norms[r] + eps;
                    if norms[r] == 0.0 {
                        for c in 0..m {
                            dx[[r, c]] = g2[[r, c]] / d;
                        }
                        continue;
                    }
                    let xg: f64 = xv.row(r).iter().zip(g2.row(r)).map(|(a, b)| a * b).sum();
                    let k = xg / (norms[r] * d * d);
                    for c in 0..m {
                        dx[[r, c]] = g2[[r, c]] / d - xv[[r, c]] * k;
                    }
                }
                add_to(g, *x, dx.into_dyn());
            }
            Op::MulConst(a, k) => add_to(g, *a, gi * k),
            Op::BceLogits { z, targets } => {
                let zv = &self.nodes[z.0].value;
                let mut d = zv.mapv(sigmoid);
                d -= targets;
                add_to(g, *z, gi * &d);
            }
        }
    }
}

fn im2col(
    x: &ndarray::ArrayView4<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (b, cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((b * oh * ow, cin * kh * kw));
    for bi in 0..b {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = (bi * oh + ohi) * ow + owi;
                for ci in 0..cin {
                    for khi in 0..kh {
                        let ih = (ohi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kwi in 0..kw {
                            let iw = (owi * stride + kwi) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cols[[row, (ci * kh + khi) * kw + kwi]] =
                                x[[bi, ci, ih as usize, iw as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros((b, cin, h, w));
    for bi in 0..b {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = (bi * oh + ohi) * ow + owi;
                for ci in 0..cin {
                    for khi in 0..kh {
                        let ih = (ohi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kwi in 0..kw {
                            let iw = (owi * stride + kwi) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            dx[[bi, ci, ih as usize, iw as usize]] +=
                                dcols[[row, (ci * kh + khi) * kw + kwi]];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient check: builds the graph fresh for every
    /// probe, perturbing one input element at a time.
    fn fd_check(inputs: &[Arr], build: &dyn Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |xs: &[Arr]| -> f64 {
            let mut t = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let out = build(&mut t, &vars);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&mut t, &vars);
        let grads = t.backward(out);

        for (vi, x) in inputs.iter().enumerate() {
            let ga = grads
                .get(vars[vi])
                .cloned()
                .unwrap_or_else(|| Arr::zeros(x.raw_dim()));
            for flat in 0..x.len() {
                let mut lo = inputs.to_vec();
                let mut hi = inputs.to_vec();
                let h = 1e-5 * x.iter().nth(flat).unwrap().abs().max(1.0);
                *hi[vi].iter_mut().nth(flat).unwrap() += h;
                *lo[vi].iter_mut().nth(flat).unwrap() -= h;
                let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
                let an = *ga.iter().nth(flat).unwrap();
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "input {vi} elem {flat}: fd={fd} autodiff={an}"
                );
            }
        }
    }

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[3, 4], &mut rng).mapv(|x| x + 2.5); // keep divisor away from 0
        fd_check(&[a.clone(), b.clone()], &|t, v| {
            let s = t.add(v[0], v[1]);
            let d = t.sub(s, v[1]);
            let m = t.mul(d, v[1]);
            let q = t.div(m, v[1]);
            let sc = t.scale(q, 1.7);
            let sh = t.add_scalar(sc, 0.3);
            t.sum_all(sh)
        });
        fd_check(&[a], &|t, v| {
            let r = t.relu(v[0]);
            let s = t.sigmoid_op(r);
            let th = t.tanh_op(s);
            let ge = t.gelu(th);
            t.mean_all(ge)
        });
    }

    #[test]
    fn grad_matmul_transpose_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&[3, 5], &mut rng);
        let b = randn(&[5, 2], &mut rng);
        fd_check(&[a, b], &|t, v| {
            let y = t.matmul(v[0], v[1]);
            let yt = t.transpose(y);
            let r = t.reshape(yt, &[3, 2]);
            let sq = t.mul(r, r);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_bias_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&[4, 3], &mut rng);
        let bias = randn(&[3], &mut rng);
        fd_check(&[a, bias], &|t, v| {
            let y = t.add_bias_row(v[0], v[1]);
            t.sum_all(y)
        });
        let x = randn(&[2, 3, 4, 4], &mut rng);
        let cb = randn(&[3], &mut rng);
        fd_check(&[x, cb], &|t, v| {
            let y = t.add_bias_chan(v[0], v[1]);
            let r = t.relu(y);
            t.mean_all(r)
        });
    }

    #[test]
    fn grad_softmax_and_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&[4, 6], &mut rng);
        fd_check(&[a.clone()], &|t, v| {
            let s = t.softmax_rows(v[0]);
            let w = t.mul(s, s);
            t.sum_all(w)
        });
        fd_check(&[a.clone()], &|t, v| {
            let r = t.row(v[0], 2);
            let c = t.cols(v[0], 1, 4); // (4, 3)
            let ct = t.transpose(c); // (3, 4)
            let y = t.matmul(ct, v[0]); // (3, 6)
            let s1 = t.sum_all(y);
            let s2 = t.sum_all(r);
            t.add(s1, s2)
        });
        fd_check(&[a], &|t, v| {
            let p1 = t.cols(v[0], 0, 2);
            let p2 = t.cols(v[0], 2, 6);
            let cc = t.concat_cols(&[p1, p2]);
            let m = t.col_max(cc);
            t.sum_all(m)
        });
    }

    #[test]
    fn grad_conv_pool_upsample_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&[2, 3, 6, 6], &mut rng);
        let w = randn(&[4, 3, 3, 3], &mut rng);
        fd_check(&[x.clone(), w.clone()], &|t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1);
            let r = t.relu(y);
            let p = t.global_avg_pool(r);
            t.sum_all(p)
        });
        let x2 = randn(&[1, 2, 3, 3], &mut rng);
        let x3 = randn(&[1, 2, 6, 6], &mut rng);
        fd_check(&[x2, x3], &|t, v| {
            let u = t.upsample_nearest2(v[0]);
            let c = t.concat_chan(u, v[1]);
            let sq = t.mul(c, c);
            t.mean_all(sq)
        });
    }

    #[test]
    fn grad_layer_norm_row_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&[3, 5], &mut rng);
        let gamma = randn(&[5], &mut rng).mapv(|v| v + 1.5);
        let beta = randn(&[5], &mut rng);
        fd_check(&[x.clone(), gamma, beta], &|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        });
        fd_check(&[x], &|t, v| {
            let y = t.row_normalize(v[0], 1e-8);
            let yt = t.transpose(y);
            let s = t.matmul(y, yt);
            t.sum_all(s)
        });
    }

    #[test]
    fn grad_bce_and_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = randn(&[4, 2], &mut rng).mapv(|v| v * 3.0);
        let targets = Arr::from_shape_fn(IxDyn(&[4, 2]), |_| {
            if rng.random::<f64>() < 0.5 { 0.0 } else { 1.0 }
        });
        let mask = Arr::from_shape_fn(IxDyn(&[4, 2]), |_| {
            if rng.random::<f64>() < 0.5 { 0.0 } else { 1.0 }
        });
        fd_check(&[z], &|t, v| {
            let l = t.bce_with_logits(v[0], targets.clone());
            let m = t.mul_const(l, mask.clone());
            t.mean_all(m)
        });
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&[2, 3, 7, 6], &mut rng);
        let w = randn(&[4, 3, 3, 2], &mut rng);
        let (stride, pad) = (2, 1);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w.clone());
        let y = t.conv2d(xv, wv, stride, pad);
        let yv = t.value(y).view().into_dimensionality::<Ix4>().unwrap().to_owned();

        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
        let (b, cin, h, wd) = x4.dim();
        let (cout, _, kh, kw) = w4.dim();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        for bi in 0..b {
            for co in 0..cout {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for khi in 0..kh {
                                for kwi in 0..kw {
                                    let ih = (ohi * stride + khi) as isize - pad as isize;
                                    let iw = (owi * stride + kwi) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += x4[[bi, ci, ih as usize, iw as usize]]
                                        * w4[[co, ci, khi, kwi]];
                                }
                            }
                        }
                        assert!((yv[[bi, co, ohi, owi]] - acc).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = randn(&[5, 7], &mut rng).mapv(|v| v * 50.0); // stress stability
        let mut t = Tape::new();
        let v = t.leaf(a);
        let s = t.softmax_rows(v);
        let sv = t.value2(s);
        for row in sv.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn col_max_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = randn(&[9, 4], &mut rng);
        let a2 = a.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut t = Tape::new();
        let v = t.leaf(a.clone());
        let m = t.col_max(v);
        let mv = t.value2(m);
        for j in 0..4 {
            let brute = (0..9).map(|i| a2[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(mv[[0, j]], brute);
        }
    }

    #[test]
    fn bce_matches_naive_cross_entropy() {
        let eval = |z: f64, tgt: f64| -> f64 {
            let mut t = Tape::new();
            let v = t.leaf(arr1(&[z]).into_dyn());
            let l = t.bce_with_logits(v, arr1(&[tgt]).into_dyn());
            let s = t.sum_all(l);
            t.scalar(s)
        };
        // moderate logits: compare against the textbook form
        for &z in &[-20.0, -2.0, -1e-3, 0.0, 0.7, 5.0, 20.0] {
            for &tgt in &[0.0, 0.5, 1.0] {
                let p = sigmoid(z);
                let want = -(tgt * p.ln() + (1.0 - tgt) * (1.0 - p).ln());
                let got = eval(z, tgt);
                // the naive form loses precision in 1 - p at large z
                assert!(
                    (got - want).abs() < 1e-9 + 1e-7 * want.abs(),
                    "z={z} t={tgt}: {got} vs {want}"
                );
            }
        }
        // extreme logits: the naive form overflows/truncates, the stable one
        // must approach |z| for a wrong-side target and 0 for the right side
        assert!((eval(500.0, 0.0) - 500.0).abs() < 1e-9);
        assert!((eval(-500.0, 1.0) - 500.0).abs() < 1e-9);
        assert!(eval(500.0, 1.0).abs() < 1e-9);
        assert!(eval(-500.0, 0.0).abs() < 1e-9);
    }

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        // y = x*x + x  => dy/dx = 2x + 1
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[3.0]]).into_dyn());
        let sq = t.mul(x, x);
        let y = t.add(sq, x);
        let s = t.sum_all(y);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap()[[0, 0]], 7.0);
    }
}
