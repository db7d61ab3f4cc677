//! Region-level knowledge distillation: a patch-token vision transformer
//! trained on image-level labels, whose class activation maps localize
//! lesions and are cut into bounding-box prompts.
//!
//! The encoder splits the image into a grid of patches, runs pre-norm
//! transformer blocks, and is read at two depths: the last layer feeds
//! global max pooling and the classification head (whose weights also
//! produce the CAM), while an intermediate layer supplies both an auxiliary
//! classification loss and the token-affinity matrix that defines positive
//! and negative pairs for the patch-token-contrast regularizer.

use indexmap::IndexMap;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, derive_seed, AdamW, Bound, LrSchedule, Params, TrainLog};
use crate::records::ImageSample;
use crate::tensor::{Arr, Tape, Var};

/// Which encoder depth a token set was read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerTag {
    Last,
    Intermediate,
}

/// Patch tokens in grid row-major order: `tokens` is N²×C.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub tokens: Array2<f64>,
    pub grid_side: usize,
    pub layer: LayerTag,
}

impl PatchGrid {
    pub fn new(tokens: Array2<f64>, grid_side: usize, layer: LayerTag) -> Self {
        assert_eq!(tokens.nrows(), grid_side * grid_side, "token count must be N^2");
        PatchGrid { tokens, grid_side, layer }
    }

    /// Arrange the tokens on the grid: N×N×C, row-major over (row, col).
    pub fn to_spatial(&self) -> SpatialFeatureMap {
        let n = self.grid_side;
        let c = self.tokens.ncols();
        let f = Array3::from_shape_fn((n, n, c), |(r, col, ch)| self.tokens[[r * n + col, ch]]);
        SpatialFeatureMap { f }
    }
}

/// Tokens arranged on the N×N grid, channel-last.
#[derive(Debug, Clone)]
pub struct SpatialFeatureMap {
    pub f: Array3<f64>,
}

/// Classification weights, one row per class.
#[derive(Debug, Clone)]
pub struct ClassWeights {
    pub w: Array2<f64>,
}

impl ClassWeights {
    pub fn new(w: Array2<f64>) -> Self {
        assert!(w.nrows() >= 1, "need at least one class");
        ClassWeights { w }
    }

    pub fn k(&self) -> usize {
        self.w.nrows()
    }
}

/// Max-normalized class activation map on the patch grid.
#[derive(Debug, Clone)]
pub struct CAMap {
    pub values: Array2<f64>,
    pub class_index: usize,
}

impl CAMap {
    pub fn new(values: Array2<f64>, class_index: usize) -> Self {
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(values.iter().all(|&v| (0.0..=1.0).contains(&v)), "cam values in [0,1]");
        assert!(max == 0.0 || (max - 1.0).abs() < 1e-9, "cam max must be 1 or the map all-zero");
        CAMap { values, class_index }
    }
}

/// Pairwise cosine similarities between all patch tokens.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub m: Array2<f64>,
    pub layer: LayerTag,
}

impl SimilarityMatrix {
    pub fn new(m: Array2<f64>, layer: LayerTag) -> Self {
        let (r, c) = m.dim();
        assert_eq!(r, c, "similarity matrix must be square");
        for i in 0..r {
            assert!((m[[i, i]] - 1.0).abs() <= 1e-6, "unit diagonal");
            for j in 0..i {
                assert!((m[[i, j]] - m[[j, i]]).abs() <= 1e-9, "symmetry");
                assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&m[[i, j]]), "cosine range");
            }
        }
        SimilarityMatrix { m, layer }
    }
}

/// Axis-aligned box in image pixel coordinates (inclusive), with the peak
/// activation that produced it. Degenerate single-pixel boxes (min = max)
/// are allowed so a one-cell component still yields a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
    pub score: f64,
}

impl BoxPrompt {
    pub fn new(
        row_min: usize,
        col_min: usize,
        row_max: usize,
        col_max: usize,
        score: f64,
    ) -> Self {
        assert!(row_min <= row_max && col_min <= col_max, "inverted box");
        BoxPrompt { row_min, col_min, row_max, col_max, score }
    }

    pub fn contains(&self, other: &BoxPrompt) -> bool {
        self.row_min <= other.row_min
            && self.col_min <= other.col_min
            && self.row_max >= other.row_max
            && self.col_max >= other.col_max
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.row_max >= height || self.col_max >= width {
            return Err(Error::Data(format!(
                "box ({},{})-({},{}) outside {height}x{width} image",
                self.row_min, self.col_min, self.row_max, self.col_max
            )));
        }
        Ok(())
    }
}

/// Default relative threshold for cutting a CAM into boxes.
pub const CAM_BOX_THETA: f64 = 0.45;
/// Components smaller than this many grid cells are dropped.
pub const CAM_BOX_MIN_AREA: usize = 2;
/// Cosine threshold on the intermediate-layer affinity that declares a
/// token pair positive.
pub const PTC_TAU: f64 = 0.5;

/// Encoder shape. The classifier head has no bias so its weights double as
/// CAM weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WsssArch {
    pub image_side: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub k_classes: usize,
}

impl Default for WsssArch {
    fn default() -> Self {
        WsssArch::desk()
    }
}

impl WsssArch {
    /// Desk-scale encoder: 4 layers, C = 64, 8×8 grid over 64×64 input.
    pub fn desk() -> Self {
        WsssArch { image_side: 64, patch: 8, dim: 64, layers: 4, mlp_hidden: 128, k_classes: 1 }
    }

    /// Reference configuration: 12 layers over 448×448 input with 16×16
    /// patches, intermediate tap at layer 10.
    pub fn reference() -> Self {
        WsssArch {
            image_side: 448,
            patch: 16,
            dim: 768,
            layers: 12,
            mlp_hidden: 3072,
            k_classes: 1,
        }
    }

    pub fn grid_side(&self) -> usize {
        assert_eq!(self.image_side % self.patch, 0, "patch must divide image side");
        self.image_side / self.patch
    }

    pub fn token_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// 1-indexed block whose output is the intermediate tap (two blocks
    /// before the last, e.g. 10 of 12).
    pub fn intermediate_tap(&self) -> usize {
        assert!(self.layers >= 3, "need >= 3 layers for the intermediate tap");
        self.layers - 2
    }

    /// Every parameter name with its expected shape (checkpoint validation
    /// without building a model).
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, h, k, p) = (self.dim, self.mlp_hidden, self.k_classes, self.patch);
        let mut out = vec![
            ("patch.w".into(), vec![c, 3, p, p]),
            ("patch.b".into(), vec![c]),
            ("pos".into(), vec![self.token_count(), c]),
        ];
        for i in 0..self.layers {
            out.push((format!("blk{i}.ln1.g"), vec![c]));
            out.push((format!("blk{i}.ln1.b"), vec![c]));
            for name in ["q", "k", "v", "o"] {
                out.push((format!("blk{i}.{name}.w"), vec![c, c]));
                out.push((format!("blk{i}.{name}.b"), vec![c]));
            }
            out.push((format!("blk{i}.ln2.g"), vec![c]));
            out.push((format!("blk{i}.ln2.b"), vec![c]));
            out.push((format!("blk{i}.m1.w"), vec![c, h]));
            out.push((format!("blk{i}.m1.b"), vec![h]));
            out.push((format!("blk{i}.m2.w"), vec![h, c]));
            out.push((format!("blk{i}.m2.b"), vec![c]));
        }
        out.push(("ln.g".into(), vec![c]));
        out.push(("ln.b".into(), vec![c]));
        out.push(("head.w".into(), vec![c, k]));
        out.push(("aux.w".into(), vec![c, k]));
        out
    }
}

/// Transformer encoder + bias-free classification heads at both taps.
#[derive(Debug, Clone)]
pub struct WsssModel {
    pub arch: WsssArch,
    pub params: Params,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WsssTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Peak learning rate after linear warmup (reference value 6e-5).
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub lambda_ptc: f64,
    pub lambda_aux: f64,
    /// Affinity threshold for positive pairs.
    pub tau: f64,
    pub seed: u64,
}

impl Default for WsssTrainConfig {
    fn default() -> Self {
        WsssTrainConfig {
            steps: 500,
            batch: 2,
            peak_lr: 6e-5,
            warmup_steps: 50,
            poly_power: 0.9,
            weight_decay: 0.01,
            lambda_ptc: 1.0,
            lambda_aux: 1.0,
            tau: PTC_TAU,
            seed: 0,
        }
    }
}

struct TappedForward {
    inter: Var,
    last: Var,
    logits: Var,
    logits_aux: Var,
}

impl WsssModel {
    pub fn new(arch: WsssArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let c = arch.dim;
        nn::conv_init(&mut params, &mut rng, "patch", c, 3, arch.patch);
        params.insert("pos", nn::normal_init(&mut rng, &[arch.token_count(), c], 0.02));
        for i in 0..arch.layers {
            params.insert(format!("blk{i}.ln1.g"), nn::ones(&[c]));
            params.insert(format!("blk{i}.ln1.b"), nn::zeros(&[c]));
            nn::linear_init(&mut params, &mut rng, &format!("blk{i}.q"), c, c);
            nn::linear_init(&mut params, &mut rng, &format!("blk{i}.k"), c, c);
            nn::linear_init(&mut params, &mut rng, &format!("blk{i}.v"), c, c);
            nn::linear_init(&mut params, &mut rng, &format!("blk{i}.o"), c, c);
            params.insert(format!("blk{i}.ln2.g"), nn::ones(&[c]));
            params.insert(format!("blk{i}.ln2.b"), nn::zeros(&[c]));
            nn::linear_init(&mut params, &mut rng, &format!("blk{i}.m1"), c, arch.mlp_hidden);
            nn::linear_init(&mut params, &mut rng, &format!("blk{i}.m2"), arch.mlp_hidden, c);
        }
        params.insert("ln.g", nn::ones(&[c]));
        params.insert("ln.b", nn::zeros(&[c]));
        params.insert("head.w", nn::xavier_uniform(&mut rng, c, arch.k_classes));
        params.insert("aux.w", nn::xavier_uniform(&mut rng, c, arch.k_classes));
        WsssModel { arch, params }
    }

    /// Graph: one image (1, 3, S, S) -> tapped tokens and class logits.
    fn forward_graph(&self, tape: &mut Tape, bound: &Bound, x: Var) -> TappedForward {
        let arch = &self.arch;
        let t = arch.token_count();
        let c = arch.dim;
        let h = nn::conv_fwd(tape, bound, "patch", x, arch.patch, 0); // (1, C, N, N)
        let h = tape.reshape(h, &[c, t]);
        let h = tape.transpose(h); // (T, C), row-major over the grid
        let mut h = tape.add(h, bound.var("pos"));
        let mut inter = None;
        let scale = 1.0 / (c as f64).sqrt();
        for i in 0..arch.layers {
            let ln1 = tape.layer_norm(h, bound.var(&format!("blk{i}.ln1.g")), bound.var(&format!("blk{i}.ln1.b")), 1e-5);
            let q = nn::linear_fwd(tape, bound, &format!("blk{i}.q"), ln1);
            let k = nn::linear_fwd(tape, bound, &format!("blk{i}.k"), ln1);
            let v = nn::linear_fwd(tape, bound, &format!("blk{i}.v"), ln1);
            let kt = tape.transpose(k);
            let s = tape.matmul(q, kt);
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s);
            let ctx = tape.matmul(a, v);
            let proj = nn::linear_fwd(tape, bound, &format!("blk{i}.o"), ctx);
            h = tape.add(h, proj);
            let ln2 = tape.layer_norm(h, bound.var(&format!("blk{i}.ln2.g")), bound.var(&format!("blk{i}.ln2.b")), 1e-5);
            let m = nn::linear_fwd(tape, bound, &format!("blk{i}.m1"), ln2);
            let m = tape.gelu(m);
            let m = nn::linear_fwd(tape, bound, &format!("blk{i}.m2"), m);
            h = tape.add(h, m);
            if i + 1 == arch.intermediate_tap() {
                inter = Some(h);
            }
        }
        let last = tape.layer_norm(h, bound.var("ln.g"), bound.var("ln.b"), 1e-5);
        let inter = inter.expect("tap index within layer range");
        let gmp = tape.col_max(last); // (1, C)
        let logits = tape.matmul(gmp, bound.var("head.w")); // (1, K)
        let gmp_aux = tape.col_max(inter);
        let logits_aux = tape.matmul(gmp_aux, bound.var("aux.w"));
        TappedForward { inter, last, logits, logits_aux }
    }

    fn check_image(&self, image: &ImageSample) -> Result<Arr> {
        let (h, w, ch) = image.pixels.dim();
        let s = self.arch.image_side;
        if h != s || w != s || ch != 3 {
            return Err(Error::Data(format!(
                "image {} is {h}x{w}x{ch}, encoder expects {s}x{s}x3",
                image.image_id
            )));
        }
        let chw = nn::image_to_chw(&image.pixels);
        Ok(nn::stack_batch(&[chw]).into_dyn())
    }

    /// Run the encoder on one image: tokens at both taps plus the class
    /// probabilities from global max pooling + classification layer.
    pub fn classify_forward(&self, image: &ImageSample) -> Result<(PatchGrid, PatchGrid, Vec<f64>)> {
        let x = self.check_image(image)?;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params);
        let xv = tape.leaf(x);
        let fwd = self.forward_graph(&mut tape, &bound, xv);
        let n = self.arch.grid_side();
        let inter = PatchGrid::new(tape.value2(fwd.inter).to_owned(), n, LayerTag::Intermediate);
        let last = PatchGrid::new(tape.value2(fwd.last).to_owned(), n, LayerTag::Last);
        let p: Vec<f64> = tape.value(fwd.logits).iter().map(|&z| sigmoid(z)).collect();
        Ok((inter, last, p))
    }

    /// Classification weights of the main head (K×C), shared with the CAM.
    pub fn class_weights(&self) -> ClassWeights {
        let w = self.params.get("head.w");
        let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        ClassWeights::new(w2.t().to_owned())
    }

    /// CAM for class `k` of one image (forward + projection + rescale).
    pub fn cam_for_image(&self, image: &ImageSample, k: usize) -> Result<CAMap> {
        let (_, last, _) = self.classify_forward(image)?;
        Ok(compute_cam(&last.to_spatial(), &self.class_weights(), k))
    }

    /// Total loss and gradients on a batch: classification at the last tap,
    /// auxiliary classification at the intermediate tap, and the token
    /// contrast term, each averaged over the batch.
    pub fn loss_grads(
        &self,
        images: &[&ImageSample],
        labels: &[u8],
        cfg: &WsssTrainConfig,
    ) -> Result<(f64, IndexMap<String, Arr>)> {
        assert_eq!(images.len(), labels.len(), "label arity");
        assert!(!images.is_empty(), "empty batch");
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params);
        let mut per_image = Vec::with_capacity(images.len());
        for (img, &y) in images.iter().zip(labels) {
            let x = self.check_image(img)?;
            let xv = tape.leaf(x);
            let fwd = self.forward_graph(&mut tape, &bound, xv);
            let targets = Arr::from_elem(ndarray::IxDyn(&[1, self.arch.k_classes]), y as f64);
            let ce = tape.bce_with_logits(fwd.logits, targets.clone());
            let l_cls = tape.mean_all(ce);
            let ce_aux = tape.bce_with_logits(fwd.logits_aux, targets);
            let l_aux = tape.mean_all(ce_aux);
            let n = self.arch.grid_side();
            let m_t = token_similarity(&PatchGrid::new(
                tape.value2(fwd.inter).to_owned(),
                n,
                LayerTag::Intermediate,
            ));
            let l_ptc = ptc_graph(&mut tape, fwd.last, &m_t, cfg.tau);
            let l_aux = tape.scale(l_aux, cfg.lambda_aux);
            let l_ptc = tape.scale(l_ptc, cfg.lambda_ptc);
            let s1 = tape.add(l_cls, l_aux);
            per_image.push(tape.add(s1, l_ptc));
        }
        let mut total = per_image[0];
        for &l in &per_image[1..] {
            total = tape.add(total, l);
        }
        let total = tape.scale(total, 1.0 / images.len() as f64);
        let value = tape.scalar(total);
        Ok((value, bound.grads(&self.params, tape.backward(total))))
    }

    /// Minibatch training with linear warmup into polynomial decay.
    /// `steps = 0` leaves the model untouched.
    pub fn train(
        &mut self,
        images: &[ImageSample],
        labels: &[u8],
        cfg: &WsssTrainConfig,
    ) -> Result<TrainLog> {
        assert_eq!(images.len(), labels.len(), "label arity");
        if images.is_empty() {
            return Err(Error::Data("train_wsss: no images".into()));
        }
        let mut log = TrainLog::default();
        let mut opt = AdamW::new(cfg.weight_decay);
        let schedule = LrSchedule::WarmupPoly {
            peak: cfg.peak_lr,
            warmup_steps: cfg.warmup_steps,
            total_steps: cfg.steps,
            power: cfg.poly_power,
        };
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0usize;
        let mut epoch = 0u64;
        for step in 0..cfg.steps {
            let mut batch_idx = Vec::with_capacity(cfg.batch.max(1));
            while batch_idx.len() < cfg.batch.max(1) {
                if cursor >= order.len() {
                    order = (0..images.len()).collect();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        &[7, epoch],
                    )));
                    cursor = 0;
                    epoch += 1;
                }
                batch_idx.push(order[cursor]);
                cursor += 1;
            }
            let batch: Vec<&ImageSample> = batch_idx.iter().map(|&i| &images[i]).collect();
            let ys: Vec<u8> = batch_idx.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = self.loss_grads(&batch, &ys, cfg)?;
            nn::check_finite(loss, "train_wsss")?;
            opt.step(&mut self.params, &grads, schedule.at(step));
            log.push(step, "wsss", loss);
        }
        Ok(log)
    }

    pub fn save(&self, path: &std::path::Path, train: &WsssTrainConfig, seed: u64) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "wsss",
            "arch": self.arch,
            "train": train,
            "seed": seed,
        });
        crate::checkpoint::save(path, &meta, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<(WsssModel, serde_json::Value)> {
        let (meta, params) = crate::checkpoint::load(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("wsss") {
            return Err(Error::Checkpoint {
                path: path.display().to_string(),
                msg: "not a localization-model checkpoint".into(),
            });
        }
        let arch: WsssArch = serde_json::from_value(meta["arch"].clone()).map_err(|e| {
            Error::Checkpoint { path: path.display().to_string(), msg: format!("arch: {e}") }
        })?;
        for (name, shape) in arch.param_shapes() {
            if !params.contains(&name) || params.get(&name).shape() != shape.as_slice() {
                return Err(Error::Checkpoint {
                    path: path.display().to_string(),
                    msg: format!("parameter {name} missing or mis-shaped"),
                });
            }
        }
        Ok((WsssModel { arch, params }, meta))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multi-label soft margin loss: `-(1/K) sum_k [Y ln p + (1-Y) ln(1-p)]`.
pub fn classification_loss(p_cls: &[f64], y: &[u8]) -> f64 {
    assert_eq!(p_cls.len(), y.len(), "label arity");
    assert!(!p_cls.is_empty());
    assert!(p_cls.iter().all(|&p| p > 0.0 && p < 1.0), "probabilities must be in (0,1)");
    let k = p_cls.len() as f64;
    -p_cls
        .iter()
        .zip(y)
        .map(|(&p, &yi)| {
            if yi == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / k
}

/// CAM for class `k`: relu of the class projection, divided by its max
/// (all-zero map when nothing activates).
pub fn compute_cam(f: &SpatialFeatureMap, w: &ClassWeights, k: usize) -> CAMap {
    assert!(k < w.k(), "class index out of range");
    let (n, n2, c) = f.f.dim();
    assert_eq!(n, n2, "spatial map must be square");
    assert_eq!(c, w.w.ncols(), "channel mismatch");
    let mut raw = Array2::<f64>::zeros((n, n));
    for r in 0..n {
        for col in 0..n {
            let mut s = 0.0;
            for ch in 0..c {
                s += w.w[[k, ch]] * f.f[[r, col, ch]];
            }
            raw[[r, col]] = s.max(0.0);
        }
    }
    let max = raw.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        raw.mapv_inplace(|v| v / max);
    }
    CAMap::new(raw, k)
}

/// Cosine similarity between every token pair (ε = 1e-8 in the norms).
pub fn token_similarity(tokens: &PatchGrid) -> SimilarityMatrix {
    let t = tokens.tokens.nrows();
    let mut normed = tokens.tokens.clone();
    for mut row in normed.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
        row.mapv_inplace(|v| v / n);
    }
    let mut m = normed.dot(&normed.t());
    for i in 0..t {
        m[[i, i]] = 1.0;
        for j in 0..i {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            let v = v.clamp(-1.0, 1.0);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    SimilarityMatrix::new(m, tokens.layer)
}

/// Membership masks for token pairs: positive where the intermediate
/// affinity clears `tau`, negative otherwise; self-pairs excluded from both.
fn pair_masks(m_t: &SimilarityMatrix, tau: f64) -> (Array2<f64>, usize, Array2<f64>, usize) {
    let t = m_t.m.nrows();
    let mut pos = Array2::<f64>::zeros((t, t));
    let mut neg = Array2::<f64>::zeros((t, t));
    let (mut np, mut nn_) = (0usize, 0usize);
    for i in 0..t {
        for j in 0..t {
            if i == j {
                continue;
            }
            if m_t.m[[i, j]] >= tau {
                pos[[i, j]] = 1.0;
                np += 1;
            } else {
                neg[[i, j]] = 1.0;
                nn_ += 1;
            }
        }
    }
    (pos, np, neg, nn_)
}

/// Patch-token-contrast graph over last-layer tokens: pulls positive pairs
/// toward cosine 1 and pushes negative pairs toward 0; an empty pair set
/// drops its term.
fn ptc_graph(tape: &mut Tape, tokens_last: Var, m_t: &SimilarityMatrix, tau: f64) -> Var {
    assert_eq!(m_t.layer, LayerTag::Intermediate, "pairs come from the intermediate tap");
    assert_eq!(tape.shape(tokens_last)[0], m_t.m.nrows(), "token arity");
    let (pos, np, neg, nn_) = pair_masks(m_t, tau);
    let rn = tape.row_normalize(tokens_last, 1e-8);
    let rnt = tape.transpose(rn);
    let cos = tape.matmul(rn, rnt);
    let mut terms: Option<Var> = None;
    if np > 0 {
        let sp = tape.mul_const(cos, pos.into_dyn());
        let sp = tape.sum_all(sp);
        let sp = tape.scale(sp, -1.0 / np as f64);
        let sp = tape.add_scalar(sp, 1.0);
        terms = Some(sp);
    }
    if nn_ > 0 {
        let sn = tape.mul_const(cos, neg.into_dyn());
        let sn = tape.sum_all(sn);
        let sn = tape.scale(sn, 1.0 / nn_ as f64);
        terms = Some(match terms {
            Some(t) => tape.add(t, sn),
            None => sn,
        });
    }
    match terms {
        Some(t) => t,
        None => {
            // single-token grid: no pairs at all
            let z = tape.sum_all(cos);
            tape.scale(z, 0.0)
        }
    }
}

/// Numeric patch-token-contrast loss (see `ptc_graph`).
pub fn ptc_loss(last: &PatchGrid, m_t: &SimilarityMatrix, tau: f64) -> f64 {
    assert_eq!(last.layer, LayerTag::Last, "contrast acts on last-layer tokens");
    let mut tape = Tape::new();
    let tok = tape.leaf2(last.tokens.clone());
    let l = ptc_graph(&mut tape, tok, m_t, tau);
    tape.scalar(l)
}

/// Cut a CAM into box prompts: binarize at `theta`, take 4-connected
/// components of at least `min_area` cells, and scale each component's tight
/// cell box to pixel coordinates. Score is the component's peak activation.
pub fn cam_to_boxes(
    cam: &CAMap,
    image_height: usize,
    image_width: usize,
    theta: f64,
    min_area: usize,
) -> Vec<BoxPrompt> {
    assert!(theta > 0.0 && theta < 1.0, "theta in (0,1)");
    let (n, n2) = cam.values.dim();
    assert_eq!(n, n2, "cam must be square");
    let mut seen = Array2::<bool>::from_elem((n, n), false);
    let mut boxes = Vec::new();
    for r0 in 0..n {
        for c0 in 0..n {
            if seen[[r0, c0]] || cam.values[[r0, c0]] < theta {
                continue;
            }
            // flood-fill one component
            let mut stack = vec![(r0, c0)];
            seen[[r0, c0]] = true;
            let (mut rmin, mut rmax, mut cmin, mut cmax) = (r0, r0, c0, c0);
            let mut peak = 0.0f64;
            let mut area = 0usize;
            while let Some((r, c)) = stack.pop() {
                area += 1;
                peak = peak.max(cam.values[[r, c]]);
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
                let mut push = |rr: usize, cc: usize, seen: &mut Array2<bool>| {
                    if !seen[[rr, cc]] && cam.values[[rr, cc]] >= theta {
                        seen[[rr, cc]] = true;
                        stack.push((rr, cc));
                    }
                };
                if r > 0 {
                    push(r - 1, c, &mut seen);
                }
                if r + 1 < n {
                    push(r + 1, c, &mut seen);
                }
                if c > 0 {
                    push(r, c - 1, &mut seen);
                }
                if c + 1 < n {
                    push(r, c + 1, &mut seen);
                }
            }
            if area < min_area {
                continue;
            }
            boxes.push(BoxPrompt::new(
                rmin * image_height / n,
                cmin * image_width / n,
                (rmax + 1) * image_height / n - 1,
                (cmax + 1) * image_width / n - 1,
                peak,
            ));
        }
    }
    boxes.sort_by(|a, b| (a.row_min, a.col_min).cmp(&(b.row_min, b.col_min)));
    boxes
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;

    fn tiny_arch() -> WsssArch {
        WsssArch { image_side: 16, patch: 8, dim: 8, layers: 3, mlp_hidden: 12, k_classes: 1 }
    }

    fn sample(side: usize, seed: u64) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageSample {
            image_id: format!("img{seed}"),
            pixels: Array3::from_shape_fn((side, side, 3), |_| rng.random_range(0..=255u32) as u8),
            record_id: "r".into(),
        }
    }

    #[test]
    fn token_arithmetic_matches_configs() {
        let r = WsssArch::reference();
        assert_eq!(r.grid_side(), 28);
        assert_eq!(r.token_count(), 784);
        assert_eq!(r.intermediate_tap(), 10);
        let d = WsssArch::desk();
        assert_eq!(d.grid_side(), 8);
        assert_eq!(d.token_count(), 64);
        assert_eq!(d.intermediate_tap(), 2);
    }

    #[test]
    fn forward_shapes_and_wrong_size_rejected() {
        let m = WsssModel::new(tiny_arch(), 0);
        let (inter, last, p) = m.classify_forward(&sample(16, 1)).unwrap();
        assert_eq!(inter.tokens.dim(), (4, 8));
        assert_eq!(last.tokens.dim(), (4, 8));
        assert_eq!(inter.layer, LayerTag::Intermediate);
        assert_eq!(last.layer, LayerTag::Last);
        assert_eq!(p.len(), 1);
        assert!(p[0] > 0.0 && p[0] < 1.0);
        assert!(m.classify_forward(&sample(8, 1)).is_err());
    }

    #[test]
    fn zero_head_probability_is_half_and_gmp_matches_scan() {
        let mut m = WsssModel::new(tiny_arch(), 0);
        let shape = m.params.get("head.w").shape().to_vec();
        *m.params.get_mut("head.w") = Arr::zeros(ndarray::IxDyn(&shape));
        let img = sample(16, 2);
        let (_, last, p) = m.classify_forward(&img).unwrap();
        assert_eq!(p[0], 0.5);

        // logits equal brute-force per-channel max dotted with the weights
        let mut m2 = WsssModel::new(tiny_arch(), 0);
        *m2.params.get_mut("head.w") = Arr::ones(ndarray::IxDyn(&shape));
        let (_, last2, p2) = m2.classify_forward(&img).unwrap();
        assert_eq!(last.tokens, last2.tokens);
        let mut logit = 0.0;
        for ch in 0..last2.tokens.ncols() {
            let mut best = f64::NEG_INFINITY;
            for t in 0..last2.tokens.nrows() {
                best = best.max(last2.tokens[[t, ch]]);
            }
            logit += best;
        }
        assert!((p2[0] - sigmoid(logit)).abs() < 1e-12);
    }

    #[test]
    fn spatial_map_is_row_major_reshape() {
        let tokens = arr2(&[[1.0, 10.0], [2.0, 20.0], [3.0, 30.0], [4.0, 40.0]]);
        let grid = PatchGrid::new(tokens, 2, LayerTag::Last);
        let f = grid.to_spatial();
        assert_eq!(f.f[[0, 0, 0]], 1.0);
        assert_eq!(f.f[[0, 1, 0]], 2.0);
        assert_eq!(f.f[[1, 0, 1]], 30.0);
        assert_eq!(f.f[[1, 1, 1]], 40.0);
    }

    #[test]
    fn classification_loss_closed_forms() {
        // near the limits the loss vanishes
        assert!(classification_loss(&[1.0 - 1e-12], &[1]) < 1e-9);
        assert!(classification_loss(&[1e-12], &[0]) < 1e-9);
        // K=1, p=0.5, Y=1 -> ln 2
        assert!((classification_loss(&[0.5], &[1]) - std::f64::consts::LN_2).abs() < 1e-12);
        // two classes average
        let l = classification_loss(&[0.5, 0.5], &[1, 0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // matches the logit-space graph value
        let m = WsssModel::new(tiny_arch(), 3);
        let img = sample(16, 4);
        let (_, _, p) = m.classify_forward(&img).unwrap();
        let (loss, _) = m
            .loss_grads(&[&img], &[1], &WsssTrainConfig { lambda_ptc: 0.0, lambda_aux: 0.0, ..Default::default() })
            .unwrap();
        assert!((loss - classification_loss(&p, &[1])).abs() < 1e-9);
    }

    #[test]
    fn cam_matches_spreadsheet_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = SpatialFeatureMap {
            f: Array3::from_shape_fn((4, 4, 3), |_| rng.random::<f64>() * 2.0 - 1.0),
        };
        let w = ClassWeights::new(Array2::from_shape_fn((2, 3), |_| rng.random::<f64>() * 2.0 - 1.0));
        for k in 0..2 {
            let cam = compute_cam(&f, &w, k);
            // hand recompute
            let mut raw = Array2::<f64>::zeros((4, 4));
            for r in 0..4 {
                for c in 0..4 {
                    let mut s = 0.0;
                    for ch in 0..3 {
                        s += w.w[[k, ch]] * f.f[[r, c, ch]];
                    }
                    raw[[r, c]] = s.max(0.0);
                }
            }
            let max = raw.iter().cloned().fold(0.0, f64::max);
            for r in 0..4 {
                for c in 0..4 {
                    let want = if max > 0.0 { raw[[r, c]] / max } else { 0.0 };
                    assert!((cam.values[[r, c]] - want).abs() < 1e-12);
                }
            }
            // in range, idempotent under re-normalization
            let again = {
                let mut v = cam.values.clone();
                let m2 = v.iter().cloned().fold(0.0, f64::max);
                if m2 > 0.0 {
                    v.mapv_inplace(|x| x / m2);
                }
                v
            };
            assert_eq!(again, cam.values);
        }
    }

    #[test]
    fn cam_one_hot_and_all_negative() {
        // W_k aligned with a single hot cell
        let mut f = Array3::<f64>::zeros((3, 3, 2));
        f[[1, 2, 0]] = 5.0;
        let w = ClassWeights::new(arr2(&[[1.0, 0.0]]));
        let cam = compute_cam(&SpatialFeatureMap { f: f.clone() }, &w, 0);
        for r in 0..3 {
            for c in 0..3 {
                let want = if (r, c) == (1, 2) { 1.0 } else { 0.0 };
                assert_eq!(cam.values[[r, c]], want);
            }
        }
        // all-negative projections -> all-zero cam
        let w_neg = ClassWeights::new(arr2(&[[-1.0, -1.0]]));
        f.mapv_inplace(f64::abs);
        let cam = compute_cam(&SpatialFeatureMap { f }, &w_neg, 0);
        assert!(cam.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_similarity_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // 5 random tokens on a fake 'grid' of side sqrt(5)? use 4 + pad grid 2
        let tokens = Array2::from_shape_fn((4, 6), |_| rng.random::<f64>() * 2.0 - 1.0);
        let grid = PatchGrid::new(tokens.clone(), 2, LayerTag::Intermediate);
        let sim = token_similarity(&grid);
        assert_eq!(sim.layer, LayerTag::Intermediate);
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    // pinned exactly; the raw value is off by O(eps/norm)
                    assert_eq!(sim.m[[i, i]], 1.0);
                    continue;
                }
                let a = tokens.row(i);
                let b = tokens.row(j);
                let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let want = dot / ((na + 1e-8) * (nb + 1e-8));
                assert!((sim.m[[i, j]] - want).abs() < 1e-9, "({i},{j})");
                assert!((sim.m[[i, j]] - sim.m[[j, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_similarity_degenerate_directions() {
        // identical tokens -> all ones
        let t = Array2::from_elem((4, 3), 0.7);
        let sim = token_similarity(&PatchGrid::new(t, 2, LayerTag::Last));
        for v in sim.m.iter() {
            assert!((v - 1.0).abs() < 1e-7);
        }
        // orthogonal pair -> off-diagonal 0 (grid side 1 disallowed; use 2x2
        // with two orthogonal + two zero-ish rows)
        let mut t = Array2::<f64>::zeros((4, 2));
        t[[0, 0]] = 1.0;
        t[[1, 1]] = 1.0;
        t[[2, 0]] = 1.0;
        t[[3, 1]] = 1.0;
        let sim = token_similarity(&PatchGrid::new(t, 2, LayerTag::Last));
        assert!(sim.m[[0, 1]].abs() < 1e-9);
        assert!((sim.m[[0, 2]] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn ptc_loss_hand_enumerated() {
        // 4 tokens in 2-D; affinity hand-chosen
        let last = PatchGrid::new(
            arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]),
            2,
            LayerTag::Last,
        );
        // positives: (0,3) both directions and (0,2)/(2,0), (1,2)/(2,1);
        // everything else negative
        let mut m = Array2::from_elem((4, 4), 0.0);
        for i in 0..4 {
            m[[i, i]] = 1.0;
        }
        for (i, j) in [(0, 3), (0, 2), (1, 2)] {
            m[[i, j]] = 0.9;
            m[[j, i]] = 0.9;
        }
        let m_t = SimilarityMatrix::new(m, LayerTag::Intermediate);
        let got = ptc_loss(&last, &m_t, 0.5);
        // cosine table (eps negligible): cos(0,3)=1, cos(0,2)=cos(1,2)=1/sqrt(2),
        // cos(0,1)=0, cos(1,3)=0, cos(2,3)=1/sqrt(2)
        let c02 = 1.0 / 2f64.sqrt();
        let pos_mean = (2.0 * (1.0 - 1.0) + 2.0 * (1.0 - c02) + 2.0 * (1.0 - c02)) / 6.0;
        let neg_mean = (2.0 * 0.0 + 2.0 * 0.0 + 2.0 * c02) / 6.0;
        assert!((got - (pos_mean + neg_mean)).abs() < 1e-7, "got {got}");
    }

    #[test]
    fn ptc_loss_degenerate_cases() {
        // identical tokens, all pairs positive -> loss 0
        let last = PatchGrid::new(Array2::from_elem((4, 3), 0.5), 2, LayerTag::Last);
        let m_t = SimilarityMatrix::new(Array2::from_elem((4, 4), 1.0), LayerTag::Intermediate);
        let got = ptc_loss(&last, &m_t, 0.5);
        assert!(got.abs() < 1e-6, "got {got}");

        // orthogonal pair labeled negative -> negative term 0; with no
        // positive pairs the whole loss is the (zero) negative term
        let mut t = Array2::<f64>::zeros((4, 4));
        for i in 0..4 {
            t[[i, i]] = 1.0;
        }
        let last = PatchGrid::new(t, 2, LayerTag::Last);
        let mut m = Array2::from_elem((4, 4), -0.5);
        for i in 0..4 {
            m[[i, i]] = 1.0;
        }
        let m_t = SimilarityMatrix::new(m, LayerTag::Intermediate);
        let got = ptc_loss(&last, &m_t, 0.5);
        assert!(got.abs() < 1e-9, "got {got}");
    }

    #[test]
    fn ptc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tokens = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
        let mut m = Array2::from_elem((4, 4), 0.0);
        for i in 0..4 {
            m[[i, i]] = 1.0;
        }
        m[[0, 1]] = 0.8;
        m[[1, 0]] = 0.8;
        m[[2, 3]] = 0.6;
        m[[3, 2]] = 0.6;
        let m_t = SimilarityMatrix::new(m, LayerTag::Intermediate);

        let eval = |tok: &Array2<f64>| -> (f64, Arr) {
            let mut tape = Tape::new();
            let v = tape.leaf2(tok.clone());
            let l = ptc_graph(&mut tape, v, &m_t, 0.5);
            let mut g = tape.backward(l);
            (tape.scalar(l), g.take(v).unwrap())
        };
        let (_, grad) = eval(&tokens);
        for i in 0..4 {
            for j in 0..3 {
                let mut up = tokens.clone();
                up[[i, j]] += 1e-6;
                let mut dn = tokens.clone();
                dn[[i, j]] -= 1e-6;
                let fd = (eval(&up).0 - eval(&dn).0) / 2e-6;
                let an = grad[[i, j]];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(((fd - an) / denom).abs() < 1e-4, "({i},{j}) fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let mut m = WsssModel::new(tiny_arch(), 11);
        let img = sample(16, 12);
        let cfg = WsssTrainConfig::default();
        let eval = |m: &WsssModel| m.loss_grads(&[&img], &[1], &cfg).unwrap();
        let (_, grads) = eval(&m);
        let names: Vec<String> = m.params.names().cloned().collect();
        for name in names {
            let n = m.params.get(&name).len();
            let stride = (n / 4).max(1);
            for flat in (0..n).step_by(stride) {
                let orig = m.params.get(&name).iter().nth(flat).cloned().unwrap();
                let h = 1e-5 * orig.abs().max(1.0);
                *m.params.get_mut(&name).iter_mut().nth(flat).unwrap() = orig + h;
                let up = eval(&m).0;
                *m.params.get_mut(&name).iter_mut().nth(flat).unwrap() = orig - h;
                let down = eval(&m).0;
                *m.params.get_mut(&name).iter_mut().nth(flat).unwrap() = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[&name].iter().nth(flat).cloned().unwrap();
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "{name}[{flat}]: fd={fd} autodiff={an}"
                );
            }
        }
    }

    #[test]
    fn zero_steps_and_determinism() {
        let imgs: Vec<ImageSample> = (0..4).map(|i| sample(16, i)).collect();
        let labels = [1u8, 0, 1, 0];
        let mut m = WsssModel::new(tiny_arch(), 1);
        let before = m.params.clone();
        let log = m
            .train(&imgs, &labels, &WsssTrainConfig { steps: 0, ..Default::default() })
            .unwrap();
        assert!(log.rows.is_empty());
        for (name, arr) in before.iter() {
            assert_eq!(m.params.get(name), arr);
        }

        let cfg = WsssTrainConfig { steps: 3, batch: 2, seed: 5, ..Default::default() };
        let mut m1 = WsssModel::new(tiny_arch(), 1);
        let log1 = m1.train(&imgs, &labels, &cfg).unwrap();
        let mut m2 = WsssModel::new(tiny_arch(), 1);
        let log2 = m2.train(&imgs, &labels, &cfg).unwrap();
        assert_eq!(log1.to_csv(), log2.to_csv());
        for (name, arr) in m1.params.iter() {
            assert_eq!(m2.params.get(name), arr, "{name}");
        }
        let mut m3 = WsssModel::new(tiny_arch(), 1);
        let log3 = m3.train(&imgs, &labels, &WsssTrainConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(log1.to_csv(), log3.to_csv());
    }

    #[test]
    fn boxes_from_trivial_cams() {
        // all-zero cam -> no boxes
        let cam = CAMap::new(Array2::zeros((8, 8)), 0);
        assert!(cam_to_boxes(&cam, 64, 64, CAM_BOX_THETA, CAM_BOX_MIN_AREA).is_empty());

        // full-grid activation -> whole image
        let cam = CAMap::new(Array2::from_elem((8, 8), 1.0), 0);
        let boxes = cam_to_boxes(&cam, 64, 64, CAM_BOX_THETA, CAM_BOX_MIN_AREA);
        assert_eq!(boxes.len(), 1);
        assert_eq!(
            boxes[0],
            BoxPrompt { row_min: 0, col_min: 0, row_max: 63, col_max: 63, score: 1.0 }
        );
    }

    #[test]
    fn boxes_match_component_oracle() {
        // two disjoint 2x2 hot regions on an 8x8 grid over a 64x64 image
        let mut v = Array2::<f64>::zeros((8, 8));
        for (r, c) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            v[[r, c]] = 1.0;
        }
        for (r, c) in [(5, 4), (5, 5), (6, 4), (6, 5)] {
            v[[r, c]] = 0.8;
        }
        let cam = CAMap::new(v, 0);
        let boxes = cam_to_boxes(&cam, 64, 64, 0.5, 2);
        assert_eq!(boxes.len(), 2);
        // cells (1..=2, 1..=2): pixels rows 8..=23, cols 8..=23
        assert_eq!(
            boxes[0],
            BoxPrompt { row_min: 8, col_min: 8, row_max: 23, col_max: 23, score: 1.0 }
        );
        // cells (5..=6, 4..=5): pixels rows 40..=55, cols 32..=47
        assert_eq!(
            boxes[1],
            BoxPrompt { row_min: 40, col_min: 32, row_max: 55, col_max: 47, score: 0.8 }
        );

        // min_area drops a lone hot cell
        let mut v = Array2::<f64>::zeros((8, 8));
        v[[3, 3]] = 1.0;
        let cam = CAMap::new(v, 0);
        assert!(cam_to_boxes(&cam, 64, 64, 0.5, 2).is_empty());
        assert_eq!(cam_to_boxes(&cam, 64, 64, 0.5, 1).len(), 1);
    }

    #[test]
    fn boxes_shrink_monotonically_in_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let mut v = Array2::<f64>::from_shape_fn((8, 8), |_| rng.random::<f64>());
            let max = v.iter().cloned().fold(0.0, f64::max);
            v.mapv_inplace(|x| x / max);
            let cam = CAMap::new(v, 0);
            let low = cam_to_boxes(&cam, 64, 64, 0.3, 1);
            let high = cam_to_boxes(&cam, 64, 64, 0.7, 1);
            for hb in &high {
                assert!(
                    low.iter().any(|lb| lb.contains(hb)),
                    "high-theta box {hb:?} not inside any low-theta box"
                );
            }
        }
    }

    fn blob_image(side: usize, seed: u64, blob: Option<(usize, usize, usize)>) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = Array3::from_shape_fn((side, side, 3), |(r, c, _)| {
            let bg = 40 + (rng.random::<f64>() * 30.0) as u8;
            match blob {
                Some((cr, cc, rad))
                    if (r as i64 - cr as i64).pow(2) + (c as i64 - cc as i64).pow(2)
                        <= (rad * rad) as i64 =>
                {
                    200 + (rng.random::<f64>() * 30.0) as u8
                }
                _ => bg,
            }
        });
        ImageSample { image_id: format!("blob{seed}"), pixels, record_id: format!("r{seed}") }
    }

    /// End-to-end learnability: after a few hundred steps the CAM overlaps
    /// the generator's blob mask on most positive images.
    #[test]
    fn cam_localizes_synthetic_blobs() {
        let arch = WsssArch::desk();
        let side = arch.image_side;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut blobs = Vec::new();
        for i in 0..10 {
            let rad = rng.random_range(12..=20usize);
            let cr = rng.random_range(rad..side - rad);
            let cc = rng.random_range(rad..side - rad);
            images.push(blob_image(side, 1000 + i, Some((cr, cc, rad))));
            labels.push(1u8);
            blobs.push((cr, cc, rad));
        }
        for i in 0..10 {
            images.push(blob_image(side, 2000 + i, None));
            labels.push(0u8);
        }
        let mut model = WsssModel::new(arch, 7);
        let cfg = WsssTrainConfig {
            steps: 240,
            batch: 2,
            peak_lr: 3e-3,
            warmup_steps: 20,
            seed: 3,
            ..Default::default()
        };
        model.train(&images, &labels, &cfg).unwrap();

        let n = model.arch.grid_side();
        let cell = side / n;
        let mut hits = 0;
        for (i, &(cr, cc, rad)) in blobs.iter().enumerate() {
            let cam = model.cam_for_image(&images[i], 0).unwrap();
            // grid-resolution truth: cell on when at least half its pixels
            // fall inside the disc
            let mut inter = 0usize;
            let mut union = 0usize;
            for gr in 0..n {
                for gc in 0..n {
                    let mut inside = 0usize;
                    for r in gr * cell..(gr + 1) * cell {
                        for c in gc * cell..(gc + 1) * cell {
                            let d2 = (r as i64 - cr as i64).pow(2) + (c as i64 - cc as i64).pow(2);
                            if d2 <= (rad * rad) as i64 {
                                inside += 1;
                            }
                        }
                    }
                    let truth = inside * 2 >= cell * cell;
                    let pred = cam.values[[gr, gc]] >= CAM_BOX_THETA;
                    if truth && pred {
                        inter += 1;
                    }
                    if truth || pred {
                        union += 1;
                    }
                }
            }
            let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            if iou >= 0.5 {
                hits += 1;
            }
        }
        assert!(hits >= 8, "CAM matched the blob on only {hits}/10 positives");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::TempDir::new().unwrap();
        let p = dir.path().join("wsss.ckpt");
        let m = WsssModel::new(tiny_arch(), 17);
        m.save(&p, &WsssTrainConfig::default(), 17).unwrap();
        let (m2, meta) = WsssModel::load(&p).unwrap();
        assert_eq!(m2.arch, m.arch);
        assert_eq!(meta["seed"], 17);
        for (name, arr) in m.params.iter() {
            assert_eq!(m2.params.get(name), arr);
        }
    }
}
