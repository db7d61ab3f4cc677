//! Dual-teacher / single-student multiple-instance learning that distils
//! report-level labels into per-image labels.
//!
//! Two teacher branches share one encoder: an attention-pooling teacher
//! (two-layer scoring network, softmax over the bag) and a dual-stream
//! teacher (critical instance by an instance classifier, non-local attention
//! from query inner products). Their per-instance attention, max-rescaled
//! and averaged, becomes the student's soft pseudo-labels; negative bags
//! force all-zero targets. Teachers and student alternate one epoch each.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Params, Sgd};
use crate::records::{Bag, ImageSample};
use crate::tensor::{Arr, Tape, Var};

/// Architecture knobs shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilArch {
    pub image_side: usize,
    /// Channels of the stride-2 conv blocks; the last entry is the
    /// embedding dimension C.
    pub encoder_channels: Vec<usize>,
    /// Hidden width of the attention scoring network.
    pub attn_hidden: usize,
    /// Output dimension of the dual-stream query map.
    pub query_dim: usize,
}

impl Default for MilArch {
    fn default() -> Self {
        MilArch::desk()
    }
}

impl MilArch {
    /// Desk-scale default: 4 conv blocks, C = 128, 64x64 inputs.
    pub fn desk() -> Self {
        MilArch {
            image_side: 64,
            encoder_channels: vec![8, 16, 32, 128],
            attn_hidden: 64,
            query_dim: 64,
        }
    }

    pub fn embed_dim(&self) -> usize {
        *self.encoder_channels.last().expect("encoder needs >= 1 block")
    }
}

/// Per-instance attention over one bag: raw scores and the softmax form.
#[derive(Debug, Clone)]
pub struct AttentionVector {
    pub raw: Vec<f64>,
    /// Softmax of `raw`; sums to 1 within 1e-9.
    pub normalized: Vec<f64>,
}

/// Soft per-instance targets in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelVector {
    pub values: Vec<f64>,
}

/// Encoder + two teacher branches + student head.
#[derive(Debug, Clone)]
pub struct MilModel {
    pub arch: MilArch,
    pub params: Params,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MilTrainConfig {
    /// Alternation rounds: each is one teacher epoch + pseudo-label refresh
    /// + one student epoch.
    pub rounds: usize,
    pub lr: f64,
    pub momentum: f64,
    pub student_batch: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for MilTrainConfig {
    fn default() -> Self {
        MilTrainConfig {
            rounds: 6,
            lr: 0.001,
            momentum: 0.0,
            student_batch: 32,
            augment: AugmentConfig::crop_flip(),
            seed: 0,
        }
    }
}

pub use crate::nn::{derive_seed, LogRow, TrainLog};

/// Register the `encoder.c{i}` conv blocks for `arch` into `params`.
pub(crate) fn encoder_init<R: rand::Rng>(arch: &MilArch, params: &mut Params, rng: &mut R) {
    let mut cin = 3;
    for (i, &cout) in arch.encoder_channels.iter().enumerate() {
        nn::conv_init(params, rng, &format!("encoder.c{i}"), cout, cin, 3);
        cin = cout;
    }
}

/// Graph: NCHW batch -> (N, C) embeddings through the `encoder.c{i}`
/// stride-2 conv blocks and a global average pool.
pub(crate) fn encoder_graph(arch: &MilArch, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
    let mut h = x;
    for i in 0..arch.encoder_channels.len() {
        h = nn::conv_fwd(tape, bound, &format!("encoder.c{i}"), h, 2, 1);
        h = tape.relu(h);
    }
    tape.global_avg_pool(h)
}

impl MilModel {
    pub fn new(arch: MilArch, seed: u64) -> Self {
        assert!(!arch.encoder_channels.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        encoder_init(&arch, &mut params, &mut rng);
        let c = arch.embed_dim();
        nn::linear_init(&mut params, &mut rng, "abmil.a1", c, arch.attn_hidden);
        nn::linear_init(&mut params, &mut rng, "abmil.a2", arch.attn_hidden, 1);
        nn::linear_init(&mut params, &mut rng, "dsmil.g", c, 1);
        nn::linear_init(&mut params, &mut rng, "dsmil.q", c, arch.query_dim);
        nn::linear_init(&mut params, &mut rng, "dsmil.v", c, c);
        nn::linear_init(&mut params, &mut rng, "bag1", c, 1);
        nn::linear_init(&mut params, &mut rng, "bag2", c, 1);
        nn::linear_init(&mut params, &mut rng, "student", c, 1);
        MilModel { arch, params }
    }

    /// Graph: NCHW batch -> (N, C) embeddings.
    fn encode_graph(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        encoder_graph(&self.arch, tape, bound, x)
    }

    /// Graph: embeddings (N, C) -> (raw scores (N, 1), attention (1, N),
    /// bag feature (1, C)).
    fn abmil_graph(&self, tape: &mut Tape, bound: &Bound, emb: Var) -> (Var, Var, Var) {
        let h = nn::linear_fwd(tape, bound, "abmil.a1", emb);
        let t = tape.tanh_op(h);
        let scores = nn::linear_fwd(tape, bound, "abmil.a2", t); // (N, 1)
        let n = tape.shape(scores)[0];
        let row = tape.reshape(scores, &[1, n]);
        let att = tape.softmax_rows(row);
        let feat = tape.matmul(att, emb);
        (scores, att, feat)
    }

    /// Graph: embeddings -> (raw scores, attention, bag feature, critical
    /// instance index).
    fn dsmil_graph(&self, tape: &mut Tape, bound: &Bound, emb: Var) -> (Var, Var, Var, usize) {
        let g = nn::linear_fwd(tape, bound, "dsmil.g", emb); // (N, 1)
        let gv = tape.value2(g);
        let mut crit = 0;
        for i in 1..gv.nrows() {
            if gv[[i, 0]] > gv[[crit, 0]] {
                crit = i;
            }
        }
        let q = nn::linear_fwd(tape, bound, "dsmil.q", emb); // (N, Dq)
        let qc = tape.row(q, crit); // (1, Dq)
        let qct = tape.transpose(qc); // (Dq, 1)
        let scores = tape.matmul(q, qct); // (N, 1)
        let n = tape.shape(scores)[0];
        let row = tape.reshape(scores, &[1, n]);
        let att = tape.softmax_rows(row);
        let v = nn::linear_fwd(tape, bound, "dsmil.v", emb); // (N, C)
        let feat = tape.matmul(att, v); // (1, C)
        (scores, att, feat, crit)
    }

    fn attention_from(tape: &Tape, raw_scores: Var, att: Var) -> AttentionVector {
        let raw = tape.value(raw_scores).iter().cloned().collect();
        let normalized: Vec<f64> = tape.value(att).iter().cloned().collect();
        debug_assert!((normalized.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        AttentionVector { raw, normalized }
    }

    /// Attention pooling on given embeddings (numeric, no training side
    /// effects): softmax attention plus the weighted bag feature.
    pub fn abmil_pool(&self, embeddings: &Array2<f64>) -> (AttentionVector, Array1<f64>) {
        assert!(embeddings.nrows() >= 1, "empty bag");
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params);
        let emb = tape.leaf2(embeddings.clone());
        let (scores, att, feat) = self.abmil_graph(&mut tape, &bound, emb);
        let feat = tape.value2(feat).row(0).to_owned();
        (Self::attention_from(&tape, scores, att), feat)
    }

    /// Dual-stream pooling on given embeddings (numeric).
    pub fn dsmil_pool(&self, embeddings: &Array2<f64>) -> (AttentionVector, Array1<f64>, usize) {
        assert!(embeddings.nrows() >= 1, "empty bag");
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params);
        let emb = tape.leaf2(embeddings.clone());
        let (scores, att, feat, crit) = self.dsmil_graph(&mut tape, &bound, emb);
        let feat = tape.value2(feat).row(0).to_owned();
        (Self::attention_from(&tape, scores, att), feat, crit)
    }

    /// Numeric embeddings for a stack of images (inference path).
    pub fn embed(&self, pixels: &Array4<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params);
        let x = tape.leaf4(pixels.clone());
        let emb = self.encode_graph(&mut tape, &bound, x);
        tape.value2(emb).to_owned()
    }

    fn bag_pixels(&self, instances: &[ImageSample]) -> Result<Array4<f64>> {
        let s = self.arch.image_side;
        let mut imgs = Vec::with_capacity(instances.len());
        for ins in instances {
            let (h, w, _) = ins.pixels.dim();
            if h != s || w != s {
                return Err(Error::Data(format!(
                    "image {} is {h}x{w}, model expects {s}x{s}",
                    ins.image_id
                )));
            }
            imgs.push(nn::image_to_chw(&ins.pixels));
        }
        Ok(nn::stack_batch(&imgs))
    }

    /// Teacher loss (sum of both branches' bag cross-entropies) and its
    /// gradients; pure w.r.t. the model.
    pub fn teacher_grads(
        &self,
        pixels: &Array4<f64>,
        label: u8,
    ) -> (f64, IndexMap<String, Arr>) {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params);
        let x = tape.leaf4(pixels.clone());
        let emb = self.encode_graph(&mut tape, &bound, x);
        let (_, _, f1) = self.abmil_graph(&mut tape, &bound, emb);
        let (_, _, f2, _) = self.dsmil_graph(&mut tape, &bound, emb);
        let l1 = nn::linear_fwd(&mut tape, &bound, "bag1", f1);
        let l2 = nn::linear_fwd(&mut tape, &bound, "bag2", f2);
        let y = Arr::from_elem(ndarray::IxDyn(&[1, 1]), label as f64);
        let ce1 = tape.bce_with_logits(l1, y.clone());
        let ce2 = tape.bce_with_logits(l2, y);
        let both = tape.add(ce1, ce2);
        let loss = tape.sum_all(both);
        let value = tape.scalar(loss);
        (value, bound.grads(&self.params, tape.backward(loss)))
    }

    /// Student loss (mean soft-target cross-entropy over instances) and its
    /// gradients.
    pub fn student_grads(
        &self,
        pixels: &Array4<f64>,
        targets: &[f64],
    ) -> (f64, IndexMap<String, Arr>) {
        assert_eq!(pixels.dim().0, targets.len(), "target arity");
        debug_assert!(targets.iter().all(|t| (0.0..=1.0).contains(t)));
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params);
        let x = tape.leaf4(pixels.clone());
        let emb = self.encode_graph(&mut tape, &bound, x);
        let logits = nn::linear_fwd(&mut tape, &bound, "student", emb); // (N, 1)
        let t = Array2::from_shape_fn((targets.len(), 1), |(i, _)| targets[i]);
        let ce = tape.bce_with_logits(logits, t.into_dyn());
        let loss = tape.mean_all(ce);
        let value = tape.scalar(loss);
        (value, bound.grads(&self.params, tape.backward(loss)))
    }

    /// One optimizer update on a bag through both teachers.
    pub fn teacher_step(
        &mut self,
        pixels: &Array4<f64>,
        label: u8,
        opt: &mut Sgd,
    ) -> Result<f64> {
        let (loss, grads) = self.teacher_grads(pixels, label);
        nn::check_finite(loss, "teacher_step")?;
        opt.step(&mut self.params, &grads);
        Ok(loss)
    }

    /// One optimizer update on an instance minibatch with soft targets.
    pub fn student_step(
        &mut self,
        pixels: &Array4<f64>,
        targets: &[f64],
        opt: &mut Sgd,
    ) -> Result<f64> {
        let (loss, grads) = self.student_grads(pixels, targets);
        nn::check_finite(loss, "student_step")?;
        opt.step(&mut self.params, &grads);
        Ok(loss)
    }

    /// Student scores for a stack of images.
    pub fn predict_instances(&self, instances: &[ImageSample]) -> Result<Vec<f64>> {
        let pixels = self.bag_pixels(instances)?;
        let emb = self.embed(&pixels);
        let w = self.params.get("student.w");
        let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = self.params.get("student.b")[[0]];
        Ok(emb
            .rows()
            .into_iter()
            .map(|h| sigmoid(h.dot(&w2.column(0)) + b))
            .collect())
    }

    /// Student score for one image.
    pub fn predict_instance(&self, image: &ImageSample) -> Result<f64> {
        Ok(self.predict_instances(std::slice::from_ref(image))?[0])
    }

    /// Both teachers' attention over a bag, for pseudo-label construction.
    pub fn bag_attentions(&self, bag: &Bag) -> Result<(AttentionVector, AttentionVector)> {
        let pixels = self.bag_pixels(&bag.instances)?;
        let emb = self.embed(&pixels);
        let (a1, _) = self.abmil_pool(&emb);
        let (a2, _, _) = self.dsmil_pool(&emb);
        Ok((a1, a2))
    }

    /// Alternating optimization; see module docs. Returns the per-epoch
    /// mean-loss log. `rounds = 0` leaves the model untouched.
    pub fn train_alternating(&mut self, bags: &[Bag], cfg: &MilTrainConfig) -> Result<TrainLog> {
        if bags.is_empty() {
            return Err(Error::Data("train_alternating: no bags".into()));
        }
        let mut log = TrainLog::default();
        let mut opt = Sgd::new(cfg.lr, cfg.momentum);
        for round in 1..=cfg.rounds {
            // teacher epoch, one bag per step
            let mut order: Vec<usize> = (0..bags.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[round as u64, 0])));
            let mut sum = 0.0;
            for &bi in &order {
                let pixels = self.augmented_pixels(&bags[bi], cfg, round, bi)?;
                sum += self.teacher_step(&pixels, bags[bi].label, &mut opt)?;
            }
            log.push(round, "teacher", sum / bags.len() as f64);

            // refresh pseudo labels from clean images
            let mut pseudo: Vec<PseudoLabelVector> = Vec::with_capacity(bags.len());
            for bag in bags {
                let (a1, a2) = self.bag_attentions(bag)?;
                pseudo.push(merge_pseudo_labels(&a1, &a2, bag.label));
            }

            // student epoch over shuffled instances, fixed-size minibatches
            let mut flat: Vec<(usize, usize)> = bags
                .iter()
                .enumerate()
                .flat_map(|(bi, b)| (0..b.instances.len()).map(move |ii| (bi, ii)))
                .collect();
            flat.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[round as u64, 1])));
            let mut sum = 0.0;
            let mut steps = 0usize;
            for chunk in flat.chunks(cfg.student_batch.max(1)) {
                let mut imgs = Vec::with_capacity(chunk.len());
                let mut targets = Vec::with_capacity(chunk.len());
                for &(bi, ii) in chunk {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.seed,
                        &[round as u64, 2, bi as u64, ii as u64],
                    ));
                    let img = augment(&bags[bi].instances[ii].pixels, &cfg.augment, &mut rng);
                    imgs.push(nn::image_to_chw(&img));
                    targets.push(pseudo[bi].values[ii]);
                }
                let pixels = nn::stack_batch(&imgs);
                sum += self.student_step(&pixels, &targets, &mut opt)?;
                steps += 1;
            }
            log.push(round, "student", sum / steps.max(1) as f64);
        }
        Ok(log)
    }

    fn augmented_pixels(
        &self,
        bag: &Bag,
        cfg: &MilTrainConfig,
        round: usize,
        bag_idx: usize,
    ) -> Result<Array4<f64>> {
        let s = self.arch.image_side;
        let mut imgs = Vec::with_capacity(bag.instances.len());
        for (ii, ins) in bag.instances.iter().enumerate() {
            let (h, w, _) = ins.pixels.dim();
            if h != s || w != s {
                return Err(Error::Data(format!(
                    "image {} is {h}x{w}, model expects {s}x{s}",
                    ins.image_id
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                &[round as u64, 3, bag_idx as u64, ii as u64],
            ));
            imgs.push(nn::image_to_chw(&augment(&ins.pixels, &cfg.augment, &mut rng)));
        }
        Ok(nn::stack_batch(&imgs))
    }

    /// Persist arch + metadata + parameters.
    pub fn save(&self, path: &std::path::Path, train: &MilTrainConfig, seed: u64) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "mil",
            "embed_dim": self.arch.embed_dim(),
            "arch": self.arch,
            "train": train,
            "seed": seed,
        });
        crate::checkpoint::save(path, &meta, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<(MilModel, serde_json::Value)> {
        let (meta, params) = crate::checkpoint::load(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("mil") {
            return Err(Error::Checkpoint {
                path: path.display().to_string(),
                msg: "not a detection-model checkpoint".into(),
            });
        }
        let arch: MilArch = serde_json::from_value(meta["arch"].clone()).map_err(|e| {
            Error::Checkpoint { path: path.display().to_string(), msg: format!("arch: {e}") }
        })?;
        let fresh = MilModel::new(arch.clone(), 0);
        for name in fresh.params.names() {
            if !params.contains(name) {
                return Err(Error::Checkpoint {
                    path: path.display().to_string(),
                    msg: format!("missing parameter {name}"),
                });
            }
            if params.get(name).shape() != fresh.params.get(name).shape() {
                return Err(Error::Checkpoint {
                    path: path.display().to_string(),
                    msg: format!("parameter {name} has wrong shape"),
                });
            }
        }
        Ok((MilModel { arch, params }, meta))
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

/// Rescale each teacher's attention to [0, 1] by its own maximum, average
/// the two, and zero everything for negative bags.
pub fn merge_pseudo_labels(
    att1: &AttentionVector,
    att2: &AttentionVector,
    bag_label: u8,
) -> PseudoLabelVector {
    assert_eq!(att1.normalized.len(), att2.normalized.len(), "attention arity");
    let n = att1.normalized.len();
    if bag_label == 0 {
        return PseudoLabelVector { values: vec![0.0; n] };
    }
    let rescale = |a: &[f64]| -> Vec<f64> {
        let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m <= 0.0 {
            vec![0.0; a.len()]
        } else {
            a.iter().map(|v| (v / m).clamp(0.0, 1.0)).collect()
        }
    };
    let r1 = rescale(&att1.normalized);
    let r2 = rescale(&att2.normalized);
    let values = r1.iter().zip(&r2).map(|(a, b)| (a + b) / 2.0).collect();
    PseudoLabelVector { values }
}

/// Report score from instance scores: max pooling.
pub fn predict_report(instance_scores: &[f64]) -> f64 {
    assert!(!instance_scores.is_empty(), "no instance scores");
    instance_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}
