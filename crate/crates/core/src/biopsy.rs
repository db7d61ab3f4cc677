//! Transfer learning for optical biopsy: swap the distilled encoder's
//! prediction head for a fresh two-layer one, fine-tune end to end on
//! pathology-labeled frames, and measure data efficiency with repeated
//! few-shot draws.

use std::collections::HashSet;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array4, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::eval::{roc_auc, ScoredSet};
use crate::mil::{encoder_graph, encoder_init, MilArch};
use crate::nn::{self, derive_seed, Bound, Params, Sgd, TrainLog};
use crate::records::ImageSample;
use crate::tensor::{Arr, Tape, Var};

/// Pathology ground truth for one polyp image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathologyLabel {
    pub vienna_category: u8,
    /// 1 for Vienna categories 3/4/5, 0 for category 1.
    pub malignant: u8,
}

/// Map a Vienna classification category to the binary target. Category 2
/// (indefinite for neoplasia) is outside the inclusion criteria.
pub fn map_vienna(category: u8) -> Result<PathologyLabel> {
    match category {
        1 => Ok(PathologyLabel { vienna_category: 1, malignant: 0 }),
        3 | 4 | 5 => Ok(PathologyLabel { vienna_category: category, malignant: 1 }),
        other => Err(Error::Data(format!(
            "Vienna category {other} is outside the study's inclusion criteria (1, 3, 4, 5)"
        ))),
    }
}

/// Hidden width of the replacement prediction head.
pub const HEAD_HIDDEN: usize = 64;

/// Image-level malignancy classifier: the shared conv encoder plus a fresh
/// two-layer head (embedding -> 64 -> 1, ReLU between).
#[derive(Debug, Clone)]
pub struct BiopsyModel {
    pub arch: MilArch,
    pub params: Params,
}

impl BiopsyModel {
    /// Fully random model: the baseline arm with no domain pretraining.
    pub fn fresh(arch: MilArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        encoder_init(&arch, &mut params, &mut rng);
        let c = arch.embed_dim();
        nn::linear_init(&mut params, &mut rng, "head.l1", c, HEAD_HIDDEN);
        nn::linear_init(&mut params, &mut rng, "head.l2", HEAD_HIDDEN, 1);
        BiopsyModel { arch, params }
    }

    fn stack(&self, images: &[ImageSample]) -> Result<Array4<f64>> {
        if images.is_empty() {
            return Err(Error::Data("no images given".into()));
        }
        let s = self.arch.image_side;
        let mut chw = Vec::with_capacity(images.len());
        for img in images {
            let (h, w, c) = img.pixels.dim();
            if h != s || w != s || c != 3 {
                return Err(Error::Data(format!(
                    "image {} is {h}x{w}x{c}, classifier expects {s}x{s}x3",
                    img.image_id
                )));
            }
            chw.push(nn::image_to_chw(&img.pixels));
        }
        Ok(nn::stack_batch(&chw))
    }

    fn head_graph(&self, tape: &mut Tape, bound: &Bound, emb: Var) -> Var {
        let h = nn::linear_fwd(tape, bound, "head.l1", emb);
        let h = tape.relu(h);
        nn::linear_fwd(tape, bound, "head.l2", h)
    }

    /// Encoder embeddings, one row per image.
    pub fn embed(&self, images: &[ImageSample]) -> Result<Array2<f64>> {
        let pixels = self.stack(images)?;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params);
        let x = tape.leaf4(pixels);
        let emb = encoder_graph(&self.arch, &mut tape, &bound, x);
        Ok(tape.value2(emb).to_owned())
    }

    /// Malignancy probability per image.
    pub fn predict(&self, images: &[ImageSample]) -> Result<Vec<f64>> {
        let emb = self.embed(images)?;
        let w1 = self.params.get("head.l1.w").view().into_dimensionality::<Ix2>().unwrap();
        let b1 = self.params.get("head.l1.b");
        let w2 = self.params.get("head.l2.w").view().into_dimensionality::<Ix2>().unwrap();
        let b2 = self.params.get("head.l2.b");
        let mut h = emb.dot(&w1);
        for mut row in h.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v + b1[[j]]).max(0.0);
            }
        }
        let z = h.dot(&w2);
        Ok(z.column(0).iter().map(|&v| sigmoid(v + b2[[0]])).collect())
    }

    fn loss_grads(
        &self,
        pixels: &Array4<f64>,
        labels: &[f64],
    ) -> (f64, IndexMap<String, Arr>) {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &self.params);
        let x = tape.leaf4(pixels.clone());
        let emb = encoder_graph(&self.arch, &mut tape, &bound, x);
        let z = self.head_graph(&mut tape, &bound, emb);
        let t = Arr::from_shape_fn(ndarray::IxDyn(&[labels.len(), 1]), |ix| labels[ix[0]]);
        let ce = tape.bce_with_logits(z, t);
        let loss = tape.mean_all(ce);
        let value = tape.scalar(loss);
        (value, bound.grads(&self.params, tape.backward(loss)))
    }

    pub fn save(&self, path: &std::path::Path, train: &FinetuneConfig, seed: u64) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "biopsy",
            "arch": self.arch,
            "train": train,
            "seed": seed,
        });
        crate::checkpoint::save(path, &meta, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<(BiopsyModel, serde_json::Value)> {
        let (meta, params) = crate::checkpoint::load(path)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("biopsy") {
            return Err(Error::Checkpoint {
                path: path.display().to_string(),
                msg: "not a biopsy-classifier checkpoint".into(),
            });
        }
        let arch: MilArch = serde_json::from_value(meta["arch"].clone()).map_err(|e| {
            Error::Checkpoint { path: path.display().to_string(), msg: format!("arch: {e}") }
        })?;
        let fresh = BiopsyModel::fresh(arch.clone(), 0);
        for name in fresh.params.names() {
            if !params.contains(name) || params.get(name).shape() != fresh.params.get(name).shape()
            {
                return Err(Error::Checkpoint {
                    path: path.display().to_string(),
                    msg: format!("parameter {name} missing or mis-shaped"),
                });
            }
        }
        Ok((BiopsyModel { arch, params }, meta))
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

/// Build a classifier whose `encoder.c*` weights are copied bit-for-bit
/// from `encoder_source` (a distilled student or any model sharing the
/// naming scheme) and whose head is freshly seeded. Every parameter stays
/// trainable.
pub fn build_finetune_model(
    arch: &MilArch,
    encoder_source: &Params,
    head_seed: u64,
) -> Result<BiopsyModel> {
    let mut model = BiopsyModel::fresh(arch.clone(), head_seed);
    for i in 0..arch.encoder_channels.len() {
        for suffix in ["w", "b"] {
            let name = format!("encoder.c{i}.{suffix}");
            if !encoder_source.contains(&name) {
                return Err(Error::Data(format!("encoder source lacks parameter {name}")));
            }
            let src = encoder_source.get(&name);
            if src.shape() != model.params.get(&name).shape() {
                return Err(Error::Data(format!(
                    "encoder parameter {name} is {:?}, architecture expects {:?}",
                    src.shape(),
                    model.params.get(&name).shape()
                )));
            }
            *model.params.get_mut(&name) = src.clone();
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            batch: 16,
            lr: 0.03,
            momentum: 0.9,
            augment: AugmentConfig::full(),
            seed: 0,
        }
    }
}

/// Fine-tune all parameters on labeled images with binary cross-entropy.
/// Needs both classes present; `epochs = 0` leaves the model untouched.
pub fn finetune(
    model: &mut BiopsyModel,
    images: &[ImageSample],
    labels: &[u8],
    cfg: &FinetuneConfig,
) -> Result<TrainLog> {
    if images.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::Data(
            "fine-tuning needs both classes in the training set".into(),
        ));
    }
    let mut log = TrainLog::default();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    for epoch in 1..=cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[13, epoch])));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut chw = Vec::with_capacity(chunk.len());
            let mut ys = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    &[14, epoch, idx as u64],
                ));
                let img = augment(&images[idx].pixels, &cfg.augment, &mut rng);
                chw.push(nn::image_to_chw(&img));
                ys.push(labels[idx] as f64);
            }
            let pixels = nn::stack_batch(&chw);
            let (loss, grads) = model.loss_grads(&pixels, &ys);
            nn::check_finite(loss, "finetune")?;
            opt.step(&mut model.params, &grads);
            total += loss;
            batches += 1;
        }
        log.push(epoch as usize, "finetune", total / batches as f64);
    }
    Ok(log)
}

/// The few-shot data-efficiency protocol: which sample sizes to draw, how
/// many independent draws each, and the seed they all derive from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotPlan {
    pub shot_sizes: Vec<usize>,
    pub repetitions: usize,
    pub base_seed: u64,
}

impl FewShotPlan {
    /// Five repetitions per shot size (the reported protocol).
    pub fn new(shot_sizes: Vec<usize>, base_seed: u64) -> Self {
        FewShotPlan { shot_sizes, repetitions: 5, base_seed }
    }
}

/// A named held-out evaluation set.
#[derive(Debug, Clone)]
pub struct FewShotTestSet {
    pub name: String,
    pub images: Vec<ImageSample>,
    pub labels: Vec<u8>,
}

/// One line of the data-efficiency curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub shot_size: usize,
    pub test_set: String,
    pub mean_auc: f64,
    pub sd_auc: f64,
    pub n_reps: usize,
}

/// CSV rendering of the curve table.
pub fn few_shot_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("shot_size,test_set,mean_auc,sd_auc,n_reps\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.shot_size, r.test_set, r.mean_auc, r.sd_auc, r.n_reps
        ));
    }
    out
}

/// For each shot size, draw `repetitions` class-stratified samples from the
/// pool, fine-tune an independently built model on each, and report the
/// AUC mean and standard deviation per test set. The pool must be disjoint
/// from every test set.
pub fn run_few_shot(
    build: &dyn Fn(u64) -> BiopsyModel,
    plan: &FewShotPlan,
    pool_images: &[ImageSample],
    pool_labels: &[u8],
    test_sets: &[FewShotTestSet],
    cfg: &FinetuneConfig,
) -> Result<Vec<CurveRow>> {
    if plan.repetitions < 1 {
        return Err(Error::Config("few-shot plan needs repetitions >= 1".into()));
    }
    if pool_images.len() != pool_labels.len() {
        return Err(Error::Data(format!(
            "{} pool images but {} labels",
            pool_images.len(),
            pool_labels.len()
        )));
    }
    for &shot in &plan.shot_sizes {
        if shot > pool_images.len() {
            return Err(Error::Config(format!(
                "shot size {shot} exceeds the pool ({} images)",
                pool_images.len()
            )));
        }
        if shot < 2 {
            return Err(Error::Config(format!(
                "shot size {shot} cannot hold one sample of each class"
            )));
        }
    }
    let pool_ids: HashSet<&str> = pool_images.iter().map(|i| i.image_id.as_str()).collect();
    for ts in test_sets {
        if ts.images.len() != ts.labels.len() {
            return Err(Error::Data(format!("test set {} has mismatched labels", ts.name)));
        }
        if let Some(shared) = ts.images.iter().find(|i| pool_ids.contains(i.image_id.as_str())) {
            return Err(Error::Data(format!(
                "image {} appears in both the pool and test set {}",
                shared.image_id, ts.name
            )));
        }
    }
    let positives: Vec<usize> =
        (0..pool_labels.len()).filter(|&i| pool_labels[i] == 1).collect();
    let negatives: Vec<usize> =
        (0..pool_labels.len()).filter(|&i| pool_labels[i] == 0).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Data("pool must contain both classes".into()));
    }
    let pos_fraction = positives.len() as f64 / pool_labels.len() as f64;

    let mut rows = Vec::new();
    for &shot in &plan.shot_sizes {
        let n_pos = ((shot as f64 * pos_fraction).round() as usize).clamp(1, shot - 1);
        let n_neg = shot - n_pos;
        if n_pos > positives.len() || n_neg > negatives.len() {
            return Err(Error::Data(format!(
                "cannot draw {n_pos} positives and {n_neg} negatives from a pool of \
                 {}/{}",
                positives.len(),
                negatives.len()
            )));
        }
        let mut aucs: Vec<Vec<f64>> = vec![Vec::new(); test_sets.len()];
        for rep in 0..plan.repetitions as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                plan.base_seed,
                &[17, shot as u64, rep],
            ));
            let mut pos = positives.clone();
            let mut neg = negatives.clone();
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            let chosen: Vec<usize> =
                pos[..n_pos].iter().chain(&neg[..n_neg]).cloned().collect();
            let sample_images: Vec<ImageSample> =
                chosen.iter().map(|&i| pool_images[i].clone()).collect();
            let sample_labels: Vec<u8> = chosen.iter().map(|&i| pool_labels[i]).collect();

            let mut model = build(derive_seed(plan.base_seed, &[19, shot as u64, rep]));
            let rep_cfg = FinetuneConfig {
                seed: derive_seed(plan.base_seed, &[23, shot as u64, rep]),
                ..cfg.clone()
            };
            finetune(&mut model, &sample_images, &sample_labels, &rep_cfg)?;
            for (t, ts) in test_sets.iter().enumerate() {
                let scores = model.predict(&ts.images)?;
                let auc = roc_auc(&ScoredSet::new(scores, ts.labels.clone())?)?;
                aucs[t].push(auc);
            }
        }
        for (t, ts) in test_sets.iter().enumerate() {
            let xs = &aucs[t];
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            rows.push(CurveRow {
                shot_size: shot,
                test_set: ts.name.clone(),
                mean_auc: mean,
                sd_auc: sd,
                n_reps: xs.len(),
            });
        }
    }
    Ok(rows)
}

/// Project encoder embeddings onto their top two principal components, for
/// scatter plots only.
pub fn embed_2d(model: &BiopsyModel, images: &[ImageSample]) -> Result<Vec<[f64; 2]>> {
    let emb = model.embed(images)?;
    let (n, c) = emb.dim();
    if c < 2 {
        return Err(Error::Data("embedding needs at least 2 dimensions".into()));
    }
    let mean = emb.mean_axis(ndarray::Axis(0)).expect("n >= 1");
    let centered = &emb - &mean;
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.t().dot(&centered) / denom;

    let power_iterate = |m: &Array2<f64>| -> Array1<f64> {
        let mut v = Array1::from_shape_fn(c, |i| 1.0 + (i as f64) / c as f64);
        for _ in 0..100 {
            let next = m.dot(&v);
            let norm = next.dot(&next).sqrt();
            if norm < 1e-12 {
                return Array1::zeros(c);
            }
            v = next / norm;
        }
        v
    };
    let v1 = power_iterate(&cov);
    let lambda1 = v1.dot(&cov.dot(&v1));
    let outer = Array2::from_shape_fn((c, c), |(i, j)| lambda1 * v1[i] * v1[j]);
    let deflated = &cov - &outer;
    let v2 = power_iterate(&deflated);

    Ok(centered
        .rows()
        .into_iter()
        .map(|r| [r.dot(&v1), r.dot(&v2)])
        .collect())
}
