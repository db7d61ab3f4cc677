//! Shared metrics: ROC AUC, confusion metrics, Youden operating point, Dice
//! and percentile-bootstrap confidence intervals.
//!
//! Conventions (the source material states neither): ties in AUC count 1/2
//! (Mann-Whitney), and a sample is predicted positive iff `score >= threshold`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Paired scores and binary labels for threshold-based metrics.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::Data("empty scored set".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Data("non-finite score".into()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data("labels must be 0/1".into()));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn has_both_classes(&self) -> bool {
        self.labels.iter().any(|&l| l == 1) && self.labels.iter().any(|&l| l == 0)
    }

    fn resample(&self, rng: &mut impl Rng) -> ScoredSet {
        let n = self.len();
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            scores.push(self.scores[i]);
            labels.push(self.labels[i]);
        }
        ScoredSet { scores, labels }
    }
}

/// Mann-Whitney AUC via average ranks; ties count 1/2.
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    if !set.has_both_classes() {
        return Err(Error::Data("roc_auc needs both classes".into()));
    }
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].partial_cmp(&set.scores[b]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let npos = set.labels.iter().filter(|&&l| l == 1).count() as f64;
    let nneg = n as f64 - npos;
    let rank_sum: f64 = (0..n).filter(|&i| set.labels[i] == 1).map(|i| ranks[i]).sum();
    Ok((rank_sum - npos * (npos + 1.0) / 2.0) / (npos * nneg))
}

/// `(acc, sen, spe)` with predicted-positive iff `score >= threshold`.
pub fn confusion_metrics(set: &ScoredSet, threshold: f64) -> Result<(f64, f64, f64)> {
    if !set.has_both_classes() {
        return Err(Error::Data("confusion_metrics needs both classes".into()));
    }
    let (mut tp, mut fp, mut tn, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (s, &l) in set.scores.iter().zip(&set.labels) {
        match (*s >= threshold, l) {
            (true, 1) => tp += 1,
            (true, 0) => fp += 1,
            (false, 0) => tn += 1,
            (false, 1) => fne += 1,
            _ => unreachable!(),
        }
    }
    let acc = (tp + tn) as f64 / set.len() as f64;
    let sen = tp as f64 / (tp + fne) as f64;
    let spe = tn as f64 / (tn + fp) as f64;
    Ok((acc, sen, spe))
}

fn candidate_thresholds(set: &ScoredSet) -> Vec<f64> {
    let mut uniq: Vec<f64> = set.scores.clone();
    uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
    uniq.dedup();
    let mut cands = vec![f64::NEG_INFINITY];
    for w in uniq.windows(2) {
        cands.push((w[0] + w[1]) / 2.0);
    }
    cands.push(f64::INFINITY);
    cands
}

/// Threshold maximizing Youden's J = sen + spe - 1 over midpoints between
/// adjacent distinct scores plus +/-infinity sentinels. Equal J goes to the
/// larger threshold (higher specificity).
pub fn youden_point(set: &ScoredSet) -> Result<f64> {
    if !set.has_both_classes() {
        return Err(Error::Data("youden_point needs both classes".into()));
    }
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY); // (J, threshold)
    for t in candidate_thresholds(set) {
        let (_, sen, spe) = confusion_metrics(set, t)?;
        let j = sen + spe - 1.0;
        if j > best.0 || (j == best.0 && t > best.1) {
            best = (j, t);
        }
    }
    Ok(best.1)
}

/// Dice similarity `2|a and b| / (|a| + |b|)`; two empty masks agree (1.0).
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::Data(format!(
            "dice shape mismatch: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    let inter = a
        .data
        .iter()
        .zip(b.data.iter())
        .filter(|(&x, &y)| x != 0 && y != 0)
        .count();
    let total = a.area() + b.area();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap (2.5th / 97.5th) of `metric` over `n_resamples`
/// resamples with replacement. Resamples where the metric is undefined are
/// redrawn (bounded); deterministic under `seed`.
pub fn bootstrap_ci(
    metric: &dyn Fn(&ScoredSet) -> Result<f64>,
    set: &ScoredSet,
    n_resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_resamples == 0 {
        return Err(Error::Config("bootstrap needs n_resamples >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_resamples);
    let max_attempts = n_resamples.saturating_mul(100).max(1000);
    let mut attempts = 0;
    while values.len() < n_resamples {
        if attempts >= max_attempts {
            return Err(Error::Numeric(format!(
                "metric undefined on resamples ({attempts} attempts for {n_resamples} draws)"
            )));
        }
        attempts += 1;
        let draw = set.resample(&mut rng);
        if let Ok(v) = metric(&draw) {
            values.push(v);
        }
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((percentile(&values, 0.025), percentile(&values, 0.975)))
}

/// Point metrics at the Youden threshold plus bootstrap CIs.
///
/// Serialized layout (exact field names):
/// `{"auc":..,"acc":..,"sen":..,"spe":..,"threshold":..,"ci":{"auc":[lo,hi],..}}`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub threshold: f64,
    pub ci: CiBounds,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CiBounds {
    pub auc: (f64, f64),
    pub acc: (f64, f64),
    pub sen: (f64, f64),
    pub spe: (f64, f64),
}

fn mix_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

/// Compute a [`MetricReport`]: threshold from the Youden point, then CIs for
/// each metric by percentile bootstrap. Confusion CIs keep the threshold
/// fixed at the full-set operating point. Each interval is widened (rarely
/// needed) so it contains its point estimate, keeping the report invariant
/// `ci_low <= point <= ci_high` even on tiny samples.
pub fn compute_metric_report(
    set: &ScoredSet,
    n_resamples: usize,
    seed: u64,
) -> Result<MetricReport> {
    let threshold = youden_point(set)?;
    let auc = roc_auc(set)?;
    let (acc, sen, spe) = confusion_metrics(set, threshold)?;

    let widen = |(lo, hi): (f64, f64), point: f64| (lo.min(point), hi.max(point));
    let ci_auc = widen(bootstrap_ci(&roc_auc, set, n_resamples, mix_seed(seed, 0))?, auc);
    let acc_f = move |s: &ScoredSet| confusion_metrics(s, threshold).map(|m| m.0);
    let sen_f = move |s: &ScoredSet| confusion_metrics(s, threshold).map(|m| m.1);
    let spe_f = move |s: &ScoredSet| confusion_metrics(s, threshold).map(|m| m.2);
    let ci_acc = widen(bootstrap_ci(&acc_f, set, n_resamples, mix_seed(seed, 1))?, acc);
    let ci_sen = widen(bootstrap_ci(&sen_f, set, n_resamples, mix_seed(seed, 2))?, sen);
    let ci_spe = widen(bootstrap_ci(&spe_f, set, n_resamples, mix_seed(seed, 3))?, spe);

    Ok(MetricReport {
        auc,
        acc,
        sen,
        spe,
        threshold,
        ci: CiBounds { auc: ci_auc, acc: ci_acc, sen: ci_sen, spe: ci_spe },
    })
}
