//! One TOML document drives every pipeline stage.
//!
//! The document deserializes into [`PipelineConfig`] with unknown keys
//! rejected at every level, every field defaulted, and dotted-key overrides
//! (`mil.train.rounds=10`) applied to the raw TOML value before the typed
//! pass. Each stage directory receives the fully-resolved snapshot so a run
//! can be reproduced from its artifacts alone.

use std::path::Path;

use endoked_core::biopsy::FinetuneConfig;
use endoked_core::mil::{MilArch, MilTrainConfig};
use endoked_core::sam_distill::{OracleNoise, RefineConfig, SegArch, SegTrainConfig};
use endoked_core::wsss::{WsssArch, WsssTrainConfig, CAM_BOX_MIN_AREA, CAM_BOX_THETA};
use endoked_core::{derive_seed, Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Tags folded into [`stage_seed`] so every stage draws from its own stream.
pub mod seeds {
    pub const SYNTH: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const MIL: u64 = 3;
    pub const WSSS: u64 = 4;
    pub const REFINE: u64 = 5;
    pub const SEG: u64 = 6;
    pub const BIOPSY: u64 = 7;
}

/// Effective seed for one stage: mixes the global seed, the stage tag and
/// the stage's own seed field, so changing any one reseeds just that stage.
pub fn stage_seed(global: u64, tag: u64, local: u64) -> u64 {
    derive_seed(global, &[tag, local])
}

/// Everything a run needs; one table per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Global seed; stage seeds derive from it via [`stage_seed`].
    pub seed: u64,
    pub synth: endoked_core::synth::SynthConfig,
    pub extract: ExtractConfig,
    pub split: SplitConfig,
    pub mil: MilStage,
    pub wsss: WsssStage,
    pub refine: RefineStage,
    pub seg: SegStage,
    pub biopsy: BiopsyStage,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// `rule` (offline lexicon) or `http` (chat endpoint from environment).
    pub extractor: String,
    /// Extra attempts per record on ambiguous or failed responses.
    pub retries: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig { extractor: "rule".into(), retries: 2 }
    }
}

/// Record-level train/eval fractions; must sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub eval: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: 0.8, eval: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilStage {
    pub arch: MilArch,
    pub train: MilTrainConfig,
}

impl Default for MilStage {
    fn default() -> Self {
        // Desk-scale models need a hotter optimizer than the full-scale
        // reference settings baked into MilTrainConfig::default().
        MilStage {
            arch: MilArch::default(),
            train: MilTrainConfig { lr: 0.01, momentum: 0.9, rounds: 8, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WsssStage {
    pub arch: WsssArch,
    pub train: WsssTrainConfig,
    /// Relative CAM threshold for cutting boxes.
    pub theta: f64,
    /// Components smaller than this many grid cells are dropped.
    pub min_area: usize,
}

impl Default for WsssStage {
    fn default() -> Self {
        // Same desk-scale adjustment as the detector: the reference peak
        // learning rate barely moves a freshly initialized desk model.
        WsssStage {
            arch: WsssArch::default(),
            train: WsssTrainConfig { peak_lr: 3e-3, ..Default::default() },
            theta: CAM_BOX_THETA,
            min_area: CAM_BOX_MIN_AREA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineStage {
    /// `oracle` (truth sidecar required) or `subprocess` (spawns `command`).
    pub segmenter: String,
    /// Oracle perturbation: `exact`, `dilate`, `erode` or `mixed`.
    pub noise: String,
    /// Structuring radius for the non-exact noise kinds.
    pub noise_radius: usize,
    /// Argv for the subprocess segmenter, absolute program first.
    pub command: Vec<String>,
    pub max_iters: usize,
    /// Stop once the mean flipped-pixel fraction drops below this.
    pub epsilon: f64,
    /// Padding around predicted boxes before re-prompting.
    pub box_pad: usize,
    /// Per-iteration training of the in-loop segmentation model.
    pub train: SegTrainConfig,
}

impl Default for RefineStage {
    fn default() -> Self {
        let rc = RefineConfig::default();
        RefineStage {
            segmenter: "oracle".into(),
            noise: "exact".into(),
            noise_radius: 0,
            command: Vec::new(),
            max_iters: rc.max_iters,
            epsilon: rc.epsilon,
            box_pad: rc.box_pad,
            train: rc.train,
        }
    }
}

impl RefineStage {
    /// Loop parameters with the training seed already resolved.
    pub fn refine_config(&self, effective_seed: u64) -> RefineConfig {
        let mut train = self.train.clone();
        train.seed = effective_seed;
        RefineConfig {
            max_iters: self.max_iters,
            epsilon: self.epsilon,
            box_pad: self.box_pad,
            train,
        }
    }

    /// Oracle perturbation from the string fields.
    pub fn oracle_noise(&self, effective_seed: u64) -> Result<OracleNoise> {
        match self.noise.as_str() {
            "exact" => Ok(OracleNoise::Exact),
            "dilate" => Ok(OracleNoise::Dilate(self.noise_radius)),
            "erode" => Ok(OracleNoise::Erode(self.noise_radius)),
            "mixed" => {
                Ok(OracleNoise::Mixed { radius: self.noise_radius, seed: effective_seed })
            }
            other => Err(Error::Config(format!(
                "refine.noise must be exact|dilate|erode|mixed, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegStage {
    pub arch: SegArch,
    pub train: SegTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiopsyStage {
    /// Fine-tuning set sizes for the data-efficiency curve.
    pub shots: Vec<usize>,
    /// Independent draws per shot size.
    pub repetitions: usize,
    /// Fraction of labelled frames held out as the fixed test set.
    pub test_fraction: f64,
    pub train: FinetuneConfig,
}

impl Default for BiopsyStage {
    fn default() -> Self {
        BiopsyStage {
            shots: vec![5, 10, 20],
            repetitions: 5,
            test_fraction: 0.3,
            train: FinetuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Cap on emitted CAM overlay images.
    pub max_overlays: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { max_overlays: 6 }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if !matches!(self.extract.extractor.as_str(), "rule" | "http") {
            return Err(Error::Config(format!(
                "extract.extractor must be rule|http, got {:?}",
                self.extract.extractor
            )));
        }
        for (name, f) in [("split.train", self.split.train), ("split.eval", self.split.eval)] {
            if !(f.is_finite() && f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name}={f} outside (0, 1)")));
            }
        }
        if (self.split.train + self.split.eval - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {}, expected 1",
                self.split.train + self.split.eval
            )));
        }
        if !(self.wsss.theta > 0.0 && self.wsss.theta < 1.0) {
            return Err(Error::Config(format!("wsss.theta={} outside (0, 1)", self.wsss.theta)));
        }
        if self.wsss.min_area < 1 {
            return Err(Error::Config("wsss.min_area must be >= 1".into()));
        }
        match self.refine.segmenter.as_str() {
            "oracle" => {}
            "subprocess" => {
                if self.refine.command.is_empty() {
                    return Err(Error::Config(
                        "refine.segmenter=subprocess needs a non-empty refine.command".into(),
                    ));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "refine.segmenter must be oracle|subprocess, got {other:?}"
                )))
            }
        }
        self.refine.oracle_noise(0)?;
        if self.refine.max_iters < 1 {
            return Err(Error::Config("refine.max_iters must be >= 1".into()));
        }
        if !(self.refine.epsilon.is_finite() && self.refine.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "refine.epsilon={} must be finite and >= 0",
                self.refine.epsilon
            )));
        }
        if self.biopsy.shots.is_empty() {
            return Err(Error::Config("biopsy.shots must not be empty".into()));
        }
        if self.biopsy.repetitions < 1 {
            return Err(Error::Config("biopsy.repetitions must be >= 1".into()));
        }
        if !(self.biopsy.test_fraction > 0.0 && self.biopsy.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "biopsy.test_fraction={} outside (0, 1)",
                self.biopsy.test_fraction
            )));
        }
        Ok(())
    }

    /// Resolved snapshot written beside every stage's outputs.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize resolved config: {e}")))
    }
}

/// Load `path` (or start from an empty document), apply `key=value`
/// overrides as TOML literals, then deserialize and validate.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?,
        None => String::new(),
    };
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("parse config: {e}")))?;
    for raw in overrides {
        let (keys, value) = parse_override(raw)?;
        set_dotted(&mut table, &keys, value)?;
    }
    let cfg: PipelineConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Split `key=value`, parsing the value as a TOML literal (bare words fall
/// back to strings so `extract.extractor=rule` works unquoted).
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} must look like key=value")))?;
    let keys: Vec<String> = key.split('.').map(|s| s.trim().to_string()).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} has an empty segment")));
    }
    Ok((keys, parse_toml_literal(value.trim())))
}

fn parse_toml_literal(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("literal key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(root: &mut toml::Table, keys: &[String], value: toml::Value) -> Result<()> {
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        cur = cur
            .entry(k.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override segment {k:?} addresses a non-table value"))
            })?;
    }
    cur.insert(keys[keys.len() - 1].clone(), value);
    Ok(())
}

/// Content address for one stage: short hash over the stage name, the
/// JSON-serialized slice of config it depends on, and its upstream stage
/// addresses. Identical config and provenance give the identical address,
/// which is what makes re-runs resumable.
pub fn stage_addr(stage: &str, config: &serde_json::Value, upstreams: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0u8]);
    h.update(config.to_string().as_bytes());
    for u in upstreams {
        h.update([0u8]);
        h.update(u.as_bytes());
    }
    let digest = h.finalize();
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}
