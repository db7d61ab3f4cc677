//! Pipeline stage commands.
//!
//! Each command reads its inputs from earlier stage directories (explicit
//! paths or discovery inside the run directory), computes a content address
//! from its resolved configuration plus upstream addresses, and writes into
//! `<out>/<stage>-<addr>/`. A `COMPLETE` marker makes finished stages
//! skippable on re-runs; identical config and provenance land on the
//! identical directory. Timestamps appear only in each stage's `run.log`,
//! so everything else is bit-reproducible for a fixed seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use endoked_core::biopsy::{
    build_finetune_model, embed_2d, few_shot_csv, finetune, run_few_shot, BiopsyModel,
    FewShotPlan, FewShotTestSet,
};
use endoked_core::eval::{self, compute_metric_report, ScoredSet};
use endoked_core::mil::{predict_report, MilModel};
use endoked_core::records::{
    build_bags, load_image, load_manifest, load_record_images, manifest_path, split_dataset,
    write_image, ColonoscopyRecord, ImageSample,
};
use endoked_core::report_nlp::{
    extract_report_label_with, LabelExtractor, RuleExtractor, DEFAULT_BACKOFF,
};
use endoked_core::sam_distill::{
    read_mask_request, refine_loop, train_seg_model, write_mask_reply, OracleNoise,
    OracleSegmenter, PromptableSegmenter, SegModel, SubprocessSegmenter,
};
use endoked_core::synth::{self, truth_path, SynthTruth};
use endoked_core::wsss::{cam_to_boxes, BoxPrompt, WsssModel};
use endoked_core::{BinaryMask, Error, Result};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{seeds, stage_addr, stage_seed, PipelineConfig};
use crate::http_llm::HttpExtractor;
use crate::plots::{self, Series};

pub const COMPLETE: &str = "COMPLETE";
const LOCK_FILE: &str = "run.lock";

/// Where a stage landed and whether it was already complete.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub dir: PathBuf,
    pub cached: bool,
}

/// Exclusive marker against concurrent writers of one run directory;
/// removed on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(out: &Path) -> Result<RunLock> {
        fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
        let path = out.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Config(format!(
                    "{} exists; another process may be writing this run \
                     (delete the file if it is stale)",
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(path.display().to_string(), e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Provenance token for addressing: the directory's (or file's parent's)
/// basename, which for stage outputs embeds their own content address.
fn token(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn prepare_stage(out: &Path, stage: &str, addr: &str) -> Result<(PathBuf, bool)> {
    fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let dir = out.join(format!("{stage}-{addr}"));
    if dir.join(COMPLETE).is_file() {
        println!("{stage}: cached at {}", dir.display());
        return Ok((dir, true));
    }
    if dir.exists() {
        // partial leftovers from an interrupted run
        fs::remove_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok((dir, false))
}

fn finish_stage(
    dir: &Path,
    stage: &str,
    cfg: &PipelineConfig,
    summary: &serde_json::Value,
    started: Instant,
) -> Result<()> {
    write_file(dir.join("config.toml").as_path(), cfg.to_toml_string()?.as_bytes())?;
    let unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    // the only timestamped artifact, by contract
    let log = format!(
        "finished_unix_s {unix}\nelapsed_s {:.3}\nsummary {summary}\n",
        started.elapsed().as_secs_f64()
    );
    write_file(dir.join("run.log").as_path(), log.as_bytes())?;
    write_file(dir.join(COMPLETE).as_path(), b"ok\n")?;
    println!("{stage}: wrote {}", dir.display());
    Ok(())
}

/// Explicit path, or the single completed `<stage>-*` directory under `out`.
fn resolve_dir(out: &Path, stage: &str, explicit: Option<&Path>, flag: &str) -> Result<PathBuf> {
    if let Some(p) = explicit {
        if !p.is_dir() {
            return Err(Error::Data(format!("{flag} {}: not a directory", p.display())));
        }
        return Ok(p.to_path_buf());
    }
    let mut found = Vec::new();
    if let Ok(entries) = fs::read_dir(out) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if name.starts_with(&format!("{stage}-")) && e.path().join(COMPLETE).is_file() {
                found.push(e.path());
            }
        }
    }
    found.sort();
    match found.len() {
        0 => Err(Error::Data(format!(
            "no completed {stage} stage under {}; pass {flag}",
            out.display()
        ))),
        1 => Ok(found.pop().expect("one entry")),
        _ => Err(Error::Data(format!(
            "multiple completed {stage} stages under {}; disambiguate with {flag}",
            out.display()
        ))),
    }
}

fn resolve_file(
    out: &Path,
    stage: &str,
    file_name: &str,
    explicit: Option<&Path>,
    flag: &str,
) -> Result<PathBuf> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => resolve_dir(out, stage, None, flag)?.join(file_name),
    };
    if !path.is_file() {
        return Err(Error::Data(format!("{flag}: {} is not a file", path.display())));
    }
    Ok(path)
}

// ---------------------------------------------------------------- labels io

/// Two-column TSV with header `record_id\treport_label`.
pub fn write_labels(path: &Path, rows: &[(String, u8)]) -> Result<()> {
    let mut text = String::from("record_id\treport_label\n");
    for (id, label) in rows {
        text.push_str(&format!("{id}\t{label}\n"));
    }
    write_file(path, text.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, u8>> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("record_id\treport_label") => {}
        other => {
            return Err(Error::Data(format!(
                "{}: expected header record_id<TAB>report_label, got {other:?}",
                path.display()
            )))
        }
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let (id, raw) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{} line {}: expected two tab-separated fields", path.display(), i + 2))
        })?;
        let label = match raw {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Data(format!(
                    "{} line {}: label must be 0 or 1, got {other:?}",
                    path.display(),
                    i + 2
                )))
            }
        };
        if out.insert(id.to_string(), label).is_some() {
            return Err(Error::Data(format!(
                "{} line {}: duplicate record id {id:?}",
                path.display(),
                i + 2
            )));
        }
    }
    Ok(out)
}

// ------------------------------------------------------------ shared pieces

fn load_truth_opt(data: &Path) -> Result<Option<SynthTruth>> {
    let p = truth_path(data);
    if p.is_file() {
        Ok(Some(SynthTruth::load(&p)?))
    } else {
        Ok(None)
    }
}

/// Record-level train/eval partition, deterministic in the global seed.
fn compute_splits(
    cfg: &PipelineConfig,
    records: &[ColonoscopyRecord],
) -> Result<(Vec<ColonoscopyRecord>, Vec<ColonoscopyRecord>)> {
    let mut fractions = BTreeMap::new();
    fractions.insert("train".to_string(), cfg.split.train);
    fractions.insert("eval".to_string(), cfg.split.eval);
    let splits = split_dataset(records, &fractions, stage_seed(cfg.seed, seeds::SPLIT, 0))?;
    let train_ids = splits
        .into_iter()
        .find(|s| s.name == "train")
        .map(|s| s.record_ids)
        .unwrap_or_default();
    let (train, eval): (Vec<_>, Vec<_>) =
        records.iter().cloned().partition(|r| train_ids.contains(&r.record_id));
    Ok((train, eval))
}

fn try_auc(scores: Vec<f64>, labels: Vec<u8>) -> Option<f64> {
    let set = ScoredSet::new(scores, labels).ok()?;
    eval::roc_auc(&set).ok()
}

fn opt_json(v: Option<f64>) -> serde_json::Value {
    match v {
        Some(x) => serde_json::json!(x),
        None => serde_json::Value::Null,
    }
}

/// ROC staircase (FPR, TPR) points, tie groups collapsed, endpoints included.
pub fn roc_points(set: &ScoredSet) -> Vec<(f64, f64)> {
    let scores = set.scores();
    let labels = set.labels();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return vec![(0.0, 0.0), (1.0, 1.0)];
    }
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    points
}

// ------------------------------------------------------------------- stages

/// Generate the synthetic dataset: manifest, images and truth sidecar.
pub fn cmd_synth(cfg: &PipelineConfig, out: &Path) -> Result<StageOutcome> {
    cfg.validate()?;
    let mut sc = cfg.synth.clone();
    sc.seed = stage_seed(cfg.seed, seeds::SYNTH, cfg.synth.seed);
    let addr = stage_addr("synth", &serde_json::to_value(&sc).expect("serializable"), &[]);
    let (dir, cached) = prepare_stage(out, "synth", &addr)?;
    if cached {
        return Ok(StageOutcome { dir, cached });
    }
    let started = Instant::now();
    let dataset = synth::generate(&sc)?;
    synth::write_dataset(&dataset, &dir)?;
    let positives =
        dataset.truth.records.iter().filter(|r| r.report_label == 1).count();
    let summary = serde_json::json!({
        "records": dataset.records.len(),
        "images": dataset.images.len(),
        "positive_records": positives,
    });
    finish_stage(&dir, "synth", cfg, &summary, started)?;
    Ok(StageOutcome { dir, cached: false })
}

/// Extract a report label per record into `labels.tsv`.
pub fn cmd_extract_labels(
    cfg: &PipelineConfig,
    out: &Path,
    data: Option<&Path>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let data = resolve_dir(out, "synth", data, "--data")?;
    let addr = stage_addr(
        "extract",
        &serde_json::json!({ "extract": cfg.extract }),
        &[&token(&data)],
    );
    let (dir, cached) = prepare_stage(out, "extract", &addr)?;
    if cached {
        return Ok(StageOutcome { dir, cached });
    }
    let started = Instant::now();
    let records = load_manifest(&manifest_path(&data))?;
    let extractor: Box<dyn LabelExtractor> = match cfg.extract.extractor.as_str() {
        "rule" => Box::new(RuleExtractor::default()),
        "http" => Box::new(HttpExtractor::from_env()?),
        other => return Err(Error::Config(format!("unknown extractor {other:?}"))),
    };
    let backoff = if cfg.extract.extractor == "http" {
        DEFAULT_BACKOFF
    } else {
        std::time::Duration::ZERO
    };
    let mut rows = Vec::with_capacity(records.len());
    let mut positives = 0usize;
    for record in &records {
        let label =
            extract_report_label_with(record, extractor.as_ref(), cfg.extract.retries, backoff)?;
        positives += usize::from(label.value);
        rows.push((record.record_id.clone(), label.value));
    }
    write_labels(&dir.join("labels.tsv"), &rows)?;
    let summary = serde_json::json!({
        "records": rows.len(),
        "positive": positives,
        "source": serde_json::to_value(extractor.source()).expect("serializable"),
    });
    write_json(&dir.join("extraction.json"), &summary)?;
    finish_stage(&dir, "extract", cfg, &summary, started)?;
    Ok(StageOutcome { dir, cached: false })
}

/// Train the dual-teacher/student detector on report labels and evaluate it
/// on the held-out records.
pub fn cmd_train_mil(
    cfg: &PipelineConfig,
    out: &Path,
    data: Option<&Path>,
    labels: Option<&Path>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let data = resolve_dir(out, "synth", data, "--data")?;
    let labels_file = resolve_file(out, "extract", "labels.tsv", labels, "--labels")?;
    let labels_token = token(labels_file.parent().unwrap_or(&labels_file));
    let addr = stage_addr(
        "mil",
        &serde_json::json!({ "seed": cfg.seed, "split": cfg.split, "mil": cfg.mil }),
        &[&token(&data), &labels_token],
    );
    let (dir, cached) = prepare_stage(out, "mil", &addr)?;
    if cached {
        return Ok(StageOutcome { dir, cached });
    }
    let started = Instant::now();
    let records = load_manifest(&manifest_path(&data))?;
    let labels = read_labels(&labels_file)?;
    let (train_records, eval_records) = compute_splits(cfg, &records)?;
    let bags = build_bags(&train_records, &labels, &data)?;
    let effective = stage_seed(cfg.seed, seeds::MIL, cfg.mil.train.seed);
    let mut model = MilModel::new(cfg.mil.arch.clone(), effective);
    let mut train_cfg = cfg.mil.train.clone();
    train_cfg.seed = effective;
    let log = model.train_alternating(&bags, &train_cfg)?;
    write_file(dir.join("train_log.csv").as_path(), log.to_csv().as_bytes())?;
    model.save(&dir.join("mil.ckpt"), &train_cfg, effective)?;

    let split_json = serde_json::json!({
        "train": train_records.iter().map(|r| r.record_id.clone()).collect::<Vec<_>>(),
        "eval": eval_records.iter().map(|r| r.record_id.clone()).collect::<Vec<_>>(),
    });
    write_json(&dir.join("split.json"), &split_json)?;

    // held-out evaluation: frame truth when a sidecar exists, report labels
    // from truth else from the extracted labels
    let truth = load_truth_opt(&data)?;
    let mut frame_scores = Vec::new();
    let mut frame_labels = Vec::new();
    let mut report_scores = Vec::new();
    let mut report_labels = Vec::new();
    for record in &eval_records {
        let images = load_record_images(record, &data)?;
        let scores = model.predict_instances(&images)?;
        if let Some(t) = &truth {
            for (img, &s) in images.iter().zip(&scores) {
                if let Some(frame) = t.frame(&img.image_id) {
                    frame_scores.push(s);
                    frame_labels.push(frame.frame_label);
                }
            }
        }
        let report_label = match &truth {
            Some(t) => t.record(&record.record_id).map(|r| r.report_label),
            None => labels.get(&record.record_id).copied(),
        };
        if let Some(y) = report_label {
            report_scores.push(predict_report(&scores));
            report_labels.push(y);
        }
    }
    let instance_auc = try_auc(frame_scores, frame_labels);
    let report_auc = try_auc(report_scores, report_labels);
    let last_loss = |branch: &str| {
        log.rows.iter().rev().find(|r| r.branch == branch).map(|r| r.loss)
    };
    let summary = serde_json::json!({
        "n_train_bags": bags.len(),
        "n_eval_records": eval_records.len(),
        "instance_auc": opt_json(instance_auc),
        "report_auc": opt_json(report_auc),
        "final_teacher_loss": opt_json(last_loss("teacher")),
        "final_student_loss": opt_json(last_loss("student")),
    });
    write_json(&dir.join("metrics.json"), &summary)?;
    if let (Some(i), Some(r)) = (instance_auc, report_auc) {
        println!("mil: held-out instance AUC {i:.4}, report AUC {r:.4}");
    }
    finish_stage(&dir, "mil", cfg, &summary, started)?;
    Ok(StageOutcome { dir, cached: false })
}

fn oracle_segmenter(
    data: &Path,
    noise: OracleNoise,
) -> Result<OracleSegmenter> {
    let truth = SynthTruth::load(&truth_path(data)).map_err(|e| {
        Error::Config(format!(
            "refine.segmenter=oracle needs a truth sidecar next to the manifest: {e}"
        ))
    })?;
    let mut masks = IndexMap::new();
    for record in &truth.records {
        for frame in &record.frames {
            masks.insert(frame.image_id.clone(), frame.mask()?);
        }
    }
    Ok(OracleSegmenter::new(masks, noise))
}

/// Distil pixel pseudo-labels: image labels from the trained detector, a
/// small ViT for CAMs, boxes from the CAMs, then the prompt/train/re-prompt
/// refinement loop.
pub fn cmd_distill_masks(
    cfg: &PipelineConfig,
    out: &Path,
    data: Option<&Path>,
    mil: Option<&Path>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let data = resolve_dir(out, "synth", data, "--data")?;
    let mil_ckpt = resolve_file(out, "mil", "mil.ckpt", mil, "--mil")?;
    let mil_token = token(mil_ckpt.parent().unwrap_or(&mil_ckpt));
    let addr = stage_addr(
        "distill",
        &serde_json::json!({
            "seed": cfg.seed,
            "split": cfg.split,
            "wsss": cfg.wsss,
            "refine": cfg.refine,
            "seg_arch": cfg.seg.arch,
        }),
        &[&token(&data), &mil_token],
    );
    let (dir, cached) = prepare_stage(out, "distill", &addr)?;
    if cached {
        return Ok(StageOutcome { dir, cached });
    }
    let started = Instant::now();
    let (mil_model, _) = MilModel::load(&mil_ckpt)?;
    let records = load_manifest(&manifest_path(&data))?;
    let (train_records, eval_records) = compute_splits(cfg, &records)?;
    let mut images = Vec::new();
    for record in &train_records {
        images.extend(load_record_images(record, &data)?);
    }
    if images.is_empty() {
        return Err(Error::Data("distill: the train split has no images".into()));
    }

    // image labels distilled from the detector's student branch
    let scores = mil_model.predict_instances(&images)?;
    let image_labels: Vec<u8> = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
    let n_positive: usize = image_labels.iter().map(|&l| usize::from(l)).sum();
    println!("distill: {} train images, {n_positive} student-positive", images.len());

    let wsss_seed = stage_seed(cfg.seed, seeds::WSSS, cfg.wsss.train.seed);
    let mut wsss_model = WsssModel::new(cfg.wsss.arch.clone(), wsss_seed);
    let mut wsss_train = cfg.wsss.train.clone();
    wsss_train.seed = wsss_seed;
    let wsss_log = wsss_model.train(&images, &image_labels, &wsss_train)?;
    write_file(dir.join("wsss_log.csv").as_path(), wsss_log.to_csv().as_bytes())?;
    wsss_model.save(&dir.join("wsss.ckpt"), &wsss_train, wsss_seed)?;

    // CAM -> box prompts for the student-positive images
    let mut boxes_map: IndexMap<String, Vec<BoxPrompt>> = IndexMap::new();
    let mut boxes_csv = String::from("image_id,row_min,col_min,row_max,col_max,score\n");
    for (img, &label) in images.iter().zip(&image_labels) {
        if label == 0 {
            continue;
        }
        let cam = wsss_model.cam_for_image(img, 0)?;
        let (h, w, _) = img.pixels.dim();
        let boxes = cam_to_boxes(&cam, h, w, cfg.wsss.theta, cfg.wsss.min_area);
        if boxes.is_empty() {
            continue;
        }
        for b in &boxes {
            boxes_csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                img.image_id, b.row_min, b.col_min, b.row_max, b.col_max, b.score
            ));
        }
        boxes_map.insert(img.image_id.clone(), boxes);
    }
    write_file(dir.join("boxes.csv").as_path(), boxes_csv.as_bytes())?;
    if boxes_map.is_empty() {
        return Err(Error::Data(
            "distill: no CAM component cleared wsss.theta; nothing to prompt".into(),
        ));
    }

    let refine_seed = stage_seed(cfg.seed, seeds::REFINE, cfg.refine.train.seed);
    let segmenter: Box<dyn PromptableSegmenter> = match cfg.refine.segmenter.as_str() {
        "oracle" => Box::new(oracle_segmenter(&data, cfg.refine.oracle_noise(refine_seed)?)?),
        "subprocess" => {
            let mut command = std::process::Command::new(&cfg.refine.command[0]);
            command.args(&cfg.refine.command[1..]);
            Box::new(SubprocessSegmenter::spawn(&mut command, true)?)
        }
        other => return Err(Error::Config(format!("unknown segmenter {other:?}"))),
    };
    let refine_cfg = cfg.refine.refine_config(refine_seed);
    let mut seg_model = SegModel::new(cfg.seg.arch.clone(), refine_seed);
    let (masks, history) =
        refine_loop(segmenter.as_ref(), &mut seg_model, &images, &boxes_map, &refine_cfg)?;

    for mask in masks.values() {
        let path = dir.join("masks").join(&mask.image_id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        mask.write_png(&path)?;
    }
    seg_model.save(&dir.join("seg_refined.ckpt"), &refine_cfg.train, refine_seed)?;

    // per-iteration history, with DSC against truth when a sidecar exists
    let truth = load_truth_opt(&data)?;
    let mask_dsc = |set: &IndexMap<String, BinaryMask>| -> Option<f64> {
        let t = truth.as_ref()?;
        let mut total = 0.0;
        let mut n = 0usize;
        for (id, m) in set {
            let frame = t.frame(id)?;
            total += eval::dice(m, &frame.mask().ok()?).ok()?;
            n += 1;
        }
        (n > 0).then(|| total / n as f64)
    };
    let mut refine_csv = String::from("iteration,mean_mask_change,n_masks,n_skipped,mean_dsc\n");
    let mut per_iteration_dsc = Vec::new();
    for state in &history {
        let dsc = mask_dsc(&state.masks);
        per_iteration_dsc.push(dsc);
        refine_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            state.iteration,
            state.mean_mask_change,
            state.masks.len(),
            state.skipped.len(),
            dsc.map(|d| d.to_string()).unwrap_or_default()
        ));
    }
    write_file(dir.join("refine.csv").as_path(), refine_csv.as_bytes())?;

    // generalization: the in-loop model on held-out truth-positive frames
    let mut eval_dsc = None;
    if let Some(t) = &truth {
        let mut total = 0.0;
        let mut n = 0usize;
        for record in &eval_records {
            for img in load_record_images(record, &data)? {
                let Some(frame) = t.frame(&img.image_id) else { continue };
                if frame.frame_label != 1 {
                    continue;
                }
                let predicted = seg_model.predict_mask(&img)?;
                total += eval::dice(&predicted, &frame.mask()?)?;
                n += 1;
            }
        }
        eval_dsc = (n > 0).then(|| total / n as f64);
    }

    let final_state = history.last().expect("at least one iteration");
    let summary = serde_json::json!({
        "n_train_images": images.len(),
        "n_student_positive": n_positive,
        "n_prompted": boxes_map.len(),
        "iterations": history.len(),
        "final_mean_mask_change": final_state.mean_mask_change,
        "n_skipped": final_state.skipped.len(),
        "per_iteration_dsc": per_iteration_dsc.iter().copied().map(opt_json).collect::<Vec<_>>(),
        "final_masks_dsc": opt_json(per_iteration_dsc.last().copied().flatten()),
        "eval_model_dsc": opt_json(eval_dsc),
    });
    write_json(&dir.join("metrics.json"), &summary)?;
    if let Some(d) = per_iteration_dsc.last().copied().flatten() {
        println!("distill: final pseudo-mask DSC vs truth {d:.4}");
    }
    finish_stage(&dir, "distill", cfg, &summary, started)?;
    Ok(StageOutcome { dir, cached: false })
}

fn walk_pngs(dir: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let here = dir.join(rel);
    let entries = fs::read_dir(&here).map_err(|e| Error::io(here.display().to_string(), e))?;
    let mut names: Vec<PathBuf> = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(here.display().to_string(), e))?;
        names.push(rel.join(e.file_name()));
    }
    names.sort();
    for name in names {
        let full = dir.join(&name);
        if full.is_dir() {
            walk_pngs(dir, &name, out)?;
        } else if name.extension().is_some_and(|x| x == "png") {
            out.push(name);
        }
    }
    Ok(())
}

/// Train a fresh segmentation model on a directory of pseudo-masks and
/// evaluate it against the truth sidecar when present.
pub fn cmd_train_seg(
    cfg: &PipelineConfig,
    out: &Path,
    data: Option<&Path>,
    masks: Option<&Path>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let data = resolve_dir(out, "synth", data, "--data")?;
    let masks_dir = match masks {
        Some(p) => {
            if !p.is_dir() {
                return Err(Error::Data(format!("--masks {}: not a directory", p.display())));
            }
            p.to_path_buf()
        }
        None => resolve_dir(out, "distill", None, "--masks")?.join("masks"),
    };
    let masks_token = token(masks_dir.parent().unwrap_or(&masks_dir));
    let addr = stage_addr(
        "seg",
        &serde_json::json!({ "seed": cfg.seed, "split": cfg.split, "seg": cfg.seg }),
        &[&token(&data), &masks_token],
    );
    let (dir, cached) = prepare_stage(out, "seg", &addr)?;
    if cached {
        return Ok(StageOutcome { dir, cached });
    }
    let started = Instant::now();
    let mut rel_paths = Vec::new();
    walk_pngs(&masks_dir, Path::new(""), &mut rel_paths)?;
    if rel_paths.is_empty() {
        return Err(Error::Data(format!("{}: no PNG masks found", masks_dir.display())));
    }
    let mut images = Vec::new();
    let mut mask_map: IndexMap<String, BinaryMask> = IndexMap::new();
    for rel in &rel_paths {
        let image_id = rel.to_string_lossy().into_owned();
        let mask = BinaryMask::read_png(image_id.clone(), &masks_dir.join(rel))?;
        let pixels = load_image(&data.join(rel))?;
        images.push(ImageSample { image_id: image_id.clone(), pixels, record_id: String::new() });
        mask_map.insert(image_id, mask);
    }
    let effective = stage_seed(cfg.seed, seeds::SEG, cfg.seg.train.seed);
    let mut model = SegModel::new(cfg.seg.arch.clone(), effective);
    let mut train_cfg = cfg.seg.train.clone();
    train_cfg.seed = effective;
    let log = train_seg_model(&mut model, &images, &mask_map, &train_cfg)?;
    write_file(dir.join("train_log.csv").as_path(), log.to_csv().as_bytes())?;
    model.save(&dir.join("seg.ckpt"), &train_cfg, effective)?;

    let truth = load_truth_opt(&data)?;
    let mut dice_fit = None;
    let mut dice_holdout = None;
    if let Some(t) = &truth {
        let mut fit = (0.0, 0usize);
        for img in &images {
            if let Some(frame) = t.frame(&img.image_id) {
                fit.0 += eval::dice(&model.predict_mask(img)?, &frame.mask()?)?;
                fit.1 += 1;
            }
        }
        dice_fit = (fit.1 > 0).then(|| fit.0 / fit.1 as f64);
        let mut hold = (0.0, 0usize);
        for record in &t.records {
            for frame in &record.frames {
                if frame.frame_label != 1 || mask_map.contains_key(&frame.image_id) {
                    continue;
                }
                let pixels = load_image(&data.join(&frame.image_id))?;
                let img = ImageSample {
                    image_id: frame.image_id.clone(),
                    pixels,
                    record_id: record.record_id.clone(),
                };
                hold.0 += eval::dice(&model.predict_mask(&img)?, &frame.mask()?)?;
                hold.1 += 1;
            }
        }
        dice_holdout = (hold.1 > 0).then(|| hold.0 / hold.1 as f64);
    }
    let summary = serde_json::json!({
        "n_masks": mask_map.len(),
        "dice_fit": opt_json(dice_fit),
        "dice_holdout": opt_json(dice_holdout),
        "final_loss": opt_json(log.rows.last().map(|r| r.loss)),
    });
    write_json(&dir.join("metrics.json"), &summary)?;
    if let Some(d) = dice_fit {
        println!("seg: DSC on distilled masks' images {d:.4}");
    }
    finish_stage(&dir, "seg", cfg, &summary, started)?;
    Ok(StageOutcome { dir, cached: false })
}

/// Labelled polyp frames (pathology from the truth sidecar) split into a
/// fine-tuning pool and a fixed test set, per-class shuffles seeded.
fn biopsy_pool(
    data: &Path,
    truth: &SynthTruth,
    test_fraction: f64,
    seed: u64,
) -> Result<((Vec<ImageSample>, Vec<u8>), (Vec<ImageSample>, Vec<u8>))> {
    let mut images = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for record in &truth.records {
        for frame in &record.frames {
            if let Some(m) = frame.malignant() {
                let pixels = load_image(&data.join(&frame.image_id))?;
                images.push(ImageSample {
                    image_id: frame.image_id.clone(),
                    pixels,
                    record_id: record.record_id.clone(),
                });
                labels.push(m);
            }
        }
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    if by_class[0].len() < 2 || by_class[1].len() < 2 {
        return Err(Error::Data(format!(
            "biopsy needs at least 2 frames of each pathology class, got {} benign / {} malignant",
            by_class[0].len(),
            by_class[1].len()
        )));
    }
    let mut test_idx = Vec::new();
    let mut pool_idx = Vec::new();
    for (c, idx) in by_class.iter().enumerate() {
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(endoked_core::derive_seed(
            seed,
            &[41, c as u64],
        )));
        let n_test = ((test_fraction * idx.len() as f64).round() as usize)
            .clamp(1, idx.len() - 1);
        test_idx.extend_from_slice(&shuffled[..n_test]);
        pool_idx.extend_from_slice(&shuffled[n_test..]);
    }
    test_idx.sort_unstable();
    pool_idx.sort_unstable();
    let take = |idx: &[usize]| -> (Vec<ImageSample>, Vec<u8>) {
        (
            idx.iter().map(|&i| images[i].clone()).collect(),
            idx.iter().map(|&i| labels[i]).collect(),
        )
    };
    Ok((take(&pool_idx), take(&test_idx)))
}

/// Transfer the distilled encoder to pathology prediction: few-shot
/// data-efficiency curves for the pretrained and random-init arms, plus a
/// full-pool model with ROC data and a 2-D embedding dump.
pub fn cmd_finetune_biopsy(
    cfg: &PipelineConfig,
    out: &Path,
    data: Option<&Path>,
    mil: Option<&Path>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let data = resolve_dir(out, "synth", data, "--data")?;
    let mil_ckpt = resolve_file(out, "mil", "mil.ckpt", mil, "--mil")?;
    let mil_token = token(mil_ckpt.parent().unwrap_or(&mil_ckpt));
    let addr = stage_addr(
        "biopsy",
        &serde_json::json!({ "seed": cfg.seed, "biopsy": cfg.biopsy }),
        &[&token(&data), &mil_token],
    );
    let (dir, cached) = prepare_stage(out, "biopsy", &addr)?;
    if cached {
        return Ok(StageOutcome { dir, cached });
    }
    let started = Instant::now();
    let truth = load_truth_opt(&data)?.ok_or_else(|| {
        Error::Data("finetune-biopsy needs a truth sidecar with pathology per frame".into())
    })?;
    let (mil_model, _) = MilModel::load(&mil_ckpt)?;
    let effective = stage_seed(cfg.seed, seeds::BIOPSY, cfg.biopsy.train.seed);
    let ((pool_images, pool_labels), (test_images, test_labels)) =
        biopsy_pool(&data, &truth, cfg.biopsy.test_fraction, effective)?;
    println!(
        "biopsy: {} pool frames, {} test frames",
        pool_images.len(),
        test_images.len()
    );
    // fail early on incompatible encoders, then the arm closure may unwrap
    build_finetune_model(&mil_model.arch, &mil_model.params, 0)?;
    let arch = mil_model.arch.clone();
    let params = mil_model.params.clone();
    let pretrained = move |s: u64| {
        build_finetune_model(&arch, &params, s).expect("encoder validated above")
    };
    let rand_arch = mil_model.arch.clone();
    let random = move |s: u64| BiopsyModel::fresh(rand_arch.clone(), s);

    let plan = FewShotPlan {
        shot_sizes: cfg.biopsy.shots.clone(),
        repetitions: cfg.biopsy.repetitions,
        base_seed: effective,
    };
    let mut finetune_cfg = cfg.biopsy.train.clone();
    finetune_cfg.seed = effective;
    let test_sets = vec![FewShotTestSet {
        name: "holdout".into(),
        images: test_images.clone(),
        labels: test_labels.clone(),
    }];
    let rows_pre =
        run_few_shot(&pretrained, &plan, &pool_images, &pool_labels, &test_sets, &finetune_cfg)?;
    write_file(dir.join("curve_pretrained.csv").as_path(), few_shot_csv(&rows_pre).as_bytes())?;
    let rows_rand =
        run_few_shot(&random, &plan, &pool_images, &pool_labels, &test_sets, &finetune_cfg)?;
    write_file(dir.join("curve_random.csv").as_path(), few_shot_csv(&rows_rand).as_bytes())?;

    // full-pool pretrained model for the operating-point report
    let mut full = build_finetune_model(&mil_model.arch, &mil_model.params, effective)?;
    let log = finetune(&mut full, &pool_images, &pool_labels, &finetune_cfg)?;
    write_file(dir.join("finetune_log.csv").as_path(), log.to_csv().as_bytes())?;
    full.save(&dir.join("biopsy.ckpt"), &finetune_cfg, effective)?;
    let scores = full.predict(&test_images)?;
    let set = ScoredSet::new(scores, test_labels.clone())?;
    let report = compute_metric_report(&set, 1000, effective)?;
    let mut roc_csv = String::from("fpr,tpr\n");
    for (fpr, tpr) in roc_points(&set) {
        roc_csv.push_str(&format!("{fpr},{tpr}\n"));
    }
    write_file(dir.join("roc.csv").as_path(), roc_csv.as_bytes())?;
    let coords = embed_2d(&full, &test_images)?;
    let mut embedding_csv = String::from("image_id,x,y,label\n");
    for ((img, xy), label) in test_images.iter().zip(&coords).zip(&test_labels) {
        embedding_csv.push_str(&format!("{},{},{},{label}\n", img.image_id, xy[0], xy[1]));
    }
    write_file(dir.join("embedding.csv").as_path(), embedding_csv.as_bytes())?;

    let summary = serde_json::json!({
        "n_pool": pool_images.len(),
        "n_test": test_images.len(),
        "report": serde_json::to_value(&report).expect("serializable"),
        "curves": ["curve_pretrained.csv", "curve_random.csv"],
    });
    write_json(&dir.join("metrics.json"), &summary)?;
    println!("biopsy: full-pool test AUC {:.4}", report.auc);
    finish_stage(&dir, "biopsy", cfg, &summary, started)?;
    Ok(StageOutcome { dir, cached: false })
}

// ------------------------------------------------------------------- report

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty csv", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
        .collect();
    Ok((header, rows))
}

fn csv_col(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Data(format!("{}: missing column {name}", path.display())))
}

fn parse_f64(raw: &str, path: &Path) -> Result<f64> {
    raw.parse::<f64>()
        .map_err(|_| Error::Data(format!("{}: expected a number, got {raw:?}", path.display())))
}

fn curve_series(path: &Path, name: &str) -> Result<Series> {
    let (header, rows) = read_csv(path)?;
    let shot = csv_col(&header, "shot_size", path)?;
    let mean = csv_col(&header, "mean_auc", path)?;
    let sd = csv_col(&header, "sd_auc", path)?;
    let mut points = Vec::new();
    let mut band = Vec::new();
    for row in &rows {
        if row.len() <= sd.max(mean).max(shot) {
            continue;
        }
        let x = parse_f64(&row[shot], path)?;
        let m = parse_f64(&row[mean], path)?;
        let s = parse_f64(&row[sd], path)?;
        points.push((x, m));
        band.push((x, m - s, m + s));
    }
    Ok(Series { name: name.into(), points, band: Some(band) })
}

/// Consolidate stage metrics into one JSON document and draw the figures:
/// training losses, per-iteration refinement, data-efficiency curves with
/// mean±sd bands, the ROC curve, and CAM overlays.
pub fn cmd_report(cfg: &PipelineConfig, out: &Path) -> Result<StageOutcome> {
    cfg.validate()?;
    let mut found: BTreeMap<String, PathBuf> = BTreeMap::new();
    for stage in ["synth", "extract", "mil", "distill", "seg", "biopsy"] {
        if let Ok(dir) = resolve_dir(out, stage, None, "--out") {
            found.insert(stage.to_string(), dir);
        }
    }
    if found.is_empty() {
        return Err(Error::Data(format!(
            "{}: no completed stages to report on",
            out.display()
        )));
    }
    let tokens: Vec<String> = found.values().map(|d| token(d)).collect();
    let token_refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let addr = stage_addr(
        "report",
        &serde_json::json!({ "seed": cfg.seed, "report": cfg.report }),
        &token_refs,
    );
    let (dir, cached) = prepare_stage(out, "report", &addr)?;
    if cached {
        return Ok(StageOutcome { dir, cached });
    }
    let started = Instant::now();

    let mut stages_json = serde_json::Map::new();
    for (stage, stage_dir) in &found {
        let metrics = stage_dir.join("metrics.json");
        if metrics.is_file() {
            let value: serde_json::Value = serde_json::from_str(&read_to_string(&metrics)?)
                .map_err(|e| Error::Data(format!("{}: {e}", metrics.display())))?;
            stages_json.insert(stage.clone(), value);
        }
    }
    write_json(
        &dir.join("report.json"),
        &serde_json::Value::Object(stages_json),
    )?;

    let mut figures = Vec::new();
    if let Some(mil_dir) = found.get("mil") {
        let path = mil_dir.join("train_log.csv");
        let (header, rows) = read_csv(&path)?;
        let (ri, bi, li) = (
            csv_col(&header, "round", &path)?,
            csv_col(&header, "branch", &path)?,
            csv_col(&header, "loss", &path)?,
        );
        let mut by_branch: IndexMap<String, Vec<(f64, f64)>> = IndexMap::new();
        for row in &rows {
            if row.len() <= ri.max(bi).max(li) {
                continue;
            }
            by_branch
                .entry(row[bi].clone())
                .or_default()
                .push((parse_f64(&row[ri], &path)?, parse_f64(&row[li], &path)?));
        }
        let series: Vec<Series> =
            by_branch.into_iter().map(|(name, pts)| Series::line(name, pts)).collect();
        let svg = plots::line_chart("Detector training loss", "round", "loss", &series);
        write_file(dir.join("training_loss.svg").as_path(), svg.as_bytes())?;
        figures.push("training_loss.svg");
    }
    if let Some(distill_dir) = found.get("distill") {
        let path = distill_dir.join("refine.csv");
        let (header, rows) = read_csv(&path)?;
        let (ii, ci, di) = (
            csv_col(&header, "iteration", &path)?,
            csv_col(&header, "mean_mask_change", &path)?,
            csv_col(&header, "mean_dsc", &path)?,
        );
        let mut change = Vec::new();
        let mut dsc = Vec::new();
        for row in &rows {
            if row.len() <= ii.max(ci).max(di) {
                continue;
            }
            let x = parse_f64(&row[ii], &path)?;
            change.push((x, parse_f64(&row[ci], &path)?));
            if !row[di].is_empty() {
                dsc.push((x, parse_f64(&row[di], &path)?));
            }
        }
        let mut series = vec![Series::line("mask change", change)];
        if !dsc.is_empty() {
            series.push(Series::line("DSC vs truth", dsc));
        }
        let svg = plots::line_chart("Pseudo-mask refinement", "iteration", "value", &series);
        write_file(dir.join("refine.svg").as_path(), svg.as_bytes())?;
        figures.push("refine.svg");
    }
    if let Some(biopsy_dir) = found.get("biopsy") {
        let series = vec![
            curve_series(&biopsy_dir.join("curve_pretrained.csv"), "pretrained")?,
            curve_series(&biopsy_dir.join("curve_random.csv"), "random init")?,
        ];
        let svg = plots::line_chart(
            "Pathology data efficiency",
            "fine-tuning images",
            "AUC (mean, ±1 sd)",
            &series,
        );
        write_file(dir.join("data_efficiency.svg").as_path(), svg.as_bytes())?;
        figures.push("data_efficiency.svg");

        let path = biopsy_dir.join("roc.csv");
        let (header, rows) = read_csv(&path)?;
        let (fi, ti) =
            (csv_col(&header, "fpr", &path)?, csv_col(&header, "tpr", &path)?);
        let mut pts = Vec::new();
        for row in &rows {
            if row.len() <= fi.max(ti) {
                continue;
            }
            pts.push((parse_f64(&row[fi], &path)?, parse_f64(&row[ti], &path)?));
        }
        let series = vec![
            Series::line("ROC", pts),
            Series::line("chance", vec![(0.0, 0.0), (1.0, 1.0)]),
        ];
        let svg = plots::line_chart("Pathology ROC (held-out)", "FPR", "TPR", &series);
        write_file(dir.join("roc.svg").as_path(), svg.as_bytes())?;
        figures.push("roc.svg");
    }

    // CAM overlays need the distilled localizer and the original images
    let mut n_overlays = 0usize;
    if let (Some(distill_dir), Some(data)) = (found.get("distill"), found.get("synth")) {
        let boxes_path = distill_dir.join("boxes.csv");
        let ckpt = distill_dir.join("wsss.ckpt");
        if boxes_path.is_file() && ckpt.is_file() {
            let (header, rows) = read_csv(&boxes_path)?;
            let id_col = csv_col(&header, "image_id", &boxes_path)?;
            let cols: Result<Vec<usize>> = ["row_min", "col_min", "row_max", "col_max", "score"]
                .iter()
                .map(|c| csv_col(&header, c, &boxes_path))
                .collect();
            let cols = cols?;
            let mut grouped: IndexMap<String, Vec<BoxPrompt>> = IndexMap::new();
            for row in &rows {
                if row.len() <= cols[4].max(id_col) {
                    continue;
                }
                let get = |i: usize| parse_f64(&row[cols[i]], &boxes_path);
                grouped.entry(row[id_col].clone()).or_default().push(BoxPrompt::new(
                    get(0)? as usize,
                    get(1)? as usize,
                    get(2)? as usize,
                    get(3)? as usize,
                    get(4)?,
                ));
            }
            let (wsss_model, _) = WsssModel::load(&ckpt)?;
            for (image_id, boxes) in grouped.iter().take(cfg.report.max_overlays) {
                let pixels = load_image(&data.join(image_id))?;
                let img = ImageSample {
                    image_id: image_id.clone(),
                    pixels: pixels.clone(),
                    record_id: String::new(),
                };
                let cam = wsss_model.cam_for_image(&img, 0)?;
                let overlay = plots::cam_overlay(&pixels, &cam, boxes);
                let name = image_id.replace('/', "_");
                write_image(&overlay, &dir.join("cam_overlays").join(name))?;
                n_overlays += 1;
            }
        }
    }

    let summary = serde_json::json!({
        "stages": found.keys().collect::<Vec<_>>(),
        "figures": figures,
        "cam_overlays": n_overlays,
    });
    finish_stage(&dir, "report", cfg, &summary, started)?;
    Ok(StageOutcome { dir, cached: false })
}

// ------------------------------------------------------------- oracle serve

/// Serve truth-derived masks over the stdin/stdout wire protocol, so the
/// subprocess segmenter path can be exercised end to end with this same
/// binary as the child.
pub fn cmd_oracle_serve(truth_file: &Path, noise: &str, radius: usize, seed: u64) -> Result<()> {
    let truth = SynthTruth::load(truth_file)?;
    let mut masks = IndexMap::new();
    for record in &truth.records {
        for frame in &record.frames {
            masks.insert(frame.image_id.clone(), frame.mask()?);
        }
    }
    let noise = match noise {
        "exact" => OracleNoise::Exact,
        "dilate" => OracleNoise::Dilate(radius),
        "erode" => OracleNoise::Erode(radius),
        "mixed" => OracleNoise::Mixed { radius, seed },
        other => {
            return Err(Error::Config(format!(
                "noise must be exact|dilate|erode|mixed, got {other:?}"
            )))
        }
    };
    let oracle = OracleSegmenter::new(masks, noise);
    let stdin = std::io::stdin();
    let mut reader = BufReader::new(stdin.lock());
    let stdout = std::io::stdout();
    let mut writer = stdout.lock();
    loop {
        let eof = reader
            .fill_buf()
            .map_err(|e| Error::io("stdin", e))?
            .is_empty();
        if eof {
            return Ok(());
        }
        let (image, prompt) = read_mask_request(&mut reader)?;
        let mask = oracle.segment(&image, &prompt)?;
        write_mask_reply(&mut writer, &mask)?;
        writer.flush().map_err(|e| Error::io("stdout", e))?;
    }
}
