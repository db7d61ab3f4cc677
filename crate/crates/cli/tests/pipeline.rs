//! End-to-end wiring of every stage at miniature scale: artifacts land in
//! content-addressed directories, chain by discovery, and the report stage
//! redraws exactly the numbers the CSVs contain.

use std::path::Path;

use endoked_cli::stages::{
    cmd_distill_masks, cmd_extract_labels, cmd_finetune_biopsy, cmd_report, cmd_synth,
    cmd_train_mil, cmd_train_seg, read_labels,
};
use endoked_cli::{load_config, PipelineConfig};
use endoked_core::synth::{truth_path, SynthTruth};

fn smoke_config() -> PipelineConfig {
    load_config(
        None,
        &[
            "synth.n_records=14".into(),
            "synth.images_per_record=[2, 3]".into(),
            "synth.image_side=32".into(),
            "synth.blob_radius=[6.0, 9.0]".into(),
            "synth.blobs_per_positive=[1, 1]".into(),
            "mil.arch.image_side=32".into(),
            "mil.arch.encoder_channels=[6, 12, 24]".into(),
            "mil.arch.attn_hidden=16".into(),
            "mil.arch.query_dim=16".into(),
            "mil.train.rounds=30".into(),
            "mil.train.lr=0.01".into(),
            "mil.train.momentum=0.9".into(),
            "mil.train.student_batch=8".into(),
            "wsss.arch.image_side=32".into(),
            "wsss.arch.patch=8".into(),
            "wsss.arch.dim=16".into(),
            "wsss.arch.layers=3".into(),
            "wsss.arch.mlp_hidden=24".into(),
            "wsss.train.steps=150".into(),
            "wsss.train.peak_lr=0.003".into(),
            "wsss.train.warmup_steps=10".into(),
            "wsss.min_area=1".into(),
            "refine.max_iters=2".into(),
            "refine.train.steps=60".into(),
            "seg.arch.channels=[4, 8, 12]".into(),
            "seg.train.steps=60".into(),
            "biopsy.shots=[4]".into(),
            "biopsy.repetitions=1".into(),
            "biopsy.train.epochs=3".into(),
            "biopsy.train.batch=8".into(),
        ],
    )
    .unwrap()
}

fn count_pngs(dir: &Path) -> usize {
    let mut n = 0;
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "png") {
                n += 1;
            }
        }
    }
    n
}

#[test]
fn pipeline_chains_all_stages_and_report_mirrors_the_csvs() {
    let out = tempfile::tempdir().unwrap();
    let out = out.path();
    let cfg = smoke_config();

    let synth = cmd_synth(&cfg, out).unwrap();
    let truth = SynthTruth::load(&truth_path(&synth.dir)).unwrap();
    assert_eq!(truth.records.len(), 14);

    let extract = cmd_extract_labels(&cfg, out, None).unwrap();
    let labels = read_labels(&extract.dir.join("labels.tsv")).unwrap();
    for record in &truth.records {
        assert_eq!(labels[&record.record_id], record.report_label);
    }

    let mil = cmd_train_mil(&cfg, out, None, None).unwrap();
    for file in ["mil.ckpt", "train_log.csv", "metrics.json", "split.json", "config.toml"] {
        assert!(mil.dir.join(file).is_file(), "missing {file}");
    }
    let split: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(mil.dir.join("split.json")).unwrap())
            .unwrap();
    assert_eq!(
        split["train"].as_array().unwrap().len() + split["eval"].as_array().unwrap().len(),
        14
    );

    let distill = cmd_distill_masks(&cfg, out, None, None).unwrap();
    for file in ["wsss.ckpt", "boxes.csv", "refine.csv", "seg_refined.ckpt", "metrics.json"] {
        assert!(distill.dir.join(file).is_file(), "missing {file}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(distill.dir.join("metrics.json")).unwrap())
            .unwrap();
    let n_prompted = metrics["n_prompted"].as_u64().unwrap() as usize;
    assert!(n_prompted > 0);
    assert_eq!(count_pngs(&distill.dir.join("masks")), n_prompted);

    let seg = cmd_train_seg(&cfg, out, None, None).unwrap();
    let seg_metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(seg.dir.join("metrics.json")).unwrap())
            .unwrap();
    assert!(seg_metrics["dice_fit"].is_number());
    assert!(seg.dir.join("seg.ckpt").is_file());

    let biopsy = cmd_finetune_biopsy(&cfg, out, None, None).unwrap();
    for file in
        ["curve_pretrained.csv", "curve_random.csv", "roc.csv", "embedding.csv", "biopsy.ckpt"]
    {
        assert!(biopsy.dir.join(file).is_file(), "missing {file}");
    }
    let bm: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(biopsy.dir.join("metrics.json")).unwrap())
            .unwrap();
    let auc = bm["report"]["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc), "auc {auc}");

    let report = cmd_report(&cfg, out).unwrap();
    for file in
        ["report.json", "training_loss.svg", "refine.svg", "data_efficiency.svg", "roc.svg"]
    {
        assert!(report.dir.join(file).is_file(), "missing {file}");
    }
    assert!(count_pngs(&report.dir.join("cam_overlays")) > 0);
    let consolidated: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.dir.join("report.json")).unwrap())
            .unwrap();
    assert!(consolidated["mil"]["report_auc"].is_number());

    // the drawn curve equals the CSV it came from (re-read oracle)
    let svg = std::fs::read_to_string(report.dir.join("data_efficiency.svg")).unwrap();
    let data = endoked_cli::plots::embedded_data(&svg).unwrap();
    let csv = std::fs::read_to_string(biopsy.dir.join("curve_pretrained.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    assert_eq!(data["series"][0]["name"], "pretrained");
    assert_eq!(
        data["series"][0]["points"][0][0].as_f64().unwrap(),
        cols[0].parse::<f64>().unwrap()
    );
    assert_eq!(
        data["series"][0]["points"][0][1].as_f64().unwrap(),
        cols[2].parse::<f64>().unwrap()
    );

    // every stage is resumable: identical config lands on the cached dir
    assert!(cmd_train_mil(&cfg, out, None, None).unwrap().cached);
    assert!(cmd_report(&cfg, out).unwrap().cached);
}

#[test]
fn subprocess_segmenter_reproduces_the_in_process_oracle() {
    let out = tempfile::tempdir().unwrap();
    let out = out.path();
    let cfg = smoke_config();
    let synth = cmd_synth(&cfg, out).unwrap();
    cmd_extract_labels(&cfg, out, None).unwrap();
    cmd_train_mil(&cfg, out, None, None).unwrap();
    let oracle_run = cmd_distill_masks(&cfg, out, None, None).unwrap();

    let mut sub_cfg = cfg.clone();
    sub_cfg.refine.segmenter = "subprocess".into();
    sub_cfg.refine.command = vec![
        env!("CARGO_BIN_EXE_endoked").to_string(),
        "oracle-serve".into(),
        "--truth".into(),
        truth_path(&synth.dir).display().to_string(),
    ];
    let sub_run = cmd_distill_masks(&sub_cfg, out, None, None).unwrap();
    assert_ne!(sub_run.dir, oracle_run.dir);

    let mut rels = Vec::new();
    collect_rel_pngs(&oracle_run.dir.join("masks"), Path::new(""), &mut rels);
    assert!(!rels.is_empty());
    for rel in rels {
        let a = std::fs::read(oracle_run.dir.join("masks").join(&rel)).unwrap();
        let b = std::fs::read(sub_run.dir.join("masks").join(&rel)).unwrap();
        assert_eq!(a, b, "mask {} differs across segmenter transports", rel.display());
    }
}

fn collect_rel_pngs(root: &Path, rel: &Path, out: &mut Vec<std::path::PathBuf>) {
    for e in std::fs::read_dir(root.join(rel)).unwrap().flatten() {
        let r = rel.join(e.file_name());
        if e.path().is_dir() {
            collect_rel_pngs(root, &r, out);
        } else {
            out.push(r);
        }
    }
}

#[test]
fn binary_honors_exit_codes_and_the_run_lock() {
    let out = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_endoked");
    let run = |args: &[&str]| {
        std::process::Command::new(bin)
            .args(args)
            .output()
            .expect("binary runs")
    };
    let out_str = out.path().join("run");
    let out_str = out_str.to_str().unwrap();
    let ok = run(&[
        "synth",
        "--out",
        out_str,
        "--set",
        "synth.n_records=3",
        "--set",
        "synth.image_side=20",
        "--set",
        "synth.blob_radius=[3.0, 5.0]",
        "--set",
        "synth.images_per_record=[1, 2]",
    ]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(!Path::new(out_str).join("run.lock").exists(), "lock released");

    let bad_cfg = run(&["synth", "--out", out_str, "--set", "synth.n_records=0"]);
    assert_eq!(bad_cfg.status.code(), Some(2));

    let missing_data = run(&["train-mil", "--out", out_str]);
    assert_eq!(missing_data.status.code(), Some(3));

    std::fs::write(Path::new(out_str).join("run.lock"), "held\n").unwrap();
    let locked = run(&["synth", "--out", out_str, "--set", "synth.n_records=3"]);
    assert_eq!(locked.status.code(), Some(2));
    let err = String::from_utf8_lossy(&locked.stderr);
    assert!(err.contains("run.lock"), "{err}");
}
