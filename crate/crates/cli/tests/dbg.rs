use endoked_cli::load_config;
use endoked_cli::stages::{cmd_extract_labels, cmd_synth, cmd_train_mil};

#[test]
fn dbg_e2e_scale() {
    let out = tempfile::tempdir().unwrap();
    let out = out.path();
    let cfg = load_config(
        None,
        &[
            "seed=1".into(),
            "synth.n_records=200".into(),
            "synth.images_per_record=[16, 32]".into(),
            "mil.train.rounds=10".into(),
        ],
    )
    .unwrap();
    let t0 = std::time::Instant::now();
    cmd_synth(&cfg, out).unwrap();
    eprintln!("synth: {:.1}s", t0.elapsed().as_secs_f64());
    cmd_extract_labels(&cfg, out, None).unwrap();
    let t0 = std::time::Instant::now();
    let mil = cmd_train_mil(&cfg, out, None, None).unwrap();
    eprintln!("mil: {:.1}s", t0.elapsed().as_secs_f64());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(mil.dir.join("metrics.json")).unwrap())
            .unwrap();
    eprintln!("metrics: {m}");
}
