use std::fs;
use std::path::Path;

use emseg::cli::{cmd_report, main_with_args, mean_std, RunStatus, RunSummary, SUMMARY_FILE};
use emseg::engine::{EStepAudit, RunConfig};

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["emseg"];
    full.extend_from_slice(args);
    main_with_args(full)
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{
  "synthetic": {"height": 12, "width": 12, "blob_side_min": 4, "blob_side_max": 8,
                "base_images": 12, "images_per_task": 12, "test_images_per_task": 4},
  "run": {"lr": 1.0, "base_lr": 0.5, "base_epochs": 2}
}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_report_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    assert_eq!(run(&["gen", "--config", &cfg, "--out", s(&data)]), 0);
    assert!(data.join("manifest.json").exists());
    let runs = dir.path().join("runs");
    for (name, extra) in [
        ("ours", vec![]),
        ("er", vec!["--method", "er"]),
        ("nods", vec!["--ablate", "dynamic_sampling"]),
    ] {
        let out = runs.join(name);
        let mut args = vec![
            "train",
            "--data",
            s(&data),
            "--config",
            &cfg,
            "--seed",
            "3",
            "--out",
            s(&out),
        ];
        args.extend(extra);
        assert_eq!(run(&args), 0, "{name}");
        for f in ["summary.json", "metrics.csv", "diagnostics.csv", "checkpoint.ssck"] {
            assert!(out.join(f).exists(), "{name}/{f}");
        }
    }
    let summary: RunSummary =
        serde_json::from_str(&fs::read_to_string(runs.join("nods/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.ablated, vec!["dynamic_sampling".to_string()]);
    assert_eq!(summary.group, "ours-no-dynamic_sampling");
    assert_eq!(summary.seed, 3);
    assert_eq!(summary.sgd_steps, summary.incoming_batches);
    let er: RunSummary = serde_json::from_str(&fs::read_to_string(runs.join("er/summary.json")).unwrap()).unwrap();
    assert_eq!(er.group, "er");
    assert_eq!(er.ablated.len(), 4);

    let report = dir.path().join("report.csv");
    assert_eq!(run(&["report", "--runs", s(&runs), "--out", s(&report)]), 0);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 + 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"synthetic": {"blob_count": 3}}"#).unwrap();
    assert_eq!(run(&["gen", "--config", s(&bad), "--out", s(&dir.path().join("x"))]), 2);

    let invalid = dir.path().join("invalid.json");
    fs::write(&invalid, r#"{"run": {"delta": 1.5}}"#).unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    assert_eq!(run(&["gen", "--config", &cfg, "--out", s(&data)]), 0);
    let out = s(&dir.path().join("r")).to_string();
    assert_eq!(
        run(&["train", "--data", s(&data), "--config", s(&invalid), "--out", &out]),
        2
    );
    assert_eq!(
        run(&["train", "--data", s(&data), "--ablate", "dropout", "--out", &out]),
        2
    );
    assert_eq!(
        run(&["train", "--data", s(&dir.path().join("missing")), "--out", &out]),
        1
    );
    assert_eq!(run(&["frobnicate"]), 2);

    // a corrupt sample file is a runtime error
    let victim = fs::read_dir(data.join("train/t1"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mut bytes = fs::read(&victim).unwrap();
    bytes[0] = b'X';
    fs::write(&victim, bytes).unwrap();
    assert_eq!(run(&["train", "--data", s(&data), "--out", &out]), 1);

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(
        run(&["report", "--runs", s(&empty), "--out", s(&dir.path().join("rep.csv"))]),
        0
    );
    assert!(!dir.path().join("rep.csv").exists());
}

fn fake_summary(group: &str, seed: u64, per_task: Vec<f64>) -> RunSummary {
    let imiou = per_task.iter().sum::<f64>() / per_task.len() as f64;
    RunSummary {
        status: RunStatus::Complete,
        error: None,
        run_id: format!("{group}-seed{seed}"),
        group: group.into(),
        seed,
        dataset_hash: "00".into(),
        config: RunConfig {
            seed,
            ..RunConfig::default()
        },
        ablated: vec![],
        per_task_miou: per_task,
        imiou: Some(imiou),
        undefined_classes: vec![],
        sgd_steps: 1,
        incoming_batches: 1,
        estep_audit: EStepAudit::default(),
    }
}

#[test]
fn report_groups_seeds_and_skips_missing_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let mut expected: Vec<(String, Vec<f64>)> = Vec::new();
    for group in ["er", "ours"] {
        let mut ims = Vec::new();
        for seed in 0..5u64 {
            let base = if group == "ours" { 0.8 } else { 0.7 };
            let per_task = vec![0.9, base - 0.01 * seed as f64, base - 0.02 * seed as f64];
            let summary = fake_summary(group, seed, per_task);
            ims.push(summary.imiou.unwrap());
            let run_dir = dir.path().join(format!("{group}-{seed}"));
            fs::create_dir(&run_dir).unwrap();
            fs::write(run_dir.join(SUMMARY_FILE), serde_json::to_string(&summary).unwrap()).unwrap();
        }
        expected.push((group.to_string(), ims));
    }
    fs::create_dir(dir.path().join("stray")).unwrap();

    let report = cmd_report(&[dir.path().to_path_buf()], &dir.path().join("out.csv")).unwrap();
    assert_eq!(report.runs.len(), 10);
    assert_eq!(report.warnings.len(), 1);
    assert!(report.warnings[0].contains("stray"));
    assert_eq!(report.groups.len(), 2);
    for (g, (name, ims)) in report.groups.iter().zip(&expected) {
        assert_eq!(&g.group, name);
        assert_eq!(g.runs, 5);
        // independent arithmetic: two-pass mean and n-1 variance
        let n = ims.len() as f64;
        let mean = ims.iter().sum::<f64>() / n;
        let sd = (ims.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((g.imiou.0 - mean).abs() < 1e-12);
        assert!((g.imiou.1 - sd).abs() < 1e-12);
        assert_eq!(g.per_task[0], (0.9, 0.0));
    }
    assert_eq!(mean_std(&[2.0, 4.0]), (3.0, 2f64.sqrt()));
    let table = report.table();
    assert!(table.contains("[ours]") && table.contains("[er]"));
}

#[test]
fn same_seed_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = emseg::cli::cmd_gen(Some(Path::new(&cfg)), Some(9), &dir.path().join("a")).unwrap();
    let b = emseg::cli::cmd_gen(Some(Path::new(&cfg)), Some(9), &dir.path().join("b")).unwrap();
    let c = emseg::cli::cmd_gen(Some(Path::new(&cfg)), Some(10), &dir.path().join("c")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a, emseg::data::dataset_hash(&dir.path().join("a")).unwrap());
}
