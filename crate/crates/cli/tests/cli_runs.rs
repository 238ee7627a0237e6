use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn hybridna(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridna"))
        .args(args)
        .env("HYBRIDNA_RUN_ROOT", root)
        .current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."))
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The only run directory under `root` whose name starts with `prefix`.
fn run_dir(root: &Path, prefix: &str) -> PathBuf {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn config(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

/// Metrics rows without the wall-clock columns.
fn timeless_metrics(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').take(4).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn synthetic_pretrain_lowers_loss_and_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let out = hybridna(
        &a,
        &["pretrain", "--config", &config("pretrain_synthetic.json")],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = run_dir(&a, "pretrain-");
    assert!(dir
        .file_name()
        .unwrap()
        .to_string_lossy()
        .ends_with("-seed0"));
    let summary = json(&dir.join("summary.json"));
    let (first, last) = (
        summary["initial_loss"].as_f64().unwrap(),
        summary["final_loss"].as_f64().unwrap(),
    );
    assert!(last < first, "{first} -> {last}");
    assert!(dir.join("model.hydn").exists());
    assert!(dir.join("checkpoints/step_50.hydn").exists());
    assert!(stderr(&out).contains("resolved config"));

    // Relaunch from the run's own resolved config.
    let b = root.path().join("b");
    let again = hybridna(
        &b,
        &[
            "pretrain",
            "--config",
            dir.join("config.json").to_str().unwrap(),
        ],
    );
    assert!(again.status.success(), "{}", stderr(&again));
    let dir_b = run_dir(&b, "pretrain-");
    assert_eq!(timeless_metrics(&dir), timeless_metrics(&dir_b));
    assert_eq!(summary, json(&dir_b.join("summary.json")));
    assert_eq!(
        std::fs::read(dir.join("model.hydn")).unwrap(),
        std::fs::read(dir_b.join("model.hydn")).unwrap()
    );
}

#[test]
fn fasta_pretrain_runs_and_missing_fasta_exits_2() {
    let root = tempfile::tempdir().unwrap();
    let ok = hybridna(
        root.path(),
        &[
            "pretrain",
            "--config",
            &config("pretrain_fasta.json"),
            "--train.stages.0.steps",
            "5",
        ],
    );
    assert!(ok.status.success(), "{}", stderr(&ok));
    let dir = run_dir(root.path(), "pretrain-");
    assert_eq!(json(&dir.join("summary.json"))["steps"], 5);
    let resolved = json(&dir.join("config.json"));
    assert!(Path::new(resolved["data"]["fasta"][0].as_str().unwrap()).is_absolute());

    let missing = hybridna(
        root.path(),
        &[
            "pretrain",
            "--config",
            &config("pretrain_fasta.json"),
            "--data.fasta",
            r#"["no/such/genome.fa"]"#,
        ],
    );
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("no/such/genome.fa"));
}

#[test]
fn config_errors_exit_1_naming_the_key() {
    let root = tempfile::tempdir().unwrap();
    let bad = hybridna(
        root.path(),
        &[
            "pretrain",
            "--config",
            &config("pretrain_synthetic.json"),
            "--train.optimizer.learning_rate",
            "1e-3",
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("learning_rate"), "{}", stderr(&bad));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.json");
    let mut cfg = json(&configs().join("pretrain_synthetic.json"));
    cfg["modle"] = Value::Null;
    std::fs::write(&path, cfg.to_string()).unwrap();
    let typo = hybridna(
        root.path(),
        &["pretrain", "--config", path.to_str().unwrap()],
    );
    assert_eq!(typo.status.code(), Some(1));
    assert!(stderr(&typo).contains("modle"));

    let wrong_type = hybridna(
        root.path(),
        &[
            "pretrain",
            "--config",
            &config("pretrain_synthetic.json"),
            "--train.warmup_steps",
            "many",
        ],
    );
    assert_eq!(wrong_type.status.code(), Some(1));
    assert!(stderr(&wrong_type).contains("train.warmup_steps"));
    assert!(!root.path().exists() || std::fs::read_dir(root.path()).unwrap().count() == 0);
}

#[test]
fn divergence_exits_3() {
    let root = tempfile::tempdir().unwrap();
    let out = hybridna(
        root.path(),
        &[
            "pretrain",
            "--config",
            &config("pretrain_synthetic.json"),
            "--train.optimizer.lr",
            "1e6",
            "--train.optimizer.grad_clip",
            "1e12",
            "--train.warmup_steps",
            "0",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn bench_emits_csv_schema_and_series() {
    let root = tempfile::tempdir().unwrap();
    let out = hybridna(
        root.path(),
        &[
            "bench",
            "--config",
            &config("bench.json"),
            "--plan.context_lengths",
            "[64, 128]",
            "--plan.memory_budget",
            "1",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = run_dir(root.path(), "bench-");
    let csv = std::fs::read_to_string(dir.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,ctx_len,tokens_per_sec,madds,peak_bytes,status"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for (row, (model, len)) in rows.iter().zip([
        ("hybrid", "64"),
        ("hybrid", "128"),
        ("attention", "64"),
        ("attention", "128"),
    ]) {
        assert_eq!((row[0], row[1]), (model, len));
        assert_eq!(row[2].parse::<f64>().unwrap(), 0.0);
        assert!(row[3].parse::<u64>().unwrap() > 0);
        assert!(row[4].parse::<u64>().unwrap() > 1);
        assert_eq!(row[5], "out_of_memory");
    }
    assert_eq!(json(&dir.join("config.json"))["plan"]["seed"], 0);

    let roomy = tempfile::tempdir().unwrap();
    let out = hybridna(
        roomy.path(),
        &[
            "bench",
            "--config",
            &config("bench.json"),
            "--plan.context_lengths",
            "[64, 128]",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = run_dir(roomy.path(), "bench-");
    let series = std::fs::read_to_string(dir.join("hybrid.dat")).unwrap();
    assert_eq!(series.lines().count(), 2);
    assert!(series.lines().all(|l| l.split(' ').count() == 2));
    assert!(std::fs::read_to_string(dir.join("bench.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .all(|l| l.ends_with(",ok")));
}

#[test]
fn eval_reproduces_finetune_metrics_exactly() {
    let root = tempfile::tempdir().unwrap();
    let ft = hybridna(
        root.path(),
        &[
            "finetune",
            "--config",
            &config("finetune_classify.json"),
            "--plan.epochs",
            "3",
        ],
    );
    assert!(ft.status.success(), "{}", stderr(&ft));
    let ft_dir = run_dir(root.path(), "finetune-");
    for f in [
        "predictions.tsv",
        "report.json",
        "model.hydn",
        "train.tsv",
        "metrics.csv",
    ] {
        assert!(ft_dir.join(f).exists(), "{f}");
    }
    let ev = hybridna(
        root.path(),
        &[
            "eval",
            "--predictions",
            ft_dir.join("predictions.tsv").to_str().unwrap(),
        ],
    );
    assert!(ev.status.success(), "{}", stderr(&ev));
    let ev_dir = run_dir(root.path(), "eval-");
    assert_eq!(
        json(&ev_dir.join("metrics.json")),
        json(&ft_dir.join("report.json"))["test"]
    );
}

#[test]
fn end_to_end_demo_produces_cre_report() {
    let root = tempfile::tempdir().unwrap();
    let pre = hybridna(
        root.path(),
        &[
            "pretrain",
            "--config",
            &config("pretrain_synthetic.json"),
            "--checkpoint_every",
            "0",
        ],
    );
    assert!(pre.status.success(), "{}", stderr(&pre));
    let ck = run_dir(root.path(), "pretrain-").join("model.hydn");
    let ft = hybridna(
        root.path(),
        &[
            "finetune",
            "--config",
            &config("finetune_cre.json"),
            "--checkpoint",
            ck.to_str().unwrap(),
        ],
    );
    assert!(ft.status.success(), "{}", stderr(&ft));
    let ft_dir = run_dir(root.path(), "finetune-");
    let resolved = json(&ft_dir.join("config.json"));
    assert!(resolved["model"].is_null());
    assert_eq!(resolved["checkpoint"], ck.to_str().unwrap());
    let report = json(&ft_dir.join("cre_report.json"));
    for label in ["A0", "A3"] {
        let r = &report["labels"][label];
        assert!(r["top1"].is_number() && r["mean_top100"].is_number());
        assert_eq!(r["n"], 8);
        assert!(report["training_mean"][label].is_number());
    }
    assert!(report["diversity"].as_f64().unwrap() >= 0.0);
    let fasta = std::fs::read_to_string(ft_dir.join("generated.fasta")).unwrap();
    assert_eq!(fasta.lines().filter(|l| l.starts_with(">A3_")).count(), 8);
    assert_eq!(
        std::fs::read_to_string(ft_dir.join("vocab.txt"))
            .unwrap()
            .lines()
            .count(),
        12
    );

    let gen = hybridna(
        root.path(),
        &[
            "generate",
            "--config",
            &config("generate.json"),
            "--checkpoint",
            ft_dir.join("model.hydn").to_str().unwrap(),
        ],
    );
    assert!(gen.status.success(), "{}", stderr(&gen));
    let gen_dir = run_dir(root.path(), "generate-");
    let results = json(&gen_dir.join("results.json"));
    assert_eq!(results.as_array().unwrap().len(), 4);
    assert_eq!(results[0]["text"].as_str().unwrap().len(), 60);

    let unknown = hybridna(
        root.path(),
        &[
            "generate",
            "--config",
            &config("generate.json"),
            "--checkpoint",
            ck.to_str().unwrap(),
        ],
    );
    assert_eq!(unknown.status.code(), Some(1));
    assert!(stderr(&unknown).contains("A3"));
}

#[test]
fn tokenize_round_trips() {
    let root = tempfile::tempdir().unwrap();
    let enc = hybridna(root.path(), &["tokenize", "ACGTN", "ggaa"]);
    assert!(enc.status.success());
    assert_eq!(String::from_utf8_lossy(&enc.stdout), "0 1 2 3 7\n2 2 0 0\n");
    let dec = hybridna(root.path(), &["tokenize", "--decode", "4 0 1 2 3 5"]);
    assert_eq!(String::from_utf8_lossy(&dec.stdout), "[BOS]ACGT[EOS]\n");
    let bad = hybridna(root.path(), &["tokenize", "ACGU"]);
    assert_eq!(bad.status.code(), Some(1));
}
