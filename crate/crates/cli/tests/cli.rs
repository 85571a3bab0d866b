use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn ewcft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ewcft"))
        .current_dir(dir)
        .env("RUST_LOG", "info")
        .env_remove("EWCFT_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> (String, String) {
    let out = ewcft(dir, args);
    let (stdout, stderr) = (
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    );
    assert!(out.status.success(), "ewcft {args:?} failed:\n{stdout}\n{stderr}");
    (stdout, stderr)
}

fn gen(dir: &Path, kind: &str, extra: &[&str], out: &str) {
    let mut args = vec!["gen-data", "--kind", kind, "--out", out];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

/// Small original/FT corpora plus a manifest for the manifest-driven commands.
fn workspace(ft_pairs: usize, manifest_extra: Value) -> TempDir {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("gen.json"),
        json!({"n_instances": 600, "vocab_size": 60, "n_topics": 6, "seed": 4}).to_string(),
    )
    .unwrap();
    gen(d, "original", &["--config", "gen.json"], "orig_train.jsonl");
    gen(
        d,
        "original",
        &["--config", "gen.json", "--seed", "9", "--n", "300"],
        "orig_test.jsonl",
    );
    let n = (2 * ft_pairs).to_string();
    gen(
        d,
        "symmetric",
        &["--rules-from", "orig_train.jsonl", "--n", &n, "--seed", "1"],
        "ft_train.jsonl",
    );
    gen(
        d,
        "symmetric",
        &["--rules-from", "orig_train.jsonl", "--n", "200", "--seed", "2"],
        "ft_test.jsonl",
    );
    let mut manifest = json!({
        "original_train": "orig_train.jsonl",
        "original_test": "orig_test.jsonl",
        "ft_train": "ft_train.jsonl",
        "ft_test": "ft_test.jsonl",
        "seeds": [1, 2],
        "model": {"embed_dim": 4, "hidden_dim": 6},
        "base_train": {"epochs": 3, "learning_rate": 0.01, "batch_size": 32},
        "finetune": {"epochs": 2, "learning_rate": 0.003, "batch_size": 16,
                     "regularizer": {"kind": "ewc", "lambda": 1.0, "fisher_samples": 50}},
        "output_dir": "runs"
    });
    for (k, v) in manifest_extra.as_object().unwrap() {
        manifest[k] = v.clone();
    }
    fs::write(d.join("manifest.json"), manifest.to_string()).unwrap();
    tmp
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}

fn find(dir: &Path, name: &str) -> PathBuf {
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.file_name().unwrap() == name {
            return p;
        }
        if p.is_dir() {
            let hit = find(&p, name);
            if hit.exists() {
                return hit;
            }
        }
    }
    dir.join("__missing__")
}

#[test]
fn help_lists_subcommands_and_global_flags() {
    let tmp = TempDir::new().unwrap();
    let (stdout, _) = ok(tmp.path(), &["--help"]);
    for word in [
        "gen-data",
        "train",
        "finetune",
        "sweep",
        "ablate",
        "pareto",
        "report",
        "reproduce-paper-analogs",
        "--jobs",
        "--out-root",
        "--log-file",
    ] {
        assert!(stdout.contains(word), "--help lacks {word}");
    }
    let (stdout, _) = ok(tmp.path(), &["finetune", "--help"]);
    for word in ["--regularizer", "--lambda", "--fisher-samples", "--checkpoint"] {
        assert!(stdout.contains(word), "finetune --help lacks {word}");
    }
}

#[test]
fn usage_errors_exit_with_code_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(
        ewcft(tmp.path(), &["gen-data", "--kind", "original"]).status.code(),
        Some(2)
    );
    assert_eq!(
        ewcft(
            tmp.path(),
            &[
                "gen-data",
                "--kind",
                "original",
                "--bias-strength",
                "1.5",
                "--out",
                "x.jsonl"
            ]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        ewcft(
            tmp.path(),
            &["gen-data", "--kind", "symmetric", "--n", "7", "--out", "x.jsonl"]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(ewcft(tmp.path(), &["--jobs", "0", "--help"]).status.code(), Some(2));
}

#[test]
fn symmetric_data_has_no_claim_cue_and_generation_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let (stdout, _) = ok(
        d,
        &[
            "gen-data", "--kind", "original", "--n", "2000", "--seed", "3", "--out", "a.jsonl",
        ],
    );
    let mi = |s: &str| -> f64 {
        s.lines()
            .find_map(|l| l.strip_prefix("claim-label mutual information: "))
            .unwrap()
            .trim_end_matches(" bits")
            .parse()
            .unwrap()
    };
    assert!(mi(&stdout) >= 0.3, "{stdout}");
    let (stdout, _) = ok(
        d,
        &[
            "gen-data",
            "--kind",
            "symmetric",
            "--rules-from",
            "a.jsonl",
            "--out",
            "s.jsonl",
        ],
    );
    assert!(mi(&stdout) <= 0.01, "{stdout}");
    assert!(stdout.contains("wrote 700 instances"), "{stdout}");
    ok(
        d,
        &[
            "gen-data", "--kind", "original", "--n", "2000", "--seed", "3", "--out", "b.jsonl",
        ],
    );
    ok(
        d,
        &[
            "gen-data",
            "--kind",
            "symmetric",
            "--rules-from",
            "b.jsonl",
            "--out",
            "t.jsonl",
        ],
    );
    assert_eq!(
        fs::read(d.join("a.jsonl")).unwrap(),
        fs::read(d.join("b.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("s.jsonl")).unwrap(),
        fs::read(d.join("t.jsonl")).unwrap()
    );
}

#[test]
fn ewc_with_zero_lambda_matches_plain_finetuning() {
    let tmp = workspace(60, json!({}));
    let d = tmp.path();
    ok(
        d,
        &[
            "train",
            "--data",
            "orig_train.jsonl",
            "--epochs",
            "2",
            "--embed-dim",
            "4",
            "--hidden-dim",
            "6",
            "--out",
            "base.json",
        ],
    );
    let common = [
        "finetune",
        "--checkpoint",
        "base.json",
        "--ft-train",
        "ft_train.jsonl",
        "--original",
        "orig_train.jsonl",
        "--epochs",
        "3",
    ];
    let run = |reg: &str, out: &str| -> String {
        let mut args = common.to_vec();
        args.extend_from_slice(&["--regularizer", reg, "--lambda", "0", "--out", out]);
        if reg == "none" {
            args.retain(|a| *a != "--lambda" && *a != "0");
        }
        ok(d, &args).1
    };
    let stderr = run("ewc", "ewc.json");
    run("none", "none.json");
    let model = |p: &str| -> Value {
        serde_json::from_str::<Value>(&fs::read_to_string(d.join(p)).unwrap()).unwrap()["model"].clone()
    };
    assert_eq!(model("ewc.json"), model("none.json"));
    assert_eq!(stderr.matches("recomputed Fisher").count(), 3, "{stderr}");
    let hist = read_csv(&d.join("ewc.history.csv"));
    assert_eq!(hist.len(), 3);
}

#[test]
fn lambda_without_regularizer_is_a_usage_error_and_divergence_exits_1() {
    let tmp = workspace(20, json!({}));
    let d = tmp.path();
    ok(
        d,
        &[
            "train",
            "--data",
            "orig_train.jsonl",
            "--epochs",
            "1",
            "--embed-dim",
            "4",
            "--hidden-dim",
            "6",
            "--out",
            "base.json",
        ],
    );
    let out = ewcft(
        d,
        &[
            "finetune",
            "--checkpoint",
            "base.json",
            "--ft-train",
            "ft_train.jsonl",
            "--lambda",
            "2",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = ewcft(
        d,
        &[
            "train",
            "--data",
            "orig_train.jsonl",
            "--epochs",
            "2",
            "--lr",
            "1e300",
            "--out",
            "boom.json",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    assert!(!d.join("boom.json").exists());
}

#[test]
fn sweep_writes_one_cv_row_per_setting_and_pareto_reads_it() {
    let tmp = workspace(40, json!({"grid": {"epochs_max": 2, "k_folds": 2}}));
    let d = tmp.path();
    let (stdout, _) = ok(d, &["sweep", "--manifest", "manifest.json", "--regularizer", "ewc"]);
    assert!(stdout.contains("selected lr="), "{stdout}");
    let table = read_csv(&find(&d.join("runs"), "cv_table.csv"));
    assert_eq!(table.len(), 30);
    let ewc_points = find(&d.join("runs"), "sweep_points.csv");
    assert_eq!(read_csv(&ewc_points).len(), 30);
    fs::copy(&ewc_points, d.join("ewc_points.csv")).unwrap();

    ok(d, &["sweep", "--manifest", "manifest.json", "--regularizer", "none"]);
    let ft_dir = fs::read_dir(d.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.join("sweep_points.csv").exists() && p.join("sweep_points.csv") != ewc_points)
        .unwrap();
    assert_eq!(read_csv(&ft_dir.join("cv_table.csv")).len(), 3);
    let ft = ft_dir.join("sweep_points.csv");
    let (stdout, _) = ok(d, &["pareto", "--ewc", "ewc_points.csv", "--ft", ft.to_str().unwrap()]);
    assert!(stdout.contains("dominance="), "{stdout}");

    // rerunning reuses every artifact
    let before = fs::read(&ewc_points).unwrap();
    let (_, stderr) = ok(d, &["sweep", "--manifest", "manifest.json", "--regularizer", "ewc"]);
    assert!(stderr.contains("reusing"), "{stderr}");
    assert_eq!(fs::read(&ewc_points).unwrap(), before);
}

#[test]
fn pareto_on_crafted_points() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let header = "condition,learning_rate,lambda,epochs,original_acc,ft_acc\n";
    fs::write(
        d.join("ewc.csv"),
        format!("{header}ft_ewc,0.001,1,2,0.9,0.8\nft_ewc,0.001,2,2,0.8,0.9\n"),
    )
    .unwrap();
    fs::write(
        d.join("ft.csv"),
        format!("{header}ft,0.001,0,2,0.7,0.85\nft,0.002,0,2,0.85,0.7\n"),
    )
    .unwrap();
    let (stdout, _) = ok(d, &["--out-root", "r", "pareto", "--ewc", "ewc.csv", "--ft", "ft.csv"]);
    assert!(stdout.contains("dominance=true"), "{stdout}");
    let (stdout, _) = ok(d, &["--out-root", "r", "pareto", "--ewc", "ft.csv", "--ft", "ewc.csv"]);
    assert!(stdout.contains("dominance=false"), "{stdout}");
}

#[test]
fn ablate_defaults_to_the_standard_sizes() {
    let tmp = workspace(
        500,
        json!({"finetune": {"epochs": 1, "learning_rate": 0.003, "batch_size": 64}}),
    );
    let d = tmp.path();
    ok(d, &["ablate", "--manifest", "manifest.json"]);
    let rows = read_csv(&find(&d.join("runs"), "ablation_plot.csv"));
    let mut sizes: Vec<String> = rows.iter().map(|r| r[0].clone()).collect();
    sizes.dedup();
    assert_eq!(
        sizes,
        ["25", "50", "75", "100", "250", "400", "500", "600", "700", "800", "900", "1000"]
    );
    assert_eq!(
        ewcft(d, &["ablate", "--manifest", "manifest.json", "--sizes", "50,20"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn report_writes_tables_resumes_and_rejects_tampered_artifacts() {
    let tmp = workspace(40, json!({}));
    let d = tmp.path();
    let (stdout, _) = ok(d, &["report", "--manifest", "manifest.json"]);
    assert!(stdout.contains("ft_ewc"), "{stdout}");
    let results = find(&d.join("runs"), "results.csv");
    let summary = find(&d.join("runs"), "summary.json");
    assert!(summary.exists());
    let rows = read_csv(&results);
    assert_eq!(rows.len(), 5 * 2, "five conditions, two seeds");
    let before = fs::read(&results).unwrap();

    let (_, stderr) = ok(d, &["report", "--manifest", "manifest.json"]);
    assert!(stderr.contains("reusing"), "{stderr}");
    assert_eq!(fs::read(&results).unwrap(), before);

    let artifact = results.parent().unwrap().join("runs/ft/seed-2.json");
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&artifact).unwrap()).unwrap();
    v["config_hash"] = json!("0000000000000000");
    fs::write(&artifact, v.to_string()).unwrap();
    assert_eq!(
        ewcft(d, &["report", "--manifest", "manifest.json"]).status.code(),
        Some(1)
    );
}
