use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use layershap::experiment::{ExperimentConfig, RunSummary, CHECKPOINT_FILE};
use layershap::model::{init, load_checkpoint, save_checkpoint, AblationMask, ModelConfig};
use layershap::tasks::{evaluate, TaskKind, TaskSpec};
use serde_json::json;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layershap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, task: &str, n_blocks: usize) -> PathBuf {
    let path = dir.join(format!("{task}-{n_blocks}.json"));
    let cfg = json!({
        "label": format!("tiny-L{n_blocks}"),
        "model": {"d_model": 8, "n_blocks": n_blocks, "n_heads": 2, "d_ff": 16, "max_seq_len": 8},
        "task": {"kind": task, "seq_len": 8, "n_train": 400, "n_eval": 200},
        "training": {"steps": 40, "batch_size": 16},
        "shapley": {"max_removed": (2 * n_blocks - 1).min(2)}
    });
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn oracle_calls(o: &Output) -> usize {
    let err = stderr(o);
    let line = err
        .lines()
        .find_map(|l| l.strip_prefix("oracle evaluations: "))
        .unwrap_or_else(|| panic!("no call count in {err}"));
    line.trim().parse().unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn train_shapley_ablate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "majority_token", 2);
    let out = tmp.path().join("run");

    let o = bin(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = fs::read(out.join(CHECKPOINT_FILE)).unwrap();
    let again = tmp.path().join("run-again");
    assert!(bin(&["train", "--config", s(&cfg), "--out", s(&again)])
        .status
        .success());
    assert_eq!(ckpt, fs::read(again.join(CHECKPOINT_FILE)).unwrap());
    assert_eq!(
        fs::read(out.join("train_log.csv")).unwrap(),
        fs::read(again.join("train_log.csv")).unwrap()
    );

    // The logged accuracy is reproduced by re-evaluating the checkpoint.
    let resolved: ExperimentConfig =
        serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved.output_dir, out);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("train_summary.json")).unwrap()).unwrap();
    let params = load_checkpoint(&out.join(CHECKPOINT_FILE)).unwrap();
    let eval = evaluate(&params, &resolved.task, &AblationMask::full(4)).unwrap();
    assert_eq!(summary["eval_accuracy"].as_f64().unwrap(), eval.accuracy);

    let o = bin(&["shapley", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    // Exact needs all 16 coalitions; the estimate and sweep reuse them.
    assert_eq!(oracle_calls(&o), 16);
    let first = snapshot(&out);
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    for f in [
        "ablation.csv",
        "cache.csv",
        "shapley.csv",
        "shapley_estimate.csv",
        "shapley_exact.csv",
        "summary.json",
    ] {
        assert!(names.contains(&f), "missing {f}");
    }
    let run: RunSummary =
        serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert!(run.rank_agreement.is_some());
    assert_eq!(
        run.top_k.iter().map(|t| t.k).collect::<Vec<_>>(),
        vec![3, 4]
    );
    assert_eq!(run.config, resolved);

    let o = bin(&["shapley", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success());
    assert_eq!(oracle_calls(&o), 0, "warm cache");
    assert_eq!(snapshot(&out), first, "warm rerun is byte-identical");

    let o = bin(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        oracle_calls(&o),
        0,
        "leave-one-out coalitions come from the shared cache"
    );
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 1 + 4);
    assert!(rows[1].starts_with("baseline,"));
    let order: Vec<&str> = rows[2..]
        .iter()
        .map(|r| r.split(',').next().unwrap())
        .collect();
    assert_eq!(order, ["Attn 0", "FFN 0", "Attn 1", "FFN 1"]);
}

#[test]
fn estimate_on_32_players_evaluates_the_window_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("deep");
    fs::create_dir_all(&out).unwrap();
    let model = ModelConfig {
        d_model: 8,
        n_blocks: 16,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        ..ModelConfig::default()
    };
    save_checkpoint(&init(&model).unwrap(), &out.join(CHECKPOINT_FILE)).unwrap();
    let cfg = ExperimentConfig {
        model,
        task: TaskSpec {
            kind: TaskKind::MajorityToken,
            seq_len: 8,
            n_eval: 50,
            ..TaskSpec::default()
        },
        ..ExperimentConfig::default()
    };
    let path = tmp.path().join("deep.json");
    fs::write(&path, cfg.to_json()).unwrap();

    let o = bin(&["shapley", "--config", s(&path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    // 122 windows plus the full model; leave-one-out sets are windows.
    assert_eq!(oracle_calls(&o), 123);
    let run: RunSummary =
        serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    let sampling = run.sampling.unwrap();
    assert_eq!(sampling.plan_size, 122);
    assert_eq!(sampling.closed_form_sample_count, 120);
    assert!(run.exact.is_none(), "32 players exceed the exact cap");
    assert!(run.rank_agreement.is_none());
}

#[test]
fn exact_mode_over_cap_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cap.json");
    let cfg = json!({"model": {"n_blocks": 3}, "shapley": {"mode": "exact", "exact_cap": 4}});
    fs::write(&path, cfg.to_string()).unwrap();
    let out = tmp.path().join("run");
    fs::create_dir_all(&out).unwrap();
    save_checkpoint(
        &init(&ModelConfig::default()).unwrap(),
        &out.join(CHECKPOINT_FILE),
    )
    .unwrap();
    let o = bin(&["shapley", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("window estimation"), "{}", stderr(&o));
}

#[test]
fn invalid_config_reports_line_and_column() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    fs::write(
        &path,
        "{\n  \"model\": {\n    \"d_model\": \"wide\"\n  }\n}\n",
    )
    .unwrap();
    let o = bin(&[
        "train",
        "--config",
        s(&path),
        "--out",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    fs::write(&path, "{\"model\": {\"d_model\": 30, \"n_heads\": 4}}").unwrap();
    let o = bin(&["train", "--config", s(&path)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = bin(&["ablate", "--oracle", "carrier-pigeon"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["ablate", "--out", s(&tmp.path().join("empty"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("checkpoint.json"));
}

#[test]
fn constant_external_evaluator_has_no_attribution() {
    let tmp = tempfile::tempdir().unwrap();
    let script = tmp.path().join("const.sh");
    fs::write(
        &script,
        "while IFS= read -r line; do\n\
         id=$(printf '%s' \"$line\" | sed 's/^{\"id\":\\([0-9]*\\),.*/\\1/')\n\
         printf '{\"id\":%s,\"result\":{\"value\":0.5,\"n_examples\":9}}\\n' \"$id\"\n\
         done\n",
    )
    .unwrap();
    let cfg = small_config(tmp.path(), "majority_token", 2);
    let oracle = format!("external:exec:sh {}", script.display());
    let out = tmp.path().join("ext");
    let o = bin(&[
        "shapley",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--oracle",
        &oracle,
    ]);
    // Every Shapley value is zero, so shares are undefined.
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let resolved = fs::read_to_string(out.join("config.json")).unwrap();
    assert!(resolved.contains("external:exec:sh"));

    let bad = "external:exec:/nonexistent/evaluator";
    let o = bin(&[
        "ablate",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--oracle",
        bad,
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn report_merges_tasks_and_rejects_mixed_rosters() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for task in ["majority_token", "modular_sum", "induction_recall"] {
        let cfg = small_config(tmp.path(), task, 2);
        let out = tmp.path().join(task);
        assert!(bin(&["train", "--config", s(&cfg), "--out", s(&out)])
            .status
            .success());
        let o = bin(&["shapley", "--config", s(&cfg), "--out", s(&out)]);
        assert!(o.status.success(), "{task}: {}", stderr(&o));
        dirs.push(out);
    }
    let report_dir = tmp.path().join("report");
    let mut args = vec!["report".to_owned()];
    args.extend(dirs.iter().map(|d| s(d).to_owned()));
    args.extend(["--out".to_owned(), s(&report_dir).to_owned()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = bin(&argv);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = fs::read_to_string(report_dir.join("report.md")).unwrap();
    for task in ["majority_token", "modular_sum", "induction_recall"] {
        assert!(md.contains(&format!("| {task} |")), "{md}");
    }

    // The grouped means are averages of the per-run group means.
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(report_dir.join("report.json")).unwrap()).unwrap();
    let runs: Vec<RunSummary> = dirs
        .iter()
        .map(|d| serde_json::from_slice(&fs::read(d.join("summary.json")).unwrap()).unwrap())
        .collect();
    let other: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.groups.other_mean_drop)
        .collect();
    let want = other.iter().sum::<f64>() / other.len() as f64;
    let got = report["models"][0]["mean_groups"]["other_mean_drop"]
        .as_f64()
        .unwrap();
    assert!((got - want).abs() < 1e-15);
    let top3: f64 = runs.iter().map(|r| r.top_k[0].share).sum::<f64>() / 3.0;
    assert!(
        (report["models"][0]["mean_top_k"][0]["share"]
            .as_f64()
            .unwrap()
            - top3)
            .abs()
            < 1e-15
    );

    // A run with a different roster under the same label.
    let cfg = small_config(tmp.path(), "majority_token", 1);
    let mut text: serde_json::Value = serde_json::from_slice(&fs::read(&cfg).unwrap()).unwrap();
    text["label"] = json!("tiny-L2");
    text["analysis"] = json!({"top_k": [1]});
    fs::write(&cfg, text.to_string()).unwrap();
    let odd = tmp.path().join("odd");
    assert!(bin(&["train", "--config", s(&cfg), "--out", s(&odd)])
        .status
        .success());
    let o = bin(&["shapley", "--config", s(&cfg), "--out", s(&odd)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = bin(&["report", s(&dirs[0]), s(&odd), "--out", s(&report_dir)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains(s(&dirs[0])) && err.contains(s(&odd)), "{err}");
}
