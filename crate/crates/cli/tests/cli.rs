//! End-to-end tests of the `esmlab` binary: exit codes, artifact layout,
//! determinism, and resume semantics. A small denoiser checkpoint is trained
//! once and shared across tests.

use esmlab_core::checkpoint::{load_denoiser, save_denoiser};
use esmlab_core::dataset::LabeledDataset;
use esmlab_core::denoiser::{train_denoiser, DenoiserConfig, DenoiserModel, TrainConfig};
use esmlab_core::schedule::ScheduleParams;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: PathBuf,
}

/// A small shapes-model checkpoint (side 8), trained once per test process.
fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let dataset = LabeledDataset::<f32>::shapes(16, 8, 0);
        let params = ScheduleParams::default();
        let sched = params.build().unwrap();
        let cfg = DenoiserConfig {
            side: 8,
            num_classes: 3,
            hidden_width: 48,
            hidden_layers: 2,
            time_embed_dim: 16,
            class_embed_dim: 8,
        };
        let mut model = DenoiserModel::<f32>::init(cfg, 0).unwrap();
        train_denoiser(
            &mut model,
            &dataset,
            &sched,
            TrainConfig {
                steps: 300,
                batch_size: 16,
                ..Default::default()
            },
        )
        .unwrap();
        let ckpt = dir.path().join("denoiser.ckpt");
        save_denoiser(&ckpt, &model, params).unwrap();
        Fixture { _dir: dir, ckpt }
    })
}

fn esmlab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esmlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_json(dir: &Path, name: &str, value: serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn shapes_dataset() -> serde_json::Value {
    json!({"kind": "shapes", "n_per_class": 16, "side": 8, "seed": 0})
}

fn distill_config(fix: &Fixture, overrides: serde_json::Value) -> serde_json::Value {
    let mut cfg = json!({
        "schema_version": 1,
        "run_name": "d",
        "checkpoint": fix.ckpt.to_str().unwrap(),
        "dataset": shapes_dataset(),
        "distill": {
            "loss": "ism",
            "iterations": 5,
            "delta_s": 40,
            "delta_t": 20,
            "t_max": 300,
            "seed": 1
        },
        "scene": {"n_splats": 6, "init": "random"}
    });
    merge(&mut cfg, overrides);
    cfg
}

/// Shallow-ish merge: objects merge per key, everything else replaces.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

#[test]
fn help_version_and_parse_errors_use_the_documented_exit_codes() {
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_esmlab"))
            .args(args)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["distill", "--bogus-flag"])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&[])), 1);
}

#[test]
fn missing_config_exits_one_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out_root = tmp.path().join("outs");
    let got = esmlab(&out_root, &["distill", "no-such-config.json"]);
    assert_eq!(code(&got), 1, "{}", stderr(&got));
    assert!(!out_root.exists(), "config errors must not create run dirs");
}

#[test]
fn unknown_config_key_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(
        tmp.path(),
        "bad.json",
        json!({
            "schema_version": 1,
            "dataset": shapes_dataset(),
            "mystery_knob": 7
        }),
    );
    let out_root = tmp.path().join("outs");
    let got = esmlab(&out_root, &["train-denoiser", cfg.to_str().unwrap()]);
    assert_eq!(code(&got), 1);
    assert!(stderr(&got).contains("mystery_knob"), "{}", stderr(&got));
    assert!(!out_root.exists());
}

#[test]
fn missing_checkpoint_exits_one_before_creating_the_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = fixture();
    let mut cfg = distill_config(fix, json!({}));
    merge(&mut cfg, json!({"checkpoint": "definitely-not-here.ckpt"}));
    let path = write_json(tmp.path(), "d.json", cfg);
    let out_root = tmp.path().join("outs");
    let got = esmlab(&out_root, &["distill", path.to_str().unwrap()]);
    assert_eq!(code(&got), 1, "{}", stderr(&got));
    assert!(!out_root.exists());
}

#[test]
fn numeric_blowup_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = fixture();
    // Guidance of 1e300 is finite (so it passes validation) but overflows
    // the gradient immediately.
    let cfg = distill_config(fix, json!({"distill": {"guidance": 1e300}}));
    let path = write_json(tmp.path(), "d.json", cfg);
    let got = esmlab(&tmp.path().join("outs"), &["distill", path.to_str().unwrap()]);
    assert_eq!(code(&got), 2, "{}", stderr(&got));
    assert!(stderr(&got).contains("numeric"), "{}", stderr(&got));
}

#[test]
fn config_files_are_never_mutated() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = fixture();
    let path = write_json(tmp.path(), "d.json", distill_config(fix, json!({})));
    let before = std::fs::read(&path).unwrap();
    let got = esmlab(&tmp.path().join("outs"), &["distill", path.to_str().unwrap()]);
    assert_eq!(code(&got), 0, "{}", stderr(&got));
    assert_eq!(std::fs::read(&path).unwrap(), before);
}

#[test]
fn replayed_runs_produce_byte_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = fixture();
    let path = write_json(tmp.path(), "d.json", distill_config(fix, json!({})));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&esmlab(&a, &["distill", path.to_str().unwrap()])), 0);
    assert_eq!(code(&esmlab(&b, &["distill", path.to_str().unwrap()])), 0);
    let read = |root: &Path, f: &str| std::fs::read(root.join("d").join(f)).unwrap();
    assert_eq!(read(&a, "iters.csv"), read(&b, "iters.csv"));
    assert_eq!(read(&a, "render_final.png"), read(&b, "render_final.png"));
    assert_eq!(read(&a, "scene_final.ckpt"), read(&b, "scene_final.ckpt"));
}

#[test]
fn train_denoiser_is_deterministic_and_reduces_the_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(
        tmp.path(),
        "t.json",
        json!({
            "schema_version": 1,
            "run_name": "t",
            "dataset": shapes_dataset(),
            "model": {"hidden_width": 32, "hidden_layers": 1, "time_embed_dim": 8, "class_embed_dim": 4},
            "train": {"steps": 150, "batch_size": 16}
        }),
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&esmlab(&a, &["train-denoiser", cfg.to_str().unwrap()])), 0);
    assert_eq!(code(&esmlab(&b, &["train-denoiser", cfg.to_str().unwrap()])), 0);
    let ckpt_a = std::fs::read(a.join("t/denoiser.ckpt")).unwrap();
    let ckpt_b = std::fs::read(b.join("t/denoiser.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("t/summary.json")).unwrap()).unwrap();
    let initial = summary["initial_loss"].as_f64().unwrap();
    let final_ = summary["final_loss"].as_f64().unwrap();
    assert!(final_ < initial, "loss {initial} -> {final_}");

    // The checkpoint reloads into a model of the configured shape.
    let (model, params) = load_denoiser(&a.join("t/denoiser.ckpt")).unwrap();
    assert_eq!(model.config().side, 8);
    assert_eq!(model.config().hidden_width, 32);
    assert_eq!(params.t_max, 1000);

    let loss_csv = std::fs::read_to_string(a.join("t/loss.csv")).unwrap();
    assert_eq!(loss_csv.lines().count(), 151, "header + one row per step");
    assert!(loss_csv.starts_with("step,loss\n"));
}

#[test]
fn roundtrip_reports_coupled_inversion_far_below_naive() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = fixture();
    let cfg = write_json(
        tmp.path(),
        "r.json",
        json!({
            "schema_version": 1,
            "run_name": "r",
            "checkpoint": fix.ckpt.to_str().unwrap(),
            "states": 4,
            "delta_grid": [25, 50]
        }),
    );
    let out_root = tmp.path().join("outs");
    let got = esmlab(&out_root, &["roundtrip", cfg.to_str().unwrap()]);
    assert_eq!(code(&got), 0, "{}", stderr(&got));

    let csv = std::fs::read_to_string(out_root.join("r/roundtrip.csv")).unwrap();
    assert!(csv.starts_with("state,s,delta,t,naive_err,coupled_err\n"));
    assert_eq!(csv.lines().count(), 1 + 4 * 2);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_root.join("r/summary.json")).unwrap())
            .unwrap();
    for per in summary["per_delta"].as_array().unwrap() {
        let naive = per["median_naive"].as_f64().unwrap();
        let coupled = per["median_coupled"].as_f64().unwrap();
        assert!(
            coupled < naive / 100.0,
            "delta {}: coupled {coupled} vs naive {naive}",
            per["delta"]
        );
    }
}

#[test]
fn singleton_sweep_reduces_to_the_distill_command() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = fixture();
    let mut d = distill_config(fix, json!({}));
    merge(&mut d, json!({"distill": {"seed": 7}}));
    let d_path = write_json(tmp.path(), "d.json", d);
    let s_path = write_json(
        tmp.path(),
        "s.json",
        json!({
            "schema_version": 1,
            "run_name": "s",
            "checkpoint": fix.ckpt.to_str().unwrap(),
            "dataset": shapes_dataset(),
            "base": {
                "loss": "ism",
                "iterations": 5,
                "delta_s": 40,
                "delta_t": 20,
                "t_max": 300
            },
            "scene": {"n_splats": 6, "init": "random"},
            "parameter": "rho",
            "values": [0.93],
            "seeds": [7]
        }),
    );
    let out_root = tmp.path().join("outs");
    assert_eq!(code(&esmlab(&out_root, &["distill", d_path.to_str().unwrap()])), 0);
    assert_eq!(code(&esmlab(&out_root, &["sweep", s_path.to_str().unwrap()])), 0);
    let direct = std::fs::read(out_root.join("d/iters.csv")).unwrap();
    let swept = std::fs::read(out_root.join("s/runs/rho_0.93_seed_7/iters.csv")).unwrap();
    assert_eq!(direct, swept);
}

#[test]
fn resumed_run_continues_the_iteration_numbering() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = fixture();
    let cfg = distill_config(
        fix,
        json!({
            "run_name": "res",
            "distill": {"loss": "esm", "iterations": 8, "rho": 0.9},
            "snapshot_every": 4
        }),
    );
    let path = write_json(tmp.path(), "res.json", cfg);
    let out_root = tmp.path().join("outs");
    let got = esmlab(&out_root, &["distill", path.to_str().unwrap()]);
    assert_eq!(code(&got), 0, "{}", stderr(&got));
    let snapshot = out_root.join("res/snapshots/scene_000004.ckpt");
    assert!(snapshot.exists());
    assert!(out_root.join("res/snapshots/adapter_000004.ckpt").exists());

    let got = esmlab(
        &out_root,
        &[
            "distill",
            path.to_str().unwrap(),
            "--resume",
            snapshot.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&got), 0, "{}", stderr(&got));

    let full = std::fs::read_to_string(out_root.join("res/iters.csv")).unwrap();
    let tail = std::fs::read_to_string(out_root.join("res-from-4/iters.csv")).unwrap();
    let tail_rows: Vec<&str> = tail.lines().skip(1).collect();
    assert_eq!(tail_rows.len(), 4, "iterations 4..8");
    for (row, expect) in tail_rows.iter().zip(4..) {
        assert!(row.starts_with(&format!("{expect},")), "row {row}");
    }
    // The resumed run replays the same (t, s) draws the unbroken run saw.
    let pick = |csv: &str, iter: usize| -> (String, String) {
        let row = csv
            .lines()
            .skip(1)
            .find(|l| l.starts_with(&format!("{iter},")))
            .unwrap()
            .to_string();
        let mut parts = row.split(',').map(str::to_string);
        let _ = parts.next();
        (parts.next().unwrap(), parts.next().unwrap())
    };
    assert_eq!(pick(&full, 5), pick(&tail, 5));

    // Resuming past the configured total is a config error.
    let done = out_root.join("res/snapshots/scene_000008.ckpt");
    assert!(done.exists());
    let got = esmlab(
        &out_root,
        &[
            "distill",
            path.to_str().unwrap(),
            "--resume",
            done.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&got), 1, "{}", stderr(&got));
    assert!(stderr(&got).contains("nothing to resume"), "{}", stderr(&got));
}

#[test]
fn sweep_records_divergence_but_keeps_going() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = fixture();
    let cfg = write_json(
        tmp.path(),
        "s.json",
        json!({
            "schema_version": 1,
            "run_name": "sdiv",
            "checkpoint": fix.ckpt.to_str().unwrap(),
            "dataset": shapes_dataset(),
            "base": {
                "loss": "ism",
                "iterations": 3,
                "delta_s": 40,
                "delta_t": 20,
                "t_max": 300,
                "guidance": 1e300
            },
            "scene": {"n_splats": 6},
            "parameter": "rho",
            "values": [0.5, 0.9],
            "seeds": [0]
        }),
    );
    let out_root = tmp.path().join("outs");
    let got = esmlab(&out_root, &["sweep", cfg.to_str().unwrap()]);
    assert_eq!(code(&got), 0, "diverged runs are data, not failures: {}", stderr(&got));
    let summary = std::fs::read_to_string(out_root.join("sdiv/summary.csv")).unwrap();
    let diverged = summary.lines().skip(1).filter(|l| l.contains(",true,")).count();
    assert_eq!(diverged, 2, "{summary}");
    assert!(summary.contains("NaN"), "{summary}");
    assert!(out_root.join("sdiv/contact_sheet.png").exists());
}

#[test]
fn out_env_var_sets_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let fix = fixture();
    let path = write_json(tmp.path(), "d.json", distill_config(fix, json!({})));
    let env_root = tmp.path().join("from-env");
    let got = Command::new(env!("CARGO_BIN_EXE_esmlab"))
        .args(["distill", path.to_str().unwrap()])
        .env("ESMLAB_OUT", &env_root)
        .output()
        .unwrap();
    assert_eq!(code(&got), 0, "{}", stderr(&got));
    assert!(env_root.join("d/iters.csv").exists());
}
