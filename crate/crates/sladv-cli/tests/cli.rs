//! End-to-end tests of the `sladv` binary: artifact layout, determinism,
//! and the exit-code contract, all on a micro-scale config.

use sladv_core::attack::AttackConfig;
use sladv_core::checkpoint::{load_layers, load_tensor_bundle};
use sladv_core::data::{AttackerSource, Family, Scheme, SynthSpec};
use sladv_core::experiment::{
    build_model, ExperimentConfig, LayerSpec, ShadowSpec, TaskSpec, TrainingSpec,
};
use sladv_core::layer::Layer;
use sladv_core::split::SplitPlan;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn micro_config(seed: u64, alpha: Option<f64>) -> ExperimentConfig {
    let synth = |per_class: usize, generator: Family| SynthSpec {
        classes: 4,
        size: 8,
        samples_per_class: per_class,
        generator,
    };
    ExperimentConfig {
        seed,
        task: TaskSpec::Synth {
            train: synth(20, Family::Bars),
            test: synth(8, Family::Bars),
        },
        model: vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: 192,
                out_features: 4,
            },
        ],
        plan: SplitPlan::new(1, 2, 1),
        training: TrainingSpec {
            t_rounds: 60,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 8,
            n_clients: 2,
            scheme: Scheme::Iid,
        },
        shadow: alpha.map(|alpha| ShadowSpec {
            alpha,
            arch: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
            ],
            shadow_lr: 0.1,
            attacker: AttackerSource::Shifted {
                spec: synth(8, Family::Blobs),
                size: None,
            },
        }),
        attack: AttackConfig {
            epsilon: 0.3,
            beta: 5.0,
            k: 1,
            input_range: (0.0, 1.0),
        },
        probes: true,
    }
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn sladv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sladv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = sladv(args);
    assert!(
        out.status.success(),
        "expected success for {args:?}; stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_err(args: &[&str], expected_code: i32) -> String {
    let out = sladv(args);
    assert_eq!(
        out.status.code(),
        Some(expected_code),
        "args {args:?}; stdout: {} stderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn report_value(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = write_config(tmp.path(), "cfg.json", &micro_config(5, Some(1.0)));
    let out_dir = tmp.path().join("run");
    let cfg = cfg_path.to_str().unwrap();
    let out = out_dir.to_str().unwrap();

    let stdout = run_ok(&["train", "--config", cfg, "--out", out]);
    assert!(stdout.contains("trained 60 rounds"), "stdout: {stdout}");
    for name in ["theta1", "theta2", "theta3", "shadow"] {
        assert!(
            out_dir.join("checkpoints").join(format!("{name}.slnn")).is_file(),
            "missing checkpoint {name}"
        );
    }
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("# schema: sladv-metrics-v1"));
    assert_eq!(lines.next(), Some("round,task_loss,l_sim"));
    assert_eq!(lines.count(), 60);
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(echo["seed"], 5);

    run_ok(&["attack", "--config", cfg, "--out", out]);
    let report = report_value(&out_dir);
    let clean = report["clean_accuracy"].as_f64().unwrap();
    let adv = report["adversarial_accuracy"].as_f64().unwrap();
    let drop = report["accuracy_drop"].as_f64().unwrap();
    assert!((drop - (clean - adv)).abs() < 1e-9);
    assert_eq!(report["sim_history"].as_array().unwrap().len(), 60);
    assert!(!report["probes"].is_null(), "config enables probes");
    assert!(report["timing"]["wall_clock_seconds"].as_f64().unwrap() > 0.0);

    let bundle = load_tensor_bundle(&out_dir.join("adv").join("test_batch.slnn")).unwrap();
    let names: Vec<&str> = bundle.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["clean", "delta", "x_adv"]);
    let delta = &bundle[1].1;
    assert!(delta.max_abs() <= 0.3 + 1e-12);
    let x_adv = &bundle[2].1;
    assert!(x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

    run_ok(&["probe", "--config", cfg, "--out", out]);
    let probes: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("probe_report.json")).unwrap())
            .unwrap();
    for key in ["d_hat", "alignment_cos", "sign_fraction", "transfer_cos"] {
        assert!(probes[key].as_f64().unwrap().is_finite(), "probe field {key}");
    }

    let summary = run_ok(&["report", "--out", out]);
    assert!(summary.contains("drop"), "summary: {summary}");
    assert!(summary.contains("60 rounds"), "summary: {summary}");
}

fn scrubbed_report(dir: &Path) -> String {
    let mut v = report_value(dir);
    v.as_object_mut().unwrap().remove("timing");
    v.to_string()
}

#[test]
fn reruns_are_byte_identical_modulo_timing() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = micro_config(11, Some(1.0));
    cfg.training.t_rounds = 30;
    let cfg_path = write_config(tmp.path(), "cfg.json", &cfg);
    let cfg_arg = cfg_path.to_str().unwrap();
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];

    for dir in &dirs {
        let out = dir.to_str().unwrap();
        run_ok(&["train", "--config", cfg_arg, "--out", out]);
        run_ok(&["attack", "--config", cfg_arg, "--out", out]);
    }

    for rel in [
        "metrics.csv",
        "config.json",
        "checkpoints/theta1.slnn",
        "checkpoints/theta2.slnn",
        "checkpoints/theta3.slnn",
        "checkpoints/shadow.slnn",
        "adv/test_batch.slnn",
    ] {
        let a = std::fs::read(dirs[0].join(rel)).unwrap();
        let b = std::fs::read(dirs[1].join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
    assert_eq!(
        scrubbed_report(&dirs[0]),
        scrubbed_report(&dirs[1]),
        "reports differ beyond the timing field"
    );
}

#[test]
fn alpha_zero_checkpoints_match_an_honest_run() {
    let tmp = TempDir::new().unwrap();
    let mut disabled = micro_config(7, Some(0.0));
    disabled.training.t_rounds = 40;
    let mut honest = micro_config(7, None);
    honest.training.t_rounds = 40;
    let disabled_path = write_config(tmp.path(), "disabled.json", &disabled);
    let honest_path = write_config(tmp.path(), "honest.json", &honest);
    let d_dir = tmp.path().join("disabled");
    let h_dir = tmp.path().join("honest");

    run_ok(&["train", "--config", disabled_path.to_str().unwrap(), "--out", d_dir.to_str().unwrap()]);
    run_ok(&["train", "--config", honest_path.to_str().unwrap(), "--out", h_dir.to_str().unwrap()]);

    for name in ["theta1", "theta2", "theta3"] {
        let rel = format!("checkpoints/{name}.slnn");
        let a = std::fs::read(d_dir.join(&rel)).unwrap();
        let b = std::fs::read(h_dir.join(&rel)).unwrap();
        assert_eq!(a, b, "{name} differs between alpha=0 and honest runs");
    }
    assert!(d_dir.join("checkpoints/shadow.slnn").is_file());
    assert!(!h_dir.join("checkpoints/shadow.slnn").exists());
}

#[test]
fn zero_rounds_writes_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = micro_config(3, Some(1.0));
    cfg.training.t_rounds = 0;
    let cfg_path = write_config(tmp.path(), "cfg.json", &cfg);
    let out_dir = tmp.path().join("run");

    let stdout = run_ok(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("trained 0 rounds"), "stdout: {stdout}");

    let expected = build_model(&cfg.model, vec![1, 8, 8], cfg.seed).unwrap();
    let mut loaded: Vec<Layer> = Vec::new();
    for name in ["theta1", "theta2", "theta3"] {
        loaded.extend(load_layers(&out_dir.join("checkpoints").join(format!("{name}.slnn"))).unwrap());
    }
    let want = expected.params();
    let got_net = loaded;
    let got: Vec<&sladv_core::tensor::Tensor> =
        got_net.iter().flat_map(|l| l.params()).collect();
    assert_eq!(want.len(), got.len());
    for (a, b) in want.iter().zip(&got) {
        assert_eq!(a.shape(), b.shape());
        for (va, vb) in a.data().iter().zip(b.data()) {
            assert_eq!(va.to_bits(), vb.to_bits());
        }
    }
}

#[test]
fn zero_epsilon_reports_exactly_zero_drop() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = micro_config(9, Some(1.0));
    cfg.training.t_rounds = 40;
    cfg.attack.epsilon = 0.0;
    let cfg_path = write_config(tmp.path(), "cfg.json", &cfg);
    let out_dir = tmp.path().join("run");
    let args = [cfg_path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];

    run_ok(&["train", "--config", args[0], args[1], args[2]]);
    run_ok(&["attack", "--config", args[0], args[1], args[2]]);
    let report = report_value(&out_dir);
    assert_eq!(report["accuracy_drop"].as_f64().unwrap(), 0.0);
    assert_eq!(
        report["clean_accuracy"].as_f64().unwrap(),
        report["adversarial_accuracy"].as_f64().unwrap()
    );
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = micro_config(3, Some(1.0));
    cfg.training.t_rounds = 5;
    let cfg_path = write_config(tmp.path(), "cfg.json", &cfg);
    let out_dir = tmp.path().join("run");

    run_ok(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "99",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(echo["seed"], 99);
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("run");
    let out = out_dir.to_str().unwrap();

    // 2: malformed config JSON.
    let broken = tmp.path().join("broken.json");
    std::fs::write(&broken, "{ not json").unwrap();
    let stderr = run_err(&["train", "--config", broken.to_str().unwrap(), "--out", out], 2);
    assert!(stderr.contains("broken.json"), "stderr: {stderr}");

    // 2: well-formed config that fails validation, naming the field.
    let mut invalid = micro_config(1, Some(1.0));
    invalid.training.lr = 0.0;
    let invalid_path = write_config(tmp.path(), "invalid.json", &invalid);
    let stderr = run_err(&["train", "--config", invalid_path.to_str().unwrap(), "--out", out], 2);
    assert!(stderr.contains("training.lr"), "stderr: {stderr}");

    // 3: config path does not exist.
    run_err(&["train", "--config", "/no/such/config.json", "--out", out], 3);

    // 4: attack before train.
    let valid = write_config(tmp.path(), "valid.json", &micro_config(1, Some(1.0)));
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let stderr = run_err(
        &["attack", "--config", valid.to_str().unwrap(), "--out", empty.to_str().unwrap()],
        4,
    );
    assert!(stderr.contains("missing artifact"), "stderr: {stderr}");
    run_err(
        &["probe", "--config", valid.to_str().unwrap(), "--out", empty.to_str().unwrap()],
        4,
    );

    // 2: attacking an honest config is a config error, not a missing file.
    let honest = write_config(tmp.path(), "honest.json", &micro_config(1, None));
    let stderr = run_err(
        &["attack", "--config", honest.to_str().unwrap(), "--out", empty.to_str().unwrap()],
        2,
    );
    assert!(stderr.contains("shadow"), "stderr: {stderr}");

    // 2: neither --config nor --preset.
    let stderr = run_err(&["train", "--out", out], 2);
    assert!(stderr.contains("--config") || stderr.contains("--preset"), "stderr: {stderr}");

    // 2: both at once (rejected by argument parsing).
    run_err(
        &["train", "--config", valid.to_str().unwrap(), "--preset", "desk", "--out", out],
        2,
    );

    // 2: unknown preset, listing the shipped ones.
    let stderr = run_err(&["train", "--preset", "warehouse", "--out", out], 2);
    assert!(stderr.contains("desk"), "stderr: {stderr}");

    // 4: report on a directory with no artifacts at all.
    run_err(&["report", "--out", empty.to_str().unwrap()], 4);
}

/// The shipped presets must parse and validate; attacking an untrained
/// directory stops at the missing-checkpoint check, which proves the config
/// itself was accepted without paying for a desk-scale training run.
#[test]
fn shipped_presets_validate() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    for preset in ["desk", "paper-desk"] {
        run_err(&["attack", "--preset", preset, "--out", empty.to_str().unwrap()], 4);
    }
}
