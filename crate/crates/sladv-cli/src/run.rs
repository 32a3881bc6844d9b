//! Command implementations and artifact plumbing.

use crate::{ReportArgs, RunArgs};
use sladv_core::attack::{craft, evaluate_attack, proxy_layers};
use sladv_core::checkpoint::{load_layers, save_layers, save_tensor_bundle};
use sladv_core::data::partition;
use sladv_core::experiment::{
    partition_plan, preset, run_experiment, run_training, ExperimentConfig,
};
use sladv_core::network::Network;
use sladv_core::probes::run_probes;
use sladv_core::report::{write_metrics_csv, RunReport};
use sladv_core::split::SplitModel;
use sladv_core::{Error, Layer};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Grid for the `sweep` subcommand, mirroring the shape of the fusion-weight
/// ablation table.
const SWEEP_ALPHAS: [f64; 6] = [0.0, 0.01, 0.1, 1.0, 10.0, 100.0];

pub enum CliError {
    Core(Error),
    /// A required artifact is absent; `train` has not run in this directory.
    MissingArtifact(PathBuf),
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Config(_)) | CliError::Core(Error::Input(_)) => 2,
            CliError::Core(Error::Io(_)) | CliError::Core(Error::Format { .. }) => 3,
            CliError::Core(_) => 1,
            CliError::MissingArtifact(_) => 4,
            CliError::Usage(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::MissingArtifact(p) => {
                write!(f, "missing artifact {} (run `sladv train` first)", p.display())
            }
            CliError::Usage(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Paths inside one run directory.
struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn new(root: &Path) -> Self {
        RunDir {
            root: root.to_path_buf(),
        }
    }

    fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    fn probe_report(&self) -> PathBuf {
        self.root.join("probe_report.json")
    }

    fn sweep(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.slnn"))
    }

    fn adv(&self, name: &str) -> PathBuf {
        self.root.join("adv").join(format!("{name}.slnn"))
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => {
            let text = fs::read_to_string(path).map_err(Error::from)?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => preset(name, args.seed.unwrap_or(0))?,
        (None, None) => {
            return Err(CliError::Usage(
                "provide --config PATH or --preset NAME".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects --config with --preset"),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_config_echo(dir: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::internal(format!("config echo serialization failed: {e}")))?;
    fs::write(dir.config(), text + "\n").map_err(Error::from)?;
    Ok(())
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact(path))
    }
}

pub fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = RunDir::new(&args.out);

    let outcome = run_training(&cfg)?;
    let clean = outcome.clean_accuracy()?;

    fs::create_dir_all(dir.root.join("checkpoints")).map_err(Error::from)?;
    write_config_echo(&dir, &cfg)?;
    save_layers(&dir.checkpoint("theta1"), outcome.model.client.input_layers())?;
    save_layers(&dir.checkpoint("theta2"), outcome.model.server.layers())?;
    save_layers(&dir.checkpoint("theta3"), outcome.model.client.output_layers())?;
    if let Some((state, _)) = &outcome.shadow {
        save_layers(&dir.checkpoint("shadow"), state.layers())?;
    }
    let sims = outcome.sim_history();
    write_metrics_csv(
        &dir.metrics(),
        &outcome.loss_history,
        if sims.is_empty() { None } else { Some(sims) },
    )?;

    match (outcome.loss_history.first(), outcome.loss_history.last()) {
        (Some(first), Some(last)) => println!(
            "trained {} rounds: task loss {first:.4} -> {last:.4}, clean accuracy {clean:.1}%",
            outcome.loss_history.len()
        ),
        _ => println!("trained 0 rounds: checkpoints hold the initialization"),
    }
    println!("checkpoints -> {}", dir.root.join("checkpoints").display());
    println!("metrics -> {}", dir.metrics().display());
    Ok(())
}

/// Rebuilds the datasets, model, and proxy that a config plus its trained
/// checkpoints describe.
struct LoadedRun {
    cfg: ExperimentConfig,
    model: SplitModel,
    proxy: Vec<Layer>,
    shadow_layers: Vec<Layer>,
    test_set: sladv_core::data::Dataset,
    pool: sladv_core::data::Dataset,
}

fn load_run(args: &RunArgs, dir: &RunDir) -> Result<LoadedRun> {
    let cfg = load_config(args)?;
    if cfg.shadow.is_none() {
        return Err(Error::config(
            "shadow: this config trains an honest server; there is no proxy to attack or probe",
        )
        .into());
    }

    let theta1 = load_layers(&require(dir.checkpoint("theta1"))?)?;
    let theta2 = load_layers(&require(dir.checkpoint("theta2"))?)?;
    let theta3 = load_layers(&require(dir.checkpoint("theta3"))?)?;
    let shadow_layers = load_layers(&require(dir.checkpoint("shadow"))?)?;

    let (train_set, test_set) = sladv_core::experiment::load_task(&cfg)?;
    let (_, pool) = partition(&train_set, &partition_plan(&cfg))?;

    // Reassemble and re-split; Network::new re-checks shape composition
    // against the task's sample shape.
    let cuts = (theta1.len(), theta2.len());
    let mut layers = theta1;
    layers.extend(theta2);
    layers.extend(theta3);
    let net = Network::new(layers, train_set.sample_shape())?;
    let plan = sladv_core::split::SplitPlan::new(cuts.0, cuts.1, net.layers().len() - cuts.0 - cuts.1);
    let model = SplitModel::partition(net, &plan, cfg.training.lr, cfg.training.momentum)?;

    let proxy = proxy_layers(&shadow_layers, model.server.layers());
    Ok(LoadedRun {
        cfg,
        model,
        proxy,
        shadow_layers,
        test_set,
        pool,
    })
}

/// Reads the L_sim column back out of a metrics CSV, if the file exists.
fn read_sim_history(path: &Path) -> Vec<f64> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("round,"))
        .filter_map(|l| l.split(',').nth(2)?.parse::<f64>().ok())
        .collect()
}

pub fn cmd_attack(args: &RunArgs) -> Result<()> {
    let t0 = Instant::now();
    let dir = RunDir::new(&args.out);
    let run = load_run(args, &dir)?;

    let eval = evaluate_attack(
        &run.model,
        &run.test_set,
        &run.proxy,
        &run.cfg.attack,
        run.cfg.seed,
    )?;
    let probes = if run.cfg.probes {
        Some(run_probes(
            run.model.client.input_layers(),
            run.model.server.layers(),
            run.model.client.output_layers(),
            &run.shadow_layers,
            &run.test_set,
            &run.pool.images,
            &run.cfg.attack,
        )?)
    } else {
        None
    };
    let batch = craft(&run.proxy, &run.test_set.images, &run.cfg.attack)?;

    let echo = serde_json::to_value(&run.cfg)
        .map_err(|e| Error::internal(format!("config echo serialization failed: {e}")))?;
    let mut report = RunReport::new(
        run.cfg.seed,
        &eval,
        read_sim_history(&dir.metrics()),
        probes,
        echo,
    );
    report.timing.wall_clock_seconds = t0.elapsed().as_secs_f64();
    report.validate()?;

    fs::create_dir_all(dir.root.join("adv")).map_err(Error::from)?;
    report.write(&dir.report())?;
    save_tensor_bundle(
        &dir.adv("test_batch"),
        &[
            ("clean".into(), batch.clean.clone()),
            ("delta".into(), batch.delta.clone()),
            ("x_adv".into(), batch.x_adv()),
        ],
    )?;

    println!(
        "clean {:.1}%  adversarial {:.1}%  drop {:.1} points (random-noise drop {:.1})",
        eval.clean_accuracy, eval.adversarial_accuracy, eval.accuracy_drop, eval.random_noise_drop
    );
    println!("report -> {}", dir.report().display());
    println!("adversarial dumps -> {}", dir.adv("test_batch").display());
    Ok(())
}

pub fn cmd_probe(args: &RunArgs) -> Result<()> {
    let dir = RunDir::new(&args.out);
    let run = load_run(args, &dir)?;

    let probes = run_probes(
        run.model.client.input_layers(),
        run.model.server.layers(),
        run.model.client.output_layers(),
        &run.shadow_layers,
        &run.test_set,
        &run.pool.images,
        &run.cfg.attack,
    )?;
    probes.validate()?;

    let text = serde_json::to_string_pretty(&probes)
        .map_err(|e| Error::internal(format!("probe report serialization failed: {e}")))?;
    fs::create_dir_all(&dir.root).map_err(Error::from)?;
    fs::write(dir.probe_report(), text + "\n").map_err(Error::from)?;

    println!(
        "d_hat {:.3}  alignment_cos {:.3}  sign_fraction {:.3}  transfer_cos {:.3}",
        probes.d_hat, probes.alignment_cos, probes.sign_fraction, probes.transfer_cos
    );
    println!("probe report -> {}", dir.probe_report().display());
    Ok(())
}

pub fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let base = load_config(args)?;
    if base.shadow.is_none() {
        return Err(Error::config(
            "shadow: sweep varies the fusion weight; the config needs a shadow section",
        )
        .into());
    }
    let dir = RunDir::new(&args.out);

    let mut rows = Vec::new();
    for alpha in SWEEP_ALPHAS {
        let mut cfg = base.clone();
        cfg.shadow.as_mut().expect("checked above").alpha = alpha;
        let out = run_experiment(&cfg)?;
        let eval = out.eval.ok_or_else(|| {
            Error::internal("sweep ran a shadow config but produced no attack evaluation")
        })?;
        println!(
            "alpha {alpha:>6}: clean {:.1}%  adversarial {:.1}%  drop {:.1}  noise drop {:.1}",
            eval.clean_accuracy, eval.adversarial_accuracy, eval.accuracy_drop,
            eval.random_noise_drop
        );
        rows.push((alpha, eval));
    }

    let mut csv = String::from("# schema: sladv-sweep-v1\n");
    csv.push_str("alpha,clean_accuracy,adversarial_accuracy,accuracy_drop,random_noise_drop\n");
    for (alpha, e) in &rows {
        csv.push_str(&format!(
            "{alpha},{},{},{},{}\n",
            e.clean_accuracy, e.adversarial_accuracy, e.accuracy_drop, e.random_noise_drop
        ));
    }
    fs::create_dir_all(&dir.root).map_err(Error::from)?;
    write_config_echo(&dir, &base)?;
    fs::write(dir.sweep(), csv).map_err(Error::from)?;
    println!("sweep table -> {}", dir.sweep().display());
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let dir = RunDir::new(&args.out);
    let mut found = false;

    if let Ok(text) = fs::read_to_string(dir.report()) {
        found = true;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::format(0, format!("{}: {e}", dir.report().display())))?;
        let f = |key: &str| v.get(key).and_then(|x| x.as_f64()).unwrap_or(f64::NAN);
        println!("report.json (seed {}):", v.get("seed").and_then(|x| x.as_u64()).unwrap_or(0));
        println!(
            "  clean {:.1}%  adversarial {:.1}%  drop {:.1} points  noise drop {:.1}",
            f("clean_accuracy"),
            f("adversarial_accuracy"),
            f("accuracy_drop"),
            f("random_noise_drop"),
        );
        if let Some(p) = v.get("probes").filter(|p| !p.is_null()) {
            let pf = |key: &str| p.get(key).and_then(|x| x.as_f64()).unwrap_or(f64::NAN);
            println!(
                "  probes: d_hat {:.3}  alignment_cos {:.3}  sign_fraction {:.3}  transfer_cos {:.3}",
                pf("d_hat"),
                pf("alignment_cos"),
                pf("sign_fraction"),
                pf("transfer_cos"),
            );
        }
    }
    if let Ok(text) = fs::read_to_string(dir.metrics()) {
        found = true;
        let rounds = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("round,"))
            .count();
        println!("metrics.csv: {rounds} rounds");
    }
    if let Ok(text) = fs::read_to_string(dir.sweep()) {
        found = true;
        println!("sweep.csv:");
        for line in text.lines().filter(|l| !l.starts_with('#')) {
            println!("  {line}");
        }
    }

    if found {
        Ok(())
    } else {
        Err(CliError::MissingArtifact(dir.report()))
    }
}
