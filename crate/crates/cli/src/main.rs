use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedkalman::checkpoint::{load_params, save_params};
use fedkalman::eval::{
    baseline_candidates, compare, convergence_curve, write_convergence_csv, Candidate, TestSequence,
};
use fedkalman::federation::{run_federated, train_central, write_rounds_csv};
use fedkalman::network::init_params;
use fedkalman::seeds::derive_seed;
use fedkalman::selfcheck;
use fedkalman::trainer::{train_local, TrainReport};
use fedkalman::world::{
    corrupt, generate_trajectory, make_client_datasets, save_trajectory_file, DatasetManifest, ManifestEntry,
};

mod config;

use config::{ExperimentConfig, NamedPath};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] fedkalman::Error),
    #[error("self-test failed: {}", .0.join(", "))]
    SelftestFailed(Vec<String>),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(fedkalman::Error::Config(_)) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
            CliError::SelftestFailed(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "fedkalman", version, about = "Federated learning of Kalman gains for GNSS localization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root containing datasets/, checkpoints/, reports/ and logs/.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run subdirectory name (default `seed-<seed>`).
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Overwrite an existing non-empty dataset directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Individual,
    Central,
    Federated,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate client datasets, a test trajectory and their manifest.
    GenData,
    /// Train gain networks on the generated datasets.
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Communication rounds (federated).
        #[arg(long)]
        rounds: Option<usize>,
        /// Epochs of the selected mode (local epochs per round when federated).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare checkpoints against raw GNSS and analytic filters on the test trajectory.
    Eval {
        /// Extra candidate as NAME=PATH; may be repeated.
        #[arg(long = "checkpoint", value_name = "NAME=PATH")]
        checkpoints: Vec<String>,
    },
    /// Run the built-in numerical checks.
    Selftest {
        #[arg(long, hide = true)]
        perturb_gradient: Option<f64>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.io.out = o.clone();
    }
    if let Some(r) = &common.run_id {
        cfg.io.run_id = Some(r.clone());
    }
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| fedkalman::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(|e| fedkalman::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(BufWriter::new(f))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create_file(path)?;
    f(&mut w)
        .and_then(|_| std::io::Write::flush(&mut w))
        .map_err(|e| fedkalman::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    Ok(())
}

fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let dir = cfg.dir("datasets");
    if !force {
        if let Ok(mut entries) = fs::read_dir(&dir) {
            if entries.next().is_some() {
                return Err(CliError::Usage(format!(
                    "{} exists and is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
        }
    }
    create_dir(&dir)?;
    let specs = cfg.client_specs();
    let w = &cfg.world;
    let datasets = make_client_datasets(&specs, &w.train_noise, w.window_len, w.split_ratio, cfg.seed)?;
    let mut clients = Vec::new();
    for (spec, d) in specs.iter().zip(&datasets) {
        let truth = generate_trajectory(spec)?;
        let name = format!("client-{}.csv", d.id);
        save_trajectory_file(dir.join(&name), w.dt, &d.measurements, Some(&truth))?;
        clients.push(ManifestEntry {
            id: d.id,
            path: name.into(),
        });
    }
    let test_truth = generate_trajectory(&cfg.test_spec())?;
    let test = corrupt(&test_truth, &w.test_noise, derive_seed(cfg.seed, "test-noise", 0))?;
    save_trajectory_file(dir.join("test.csv"), w.dt, &test.measurements, Some(&test_truth))?;
    let manifest = DatasetManifest {
        window_len: w.window_len,
        split_ratio: w.split_ratio,
        split_seed: cfg.seed,
        clients,
        test: "test.csv".into(),
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn load_manifest(cfg: &ExperimentConfig) -> Result<(DatasetManifest, PathBuf)> {
    let dir = cfg.dir("datasets");
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(fedkalman::Error::Io {
            path,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no dataset manifest; run gen-data first"),
        }
        .into());
    }
    Ok((DatasetManifest::load(&path)?, dir))
}

fn write_train_report(cfg: &ExperimentConfig, name: &str, report: &TrainReport) -> Result<()> {
    write_with(&cfg.dir("reports").join(format!("{name}.csv")), |w| report.write_csv(w, false))?;
    write_with(&cfg.dir("logs").join(format!("{name}-timing.csv")), |w| report.write_csv(w, true))
}

fn cmd_train(cfg: &mut ExperimentConfig, mode: Mode, rounds: Option<usize>, epochs: Option<usize>) -> Result<()> {
    if let Some(r) = rounds {
        cfg.federation.rounds = r;
    }
    if let Some(e) = epochs {
        match mode {
            Mode::Individual => cfg.training.epochs = e,
            Mode::Central => cfg.training.central_epochs = e,
            Mode::Federated => cfg.federation.local_epochs = e,
        }
    }
    let (manifest, data_dir) = load_manifest(cfg)?;
    let datasets = manifest.load_clients(&data_dir)?;
    for kind in ["checkpoints", "reports", "logs"] {
        create_dir(&cfg.dir(kind))?;
    }
    let ckpt = cfg.dir("checkpoints");
    let init = init_params(derive_seed(cfg.seed, "init", 0), cfg.training.network);
    save_params(&init, ckpt.join("init.fkn"))?;
    match mode {
        Mode::Individual => {
            let tc = cfg.train_config(cfg.training.epochs);
            for d in &datasets {
                let (params, report) = train_local(&init, d, &tc)?;
                let name = format!("individual-{}", d.id);
                save_params(&params, ckpt.join(format!("{name}.fkn")))?;
                write_train_report(cfg, &name, &report)?;
                summarize(&name, &report);
            }
        }
        Mode::Central => {
            let (params, report) = train_central(&init, &datasets, &cfg.train_config(cfg.training.central_epochs))?;
            save_params(&params, ckpt.join("central.fkn"))?;
            write_train_report(cfg, "central", &report)?;
            summarize("central", &report);
        }
        Mode::Federated => {
            let test = TestSequence::from_file(&manifest.load_test(&data_dir)?)?;
            let (params, reports) = run_federated(&init, &datasets, &cfg.fed_config(), Some(&test))?;
            save_params(&params, ckpt.join("federated.fkn"))?;
            write_with(&cfg.dir("reports").join("federated-rounds.csv"), |w| {
                write_rounds_csv(&reports, w)
            })?;
            if let Some(last) = reports.last() {
                println!(
                    "federated: {} rounds, test rt_le {:.4} m, {} bytes per round",
                    reports.len(),
                    last.global_rtle,
                    last.bytes
                );
            }
        }
    }
    Ok(())
}

fn summarize(name: &str, report: &TrainReport) {
    match report.last() {
        Some(s) => println!(
            "{name}: {} epochs, train loss {:.4}, val rt_le {:.4} m",
            report.epochs.len(),
            s.train_loss,
            s.val_rtle
        ),
        None => println!("{name}: 0 epochs"),
    }
}

fn parse_named(s: &str) -> Result<NamedPath> {
    let (name, path) = s
        .split_once('=')
        .filter(|(n, p)| !n.is_empty() && !p.is_empty())
        .ok_or_else(|| CliError::Usage(format!("`{s}` is not NAME=PATH")))?;
    Ok(NamedPath {
        name: name.to_string(),
        path: path.into(),
    })
}

fn default_checkpoints(dir: &Path) -> Vec<NamedPath> {
    let mut out: Vec<NamedPath> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "fkn"))
        .filter_map(|p| {
            let name = p.file_stem()?.to_str()?.to_string();
            (name != "init").then_some(NamedPath { name, path: p })
        })
        .collect();
    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

/// Global-model RT-LE per round from a rounds CSV.
fn read_round_rtle(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| fedkalman::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.get(1) != Some(&"global") {
            continue;
        }
        let parse_err = |reason: String| fedkalman::Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let round = f[0].parse().map_err(|_| parse_err(format!("bad round `{}`", f[0])))?;
        let rtle = f
            .get(4)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err("missing rtle".into()))?;
        out.push((round, rtle));
    }
    Ok(out)
}

fn cmd_eval(cfg: &ExperimentConfig, extra: &[String]) -> Result<()> {
    let (manifest, data_dir) = load_manifest(cfg)?;
    let test = TestSequence::from_file(&manifest.load_test(&data_dir)?)?;
    let mut named = default_checkpoints(&cfg.dir("checkpoints"));
    named.extend(cfg.io.checkpoints.iter().cloned());
    for s in extra {
        named.push(parse_named(s)?);
    }
    let mut candidates = baseline_candidates(&test, &cfg.world.test_noise)?;
    for n in &named {
        candidates.push(Candidate::Network {
            name: n.name.clone(),
            params: load_params(&n.path)?,
        });
    }
    let cmp = compare(&test, &candidates)?;
    let reports = cfg.dir("reports");
    create_dir(&reports)?;
    write_with(&reports.join("metrics.csv"), |w| cmp.write_metrics_csv(w))?;
    write_with(&reports.join("cdf.csv"), |w| cmp.write_cdf_csv(w))?;

    let rounds_path = reports.join("federated-rounds.csv");
    if let (true, Some(central)) = (rounds_path.exists(), cmp.get("central")) {
        let rounds: Vec<fedkalman::federation::RoundReport> = read_round_rtle(&rounds_path)?
            .into_iter()
            .map(|(round, rtle)| fedkalman::federation::RoundReport {
                round,
                clients: Vec::new(),
                global_val_loss: f64::NAN,
                global_rtle: rtle,
                bytes: 0,
            })
            .collect();
        let curve = convergence_curve(&rounds, central.rt_le);
        write_with(&reports.join("convergence.csv"), |w| write_convergence_csv(&curve, w))?;
    }
    for r in &cmp.reports {
        println!(
            "{:<16} rt_le {:.4} m  max {:.4} m  p90 {:.4} m",
            r.candidate, r.rt_le, r.max_error, r.p90
        );
    }
    Ok(())
}

/// Thresholds of the built-in checks.
const FILTER_TOL: f64 = 1e-10;
const GRADIENT_TOL: f64 = 1e-4;
const AGGREGATION_TOL: f64 = 1e-15;

fn cmd_selftest(perturb: Option<f64>) -> Result<()> {
    let mut failed = Vec::new();
    let mut report = |name: &str, value: f64, tol: f64| {
        let ok = value <= tol;
        println!("{} {name}: max error {value:.3e} (limit {tol:e})", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(name.to_string());
        }
    };
    report("filter-equivalence", selfcheck::filter_equivalence_error(1, 100, 50)?, FILTER_TOL);
    let grads = selfcheck::gradient_check_reports(&[1, 2, 3, 4, 5], 10, 20, 1e-4, perturb.unwrap_or(1.0))?;
    let worst = grads.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    report("gradient", worst, GRADIENT_TOL);
    report("aggregation", selfcheck::aggregation_algebra_error(1)?, AGGREGATION_TOL);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::SelftestFailed(failed))
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg, cli.common.force),
        Command::Train { mode, rounds, epochs } => cmd_train(&mut cfg, mode, rounds, epochs),
        Command::Eval { checkpoints } => cmd_eval(&cfg, &checkpoints),
        Command::Selftest { perturb_gradient } => cmd_selftest(perturb_gradient),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDKALMAN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
