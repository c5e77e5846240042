use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crn_core::data::Standardizer;
use crn_core::eval::export_representations;
use crn_core::experiment::{
    evaluate_model, load_branches, load_dataset, sweep, write_atomic, write_dataset, write_training_log, ExperimentError,
    ExperimentSpec, Manifest,
};
use crn_core::models::{ModelKind, OracleModel, SeqNet, TrainedModel};
use crn_core::sim::{simulate_patients, SimConfig};
use crn_core::train::{fit_model, random_search, write_leaderboard, SearchSpace, SearchTarget};

/// Simulate tumour-growth data, train treatment-effect models over time
/// and evaluate their counterfactual predictions.
#[derive(Parser)]
#[command(name = "crn", version)]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset with counterfactual branch files.
    Simulate(SimulateArgs),
    /// Train one model on a simulated train/validation pair.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the simulator oracle) on test branches.
    Evaluate(EvaluateArgs),
    /// Simulate, train and evaluate every (gamma, model) cell.
    Sweep(SweepArgs),
    /// Random hyperparameter search over the encoder or decoder grid.
    Search(SearchArgs),
    /// Write encoder representations of a dataset to CSV.
    ExportRepr(ExportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment spec JSON; writes train/, validation/ and test/ splits.
    #[arg(long, conflicts_with = "config")]
    spec: Option<PathBuf>,
    /// Simulation config JSON; writes a single dataset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets both gamma_c and gamma_r.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gamma_c: Option<f64>,
    #[arg(long)]
    gamma_r: Option<f64>,
    /// Number of patients (single dataset).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Horizons to write branch files for, e.g. `1,3`.
    #[arg(long, value_delimiter = ',')]
    tau: Vec<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Directory with train/ and validation/ datasets.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the epoch count of every training phase.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Model checkpoint written by `train`.
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the simulator itself (harness self-test; RMSE must be 0).
    #[arg(long)]
    oracle: bool,
    /// Test dataset directory holding data.csv and branch files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    tau: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Symmetric gamma values, e.g. `0,4,8`.
    #[arg(long, value_delimiter = ',')]
    gammas: Vec<f64>,
    /// Gamma pairs `gc:gr`, e.g. `5:5,5:0,0:5`.
    #[arg(long, value_delimiter = ',')]
    gamma_pairs: Vec<String>,
    /// Models, e.g. `crn,crn_lambda0,msm`.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    tau: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reuse cells already completed with the same configuration.
    #[arg(long)]
    resume: bool,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Encoder,
    Decoder,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Directory with train/ and validation/ datasets.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "encoder")]
    target: Target,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    /// Epochs per trial; defaults to the spec's.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// CRN, CRN(λ=0), RNN or RMSN checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory holding data.csv.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Config(String),
    Numerical(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Search(a) => search(a),
        Command::ExportRepr(a) => export_repr(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}

fn config_err(m: impl std::fmt::Display) -> Failure {
    Failure::Config(m.to_string())
}

fn parse_model(name: &str) -> Result<ModelKind, Failure> {
    ModelKind::parse(name).ok_or_else(|| {
        let known: Vec<&str> = ModelKind::ALL.iter().map(|k| k.name()).collect();
        config_err(format!("unknown model `{name}` (expected one of {})", known.join(", ")))
    })
}

fn read_sim_config(path: &Path) -> Result<SimConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    SimConfig::from_json(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn load_spec(path: &Path) -> Result<ExperimentSpec, Failure> {
    Ok(ExperimentSpec::load(path)?)
}

fn apply_gamma(sim: &mut SimConfig, gamma: Option<f64>, gamma_c: Option<f64>, gamma_r: Option<f64>) {
    if let Some(g) = gamma {
        sim.gamma_c = g;
        sim.gamma_r = g;
    }
    if let Some(g) = gamma_c {
        sim.gamma_c = g;
    }
    if let Some(g) = gamma_r {
        sim.gamma_r = g;
    }
}

fn simulate(a: SimulateArgs) -> Outcome {
    if let Some(path) = &a.spec {
        let mut spec = load_spec(path)?;
        apply_gamma(&mut spec.sim, a.gamma, a.gamma_c, a.gamma_r);
        if let Some(s) = a.seed {
            spec.sim.seed = s;
        }
        if !a.tau.is_empty() {
            spec.taus = a.tau.clone();
        }
        spec.validate()?;
        let data = crn_core::experiment::CellData::simulate(&spec)?;
        data.save(&spec, &a.out)?;
        info!("wrote splits to {}", a.out.display());
        return Ok(());
    }
    let mut config = match &a.config {
        Some(p) => read_sim_config(p)?,
        None => SimConfig::new(0.0, 0, 0),
    };
    apply_gamma(&mut config, a.gamma, a.gamma_c, a.gamma_r);
    if let Some(n) = a.n {
        config.n_patients = n;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if config.n_patients == 0 {
        return Err(config_err("invalid config field `n_patients`: must be positive (use --n)"));
    }
    let taus = if a.tau.is_empty() { vec![1] } else { a.tau.clone() };
    let manifest = write_dataset(&config, &taus, &a.out)?;
    info!("wrote {} files to {}", manifest.files.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let mut spec = load_spec(&a.spec)?;
    if let Some(m) = &a.model {
        spec.model = parse_model(m)?;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(e) = a.epochs {
        let s = &mut spec.settings;
        s.encoder_train.epochs = e;
        s.decoder_train.epochs = e;
        s.propensity_train.epochs = e;
    }
    let (train, tm) = load_dataset(&a.data.join("train"))?;
    let (validation, _) = load_dataset(&a.data.join("validation"))?;
    if let Some(m) = &tm {
        spec.sim.gamma_c = m.gamma_c;
        spec.sim.gamma_r = m.gamma_r;
    }
    spec.validate()?;
    let settings = spec.resolved_settings();
    let (model, phases) =
        fit_model(spec.model, &train, &validation, &settings).map_err(|e| Failure::from(ExperimentError::from(e)))?;
    let mut manifest = Manifest::new("train", spec.seed, (spec.sim.gamma_c, spec.sim.gamma_r), &spec);
    let put = |m: &mut Manifest, name: &str, bytes: &[u8]| -> Outcome { Ok(m.write_file(&a.out, name, bytes)?) };
    put(&mut manifest, "model.json", model.to_json().as_bytes())?;
    put(&mut manifest, "train_log.csv", &write_training_log(&phases))?;
    put(&mut manifest, "config.json", spec.to_json().as_bytes())?;
    manifest.save(&a.out)?;
    for p in &phases {
        info!("{}: best validation RMSE {:.4}%", p.phase, p.history.best_validation_rmse());
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let (test, manifest) = load_dataset(&a.data)?;
    let gamma = manifest.as_ref().map(|m| (m.gamma_c, m.gamma_r)).unwrap_or((f64::NAN, f64::NAN));
    let mut branches = Vec::new();
    for &tau in &a.tau {
        branches.push((tau, load_branches(&a.data, tau)?));
    }
    let (report, source) = if a.oracle {
        let m = manifest.ok_or_else(|| config_err("--oracle needs the dataset manifest"))?;
        let config: SimConfig = serde_json::from_value(m.config).map_err(config_err)?;
        let patients = simulate_patients(&config).map_err(|e| Failure::from(ExperimentError::from(e)))?;
        let oracle = OracleModel::new(&patients, &config);
        (evaluate_model(&oracle, "oracle", gamma, &test, &branches)?, "oracle".to_string())
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires checkpoint");
        let model = load_checkpoint(path)?;
        let name = model.kind().name();
        (evaluate_model(model.as_model(), name, gamma, &test, &branches)?, path.display().to_string())
    };
    let mut m = Manifest::new("evaluate", 0, gamma, &serde_json::json!({ "model": source, "taus": a.tau }));
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(|e| Failure::from(ExperimentError::from(e)))?;
    m.write_file(&a.out, "metrics.csv", &buf)?;
    m.write_file(&a.out, "metrics.json", report.to_json().as_bytes())?;
    m.save(&a.out)?;
    for r in &report.rows {
        println!("{},{},{},{},{},{}", r.gamma_c, r.gamma_r, r.model, r.tau, r.metric, r.value);
    }
    if report.has_nan() {
        return Err(Failure::Numerical("NaN metric in report".into()));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<TrainedModel, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    TrainedModel::from_json(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn run_sweep(a: SweepArgs) -> Outcome {
    let mut spec = load_spec(&a.spec)?;
    let mut gammas: Vec<(f64, f64)> = a.gammas.iter().map(|&g| (g, g)).collect();
    for pair in &a.gamma_pairs {
        let (c, r) = pair
            .split_once(':')
            .and_then(|(c, r)| Some((c.trim().parse().ok()?, r.trim().parse().ok()?)))
            .ok_or_else(|| config_err(format!("bad gamma pair `{pair}` (expected gc:gr)")))?;
        gammas.push((c, r));
    }
    if !gammas.is_empty() {
        spec.gammas = gammas;
    }
    if !a.models.is_empty() {
        spec.models = a.models.iter().map(|m| parse_model(m)).collect::<Result<_, _>>()?;
    }
    if !a.tau.is_empty() {
        spec.taus = a.tau.clone();
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let outcome = sweep(&spec, &a.out, a.resume, a.workers)?;
    println!(
        "{} result rows, {} failed cells, {} reused cells -> {}",
        outcome.results.rows.len(),
        outcome.failures.len(),
        outcome.reused,
        outcome.results_path.display()
    );
    for ((c, r), k, msg) in &outcome.failures {
        warn!("gamma ({c}, {r}) {k}: {msg}");
    }
    if outcome.results.has_nan() {
        return Err(Failure::Numerical("NaN metric in sweep results".into()));
    }
    Ok(())
}

fn search(a: SearchArgs) -> Outcome {
    let spec = load_spec(&a.spec)?;
    let (train, _) = load_dataset(&a.data.join("train"))?;
    let (validation, _) = load_dataset(&a.data.join("validation"))?;
    let mut base = spec.resolved_settings();
    let target = match a.target {
        Target::Encoder => SearchTarget::Encoder,
        Target::Decoder => SearchTarget::Decoder,
    };
    if let Some(e) = a.epochs {
        base.encoder_train.epochs = e;
        base.decoder_train.epochs = e;
    }
    if target == SearchTarget::Decoder && base.tau_max < 2 {
        return Err(config_err("decoder search needs a spec with some tau >= 2"));
    }
    let space = SearchSpace::for_target(target);
    let (best, trials) = random_search(target, &space, a.iters, &train, &validation, &base, spec.seed)
        .map_err(|e| Failure::from(ExperimentError::from(e)))?;
    let mut manifest = Manifest::new("search", spec.seed, (spec.sim.gamma_c, spec.sim.gamma_r), &spec);
    let mut buf = Vec::new();
    write_leaderboard(&trials, &mut buf).map_err(config_err)?;
    manifest.write_file(&a.out, "leaderboard.csv", &buf)?;
    let best_json = serde_json::to_string_pretty(&best).map_err(config_err)?;
    manifest.write_file(&a.out, "best_settings.json", best_json.as_bytes())?;
    manifest.save(&a.out)?;
    if let Some(t) = trials.iter().min_by(|x, y| x.validation_rmse.total_cmp(&y.validation_rmse)) {
        println!("best trial {} validation RMSE {:.4}%", t.trial, t.validation_rmse);
    }
    Ok(())
}

fn export_repr(a: ExportArgs) -> Outcome {
    let model = load_checkpoint(&a.checkpoint)?;
    let (data, _) = load_dataset(&a.data)?;
    let (encoder, std): (&SeqNet, &Standardizer) = match &model {
        TrainedModel::Crn(m) | TrainedModel::CrnLambda0(m) => (&m.encoder, &m.standardizer),
        TrainedModel::Rmsn(m) => (&m.encoder, &m.standardizer),
        TrainedModel::Rnn(m) => (&m.net, &m.standardizer),
        _ => return Err(config_err("export-repr needs a recurrent model checkpoint")),
    };
    let mut buf = Vec::new();
    let rows = export_representations(encoder, std, &data, &mut buf).map_err(|e| Failure::from(ExperimentError::from(e)))?;
    write_atomic(&a.out, &buf)?;
    println!("{rows} rows -> {}", a.out.display());
    Ok(())
}
