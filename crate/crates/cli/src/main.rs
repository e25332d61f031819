//! `driftopt` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use driftopt_core::changepoint::{cluster_segments, detect_change_points, DetectorConfig};
use driftopt_core::deploy::{exp4s_hyperparams, run_deployment, Switcher};
use driftopt_core::env::generate_synthetic_env;
use driftopt_core::estimators::{estimate, partitioned_ips_estimate, EstimatorConfig, EstimatorKind, RewardModel};
use driftopt_core::experiment::{emit_report, read_rows_csv, render_table, run_experiment, summarize, OUTPUT_DIR_ENV};
use driftopt_core::hmm::{fit_hmm, smooth_labels, HmmFitConfig, HmmParams};
use driftopt_core::io;
use driftopt_core::learner::{train_sub_policies, ObjectiveKind, PolicyBundle, TrainConfig};
use driftopt_core::{EnvConfig, ExperimentConfig, FeatureMap, LatentSequence, LoggedInteraction, SimRng, SoftmaxPolicy};

#[derive(Parser)]
#[command(name = "driftopt", version, about = "Off-policy optimization for piecewise-stationary bandits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic environment and a log of the logging policy.
    Generate(GenerateArgs),
    /// Detect change-points in a log and cluster segments into k states.
    Detect(DetectArgs),
    /// Fit an HMM to a log and write its smoothed labels.
    FitHmm(FitHmmArgs),
    /// Learn one sub-policy per latent state.
    Learn(LearnArgs),
    /// Estimate the value of a policy or bundle on a log.
    Evaluate(EvaluateArgs),
    /// Deploy a bundle online against an environment.
    Deploy(DeployArgs),
    /// Run the synthetic benchmark.
    Experiment(ExperimentArgs),
    /// Re-aggregate a rows.csv file.
    Report(ReportArgs),
}

/// Parses `key=value`.
fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').context("expected key=value")?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Args)]
struct GenerateArgs {
    /// Environment configuration (JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set horizon=20000`.
    #[arg(long = "set", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Log file; the environment is written next to it as `<out>.env.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    data: PathBuf,
    /// Window size.
    #[arg(long)]
    w: Option<usize>,
    /// Threshold; with neither this nor a change bound, `√(2 log(8T²)/w)`.
    #[arg(long, conflicts_with_all = ["delta_lower"])]
    c: Option<f64>,
    /// Lower bound on the change magnitude; derives both w and c.
    #[arg(long, requires = "delta")]
    delta_lower: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Number of latent states after clustering.
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitHmmArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "L", alias = "states")]
    states: usize,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long)]
    per_state_sigma: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Action count; inferred from the log when absent.
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the smoothed labels.
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LearnKind {
    Ips,
    Dr,
    Poem,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    data: PathBuf,
    /// Latent labels; all rounds form one state when absent.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long = "M", default_value_t = 100.0)]
    clip: f64,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[arg(long, value_enum, default_value_t = LearnKind::Ips)]
    kind: LearnKind,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Variance penalty of the poem objective.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalKind {
    Ips,
    Dm,
    Dr,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// A policy or a bundle document.
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Clipping parameter; infinite by default.
    #[arg(long = "M", default_value_t = f64::INFINITY)]
    clip: f64,
    #[arg(long, value_enum, default_value_t = EvalKind::Ips)]
    kind: EvalKind,
}

#[derive(Clone, Copy, ValueEnum)]
enum SwitcherKind {
    Exp4s,
    Posterior,
    Oracle,
}

#[derive(Args)]
struct DeployArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, value_enum)]
    switcher: SwitcherKind,
    /// HMM parameters, required by the posterior switcher.
    #[arg(long)]
    hmm: Option<PathBuf>,
    /// Segment count for the Exp4.S rule; defaults to the environment's.
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    latent_shift: usize,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment configuration (JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the reduced-scale preset instead of the full defaults.
    #[arg(long)]
    desk: bool,
    /// Override one configuration key, e.g. `--set env.horizon=20000`.
    #[arg(long = "set", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
    #[arg(long, env = OUTPUT_DIR_ENV)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    rows: PathBuf,
    #[arg(long, env = OUTPUT_DIR_ENV)]
    out: Option<PathBuf>,
}

fn actions_of(explicit: Option<usize>, data: &[LoggedInteraction]) -> usize {
    explicit.unwrap_or_else(|| data.iter().map(|d| d.action + 1).max().unwrap_or(2).max(2))
}

fn load_log(path: &Path) -> Result<Vec<LoggedInteraction>> {
    let data = io::load_log(path).with_context(|| format!("reading {}", path.display()))?;
    if data.is_empty() {
        bail!("{} contains no records", path.display());
    }
    Ok(data)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut doc = match &a.config {
        Some(p) => io::load_json::<serde_json::Value>(p)?,
        None => serde_json::to_value(EnvConfig::default())?,
    };
    for (k, v) in &a.overrides {
        let slot = doc.get_mut(k).with_context(|| format!("unknown configuration key `{k}`"))?;
        *slot = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.clone()));
    }
    let cfg: EnvConfig = serde_json::from_value(doc)?;
    cfg.validate()?;
    let env = generate_synthetic_env(&cfg, &mut SimRng::named(a.seed, "env"))?;
    let data = env.simulate_log(&mut SimRng::named(a.seed, "log"));
    io::save_log(&a.out, &data)?;
    let env_path = io::env_path_for(&a.out);
    io::save_env(&env_path, &env)?;
    println!("wrote {} rounds to {} and the environment to {}", data.len(), a.out.display(), env_path.display());
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let data = load_log(&a.data)?;
    let t = data.len();
    let cfg = match (a.delta_lower, a.delta, a.w, a.c) {
        (Some(dl), Some(delta), _, _) => DetectorConfig::from_change_bound(t, dl, delta)?,
        (None, _, Some(w), Some(c)) => DetectorConfig::new(w, c)?,
        (None, _, Some(w), None) => DetectorConfig::with_horizon_threshold(t, w)?,
        _ => bail!("give --w (optionally with --c) or --delta-lower with --delta"),
    };
    let rewards: Vec<f64> = data.iter().map(|d| d.reward).collect();
    let res = detect_change_points(&rewards, &cfg)?;
    let labels = cluster_segments(&data, &res.labels, a.k, a.seed)?;
    io::save_labels(&a.out, &labels)?;
    let points: Vec<String> = res.change_points.iter().map(|t| (t + 1).to_string()).collect();
    println!(
        "w = {}, c = {:.6}; {} change-points [{}]; {} states",
        cfg.window,
        cfg.threshold,
        points.len(),
        points.join(", "),
        labels.num_states()
    );
    Ok(())
}

fn fit(a: FitHmmArgs) -> Result<()> {
    let data = load_log(&a.data)?;
    let fm = FeatureMap::infer(actions_of(a.actions, &data), &data)?;
    let cfg = HmmFitConfig {
        states: a.states,
        max_iters: a.iters,
        tol: a.tol,
        restarts: a.restarts,
        per_state_sigma: a.per_state_sigma,
        seed: a.seed,
    };
    let fit = fit_hmm(&data, &fm, &cfg)?;
    io::save_json(&a.out, &fit.params)?;
    if let Some(p) = &a.labels_out {
        let (labels, _) = smooth_labels(&fit.params, &data)?;
        io::save_labels(p, &labels)?;
    }
    println!(
        "log-likelihood {:.4} after {} iterations (restart {}, converged: {})",
        fit.log_likelihood(),
        fit.trace.log_likelihood.len() - 1,
        fit.restart + 1,
        fit.trace.converged
    );
    Ok(())
}

fn learn(a: LearnArgs) -> Result<()> {
    let data = load_log(&a.data)?;
    let fm = FeatureMap::infer(actions_of(a.actions, &data), &data)?;
    let labels = match &a.labels {
        Some(p) => io::load_labels(p)?,
        None => LatentSequence::constant(data.len(), 0, 1)?,
    };
    let cfg = TrainConfig {
        clip: a.clip,
        tau: a.tau,
        steps: a.steps,
        learning_rate: a.lr,
        var_penalty: a.lambda,
        kind: match a.kind {
            LearnKind::Ips => ObjectiveKind::Ips,
            LearnKind::Dr => ObjectiveKind::Dr,
            LearnKind::Poem => ObjectiveKind::Poem,
        },
        ..TrainConfig::default()
    };
    let bundle = train_sub_policies(&data, &labels, &fm, &cfg)?;
    io::save_json(&a.out, &bundle)?;
    for (z, d) in bundle.diagnostics.iter().enumerate() {
        let last = d.objective.last().copied().unwrap_or(f64::NAN);
        println!("state {}: {} rounds, objective {:.4}", z + 1, d.rounds, last);
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let data = load_log(&a.data)?;
    let kind = match a.kind {
        EvalKind::Ips => EstimatorKind::Ips,
        EvalKind::Dm => EstimatorKind::Dm,
        EvalKind::Dr => EstimatorKind::Dr,
    };
    let cfg = EstimatorConfig::new(a.clip, kind)?;
    let policies = match io::load_json::<PolicyBundle>(&a.policy) {
        Ok(b) => b.sub_policies,
        Err(_) => vec![io::load_json::<SoftmaxPolicy>(&a.policy)?],
    };
    let labels = a.labels.as_deref().map(io::load_labels).transpose()?;
    let fm = *policies[0].feature_map();
    match (&labels, kind) {
        (Some(l), EstimatorKind::Ips) => {
            let est = partitioned_ips_estimate(&data, &policies, l, &cfg)?;
            for (z, v) in est.per_state.iter().enumerate() {
                println!("state {}: {v}", z + 1);
            }
            println!("total: {}", est.total);
        }
        (Some(l), _) => {
            let model = RewardModel::fit(&data, fm, Some(l))?;
            let mut total = 0.0;
            for (z, policy) in policies.iter().enumerate() {
                let idx: Vec<usize> = (0..data.len()).filter(|&t| l.get(t) == z).collect();
                let part: Vec<LoggedInteraction> = idx.iter().map(|&t| data[t].clone()).collect();
                if part.is_empty() {
                    continue;
                }
                let weights = RewardModel::new(fm, vec![model.weights[z].clone()], model.sigma)?;
                let v = estimate(&part, policy, Some(&weights), None, &cfg)?;
                println!("state {}: {v}", z + 1);
                total += v;
            }
            println!("total: {total}");
        }
        (None, _) => {
            if policies.len() != 1 {
                bail!("a bundle with several sub-policies needs --labels");
            }
            let model = match kind {
                EstimatorKind::Ips => None,
                _ => Some(RewardModel::fit(&data, fm, None)?),
            };
            println!("{}", estimate(&data, &policies[0], model.as_ref(), None, &cfg)?);
        }
    }
    Ok(())
}

fn deploy(a: DeployArgs) -> Result<()> {
    let env = io::load_env(&a.env)?;
    let bundle: PolicyBundle = io::load_json(&a.bundle)?;
    let horizon = a.horizon.unwrap_or(env.horizon());
    let switcher = match a.switcher {
        SwitcherKind::Exp4s => {
            let segments = a.segments.unwrap_or(env.schedule.num_segments());
            Switcher::Exp4s(exp4s_hyperparams(horizon, segments, env.actions, bundle.len())?)
        }
        SwitcherKind::Posterior => {
            let path = a.hmm.as_ref().context("the posterior switcher needs --hmm")?;
            Switcher::Posterior(io::load_json::<HmmParams>(path)?)
        }
        SwitcherKind::Oracle => Switcher::Oracle,
    };
    let latent = (a.latent_shift > 0).then(|| env.schedule.shifted(a.latent_shift));
    let trace = run_deployment(&env, &bundle, &switcher, horizon, latent.as_ref(), &mut SimRng::named(a.seed, "deploy"))?;
    if let Some(p) = &a.trace {
        io::save_trace(p, &trace)?;
    }
    println!(
        "{} rounds: mean reward {:.4} (expected {:.4}), regret {:.2}",
        trace.len(),
        trace.mean_reward,
        trace.mean_expected_reward,
        trace.regret
    );
    Ok(())
}

/// Runs the benchmark; the exit code is non-zero if any cell failed.
fn experiment(a: ExperimentArgs) -> Result<bool> {
    let mut cfg = match (&a.config, a.desk) {
        (Some(p), _) => io::load_json::<ExperimentConfig>(p)?,
        (None, true) => ExperimentConfig::desk_scale(),
        (None, false) => ExperimentConfig::default(),
    };
    for (k, v) in &a.overrides {
        cfg.set(k, v)?;
    }
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    let rows = run_experiment(&cfg)?;
    let files = emit_report(&rows, &cfg.output_dir)?;
    io::save_json(&cfg.output_dir.join("config.json"), &cfg)?;
    print!("{}", std::fs::read_to_string(&files.table)?);
    println!("reports written to {}", cfg.output_dir.display());
    Ok(rows.iter().all(|r| r.ok()))
}

fn report(a: ReportArgs) -> Result<bool> {
    let text = std::fs::read_to_string(&a.rows).with_context(|| format!("reading {}", a.rows.display()))?;
    let rows = read_rows_csv(&text)?;
    match a.out {
        Some(dir) => {
            let files = emit_report(&rows, &dir)?;
            print!("{}", std::fs::read_to_string(&files.table)?);
        }
        None => print!("{}", render_table(&summarize(&rows))),
    }
    Ok(rows.iter().all(|r| r.ok()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Detect(a) => detect(a).map(|_| true),
        Command::FitHmm(a) => fit(a).map(|_| true),
        Command::Learn(a) => learn(a).map(|_| true),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::Deploy(a) => deploy(a).map(|_| true),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some cells failed; see the report");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
