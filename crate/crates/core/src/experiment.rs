//! The synthetic benchmark: generate an environment and a log per seed,
//! estimate latent states, learn, deploy, and report.
//!
//! Methods are the stationary baselines `ips`, `dr` and `poem`, and the
//! latent methods `k-cd` (change-point detection and segment clustering,
//! deployed with Exp4.S) and `k-hmm` (HMM smoothing, deployed with posterior
//! sampling). Every (seed, method, k) cell draws from its own named random
//! stream, so the report is identical whatever the thread schedule.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::changepoint::{cluster_segments, detect_change_points, horizon_threshold, DetectionResult, DetectorConfig};
use crate::deploy::{exp4s_hyperparams, run_deployment, Exp4sConfig, Switcher};
use crate::env::{generate_synthetic_env, EnvConfig, EnvSpec};
use crate::error::{config, input, Result};
use crate::hmm::{fit_hmm, smooth_labels, HmmFitConfig};
use crate::learner::{train_stationary_bundle, train_sub_policies, ObjectiveKind, PolicyBundle, TrainConfig};
use crate::model::LoggedInteraction;
use crate::rng::SimRng;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "DRIFTOPT_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ips,
    Dr,
    Poem,
    KCd,
    KHmm,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ips, Method::Dr, Method::Poem, Method::KCd, Method::KHmm];

    /// Whether the method estimates `k` latent states.
    pub fn is_latent(self) -> bool {
        matches!(self, Method::KCd | Method::KHmm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ips => "ips",
            Method::Dr => "dr",
            Method::Poem => "poem",
            Method::KCd => "k-cd",
            Method::KHmm => "k-hmm",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| input(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSettings {
    pub window: usize,
    /// Explicit threshold; `None` uses `√(2 log(8T²) / w)`.
    pub threshold: Option<f64>,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        Self {
            window: 4000,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmmSettings {
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
    pub per_state_sigma: bool,
}

impl Default for HmmSettings {
    fn default() -> Self {
        let d = HmmFitConfig::default();
        Self {
            max_iters: d.max_iters,
            tol: d.tol,
            restarts: d.restarts,
            per_state_sigma: d.per_state_sigma,
        }
    }
}

/// Optional replacements for the Exp4.S hyperparameter rule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Exp4sOverrides {
    pub eta: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub methods: Vec<Method>,
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Shared training settings; the objective kind is set per method.
    pub train: TrainConfig,
    pub detector: DetectorSettings,
    pub hmm: HmmSettings,
    pub exp4s: Exp4sOverrides,
    /// Deploy on the logged latent sequence rotated by this many rounds.
    pub latent_shift: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            methods: Method::ALL.to_vec(),
            k_values: vec![5],
            seeds: (1..=10).collect(),
            train: TrainConfig::default(),
            detector: DetectorSettings::default(),
            hmm: HmmSettings::default(),
            exp4s: Exp4sOverrides::default(),
            latent_shift: 0,
            output_dir: std::env::var_os(OUTPUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("driftopt-out")),
        }
    }
}

impl ExperimentConfig {
    /// A fifth of the default scale: `T = 20000`, changes every 2000
    /// rounds, detector window 800.
    ///
    /// The horizon threshold rule gives `c ≈ 0.23` here, above most shifts in
    /// the logged reward, so the detector uses `c = Δ̃/2` with `Δ̃ = 0.1`.
    /// Exp4.S mixes at `β = 5e-4`, about one switch per segment, with
    /// `η = 0.1`; the default `β = 1/L` keeps the weights close to uniform.
    pub fn desk_scale() -> Self {
        let mut cfg = Self::default();
        cfg.env.horizon = 20_000;
        cfg.env.change_period = 2_000;
        cfg.detector.window = 800;
        cfg.detector.threshold = Some(0.05);
        cfg.exp4s = Exp4sOverrides {
            eta: Some(0.1),
            beta: Some(5e-4),
            gamma: None,
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(config("experiment needs at least one seed"));
        }
        if self.methods.is_empty() {
            return Err(config("experiment needs at least one method"));
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(config("k values must be non-empty and at least 1"));
        }
        if self.detector.window == 0 || 2 * self.detector.window >= self.env.horizon {
            return Err(config("detector window must be positive and below half the horizon"));
        }
        if self.hmm.restarts == 0 {
            return Err(config("HMM fitting needs at least one restart"));
        }
        Ok(())
    }

    /// Sets one dotted key (`env.horizon=20000`, `methods=["ips"]`); the
    /// value is parsed as JSON, falling back to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| config(format!("unknown configuration key `{key}`")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        *self = serde_json::from_value(doc).map_err(|e| config(format!("bad value for `{key}`: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    /// Number of latent states, for latent methods.
    pub k: Option<usize>,
    pub seed: u64,
    /// `None` on success, the error message otherwise.
    pub error: Option<String>,
    /// Mean expected reward of the deployed mixtures.
    pub mean_reward: f64,
    pub realized_reward: f64,
    pub regret: f64,
    pub wall_clock_s: f64,
}

impl ReportRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    fn failed(method: Method, k: Option<usize>, seed: u64, err: String) -> Self {
        Self {
            method,
            k,
            seed,
            error: Some(err),
            mean_reward: f64::NAN,
            realized_reward: f64::NAN,
            regret: f64::NAN,
            wall_clock_s: 0.0,
        }
    }
}

struct SeedContext {
    env: EnvSpec,
    log: Vec<LoggedInteraction>,
    detection: Option<std::result::Result<DetectionResult, String>>,
}

fn cell_rng(seed: u64, method: Method, k: Option<usize>) -> SimRng {
    SimRng::named(seed, &format!("deploy/{method}/{}", k.unwrap_or(0)))
}

fn train_cfg(cfg: &ExperimentConfig, kind: ObjectiveKind) -> TrainConfig {
    TrainConfig { kind, ..cfg.train }
}

fn exp4s_config(cfg: &ExperimentConfig, horizon: usize, segments: usize, actions: usize, experts: usize) -> Result<Exp4sConfig> {
    let base = exp4s_hyperparams(horizon, segments, actions, experts)?;
    Ok(Exp4sConfig {
        eta: cfg.exp4s.eta.unwrap_or(base.eta),
        beta: cfg.exp4s.beta.unwrap_or(base.beta),
        gamma: cfg.exp4s.gamma.unwrap_or(base.gamma),
    })
}

/// Learns the bundle and switcher of one method.
fn prepare(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    seed: u64,
    method: Method,
    k: Option<usize>,
) -> Result<(PolicyBundle, Switcher)> {
    let env = &ctx.env;
    let fm = env.feature_map();
    let horizon = env.horizon();
    match method {
        Method::Ips | Method::Dr | Method::Poem => {
            let kind = match method {
                Method::Ips => ObjectiveKind::Ips,
                Method::Dr => ObjectiveKind::Dr,
                _ => ObjectiveKind::Poem,
            };
            let bundle = train_stationary_bundle(&ctx.log, &fm, &train_cfg(cfg, kind))?;
            let sw = Switcher::Exp4s(exp4s_hyperparams(horizon, 1, env.actions, 1)?);
            Ok((bundle, sw))
        }
        Method::KCd => {
            let k = k.expect("latent methods carry k");
            let detection = match ctx.detection.as_ref().expect("detection runs for k-cd") {
                Ok(d) => d,
                Err(e) => return Err(crate::Error::Input(e.clone())),
            };
            let labels = cluster_segments(&ctx.log, &detection.labels, k, seed)?;
            let bundle = train_sub_policies(&ctx.log, &labels, &fm, &train_cfg(cfg, ObjectiveKind::Ips))?;
            let segments = detection.labels.num_segments();
            let sw = Switcher::Exp4s(exp4s_config(cfg, horizon, segments, env.actions, bundle.len())?);
            Ok((bundle, sw))
        }
        Method::KHmm => {
            let k = k.expect("latent methods carry k");
            let hmm_cfg = HmmFitConfig {
                states: k,
                max_iters: cfg.hmm.max_iters,
                tol: cfg.hmm.tol,
                restarts: cfg.hmm.restarts,
                per_state_sigma: cfg.hmm.per_state_sigma,
                seed,
            };
            let fit = fit_hmm(&ctx.log, &fm, &hmm_cfg)?;
            let (labels, _) = smooth_labels(&fit.params, &ctx.log)?;
            let bundle = train_sub_policies(&ctx.log, &labels, &fm, &train_cfg(cfg, ObjectiveKind::Ips))?;
            Ok((bundle, Switcher::Posterior(fit.params)))
        }
    }
}

fn run_cell(cfg: &ExperimentConfig, ctx: &SeedContext, seed: u64, method: Method, k: Option<usize>) -> ReportRow {
    let start = Instant::now();
    let outcome = prepare(cfg, ctx, seed, method, k).and_then(|(bundle, sw)| {
        let latent = (cfg.latent_shift > 0).then(|| ctx.env.schedule.shifted(cfg.latent_shift));
        run_deployment(&ctx.env, &bundle, &sw, ctx.env.horizon(), latent.as_ref(), &mut cell_rng(seed, method, k))
    });
    match outcome {
        Ok(trace) => ReportRow {
            method,
            k,
            seed,
            error: None,
            mean_reward: trace.mean_expected_reward,
            realized_reward: trace.mean_reward,
            regret: trace.regret,
            wall_clock_s: start.elapsed().as_secs_f64(),
        },
        Err(e) => {
            log::error!("seed {seed}, {method}: {e}");
            ReportRow::failed(method, k, seed, e.to_string())
        }
    }
}

fn cells(cfg: &ExperimentConfig) -> Vec<(Method, Option<usize>)> {
    let mut out = Vec::new();
    for &m in &cfg.methods {
        if m.is_latent() {
            out.extend(cfg.k_values.iter().map(|&k| (m, Some(k))));
        } else {
            out.push((m, None));
        }
    }
    out
}

fn seed_context(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let env = generate_synthetic_env(&cfg.env, &mut SimRng::named(seed, "env"))?;
    let log = env.simulate_log(&mut SimRng::named(seed, "log"));
    let detection = cfg.methods.contains(&Method::KCd).then(|| {
        let w = cfg.detector.window;
        let c = cfg.detector.threshold.unwrap_or_else(|| horizon_threshold(log.len(), w));
        let rewards: Vec<f64> = log.iter().map(|d| d.reward).collect();
        DetectorConfig::new(w, c)
            .and_then(|dc| detect_change_points(&rewards, &dc))
            .map_err(|e| e.to_string())
    });
    Ok(SeedContext { env, log, detection })
}

/// Runs every (seed, method, k) cell; failures become flagged rows.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let grid = cells(cfg);
    let rows: Vec<Vec<ReportRow>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| match seed_context(cfg, seed) {
            Ok(ctx) => grid
                .par_iter()
                .map(|&(m, k)| run_cell(cfg, &ctx, seed, m, k))
                .collect(),
            Err(e) => grid
                .iter()
                .map(|&(m, k)| ReportRow::failed(m, k, seed, e.to_string()))
                .collect(),
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub k: Option<usize>,
    pub seeds: usize,
    pub failed: usize,
    pub mean_reward: f64,
    /// Population standard deviation across seeds.
    pub std_reward: f64,
    pub mean_regret: f64,
    pub std_regret: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates successful rows per (method, k), in method then k order.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, Option<usize>), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method, r.k)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, k), rs)| {
            let ok: Vec<&&ReportRow> = rs.iter().filter(|r| r.ok()).collect();
            let rewards: Vec<f64> = ok.iter().map(|r| r.mean_reward).collect();
            let regrets: Vec<f64> = ok.iter().map(|r| r.regret).collect();
            let (mean_reward, std_reward) = mean_std(&rewards);
            let (mean_regret, std_regret) = mean_std(&regrets);
            SummaryRow {
                method,
                k,
                seeds: ok.len(),
                failed: rs.len() - ok.len(),
                mean_reward,
                std_reward,
                mean_regret,
                std_regret,
            }
        })
        .collect()
}

fn fmt_opt(v: Option<usize>) -> String {
    v.map_or_else(String::new, |k| k.to_string())
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub const ROWS_HEADER: &str = "method,k,seed,status,mean_reward,realized_reward,regret";
pub const SUMMARY_HEADER: &str = "method,k,seeds,failed,mean_reward,std_reward,mean_regret,std_regret";

/// Per-seed rows, sorted by method, k and seed. Timing is left out so that
/// the file is reproducible byte for byte.
pub fn rows_csv(rows: &[ReportRow]) -> String {
    let mut sorted: Vec<&ReportRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.method, r.k, r.seed));
    let mut out = format!("{ROWS_HEADER}\n");
    for r in sorted {
        let status = if r.ok() { "ok" } else { "failed" };
        let num = |v: f64| if r.ok() { fmt_num(v) } else { String::new() };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method,
            fmt_opt(r.k),
            r.seed,
            status,
            num(r.mean_reward),
            num(r.realized_reward),
            num(r.regret)
        );
    }
    out
}

pub fn summary_csv(summary: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for s in summary {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.method,
            fmt_opt(s.k),
            s.seeds,
            s.failed,
            fmt_num(s.mean_reward),
            fmt_num(s.std_reward),
            fmt_num(s.mean_regret),
            fmt_num(s.std_regret)
        );
    }
    out
}

/// Mean reward against k for the latent methods.
pub fn ksweep_csv(summary: &[SummaryRow]) -> String {
    let mut out = String::from("method,k,mean_reward,std_reward\n");
    for s in summary.iter().filter(|s| s.k.is_some()) {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            s.method,
            fmt_opt(s.k),
            fmt_num(s.mean_reward),
            fmt_num(s.std_reward)
        );
    }
    out
}

pub fn render_table(summary: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<8} {:>4} {:>6} {:>20} {:>20}\n",
        "method", "k", "seeds", "reward (mean±std)", "regret (mean±std)"
    );
    for s in summary {
        let flag = if s.failed > 0 { format!("  ({} failed)", s.failed) } else { String::new() };
        let _ = writeln!(
            out,
            "{:<8} {:>4} {:>6} {:>20} {:>20}{}",
            s.method.as_str(),
            fmt_opt(s.k),
            s.seeds,
            format!("{:.4} ± {:.4}", s.mean_reward, s.std_reward),
            format!("{:.1} ± {:.1}", s.mean_regret, s.std_regret),
            flag
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub rows: PathBuf,
    pub summary: PathBuf,
    pub table: PathBuf,
    pub ksweep: PathBuf,
    pub timings: PathBuf,
}

/// Writes `rows.csv`, `summary.csv`, `report.txt`, `ksweep.csv` and
/// `timings.csv` into `dir`.
pub fn emit_report(rows: &[ReportRow], dir: &Path) -> Result<ReportFiles> {
    if rows.is_empty() {
        return Err(input("no rows to report"));
    }
    std::fs::create_dir_all(dir)?;
    let summary = summarize(rows);
    let files = ReportFiles {
        rows: dir.join("rows.csv"),
        summary: dir.join("summary.csv"),
        table: dir.join("report.txt"),
        ksweep: dir.join("ksweep.csv"),
        timings: dir.join("timings.csv"),
    };
    std::fs::write(&files.rows, rows_csv(rows))?;
    std::fs::write(&files.summary, summary_csv(&summary))?;
    std::fs::write(&files.table, render_table(&summary))?;
    std::fs::write(&files.ksweep, ksweep_csv(&summary))?;
    let mut timings = String::from("method,k,seed,wall_clock_s\n");
    for r in rows {
        let _ = writeln!(timings, "{},{},{},{}", r.method, fmt_opt(r.k), r.seed, r.wall_clock_s);
    }
    std::fs::write(&files.timings, timings)?;
    Ok(files)
}

/// Reads per-seed rows back from `rows.csv`.
pub fn read_rows_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == ROWS_HEADER => {}
        _ => return Err(crate::Error::Parse { line: 1, msg: "unexpected header".into() }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let bad = |msg: &str| crate::Error::Parse { line: i + 1, msg: msg.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let num = |s: &str| -> Result<f64> {
            if s.is_empty() {
                Ok(f64::NAN)
            } else {
                s.parse().map_err(|_| bad("bad number"))
            }
        };
        rows.push(ReportRow {
            method: f[0].parse().map_err(|_| bad("bad method"))?,
            k: if f[1].is_empty() { None } else { Some(f[1].parse().map_err(|_| bad("bad k"))?) },
            seed: f[2].parse().map_err(|_| bad("bad seed"))?,
            error: (f[3] != "ok").then(|| "failed".to_string()),
            mean_reward: num(f[4])?,
            realized_reward: num(f[5])?,
            regret: num(f[6])?,
            wall_clock_s: 0.0,
        });
    }
    Ok(rows)
}
