//! Hidden Markov model with Gaussian linear-regression emissions.
//!
//! The latent state follows a Markov chain with initial distribution `P0`
//! and transition matrix `Φ`; in state `z` the reward of `(x, a)` is
//! `N(β_zᵀ f(x, a), σ_z²)`. Parameters are estimated by Baum-Welch and the
//! smoothed posterior `Q_t(z) = P(z_t = z | r_{1:T})` labels each round.
//!
//! Forward and backward passes run on emission likelihoods shifted by their
//! per-round maximum and renormalized every step, so the recursions never
//! underflow; the shifts and normalizers are accumulated into the
//! log-likelihood and into the log-domain tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::linalg::{NormalEquations, RIDGE};
use crate::model::{Context, FeatureMap, LatentSequence, LoggedInteraction};
use crate::rng::SimRng;

/// Self-transition probability of the initial transition matrix.
pub const STICKY_INIT: f64 = 0.99;
/// Posterior mass below which a state counts as degenerate.
pub const DEGENERATE_MASS: f64 = 1e-8;
/// Lower bound on emission standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// HMM parameters with row-major flat storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    pub feature_map: FeatureMap,
    pub states: usize,
    /// `P0`, length `L`.
    pub initial: Vec<f64>,
    /// `Φ`, `L × L` row-major; row `i` is `P(· | z_{t-1} = i)`.
    pub transition: Vec<f64>,
    /// `β`, `L × d` row-major.
    pub beta: Vec<f64>,
    /// Emission standard deviation per state (all equal when shared).
    pub sigma: Vec<f64>,
}

impl HmmParams {
    pub fn new(
        feature_map: FeatureMap,
        initial: Vec<f64>,
        transition: Vec<f64>,
        beta: Vec<f64>,
        sigma: Vec<f64>,
    ) -> Result<Self> {
        let params = Self {
            states: initial.len(),
            feature_map,
            initial,
            transition,
            beta,
            sigma,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.states;
        let d = self.feature_map.dim();
        if l == 0 {
            return Err(config("HMM needs at least one state"));
        }
        if self.initial.len() != l || self.transition.len() != l * l {
            return Err(config("HMM initial/transition sizes do not match the state count"));
        }
        if self.beta.len() != l * d {
            return Err(config(format!(
                "HMM regression weights have length {}, expected {}",
                self.beta.len(),
                l * d
            )));
        }
        if self.sigma.len() != l {
            return Err(config("HMM needs one sigma per state"));
        }
        let stochastic = |row: &[f64]| {
            row.iter().all(|p| p.is_finite() && *p >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-10
        };
        if !stochastic(&self.initial) {
            return Err(config("HMM initial distribution must be a probability vector"));
        }
        if !self.transition.chunks(l).all(stochastic) {
            return Err(config("HMM transition rows must be probability vectors"));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(config("HMM regression weights must be finite"));
        }
        if self.sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(config("HMM sigma must be positive"));
        }
        Ok(())
    }

    pub fn transition_prob(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.states + to]
    }

    pub fn transition_row(&self, from: usize) -> &[f64] {
        &self.transition[from * self.states..(from + 1) * self.states]
    }

    pub fn beta(&self, state: usize) -> &[f64] {
        let d = self.feature_map.dim();
        &self.beta[state * d..(state + 1) * d]
    }

    /// `β_zᵀ f(x, a)`.
    pub fn predict_reward(&self, ctx: &Context, action: usize, state: usize) -> f64 {
        self.feature_map.dot(self.beta(state), ctx, action)
    }

    pub fn log_density(&self, ctx: &Context, action: usize, reward: f64, state: usize) -> f64 {
        let s = self.sigma[state];
        let z = (reward - self.predict_reward(ctx, action, state)) / s;
        -LN_SQRT_2PI - s.ln() - 0.5 * z * z
    }

    pub fn density(&self, ctx: &Context, action: usize, reward: f64, state: usize) -> f64 {
        self.log_density(ctx, action, reward, state).exp()
    }

    /// Relabels states so that new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let l = self.states;
        let mut seen = vec![false; l];
        if perm.len() != l || perm.iter().any(|&p| p >= l || std::mem::replace(&mut seen[p], true)) {
            return Err(input("not a permutation of the states"));
        }
        let mut transition = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                transition[i * l + j] = self.transition_prob(perm[i], perm[j]);
            }
        }
        Ok(Self {
            feature_map: self.feature_map,
            states: l,
            initial: perm.iter().map(|&p| self.initial[p]).collect(),
            transition,
            beta: perm.iter().flat_map(|&p| self.beta(p).to_vec()).collect(),
            sigma: perm.iter().map(|&p| self.sigma[p]).collect(),
        })
    }

    fn check_data(&self, data: &[LoggedInteraction]) -> Result<()> {
        if data.is_empty() {
            return Err(input("no logged data"));
        }
        for d in data {
            self.feature_map.check_context(&d.context)?;
            if d.action >= self.feature_map.actions || !d.reward.is_finite() {
                return Err(input(format!("round {} is incompatible with the HMM", d.t + 1)));
            }
        }
        Ok(())
    }
}

/// Forward, backward and smoothed posteriors of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    pub states: usize,
    /// `log A_t(z) = log p(r_{1:t}, z_t = z)`, `T × L` row-major.
    pub log_forward: Vec<f64>,
    /// `log B_t(z) = log p(r_{t+1:T} | z_t = z)`, `T × L` row-major.
    pub log_backward: Vec<f64>,
    /// `Q_t(z)`, `T × L` row-major.
    pub smoothed: Vec<f64>,
    pub log_likelihood: f64,
}

impl PosteriorTable {
    pub fn len(&self) -> usize {
        self.smoothed.len() / self.states
    }

    pub fn is_empty(&self) -> bool {
        self.smoothed.is_empty()
    }

    pub fn q(&self, t: usize) -> &[f64] {
        &self.smoothed[t * self.states..(t + 1) * self.states]
    }

    /// MAP state per round, ties to the smallest index.
    pub fn argmax_labels(&self) -> Vec<usize> {
        self.smoothed
            .chunks(self.states)
            .map(|q| {
                q.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (z, &p)| if p > best.1 { (z, p) } else { best })
                    .0
            })
            .collect()
    }
}

/// Scaled forward-backward quantities reused by the M-step.
struct Sweep {
    /// Normalized forward messages `α̂_t`.
    alpha: Vec<f64>,
    /// Scaled backward messages with `Σ_z α̂_t(z) β̂_t(z) = 1`.
    beta: Vec<f64>,
    /// Emission likelihoods divided by their per-round maximum.
    emit: Vec<f64>,
    /// Per-round normalizers of the forward pass.
    scale: Vec<f64>,
    /// Per-round log shift of the emissions.
    shift: Vec<f64>,
    log_likelihood: f64,
}

fn sweep(params: &HmmParams, data: &[LoggedInteraction]) -> Result<Sweep> {
    let l = params.states;
    let n = data.len();
    let mut emit = vec![0.0; n * l];
    let mut shift = vec![0.0; n];
    for (t, d) in data.iter().enumerate() {
        let row = &mut emit[t * l..(t + 1) * l];
        for (z, e) in row.iter_mut().enumerate() {
            *e = params.log_density(&d.context, d.action, d.reward, z);
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(input(format!("non-finite emission density at round {}", t + 1)));
        }
        row.iter_mut().for_each(|e| *e = (*e - m).exp());
        shift[t] = m;
    }

    let mut alpha = vec![0.0; n * l];
    let mut scale = vec![0.0; n];
    for t in 0..n {
        let (done, rest) = alpha.split_at_mut(t * l);
        let cur = &mut rest[..l];
        if t == 0 {
            cur.copy_from_slice(&params.initial);
        } else {
            let prev = &done[(t - 1) * l..];
            cur.fill(0.0);
            for (i, &a) in prev.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (c, p) in cur.iter_mut().zip(params.transition_row(i)) {
                    *c += a * p;
                }
            }
        }
        for (c, e) in cur.iter_mut().zip(&emit[t * l..(t + 1) * l]) {
            *c *= e;
        }
        let s: f64 = cur.iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(input(format!("forward pass lost all mass at round {}", t + 1)));
        }
        cur.iter_mut().for_each(|c| *c /= s);
        scale[t] = s;
    }

    let mut beta = vec![0.0; n * l];
    beta[(n - 1) * l..].fill(1.0);
    let mut tmp = vec![0.0; l];
    for t in (0..n - 1).rev() {
        let (head, tail) = beta.split_at_mut((t + 1) * l);
        let next = &tail[..l];
        for ((v, e), b) in tmp.iter_mut().zip(&emit[(t + 1) * l..(t + 2) * l]).zip(next) {
            *v = e * b;
        }
        let cur = &mut head[t * l..];
        for (i, c) in cur.iter_mut().enumerate() {
            let dot: f64 = params.transition_row(i).iter().zip(&tmp).map(|(p, v)| p * v).sum();
            *c = dot / scale[t + 1];
        }
    }

    let log_likelihood = scale.iter().zip(&shift).map(|(s, m)| s.ln() + m).sum();
    Ok(Sweep {
        alpha,
        beta,
        emit,
        scale,
        shift,
        log_likelihood,
    })
}

impl Sweep {
    fn posterior(&self, l: usize) -> Vec<f64> {
        let mut q: Vec<f64> = self.alpha.iter().zip(&self.beta).map(|(a, b)| a * b).collect();
        for row in q.chunks_mut(l) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        q
    }

    fn into_table(self, l: usize) -> PosteriorTable {
        let n = self.scale.len();
        let smoothed = self.posterior(l);
        let log_steps: Vec<f64> = self.scale.iter().zip(&self.shift).map(|(s, m)| s.ln() + m).collect();
        let mut log_forward = vec![0.0; n * l];
        let mut log_backward = vec![0.0; n * l];
        let mut prefix = 0.0;
        for t in 0..n {
            prefix += log_steps[t];
            let suffix = self.log_likelihood - prefix;
            for z in 0..l {
                log_forward[t * l + z] = self.alpha[t * l + z].ln() + prefix;
                log_backward[t * l + z] = self.beta[t * l + z].ln() + suffix;
            }
        }
        PosteriorTable {
            states: l,
            log_forward,
            log_backward,
            smoothed,
            log_likelihood: self.log_likelihood,
        }
    }
}

/// Forward-backward smoothing for fixed parameters.
pub fn posterior_table(params: &HmmParams, data: &[LoggedInteraction]) -> Result<PosteriorTable> {
    params.validate()?;
    params.check_data(data)?;
    Ok(sweep(params, data)?.into_table(params.states))
}

/// Labels every round with the most probable smoothed state.
pub fn smooth_labels(
    params: &HmmParams,
    data: &[LoggedInteraction],
) -> Result<(LatentSequence, PosteriorTable)> {
    let table = posterior_table(params, data)?;
    let labels = LatentSequence::new(table.argmax_labels(), params.states)?;
    Ok((labels, table))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmmFitConfig {
    pub states: usize,
    pub max_iters: usize,
    /// EM stops once the log-likelihood gain drops below this value.
    pub tol: f64,
    pub restarts: usize,
    /// Estimate one emission sigma per state instead of a pooled one.
    pub per_state_sigma: bool,
    pub seed: u64,
}

impl Default for HmmFitConfig {
    fn default() -> Self {
        Self {
            states: 5,
            max_iters: 200,
            tol: 1e-6,
            restarts: 10,
            per_state_sigma: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    /// Log-likelihood of the parameters entering each iteration, followed by
    /// that of the returned parameters.
    pub log_likelihood: Vec<f64>,
    /// `(iteration, state)` pairs of degenerate states that were re-seeded.
    pub reseeded: Vec<(usize, usize)>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmFit {
    pub params: HmmParams,
    pub trace: FitTrace,
    /// Index of the winning restart.
    pub restart: usize,
    /// Final log-likelihood of every restart.
    pub restart_log_likelihoods: Vec<f64>,
}

impl HmmFit {
    pub fn log_likelihood(&self) -> f64 {
        *self.trace.log_likelihood.last().expect("trace is never empty")
    }
}

fn fit_ols(
    fm: &FeatureMap,
    data: &[LoggedInteraction],
    rounds: impl Iterator<Item = usize>,
) -> Result<Vec<f64>> {
    let mut ne = NormalEquations::new(fm.dim());
    for t in rounds {
        let d = &data[t];
        ne.add(fm, &d.context, d.action, d.reward, 1.0);
    }
    ne.solve(RIDGE)
}

fn sticky_transition(l: usize) -> Vec<f64> {
    if l == 1 {
        return vec![1.0];
    }
    let off = (1.0 - STICKY_INIT) / (l - 1) as f64;
    (0..l * l)
        .map(|i| if i / l == i % l { STICKY_INIT } else { off })
        .collect()
}

/// Contiguous blocks (cyclically rotated by `offset`) fitted by OLS.
fn block_init(
    fm: &FeatureMap,
    data: &[LoggedInteraction],
    l: usize,
    offset: usize,
) -> Result<HmmParams> {
    let n = data.len();
    let mut beta = Vec::with_capacity(l * fm.dim());
    let mut sq = 0.0;
    for z in 0..l {
        let (lo, hi) = (z * n / l, (z + 1) * n / l);
        let rounds = || (lo..hi).map(|i| (i + offset) % n);
        let b = fit_ols(fm, data, rounds())?;
        sq += rounds()
            .map(|t| (data[t].reward - fm.dot(&b, &data[t].context, data[t].action)).powi(2))
            .sum::<f64>();
        beta.extend(b);
    }
    let sigma = (sq / n as f64).sqrt().max(SIGMA_FLOOR);
    HmmParams::new(
        *fm,
        vec![1.0 / l as f64; l],
        sticky_transition(l),
        beta,
        vec![sigma; l],
    )
}

fn m_step(
    params: &HmmParams,
    data: &[LoggedInteraction],
    sw: &Sweep,
    per_state_sigma: bool,
    rng: &mut SimRng,
    reseeded: &mut Vec<usize>,
) -> Result<HmmParams> {
    let l = params.states;
    let n = data.len();
    let fm = &params.feature_map;
    let q = sw.posterior(l);

    let mass: Vec<f64> = (0..l).map(|z| q.iter().skip(z).step_by(l).sum()).collect();

    // pairwise posteriors summed over t
    let mut xi = vec![0.0; l * l];
    let mut tmp = vec![0.0; l];
    for t in 0..n.saturating_sub(1) {
        let a = &sw.alpha[t * l..(t + 1) * l];
        for ((v, e), b) in tmp
            .iter_mut()
            .zip(&sw.emit[(t + 1) * l..(t + 2) * l])
            .zip(&sw.beta[(t + 1) * l..(t + 2) * l])
        {
            *v = e * b / sw.scale[t + 1];
        }
        for i in 0..l {
            if a[i] == 0.0 {
                continue;
            }
            for j in 0..l {
                xi[i * l + j] += a[i] * params.transition_prob(i, j) * tmp[j];
            }
        }
    }

    let mut transition = vec![0.0; l * l];
    let mut beta = Vec::with_capacity(l * fm.dim());
    let mut degenerate = vec![false; l];
    for z in 0..l {
        if mass[z] < DEGENERATE_MASS {
            degenerate[z] = true;
            let len = (n / l).max(1);
            let start = (rng.uniform() * (n - len + 1) as f64) as usize;
            log::warn!("HMM state {} is degenerate; re-seeding from rounds {}..{}", z + 1, start + 1, start + len);
            reseeded.push(z);
            beta.extend(fit_ols(fm, data, start..start + len)?);
            transition[z * l..(z + 1) * l].copy_from_slice(&sticky_transition(l)[z * l..(z + 1) * l]);
            continue;
        }
        let mut ne = NormalEquations::new(fm.dim());
        for (t, d) in data.iter().enumerate() {
            let w = q[t * l + z];
            if w > 0.0 {
                ne.add(fm, &d.context, d.action, d.reward, w);
            }
        }
        beta.extend(ne.solve(RIDGE)?);
        let row = &xi[z * l..(z + 1) * l];
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for j in 0..l {
                transition[z * l + j] = row[j] / total;
            }
        } else {
            transition[z * l + z] = 1.0;
        }
    }

    let d = fm.dim();
    let mut sq = vec![0.0; l];
    for (t, dt) in data.iter().enumerate() {
        for z in 0..l {
            let w = q[t * l + z];
            if w > 0.0 && !degenerate[z] {
                let r = dt.reward - fm.dot(&beta[z * d..(z + 1) * d], &dt.context, dt.action);
                sq[z] += w * r * r;
            }
        }
    }
    let live_mass: f64 = (0..l).filter(|&z| !degenerate[z]).map(|z| mass[z]).sum();
    let pooled = (sq.iter().sum::<f64>() / live_mass).sqrt().max(SIGMA_FLOOR);
    let sigma = (0..l)
        .map(|z| {
            if per_state_sigma && !degenerate[z] {
                (sq[z] / mass[z]).sqrt().max(SIGMA_FLOOR)
            } else {
                pooled
            }
        })
        .collect();

    let mut initial: Vec<f64> = q[..l].to_vec();
    let s: f64 = initial.iter().sum();
    initial.iter_mut().for_each(|p| *p /= s);
    HmmParams::new(*fm, initial, transition, beta, sigma)
}

/// Baum-Welch from one starting point.
pub fn fit_hmm_from(
    init: HmmParams,
    data: &[LoggedInteraction],
    cfg: &HmmFitConfig,
    rng: &mut SimRng,
) -> Result<(HmmParams, FitTrace)> {
    init.validate()?;
    init.check_data(data)?;
    let mut params = init;
    let mut trace = FitTrace {
        log_likelihood: Vec::new(),
        reseeded: Vec::new(),
        converged: false,
    };
    let mut sw = sweep(&params, data)?;
    trace.log_likelihood.push(sw.log_likelihood);
    for iter in 0..cfg.max_iters {
        let mut reseeded = Vec::new();
        params = m_step(&params, data, &sw, cfg.per_state_sigma, rng, &mut reseeded)?;
        trace.reseeded.extend(reseeded.iter().map(|&z| (iter, z)));
        let prev = sw.log_likelihood;
        sw = sweep(&params, data)?;
        trace.log_likelihood.push(sw.log_likelihood);
        if reseeded.is_empty() && sw.log_likelihood - prev < cfg.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((params, trace))
}

/// Fits an `L`-state HMM with restarts from rotated contiguous-block
/// initializations, keeping the highest final log-likelihood.
pub fn fit_hmm(data: &[LoggedInteraction], fm: &FeatureMap, cfg: &HmmFitConfig) -> Result<HmmFit> {
    if cfg.states == 0 {
        return Err(input("HMM needs at least one state"));
    }
    if cfg.restarts == 0 {
        return Err(config("HMM fitting needs at least one restart"));
    }
    if data.len() < cfg.states {
        return Err(input(format!("{} rounds cannot seed {} states", data.len(), cfg.states)));
    }
    let n = data.len();
    let block = n / cfg.states;
    let runs: Vec<Result<(HmmParams, FitTrace)>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let offset = r * block / cfg.restarts;
            let mut rng = SimRng::named(cfg.seed, &format!("hmm-restart-{r}"));
            let init = block_init(fm, data, cfg.states, offset)?;
            fit_hmm_from(init, data, cfg, &mut rng)
        })
        .collect();
    let mut finals = Vec::with_capacity(runs.len());
    let mut best: Option<(usize, HmmParams, FitTrace)> = None;
    for (r, run) in runs.into_iter().enumerate() {
        let (params, trace) = run?;
        let ll = *trace.log_likelihood.last().expect("trace is never empty");
        finals.push(ll);
        let better = match &best {
            None => true,
            Some((_, _, t)) => ll > *t.log_likelihood.last().expect("trace is never empty"),
        };
        if better {
            best = Some((r, params, trace));
        }
    }
    let (restart, params, trace) = best.expect("at least one restart");
    Ok(HmmFit {
        params,
        trace,
        restart,
        restart_log_likelihoods: finals,
    })
}
