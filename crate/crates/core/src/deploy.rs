//! Online deployment of a sub-policy bundle.
//!
//! Each round the switcher turns the experts' action distributions into one
//! mixture, an action is drawn from it, and the switcher is updated with the
//! observed reward. Three switchers exist: Exp4.S (adversarial experts with
//! fixed-share mixing), HMM posterior sampling, and an oracle that reads the
//! true latent state and is meant for debugging.

use serde::{Deserialize, Serialize};

use crate::env::EnvSpec;
use crate::error::{config, input, Result};
use crate::hmm::HmmParams;
use crate::learner::PolicyBundle;
use crate::model::{Context, LatentSequence};
use crate::rng::SimRng;

/// Floor on the learning rate when a single expert makes `log L` vanish.
pub const ETA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exp4sConfig {
    /// Learning rate `η`.
    pub eta: f64,
    /// Fixed-share mixing rate `β`.
    pub beta: f64,
    /// Uniform exploration `γ`.
    pub gamma: f64,
}

impl Exp4sConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(config("Exp4.S learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(config("Exp4.S mixing rate must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(config("Exp4.S exploration must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `ℓ = T/S`, `η = √(log L / (ℓK))`, `β = 1/L`, `γ = 0`.
pub fn exp4s_hyperparams(horizon: usize, segments: usize, actions: usize, experts: usize) -> Result<Exp4sConfig> {
    if horizon == 0 || segments == 0 || actions == 0 || experts == 0 {
        return Err(input("Exp4.S hyperparameters need positive sizes"));
    }
    let ell = horizon as f64 / segments as f64;
    let eta = ((experts as f64).ln() / (ell * actions as f64)).sqrt().max(ETA_FLOOR);
    Ok(Exp4sConfig {
        eta,
        beta: 1.0 / experts as f64,
        gamma: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp4sState {
    pub weights: Vec<f64>,
    pub config: Exp4sConfig,
}

impl Exp4sState {
    pub fn new(experts: usize, config: Exp4sConfig) -> Result<Self> {
        config.validate()?;
        if experts == 0 {
            return Err(input("Exp4.S needs at least one expert"));
        }
        Ok(Self {
            weights: vec![1.0 / experts as f64; experts],
            config,
        })
    }

    /// `ℰ(a) = (1−γ) Σ_z w(z) π_z(a) + γ/K`.
    pub fn mixture(&self, experts: &[Vec<f64>]) -> Vec<f64> {
        let k = experts[0].len();
        let g = self.config.gamma;
        let mut out = vec![g / k as f64; k];
        for (w, probs) in self.weights.iter().zip(experts) {
            for (o, p) in out.iter_mut().zip(probs) {
                *o += (1.0 - g) * w * p;
            }
        }
        out
    }

    /// Full-information cost update after playing `action` from `mixture`;
    /// returns the propagated expert costs `c̃`.
    pub fn update(&mut self, experts: &[Vec<f64>], mixture: &[f64], action: usize, reward: f64) -> Vec<f64> {
        let cost = (1.0 - reward.clamp(0.0, 1.0)) / mixture[action];
        let costs: Vec<f64> = experts.iter().map(|p| cost * p[action]).collect();
        let l = self.weights.len() as f64;
        // exponentiate relative to the smallest cost to stay in range
        let floor = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        for (w, c) in self.weights.iter_mut().zip(&costs) {
            *w *= (-self.config.eta * (c - floor)).exp();
            total += *w;
        }
        let beta = self.config.beta;
        for w in self.weights.iter_mut() {
            *w = (1.0 - beta) * (*w / total) + beta / l;
        }
        costs
    }
}

/// Filtered latent posterior `Q_t` driven by an HMM.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamplerState<'a> {
    pub q: Vec<f64>,
    pub hmm: &'a HmmParams,
}

impl<'a> PosteriorSamplerState<'a> {
    pub fn new(hmm: &'a HmmParams) -> Result<Self> {
        hmm.validate()?;
        Ok(Self {
            q: hmm.initial.clone(),
            hmm,
        })
    }

    /// `Σ_z Q(z) π_z(a)`.
    pub fn mixture(&self, experts: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; experts[0].len()];
        for (q, probs) in self.q.iter().zip(experts) {
            for (o, p) in out.iter_mut().zip(probs) {
                *o += q * p;
            }
        }
        out
    }

    pub fn update(&mut self, ctx: &Context, action: usize, reward: f64) {
        let log_lik: Vec<f64> = (0..self.hmm.states)
            .map(|z| self.hmm.log_density(ctx, action, reward, z))
            .collect();
        self.q = filter_step(&self.q, &log_lik, &self.hmm.transition);
    }
}

/// `Q'(z) ∝ Σ_{z'} Q(z') exp(log_lik(z')) Φ(z', z)`, normalized in the log
/// domain so that vanishing likelihoods do not lose the posterior.
pub fn filter_step(q: &[f64], log_lik: &[f64], transition: &[f64]) -> Vec<f64> {
    let l = q.len();
    let joint: Vec<f64> = q
        .iter()
        .zip(log_lik)
        .map(|(p, ll)| if *p > 0.0 { p.ln() + ll } else { f64::NEG_INFINITY })
        .collect();
    let m = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        log::warn!("posterior lost all mass; keeping the previous belief");
        return q.to_vec();
    }
    let mut out = vec![0.0; l];
    for (i, j) in joint.iter().enumerate() {
        let w = (j - m).exp();
        if w == 0.0 {
            continue;
        }
        for (o, p) in out.iter_mut().zip(&transition[i * l..(i + 1) * l]) {
            *o += w * p;
        }
    }
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Switcher {
    Exp4s(Exp4sConfig),
    Posterior(HmmParams),
    /// Follows the true latent state; debugging only.
    Oracle,
}

impl Switcher {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Exp4s(_) => "exp4s",
            Self::Posterior(_) => "posterior",
            Self::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    /// True latent state of the round.
    pub state: usize,
    pub context: Context,
    pub action: usize,
    pub reward: f64,
    /// Expected reward of the played mixture under the true state.
    pub expected_reward: f64,
    /// Expert weights (Exp4.S) or latent posterior used for the round.
    pub mixture: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentTrace {
    pub switcher: String,
    pub records: Vec<TraceRecord>,
    /// Mean realized reward.
    pub mean_reward: f64,
    /// Mean expected reward of the played mixtures.
    pub mean_expected_reward: f64,
    /// `Σ_t max_a μ(a, z_t) − Σ_t E[r_t]`.
    pub regret: f64,
    /// Rewards clamped into `[0, 1]` for Exp4.S cost estimates.
    pub clamped_rewards: usize,
}

impl DeploymentTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

enum Runner<'a> {
    Exp4s(Exp4sState),
    Posterior(PosteriorSamplerState<'a>),
    Oracle,
}

/// Runs the bundle online for `horizon` rounds against `env`, on the env's
/// schedule or on `latent` when given; either is cycled when shorter than
/// the horizon.
pub fn run_deployment(
    env: &EnvSpec,
    bundle: &PolicyBundle,
    switcher: &Switcher,
    horizon: usize,
    latent: Option<&LatentSequence>,
    rng: &mut SimRng,
) -> Result<DeploymentTrace> {
    if horizon == 0 {
        return Err(input("deployment horizon must be positive"));
    }
    if bundle.is_empty() || bundle.num_actions() != env.actions {
        return Err(config("bundle does not match the environment's actions"));
    }
    let schedule = latent.unwrap_or(&env.schedule);
    if schedule.labels().iter().any(|&z| z >= env.states) {
        return Err(config("latent sequence has states unknown to the environment"));
    }
    if horizon > schedule.len() {
        log::warn!(
            "horizon {horizon} exceeds the latent sequence ({} rounds); cycling it",
            schedule.len()
        );
    }
    let experts = bundle.len();
    let mut runner = match switcher {
        Switcher::Exp4s(cfg) => Runner::Exp4s(Exp4sState::new(experts, *cfg)?),
        Switcher::Posterior(hmm) => {
            if hmm.states != experts {
                return Err(config(format!("HMM has {} states but the bundle {} experts", hmm.states, experts)));
            }
            if hmm.feature_map != *bundle.feature_map() {
                return Err(config("HMM and bundle use different feature maps"));
            }
            Runner::Posterior(PosteriorSamplerState::new(hmm)?)
        }
        Switcher::Oracle => {
            if experts < env.states {
                return Err(config("the oracle switcher needs one expert per environment state"));
            }
            Runner::Oracle
        }
    };

    let k = env.actions;
    let ctx = env.context();
    bundle.feature_map().check_context(&ctx)?;
    let mut expert_probs = vec![vec![0.0; k]; experts];
    let mut records = Vec::with_capacity(horizon);
    let (mut realized, mut expected, mut regret) = (0.0, 0.0, 0.0);
    let mut clamped = 0;
    for t in 0..horizon {
        let z = schedule.get(t % schedule.len());
        for (policy, out) in bundle.sub_policies.iter().zip(expert_probs.iter_mut()) {
            policy.probs_into(&ctx, out);
        }
        let (mixture, snapshot) = match &runner {
            Runner::Exp4s(s) => (s.mixture(&expert_probs), s.weights.clone()),
            Runner::Posterior(s) => (s.mixture(&expert_probs), s.q.clone()),
            Runner::Oracle => (expert_probs[z].clone(), (0..experts).map(|i| (i == z) as u8 as f64).collect()),
        };
        let action = rng.categorical(&mixture);
        let reward = env.sample_reward(action, z, rng);
        let exp_r = env.expected_reward(&mixture, z);
        match &mut runner {
            Runner::Exp4s(s) => {
                if !(0.0..=1.0).contains(&reward) {
                    clamped += 1;
                }
                s.update(&expert_probs, &mixture, action, reward);
            }
            Runner::Posterior(s) => s.update(&ctx, action, reward),
            Runner::Oracle => {}
        }
        realized += reward;
        expected += exp_r;
        regret += env.optimal_value(z) - exp_r;
        records.push(TraceRecord {
            t,
            state: z,
            context: ctx.clone(),
            action,
            reward,
            expected_reward: exp_r,
            mixture: snapshot,
        });
    }
    if clamped > 0 {
        log::warn!("{clamped} rewards outside [0, 1] were clamped for Exp4.S cost estimates");
    }
    let n = horizon as f64;
    Ok(DeploymentTrace {
        switcher: switcher.name().to_string(),
        records,
        mean_reward: realized / n,
        mean_expected_reward: expected / n,
        regret,
        clamped_rewards: clamped,
    })
}
