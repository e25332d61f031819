//! Synthetic piecewise-stationary bandit environments.
//!
//! The environment is context-free: every round shows context id `0`, the
//! features are action indicators and the mean reward of action `a` under
//! latent state `z` is `μ(a, z)`. Rewards are Gaussian around `μ(a, z)` and
//! are not truncated to `[0, 1]`.

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::model::{Context, FeatureMap, LatentSequence, LoggedInteraction, SoftmaxPolicy};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub actions: usize,
    pub states: usize,
    pub horizon: usize,
    pub noise_sigma: f64,
    /// Rounds between latent-state changes.
    pub change_period: usize,
    /// Start the ramp at the top state and walk down first.
    pub descending: bool,
    /// Explicit cyclic pattern of 1-based segment labels; overrides the ramp.
    pub pattern: Option<Vec<usize>>,
    /// Standard deviation of the per-action perturbation of the logging policy.
    pub logging_noise_sd: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            actions: 5,
            states: 5,
            horizon: 100_000,
            noise_sigma: 0.5,
            change_period: 10_000,
            descending: false,
            pattern: None,
            logging_noise_sd: 0.1,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.actions < 2 {
            return Err(config("environment needs at least 2 actions"));
        }
        if self.states == 0 || self.horizon == 0 || self.change_period == 0 {
            return Err(config("states, horizon and change period must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.logging_noise_sd >= 0.0) {
            return Err(config("noise levels must be non-negative"));
        }
        if let Some(p) = &self.pattern {
            if p.is_empty() || p.iter().any(|&z| z == 0 || z > self.states) {
                return Err(config("pattern labels must lie in [1, states]"));
            }
        }
        Ok(())
    }

    /// Latent schedule: a ramp `1 → L → 1 → …` (or its mirror), or the
    /// explicit pattern, holding each label for `change_period` rounds.
    pub fn schedule(&self) -> Result<LatentSequence> {
        self.validate()?;
        let l = self.states;
        let label_of_segment = |s: usize| -> usize {
            if let Some(p) = &self.pattern {
                return p[s % p.len()] - 1;
            }
            if l == 1 {
                return 0;
            }
            let cycle = 2 * (l - 1);
            let pos = s % cycle;
            let up = if pos < l { pos } else { cycle - pos };
            if self.descending {
                l - 1 - up
            } else {
                up
            }
        };
        let labels = (0..self.horizon)
            .map(|t| label_of_segment(t / self.change_period))
            .collect();
        LatentSequence::new(labels, l)
    }
}

/// Ground truth of a synthetic environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub actions: usize,
    pub states: usize,
    /// `mean_reward[a][z] = μ(a, z)`.
    pub mean_reward: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub schedule: LatentSequence,
    pub logging_policy: SoftmaxPolicy,
}

pub fn generate_synthetic_env(cfg: &EnvConfig, rng: &mut SimRng) -> Result<EnvSpec> {
    let schedule = cfg.schedule()?;
    let mean_reward: Vec<Vec<f64>> = (0..cfg.actions)
        .map(|_| (0..cfg.states).map(|_| rng.uniform()).collect())
        .collect();
    let theta = mean_reward
        .iter()
        .map(|row| {
            let eps: f64 = StandardNormal.sample(rng);
            row.iter().sum::<f64>() / cfg.states as f64 + cfg.logging_noise_sd * eps
        })
        .collect();
    let logging_policy = SoftmaxPolicy::new(FeatureMap::context_free(cfg.actions)?, theta)?;
    EnvSpec::new(mean_reward, cfg.noise_sigma, schedule, logging_policy)
}

impl EnvSpec {
    pub fn new(
        mean_reward: Vec<Vec<f64>>,
        noise_sigma: f64,
        schedule: LatentSequence,
        logging_policy: SoftmaxPolicy,
    ) -> Result<Self> {
        let actions = mean_reward.len();
        let states = schedule.num_states();
        if mean_reward.iter().any(|row| row.len() != states) {
            return Err(config("mean reward matrix must be K x L"));
        }
        if logging_policy.feature_map() != &FeatureMap::context_free(actions)? {
            return Err(config("logging policy must use context-free indicator features"));
        }
        if !(noise_sigma >= 0.0) {
            return Err(config("noise sigma must be non-negative"));
        }
        Ok(Self {
            actions,
            states,
            mean_reward,
            noise_sigma,
            schedule,
            logging_policy,
        })
    }

    pub fn horizon(&self) -> usize {
        self.schedule.len()
    }

    pub fn feature_map(&self) -> FeatureMap {
        *self.logging_policy.feature_map()
    }

    /// The context shown in every round.
    pub fn context(&self) -> Context {
        Context::Id(0)
    }

    pub fn mu(&self, action: usize, state: usize) -> f64 {
        self.mean_reward[action][state]
    }

    pub fn min_mean(&self) -> f64 {
        self.mean_reward.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_mean(&self) -> f64 {
        self.mean_reward.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `∑_a probs[a] μ(a, z)`.
    pub fn expected_reward(&self, probs: &[f64], state: usize) -> f64 {
        probs
            .iter()
            .enumerate()
            .map(|(a, p)| p * self.mean_reward[a][state])
            .sum()
    }

    /// Value `V_z(π)` of one round spent in state `z`.
    pub fn state_value(&self, policy: &SoftmaxPolicy, state: usize) -> Result<f64> {
        let probs = policy.action_distribution(&self.context())?;
        Ok(self.expected_reward(&probs, state))
    }

    pub fn optimal_action(&self, state: usize) -> usize {
        (0..self.actions)
            .fold(0, |best, a| if self.mu(a, state) > self.mu(best, state) { a } else { best })
    }

    pub fn optimal_value(&self, state: usize) -> f64 {
        self.mu(self.optimal_action(state), state)
    }

    /// Per-state greedy policies playing `argmax_a μ(a, z)`.
    pub fn optimal_policies(&self) -> Result<Vec<SoftmaxPolicy>> {
        (0..self.states)
            .map(|z| SoftmaxPolicy::greedy(self.feature_map(), self.optimal_action(z)))
            .collect()
    }

    /// Reward draw `N(μ(a, z), σ²)`.
    pub fn sample_reward(&self, action: usize, state: usize, rng: &mut SimRng) -> f64 {
        let mean = self.mu(action, state);
        if self.noise_sigma == 0.0 {
            return mean;
        }
        Normal::new(mean, self.noise_sigma)
            .expect("validated sigma")
            .sample(rng)
    }

    /// Logged data of `T` rounds under the logging policy.
    pub fn simulate_log(&self, rng: &mut SimRng) -> Vec<LoggedInteraction> {
        let ctx = self.context();
        let mut probs = vec![0.0; self.actions];
        self.logging_policy.probs_into(&ctx, &mut probs);
        self.schedule
            .labels()
            .iter()
            .enumerate()
            .map(|(t, &z)| {
                let action = rng.categorical(&probs);
                LoggedInteraction {
                    t,
                    context: ctx.clone(),
                    action,
                    reward: self.sample_reward(action, z, rng),
                    propensity: probs[action],
                }
            })
            .collect()
    }

    /// Exact `V(Π) = ∑_t ∑_a π_{z_t}(a | x_t) μ(a, z_t)` for sub-policies
    /// indexed by label.
    pub fn true_value(&self, policies: &[SoftmaxPolicy], assignment: &LatentSequence) -> Result<f64> {
        ValueTable::new(self, policies)?.total(assignment)
    }
}

/// Expected per-round reward of a family of policies under each state.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    /// `per_state[p][z]`.
    pub per_state: Vec<Vec<f64>>,
}

impl ValueTable {
    pub fn new(env: &EnvSpec, policies: &[SoftmaxPolicy]) -> Result<Self> {
        let per_state = policies
            .iter()
            .map(|p| (0..env.states).map(|z| env.state_value(p, z)).collect())
            .collect::<Result<_>>()?;
        Ok(Self { per_state })
    }

    /// `V_t(π_p)` for a round spent in `state`.
    pub fn per_round(&self, policy: usize, state: usize) -> f64 {
        self.per_state[policy][state]
    }

    /// Sum over rounds, using sub-policy `z_t` in round `t`.
    pub fn total(&self, assignment: &LatentSequence) -> Result<f64> {
        let counts = assignment.counts();
        let mut total = 0.0;
        for (z, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let row = self
                .per_state
                .get(z)
                .ok_or_else(|| config(format!("no sub-policy for latent state {}", z + 1)))?;
            let v = row
                .get(z)
                .ok_or_else(|| config(format!("state {} outside the environment", z + 1)))?;
            total += n as f64 * v;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_env(mu: Vec<Vec<f64>>, sigma: f64, labels: Vec<usize>, theta: Vec<f64>) -> EnvSpec {
        let k = mu.len();
        let l = mu[0].len();
        let pol = SoftmaxPolicy::new(FeatureMap::context_free(k).unwrap(), theta).unwrap();
        EnvSpec::new(mu, sigma, LatentSequence::new(labels, l).unwrap(), pol).unwrap()
    }

    #[test]
    fn default_schedule_ramps_up_then_down() {
        let seq = EnvConfig::default().schedule().unwrap();
        assert_eq!(seq.len(), 100_000);
        assert_eq!(seq.num_segments(), 10);
        let seg_labels: Vec<usize> = seq.segments().iter().map(|s| s.label + 1).collect();
        assert_eq!(seg_labels, vec![1, 2, 3, 4, 5, 4, 3, 2, 1, 2]);
        assert!(seq.segments().iter().all(|s| s.len() == 10_000));
        assert!(seq
            .labels()
            .windows(2)
            .all(|w| w[0].abs_diff(w[1]) <= 1));
    }

    #[test]
    fn descending_and_pattern_schedules() {
        let cfg = EnvConfig {
            horizon: 50,
            change_period: 10,
            states: 3,
            descending: true,
            ..EnvConfig::default()
        };
        let labels: Vec<usize> = cfg.schedule().unwrap().segments().iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![2, 1, 0, 1, 2]);
        let cfg = EnvConfig {
            pattern: Some(vec![1, 3]),
            ..cfg
        };
        let labels: Vec<usize> = cfg.schedule().unwrap().segments().iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 2, 0, 2, 0]);
    }

    #[test]
    fn zero_noise_logging_policy_is_softmax_of_column_mean() {
        let cfg = EnvConfig {
            logging_noise_sd: 0.0,
            horizon: 100,
            ..EnvConfig::default()
        };
        let env = generate_synthetic_env(&cfg, &mut SimRng::new(1)).unwrap();
        for (a, row) in env.mean_reward.iter().enumerate() {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            assert_eq!(env.logging_policy.theta()[a], mean);
        }
        // identical rows across z give exactly the shared row as logits
        let mu = vec![vec![0.3; 3], vec![0.9; 3]];
        let theta = mu.iter().map(|r| r.iter().sum::<f64>() / 3.0).collect::<Vec<_>>();
        let env = small_env(mu, 0.0, vec![0, 1, 2], theta);
        let p = env.logging_policy.action_distribution(&Context::Id(0)).unwrap();
        let e = (0.9f64 - 0.3).exp();
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = EnvConfig {
            horizon: 1000,
            change_period: 100,
            ..EnvConfig::default()
        };
        let a = generate_synthetic_env(&cfg, &mut SimRng::new(42)).unwrap();
        let b = generate_synthetic_env(&cfg, &mut SimRng::new(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.simulate_log(&mut SimRng::new(3)), b.simulate_log(&mut SimRng::new(3)));
    }

    #[test]
    fn noiseless_log_rewards_equal_means_and_propensities_match() {
        let cfg = EnvConfig {
            horizon: 500,
            change_period: 50,
            noise_sigma: 0.0,
            ..EnvConfig::default()
        };
        let env = generate_synthetic_env(&cfg, &mut SimRng::new(8)).unwrap();
        let log = env.simulate_log(&mut SimRng::new(9));
        assert_eq!(log.len(), 500);
        for rec in &log {
            let z = env.schedule.get(rec.t);
            assert_eq!(rec.reward, env.mu(rec.action, z));
            let p = env.logging_policy.prob(&rec.context, rec.action).unwrap();
            assert!((p - rec.propensity).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_log_mean_matches_logging_value() {
        let cfg = EnvConfig {
            horizon: 100_000,
            change_period: 10_000,
            ..EnvConfig::default()
        };
        let env = generate_synthetic_env(&cfg, &mut SimRng::new(21)).unwrap();
        let log = env.simulate_log(&mut SimRng::new(22));
        let t = log.len() as f64;
        let mean = log.iter().map(|r| r.reward).sum::<f64>() / t;
        let expected = env
            .true_value(&vec![env.logging_policy.clone(); env.states], &env.schedule)
            .unwrap()
            / t;
        // per-round sd is at most sqrt(σ² + 1/4) (action noise on [0, 1] means)
        let sd = (0.25f64 + 0.25).sqrt();
        assert!((mean - expected).abs() <= 3.0 * sd / t.sqrt());
    }

    #[test]
    fn true_value_examples() {
        // uniform policy on a constant row
        let env = small_env(vec![vec![0.4], vec![0.4]], 0.1, vec![0; 7], vec![0.0, 0.0]);
        let uni = SoftmaxPolicy::uniform(env.feature_map());
        assert!((env.true_value(&[uni], &env.schedule).unwrap() - 7.0 * 0.4).abs() < 1e-12);

        // K=2, one state, μ=[0.2,0.8], π=[0.25,0.75], T=4 → 2.6
        let env = small_env(vec![vec![0.2], vec![0.8]], 0.1, vec![0; 4], vec![0.0, 0.0]);
        let pi = SoftmaxPolicy::new(env.feature_map(), vec![0.0, 3f64.ln()]).unwrap();
        assert!((env.true_value(&[pi], &env.schedule).unwrap() - 2.6).abs() < 1e-12);
    }

    #[test]
    fn optimal_policies_attain_per_round_max() {
        let cfg = EnvConfig {
            horizon: 2000,
            change_period: 200,
            ..EnvConfig::default()
        };
        let env = generate_synthetic_env(&cfg, &mut SimRng::new(4)).unwrap();
        let opt = env.optimal_policies().unwrap();
        let v = env.true_value(&opt, &env.schedule).unwrap();
        let best: f64 = env.schedule.labels().iter().map(|&z| env.optimal_value(z)).sum();
        assert!((v - best).abs() < 1e-9);
    }

    #[test]
    fn missing_sub_policy_is_config_error() {
        let env = small_env(vec![vec![0.1, 0.2], vec![0.3, 0.4]], 0.1, vec![0, 1], vec![0.0, 0.0]);
        let uni = SoftmaxPolicy::uniform(env.feature_map());
        assert!(matches!(
            env.true_value(&[uni], &env.schedule),
            Err(crate::Error::Config(_))
        ));
    }
}
