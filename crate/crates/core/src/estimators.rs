//! Off-policy value estimators: clipped IPS, latent-partitioned IPS, the
//! direct method and doubly robust, plus the clipped-policy-class check.
//!
//! All estimates are sums over rounds, not averages.

use serde::{Deserialize, Serialize};

use crate::error::{config, data, input, Result};
use crate::linalg::{NormalEquations, RIDGE};
use crate::model::{Context, FeatureMap, LatentSequence, LoggedInteraction, SoftmaxPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Ips,
    Dm,
    Dr,
}

impl std::str::FromStr for EstimatorKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ips" => Ok(Self::Ips),
            "dm" => Ok(Self::Dm),
            "dr" => Ok(Self::Dr),
            other => Err(input(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Clipping parameter `M`; infinite disables clipping.
    #[serde(with = "crate::serde_inf")]
    pub clip: f64,
    pub kind: EstimatorKind,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            clip: f64::INFINITY,
            kind: EstimatorKind::Ips,
        }
    }
}

impl EstimatorConfig {
    pub fn new(clip: f64, kind: EstimatorKind) -> Result<Self> {
        if !(clip > 0.0) {
            return Err(config(format!("clipping parameter must be positive, got {clip}")));
        }
        Ok(Self { clip, kind })
    }

    pub fn ips(clip: f64) -> Result<Self> {
        Self::new(clip, EstimatorKind::Ips)
    }
}

/// `min{M, π / p}`.
#[inline]
pub fn clipped_weight(target_prob: f64, propensity: f64, clip: f64) -> f64 {
    (target_prob / propensity).min(clip)
}

fn check_propensities(data_: &[LoggedInteraction]) -> Result<()> {
    match data_.iter().find(|d| !(d.propensity > 0.0)) {
        Some(d) => Err(data(format!("round {}: propensity {} is not positive", d.t, d.propensity))),
        None => Ok(()),
    }
}

fn check_labels(data_: &[LoggedInteraction], labels: &LatentSequence) -> Result<()> {
    if labels.len() != data_.len() {
        return Err(input(format!(
            "{} labels supplied for {} logged rounds",
            labels.len(),
            data_.len()
        )));
    }
    Ok(())
}

/// `V̂(π) = ∑_t min{M, π(a_t|x_t)/p_t} r_t`.
pub fn ips_estimate(
    data_: &[LoggedInteraction],
    policy: &SoftmaxPolicy,
    cfg: &EstimatorConfig,
) -> Result<f64> {
    check_propensities(data_)?;
    data_.iter().try_fold(0.0, |acc, d| {
        let p = policy.prob(&d.context, d.action)?;
        Ok(acc + clipped_weight(p, d.propensity, cfg.clip) * d.reward)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedEstimate {
    pub total: f64,
    /// `V̂_z(π_z)` per latent state.
    pub per_state: Vec<f64>,
}

/// Latent-partitioned IPS: round `t` is scored by sub-policy `ẑ_t`.
pub fn partitioned_ips_estimate(
    data_: &[LoggedInteraction],
    policies: &[SoftmaxPolicy],
    labels: &LatentSequence,
    cfg: &EstimatorConfig,
) -> Result<PartitionedEstimate> {
    check_propensities(data_)?;
    check_labels(data_, labels)?;
    if labels.num_states() > policies.len() {
        if let Some(z) = labels.labels().iter().find(|&&z| z >= policies.len()) {
            return Err(config(format!("no sub-policy for latent state {}", z + 1)));
        }
    }
    let mut per_state = vec![0.0; policies.len()];
    for (d, &z) in data_.iter().zip(labels.labels()) {
        let p = policies[z].prob(&d.context, d.action)?;
        per_state[z] += clipped_weight(p, d.propensity, cfg.clip) * d.reward;
    }
    Ok(PartitionedEstimate {
        total: per_state.iter().sum(),
        per_state,
    })
}

/// Linear reward model `r̂_z(x, a) = β̂_zᵀ f(x, a)`, one weight vector per
/// latent state or a single global vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub feature_map: FeatureMap,
    pub weights: Vec<Vec<f64>>,
    /// Residual standard deviation of the fit.
    pub sigma: f64,
}

impl RewardModel {
    pub fn new(feature_map: FeatureMap, weights: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| w.len() != feature_map.dim()) {
            return Err(config("reward model weights must match the feature dimension"));
        }
        Ok(Self {
            feature_map,
            weights,
            sigma,
        })
    }

    pub fn zero(feature_map: FeatureMap) -> Self {
        Self {
            feature_map,
            weights: vec![vec![0.0; feature_map.dim()]],
            sigma: 0.0,
        }
    }

    /// Least-squares fit on `(f(x_t, a_t), r_t)`, per latent state when
    /// labels are supplied.
    pub fn fit(
        data_: &[LoggedInteraction],
        feature_map: FeatureMap,
        labels: Option<&LatentSequence>,
    ) -> Result<Self> {
        if data_.is_empty() {
            return Err(input("cannot fit a reward model on empty data"));
        }
        let states = match labels {
            Some(l) => {
                check_labels(data_, l)?;
                l.num_states()
            }
            None => 1,
        };
        let state_of = |t: usize| labels.map_or(0, |l| l.get(t));
        let mut systems = vec![NormalEquations::new(feature_map.dim()); states];
        for (t, d) in data_.iter().enumerate() {
            feature_map.check_context(&d.context)?;
            systems[state_of(t)].add(&feature_map, &d.context, d.action, d.reward, 1.0);
        }
        let weights = systems
            .iter()
            .map(|s| s.solve(RIDGE))
            .collect::<Result<Vec<_>>>()?;
        let sse: f64 = data_
            .iter()
            .enumerate()
            .map(|(t, d)| {
                let e = d.reward - feature_map.dot(&weights[state_of(t)], &d.context, d.action);
                e * e
            })
            .sum();
        Ok(Self {
            feature_map,
            weights,
            sigma: (sse / data_.len() as f64).sqrt(),
        })
    }

    pub fn num_states(&self) -> usize {
        self.weights.len()
    }

    fn weights_for(&self, state: usize) -> &[f64] {
        if self.weights.len() == 1 {
            &self.weights[0]
        } else {
            &self.weights[state]
        }
    }

    pub fn predict(&self, state: usize, ctx: &Context, action: usize) -> f64 {
        self.feature_map.dot(self.weights_for(state), ctx, action)
    }
}

fn model_state(labels: Option<&LatentSequence>, model: &RewardModel, t: usize) -> Result<usize> {
    let z = labels.map_or(0, |l| l.get(t));
    if model.num_states() > 1 && z >= model.num_states() {
        return Err(config(format!("reward model has no state {}", z + 1)));
    }
    Ok(z)
}

/// Direct method `∑_t ∑_a π(a|x_t) r̂(x_t, a)`.
pub fn dm_estimate(
    data_: &[LoggedInteraction],
    policy: &SoftmaxPolicy,
    model: &RewardModel,
    labels: Option<&LatentSequence>,
) -> Result<f64> {
    if let Some(l) = labels {
        check_labels(data_, l)?;
    }
    let mut total = 0.0;
    for (t, d) in data_.iter().enumerate() {
        let z = model_state(labels, model, t)?;
        let probs = policy.action_distribution(&d.context)?;
        total += probs
            .iter()
            .enumerate()
            .map(|(a, p)| p * model.predict(z, &d.context, a))
            .sum::<f64>();
    }
    Ok(total)
}

/// Doubly robust `∑_t [∑_a π(a|x_t) r̂(x_t,a) + min{M, π(a_t|x_t)/p_t}(r_t − r̂(x_t,a_t))]`.
pub fn dr_estimate(
    data_: &[LoggedInteraction],
    policy: &SoftmaxPolicy,
    model: &RewardModel,
    labels: Option<&LatentSequence>,
    cfg: &EstimatorConfig,
) -> Result<f64> {
    check_propensities(data_)?;
    if let Some(l) = labels {
        check_labels(data_, l)?;
    }
    let mut total = 0.0;
    for (t, d) in data_.iter().enumerate() {
        let z = model_state(labels, model, t)?;
        let probs = policy.action_distribution(&d.context)?;
        let direct: f64 = probs
            .iter()
            .enumerate()
            .map(|(a, p)| p * model.predict(z, &d.context, a))
            .sum();
        let residual = d.reward - model.predict(z, &d.context, d.action);
        total += direct + clipped_weight(probs[d.action], d.propensity, cfg.clip) * residual;
    }
    Ok(total)
}

/// Dispatches on `cfg.kind`. DM and DR require a reward model.
pub fn estimate(
    data_: &[LoggedInteraction],
    policy: &SoftmaxPolicy,
    model: Option<&RewardModel>,
    labels: Option<&LatentSequence>,
    cfg: &EstimatorConfig,
) -> Result<f64> {
    match (cfg.kind, model) {
        (EstimatorKind::Ips, _) => ips_estimate(data_, policy, cfg),
        (EstimatorKind::Dm, Some(m)) => dm_estimate(data_, policy, m, labels),
        (EstimatorKind::Dr, Some(m)) => dr_estimate(data_, policy, m, labels, cfg),
        (_, None) => Err(config("DM and DR estimates need a reward model")),
    }
}

/// True iff `π(a|x) / π_0(a|x) ≤ M` for every sampled context and action.
pub fn clipped_class_membership(
    policy: &SoftmaxPolicy,
    logging: &SoftmaxPolicy,
    contexts: &[Context],
    clip: f64,
) -> Result<bool> {
    for ctx in contexts {
        let p = policy.action_distribution(ctx)?;
        let q = logging.action_distribution(ctx)?;
        if p.iter().zip(&q).any(|(pa, qa)| pa / qa > clip) {
            return Ok(false);
        }
    }
    Ok(true)
}
