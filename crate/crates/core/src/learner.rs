//! Offline policy learning on clipped importance-weighted objectives.
//!
//! Every objective is a sum over the rounds it sees:
//!
//! * `ips`: `Σ_t min{M, π(a_t|x_t)/p_t} r_t`
//! * `dr`: `Σ_t [Σ_a π(a|x_t) r̂(x_t, a) + min{M, π/p_t}(r_t − r̂(x_t, a_t))]`
//! * `poem`: the ips terms `u_t` penalized by `λ √(n · Var(u))`, i.e. `n`
//!   times `mean(u) − λ √(Var(u)/n)` with the unbiased sample variance
//!
//! plus `τ Σ_t H(π(·|x_t))`. A clipped weight contributes no gradient.
//! Tabular rounds are pooled by context, action and propensity before
//! optimization, so a step costs time in the number of such groups.
//! Optimization is plain gradient ascent on the per-round mean with the step
//! halved whenever the objective would decrease.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::estimators::RewardModel;
use crate::model::{softmax_in_place, Context, FeatureMap, FeatureMode, LatentSequence, LoggedInteraction, SoftmaxPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Ips,
    Dr,
    Poem,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ips" => Ok(Self::Ips),
            "dr" => Ok(Self::Dr),
            "poem" => Ok(Self::Poem),
            other => Err(input(format!("unknown objective `{other}`"))),
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ips => "ips",
            Self::Dr => "dr",
            Self::Poem => "poem",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Clipping parameter `M`.
    #[serde(with = "crate::serde_inf")]
    pub clip: f64,
    /// Entropy temperature `τ`.
    pub tau: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Consecutive halvings after which optimization stops.
    pub max_halvings: usize,
    /// Variance penalty `λ` of the poem objective.
    pub var_penalty: f64,
    pub kind: ObjectiveKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip: 100.0,
            tau: 0.01,
            steps: 2000,
            learning_rate: 0.05,
            max_halvings: 40,
            var_penalty: 1.0,
            kind: ObjectiveKind::Ips,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0) {
            return Err(config("clipping parameter must be positive"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(config("entropy temperature must be non-negative"));
        }
        if self.steps == 0 {
            return Err(config("training needs at least one step"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config("learning rate must be positive"));
        }
        if !(self.var_penalty >= 0.0 && self.var_penalty.is_finite()) {
            return Err(config("variance penalty must be non-negative"));
        }
        Ok(())
    }
}

/// Rounds sharing context, action and propensity. Within a group the
/// per-round term is affine in the reward, `u = α + β r`, so the objective
/// and its gradient only need the count and the first two reward moments.
#[derive(Debug, Clone)]
struct Group {
    context: usize,
    action: usize,
    propensity: f64,
    n: f64,
    s1: f64,
    s2: f64,
}

/// A training objective bound to the rounds of one partition.
pub struct Objective<'a> {
    feature_map: &'a FeatureMap,
    cfg: TrainConfig,
    rounds: usize,
    /// Distinct contexts (tabular) or one per round (dense).
    contexts: Vec<Context>,
    context_rounds: Vec<f64>,
    groups: Vec<Group>,
    /// `r̂(x, a)` per context and action, dr only.
    predictions: Option<Vec<f64>>,
}

impl<'a> Objective<'a> {
    /// `model` is required for dr; `state` selects its per-state weights.
    pub fn new(
        feature_map: &'a FeatureMap,
        rounds: Vec<&'a LoggedInteraction>,
        cfg: TrainConfig,
        model: Option<(&RewardModel, usize)>,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = feature_map.actions;
        let tabular = matches!(feature_map.mode, FeatureMode::TabularIndicator { .. });
        let mut contexts = Vec::new();
        let mut context_rounds = Vec::new();
        let mut groups: Vec<Group> = Vec::new();
        let mut context_index: HashMap<usize, usize> = HashMap::new();
        let mut group_index: HashMap<(usize, usize, u64), usize> = HashMap::new();
        for d in &rounds {
            feature_map.check_context(&d.context)?;
            if d.action >= k {
                return Err(input(format!("round {}: action {} out of range", d.t + 1, d.action + 1)));
            }
            if !(d.propensity > 0.0) {
                return Err(crate::error::data(format!("round {}: propensity is not positive", d.t + 1)));
            }
            let c = match (&d.context, tabular) {
                (Context::Id(id), true) => *context_index.entry(*id).or_insert_with(|| {
                    contexts.push(d.context.clone());
                    context_rounds.push(0.0);
                    contexts.len() - 1
                }),
                _ => {
                    contexts.push(d.context.clone());
                    context_rounds.push(0.0);
                    contexts.len() - 1
                }
            };
            context_rounds[c] += 1.0;
            let new_group = || Group {
                context: c,
                action: d.action,
                propensity: d.propensity,
                n: 0.0,
                s1: 0.0,
                s2: 0.0,
            };
            let g = if tabular {
                *group_index.entry((c, d.action, d.propensity.to_bits())).or_insert_with(|| {
                    groups.push(new_group());
                    groups.len() - 1
                })
            } else {
                groups.push(new_group());
                groups.len() - 1
            };
            let g = &mut groups[g];
            g.n += 1.0;
            g.s1 += d.reward;
            g.s2 += d.reward * d.reward;
        }
        let predictions = match (cfg.kind, model) {
            (ObjectiveKind::Dr, Some((m, z))) => Some(
                contexts
                    .iter()
                    .flat_map(|ctx| (0..k).map(move |a| m.predict(z, ctx, a)))
                    .collect(),
            ),
            (ObjectiveKind::Dr, None) => return Err(config("the dr objective needs a reward model")),
            _ => None,
        };
        Ok(Self {
            feature_map,
            cfg,
            rounds: rounds.len(),
            contexts,
            context_rounds,
            groups,
            predictions,
        })
    }

    pub fn len(&self) -> usize {
        self.rounds
    }

    pub fn is_empty(&self) -> bool {
        self.rounds == 0
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        self.evaluate(theta, false).0
    }

    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        self.evaluate(theta, true)
    }

    fn evaluate(&self, theta: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let fm = self.feature_map;
        let k = fm.actions;
        let cfg = &self.cfg;
        let mut grad = vec![0.0; if want_grad { theta.len() } else { 0 }];
        if self.rounds == 0 {
            return (0.0, grad);
        }

        let mut probs = vec![0.0; self.contexts.len() * k];
        let mut entropy = vec![0.0; self.contexts.len()];
        let mut model_term = vec![0.0; self.contexts.len()];
        for (c, ctx) in self.contexts.iter().enumerate() {
            let p = &mut probs[c * k..(c + 1) * k];
            for (a, o) in p.iter_mut().enumerate() {
                *o = fm.dot(theta, ctx, a);
            }
            softmax_in_place(p);
            entropy[c] = -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            if let Some(pred) = &self.predictions {
                model_term[c] = p.iter().zip(&pred[c * k..(c + 1) * k]).map(|(a, b)| a * b).sum();
            }
        }

        // u = α + β r per group
        let affine: Vec<(f64, f64, bool)> = self
            .groups
            .iter()
            .map(|g| {
                let ratio = probs[g.context * k + g.action] / g.propensity;
                let gated = ratio >= cfg.clip;
                let w = ratio.min(cfg.clip);
                let alpha = match &self.predictions {
                    Some(pred) => model_term[g.context] - w * pred[g.context * k + g.action],
                    None => 0.0,
                };
                (alpha, w, gated)
            })
            .collect();
        let mut sum_u = 0.0;
        let mut sum_u2 = 0.0;
        for (g, &(alpha, beta, _)) in self.groups.iter().zip(&affine) {
            sum_u += g.n * alpha + beta * g.s1;
            sum_u2 += g.n * alpha * alpha + 2.0 * alpha * beta * g.s1 + beta * beta * g.s2;
        }
        let n = self.rounds as f64;
        let entropy_total: f64 = entropy.iter().zip(&self.context_rounds).map(|(h, m)| h * m).sum();

        // poem: V = Σu − λ √(n S²); ∂V/∂u_t = 1 − κ (u_t − ū)
        let mut kappa = 0.0;
        let mut penalty = 0.0;
        let mean_u = sum_u / n;
        if cfg.kind == ObjectiveKind::Poem && self.rounds > 1 && cfg.var_penalty > 0.0 {
            let var = ((sum_u2 - sum_u * mean_u) / (n - 1.0)).max(0.0);
            penalty = cfg.var_penalty * (n * var).sqrt();
            if var > 0.0 {
                kappa = cfg.var_penalty * n.sqrt() / ((n - 1.0) * var.sqrt());
            }
        }
        let value = sum_u - penalty + cfg.tau * entropy_total;
        if !want_grad {
            return (value, grad);
        }

        let mut logit_grad = vec![0.0; probs.len()];
        for (g, &(alpha, beta, gated)) in self.groups.iter().zip(&affine) {
            let pi = &probs[g.context * k..(g.context + 1) * k];
            let lg = &mut logit_grad[g.context * k..(g.context + 1) * k];
            // Σ c_t and Σ c_t r_t over the group
            let u_sum = g.n * alpha + beta * g.s1;
            let ur_sum = alpha * g.s1 + beta * g.s2;
            let a_sum = g.n - kappa * (u_sum - g.n * mean_u);
            let b_sum = g.s1 - kappa * (ur_sum - mean_u * g.s1);
            let mut w_coef = b_sum;
            if let Some(pred) = &self.predictions {
                let rh = &pred[g.context * k..(g.context + 1) * k];
                let m = model_term[g.context];
                for b in 0..k {
                    lg[b] += a_sum * pi[b] * (rh[b] - m);
                }
                w_coef -= a_sum * rh[g.action];
            }
            if !gated {
                // ∂w/∂logit_b = w (1[b = a] − π_b)
                let s = w_coef * beta;
                for b in 0..k {
                    lg[b] -= s * pi[b];
                }
                lg[g.action] += s;
            }
        }
        if cfg.tau > 0.0 {
            for (c, &m) in self.context_rounds.iter().enumerate() {
                let pi = &probs[c * k..(c + 1) * k];
                let h = entropy[c];
                for b in 0..k {
                    if pi[b] > 0.0 {
                        logit_grad[c * k + b] -= cfg.tau * m * pi[b] * (pi[b].ln() + h);
                    }
                }
            }
        }
        for (c, ctx) in self.contexts.iter().enumerate() {
            for b in 0..k {
                let g = logit_grad[c * k + b];
                if g != 0.0 {
                    fm.add_scaled(ctx, b, g, &mut grad);
                }
            }
        }
        (value, grad)
    }
}

/// Objective and gradient of `theta` on `data`; dr fits a least-squares
/// reward model on the same rounds when none is given.
pub fn objective_and_gradient(
    theta: &[f64],
    data: &[LoggedInteraction],
    feature_map: &FeatureMap,
    cfg: &TrainConfig,
    model: Option<&RewardModel>,
) -> Result<(f64, Vec<f64>)> {
    if theta.len() != feature_map.dim() || theta.iter().any(|v| !v.is_finite()) {
        return Err(config("parameters must be finite and match the feature dimension"));
    }
    let fitted;
    let model = match (cfg.kind, model) {
        (ObjectiveKind::Dr, None) => {
            fitted = RewardModel::fit(data, *feature_map, None)?;
            Some((&fitted, 0))
        }
        (_, m) => m.map(|m| (m, 0)),
    };
    let obj = Objective::new(feature_map, data.iter().collect(), *cfg, model)?;
    Ok(obj.value_and_gradient(theta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDiagnostics {
    pub rounds: usize,
    /// Objective value at the start and after every accepted step.
    pub objective: Vec<f64>,
    pub halvings: usize,
    pub final_learning_rate: f64,
}

/// Gradient ascent from `theta`, halving the step whenever the objective
/// would decrease or become non-finite.
pub fn optimize(objective: &Objective<'_>, mut theta: Vec<f64>) -> (Vec<f64>, TrainingDiagnostics) {
    let cfg = &objective.cfg;
    let scale = 1.0 / objective.len().max(1) as f64;
    let (mut value, mut grad) = objective.value_and_gradient(&theta);
    let mut diag = TrainingDiagnostics {
        rounds: objective.len(),
        objective: vec![value],
        halvings: 0,
        final_learning_rate: cfg.learning_rate,
    };
    let mut lr = cfg.learning_rate;
    let mut candidate = vec![0.0; theta.len()];
    let mut step = 0;
    let mut failures = 0;
    while step < cfg.steps && failures <= cfg.max_halvings {
        if grad.iter().all(|g| *g == 0.0) {
            break;
        }
        for ((c, t), g) in candidate.iter_mut().zip(&theta).zip(&grad) {
            *c = t + lr * scale * g;
        }
        let (v, g) = objective.value_and_gradient(&candidate);
        if v.is_finite() && v >= value {
            std::mem::swap(&mut theta, &mut candidate);
            value = v;
            grad = g;
            diag.objective.push(v);
            step += 1;
            failures = 0;
        } else {
            lr *= 0.5;
            diag.halvings += 1;
            failures += 1;
        }
    }
    diag.final_learning_rate = lr;
    (theta, diag)
}

/// One learned softmax sub-policy per latent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub sub_policies: Vec<SoftmaxPolicy>,
    pub diagnostics: Vec<TrainingDiagnostics>,
}

impl PolicyBundle {
    /// A bundle without training history.
    pub fn from_policies(sub_policies: Vec<SoftmaxPolicy>) -> Result<Self> {
        let first = sub_policies.first().ok_or_else(|| config("a bundle needs at least one sub-policy"))?;
        if sub_policies.iter().any(|p| p.feature_map() != first.feature_map()) {
            return Err(config("sub-policies must share one feature map"));
        }
        Ok(Self {
            sub_policies,
            diagnostics: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.sub_policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sub_policies.is_empty()
    }

    pub fn feature_map(&self) -> &FeatureMap {
        self.sub_policies[0].feature_map()
    }

    pub fn num_actions(&self) -> usize {
        self.feature_map().actions
    }
}

fn train_partition(
    fm: &FeatureMap,
    rounds: Vec<&LoggedInteraction>,
    cfg: &TrainConfig,
    model: Option<(&RewardModel, usize)>,
) -> Result<(SoftmaxPolicy, TrainingDiagnostics)> {
    let obj = Objective::new(fm, rounds, *cfg, model)?;
    let (theta, diag) = optimize(&obj, vec![0.0; fm.dim()]);
    Ok((SoftmaxPolicy::new(*fm, theta)?, diag))
}

/// Trains sub-policy `z` on the rounds labeled `z` only, all states in
/// parallel.
pub fn train_sub_policies(
    data: &[LoggedInteraction],
    labels: &LatentSequence,
    feature_map: &FeatureMap,
    cfg: &TrainConfig,
) -> Result<PolicyBundle> {
    cfg.validate()?;
    if labels.len() != data.len() {
        return Err(input(format!("{} labels for {} logged rounds", labels.len(), data.len())));
    }
    let model = match cfg.kind {
        ObjectiveKind::Dr => Some(RewardModel::fit(data, *feature_map, Some(labels))?),
        _ => None,
    };
    let mut partitions: Vec<Vec<&LoggedInteraction>> = vec![Vec::new(); labels.num_states()];
    for (d, &z) in data.iter().zip(labels.labels()) {
        partitions[z].push(d);
    }
    let trained: Vec<Result<(SoftmaxPolicy, TrainingDiagnostics)>> = partitions
        .into_par_iter()
        .enumerate()
        .map(|(z, rounds)| {
            if rounds.is_empty() {
                log::warn!("latent state {} has no rounds; using the uniform policy", z + 1);
                return Ok((
                    SoftmaxPolicy::uniform(*feature_map),
                    TrainingDiagnostics {
                        rounds: 0,
                        objective: Vec::new(),
                        halvings: 0,
                        final_learning_rate: cfg.learning_rate,
                    },
                ));
            }
            train_partition(feature_map, rounds, cfg, model.as_ref().map(|m| (m, z)))
        })
        .collect();
    let (sub_policies, diagnostics) = trained.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok(PolicyBundle {
        sub_policies,
        diagnostics,
    })
}

/// A single policy trained on all rounds, as a one-expert bundle.
pub fn train_stationary_bundle(
    data: &[LoggedInteraction],
    feature_map: &FeatureMap,
    cfg: &TrainConfig,
) -> Result<PolicyBundle> {
    if data.is_empty() {
        return Err(input("cannot train on empty data"));
    }
    let labels = LatentSequence::constant(data.len(), 0, 1)?;
    train_sub_policies(data, &labels, feature_map, cfg)
}

pub fn train_stationary_baseline(
    data: &[LoggedInteraction],
    feature_map: &FeatureMap,
    cfg: &TrainConfig,
) -> Result<SoftmaxPolicy> {
    Ok(train_stationary_bundle(data, feature_map, cfg)?.sub_policies.remove(0))
}

/// Per-action IPS values `V̂_a = n⁻¹ Σ_{t: a_t = a} r_t / p_t` of
/// context-free data.
pub fn context_free_action_values(data: &[LoggedInteraction], actions: usize) -> Vec<f64> {
    let mut v = vec![0.0; actions];
    for d in data {
        v[d.action] += d.reward / d.propensity;
    }
    let n = data.len().max(1) as f64;
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Maximizer of `Σ_a π(a) V_a + τ H(π)`: `π ∝ exp(V_a / τ)`.
pub fn entropy_regularized_softmax(values: &[f64], tau: f64) -> Vec<f64> {
    let mut logits: Vec<f64> = values.iter().map(|v| v / tau).collect();
    softmax_in_place(&mut logits);
    logits
}
