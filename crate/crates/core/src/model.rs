//! Shared domain types: action spaces, contexts, joint feature maps,
//! linear softmax policies, logged interactions and latent-state sequences.
//!
//! Actions and latent states are 0-based in memory. The text formats in
//! [`crate::io`] are 1-based and convert at the boundary.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, data, input, Error, Result};
use crate::rng::SimRng;

/// Logit value used to build numerically deterministic softmax policies.
/// `exp(-GREEDY_LOGIT)` is still a positive normal `f64`.
pub const GREEDY_LOGIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    k: usize,
}

impl ActionSpace {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(config(format!("action space needs at least 2 actions, got {k}")));
        }
        Ok(Self { k })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, action: usize) -> bool {
        action < self.k
    }
}

/// A context is either an integer id (tabular problems) or a dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Context {
    Id(usize),
    Dense(Vec<f64>),
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Context::Id(id) => write!(f, "{id}"),
            Context::Dense(v) => {
                f.write_str("[")?;
                for (i, x) in v.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    write!(f, "{x}")?;
                }
                f.write_str("]")
            }
        }
    }
}

impl FromStr for Context {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| input(format!("unterminated context vector `{s}`")))?;
            let values = inner
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|e| input(format!("bad context component `{tok}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Context::Dense(values))
        } else {
            s.parse::<usize>()
                .map(Context::Id)
                .map_err(|e| input(format!("bad context id `{s}`: {e}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum FeatureMode {
    /// One-hot over (context id, action) pairs; `d = contexts * K`.
    TabularIndicator { contexts: usize },
    /// Per-action copy of a dense context vector; `d = dim * K`.
    Dense { dim: usize },
}

/// Joint context-action feature map `f(x, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub actions: usize,
    #[serde(flatten)]
    pub mode: FeatureMode,
}

impl FeatureMap {
    pub fn tabular(actions: usize, contexts: usize) -> Result<Self> {
        ActionSpace::new(actions)?;
        if contexts == 0 {
            return Err(config("tabular feature map needs at least one context"));
        }
        Ok(Self {
            actions,
            mode: FeatureMode::TabularIndicator { contexts },
        })
    }

    /// Indicator features of a problem without context (single context id 0).
    pub fn context_free(actions: usize) -> Result<Self> {
        Self::tabular(actions, 1)
    }

    pub fn dense(actions: usize, dim: usize) -> Result<Self> {
        ActionSpace::new(actions)?;
        if dim == 0 {
            return Err(config("dense feature map needs a positive context dimension"));
        }
        Ok(Self {
            actions,
            mode: FeatureMode::Dense { dim },
        })
    }

    /// Feature map matching the contexts of a log: tabular over the largest
    /// id seen, or dense with the common vector length.
    pub fn infer(actions: usize, data: &[LoggedInteraction]) -> Result<Self> {
        let first = data.first().ok_or_else(|| input("cannot infer features from an empty log"))?;
        match &first.context {
            Context::Id(_) => {
                let mut max_id = 0;
                for d in data {
                    match d.context {
                        Context::Id(id) => max_id = max_id.max(id),
                        Context::Dense(_) => return Err(input("log mixes context ids and vectors")),
                    }
                }
                Self::tabular(actions, max_id + 1)
            }
            Context::Dense(v) => {
                if data.iter().any(|d| !matches!(&d.context, Context::Dense(w) if w.len() == v.len())) {
                    return Err(input("context vectors must share one length"));
                }
                Self::dense(actions, v.len())
            }
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        ActionSpace { k: self.actions }
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        match self.mode {
            FeatureMode::TabularIndicator { contexts } => contexts * self.actions,
            FeatureMode::Dense { dim } => dim * self.actions,
        }
    }

    pub fn check_context(&self, ctx: &Context) -> Result<()> {
        match (self.mode, ctx) {
            (FeatureMode::TabularIndicator { contexts }, Context::Id(id)) if *id < contexts => {
                Ok(())
            }
            (FeatureMode::Dense { dim }, Context::Dense(v)) if v.len() == dim => Ok(()),
            _ => Err(config(format!(
                "context {ctx} is incompatible with feature map {:?}",
                self.mode
            ))),
        }
    }

    /// Materialized `f(x, a)`.
    pub fn features(&self, ctx: &Context, action: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.add_scaled(ctx, action, 1.0, &mut out);
        out
    }

    /// `wᵀ f(x, a)` without materializing the features.
    pub fn dot(&self, weights: &[f64], ctx: &Context, action: usize) -> f64 {
        match (self.mode, ctx) {
            (FeatureMode::TabularIndicator { .. }, Context::Id(id)) => {
                weights[id * self.actions + action]
            }
            (FeatureMode::Dense { dim }, Context::Dense(x)) => {
                let block = &weights[action * dim..(action + 1) * dim];
                block.iter().zip(x).map(|(w, v)| w * v).sum()
            }
            _ => f64::NAN,
        }
    }

    /// `out += scale * f(x, a)`.
    pub fn add_scaled(&self, ctx: &Context, action: usize, scale: f64, out: &mut [f64]) {
        match (self.mode, ctx) {
            (FeatureMode::TabularIndicator { .. }, Context::Id(id)) => {
                out[id * self.actions + action] += scale;
            }
            (FeatureMode::Dense { dim }, Context::Dense(x)) => {
                for (o, v) in out[action * dim..(action + 1) * dim].iter_mut().zip(x) {
                    *o += scale * v;
                }
            }
            _ => {}
        }
    }
}

/// In-place softmax with max-logit subtraction.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in logits.iter_mut() {
        *v /= total;
    }
}

/// Linear soft categorical policy `π(a | x; θ) ∝ exp(θᵀ f(x, a))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    feature_map: FeatureMap,
    theta: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(feature_map: FeatureMap, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != feature_map.dim() {
            return Err(config(format!(
                "theta has length {} but the feature map has dimension {}",
                theta.len(),
                feature_map.dim()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(config("theta contains non-finite values"));
        }
        Ok(Self { feature_map, theta })
    }

    pub fn uniform(feature_map: FeatureMap) -> Self {
        Self {
            feature_map,
            theta: vec![0.0; feature_map.dim()],
        }
    }

    /// Tabular policy that plays `action` in every context with probability
    /// `1` up to `f64` rounding.
    pub fn greedy(feature_map: FeatureMap, action: usize) -> Result<Self> {
        let FeatureMode::TabularIndicator { contexts } = feature_map.mode else {
            return Err(config("greedy policies require a tabular feature map"));
        };
        Self::greedy_per_context(feature_map, &vec![action; contexts])
    }

    /// Tabular policy playing `actions[c]` in context `c`.
    pub fn greedy_per_context(feature_map: FeatureMap, actions: &[usize]) -> Result<Self> {
        let FeatureMode::TabularIndicator { contexts } = feature_map.mode else {
            return Err(config("greedy policies require a tabular feature map"));
        };
        if actions.len() != contexts {
            return Err(config("one greedy action per context is required"));
        }
        let mut theta = vec![0.0; feature_map.dim()];
        for (c, &a) in actions.iter().enumerate() {
            if a >= feature_map.actions {
                return Err(config(format!("action {a} outside the action space")));
            }
            theta[c * feature_map.actions + a] = GREEDY_LOGIT;
        }
        Ok(Self { feature_map, theta })
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn num_actions(&self) -> usize {
        self.feature_map.actions
    }

    /// Writes `π(· | x)` into `out` (length `K`). The context is not validated.
    pub fn probs_into(&self, ctx: &Context, out: &mut [f64]) {
        for (a, o) in out.iter_mut().enumerate() {
            *o = self.feature_map.dot(&self.theta, ctx, a);
        }
        softmax_in_place(out);
    }

    pub fn action_distribution(&self, ctx: &Context) -> Result<Vec<f64>> {
        self.feature_map.check_context(ctx)?;
        let mut out = vec![0.0; self.num_actions()];
        self.probs_into(ctx, &mut out);
        Ok(out)
    }

    pub fn prob(&self, ctx: &Context, action: usize) -> Result<f64> {
        Ok(self.action_distribution(ctx)?[action])
    }

    pub fn sample_action(&self, ctx: &Context, rng: &mut SimRng) -> Result<usize> {
        let probs = self.action_distribution(ctx)?;
        Ok(rng.categorical(&probs))
    }
}

/// One logged round `(x_t, a_t, r_t, p_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedInteraction {
    pub t: usize,
    pub context: Context,
    pub action: usize,
    pub reward: f64,
    pub propensity: f64,
}

impl LoggedInteraction {
    pub fn validate(&self, actions: ActionSpace) -> Result<()> {
        if !(self.propensity > 0.0 && self.propensity <= 1.0) {
            return Err(data(format!(
                "round {}: propensity {} outside (0, 1]",
                self.t, self.propensity
            )));
        }
        if !actions.contains(self.action) {
            return Err(data(format!(
                "round {}: action {} outside the action space",
                self.t, self.action
            )));
        }
        if !self.reward.is_finite() {
            return Err(data(format!("round {}: non-finite reward", self.t)));
        }
        Ok(())
    }
}

pub fn validate_log(data: &[LoggedInteraction], actions: ActionSpace) -> Result<()> {
    data.iter().try_for_each(|d| d.validate(actions))
}

/// Maximal run of a constant latent label, `[start, end)` in round indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Per-round latent-state labels `z_{1:T}` over `L` states.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSequence {
    labels: Vec<usize>,
    num_states: usize,
}

impl LatentSequence {
    pub fn new(labels: Vec<usize>, num_states: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(input("latent sequence must be non-empty"));
        }
        if let Some(bad) = labels.iter().find(|&&z| z >= num_states) {
            return Err(input(format!("label {bad} outside [0, {num_states})")));
        }
        Ok(Self { labels, num_states })
    }

    /// Sequence with `num_states` equal to `1 + max(label)`.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let l = labels.iter().copied().max().map_or(0, |m| m + 1);
        Self::new(labels, l)
    }

    pub fn constant(len: usize, label: usize, num_states: usize) -> Result<Self> {
        Self::new(vec![label; len], num_states)
    }

    pub fn from_segments(segments: &[Segment], num_states: usize) -> Result<Self> {
        let mut labels = Vec::new();
        for s in segments {
            if s.start != labels.len() {
                return Err(input("segments must be contiguous and start at 0"));
            }
            labels.extend(std::iter::repeat_n(s.label, s.len()));
        }
        Self::new(labels, num_states)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, t: usize) -> usize {
        self.labels[t]
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut start = 0;
        for t in 1..=self.labels.len() {
            if t == self.labels.len() || self.labels[t] != self.labels[start] {
                out.push(Segment {
                    start,
                    end: t,
                    label: self.labels[start],
                });
                start = t;
            }
        }
        out
    }

    pub fn num_segments(&self) -> usize {
        1 + self.labels.windows(2).filter(|w| w[0] != w[1]).count()
    }

    /// Rounds `t` (0-based) at which a new segment starts, excluding `t = 0`.
    pub fn change_points(&self) -> Vec<usize> {
        (1..self.labels.len())
            .filter(|&t| self.labels[t] != self.labels[t - 1])
            .collect()
    }

    /// Number of rounds carrying each label.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_states];
        for &z in &self.labels {
            counts[z] += 1;
        }
        counts
    }

    /// Sequence rotated left by `shift` rounds (`z'_t = z_{(t + shift) mod T}`).
    pub fn shifted(&self, shift: usize) -> Self {
        let mut labels = self.labels.clone();
        let len = labels.len();
        labels.rotate_left(shift % len);
        Self {
            labels,
            num_states: self.num_states,
        }
    }
}
