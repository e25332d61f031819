//! Offline sliding-window change-point detection and segment clustering.
//!
//! For every round `t` with a full window on both sides the detector compares
//! the mean of the previous `w` rewards with the mean of the next `w`
//! rewards (including `t`). Rounds whose absolute difference reaches the
//! threshold `c` are candidates; the largest statistic is declared a
//! change-point, candidates within `2w` of it are discarded, and the process
//! repeats. A change-point `τ̂` closes its segment: rounds `t ≤ τ̂` carry the
//! earlier label.

use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::kmeans::{kmeans_1d, relabel_by_first_appearance};
use crate::model::{LatentSequence, LoggedInteraction};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Window size `w` in rounds.
    pub window: usize,
    /// Detection threshold `c` in reward units.
    pub threshold: f64,
    /// Lower bound `Δ̃` on the change magnitude, when the parameters were
    /// derived from it.
    pub delta_lower: Option<f64>,
}

impl DetectorConfig {
    pub fn new(window: usize, threshold: f64) -> Result<Self> {
        if window == 0 {
            return Err(config("detector window must be at least 1"));
        }
        if !(threshold > 0.0) {
            return Err(config(format!("detector threshold must be positive, got {threshold}")));
        }
        Ok(Self {
            window,
            threshold,
            delta_lower: None,
        })
    }

    /// `w = ⌈8 log(16T/δ) / Δ̃²⌉`, `c = Δ̃ / 2`.
    pub fn from_change_bound(horizon: usize, delta_lower: f64, delta: f64) -> Result<Self> {
        let (window, threshold) = theorem_params(horizon, delta_lower, delta)?;
        Ok(Self {
            window,
            threshold,
            delta_lower: Some(delta_lower),
        })
    }

    /// User-set window with `c = √(2 log(8T²) / w)`.
    pub fn with_horizon_threshold(horizon: usize, window: usize) -> Result<Self> {
        Self::new(window, horizon_threshold(horizon, window))
    }
}

/// Window and threshold guaranteeing detection of changes of size at least
/// `delta_lower` with probability `1 − delta`.
pub fn theorem_params(horizon: usize, delta_lower: f64, delta: f64) -> Result<(usize, f64)> {
    if !(delta_lower > 0.0) {
        return Err(input("change lower bound must be positive"));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(input("confidence delta must lie in (0, 1]"));
    }
    let log_term = (16.0 * horizon as f64 / delta).ln();
    let w = (8.0 * log_term / (delta_lower * delta_lower)).ceil() as usize;
    Ok((w.max(1), delta_lower / 2.0))
}

/// Threshold `√(2 log(8T²) / w)`, which meets the lower threshold condition
/// with `δ = 1/T`.
pub fn horizon_threshold(horizon: usize, window: usize) -> f64 {
    let t = horizon as f64;
    (2.0 * (8.0 * t * t).ln() / window as f64).sqrt()
}

/// Smallest threshold allowed for confidence `delta`: `√(2 log(8T/δ) / w)`.
pub fn threshold_floor(horizon: usize, window: usize, delta: f64) -> f64 {
    (2.0 * (8.0 * horizon as f64 / delta).ln() / window as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// `|μ⁻_t − μ⁺_t|` for 0-based rounds `first_round ..= T − w`.
    pub statistics: Vec<f64>,
    pub first_round: usize,
    /// Detected change-points (0-based rounds, ascending).
    pub change_points: Vec<usize>,
    /// Sequential segment ids.
    pub labels: LatentSequence,
}

impl DetectionResult {
    /// Statistic at 0-based round `t`, if computed.
    pub fn statistic(&self, t: usize) -> Option<f64> {
        t.checked_sub(self.first_round)
            .and_then(|i| self.statistics.get(i).copied())
    }
}

pub fn detect_change_points(rewards: &[f64], cfg: &DetectorConfig) -> Result<DetectionResult> {
    let w = cfg.window;
    let n = rewards.len();
    if w == 0 || !(cfg.threshold > 0.0) {
        return Err(config("invalid detector configuration"));
    }
    if n <= 2 * w {
        return Err(input(format!("need more than 2w = {} rewards, got {n}", 2 * w)));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(input("rewards must be finite"));
    }

    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for r in rewards {
        acc += r;
        prefix.push(acc);
    }
    let wf = w as f64;
    let statistics: Vec<f64> = (w..=n - w)
        .map(|s| {
            let before = (prefix[s] - prefix[s - w]) / wf;
            let after = (prefix[s + w] - prefix[s]) / wf;
            (before - after).abs()
        })
        .collect();

    let mut candidates: Vec<usize> = (0..statistics.len())
        .filter(|&i| statistics[i] >= cfg.threshold)
        .collect();
    // descending statistic, ties to the earliest round
    candidates.sort_by(|&a, &b| statistics[b].total_cmp(&statistics[a]).then(a.cmp(&b)));

    let mut removed = vec![false; statistics.len()];
    let mut change_points = Vec::new();
    for i in candidates {
        if removed[i] {
            continue;
        }
        change_points.push(i + w);
        let lo = i.saturating_sub(2 * w);
        let hi = (i + 2 * w).min(statistics.len() - 1);
        removed[lo..=hi].iter_mut().for_each(|r| *r = true);
    }
    change_points.sort_unstable();

    let mut labels = Vec::with_capacity(n);
    let mut seg = 0;
    for t in 0..n {
        if seg < change_points.len() && t > change_points[seg] {
            seg += 1;
        }
        labels.push(seg);
    }
    // a change-point on the final round closes the last segment with nothing after it
    let labels = LatentSequence::new(labels, seg + 1)?;
    Ok(DetectionResult {
        statistics,
        first_round: w,
        change_points,
        labels,
    })
}

/// Per-segment mean reward of the logged data.
pub fn segment_values(data: &[LoggedInteraction], labels: &LatentSequence) -> Result<Vec<f64>> {
    if data.len() != labels.len() {
        return Err(input("labels and data differ in length"));
    }
    Ok(labels
        .segments()
        .iter()
        .map(|s| data[s.start..s.end].iter().map(|d| d.reward).sum::<f64>() / s.len() as f64)
        .collect())
}

/// Restarts of the segment k-means.
pub const CLUSTER_RESTARTS: usize = 100;

/// Merges stationary segments with similar logging-policy value into at most
/// `k` latent states (ids in order of first appearance).
pub fn cluster_segments(
    data: &[LoggedInteraction],
    labels: &LatentSequence,
    k: usize,
    seed: u64,
) -> Result<LatentSequence> {
    if k == 0 {
        return Err(input("k must be at least 1"));
    }
    let segments = labels.segments();
    let values = segment_values(data, labels)?;
    let cluster_of_segment = if segments.len() <= k {
        (0..segments.len()).collect()
    } else {
        let mut rng = SimRng::named(seed, "cluster-segments");
        kmeans_1d(&values, k, CLUSTER_RESTARTS, &mut rng)
    };
    let cluster_of_segment = relabel_by_first_appearance(&cluster_of_segment);
    let states = cluster_of_segment.iter().max().map_or(1, |m| m + 1);
    let mut out = Vec::with_capacity(labels.len());
    for (s, c) in segments.iter().zip(&cluster_of_segment) {
        out.extend(std::iter::repeat_n(*c, s.len()));
    }
    LatentSequence::new(out, states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Context;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn hand_evaluated_step() {
        let rewards = [0., 0., 0., 0., 1., 1., 1., 1.];
        let res = detect_change_points(&rewards, &DetectorConfig::new(2, 0.5).unwrap()).unwrap();
        assert_eq!(res.statistics, vec![0.0, 0.5, 1.0, 0.5, 0.0]);
        assert_eq!(res.first_round + 1, 3);
        let one_based: Vec<usize> = res.change_points.iter().map(|t| t + 1).collect();
        assert_eq!(one_based, vec![5]);
        let labels: Vec<usize> = res.labels.labels().iter().map(|z| z + 1).collect();
        assert_eq!(labels, vec![1, 1, 1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn constant_stream_has_no_change() {
        let res = detect_change_points(&[0.3; 50], &DetectorConfig::new(5, 1e-9).unwrap()).unwrap();
        assert!(res.change_points.is_empty());
        assert!(res.labels.labels().iter().all(|&z| z == 0));
    }

    #[test]
    fn short_stream_is_input_error() {
        let err = detect_change_points(&[0.0; 4], &DetectorConfig::new(2, 0.1).unwrap());
        assert!(matches!(err, Err(crate::Error::Input(_))));
    }

    #[test]
    fn ties_break_to_earliest_round() {
        // two equal jumps far apart, both must be found; equal stats near each
        let mut r = vec![0.0; 40];
        r[10..20].iter_mut().for_each(|v| *v = 1.0);
        let res = detect_change_points(&r, &DetectorConfig::new(2, 0.5).unwrap()).unwrap();
        assert_eq!(res.change_points, vec![10, 20]);
    }

    #[test]
    fn single_shift_is_localized() {
        let mut hits = 0;
        for seed in 0..100 {
            let mut rng = SimRng::new(seed);
            let noise = Normal::new(0.0, 0.5).unwrap();
            let rewards: Vec<f64> = (0..1000)
                .map(|t| if t < 500 { 0.2 } else { 1.0 } + noise.sample(&mut rng))
                .collect();
            let res = detect_change_points(&rewards, &DetectorConfig::new(100, 0.4).unwrap()).unwrap();
            if res.change_points.len() == 1 && res.change_points[0].abs_diff(500) <= 100 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "{hits}/100");
    }

    #[test]
    fn theorem_parameter_rules() {
        let (w, c) = theorem_params(10_000, 0.4, 0.1).unwrap();
        assert_eq!(c, 0.2);
        assert_eq!(w, (8.0 * (16.0 * 10_000.0f64 / 0.1).ln() / 0.16).ceil() as usize);
        let (w2, _) = theorem_params(10_000, 0.8, 0.1).unwrap();
        assert!((w as f64 / w2 as f64 - 4.0).abs() < 0.01);
        let (w_loose, _) = theorem_params(10_000, 0.4, 1.0).unwrap();
        assert!(w_loose < w);
        let c_exp = horizon_threshold(100_000, 4000);
        assert!((c_exp - (2.0 * (8.0 * 1e10f64).ln() / 4000.0).sqrt()).abs() < 1e-15);
        assert!(theorem_params(10, 0.0, 0.1).is_err());
    }

    fn log_from_rewards(rewards: &[f64]) -> Vec<LoggedInteraction> {
        rewards
            .iter()
            .enumerate()
            .map(|(t, &r)| LoggedInteraction {
                t,
                context: Context::Id(0),
                action: 0,
                reward: r,
                propensity: 0.5,
            })
            .collect()
    }

    #[test]
    fn clustering_merges_similar_segments() {
        let rewards: Vec<f64> = [0.1; 4].iter().chain(&[0.9; 4]).chain(&[0.11; 4]).copied().collect();
        let data = log_from_rewards(&rewards);
        let segs = LatentSequence::new((0..12).map(|t| t / 4).collect(), 3).unwrap();
        let merged = cluster_segments(&data, &segs, 2, 0).unwrap();
        assert_eq!(merged.num_states(), 2);
        let seg_labels: Vec<usize> = merged.segments().iter().map(|s| s.label).collect();
        assert_eq!(seg_labels, vec![0, 1, 0]);

        let same = cluster_segments(&data, &segs, 3, 0).unwrap();
        assert_eq!(same, segs);
        let one = cluster_segments(&data, &segs, 1, 0).unwrap();
        assert!(one.labels().iter().all(|&z| z == 0));
        let more = cluster_segments(&data, &segs, 7, 0).unwrap();
        assert_eq!(more.num_states(), 3);
    }

    proptest::proptest! {
        #[test]
        fn detections_are_separated_and_above_threshold(
            rewards in proptest::collection::vec(0.0f64..1.0, 30..200),
            w in 1usize..8,
            c in 0.05f64..0.6,
        ) {
            proptest::prop_assume!(rewards.len() > 2 * w);
            let cfg = DetectorConfig::new(w, c).unwrap();
            let res = detect_change_points(&rewards, &cfg).unwrap();
            for pair in res.change_points.windows(2) {
                proptest::prop_assert!(pair[1] - pair[0] > 2 * w);
            }
            for &t in &res.change_points {
                proptest::prop_assert!(res.statistic(t).unwrap() >= c);
            }
            let interior = res.change_points.iter().filter(|&&t| t + 1 < rewards.len()).count();
            proptest::prop_assert_eq!(res.labels.num_segments(), interior + 1);
            let again = detect_change_points(&rewards, &cfg).unwrap();
            proptest::prop_assert_eq!(again, res);
        }
    }
}
