//! One-dimensional k-means with k-means++ seeding and restarts.

use crate::rng::SimRng;

const MAX_LLOYD_ITERS: usize = 100;

/// Cluster assignment of each value, ids relabeled `0..k'` in order of first
/// appearance. Keeps the restart with the lowest within-cluster sum of squares.
pub fn kmeans_1d(values: &[f64], k: usize, restarts: usize, rng: &mut SimRng) -> Vec<usize> {
    if values.is_empty() {
        return Vec::new();
    }
    let k = k.clamp(1, values.len());
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let centers = plus_plus_init(values, k, rng);
        let (assign, inertia) = lloyd(values, centers);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    relabel_by_first_appearance(&best.expect("at least one restart").1)
}

fn plus_plus_init(values: &[f64], k: usize, rng: &mut SimRng) -> Vec<f64> {
    let n = values.len();
    let mut centers = vec![values[(rng.uniform() * n as f64) as usize % n]];
    let mut d2: Vec<f64> = values.iter().map(|v| (v - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let probs: Vec<f64> = d2.iter().map(|d| d / total).collect();
            values[rng.categorical(&probs)]
        } else {
            values[(rng.uniform() * n as f64) as usize % n]
        };
        centers.push(next);
        for (d, v) in d2.iter_mut().zip(values) {
            *d = d.min((v - next).powi(2));
        }
    }
    centers
}

fn nearest(centers: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (j, c) in centers.iter().enumerate() {
        if (v - c).abs() < (v - centers[best]).abs() {
            best = j;
        }
    }
    best
}

fn lloyd(values: &[f64], mut centers: Vec<f64>) -> (Vec<usize>, f64) {
    let mut assign: Vec<usize> = values.iter().map(|&v| nearest(&centers, v)).collect();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = vec![0.0; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (&a, &v) in assign.iter().zip(values) {
            sums[a] += v;
            counts[a] += 1;
        }
        for j in 0..centers.len() {
            if counts[j] > 0 {
                centers[j] = sums[j] / counts[j] as f64;
            }
        }
        let next: Vec<usize> = values.iter().map(|&v| nearest(&centers, v)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    let inertia = assign
        .iter()
        .zip(values)
        .map(|(&a, v)| (v - centers[a]).powi(2))
        .sum();
    (assign, inertia)
}

pub(crate) fn relabel_by_first_appearance(ids: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    ids.iter()
        .map(|id| {
            let next = map.len();
            *map.entry(*id).or_insert(next)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive optimum over all assignments of a handful of points.
    fn brute_force(values: &[f64], k: usize) -> Vec<usize> {
        let n = values.len();
        let mut best = (f64::INFINITY, vec![]);
        for code in 0..k.pow(n as u32) {
            let assign: Vec<usize> = (0..n).map(|i| (code / k.pow(i as u32)) % k).collect();
            let mut cost = 0.0;
            for j in 0..k {
                let members: Vec<f64> = (0..n).filter(|&i| assign[i] == j).map(|i| values[i]).collect();
                if members.is_empty() {
                    continue;
                }
                let m = members.iter().sum::<f64>() / members.len() as f64;
                cost += members.iter().map(|v| (v - m).powi(2)).sum::<f64>();
            }
            if cost < best.0 - 1e-15 {
                best = (cost, assign);
            }
        }
        relabel_by_first_appearance(&best.1)
    }

    #[test]
    fn three_points_two_clusters() {
        let values = [0.1, 0.9, 0.11];
        let got = kmeans_1d(&values, 2, 100, &mut SimRng::new(0));
        assert_eq!(got, vec![0, 1, 0]);
        assert_eq!(got, brute_force(&values, 2));
    }

    #[test]
    fn matches_exhaustive_search_on_small_sets() {
        let mut rng = SimRng::new(17);
        for _ in 0..30 {
            let values: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
            let got = kmeans_1d(&values, 3, 100, &mut SimRng::new(1));
            assert_eq!(got, brute_force(&values, 3), "values {values:?}");
        }
    }

    #[test]
    fn k_one_and_k_equal_n() {
        let values = [0.3, 0.7, 0.1];
        assert_eq!(kmeans_1d(&values, 1, 10, &mut SimRng::new(0)), vec![0, 0, 0]);
        assert_eq!(kmeans_1d(&values, 3, 10, &mut SimRng::new(0)), vec![0, 1, 2]);
    }
}
