//! K-means over integer-coded instances and round-robin seed selection.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::schema::Instance;

pub const MAX_ITERATIONS: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
}

impl ClusterModel {
    /// Row indices of cluster `c`, in dataset order.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == c)
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; the lowest index wins ties.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm from a k-means++ initialisation.
///
/// Stops when assignments no longer change or after [`MAX_ITERATIONS`].
/// When `k` exceeds the number of distinct points it is reduced to that
/// number. Empty clusters are re-seeded with the point farthest from its
/// centroid.
pub fn kmeans(data: &[Instance], k: usize, rng_seed: u64, exec: Execution) -> Result<ClusterModel> {
    if data.is_empty() {
        return Err(Error::Config("cannot cluster an empty dataset".into()));
    }
    if k == 0 {
        return Err(Error::Config("cluster count must be at least 1".into()));
    }
    let points: Vec<Vec<f64>> = data.iter().map(Instance::to_real).collect();
    let distinct = data.iter().collect::<HashSet<_>>().len();
    let k = if k > distinct {
        log::warn!("k = {k} exceeds {distinct} distinct points; using k = {distinct}");
        distinct
    } else {
        k
    };

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut centroids = init_plus_plus(&points, k, &mut rng);
    let mut assignments: Vec<usize> = vec![usize::MAX; points.len()];

    for iter in 0..MAX_ITERATIONS {
        let nearest_all = exec.map(&points, |_, p| nearest(p, &centroids));
        let new_assign: Vec<usize> = nearest_all.iter().map(|n| n.0).collect();
        let changed = new_assign != assignments;
        assignments = new_assign;
        if !changed {
            log::debug!("k-means converged after {iter} iterations");
            break;
        }

        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken: HashSet<usize> = HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                continue;
            }
            // Farthest point from its assigned centroid, not already used to
            // re-seed another empty cluster in this round.
            let far = (0..points.len())
                .filter(|i| !taken.contains(i))
                .max_by(|&a, &b| {
                    nearest_all[a]
                        .1
                        .partial_cmp(&nearest_all[b].1)
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .expect("k never exceeds the number of points");
            taken.insert(far);
            log::debug!("re-seeding empty cluster {c} from point {far}");
            centroids[c] = points[far].clone();
        }
    }

    Ok(ClusterModel {
        k,
        centroids,
        assignments,
    })
}

fn init_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Only duplicates of existing centroids remain; cannot happen when
            // k ≤ distinct points, kept for robustness against rounding.
            rng.random_range(0..points.len())
        };
        let c = points[next].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Draws `count` seeds cycling through clusters `0, 1, …, k−1, 0, …`,
/// taking members of each cluster in dataset order.
///
/// When `count` is at least the dataset size, clusters that have run out of
/// unvisited members are skipped until every instance has been emitted
/// once; after that (and always when `count` is smaller) each cluster wraps
/// around its own members.
pub fn round_robin_seeds(clusters: &ClusterModel, data: &[Instance], count: usize) -> Vec<Instance> {
    let groups: Vec<Vec<usize>> = (0..clusters.k)
        .map(|c| clusters.members(c))
        .filter(|m| !m.is_empty())
        .collect();
    if groups.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut cursors = vec![0usize; groups.len()];
    let mut out = Vec::with_capacity(count);
    let mut g = 0;

    if count >= data.len() {
        while out.len() < data.len() {
            if cursors[g] < groups[g].len() {
                out.push(data[groups[g][cursors[g]]].clone());
                cursors[g] += 1;
            }
            g = (g + 1) % groups.len();
        }
    }
    while out.len() < count {
        let members = &groups[g];
        out.push(data[members[cursors[g] % members.len()]].clone());
        cursors[g] += 1;
        g = (g + 1) % groups.len();
    }
    out
}
