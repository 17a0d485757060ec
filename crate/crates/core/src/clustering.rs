//! K-means over user positions: k-means++ seeding, Lloyd iterations,
//! empty-cluster repair, and best-of-restarts selection.
//!
//! Cluster centroids double as UAV hover positions, so every cluster must
//! end up non-empty and results must be reproducible from the seed.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::Point2;

#[derive(Debug, Error)]
pub enum ClusteringError {
    #[error("cannot form {k} clusters from {n} points")]
    TooManyClusters { k: usize, n: usize },
    #[error("no points to cluster")]
    NoPoints,
    #[error("restarts must be at least 1")]
    NoRestarts,
}

/// Result of clustering: centroids, per-point labels, per-cluster sizes, and
/// the objective value (sum of squared point-to-centroid distances).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub centroids: Vec<Point2>,
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    /// Point indices per cluster, ascending within each cluster.
    pub fn member_lists(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.centroids.len()];
        for (i, &label) in self.labels.iter().enumerate() {
            members[label].push(i);
        }
        members
    }

    /// For each point, its position within its own cluster's member list.
    pub fn slot_indices(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.centroids.len()];
        self.labels
            .iter()
            .map(|&label| {
                let slot = counts[label];
                counts[label] += 1;
                slot
            })
            .collect()
    }

    /// Structural consistency: labels in range, sizes matching label counts.
    pub fn is_consistent(&self) -> bool {
        let k = self.centroids.len();
        if self.sizes.len() != k {
            return false;
        }
        let mut counts = vec![0usize; k];
        for &label in &self.labels {
            if label >= k {
                return false;
            }
            counts[label] += 1;
        }
        counts == self.sizes
    }
}

/// Index of the nearest centroid; ties break toward the lowest index.
fn nearest(point: &Point2, centroids: &[Point2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = point.dist_sq(c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn inertia_of(positions: &[Point2], centroids: &[Point2], labels: &[usize]) -> f64 {
    positions
        .iter()
        .zip(labels)
        .map(|(p, &l)| p.dist_sq(&centroids[l]))
        .sum()
}

/// One Lloyd iteration: assign points to the incoming centroids (ties to the
/// lowest index), then recompute centroids as the mean of their members. The
/// returned inertia is measured against the incoming centroids. A cluster
/// left empty keeps its incoming centroid.
pub fn lloyd_step(
    positions: &[Point2],
    centroids: &[Point2],
) -> (Vec<usize>, Vec<Point2>, f64) {
    assert!(!centroids.is_empty(), "centroids must be non-empty");
    let labels: Vec<usize> = positions.iter().map(|p| nearest(p, centroids)).collect();
    let inertia = inertia_of(positions, centroids, &labels);
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); centroids.len()];
    for (p, &l) in positions.iter().zip(&labels) {
        sums[l].0 += p.x;
        sums[l].1 += p.y;
        sums[l].2 += 1;
    }
    let new_centroids = sums
        .iter()
        .zip(centroids)
        .map(|(&(sx, sy, n), old)| {
            if n == 0 {
                *old
            } else {
                Point2::new(sx / n as f64, sy / n as f64)
            }
        })
        .collect();
    (labels, new_centroids, inertia)
}

/// Greedy k-means++ seeding: first center uniform, then for each further
/// center several D^2-weighted candidates are drawn and the one that lowers
/// the potential most is kept.
fn seed_centroids<R: Rng + ?Sized>(
    positions: &[Point2],
    k: usize,
    rng: &mut R,
) -> Vec<Point2> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(positions[rng.gen_range(0..positions.len())]);
    let mut dist_sq: Vec<f64> = positions
        .iter()
        .map(|p| p.dist_sq(&centroids[0]))
        .collect();
    let local_trials = 2 + (k as f64).ln().floor() as usize;
    while centroids.len() < k {
        let total: f64 = dist_sq.iter().sum();
        let mut best: Option<(usize, f64)> = None;
        for _ in 0..local_trials {
            let pick = if total > 0.0 {
                let mut target = rng.gen::<f64>() * total;
                let mut chosen = positions.len() - 1;
                for (i, &d) in dist_sq.iter().enumerate() {
                    target -= d;
                    if target <= 0.0 {
                        chosen = i;
                        break;
                    }
                }
                chosen
            } else {
                // All remaining mass is zero (duplicate points); fall back
                // to a uniform pick so we still emit k centers.
                rng.gen_range(0..positions.len())
            };
            let candidate = positions[pick];
            let potential: f64 = positions
                .iter()
                .zip(&dist_sq)
                .map(|(p, &d)| d.min(p.dist_sq(&candidate)))
                .sum();
            let better = match best {
                Some((_, bp)) => potential < bp,
                None => true,
            };
            if better {
                best = Some((pick, potential));
            }
        }
        let c = positions[best.unwrap().0];
        for (d, p) in dist_sq.iter_mut().zip(positions) {
            *d = d.min(p.dist_sq(&c));
        }
        centroids.push(c);
    }
    centroids
}

/// Move the point farthest from its centroid into each empty cluster as a
/// singleton, never draining a cluster below one member.
fn repair_empty_clusters(
    positions: &[Point2],
    centroids: &mut [Point2],
    labels: &mut [usize],
) {
    loop {
        let mut counts = vec![0usize; centroids.len()];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut donor: Option<(usize, f64)> = None;
        for (i, p) in positions.iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = p.dist_sq(&centroids[labels[i]]);
            let better = match donor {
                Some((_, best)) => d > best,
                None => true,
            };
            if better {
                donor = Some((i, d));
            }
        }
        let (idx, _) = donor.expect("k <= n guarantees a donor cluster with >= 2 members");
        labels[idx] = empty;
        centroids[empty] = positions[idx];
    }
}

/// Post-Lloyd polish: exact-gain single-point transfers and pairwise swaps
/// between clusters, applied until no move lowers the objective. Lloyd's
/// assignment step only sees point-to-centroid distances, so on small
/// instances it routinely parks in optima that a one- or two-point exchange
/// (with the centroids re-settling) would improve; these sweeps close that
/// gap. Every accepted move strictly decreases inertia, so the loop
/// terminates.
fn transfer_refine(
    positions: &[Point2],
    centroids: &mut [Point2],
    labels: &mut [usize],
    scan: &[usize],
) -> bool {
    let k = centroids.len();
    let mut any_move = false;
    let mut sums: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); k];
    for (p, &l) in positions.iter().zip(labels.iter()) {
        sums[l].0 += p.x;
        sums[l].1 += p.y;
        sums[l].2 += 1;
    }
    let refresh = |sums: &[(f64, f64, usize)], centroids: &mut [Point2], j: usize| {
        centroids[j] = Point2::new(sums[j].0 / sums[j].2 as f64, sums[j].1 / sums[j].2 as f64);
    };
    for sweep in 0..500 {
        let mut moved = false;
        // Single-point transfers (never drain a cluster).
        for &i in scan {
            let p = &positions[i];
            let from = labels[i];
            let from_count = sums[from].2;
            if from_count <= 1 {
                continue;
            }
            let removal_gain =
                from_count as f64 / (from_count - 1) as f64 * p.dist_sq(&centroids[from]);
            let mut best: Option<(usize, f64)> = None;
            for (j, c) in centroids.iter().enumerate() {
                if j == from {
                    continue;
                }
                let count = sums[j].2;
                let add_cost = count as f64 / (count + 1) as f64 * p.dist_sq(c);
                let better = match best {
                    Some((_, b)) => add_cost < b,
                    None => true,
                };
                if better {
                    best = Some((j, add_cost));
                }
            }
            let Some((to, add_cost)) = best else { continue };
            if add_cost < removal_gain - 1e-12 * removal_gain.max(1.0) {
                sums[from].0 -= p.x;
                sums[from].1 -= p.y;
                sums[from].2 -= 1;
                sums[to].0 += p.x;
                sums[to].1 += p.y;
                sums[to].2 += 1;
                refresh(&sums, centroids, from);
                refresh(&sums, centroids, to);
                labels[i] = to;
                moved = true;
            }
        }
        // Two-point moves: exchange a pair between two clusters, or shift a
        // pair together into another cluster. The exact objective change
        // falls out of the identity I = sum ||x||^2 - n ||c||^2.
        if !moved {
            let norm = |p: Point2| p.x * p.x + p.y * p.y;
            'pairs: for (si, &i) in scan.iter().enumerate() {
                for &j in &scan[si + 1..] {
                    let (a, b) = (labels[i], labels[j]);
                    let (pi, pj) = (positions[i], positions[j]);
                    if a != b {
                        // Swap: counts stay fixed.
                        let (ca, cb) = (centroids[a], centroids[b]);
                        let (na, nb) = (sums[a].2 as f64, sums[b].2 as f64);
                        let ca_next =
                            Point2::new(ca.x + (pj.x - pi.x) / na, ca.y + (pj.y - pi.y) / na);
                        let cb_next =
                            Point2::new(cb.x + (pi.x - pj.x) / nb, cb.y + (pi.y - pj.y) / nb);
                        let delta = na * norm(ca) - na * norm(ca_next) + nb * norm(cb)
                            - nb * norm(cb_next);
                        if delta < -1e-9 {
                            sums[a].0 += pj.x - pi.x;
                            sums[a].1 += pj.y - pi.y;
                            sums[b].0 += pi.x - pj.x;
                            sums[b].1 += pi.y - pj.y;
                            refresh(&sums, centroids, a);
                            refresh(&sums, centroids, b);
                            labels[i] = b;
                            labels[j] = a;
                            moved = true;
                            break 'pairs;
                        }
                    } else {
                        // Both points sit in cluster a. Try moving the pair
                        // into another cluster outright (counts a-2, t+2),
                        // or trading the pair for one point of the target
                        // (counts a-1, t+1). Point-norm terms cancel, so
                        // each delta is just the centroid terms
                        // n_old ||c_old||^2 - n_new ||c_new||^2 per cluster.
                        let na = sums[a].2 as f64;
                        let ca = centroids[a];
                        if sums[a].2 >= 3 {
                            let ca_next = Point2::new(
                                (na * ca.x - pi.x - pj.x) / (na - 2.0),
                                (na * ca.y - pi.y - pj.y) / (na - 2.0),
                            );
                            let source_delta = na * norm(ca) - (na - 2.0) * norm(ca_next);
                            for (t, ct) in centroids.iter().enumerate() {
                                if t == a {
                                    continue;
                                }
                                let nt = sums[t].2 as f64;
                                let ct_next = Point2::new(
                                    (nt * ct.x + pi.x + pj.x) / (nt + 2.0),
                                    (nt * ct.y + pi.y + pj.y) / (nt + 2.0),
                                );
                                let target_delta = nt * norm(*ct) - (nt + 2.0) * norm(ct_next);
                                if source_delta + target_delta < -1e-9 {
                                    sums[a].0 -= pi.x + pj.x;
                                    sums[a].1 -= pi.y + pj.y;
                                    sums[a].2 -= 2;
                                    sums[t].0 += pi.x + pj.x;
                                    sums[t].1 += pi.y + pj.y;
                                    sums[t].2 += 2;
                                    refresh(&sums, centroids, a);
                                    refresh(&sums, centroids, t);
                                    labels[i] = t;
                                    labels[j] = t;
                                    moved = true;
                                    break 'pairs;
                                }
                            }
                        }
                        for &m in scan {
                            let t = labels[m];
                            if t == a {
                                continue;
                            }
                            let pm = positions[m];
                            let nt = sums[t].2 as f64;
                            let ct = centroids[t];
                            let ca_next = Point2::new(
                                (na * ca.x - pi.x - pj.x + pm.x) / (na - 1.0),
                                (na * ca.y - pi.y - pj.y + pm.y) / (na - 1.0),
                            );
                            let ct_next = Point2::new(
                                (nt * ct.x + pi.x + pj.x - pm.x) / (nt + 1.0),
                                (nt * ct.y + pi.y + pj.y - pm.y) / (nt + 1.0),
                            );
                            let delta = na * norm(ca) - (na - 1.0) * norm(ca_next)
                                + nt * norm(ct)
                                - (nt + 1.0) * norm(ct_next);
                            if delta < -1e-9 {
                                sums[a].0 += pm.x - pi.x - pj.x;
                                sums[a].1 += pm.y - pi.y - pj.y;
                                sums[a].2 -= 1;
                                sums[t].0 += pi.x + pj.x - pm.x;
                                sums[t].1 += pi.y + pj.y - pm.y;
                                sums[t].2 += 1;
                                refresh(&sums, centroids, a);
                                refresh(&sums, centroids, t);
                                labels[i] = t;
                                labels[j] = t;
                                labels[m] = a;
                                moved = true;
                                break 'pairs;
                            }
                        }
                    }
                }
            }
        }
        if !moved {
            return any_move;
        }
        any_move = true;
        debug_assert!(sweep < 499, "transfer refinement failed to settle");
    }
    any_move
}

/// Full k-means: `restarts` independent k-means++ seedings, Lloyd iterations
/// until centroid movement drops to `tol` meters (or `max_iter`), a
/// single-point transfer polish per restart, empty clusters re-seeded to the
/// farthest point, lowest-inertia restart returned. Deterministic for a
/// given random stream.
pub fn kmeans<R: Rng + ?Sized>(
    positions: &[Point2],
    k: usize,
    rng: &mut R,
    restarts: usize,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterAssignment, ClusteringError> {
    if positions.is_empty() {
        return Err(ClusteringError::NoPoints);
    }
    if k == 0 || k > positions.len() {
        return Err(ClusteringError::TooManyClusters {
            k,
            n: positions.len(),
        });
    }
    if restarts == 0 {
        return Err(ClusteringError::NoRestarts);
    }

    let mut best: Option<ClusterAssignment> = None;
    for _ in 0..restarts {
        let mut centroids = seed_centroids(positions, k, rng);
        let mut labels = vec![0usize; positions.len()];
        // Per-restart scan order decorrelates the polish paths, so restarts
        // explore different descent sequences from similar seeds.
        let mut scan: Vec<usize> = (0..positions.len()).collect();
        for i in (1..scan.len()).rev() {
            scan.swap(i, rng.gen_range(0..=i));
        }
        // Alternate Lloyd descent and the transfer/swap polish until the
        // pair reaches a joint fixed point.
        for _ in 0..8 {
            for _ in 0..max_iter {
                for (label, p) in labels.iter_mut().zip(positions) {
                    *label = nearest(p, &centroids);
                }
                repair_empty_clusters(positions, &mut centroids, &mut labels);
                let mut sums = vec![(0.0f64, 0.0f64, 0usize); k];
                for (p, &l) in positions.iter().zip(&labels) {
                    sums[l].0 += p.x;
                    sums[l].1 += p.y;
                    sums[l].2 += 1;
                }
                let mut shift_sq = 0.0f64;
                for (j, &(sx, sy, n)) in sums.iter().enumerate() {
                    debug_assert!(n > 0);
                    let next = Point2::new(sx / n as f64, sy / n as f64);
                    shift_sq = shift_sq.max(next.dist_sq(&centroids[j]));
                    centroids[j] = next;
                }
                if shift_sq <= tol * tol {
                    break;
                }
            }
            for (label, p) in labels.iter_mut().zip(positions) {
                *label = nearest(p, &centroids);
            }
            repair_empty_clusters(positions, &mut centroids, &mut labels);
            if !transfer_refine(positions, &mut centroids, &mut labels, &scan) {
                break;
            }
        }
        let inertia = inertia_of(positions, &centroids, &labels);
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        let candidate = ClusterAssignment {
            centroids,
            labels,
            sizes,
            inertia,
        };
        let replace = match &best {
            Some(b) => candidate.inertia < b.inertia,
            None => true,
        };
        if replace {
            best = Some(candidate);
        }
    }
    Ok(best.expect("at least one restart"))
}
