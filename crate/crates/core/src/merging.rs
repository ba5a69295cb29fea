//! Post-processing that merges pairs of clusters whose union is explained by a
//! single primitive about as well as by the two separately.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::Rng;

use crate::fitting::{bounding_box, fit_superquadric, FitOptions};
use crate::geometry::SuperquadricParams;
use crate::inference::{draw_sigma2, moi_ellipsoid, ClusterId, ClusterState, GstmComponent};

/// Outcome of fitting one primitive to the union of two clusters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeDecision {
    pub pair: (ClusterId, ClusterId),
    pub accepted: bool,
    pub merged_theta: SuperquadricParams,
    /// Sum of squared radial distances of the union to `merged_theta`.
    pub merged_ssd: f64,
    /// Mean squared distance of the union to `merged_theta`.
    pub merged_mse: f64,
    /// Largest mean squared distance that is accepted.
    pub threshold: f64,
}

/// Fits the union of clusters `i` and `j` and accepts iff its mean squared
/// radial distance is at most `λ·(Dᵢ + Dⱼ)/(nᵢ + nⱼ)`.
pub fn try_merge(state: &ClusterState, i: ClusterId, j: ClusterId, lambda: f64, options: &FitOptions) -> MergeDecision {
    let mut union = state.members(i);
    union.extend(state.members(j));
    let n = union.len() as f64;
    let separate = state.cluster_ssd(i) + state.cluster_ssd(j);
    let threshold = lambda * separate / n;

    let mut best = fit_superquadric(&union, &moi_ellipsoid(&union), options);
    let warm = FitOptions {
        multistart: false,
        ..*options
    };
    for parent in [i, j] {
        let r = fit_superquadric(&union, &state.clusters[&parent].component.theta, &warm);
        if r.final_ssd < best.final_ssd {
            best = r;
        }
    }
    let merged_mse = best.final_ssd / n;
    MergeDecision {
        pair: (i, j),
        accepted: merged_mse.is_finite() && merged_mse <= threshold,
        merged_theta: best.theta,
        merged_ssd: best.final_ssd,
        merged_mse,
        threshold,
    }
}

fn inflated_boxes(state: &ClusterState) -> BTreeMap<ClusterId, (Vector3<f64>, Vector3<f64>, Vector3<f64>)> {
    state
        .ids()
        .into_iter()
        .map(|id| {
            let pts = state.members(id);
            let (lo, hi) = bounding_box(&pts);
            let pad = Vector3::repeat(3.0 * state.clusters[&id].component.sigma2.sqrt());
            let centroid = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
            (id, (lo - pad, hi + pad, centroid))
        })
        .collect()
}

fn boxes_overlap(a: &(Vector3<f64>, Vector3<f64>, Vector3<f64>), b: &(Vector3<f64>, Vector3<f64>, Vector3<f64>)) -> bool {
    (0..3).all(|k| a.0[k] <= b.1[k] && b.0[k] <= a.1[k])
}

/// Greedy merging: among all accepted candidate pairs, applies the one with
/// the smallest merged mean squared distance, redraws the merged cluster's
/// noise variance, and repeats until no pair is accepted.
///
/// Only pairs whose bounding boxes (padded by `3σ`) overlap are candidates.
/// Returns the number of merges applied.
pub fn merge_pass<R: Rng + ?Sized>(state: &mut ClusterState, lambda: f64, options: &FitOptions, rng: &mut R) -> usize {
    let mut cache: BTreeMap<(ClusterId, ClusterId), MergeDecision> = BTreeMap::new();
    let mut merges = 0;
    loop {
        let boxes = inflated_boxes(state);
        let ids = state.ids();
        let mut pairs = Vec::new();
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a + 1..] {
                if boxes_overlap(&boxes[&i], &boxes[&j]) {
                    pairs.push(((boxes[&i].2 - boxes[&j].2).norm(), i, j));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut best: Option<(ClusterId, ClusterId, MergeDecision)> = None;
        for (_, i, j) in pairs {
            let decision = *cache
                .entry((i, j))
                .or_insert_with(|| try_merge(state, i, j, lambda, options));
            if decision.accepted && best.is_none_or(|(_, _, b)| decision.merged_mse < b.merged_mse) {
                best = Some((i, j, decision));
            }
        }
        let Some((i, j, decision)) = best else { break };
        debug_assert_eq!(decision.pair, (i, j));

        let count = state.clusters[&i].count + state.clusters[&j].count;
        let sigma2 = draw_sigma2(count, decision.merged_ssd, rng);
        let merged = state.add_cluster(GstmComponent {
            theta: decision.merged_theta,
            sigma2,
        });
        state.absorb(merged, i);
        state.absorb(merged, j);
        if let Some(c) = state.clusters.get_mut(&merged) {
            c.fresh = false;
        }
        cache.retain(|(a, b), _| *a != i && *a != j && *b != i && *b != j);
        merges += 1;
    }
    merges
}
