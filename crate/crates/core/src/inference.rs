//! Dirichlet-process mixture of Gaussian superquadric taper models (GSTM) and
//! its optimization-based Gibbs sampler.
//!
//! Each iteration draws new point memberships from the Chinese restaurant
//! process conditional, refits every cluster's superquadric by least squares
//! (standing in for a draw of θ), and draws each cluster's noise variance from
//! its gamma conditional. An optional splitting pass runs before the
//! membership sweep and a merging pass runs once at the end.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::InferenceError;
use crate::fitting::{bbox_diagonal, fit_superquadric, FitOptions};
use crate::geometry::{
    from_canonical, radial_distance, radial_distance_or, sample_canonical_surface, SuperquadricParams,
    DEFAULT_SENTINEL_DISTANCE,
};
use crate::merging::merge_pass;

/// One mixture component: a primitive and the variance of its radial noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GstmComponent {
    pub theta: SuperquadricParams,
    pub sigma2: f64,
}

/// `ln(2·√(2π))`
const LN_TWO_SQRT_TWO_PI: f64 = 1.612_085_713_764_618;

/// Draws `n` points from the GSTM generative process: an area-uniform point
/// `μ` on the untapered canonical surface, pushed radially by `τ ~ N(0, σ²)`,
/// then tapered and posed.
pub fn gstm_samples<R: Rng + ?Sized>(component: &GstmComponent, n: usize, rng: &mut R) -> Vec<Vector3<f64>> {
    let theta = &component.theta;
    let sigma = component.sigma2.max(0.0).sqrt();
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        for mu in sample_canonical_surface(theta, n - out.len(), rng) {
            let len = mu.norm();
            if len == 0.0 {
                continue;
            }
            let tau = noise.sample(rng);
            out.push(from_canonical(theta, &(mu * (1.0 + tau / len))));
        }
    }
    out
}

pub fn gstm_sample<R: Rng + ?Sized>(component: &GstmComponent, rng: &mut R) -> Vector3<f64> {
    gstm_samples(component, 1, rng)[0]
}

/// `log p(x | θ, σ²)` for a point at radial distance `d`, keeping only the
/// nearer of the two ray intersections.
pub fn log_density_from_distance(d: f64, sigma2: f64) -> f64 {
    -LN_TWO_SQRT_TWO_PI - 0.5 * sigma2.ln() - d * d / (2.0 * sigma2)
}

pub fn point_log_density(x: &Vector3<f64>, component: &GstmComponent) -> f64 {
    log_density_from_distance(radial_distance(&component.theta, x), component.sigma2)
}

fn squared_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm_squared()
}

/// Lloyd's k-means with k-means++ seeding. Returns labels in `0..k`.
pub fn kmeans_init<R: Rng + ?Sized>(
    points: &[Vector3<f64>],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>, InferenceError> {
    if k == 0 {
        return Err(InferenceError::DegenerateInput("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(InferenceError::DegenerateInput(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first]];
    let mut nearest: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick]);
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &points[pick]));
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..100 {
        for (label, p) in labels.iter_mut().zip(points) {
            *label = nearest_centroid(p, &centroids);
        }
        let mut sums = vec![Vector3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            sums[l] += p;
            counts[l] += 1;
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] > 0 {
                let c = sums[j] / counts[j] as f64;
                shift = shift.max((c - centroids[j]).norm());
                centroids[j] = c;
            }
        }
        if shift < 1e-6 {
            break;
        }
    }
    for (label, p) in labels.iter_mut().zip(points) {
        *label = nearest_centroid(p, &centroids);
    }
    Ok(labels)
}

fn nearest_centroid(p: &Vector3<f64>, centroids: &[Vector3<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Ellipsoid whose moment-of-inertia tensor is a quarter of the point set's,
/// posed at the centroid along the principal axes (largest spread on z).
pub fn moi_ellipsoid(points: &[Vector3<f64>]) -> SuperquadricParams {
    if points.is_empty() {
        return SuperquadricParams::sphere(1e-4);
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut basis = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]),
        eig.eigenvectors.column(order[1]),
        eig.eigenvectors.column(order[2]),
    ]);
    if basis.determinant() < 0.0 {
        basis.set_column(2, &(-basis.column(2)));
    }
    // Unit-mass solid ellipsoid: second moment a²/5 per axis. A quarter of the
    // points' inertia tensor means a quarter of their second moments.
    let floor = (1e-3 * bbox_diagonal(points)).max(1e-4);
    let axis = |i: usize| (1.25 * eig.eigenvalues[order[i]].max(0.0)).sqrt().max(floor);
    SuperquadricParams::canonical(1.0, 1.0, [axis(0), axis(1), axis(2)])
        .with_pose(UnitQuaternion::from_matrix(&basis), centroid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClusterId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cluster {
    pub component: GstmComponent,
    pub count: usize,
    /// Created since the last fitting step (spawned or split).
    pub fresh: bool,
}

/// Point cloud, memberships and live components of the sampler.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub points: Vec<Vector3<f64>>,
    pub labels: Vec<ClusterId>,
    pub clusters: BTreeMap<ClusterId, Cluster>,
    next_id: u32,
    pub sentinel_distance: f64,
}

impl ClusterState {
    /// Builds a state from dense labels `0..components.len()`.
    pub fn new(points: Vec<Vector3<f64>>, labels: &[usize], components: &[GstmComponent]) -> Self {
        assert_eq!(points.len(), labels.len());
        let mut clusters = BTreeMap::new();
        for (j, c) in components.iter().enumerate() {
            clusters.insert(
                ClusterId(j as u32),
                Cluster {
                    component: *c,
                    count: 0,
                    fresh: true,
                },
            );
        }
        let labels: Vec<ClusterId> = labels.iter().map(|&l| ClusterId(l as u32)).collect();
        for l in &labels {
            clusters.get_mut(l).expect("label refers to a component").count += 1;
        }
        let mut state = Self {
            points,
            labels,
            clusters,
            next_id: components.len() as u32,
            sentinel_distance: DEFAULT_SENTINEL_DISTANCE,
        };
        state.remove_empty();
        state
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn ids(&self) -> Vec<ClusterId> {
        self.clusters.keys().copied().collect()
    }

    pub fn add_cluster(&mut self, component: GstmComponent) -> ClusterId {
        let id = ClusterId(self.next_id);
        self.next_id += 1;
        self.clusters.insert(
            id,
            Cluster {
                component,
                count: 0,
                fresh: true,
            },
        );
        id
    }

    pub fn members(&self, id: ClusterId) -> Vec<Vector3<f64>> {
        self.labels
            .iter()
            .zip(&self.points)
            .filter(|(l, _)| **l == id)
            .map(|(_, p)| *p)
            .collect()
    }

    pub fn member_indices(&self, id: ClusterId) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == id).collect()
    }

    pub fn distance(&self, id: ClusterId, x: &Vector3<f64>) -> f64 {
        radial_distance_or(&self.clusters[&id].component.theta, x, self.sentinel_distance)
    }

    /// Sum of squared radial distances of a cluster's members.
    pub fn cluster_ssd(&self, id: ClusterId) -> f64 {
        let theta = &self.clusters[&id].component.theta;
        self.labels
            .iter()
            .zip(&self.points)
            .filter(|(l, _)| **l == id)
            .map(|(_, p)| radial_distance_or(theta, p, self.sentinel_distance).powi(2))
            .sum()
    }

    pub fn total_ssd(&self) -> f64 {
        self.labels
            .iter()
            .zip(&self.points)
            .map(|(l, p)| self.distance(*l, p).powi(2))
            .sum()
    }

    pub fn remove_empty(&mut self) {
        self.clusters.retain(|_, c| c.count > 0);
    }

    /// Moves every member of `from` into `into` and drops `from`.
    pub fn absorb(&mut self, into: ClusterId, from: ClusterId) {
        let moved = self.clusters.remove(&from).map_or(0, |c| c.count);
        for l in self.labels.iter_mut().filter(|l| **l == from) {
            *l = into;
        }
        self.clusters.get_mut(&into).expect("live cluster").count += moved;
    }

    /// Checks that counts match the label histogram and every label is live.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut hist: BTreeMap<ClusterId, usize> = BTreeMap::new();
        for l in &self.labels {
            if !self.clusters.contains_key(l) {
                return Err(format!("label {l:?} has no component"));
            }
            *hist.entry(*l).or_default() += 1;
        }
        for (id, c) in &self.clusters {
            if hist.get(id).copied().unwrap_or(0) != c.count {
                return Err(format!("count mismatch for {id:?}"));
            }
        }
        if self.clusters.values().map(|c| c.count).sum::<usize>() != self.points.len() {
            return Err("counts do not sum to N".into());
        }
        Ok(())
    }

    fn median_sigma2(&self) -> f64 {
        let mut s: Vec<f64> = self.clusters.values().map(|c| c.component.sigma2).collect();
        if s.is_empty() {
            return 1.0;
        }
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Dirichlet-process concentration.
    pub alpha: f64,
    /// Prior predictive density of a point under a brand-new cluster.
    pub p0: f64,
    pub iterations: usize,
    pub k_init: usize,
    pub seed: u64,
    /// Clusters smaller than this keep their moment-of-inertia ellipsoid.
    pub min_cluster_for_fit: usize,
    pub split_enabled: bool,
    pub merge_enabled: bool,
    pub merge_lambda: f64,
    /// Gibbs iterations (memberships, fit, variances) each followed by another
    /// merging pass, run after the first merging pass.
    pub refine_rounds: usize,
    pub sentinel_distance: f64,
    pub fit: FitOptions,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            p0: 0.1,
            iterations: 30,
            k_init: 30,
            seed: 0,
            min_cluster_for_fit: 10,
            split_enabled: true,
            merge_enabled: true,
            merge_lambda: 2.0,
            refine_rounds: 5,
            sentinel_distance: DEFAULT_SENTINEL_DISTANCE,
            fit: FitOptions::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        let bad = |m: &str| Err(InferenceError::InvalidConfig(m.into()));
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.p0 > 0.0) {
            return bad("p0 must be positive");
        }
        if self.iterations < 1 {
            return bad("iterations must be at least 1");
        }
        if self.k_init < 1 {
            return bad("k_init must be at least 1");
        }
        if !(self.merge_lambda > 0.0) {
            return bad("merge_lambda must be positive");
        }
        if !(self.sentinel_distance > 0.0) {
            return bad("sentinel_distance must be positive");
        }
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            sentinel_distance: self.sentinel_distance,
            ..self.fit
        }
    }
}

/// Normalizes log-weights into probabilities (log-sum-exp). Returns `None` if
/// every weight is `-inf` or NaN.
pub fn normalize_log_weights(log_weights: &[f64]) -> Option<Vec<f64>> {
    let max = log_weights.iter().copied().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut probs: Vec<f64> = log_weights
        .iter()
        .map(|&w| if w.is_nan() { 0.0 } else { (w - max).exp() })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Some(probs)
}

/// Membership log-weights for one point: `ln n₋ᵢ,ⱼ + ln p(x | Θⱼ)` for each
/// existing cluster, then `ln α + ln p₀` for a new one. The common
/// `1/(N − 1 + α)` factor is dropped.
pub fn crp_log_weights(counts_without_point: &[usize], log_likelihoods: &[f64], alpha: f64, p0: f64) -> Vec<f64> {
    counts_without_point
        .iter()
        .zip(log_likelihoods)
        .map(|(&n, &ll)| if n == 0 { f64::NEG_INFINITY } else { (n as f64).ln() + ll })
        .chain(std::iter::once(alpha.ln() + p0.ln()))
        .collect()
}

/// Inverse-CDF draw from a normalized probability vector.
pub fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let mut u = rng.random::<f64>();
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            if u < p {
                return i;
            }
            u -= p;
            last = i;
        }
    }
    last
}

/// One sequential Gibbs sweep over the memberships, in point-index order.
pub fn sample_assignments<R: Rng + ?Sized>(state: &mut ClusterState, config: &SamplerConfig, rng: &mut R) {
    let diag = bbox_diagonal(&state.points);
    let spawn_axis = (0.05 * diag).max(1e-4);
    let mut ids: Vec<ClusterId> = state.ids();
    let mut counts: Vec<usize> = ids.iter().map(|id| state.clusters[id].count).collect();
    let mut comps: Vec<GstmComponent> = ids.iter().map(|id| state.clusters[id].component).collect();
    let mut slot_of: BTreeMap<ClusterId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut distances = Vec::new();
    let mut log_lik = Vec::new();

    for i in 0..state.points.len() {
        let x = state.points[i];
        let current = slot_of[&state.labels[i]];
        counts[current] -= 1;

        distances.clear();
        log_lik.clear();
        for c in &comps {
            let d = radial_distance_or(&c.theta, &x, state.sentinel_distance);
            distances.push(d);
            log_lik.push(log_density_from_distance(d, c.sigma2));
        }
        let weights = crp_log_weights(&counts, &log_lik, config.alpha, config.p0);
        let choice = match normalize_log_weights(&weights) {
            Some(probs) => {
                debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                draw_categorical(&probs, rng)
            }
            None => nearest_slot(&distances, &counts).unwrap_or(current),
        };

        let slot = if choice == comps.len() {
            let component = GstmComponent {
                theta: SuperquadricParams::sphere(spawn_axis).with_pose(UnitQuaternion::identity(), x),
                sigma2: median(comps.iter().zip(&counts).filter(|(_, &n)| n > 0).map(|(c, _)| c.sigma2))
                    .unwrap_or(state.median_sigma2()),
            };
            let id = state.add_cluster(component);
            ids.push(id);
            counts.push(0);
            comps.push(component);
            slot_of.insert(id, comps.len() - 1);
            comps.len() - 1
        } else {
            choice
        };
        counts[slot] += 1;
        state.labels[i] = ids[slot];
    }

    for (id, n) in ids.iter().zip(&counts) {
        state.clusters.get_mut(id).expect("live cluster").count = *n;
    }
    state.remove_empty();
}

fn nearest_slot(distances: &[f64], counts: &[usize]) -> Option<usize> {
    distances
        .iter()
        .enumerate()
        .filter(|(j, _)| counts[*j] > 0)
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(j, _)| j)
}

fn median(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

/// Draws `σ² = 1/γ` with `γ ~ Gamma(shape = (n − 1)/2, scale = 2/D)`.
///
/// The shape is clamped to at least 0.5 and `D` to at least 1e-12.
pub fn draw_sigma2<R: Rng + ?Sized>(n: usize, ssd: f64, rng: &mut R) -> f64 {
    let shape = ((n as f64 - 1.0) / 2.0).max(0.5);
    let d = if ssd.is_finite() { ssd.max(1e-12) } else { f64::MAX };
    let gamma = Gamma::new(shape, 2.0 / d).expect("valid gamma parameters");
    loop {
        let g: f64 = gamma.sample(rng);
        let s2 = 1.0 / g;
        if s2.is_finite() && s2 > 0.0 {
            return s2;
        }
    }
}

/// Redraws every cluster's noise variance from its gamma conditional.
pub fn sample_sigmas<R: Rng + ?Sized>(state: &mut ClusterState, rng: &mut R) {
    for id in state.ids() {
        let ssd = state.cluster_ssd(id);
        let n = state.clusters[&id].count;
        let s2 = draw_sigma2(n, ssd, rng);
        state.clusters.get_mut(&id).expect("live cluster").component.sigma2 = s2;
    }
}

/// Splits the cluster with the largest mean squared residual in two by
/// 2-means, when that mean exceeds four times its noise variance.
pub fn split_pass<R: Rng + ?Sized>(state: &mut ClusterState, config: &SamplerConfig, rng: &mut R) {
    let mut worst: Option<(ClusterId, f64)> = None;
    for (id, c) in &state.clusters {
        let mean = state.cluster_ssd(*id) / c.count as f64;
        if worst.is_none_or(|(_, m)| mean > m) {
            worst = Some((*id, mean));
        }
    }
    let Some((id, mean)) = worst else { return };
    let cluster = state.clusters[&id];
    if mean <= 4.0 * cluster.component.sigma2 || cluster.count < 2 * config.min_cluster_for_fit.max(1) {
        return;
    }
    let idx = state.member_indices(id);
    let members: Vec<Vector3<f64>> = idx.iter().map(|&i| state.points[i]).collect();
    let Ok(halves) = kmeans_init(&members, 2, rng) else { return };
    let second: Vec<usize> = idx.iter().zip(&halves).filter(|(_, h)| **h == 1).map(|(i, _)| *i).collect();
    if second.is_empty() || second.len() == idx.len() {
        return;
    }
    let first_pts: Vec<_> = members.iter().zip(&halves).filter(|(_, h)| **h == 0).map(|(p, _)| *p).collect();
    let second_pts: Vec<_> = second.iter().map(|&i| state.points[i]).collect();
    let sigma2 = cluster.component.sigma2;
    let new_id = state.add_cluster(GstmComponent {
        theta: moi_ellipsoid(&second_pts),
        sigma2,
    });
    for &i in &second {
        state.labels[i] = new_id;
    }
    state.clusters.get_mut(&new_id).expect("new cluster").count = second.len();
    let first = state.clusters.get_mut(&id).expect("live cluster");
    first.count -= second.len();
    first.component.theta = moi_ellipsoid(&first_pts);
    first.fresh = true;
}

/// Step 2 of the sampler: a least-squares refit of every cluster's primitive.
/// Returns the total squared residual after fitting.
pub fn fit_clusters(state: &mut ClusterState, config: &SamplerConfig) -> f64 {
    let options = config.fit_options();
    let jobs: Vec<(ClusterId, Vec<Vector3<f64>>, Cluster)> =
        state.ids().into_iter().map(|id| (id, state.members(id), state.clusters[&id])).collect();
    let fitted: Vec<(ClusterId, SuperquadricParams, f64)> = jobs
        .par_iter()
        .map(|(id, pts, cluster)| {
            let (theta, ssd) = fit_cluster(pts, cluster, config.min_cluster_for_fit, &options);
            (*id, theta, ssd)
        })
        .collect();
    let mut total = 0.0;
    for (id, theta, ssd) in fitted {
        let c = state.clusters.get_mut(&id).expect("live cluster");
        c.component.theta = theta;
        c.fresh = false;
        total += ssd;
    }
    total
}

fn fit_cluster(
    points: &[Vector3<f64>],
    cluster: &Cluster,
    min_points: usize,
    options: &FitOptions,
) -> (SuperquadricParams, f64) {
    let moi = moi_ellipsoid(points);
    let ssd_of = |t: &SuperquadricParams| crate::fitting::sum_squared_distances(t, points, options.sentinel_distance);
    if points.len() < min_points {
        return (moi, ssd_of(&moi));
    }
    let warm = fit_superquadric(points, &cluster.component.theta, &FitOptions { multistart: false, ..*options });
    let mut best = (warm.theta, warm.final_ssd);
    if cluster.fresh && options.multistart {
        let cold = fit_superquadric(points, &moi, options);
        if cold.final_ssd < best.1 {
            best = (cold.theta, cold.final_ssd);
        }
    }
    if !best.1.is_finite() || best.0.validate().is_err() {
        return (moi, ssd_of(&moi));
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub k: usize,
    pub d_total: f64,
}

/// Final primitives, dense per-point labels into `components`, and the
/// per-iteration trace: entry 0 is the initialization, then one entry per
/// Gibbs iteration including the refinement rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractionResult {
    pub components: Vec<GstmComponent>,
    pub labels: Vec<usize>,
    pub trace: Vec<TraceEntry>,
}

impl AbstractionResult {
    pub fn from_state(state: &ClusterState, trace: Vec<TraceEntry>) -> Self {
        let ids = state.ids();
        let dense: BTreeMap<ClusterId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        Self {
            components: ids.iter().map(|id| state.clusters[id].component).collect(),
            labels: state.labels.iter().map(|l| dense[l]).collect(),
            trace,
        }
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.components.len()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Initial state: k-means labels, moment-of-inertia ellipsoids and
/// `σ² ~ Uniform(0, 1]`.
pub fn initial_state<R: Rng + ?Sized>(
    points: &[Vector3<f64>],
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ClusterState, InferenceError> {
    let k = config.k_init.min(points.len());
    let labels = kmeans_init(points, k, rng)?;
    let mut groups = vec![Vec::new(); k];
    for (&l, p) in labels.iter().zip(points) {
        groups[l].push(*p);
    }
    let components: Vec<GstmComponent> = groups
        .iter()
        .map(|g| GstmComponent {
            theta: moi_ellipsoid(g),
            sigma2: 1.0 - rng.random::<f64>(),
        })
        .collect();
    let mut state = ClusterState::new(points.to_vec(), &labels, &components);
    state.sentinel_distance = config.sentinel_distance;
    Ok(state)
}

/// Runs the full pipeline: initialization, `config.iterations` Gibbs
/// iterations (split, memberships, fit, variances), the merging pass, and
/// `config.refine_rounds` further iterations each followed by merging.
pub fn run_abstraction<R: Rng + ?Sized>(
    points: &[Vector3<f64>],
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<AbstractionResult, InferenceError> {
    config.validate()?;
    if points.len() < 10 {
        return Err(InferenceError::DegenerateInput(format!(
            "need at least 10 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(InferenceError::DegenerateInput("non-finite coordinate".into()));
    }
    let mut state = initial_state(points, config, rng)?;
    let mut trace = vec![TraceEntry {
        k: state.k(),
        d_total: state.total_ssd(),
    }];
    for _ in 0..config.iterations {
        if config.split_enabled {
            split_pass(&mut state, config, rng);
        }
        sample_assignments(&mut state, config, rng);
        let d_total = fit_clusters(&mut state, config);
        sample_sigmas(&mut state, rng);
        trace.push(TraceEntry { k: state.k(), d_total });
    }
    if config.merge_enabled {
        merge_pass(&mut state, config.merge_lambda, &config.fit_options(), rng);
        // let points re-settle around the merged primitives, then merge again
        for _ in 0..config.refine_rounds {
            sample_assignments(&mut state, config, rng);
            let d_total = fit_clusters(&mut state, config);
            sample_sigmas(&mut state, rng);
            trace.push(TraceEntry { k: state.k(), d_total });
            merge_pass(&mut state, config.merge_lambda, &config.fit_options(), rng);
        }
    }
    Ok(AbstractionResult::from_state(&state, trace))
}

/// [`run_abstraction`] with an RNG seeded from `config.seed`.
pub fn abstract_points(points: &[Vector3<f64>], config: &SamplerConfig) -> Result<AbstractionResult, InferenceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    run_abstraction(points, config, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn noiseless_gstm_lies_on_surface() {
        let mut r = rng(1);
        let theta = SuperquadricParams::canonical(0.4, 1.3, [1.0, 0.7, 0.5])
            .with_pose(UnitQuaternion::from_euler_angles(0.3, -0.2, 1.0), Vector3::new(1.0, 2.0, 3.0))
            .with_taper(0.3, -0.4);
        let comp = GstmComponent { theta, sigma2: 0.0 };
        for x in gstm_samples(&comp, 500, &mut r) {
            assert!(radial_distance(&theta, &x) < 1e-9);
        }
    }

    #[test]
    fn gstm_noise_moments() {
        let mut r = rng(2);
        let sigma = 0.05;
        let comp = GstmComponent {
            theta: SuperquadricParams::sphere(1.0),
            sigma2: sigma * sigma,
        };
        let n = 10_000;
        let taus: Vec<f64> = gstm_samples(&comp, n, &mut r).iter().map(|x| x.norm() - 1.0).collect();
        let mean = taus.iter().sum::<f64>() / n as f64;
        let sd = (taus.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        assert!((sd - sigma).abs() / sigma < 0.03, "sd {sd}");
        assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn log_density_values() {
        let comp = GstmComponent {
            theta: SuperquadricParams::sphere(1.0),
            sigma2: 1.0,
        };
        let expected = -(2.0 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((point_log_density(&Vector3::new(1.0, 0.0, 0.0), &comp) - expected).abs() < 1e-14);
        assert!((point_log_density(&Vector3::new(2.0, 0.0, 0.0), &comp) - (expected - 0.5)).abs() < 1e-14);
        let near = point_log_density(&Vector3::new(1.1, 0.0, 0.0), &comp);
        let far = point_log_density(&Vector3::new(1.5, 0.0, 0.0), &comp);
        assert!(near > far);
        let sentinel = log_density_from_distance(DEFAULT_SENTINEL_DISTANCE, 1e-4);
        assert!(sentinel.is_finite() || sentinel == f64::NEG_INFINITY);
        assert!(!sentinel.is_nan());
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut r = rng(3);
        let mut pts = Vec::new();
        for i in 0..200 {
            let c = if i < 100 { Vector3::zeros() } else { Vector3::new(10.0, 0.0, 0.0) };
            pts.push(c + Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)));
        }
        let labels = kmeans_init(&pts, 2, &mut r).unwrap();
        assert!(labels[..100].iter().all(|&l| l == labels[0]));
        assert!(labels[100..].iter().all(|&l| l == labels[100]));
        assert_ne!(labels[0], labels[100]);
    }

    #[test]
    fn kmeans_one_point_per_cluster_and_errors() {
        let pts: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let mut labels = kmeans_init(&pts, 5, &mut rng(4)).unwrap();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
        assert!(matches!(kmeans_init(&pts, 6, &mut rng(4)), Err(InferenceError::DegenerateInput(_))));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut r = rng(5);
        let pts: Vec<_> = (0..300)
            .map(|_| Vector3::new(r.random::<f64>(), r.random::<f64>(), r.random::<f64>()))
            .collect();
        assert_eq!(kmeans_init(&pts, 7, &mut rng(9)).unwrap(), kmeans_init(&pts, 7, &mut rng(9)).unwrap());
    }

    #[test]
    fn moi_of_solid_ball() {
        let mut r = rng(6);
        let mut pts = Vec::new();
        while pts.len() < 20_000 {
            let p = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            if p.norm() <= 1.0 {
                pts.push(p);
            }
        }
        let e = moi_ellipsoid(&pts);
        for a in [e.ax, e.ay, e.az] {
            assert!((a - 0.5).abs() < 0.05, "{a}");
        }
        assert!((e.rotation.to_rotation_matrix().matrix().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn moi_of_repeated_point() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        let e = moi_ellipsoid(&[p; 5]);
        assert_eq!(e.translation, p);
        assert!(e.validate().is_ok());
        assert!(e.min_axis() > 0.0);
    }

    #[test]
    fn moi_is_rotation_equivariant() {
        let mut r = rng(7);
        let pts: Vec<_> = (0..2000)
            .map(|_| Vector3::new(r.random_range(-3.0..3.0), r.random_range(-1.0..1.0), r.random_range(-0.3..0.3)))
            .collect();
        let rot = UnitQuaternion::from_euler_angles(0.4, 1.1, -0.7);
        let rotated: Vec<_> = pts.iter().map(|p| rot * p).collect();
        let a = moi_ellipsoid(&pts);
        let b = moi_ellipsoid(&rotated);
        assert!((a.axes() - b.axes()).amax() < 1e-9);
        let ma = (rot.to_rotation_matrix() * a.rotation.to_rotation_matrix()).into_inner();
        let mb = b.rotation.to_rotation_matrix().into_inner();
        for i in 0..3 {
            let dot = ma.column(i).dot(&mb.column(i)).abs();
            assert!((dot - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn crp_probabilities_by_hand() {
        let w = crp_log_weights(&[99], &[0.2f64.ln()], 0.5, 0.1);
        let p = normalize_log_weights(&w).unwrap();
        let existing = 99.0 * 0.2 / (99.0 * 0.2 + 0.5 * 0.1);
        assert!((p[0] - existing).abs() < 1e-12);
        assert!((p[1] - (1.0 - existing)).abs() < 1e-12);
        assert!((p[0] - 0.997_481_108_312_342_6).abs() < 1e-12);
    }

    #[test]
    fn crp_zero_alpha_never_opens() {
        let w = crp_log_weights(&[3, 5], &[-2.0, -1.0], 0.0, 0.1);
        let p = normalize_log_weights(&w).unwrap();
        assert_eq!(p[2], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    fn two_sphere_state() -> ClusterState {
        let mut r = rng(8);
        let a = SuperquadricParams::sphere(1.0);
        let b = SuperquadricParams::sphere(1.0).with_pose(UnitQuaternion::identity(), Vector3::new(5.0, 0.0, 0.0));
        let mut pts = gstm_samples(&GstmComponent { theta: a, sigma2: 1e-4 }, 100, &mut r);
        pts.extend(gstm_samples(&GstmComponent { theta: b, sigma2: 1e-4 }, 100, &mut r));
        let labels: Vec<usize> = (0..200).map(|i| (i * 7) % 2).collect();
        ClusterState::new(
            pts,
            &labels,
            &[GstmComponent { theta: a, sigma2: 1e-4 }, GstmComponent { theta: b, sigma2: 1e-4 }],
        )
    }

    #[test]
    fn greedy_limit_assigns_nearest() {
        let mut state = two_sphere_state();
        for c in state.clusters.values_mut() {
            c.component.sigma2 = 1e-200;
        }
        let config = SamplerConfig { alpha: 0.0, ..Default::default() };
        sample_assignments(&mut state, &config, &mut rng(9));
        state.check_invariants().unwrap();
        for (i, l) in state.labels.iter().enumerate() {
            assert_eq!(l.0 as usize, usize::from(i >= 100));
        }
    }

    #[test]
    fn sweep_keeps_counts_consistent() {
        let mut state = two_sphere_state();
        sample_assignments(&mut state, &SamplerConfig::default(), &mut rng(10));
        state.check_invariants().unwrap();
        assert!(state.clusters.values().all(|c| c.count >= 1));
    }

    #[test]
    fn gamma_conditional_mean() {
        let mut r = rng(11);
        let n = 10_000;
        let mean_gamma = (0..n).map(|_| 1.0 / draw_sigma2(201, 2.0, &mut r)).sum::<f64>() / n as f64;
        assert!((mean_gamma - 100.0).abs() / 100.0 < 0.02, "{mean_gamma}");
        let mean_gamma2 = (0..n).map(|_| 1.0 / draw_sigma2(201, 4.0, &mut r)).sum::<f64>() / n as f64;
        assert!((mean_gamma2 - 50.0).abs() / 50.0 < 0.02, "{mean_gamma2}");
    }

    #[test]
    fn gamma_clamps_keep_sigma_positive() {
        let mut r = rng(12);
        for (n, d) in [(0, 0.0), (1, 1e-30), (2, f64::INFINITY), (1000, 1e-300)] {
            let s = draw_sigma2(n, d, &mut r);
            assert!(s.is_finite() && s > 0.0);
        }
    }

    #[test]
    fn split_is_noop_on_perfect_fit() {
        let mut state = two_sphere_state();
        let labels: Vec<usize> = (0..200).map(|i| usize::from(i >= 100)).collect();
        let comps: Vec<GstmComponent> = state.clusters.values().map(|c| c.component).collect();
        state = ClusterState::new(state.points.clone(), &labels, &comps);
        split_pass(&mut state, &SamplerConfig::default(), &mut rng(13));
        assert_eq!(state.k(), 2);
    }

    #[test]
    fn split_separates_two_spheres_under_one_primitive() {
        let state0 = two_sphere_state();
        let comp = GstmComponent {
            theta: SuperquadricParams::sphere(1.0).with_pose(UnitQuaternion::identity(), Vector3::new(2.5, 0.0, 0.0)),
            sigma2: 1e-4,
        };
        let mut state = ClusterState::new(state0.points.clone(), &[0; 200], &[comp]);
        split_pass(&mut state, &SamplerConfig::default(), &mut rng(14));
        state.check_invariants().unwrap();
        assert_eq!(state.k(), 2);
        let first = state.labels[0];
        assert!(state.labels[..100].iter().all(|l| *l == first));
        assert!(state.labels[100..].iter().all(|l| *l != first));
        split_pass(&mut state, &SamplerConfig::default(), &mut rng(15));
        assert!(state.k() <= 3);
    }

    #[test]
    fn run_rejects_tiny_input() {
        let pts = vec![Vector3::zeros(); 5];
        assert!(matches!(
            abstract_points(&pts, &SamplerConfig::default()),
            Err(InferenceError::DegenerateInput(_))
        ));
    }
    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn crp_weights_normalize(
                counts in proptest::collection::vec(1usize..500, 0..12),
                alpha in 0.01f64..10.0,
                p0 in 0.001f64..1.0,
                seed in 0u64..1000,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let loglik: Vec<f64> = counts.iter().map(|_| rng.random_range(-50.0..5.0)).collect();
                let w = crp_log_weights(&counts, &loglik, alpha, p0);
                prop_assert_eq!(w.len(), counts.len() + 1);
                let probs = normalize_log_weights(&w).unwrap();
                let total: f64 = probs.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
            }

            #[test]
            fn sigma2_draws_are_positive(n in 0usize..5000, ssd in 0.0f64..1e6, seed in 0u64..1000) {
                let s2 = draw_sigma2(n, ssd, &mut ChaCha8Rng::seed_from_u64(seed));
                prop_assert!(s2.is_finite() && s2 > 0.0);
            }

            #[test]
            fn sweep_keeps_partition(seed in 0u64..200, k in 1usize..8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let points: Vec<Vector3<f64>> = (0..120)
                    .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                    .collect();
                let config = SamplerConfig { k_init: k, ..Default::default() };
                let mut state = initial_state(&points, &config, &mut rng).unwrap();
                sample_assignments(&mut state, &config, &mut rng);
                state.check_invariants().unwrap();
                let total: usize = state.clusters.values().map(|c| c.count).sum();
                prop_assert_eq!(total, points.len());
            }
        }
    }
}
