//! Tapered superquadric geometry.
//!
//! A primitive is described in its canonical frame by the spherical product
//!
//! ```text
//! p(η, ω) = [ax·C(η)^ε1·C(ω)^ε2, ay·C(η)^ε1·S(ω)^ε2, az·S(η)^ε1]
//! ```
//!
//! where `C(α)^ε = sgn(cos α)|cos α|^ε` and `S(α)^ε = sgn(sin α)|sin α|^ε`.
//! The canonical surface is then tapered linearly along z and placed in the
//! world by a rigid transform, so a world point is `x = R·taper(p) + t`.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::GeometryError;

/// Lower bound on both shape exponents.
pub const EPS_MIN: f64 = 0.1;
/// Upper bound on both shape exponents.
pub const EPS_MAX: f64 = 2.0;
/// Taper scale factors at or below this value make the inverse taper undefined.
pub const TAPER_SCALE_MIN: f64 = 1e-6;
/// Distance reported for points the primitive cannot explain (degenerate taper).
pub const DEFAULT_SENTINEL_DISTANCE: f64 = 1e6;

const ORIGIN_RADIUS: f64 = 1e-9;

/// Full parameter set of one tapered superquadric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperquadricParams {
    pub eps1: f64,
    pub eps2: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub kx: f64,
    pub ky: f64,
}

impl SuperquadricParams {
    /// Untapered primitive at the origin with identity orientation.
    pub fn canonical(eps1: f64, eps2: f64, axes: [f64; 3]) -> Self {
        Self {
            eps1,
            eps2,
            ax: axes[0],
            ay: axes[1],
            az: axes[2],
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            kx: 0.0,
            ky: 0.0,
        }
    }

    pub fn sphere(radius: f64) -> Self {
        Self::canonical(1.0, 1.0, [radius; 3])
    }

    pub fn with_pose(mut self, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        self.rotation = rotation;
        self.translation = translation;
        self
    }

    pub fn with_taper(mut self, kx: f64, ky: f64) -> Self {
        self.kx = kx;
        self.ky = ky;
        self
    }

    pub fn axes(&self) -> Vector3<f64> {
        Vector3::new(self.ax, self.ay, self.az)
    }

    pub fn min_axis(&self) -> f64 {
        self.ax.min(self.ay).min(self.az)
    }

    pub fn max_axis(&self) -> f64 {
        self.ax.max(self.ay).max(self.az)
    }

    /// Same shape and taper, identity pose.
    pub fn canonical_part(&self) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            ..*self
        }
    }

    /// Checks the documented parameter invariants.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [
            self.eps1, self.eps2, self.ax, self.ay, self.az, self.kx, self.ky,
        ]
        .iter()
        .chain(self.translation.iter())
        .chain(self.rotation.coords.iter())
        .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidParams("non-finite value".into()));
        }
        for (name, e) in [("eps1", self.eps1), ("eps2", self.eps2)] {
            if !(EPS_MIN..=EPS_MAX).contains(&e) {
                return Err(GeometryError::InvalidParams(format!(
                    "{name}={e} outside [{EPS_MIN}, {EPS_MAX}]"
                )));
            }
        }
        if self.min_axis() <= 0.0 {
            return Err(GeometryError::InvalidParams("semi-axes must be positive".into()));
        }
        if self.kx.abs() > 1.0 || self.ky.abs() > 1.0 {
            return Err(GeometryError::InvalidParams("taper factors must lie in [-1, 1]".into()));
        }
        if (self.rotation.coords.norm() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidParams("rotation quaternion is not unit".into()));
        }
        Ok(())
    }
}

/// `sgn(u)·|u|^e`.
#[inline]
pub fn signed_pow(u: f64, e: f64) -> f64 {
    if u == 0.0 {
        0.0
    } else {
        u.signum() * u.abs().powf(e)
    }
}

/// Canonical-frame surface point for the angles `(eta, omega)`.
///
/// Pose and taper fields of `params` are ignored.
pub fn surface_point(params: &SuperquadricParams, eta: f64, omega: f64) -> Vector3<f64> {
    let (se, ce) = eta.sin_cos();
    let (so, co) = omega.sin_cos();
    let cpe = signed_pow(ce, params.eps1);
    Vector3::new(
        params.ax * cpe * signed_pow(co, params.eps2),
        params.ay * cpe * signed_pow(so, params.eps2),
        params.az * signed_pow(se, params.eps1),
    )
}

/// Inside-outside function of the untapered canonical primitive.
pub fn implicit_value(params: &SuperquadricParams, p: &Vector3<f64>) -> f64 {
    let a = (p.x / params.ax).abs().powf(2.0 / params.eps2);
    let b = (p.y / params.ay).abs().powf(2.0 / params.eps2);
    let c = (p.z / params.az).abs().powf(2.0 / params.eps1);
    (a + b).powf(params.eps2 / params.eps1) + c
}

/// `F(p)^(ε1/2)`, which is positively homogeneous of degree one in `p`.
///
/// Evaluated on `p / s` with `s` the largest normalized coordinate so the
/// large exponents never overflow or underflow.
pub fn radial_scale(params: &SuperquadricParams, p: &Vector3<f64>) -> f64 {
    let s = (p.x / params.ax)
        .abs()
        .max((p.y / params.ay).abs())
        .max((p.z / params.az).abs());
    if s == 0.0 {
        return 0.0;
    }
    s * implicit_value(params, &(p / s)).powf(params.eps1 / 2.0)
}

/// Linear taper along z.
pub fn taper_point(p: &Vector3<f64>, kx: f64, ky: f64, az: f64) -> Vector3<f64> {
    let fx = kx * p.z / az + 1.0;
    let fy = ky * p.z / az + 1.0;
    Vector3::new(fx * p.x, fy * p.y, p.z)
}

/// Inverse of [`taper_point`].
pub fn untaper_point(p: &Vector3<f64>, kx: f64, ky: f64, az: f64) -> Result<Vector3<f64>, GeometryError> {
    let fx = kx * p.z / az + 1.0;
    let fy = ky * p.z / az + 1.0;
    if fx <= TAPER_SCALE_MIN || fy <= TAPER_SCALE_MIN {
        return Err(GeometryError::DegenerateTaper);
    }
    Ok(Vector3::new(p.x / fx, p.y / fy, p.z))
}

/// Maps a canonical-frame point into the world: taper, then rotate and translate.
pub fn from_canonical(params: &SuperquadricParams, p: &Vector3<f64>) -> Vector3<f64> {
    params.rotation * taper_point(p, params.kx, params.ky, params.az) + params.translation
}

/// Maps a world point into the untapered canonical frame.
pub fn to_canonical(params: &SuperquadricParams, x: &Vector3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let local = params.rotation.inverse_transform_vector(&(x - params.translation));
    untaper_point(&local, params.kx, params.ky, params.az)
}

/// Radial distance with the default sentinel for degenerate tapers.
pub fn radial_distance(params: &SuperquadricParams, x: &Vector3<f64>) -> f64 {
    radial_distance_or(params, x, DEFAULT_SENTINEL_DISTANCE)
}

/// Distance from `x` to the surface measured along the ray from the primitive
/// center, evaluated in the untapered canonical frame.
pub fn radial_distance_or(params: &SuperquadricParams, x: &Vector3<f64>, sentinel: f64) -> f64 {
    match to_canonical(params, x) {
        Ok(p) => canonical_radial_distance(params, &p),
        Err(_) => sentinel,
    }
}

pub(crate) fn canonical_radial_distance(params: &SuperquadricParams, p: &Vector3<f64>) -> f64 {
    let norm = p.norm();
    if norm < ORIGIN_RADIUS {
        return params.min_axis();
    }
    let r = radial_scale(params, p);
    norm * (1.0 - 1.0 / r).abs()
}

/// Gradient of the inside-outside function, with the conventions
/// `∂|u|^e/∂u = 0` at `u = 0` and a zero cross-section gradient on the z axis.
fn implicit_gradient(params: &SuperquadricParams, p: &Vector3<f64>) -> Vector3<f64> {
    let (e1, e2) = (params.eps1, params.eps2);
    let ux = p.x / params.ax;
    let uy = p.y / params.ay;
    let uz = p.z / params.az;
    let g = ux.abs().powf(2.0 / e2) + uy.abs().powf(2.0 / e2);
    let (gx, gy) = if g > 0.0 {
        let outer = (e2 / e1) * g.powf(e2 / e1 - 1.0) * (2.0 / e2);
        (
            outer * signed_pow(ux, 2.0 / e2 - 1.0) / params.ax,
            outer * signed_pow(uy, 2.0 / e2 - 1.0) / params.ay,
        )
    } else {
        (0.0, 0.0)
    };
    let gz = (2.0 / e1) * signed_pow(uz, 2.0 / e1 - 1.0) / params.az;
    Vector3::new(gx, gy, gz)
}

/// Area element per unit solid angle at a point `p` of a unit-axis
/// superquadric (`F(p) = 1`), together with the unit normal there.
fn unit_area_per_solid_angle(unit: &SuperquadricParams, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let grad = implicit_gradient(unit, p);
    let gnorm = grad.norm();
    if !(gnorm > 0.0) || !gnorm.is_finite() {
        return None;
    }
    // p·∇F = 2/ε1 on the surface by Euler's theorem for homogeneous functions.
    Some((0.5 * unit.eps1 * p.norm().powi(3) * gnorm, grad / gnorm))
}

/// Area scale of the taper map at canonical point `p` with unit normal `n`.
fn taper_area_factor(params: &SuperquadricParams, p: &Vector3<f64>, n: &Vector3<f64>) -> f64 {
    if params.kx == 0.0 && params.ky == 0.0 {
        return 1.0;
    }
    let sx = params.kx * p.z / params.az + 1.0;
    let sy = params.ky * p.z / params.az + 1.0;
    let jac = Matrix3::new(
        sx, 0.0, params.kx * p.x / params.az,
        0.0, sy, params.ky * p.y / params.az,
        0.0, 0.0, 1.0,
    );
    match jac.try_inverse() {
        Some(inv) => (sx * sy).abs() * (inv.transpose() * n).norm(),
        None => 0.0,
    }
}

/// Draws `n` canonical-frame surface points uniformly by area.
///
/// Directions are drawn uniformly in axis-normalized coordinates, projected
/// radially onto the unit-axis surface, scaled by the semi-axes and kept by
/// rejection against their area weight. With `tapered` set, the weights
/// measure area on the tapered surface instead.
fn sample_canonical<R: Rng + ?Sized>(
    params: &SuperquadricParams,
    n: usize,
    tapered: bool,
    rng: &mut R,
) -> Vec<Vector3<f64>> {
    if n == 0 {
        return Vec::new();
    }
    let unit = SuperquadricParams::canonical(params.eps1, params.eps2, [1.0; 3]);
    let axes = params.axes();
    let volume = axes.x * axes.y * axes.z;
    let propose = |rng: &mut R| -> Option<(Vector3<f64>, f64)> {
        let d = Vector3::from(UnitSphere.sample(rng));
        let pu = d / radial_scale(&unit, &d);
        let (w, nu) = unit_area_per_solid_angle(&unit, &pu)?;
        // area scale of diag(a) for a surface element with normal nu
        let dual = nu.component_div(&axes);
        let mut w = w * volume * dual.norm();
        let p = pu.component_mul(&axes);
        if tapered {
            w *= taper_area_factor(params, &p, &(dual / dual.norm()));
        }
        (w.is_finite() && w > 0.0).then_some((p, w))
    };

    let mut w_max: f64 = 0.0;
    for _ in 0..512 {
        if let Some((_, w)) = propose(rng) {
            w_max = w_max.max(w);
        }
    }
    w_max *= 1.25;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let Some((p, w)) = propose(rng) else { continue };
        if w > w_max {
            w_max = w;
        }
        if rng.random::<f64>() * w_max < w {
            out.push(p);
        }
    }
    out
}

/// Draws points uniformly by area on the untapered canonical surface.
pub fn sample_canonical_surface<R: Rng + ?Sized>(
    params: &SuperquadricParams,
    n: usize,
    rng: &mut R,
) -> Vec<Vector3<f64>> {
    sample_canonical(params, n, false, rng)
}

/// Draws `n` points on the tapered, posed surface, approximately uniform by area.
pub fn sample_surface<R: Rng + ?Sized>(
    params: &SuperquadricParams,
    n: usize,
    rng: &mut R,
) -> Vec<Vector3<f64>> {
    sample_canonical(params, n, true, rng)
        .into_iter()
        .map(|p| from_canonical(params, &p))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }
}

/// Watertight η-ω grid mesh of the tapered, posed primitive.
///
/// `resolution` rings of `resolution` vertices each, plus the two poles.
pub fn mesh(params: &SuperquadricParams, resolution: usize) -> TriangleMesh {
    let res = resolution.max(4);
    let mut vertices = Vec::with_capacity(res * res + 2);
    for i in 0..res {
        let eta = -PI / 2.0 + PI * (i + 1) as f64 / (res + 1) as f64;
        for j in 0..res {
            let omega = -PI + 2.0 * PI * j as f64 / res as f64;
            vertices.push(from_canonical(params, &surface_point(params, eta, omega)));
        }
    }
    let south = vertices.len();
    vertices.push(from_canonical(params, &Vector3::new(0.0, 0.0, -params.az)));
    let north = vertices.len();
    vertices.push(from_canonical(params, &Vector3::new(0.0, 0.0, params.az)));

    let idx = |i: usize, j: usize| i * res + (j % res);
    let mut triangles = Vec::with_capacity(2 * res * res);
    for j in 0..res {
        triangles.push([south, idx(0, j + 1), idx(0, j)]);
    }
    for i in 0..res - 1 {
        for j in 0..res {
            let (a, b, c, d) = (idx(i, j), idx(i, j + 1), idx(i + 1, j + 1), idx(i + 1, j));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    for j in 0..res {
        triangles.push([north, idx(res - 1, j), idx(res - 1, j + 1)]);
    }
    TriangleMesh { vertices, triangles }
}
