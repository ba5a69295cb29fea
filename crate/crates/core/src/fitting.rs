//! Single tapered-superquadric recovery by bounded Levenberg-Marquardt on the
//! sum of squared radial distances.
//!
//! The 13 free parameters are laid out as
//! `[ε1, ε2, ax, ay, az, δx, δy, δz, tx, ty, tz, kx, ky]`, where `δ` is a
//! tangent-space rotation increment composed on the right of the current
//! orientation (`R ← R·exp(δ)`), so the Jacobian is always taken at `δ = 0`.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    signed_pow, SuperquadricParams, DEFAULT_SENTINEL_DISTANCE, EPS_MAX, EPS_MIN, TAPER_SCALE_MIN,
};

pub const PARAM_DIM: usize = 13;

type Gradient = SVector<f64, PARAM_DIM>;
type Normal = SMatrix<f64, PARAM_DIM, PARAM_DIM>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterBounds {
    pub eps: (f64, f64),
    pub taper: (f64, f64),
    pub axis_min: f64,
    /// Upper semi-axis bound as a multiple of the fitted points' bounding-box diagonal.
    pub axis_max_diagonal_factor: f64,
}

impl Default for ParameterBounds {
    fn default() -> Self {
        Self {
            eps: (EPS_MIN, EPS_MAX),
            taper: (-1.0, 1.0),
            axis_min: 1e-4,
            axis_max_diagonal_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub parameter_bounds: ParameterBounds,
    pub multistart: bool,
    pub sentinel_distance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-10,
            parameter_bounds: ParameterBounds::default(),
            multistart: true,
            sentinel_distance: DEFAULT_SENTINEL_DISTANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub theta: SuperquadricParams,
    /// Sum of squared radial distances at `theta`.
    pub final_ssd: f64,
    pub converged: bool,
    pub iterations_used: usize,
}

impl FitReport {
    pub fn rms(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            (self.final_ssd / n as f64).sqrt()
        }
    }
}

/// Radial distance of one world point and its gradient with respect to the
/// 13 parameters. Points in the degenerate taper region return the sentinel
/// with a zero gradient.
pub fn point_residual_gradient(
    theta: &SuperquadricParams,
    x: &Vector3<f64>,
    sentinel: f64,
) -> (f64, Gradient) {
    let mut grad = Gradient::zeros();
    let (e1, e2) = (theta.eps1, theta.eps2);
    let (ax, ay, az) = (theta.ax, theta.ay, theta.az);
    let (kx, ky) = (theta.kx, theta.ky);

    let q = theta.rotation.inverse_transform_vector(&(x - theta.translation));
    let sx = kx * q.z / az + 1.0;
    let sy = ky * q.z / az + 1.0;
    if sx <= TAPER_SCALE_MIN || sy <= TAPER_SCALE_MIN {
        return (sentinel, grad);
    }
    let xb = Vector3::new(q.x / sx, q.y / sy, q.z);
    let norm = xb.norm();
    if norm < 1e-9 {
        return (theta.min_axis(), grad);
    }

    // r(x̄) = s·r(x̄/s) for any constant s > 0; pick s so that the largest
    // normalized coordinate of u = x̄/s is exactly one.
    let s = (xb.x / ax).abs().max((xb.y / ay).abs()).max((xb.z / az).abs());
    let u = xb / s;
    let (nx, ny, nz) = (u.x / ax, u.y / ay, u.z / az);
    let m2 = 2.0 / e2;
    let m1 = 2.0 / e1;
    let beta = e2 / e1;

    let a = nx.abs().powf(m2);
    let b = ny.abs().powf(m2);
    let c = nz.abs().powf(m1);
    let g = a + b;
    let gb = if g > 0.0 { g.powf(beta) } else { 0.0 };
    let f = gb + c;
    let ru = f.powf(e1 / 2.0);
    let r = s * ru;

    // Derivatives of F with respect to u and the shape parameters.
    let dfdg = if g > 0.0 { beta * gb / g } else { 0.0 };
    let dadu = m2 * signed_pow(nx, m2 - 1.0) / ax;
    let dbdu = m2 * signed_pow(ny, m2 - 1.0) / ay;
    let dcdu = m1 * signed_pow(nz, m1 - 1.0) / az;
    let df_du = Vector3::new(dfdg * dadu, dfdg * dbdu, dcdu);

    let ln_abs = |v: f64| if v == 0.0 { 0.0 } else { v.abs().ln() };
    let ln_g = if g > 0.0 { g.ln() } else { 0.0 };
    let da_de2 = a * ln_abs(nx) * (-2.0 / (e2 * e2));
    let db_de2 = b * ln_abs(ny) * (-2.0 / (e2 * e2));
    let df_de2 = gb * ln_g / e1 + dfdg * (da_de2 + db_de2);
    let df_de1 = -gb * ln_g * e2 / (e1 * e1) + c * ln_abs(nz) * (-2.0 / (e1 * e1));
    let df_dax = dfdg * (-m2 * a / ax);
    let df_day = dfdg * (-m2 * b / ay);
    let df_daz = -m1 * c / az;

    // r_u = F^(ε1/2)
    let dr_df = 0.5 * e1 * ru / f;
    let dr_du = df_du * dr_df;
    let dr_de1 = s * (dr_df * df_de1 + 0.5 * ru * f.ln());
    let dr_de2 = s * dr_df * df_de2;
    let dr_dax = s * dr_df * df_dax;
    let dr_day = s * dr_df * df_day;
    let dr_daz = s * dr_df * df_daz;

    let h = 1.0 - 1.0 / r;
    let d = norm * h.abs();
    let sgn = if h < 0.0 { -1.0 } else { 1.0 };
    let inv_r2 = 1.0 / (r * r);
    let k = sgn * norm * inv_r2;
    // ∂d/∂x̄ (r is degree-one homogeneous, so ∂r/∂x̄ = ∂r/∂u)
    let dd_dxb = xb * (sgn * h / norm) + dr_du * k;

    // x̄ = untaper(q)
    let sx2 = sx * sx;
    let sy2 = sy * sy;
    let dxb_dq = Matrix3::new(
        1.0 / sx, 0.0, -q.x * kx / (az * sx2),
        0.0, 1.0 / sy, -q.y * ky / (az * sy2),
        0.0, 0.0, 1.0,
    );
    let dd_dq = dxb_dq.transpose() * dd_dxb;
    let dxb_daz = Vector3::new(q.x * kx * q.z / (az * az * sx2), q.y * ky * q.z / (az * az * sy2), 0.0);

    grad[0] = k * dr_de1;
    grad[1] = k * dr_de2;
    grad[2] = k * dr_dax;
    grad[3] = k * dr_day;
    grad[4] = k * dr_daz + dd_dxb.dot(&dxb_daz);
    // q(δ) = exp(-δ)·q  ⇒  ∂q/∂δ = [q]×
    let dd_drot = dd_dq.cross(&q);
    grad[5] = dd_drot.x;
    grad[6] = dd_drot.y;
    grad[7] = dd_drot.z;
    let dd_dt = -(theta.rotation * dd_dq);
    grad[8] = dd_dt.x;
    grad[9] = dd_dt.y;
    grad[10] = dd_dt.z;
    grad[11] = dd_dxb.x * (-q.x * q.z / (az * sx2));
    grad[12] = dd_dxb.y * (-q.y * q.z / (az * sy2));
    (d, grad)
}

/// Residual vector (radial distances) and its N×13 Jacobian.
pub fn residuals_and_jacobian(
    theta: &SuperquadricParams,
    points: &[Vector3<f64>],
    sentinel: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let mut res = DVector::zeros(points.len());
    let mut jac = DMatrix::zeros(points.len(), PARAM_DIM);
    for (i, x) in points.iter().enumerate() {
        let (d, g) = point_residual_gradient(theta, x, sentinel);
        res[i] = d;
        jac.row_mut(i).copy_from(&g.transpose());
    }
    (res, jac)
}

/// Applies a parameter increment in the 13-vector layout. The rotation part is
/// composed as `R·exp(δ)`. No bounds are enforced.
pub fn apply_increment(theta: &SuperquadricParams, step: &[f64]) -> SuperquadricParams {
    let rot = Vector3::new(step[5], step[6], step[7]);
    SuperquadricParams {
        eps1: theta.eps1 + step[0],
        eps2: theta.eps2 + step[1],
        ax: theta.ax + step[2],
        ay: theta.ay + step[3],
        az: theta.az + step[4],
        rotation: theta.rotation * UnitQuaternion::from_scaled_axis(rot),
        translation: theta.translation + Vector3::new(step[8], step[9], step[10]),
        kx: theta.kx + step[11],
        ky: theta.ky + step[12],
    }
}

pub fn sum_squared_distances(theta: &SuperquadricParams, points: &[Vector3<f64>], sentinel: f64) -> f64 {
    points
        .iter()
        .map(|x| {
            let d = crate::geometry::radial_distance_or(theta, x, sentinel);
            d * d
        })
        .sum()
}

pub fn bounding_box(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

pub fn bbox_diagonal(points: &[Vector3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let (lo, hi) = bounding_box(points);
    (hi - lo).norm()
}

struct Clamp {
    eps: (f64, f64),
    taper: (f64, f64),
    axis: (f64, f64),
}

impl Clamp {
    fn new(bounds: &ParameterBounds, points: &[Vector3<f64>]) -> Self {
        let axis_max = (bounds.axis_max_diagonal_factor * bbox_diagonal(points)).max(bounds.axis_min);
        Self {
            eps: bounds.eps,
            taper: bounds.taper,
            axis: (bounds.axis_min, axis_max),
        }
    }

    fn apply(&self, mut t: SuperquadricParams) -> SuperquadricParams {
        t.eps1 = t.eps1.clamp(self.eps.0, self.eps.1);
        t.eps2 = t.eps2.clamp(self.eps.0, self.eps.1);
        t.ax = t.ax.clamp(self.axis.0, self.axis.1);
        t.ay = t.ay.clamp(self.axis.0, self.axis.1);
        t.az = t.az.clamp(self.axis.0, self.axis.1);
        t.kx = t.kx.clamp(self.taper.0, self.taper.1);
        t.ky = t.ky.clamp(self.taper.0, self.taper.1);
        t.rotation.renormalize();
        t
    }
}

fn normal_equations(theta: &SuperquadricParams, points: &[Vector3<f64>], sentinel: f64) -> (Normal, Gradient, f64) {
    let mut jtj = Normal::zeros();
    let mut jtr = Gradient::zeros();
    let mut cost = 0.0;
    for x in points {
        let (d, g) = point_residual_gradient(theta, x, sentinel);
        cost += d * d;
        jtr.axpy(d, &g, 1.0);
        jtj.syger(1.0, &g, &g, 1.0);
    }
    (jtj, jtr, cost)
}

/// Levenberg-Marquardt from one start point.
fn refine(points: &[Vector3<f64>], init: SuperquadricParams, options: &FitOptions) -> FitReport {
    let sentinel = options.sentinel_distance;
    let clamp = Clamp::new(&options.parameter_bounds, points);
    let mut theta = clamp.apply(init);
    let (mut jtj, mut jtr, mut cost) = normal_equations(&theta, points, sentinel);
    let mut mu: Option<f64> = None;
    let mut nu = 2.0;
    let mut diag_scale = Gradient::zeros();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        if jtr.amax() <= options.gradient_tolerance || cost == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        for i in 0..PARAM_DIM {
            diag_scale[i] = diag_scale[i].max(jtj[(i, i)]);
        }
        let floor = diag_scale.amax().max(1e-30) * 1e-12;
        let damping = mu.get_or_insert_with(|| 1e-3 * diag_scale.amax().max(1e-30));

        let mut accepted = false;
        while !accepted {
            let mut lhs = jtj;
            for i in 0..PARAM_DIM {
                lhs[(i, i)] += *damping * diag_scale[i].max(floor);
            }
            let step = match lhs.cholesky() {
                Some(ch) => -ch.solve(&jtr),
                None => {
                    *damping *= nu;
                    nu *= 2.0;
                    if *damping > 1e30 {
                        break;
                    }
                    continue;
                }
            };
            let candidate = clamp.apply(apply_increment(&theta, step.as_slice()));
            let new_cost = sum_squared_distances(&candidate, points, sentinel);
            if !new_cost.is_finite() {
                *damping *= 2.0;
                if *damping > 1e30 {
                    break;
                }
                continue;
            }
            if new_cost < cost {
                let predicted = -(2.0 * step.dot(&jtr) + step.dot(&(jtj * step)));
                let rho = if predicted > 0.0 { (cost - new_cost) / predicted } else { 0.5 };
                *damping *= (1.0 / 3.0f64).max(1.0 - (2.0 * rho - 1.0).powi(3));
                nu = 2.0;
                let rel_reduction = (cost - new_cost) / cost;
                let rel_step = step.amax();
                theta = candidate;
                let (a, b, c) = normal_equations(&theta, points, sentinel);
                jtj = a;
                jtr = b;
                cost = c;
                accepted = true;
                if rel_reduction < 1e-12 || rel_step < 1e-14 {
                    converged = true;
                }
            } else {
                *damping *= nu;
                nu *= 2.0;
                if *damping > 1e30 {
                    break;
                }
            }
        }
        if !accepted {
            // No descent direction within machine precision: a stationary point.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    FitReport {
        theta,
        final_ssd: cost,
        converged,
        iterations_used: iterations,
    }
}

/// The base ellipsoid and its two cyclic axis relabelings, each expressing
/// the same ellipsoid with a different principal axis playing z.
pub fn candidate_inits(_points: &[Vector3<f64>], base: &SuperquadricParams) -> Vec<SuperquadricParams> {
    let m = base.rotation.to_rotation_matrix().into_inner();
    let axes = [base.ax, base.ay, base.az];
    (0..3)
        .map(|shift| {
            // new canonical axis i is old axis (i + shift) mod 3
            let idx = [shift % 3, (shift + 1) % 3, (shift + 2) % 3];
            let cols = Matrix3::from_columns(&[m.column(idx[0]), m.column(idx[1]), m.column(idx[2])]);
            let rotation = if shift == 0 { base.rotation } else { UnitQuaternion::from_matrix(&cols) };
            SuperquadricParams {
                eps1: 1.0,
                eps2: 1.0,
                ax: axes[idx[0]],
                ay: axes[idx[1]],
                az: axes[idx[2]],
                rotation,
                translation: base.translation,
                kx: 0.0,
                ky: 0.0,
            }
        })
        .collect()
}

/// Recovers a tapered superquadric from `points`, starting at `init` and, with
/// multistart on, at each axis relabeling of `init`. Returns the lowest-cost fit.
pub fn fit_superquadric(points: &[Vector3<f64>], init: &SuperquadricParams, options: &FitOptions) -> FitReport {
    if points.is_empty() {
        return FitReport {
            theta: *init,
            final_ssd: 0.0,
            converged: true,
            iterations_used: 0,
        };
    }
    let mut starts = vec![*init];
    if options.multistart {
        for c in candidate_inits(points, init) {
            if !starts.contains(&c) {
                starts.push(c);
            }
        }
    }
    let reports: Vec<FitReport> = starts.par_iter().map(|s| refine(points, *s, options)).collect();
    reports
        .into_iter()
        .reduce(|best, r| if r.final_ssd < best.final_ssd { r } else { best })
        .expect("at least one start")
}
