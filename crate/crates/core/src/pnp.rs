//! Absolute camera pose estimation from 2D–3D correspondences.
//!
//! `p3p_solve` is a minimal three-point solver: the two depth ratios are
//! reduced to a quartic polynomial, real roots are extracted from the
//! companion matrix and polished, and the rigid transform is recovered by
//! orthogonal Procrustes. `ransac_pnp` wraps it in a seeded, adaptive RANSAC
//! loop with reprojection-error inlier counting, and `refine_pose` performs
//! Levenberg–Marquardt refinement with an analytic Jacobian over a minimal
//! 6-DOF parameterization (rotation tangent + camera center).
//!
//! Conventions: `rotation` maps world to camera, `center` is the camera
//! position in world coordinates, so a world point X lands at
//! `p = R (X - C)` in the camera frame and projects to
//! `(f px/pz + cx, f py/pz + cy)`. Points with `pz <= 0` are behind the
//! camera and never count as inliers.

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnpError {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("insufficient correspondences: got {got}, need at least {need}")]
    Insufficient { got: usize, need: usize },
    #[error("no valid pose hypothesis could be generated")]
    NoValidHypothesis,
}

/// Camera pose with intrinsics carried along (known-focal localization keeps
/// the query's focal length and principal point fixed).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates.
    pub center: Vector3<f64>,
    pub focal: f64,
    pub principal_point: Vector2<f64>,
}

impl CameraPose {
    pub fn new(
        rotation: Matrix3<f64>,
        center: Vector3<f64>,
        focal: f64,
        principal_point: Vector2<f64>,
    ) -> Result<Self, PnpError> {
        let pose = Self { rotation, center, focal, principal_point };
        pose.validate()?;
        Ok(pose)
    }

    /// Checks orthonormality (`R^T R = I` to 1e-9), `det R = +1`, and a
    /// positive focal length.
    pub fn validate(&self) -> Result<(), PnpError> {
        let r = &self.rotation;
        if !r.iter().all(|v| v.is_finite())
            || !self.center.iter().all(|v| v.is_finite())
            || !self.focal.is_finite()
            || !self.principal_point.iter().all(|v| v.is_finite())
        {
            return Err(PnpError::InvalidPose("non-finite component".into()));
        }
        let gram_err = (r.transpose() * r - Matrix3::identity()).norm();
        if gram_err > 1e-9 {
            return Err(PnpError::InvalidPose(format!(
                "rotation not orthonormal (|R^T R - I| = {gram_err:.3e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(PnpError::InvalidPose(format!(
                "rotation determinant {} != +1",
                r.determinant()
            )));
        }
        if self.focal <= 0.0 {
            return Err(PnpError::InvalidPose(format!("focal {} <= 0", self.focal)));
        }
        Ok(())
    }

    /// World point in the camera frame.
    pub fn camera_from_world(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (x - self.center)
    }

    /// Unit quaternion (w, x, y, z) of the world-to-camera rotation.
    pub fn rotation_quaternion(&self) -> [f64; 4] {
        let q = nalgebra::UnitQuaternion::from_matrix(&self.rotation);
        [q.w, q.i, q.j, q.k]
    }
}

/// Projects a world point. `None` when the point is on or behind the camera
/// plane.
pub fn reproject(pose: &CameraPose, point: &Vector3<f64>) -> Option<Vector2<f64>> {
    let p = pose.camera_from_world(point);
    if p.z <= 0.0 {
        return None;
    }
    Some(Vector2::new(
        pose.focal * p.x / p.z + pose.principal_point.x,
        pose.focal * p.y / p.z + pose.principal_point.y,
    ))
}

/// Reprojection error in pixels; `f64::INFINITY` for points behind the
/// camera, which makes them outliers under any finite threshold.
pub fn reprojection_residual(pose: &CameraPose, point: &Vector3<f64>, pixel: &Vector2<f64>) -> f64 {
    match reproject(pose, point) {
        Some(proj) => (proj - pixel).norm(),
        None => f64::INFINITY,
    }
}

/// A resolved 2D–3D correspondence (query pixel, world point).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: Vector2<f64>,
    pub point: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct PoseConfig {
    /// Inlier threshold on reprojection error, in pixels.
    pub epsilon_px: f64,
    /// Registration succeeds with at least this many inliers.
    pub min_inliers: usize,
    pub max_ransac_iters: usize,
    pub confidence: f64,
    /// Run one refinement pass over the final consensus set.
    pub refine: bool,
    pub seed: u64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            epsilon_px: 6.0,
            min_inliers: 12,
            max_ransac_iters: 10_000,
            confidence: 0.99,
            refine: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoseResult {
    pub pose: CameraPose,
    /// Indices into the correspondence slice; exactly the set with
    /// `residuals[i] <= epsilon_px` for the returned pose.
    pub inliers: Vec<usize>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// `inliers.len() >= min_inliers`.
    pub success: bool,
}

// ---------------------------------------------------------------------------
// Polynomial root extraction
// ---------------------------------------------------------------------------

/// Real roots of a polynomial given coefficients from constant to highest
/// degree. Uses the companion matrix, then a few Newton steps per root.
fn real_poly_roots(coeffs: &[f64]) -> Vec<f64> {
    let max_abs = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if max_abs == 0.0 {
        return Vec::new();
    }
    // Trim negligible leading coefficients so near-degenerate quartics fall
    // back to the lower-degree problem instead of producing wild roots.
    let mut deg = coeffs.len() - 1;
    while deg > 0 && coeffs[deg].abs() < 1e-13 * max_abs {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = coeffs[deg];
    let monic: Vec<f64> = (0..deg).map(|i| coeffs[i] / lead).collect();

    let mut comp = DMatrix::<f64>::zeros(deg, deg);
    for i in 1..deg {
        comp[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        comp[(i, deg - 1)] = -monic[i];
    }
    let eigen = comp.complex_eigenvalues();

    let eval = |x: f64| -> (f64, f64) {
        // Horner evaluation of value and derivative.
        let mut v = coeffs[deg];
        let mut d = 0.0;
        for i in (0..deg).rev() {
            d = d * x + v;
            v = v * x + coeffs[i];
        }
        (v, d)
    };

    let mut roots = Vec::new();
    for ev in eigen.iter() {
        // Near-double real roots surface as conjugate pairs with imaginary
        // parts far above working precision; keep them as candidates and let
        // Newton plus the residual gate below sort real from spurious.
        if ev.im.abs() > 1e-4 * (1.0 + ev.re.abs()) {
            continue;
        }
        let mut x = ev.re;
        for _ in 0..8 {
            let (v, d) = eval(x);
            if d.abs() < 1e-300 {
                break;
            }
            let step = v / d;
            x -= step;
            if step.abs() < 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        // Scale-aware residual check: reject candidates Newton could not
        // drive onto the polynomial (these were genuinely complex).
        let scale = max_abs * (1.0 + x.abs()).powi(deg as i32);
        if !x.is_finite() || eval(x).0.abs() > 1e-7 * scale {
            continue;
        }
        if !roots.iter().any(|r: &f64| (r - x).abs() < 1e-9 * (1.0 + x.abs())) {
            roots.push(x);
        }
    }
    roots
}

/// Multiplies two dense polynomials (coefficients low-to-high).
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Minimal solver
// ---------------------------------------------------------------------------

fn bearing(pixel: &Vector2<f64>, focal: f64, pp: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new((pixel.x - pp.x) / focal, (pixel.y - pp.y) / focal, 1.0).normalize()
}

/// Newton iterations on the three law-of-cosines depth equations. Returns the
/// polished depths, or `None` if any turns non-positive.
fn polish_depths(
    mut s: Vector3<f64>,
    cos_a: f64,
    cos_b: f64,
    cos_g: f64,
    a2: f64,
    b2: f64,
    c2: f64,
) -> Option<Vector3<f64>> {
    for _ in 0..8 {
        let r = Vector3::new(
            s[0] * s[0] + s[1] * s[1] - 2.0 * s[0] * s[1] * cos_g - c2,
            s[0] * s[0] + s[2] * s[2] - 2.0 * s[0] * s[2] * cos_b - b2,
            s[1] * s[1] + s[2] * s[2] - 2.0 * s[1] * s[2] * cos_a - a2,
        );
        let j = Matrix3::new(
            2.0 * s[0] - 2.0 * s[1] * cos_g,
            2.0 * s[1] - 2.0 * s[0] * cos_g,
            0.0,
            2.0 * s[0] - 2.0 * s[2] * cos_b,
            0.0,
            2.0 * s[2] - 2.0 * s[0] * cos_b,
            0.0,
            2.0 * s[1] - 2.0 * s[2] * cos_a,
            2.0 * s[2] - 2.0 * s[1] * cos_a,
        );
        let delta = j.lu().solve(&(-r))?;
        s += delta;
        if delta.norm() < 1e-14 * (1.0 + s.norm()) {
            break;
        }
    }
    if s.iter().all(|d| *d > 0.0) {
        Some(s)
    } else {
        None
    }
}

/// Newton steps of the full 6-DOF pose on the minimal sample (six residuals,
/// six parameters). Drives algebraically consistent poses to working
/// precision even when the originating quartic root was ill-conditioned.
fn polish_pose_on_triple(
    mut pose: CameraPose,
    points: &[Vector3<f64>; 3],
    pixels: &[Vector2<f64>; 3],
) -> CameraPose {
    for _ in 0..4 {
        let mut jac = Matrix6::<f64>::zeros();
        let mut res = Vector6::<f64>::zeros();
        let mut ok = true;
        for i in 0..3 {
            let Some((j, projected)) = reprojection_jacobian(&pose, &points[i]) else {
                ok = false;
                break;
            };
            for c in 0..6 {
                jac[(2 * i, c)] = j[0][c];
                jac[(2 * i + 1, c)] = j[1][c];
            }
            res[2 * i] = projected.x - pixels[i].x;
            res[2 * i + 1] = projected.y - pixels[i].y;
        }
        if !ok {
            break;
        }
        let Some(delta) = jac.lu().solve(&(-res)) else { break };
        let w = Vector3::new(delta[0], delta[1], delta[2]);
        pose.rotation = exp_so3(&w) * pose.rotation;
        pose.center += Vector3::new(delta[3], delta[4], delta[5]);
        if delta.norm() < 1e-14 * (1.0 + pose.center.norm()) {
            break;
        }
    }
    pose
}

/// Rigid transform Y ~= R X + t from three exact point pairs (Kabsch).
fn rigid_from_three(
    world: &[Vector3<f64>; 3],
    camera: &[Vector3<f64>; 3],
) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let wc = (world[0] + world[1] + world[2]) / 3.0;
    let cc = (camera[0] + camera[1] + camera[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (camera[i] - cc) * (world[i] - wc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u_fixed = u;
        u_fixed.set_column(2, &(-u.column(2)));
        r = u_fixed * vt;
    }
    let t = cc - r * wc;
    Some((r, t))
}

/// Absolute pose from exactly three correspondences.
///
/// Returns 0–4 poses; every returned pose reprojects the three input points
/// onto their pixels to within 1e-6 px (the solutions interpolate the minimal
/// sample, so this holds for noisy samples too).
pub fn p3p_solve(
    points: &[Vector3<f64>; 3],
    pixels: &[Vector2<f64>; 3],
    focal: f64,
    principal_point: &Vector2<f64>,
) -> Result<Vec<CameraPose>, PnpError> {
    if focal <= 0.0 || !focal.is_finite() {
        return Err(PnpError::InvalidPose(format!("focal {focal}")));
    }
    for i in 0..3 {
        for j in (i + 1)..3 {
            if (pixels[i] - pixels[j]).norm() < 1e-9 {
                return Err(PnpError::Degenerate(format!("pixels {i} and {j} coincide")));
            }
            if (points[i] - points[j]).norm() < 1e-12 {
                return Err(PnpError::Degenerate(format!("points {i} and {j} coincide")));
            }
        }
    }
    let e1 = points[1] - points[0];
    let e2 = points[2] - points[0];
    if e1.cross(&e2).norm() < 1e-10 * e1.norm() * e2.norm() {
        return Err(PnpError::Degenerate("world points are collinear".into()));
    }

    let j1 = bearing(&pixels[0], focal, principal_point);
    let j2 = bearing(&pixels[1], focal, principal_point);
    let j3 = bearing(&pixels[2], focal, principal_point);

    let cos_a = j2.dot(&j3); // opposite side a = |X2 - X3|
    let cos_b = j1.dot(&j3); // opposite side b = |X1 - X3|
    let cos_g = j1.dot(&j2); // opposite side c = |X1 - X2|

    let a2 = (points[1] - points[2]).norm_squared();
    let b2 = (points[0] - points[2]).norm_squared();
    let c2 = (points[0] - points[1]).norm_squared();

    // Depth ratios u = s2/s1, v = s3/s1 reduce the three law-of-cosines
    // equations to u = N(v)/D(v) and a quartic P(v) = 0.
    let big_a = a2 / b2;
    let big_c = c2 / b2;
    let n_poly = [1.0 + big_a - big_c, -2.0 * cos_b * (big_a - big_c), -(1.0 - big_a + big_c)];
    let d_poly = [2.0 * cos_g, -2.0 * cos_a];
    let q_poly = [1.0 - big_c, 2.0 * big_c * cos_b, -big_c];

    let nn = poly_mul(&n_poly, &n_poly);
    let nd = poly_mul(&n_poly, &d_poly);
    let qdd = poly_mul(&q_poly, &poly_mul(&d_poly, &d_poly));
    let mut quartic = [0.0f64; 5];
    for (i, v) in nn.iter().enumerate() {
        quartic[i] += v;
    }
    for (i, v) in nd.iter().enumerate() {
        quartic[i] -= 2.0 * cos_g * v;
    }
    for (i, v) in qdd.iter().enumerate() {
        quartic[i] += v;
    }

    let mut poses = Vec::new();
    for v in real_poly_roots(&quartic) {
        if v.is_nan() || v <= 0.0 {
            continue;
        }
        let den = d_poly[0] + d_poly[1] * v;
        let mut u_candidates = Vec::new();
        if den.abs() > 1e-10 {
            u_candidates.push((n_poly[0] + n_poly[1] * v + n_poly[2] * v * v) / den);
        }
        // The rational form u = N(v)/D(v) loses precision whenever D(v) is
        // small, and the root v itself carries error; the quadratic
        // u^2 - 2 u cos_g + Q(v) = 0 gives alternative candidates, and
        // spurious ones are rejected by the consistency gate below.
        let q = q_poly[0] + q_poly[1] * v + q_poly[2] * v * v;
        let disc = cos_g * cos_g - q;
        if disc >= 0.0 {
            u_candidates.push(cos_g + disc.sqrt());
            u_candidates.push(cos_g - disc.sqrt());
        }
        for u in u_candidates {
            if u.is_nan() || u <= 0.0 {
                continue;
            }
            let s1_sq = b2 / (1.0 + v * v - 2.0 * v * cos_b);
            if s1_sq.is_nan() || s1_sq <= 0.0 {
                continue;
            }
            let s1 = s1_sq.sqrt();
            let Some(s) =
                polish_depths(Vector3::new(s1, u * s1, v * s1), cos_a, cos_b, cos_g, a2, b2, c2)
            else {
                continue;
            };
            let cam = [s[0] * j1, s[1] * j2, s[2] * j3];
            let Some((r, t)) = rigid_from_three(points, &cam) else {
                continue;
            };
            let pose = CameraPose {
                rotation: orthonormalize(&r),
                center: -(r.transpose() * t),
                focal,
                principal_point: *principal_point,
            };
            let pose = polish_pose_on_triple(pose, points, pixels);
            // Spurious roots and reflected solutions fail to reproduce the
            // minimal sample; keep only algebraically consistent poses.
            let consistent =
                (0..3).all(|i| reprojection_residual(&pose, &points[i], &pixels[i]) <= 1e-6);
            if !consistent {
                continue;
            }
            let duplicate = poses.iter().any(|p: &CameraPose| {
                (p.rotation - pose.rotation).norm() < 1e-7
                    && (p.center - pose.center).norm() < 1e-7 * (1.0 + pose.center.norm())
            });
            if !duplicate {
                poses.push(pose);
            }
        }
    }
    poses.truncate(4);
    Ok(poses)
}

// ---------------------------------------------------------------------------
// Refinement
// ---------------------------------------------------------------------------

/// Analytic Jacobian of the reprojection residual at the current pose, with
/// respect to a left rotation perturbation `exp([w]x) R` (columns 0..3) and a
/// center shift `C + dC` (columns 3..6). Also returns the projected pixel.
/// `None` when the point is behind the camera.
pub fn reprojection_jacobian(
    pose: &CameraPose,
    point: &Vector3<f64>,
) -> Option<([[f64; 6]; 2], Vector2<f64>)> {
    let p = pose.camera_from_world(point);
    if p.z <= 0.0 {
        return None;
    }
    let f = pose.focal;
    let inv_z = 1.0 / p.z;
    // d(pi)/dp, 2x3
    let dpi =
        [[f * inv_z, 0.0, -f * p.x * inv_z * inv_z], [0.0, f * inv_z, -f * p.y * inv_z * inv_z]];
    // dp/dw = -[p]x ; dp/dC = -R
    let dp_dw = Matrix3::new(0.0, p.z, -p.y, -p.z, 0.0, p.x, p.y, -p.x, 0.0);
    let dp_dc = -pose.rotation;
    let mut jac = [[0.0f64; 6]; 2];
    for row in 0..2 {
        for col in 0..3 {
            let mut acc_w = 0.0;
            let mut acc_c = 0.0;
            for m in 0..3 {
                acc_w += dpi[row][m] * dp_dw[(m, col)];
                acc_c += dpi[row][m] * dp_dc[(m, col)];
            }
            jac[row][col] = acc_w;
            jac[row][col + 3] = acc_c;
        }
    }
    let proj = Vector2::new(
        f * p.x * inv_z + pose.principal_point.x,
        f * p.y * inv_z + pose.principal_point.y,
    );
    Some((jac, proj))
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues' rotation formula.
fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-12 {
        Matrix3::identity() + k + 0.5 * k * k
    } else {
        Matrix3::identity()
            + (theta.sin() / theta) * k
            + ((1.0 - theta.cos()) / (theta * theta)) * k * k
    }
}

/// Nearest rotation matrix in Frobenius norm.
fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return *r;
    };
    let mut fixed = u * vt;
    if fixed.determinant() < 0.0 {
        let mut u2 = u;
        u2.set_column(2, &(-u.column(2)));
        fixed = u2 * vt;
    }
    fixed
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub pose: CameraPose,
    /// Whether the final cost is strictly below the initial cost.
    pub improved: bool,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

fn total_cost(pose: &CameraPose, corrs: &[Correspondence]) -> f64 {
    corrs
        .iter()
        .map(|c| {
            let r = reprojection_residual(pose, &c.point, &c.pixel);
            r * r
        })
        .sum()
}

/// Levenberg–Marquardt over (rotation, center) with the focal length and
/// principal point held fixed. The summed squared residual never increases:
/// steps that fail to reduce the cost are rejected, and divergent problems
/// return the input pose unchanged.
pub fn refine_pose(pose: &CameraPose, corrs: &[Correspondence]) -> RefineOutcome {
    let initial_cost = total_cost(pose, corrs);
    let mut best = pose.clone();
    let mut cost = initial_cost;
    let mut lambda = 1e-3;
    let mut iterations = 0;

    if corrs.is_empty() || !initial_cost.is_finite() {
        return RefineOutcome {
            pose: best,
            improved: false,
            initial_cost,
            final_cost: cost,
            iterations,
        };
    }

    for _ in 0..50 {
        iterations += 1;
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        let mut behind = false;
        for c in corrs {
            match reprojection_jacobian(&best, &c.point) {
                Some((jac, proj)) => {
                    let r = proj - c.pixel;
                    for row in 0..2 {
                        for i in 0..6 {
                            jtr[i] += jac[row][i] * r[row];
                            for j in 0..6 {
                                jtj[(i, j)] += jac[row][i] * jac[row][j];
                            }
                        }
                    }
                }
                None => {
                    behind = true;
                    break;
                }
            }
        }
        if behind {
            break;
        }

        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = jtj;
            for i in 0..6 {
                damped[(i, i)] += lambda;
            }
            let Some(delta) = damped.lu().solve(&(-jtr)) else {
                lambda *= 8.0;
                continue;
            };
            let w = Vector3::new(delta[0], delta[1], delta[2]);
            let dc = Vector3::new(delta[3], delta[4], delta[5]);
            let trial = CameraPose {
                rotation: exp_so3(&w) * best.rotation,
                center: best.center + dc,
                focal: best.focal,
                principal_point: best.principal_point,
            };
            let trial_cost = total_cost(&trial, corrs);
            if trial_cost < cost {
                best = trial;
                cost = trial_cost;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = delta.norm() > 1e-14 * (1.0 + best.center.norm());
                break;
            }
            lambda *= 8.0;
            if lambda > 1e12 {
                break;
            }
        }
        if !accepted {
            break;
        }
    }

    best.rotation = orthonormalize(&best.rotation);
    let final_cost = total_cost(&best, corrs);
    // The re-orthonormalization shift is ~1e-15; guard against it pushing the
    // cost above the input on an already-optimal pose.
    if final_cost > initial_cost {
        return RefineOutcome {
            pose: pose.clone(),
            improved: false,
            initial_cost,
            final_cost: initial_cost,
            iterations,
        };
    }
    RefineOutcome {
        pose: best,
        improved: final_cost < initial_cost,
        initial_cost,
        final_cost,
        iterations,
    }
}

// ---------------------------------------------------------------------------
// RANSAC
// ---------------------------------------------------------------------------

fn sample_is_valid(corrs: &[Correspondence], idx: &[usize; 3]) -> bool {
    if idx[0] == idx[1] || idx[0] == idx[2] || idx[1] == idx[2] {
        return false;
    }
    let p = [corrs[idx[0]].point, corrs[idx[1]].point, corrs[idx[2]].point];
    let px = [corrs[idx[0]].pixel, corrs[idx[1]].pixel, corrs[idx[2]].pixel];
    for i in 0..3 {
        for j in (i + 1)..3 {
            if (p[i] - p[j]).norm() < 1e-12 || (px[i] - px[j]).norm() < 1e-9 {
                return false;
            }
        }
    }
    let e1 = p[1] - p[0];
    let e2 = p[2] - p[0];
    e1.cross(&e2).norm() >= 1e-10 * e1.norm() * e2.norm()
}

/// Robust absolute pose from noisy correspondences.
///
/// Seeded and fully deterministic: identical inputs and config produce an
/// identical result. The iteration count adapts to the best inlier ratio
/// found so far (standard `log(1-conf) / log(1 - w^3)` schedule) and is
/// capped by `max_ransac_iters`.
pub fn ransac_pnp(
    corrs: &[Correspondence],
    focal: f64,
    principal_point: &Vector2<f64>,
    cfg: &PoseConfig,
) -> Result<PoseResult, PnpError> {
    let n = corrs.len();
    if n < 4 {
        return Err(PnpError::Insufficient { got: n, need: 4 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, CameraPose)> = None;
    let mut required = cfg.max_ransac_iters;
    let mut iterations = 0;

    while iterations < required && iterations < cfg.max_ransac_iters {
        iterations += 1;
        let idx = [rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n)];
        if !sample_is_valid(corrs, &idx) {
            continue;
        }
        let points = [corrs[idx[0]].point, corrs[idx[1]].point, corrs[idx[2]].point];
        let pixels = [corrs[idx[0]].pixel, corrs[idx[1]].pixel, corrs[idx[2]].pixel];
        let Ok(candidates) = p3p_solve(&points, &pixels, focal, principal_point) else {
            continue;
        };
        for pose in candidates {
            let mut count = 0usize;
            let mut inlier_sq = 0.0f64;
            for c in corrs {
                let r = reprojection_residual(&pose, &c.point, &c.pixel);
                if r <= cfg.epsilon_px {
                    count += 1;
                    inlier_sq += r * r;
                }
            }
            let better = match &best {
                None => count > 0,
                Some((bc, bs, _)) => count > *bc || (count == *bc && inlier_sq < *bs),
            };
            if better {
                best = Some((count, inlier_sq, pose));
                let w = count as f64 / n as f64;
                let p_fail = 1.0 - w * w * w;
                required = if p_fail <= f64::EPSILON {
                    iterations
                } else {
                    let need = (1.0 - cfg.confidence).ln() / p_fail.ln();
                    need.ceil().max(1.0).min(cfg.max_ransac_iters as f64) as usize
                };
            }
        }
    }

    let Some((_, _, mut pose)) = best else {
        return Err(PnpError::NoValidHypothesis);
    };

    let collect = |pose: &CameraPose| -> (Vec<usize>, Vec<f64>) {
        let residuals: Vec<f64> =
            corrs.iter().map(|c| reprojection_residual(pose, &c.point, &c.pixel)).collect();
        let inliers = residuals
            .iter()
            .enumerate()
            .filter(|(_, r)| **r <= cfg.epsilon_px)
            .map(|(i, _)| i)
            .collect();
        (inliers, residuals)
    };

    let (mut inliers, mut residuals) = collect(&pose);
    if cfg.refine && inliers.len() >= 3 {
        let subset: Vec<Correspondence> = inliers.iter().map(|&i| corrs[i]).collect();
        let refined = refine_pose(&pose, &subset);
        let (r_inliers, r_residuals) = collect(&refined.pose);
        // Keep the refined pose unless it lost consensus.
        if r_inliers.len() >= inliers.len() {
            pose = refined.pose;
            inliers = r_inliers;
            residuals = r_residuals;
        }
    }

    let success = inliers.len() >= cfg.min_inliers;
    Ok(PoseResult { pose, inliers, residuals, iterations, success })
}

// ---------------------------------------------------------------------------
