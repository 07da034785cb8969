//! Alternating least-squares fit of pose, shape and expression to landmark
//! observations.
//!
//! The objective is
//!
//! ```text
//! Σᵢ ‖project(θ, Sᵢ(α, β)) − obsᵢ‖² + λα‖α‖² + λβ‖β‖²
//! ```
//!
//! with `α`, `β` in normalized units. Each outer iteration fits the camera
//! to the current landmark vertices, then solves the ridge problems for `α`
//! (with `β` fixed) and `β` (with `α` fixed). Every block update is an
//! exact minimizer over its block, so the objective never increases.
//!
//! Alternation converges slowly when pose and shape are coupled, so the
//! result is polished by damped Gauss-Newton steps over all parameters
//! jointly. Only steps that lower the objective are taken.
//!
//! When used as an [`Estimator`], the landmark solution is then refined
//! against the depth image itself: with the pose held fixed, `α`, `β` and a
//! depth offset are re-solved against every pixel where observation and
//! model overlap, re-rasterizing between steps. Landmarks alone leave the
//! coefficients sensitive to per-landmark depth noise; thousands of pixels
//! average it out.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{EstimateError, Estimator, EstimatorInput, EstimatorOutput, FailureKind};
use crate::model::{FaceParams, FaceShape, MorphableModel};
use crate::projection::{fit_weak_perspective, WeakPerspective};
use crate::render::{rasterize_fragments, DepthImage, FragmentBuffer, SENTINEL};

const NAME: &str = "landmark";

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandmarkFitConfig {
    pub outer_iters: usize,
    pub ridge_shape: f64,
    pub ridge_expr: f64,
    pub tol: f64,
    /// Joint Levenberg-Marquardt steps after the alternation.
    pub refine_iters: usize,
    /// Depth-image refinement steps (0 disables; estimator use only).
    pub dense_iters: usize,
    /// Ridge weight on coefficients during depth refinement. With
    /// coefficients a priori standard normal this is the squared depth
    /// noise in mm².
    pub dense_ridge: f64,
    /// Depth residuals beyond this (mm) count as outliers.
    pub dense_outlier_mm: f64,
}

impl Default for LandmarkFitConfig {
    fn default() -> Self {
        Self {
            outer_iters: 10,
            ridge_shape: 1e-2,
            ridge_expr: 1e-2,
            tol: 1e-8,
            refine_iters: 50,
            dense_iters: 20,
            dense_ridge: 9.0,
            dense_outlier_mm: 15.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LandmarkFitter {
    pub config: LandmarkFitConfig,
}

impl LandmarkFitter {
    pub fn new(config: LandmarkFitConfig) -> Self {
        Self { config }
    }
}

impl Estimator for LandmarkFitter {
    fn name(&self) -> &str {
        NAME
    }

    fn estimate(
        &self,
        input: &EstimatorInput,
        model: &MorphableModel,
    ) -> Result<EstimatorOutput, EstimateError> {
        input.validate(model)?;
        let lms = input.landmarks.as_deref().ok_or_else(|| {
            EstimateError::InvalidInput("the landmark fitter needs landmark observations".into())
        })?;
        let mut out = landmark_fit(lms, model, &self.config)?;
        if self.config.dense_iters > 0 && input.depth.valid_count() > 0 {
            let (params, steps) = dense_refine(&input.depth, lms, model, &self.config, &out.params)?;
            let sys = LandmarkSystem::new(model);
            let (a, b) = (DVector::from_column_slice(&params.shape), DVector::from_column_slice(&params.expression));
            let cam = params
                .camera()
                .map_err(|e| EstimateError::failed(NAME, FailureKind::NonFinite, e.to_string()))?;
            out.final_residual = Some((data_term(&cam, &sys.points(&a, &b), lms) / lms.len() as f64).sqrt());
            out.iterations += steps;
            out.params = params;
        }
        Ok(out)
    }
}

/// Landmark-restricted slices of the model, with bases pre-multiplied by
/// their scales so coefficients stay in normalized units.
struct LandmarkSystem {
    mean: Vec<Vector3<f64>>,
    shape: Vec<DMatrix<f64>>,
    expression: Vec<DMatrix<f64>>,
}

impl LandmarkSystem {
    fn new(model: &MorphableModel) -> Self {
        let rows = |basis: &DMatrix<f64>, scales: &DVector<f64>, v: usize| {
            let mut block = basis.rows(3 * v, 3).into_owned();
            for (c, s) in scales.iter().enumerate() {
                block.column_mut(c).scale_mut(*s);
            }
            block
        };
        let mut sys = Self {
            mean: Vec::new(),
            shape: Vec::new(),
            expression: Vec::new(),
        };
        for &v in model.landmark_indices() {
            let v = v as usize;
            sys.mean.push(model.mean_shape().fixed_rows::<3>(3 * v).into_owned());
            sys.shape.push(rows(model.shape_basis(), model.shape_scales(), v));
            sys.expression
                .push(rows(model.expression_basis(), model.expression_scales(), v));
        }
        sys
    }

    fn points(&self, alpha: &DVector<f64>, beta: &DVector<f64>) -> Vec<Vector3<f64>> {
        (0..self.mean.len())
            .map(|i| self.mean[i] + &self.shape[i] * alpha + &self.expression[i] * beta)
            .collect()
    }
}

fn data_term(cam: &WeakPerspective, points: &[Vector3<f64>], obs: &[[f64; 3]]) -> f64 {
    points
        .iter()
        .zip(obs)
        .map(|(p, o)| {
            let q = cam.project_point([p.x, p.y, p.z]);
            (q[0] - o[0]).powi(2) + (q[1] - o[1]).powi(2) + (q[2] - o[2]).powi(2)
        })
        .sum()
}

/// Ridge solve of `min ‖A x − r‖² + λ‖x‖²` where `A` stacks `D R Bᵢ` blocks.
fn ridge_block(
    cam: &WeakPerspective,
    blocks: &[DMatrix<f64>],
    residuals: &[Vector3<f64>],
    lambda: f64,
) -> Result<DVector<f64>, EstimateError> {
    let dim = blocks[0].ncols();
    let d = Matrix3::from_diagonal(&Vector3::new(cam.scale, cam.scale, 1.0));
    let dr = d * cam.rotation;
    let mut normal = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for (b, r) in blocks.iter().zip(residuals) {
        let a = DMatrix::from_fn(3, 3, |i, j| dr[(i, j)]) * b;
        normal += a.transpose() * &a;
        rhs += a.transpose() * DVector::from_column_slice(r.as_slice());
    }
    for i in 0..dim {
        normal[(i, i)] += lambda;
    }
    let solution = match normal.clone().cholesky() {
        Some(ch) => Some(ch.solve(&rhs)),
        None => normal.lu().solve(&rhs),
    };
    let x = solution.ok_or_else(|| {
        EstimateError::failed(NAME, FailureKind::Degenerate, "singular coefficient system")
    })?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(EstimateError::failed(
            NAME,
            FailureKind::NonFinite,
            "non-finite coefficients",
        ));
    }
    Ok(x)
}

/// Fits `(θ, α, β)` to landmark observations ordered like
/// `model.landmark_indices()`.
pub fn landmark_fit(
    observations: &[[f64; 3]],
    model: &MorphableModel,
    cfg: &LandmarkFitConfig,
) -> Result<EstimatorOutput, EstimateError> {
    let n_lm = model.landmark_indices().len();
    if observations.len() != n_lm {
        return Err(EstimateError::InvalidInput(format!(
            "{} landmarks given, model defines {n_lm}",
            observations.len()
        )));
    }
    if n_lm < crate::model::MIN_LANDMARKS {
        return Err(EstimateError::InvalidInput(format!(
            "need at least {} landmarks",
            crate::model::MIN_LANDMARKS
        )));
    }
    if !(cfg.ridge_shape >= 0.0 && cfg.ridge_expr >= 0.0 && cfg.tol >= 0.0) || cfg.outer_iters == 0 {
        return Err(EstimateError::InvalidInput(format!("invalid fit config {cfg:?}")));
    }
    let sys = LandmarkSystem::new(model);
    let mut alpha = DVector::zeros(model.shape_dim());
    let mut beta = DVector::zeros(model.expression_dim());
    let penalty = |a: &DVector<f64>, b: &DVector<f64>| {
        cfg.ridge_shape * a.norm_squared() + cfg.ridge_expr * b.norm_squared()
    };
    let fit_camera = |points: &[Vector3<f64>]| {
        let pts: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        fit_weak_perspective(&pts, observations)
            .map_err(|e| EstimateError::failed(NAME, FailureKind::Degenerate, e.to_string()))
    };

    let mut cam = fit_camera(&sys.points(&alpha, &beta))?;
    let mut log = Vec::with_capacity(2 * cfg.outer_iters + 1);
    let mut objective = data_term(&cam, &sys.points(&alpha, &beta), observations) + penalty(&alpha, &beta);
    log.push(objective);
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..cfg.outer_iters {
        iterations = iter + 1;
        let start = objective;

        if iter > 0 {
            let points = sys.points(&alpha, &beta);
            let candidate = fit_camera(&points)?;
            let value = data_term(&candidate, &points, observations) + penalty(&alpha, &beta);
            if value <= objective {
                cam = candidate;
                objective = value;
            }
            log.push(objective);
        }

        let offset = |i: usize, p: Vector3<f64>| {
            let q = cam.project_point([p.x, p.y, p.z]);
            let o = observations[i];
            Vector3::new(o[0] - q[0], o[1] - q[1], o[2] - q[2])
        };
        // Residual of everything except the shape term.
        let r_alpha: Vec<Vector3<f64>> = (0..n_lm)
            .map(|i| offset(i, sys.mean[i] + &sys.expression[i] * &beta))
            .collect();
        let new_alpha = ridge_block(&cam, &sys.shape, &r_alpha, cfg.ridge_shape)?;
        let r_beta: Vec<Vector3<f64>> = (0..n_lm)
            .map(|i| offset(i, sys.mean[i] + &sys.shape[i] * &new_alpha))
            .collect();
        let new_beta = ridge_block(&cam, &sys.expression, &r_beta, cfg.ridge_expr)?;
        let value = data_term(&cam, &sys.points(&new_alpha, &new_beta), observations)
            + penalty(&new_alpha, &new_beta);
        if !value.is_finite() {
            return Err(EstimateError::failed(NAME, FailureKind::NonFinite, "objective is not finite"));
        }
        // Exact block minimizers cannot increase the objective beyond rounding.
        if value <= objective {
            alpha = new_alpha;
            beta = new_beta;
            objective = value;
        }
        log.push(objective);

        if start - objective < cfg.tol * (1.0 + start) {
            converged = true;
            break;
        }
    }

    let polish = refine_joint(&sys, observations, cfg, cam, alpha, beta, &mut log)?;
    (cam, alpha, beta) = (polish.cam, polish.alpha, polish.beta);
    iterations += polish.steps;
    converged |= polish.converged;

    let points = sys.points(&alpha, &beta);
    let residual = (data_term(&cam, &points, observations) / n_lm as f64).sqrt();
    let params = FaceParams {
        shape: alpha.iter().copied().collect(),
        expression: beta.iter().copied().collect(),
        pose: cam.to_pose(),
    };
    Ok(EstimatorOutput {
        params,
        converged,
        iterations,
        final_residual: Some(residual),
        objective_log: log,
    })
}

struct Polished {
    cam: WeakPerspective,
    alpha: DVector<f64>,
    beta: DVector<f64>,
    steps: usize,
    converged: bool,
}

fn skew(p: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -p.z, p.y, p.z, 0.0, -p.x, -p.y, p.x, 0.0)
}

/// Levenberg-Marquardt over `(log s, ω, t, α, β)` where the rotation is
/// updated as `R exp([ω]×)`. Appends each accepted objective to `log`.
fn refine_joint(
    sys: &LandmarkSystem,
    obs: &[[f64; 3]],
    cfg: &LandmarkFitConfig,
    mut cam: WeakPerspective,
    mut alpha: DVector<f64>,
    mut beta: DVector<f64>,
    log: &mut Vec<f64>,
) -> Result<Polished, EstimateError> {
    let (k, l, n) = (alpha.len(), beta.len(), obs.len());
    let dim = 7 + k + l;
    let rows = 3 * n + k + l;
    let (sa, sb) = (cfg.ridge_shape.sqrt(), cfg.ridge_expr.sqrt());
    let objective = |cam: &WeakPerspective, a: &DVector<f64>, b: &DVector<f64>| {
        data_term(cam, &sys.points(a, b), obs)
            + cfg.ridge_shape * a.norm_squared()
            + cfg.ridge_expr * b.norm_squared()
    };
    let mut value = objective(&cam, &alpha, &beta);
    let mut mu = 1e-3;
    let mut steps = 0;
    let mut converged = false;
    for _ in 0..cfg.refine_iters {
        let d = Matrix3::from_diagonal(&Vector3::new(cam.scale, cam.scale, 1.0));
        let dr = d * cam.rotation;
        let mut jac = DMatrix::<f64>::zeros(rows, dim);
        let mut res = DVector::<f64>::zeros(rows);
        for (i, p) in sys.points(&alpha, &beta).iter().enumerate() {
            let rp = cam.rotation * p;
            let q = d * rp + cam.translation;
            for a in 0..3 {
                res[3 * i + a] = q[a] - obs[i][a];
            }
            let mut blk = jac.view_mut((3 * i, 0), (3, dim));
            blk[(0, 0)] = cam.scale * rp.x;
            blk[(1, 0)] = cam.scale * rp.y;
            blk.fixed_view_mut::<3, 3>(0, 1).copy_from(&(-dr * skew(p)));
            blk.fixed_view_mut::<3, 3>(0, 4).copy_from(&Matrix3::identity());
            let drm = DMatrix::from_fn(3, 3, |r, c| dr[(r, c)]);
            blk.view_mut((0, 7), (3, k)).copy_from(&(&drm * &sys.shape[i]));
            blk.view_mut((0, 7 + k), (3, l)).copy_from(&(&drm * &sys.expression[i]));
        }
        for j in 0..k {
            jac[(3 * n + j, 7 + j)] = sa;
            res[3 * n + j] = sa * alpha[j];
        }
        for j in 0..l {
            jac[(3 * n + k + j, 7 + k + j)] = sb;
            res[3 * n + k + j] = sb * beta[j];
        }
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &res;
        if grad.amax() <= 1e-12 * (1.0 + value) {
            converged = true;
            break;
        }
        let mut accepted = false;
        while mu < 1e12 {
            let mut h = jtj.clone();
            for i in 0..dim {
                h[(i, i)] += mu * (jtj[(i, i)] + 1e-12);
            }
            let Some(delta) = h.cholesky().map(|c| c.solve(&(-&grad))) else {
                mu *= 10.0;
                continue;
            };
            let omega = Vector3::new(delta[1], delta[2], delta[3]);
            let rotation = cam.rotation * *nalgebra::Rotation3::new(omega).matrix();
            let translation = cam.translation + Vector3::new(delta[4], delta[5], delta[6]);
            let Ok(trial) = WeakPerspective::new(cam.scale * delta[0].exp(), rotation, translation)
            else {
                mu *= 10.0;
                continue;
            };
            let ta = &alpha + delta.rows(7, k);
            let tb = &beta + delta.rows(7 + k, l);
            let tv = objective(&trial, &ta, &tb);
            if tv.is_finite() && tv < value {
                let gain = value - tv;
                (cam, alpha, beta) = (trial, ta, tb);
                value = tv;
                mu = (mu / 10.0).max(1e-12);
                accepted = true;
                steps += 1;
                log.push(value);
                if gain <= cfg.tol * 1e-6 * (1.0 + value) {
                    converged = true;
                }
                break;
            }
            mu *= 10.0;
        }
        if !accepted || converged {
            converged = true;
            break;
        }
    }
    Ok(Polished {
        cam,
        alpha,
        beta,
        steps,
        converged,
    })
}

/// Truncated-quadratic depth misfit plus landmark and ridge terms.
/// Pixels covered by only one of observation and model pay the full
/// truncation penalty.
struct DenseEval {
    cost: f64,
    shape: FaceShape,
    projected: Vec<[f64; 3]>,
    frags: FragmentBuffer,
}

struct DenseState {
    cam: WeakPerspective,
    alpha: DVector<f64>,
    beta: DVector<f64>,
}

fn dense_refine(
    depth: &DepthImage,
    obs: &[[f64; 3]],
    model: &MorphableModel,
    cfg: &LandmarkFitConfig,
    start: &FaceParams,
) -> Result<(FaceParams, usize), EstimateError> {
    if !(cfg.dense_ridge >= 0.0 && cfg.dense_outlier_mm > 0.0) {
        return Err(EstimateError::InvalidInput(format!("invalid fit config {cfg:?}")));
    }
    let nonfinite = |e: &dyn std::fmt::Display| EstimateError::failed(NAME, FailureKind::NonFinite, e.to_string());
    let (k, l) = (model.shape_dim(), model.expression_dim());
    let dim = 7 + k + l;
    let sys = LandmarkSystem::new(model);
    let (w, h) = (depth.width(), depth.height());
    let t2 = cfg.dense_outlier_mm * cfg.dense_outlier_mm;

    let evaluate = |st: &DenseState| -> Result<DenseEval, EstimateError> {
        let shape = model
            .synthesize_coefficients(st.alpha.as_slice(), st.beta.as_slice())
            .map_err(|e| nonfinite(&e))?;
        let projected = st.cam.project(&shape);
        let frags = rasterize_fragments(&projected, model.triangles(), w, h)
            .map_err(|e| EstimateError::failed(NAME, FailureKind::Degenerate, e.to_string()))?;
        let mut cost = 0.0;
        for (d, f) in depth.data().iter().zip(&frags.fragments) {
            cost += match (*d != SENTINEL, f) {
                (true, Some(f)) => (d - f.depth).powi(2).min(t2),
                (false, None) => 0.0,
                _ => t2,
            };
        }
        cost += data_term(&st.cam, &sys.points(&st.alpha, &st.beta), obs);
        cost += cfg.dense_ridge * (st.alpha.norm_squared() + st.beta.norm_squared());
        Ok(DenseEval { cost, shape, projected, frags })
    };

    let mut state = DenseState {
        cam: start.camera().map_err(|e| nonfinite(&e))?,
        alpha: DVector::from_column_slice(&start.shape),
        beta: DVector::from_column_slice(&start.expression),
    };
    let mut current = evaluate(&state)?;
    let mut mu = 1e-3;
    let mut steps = 0;
    let basis = |v: usize| {
        let mut b = DMatrix::<f64>::zeros(3, k + l);
        for (c, s) in model.shape_scales().iter().enumerate() {
            b.view_mut((0, c), (3, 1))
                .copy_from(&(model.shape_basis().fixed_view::<3, 1>(3 * v, c) * *s));
        }
        for (c, s) in model.expression_scales().iter().enumerate() {
            b.view_mut((0, k + c), (3, 1))
                .copy_from(&(model.expression_basis().fixed_view::<3, 1>(3 * v, c) * *s));
        }
        b
    };
    for _ in 0..cfg.dense_iters {
        let cam = &state.cam;
        let d = Matrix3::from_diagonal(&Vector3::new(cam.scale, cam.scale, 1.0));
        let dr = d * cam.rotation;
        let drm = DMatrix::from_fn(3, 3, |r, c| dr[(r, c)]);
        // Derivative of each projected vertex (u, v, depth) with respect to
        // (log s, rotation increment, translation, α, β).
        let vjac: Vec<DMatrix<f64>> = (0..model.n_vertices())
            .map(|v| {
                let x = Vector3::from(current.shape.vertex(v));
                let y = cam.rotation * x;
                let mut j = DMatrix::<f64>::zeros(3, dim);
                j[(0, 0)] = cam.scale * y.x;
                j[(1, 0)] = cam.scale * y.y;
                j.fixed_view_mut::<3, 3>(0, 1).copy_from(&(-dr * skew(&x)));
                j.fixed_view_mut::<3, 3>(0, 4).copy_from(&Matrix3::identity());
                j.view_mut((0, 7), (3, k + l)).copy_from(&(&drm * basis(v)));
                j
            })
            .collect();

        let mut jtj = DMatrix::<f64>::zeros(dim, dim);
        let mut grad = DVector::<f64>::zeros(dim);
        let mut row = DVector::<f64>::zeros(dim);
        let mut used = 0usize;
        for (i, f) in current.frags.fragments.iter().enumerate() {
            let (Some(f), obs_d) = (f, depth.data()[i]) else { continue };
            let r = f.depth - obs_d;
            if obs_d == SENTINEL || r.abs() > cfg.dense_outlier_mm {
                continue;
            }
            // The pixel stays put while the surface moves under it, so the
            // depth seen there shifts by dz minus the plane slope times dxy.
            let [p0, p1, p2] = model.triangles()[f.triangle as usize].map(|v| current.projected[v as usize]);
            let (e1, e2) = ([p1[0] - p0[0], p1[1] - p0[1]], [p2[0] - p0[0], p2[1] - p0[1]]);
            let det = e1[0] * e2[1] - e1[1] * e2[0];
            if det.abs() < 1e-9 {
                continue;
            }
            let (dz1, dz2) = (p1[2] - p0[2], p2[2] - p0[2]);
            let gu = (dz1 * e2[1] - dz2 * e1[1]) / det;
            let gv = (e1[0] * dz2 - e2[0] * dz1) / det;
            row.fill(0.0);
            for (v, wt) in model.triangles()[f.triangle as usize].iter().zip(f.weights) {
                let j = &vjac[*v as usize];
                for c in 0..dim {
                    row[c] += wt * (j[(2, c)] - gu * j[(0, c)] - gv * j[(1, c)]);
                }
            }
            jtj.syger(1.0, &row, &row, 1.0);
            grad.axpy(r, &row, 1.0);
            used += 1;
        }
        if used < dim {
            break;
        }
        for (i, p) in sys.points(&state.alpha, &state.beta).iter().enumerate() {
            let rp = cam.rotation * p;
            let q = d * rp + cam.translation;
            let mut blk = DMatrix::<f64>::zeros(3, dim);
            blk[(0, 0)] = cam.scale * rp.x;
            blk[(1, 0)] = cam.scale * rp.y;
            blk.fixed_view_mut::<3, 3>(0, 1).copy_from(&(-dr * skew(p)));
            blk.fixed_view_mut::<3, 3>(0, 4).copy_from(&Matrix3::identity());
            blk.view_mut((0, 7), (3, k)).copy_from(&(&drm * &sys.shape[i]));
            blk.view_mut((0, 7 + k), (3, l)).copy_from(&(&drm * &sys.expression[i]));
            let res = DVector::from_iterator(3, (0..3).map(|a| q[a] - obs[i][a]));
            jtj += blk.transpose() * &blk;
            grad += blk.transpose() * res;
        }
        for c in 0..k + l {
            jtj[(7 + c, 7 + c)] += cfg.dense_ridge;
            let coeff = if c < k { state.alpha[c] } else { state.beta[c - k] };
            grad[7 + c] += cfg.dense_ridge * coeff;
        }

        let mut accepted = false;
        while mu < 1e8 {
            let mut hm = jtj.clone();
            for i in 0..dim {
                hm[(i, i)] += mu * (jtj[(i, i)] + 1e-12);
            }
            let Some(delta) = hm.cholesky().map(|c| c.solve(&(-&grad))) else {
                mu *= 10.0;
                continue;
            };
            let omega = Vector3::new(delta[1], delta[2], delta[3]);
            let rotation = cam.rotation * *nalgebra::Rotation3::new(omega).matrix();
            let translation = cam.translation + Vector3::new(delta[4], delta[5], delta[6]);
            let Ok(trial_cam) = WeakPerspective::new(cam.scale * delta[0].exp(), rotation, translation)
            else {
                mu *= 10.0;
                continue;
            };
            let trial = DenseState {
                cam: trial_cam,
                alpha: &state.alpha + delta.rows(7, k),
                beta: &state.beta + delta.rows(7 + k, l),
            };
            let eval = evaluate(&trial)?;
            if eval.cost.is_finite() && eval.cost < current.cost {
                let gain = current.cost - eval.cost;
                state = trial;
                current = eval;
                mu = (mu / 10.0).max(1e-9);
                accepted = true;
                steps += 1;
                if gain <= cfg.tol * (1.0 + current.cost) {
                    return finish(state, steps);
                }
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    finish(state, steps)
}

fn finish(state: DenseState, steps: usize) -> Result<(FaceParams, usize), EstimateError> {
    Ok((
        FaceParams {
            shape: state.alpha.iter().copied().collect(),
            expression: state.beta.iter().copied().collect(),
            pose: state.cam.to_pose(),
        },
        steps,
    ))
}


#[cfg(test)]
mod dense_tests {
    use super::*;
    use crate::datagen::{generate_subject, AugmentConfig, DatasetConfig};
    use crate::model::make_toy_model;

    fn shape_error(fitter: &LandmarkFitter, model: &MorphableModel, cfg: &DatasetConfig) -> f64 {
        let mut total = 0.0;
        for i in 0..3 {
            for s in generate_subject(model, cfg, i).unwrap() {
                let input = EstimatorInput {
                    depth: s.depth.clone(),
                    hha: None,
                    landmarks: Some(s.landmarks.clone()),
                };
                let out = fitter.estimate(&input, model).unwrap();
                total += out
                    .params
                    .shape
                    .iter()
                    .zip(&s.params.shape)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>();
            }
        }
        total.sqrt()
    }

    #[test]
    fn depth_refinement_beats_noisy_landmarks() {
        let model = make_toy_model(11, 300, 6, 3).unwrap();
        let data = DatasetConfig {
            n_subjects: 3,
            images_per_subject: 3,
            augment: AugmentConfig {
                downsample_factor: 1,
                noise_sigma: 2.0,
                ..AugmentConfig::identity()
            },
            seed: 3,
            landmark_sigma: 3.0,
            ..DatasetConfig::default()
        };
        let sparse = LandmarkFitter::new(LandmarkFitConfig {
            dense_iters: 0,
            ..Default::default()
        });
        let dense = LandmarkFitter::default();
        let (e0, e1) = (shape_error(&sparse, &model, &data), shape_error(&dense, &model, &data));
        assert!(e1 < 0.8 * e0, "landmarks only {e0:.3}, refined {e1:.3}");
    }

    #[test]
    fn empty_depth_skips_refinement() {
        let model = make_toy_model(2, 120, 3, 2).unwrap();
        let data = DatasetConfig {
            n_subjects: 1,
            images_per_subject: 1,
            augment: AugmentConfig::identity(),
            ..DatasetConfig::default()
        };
        let s = generate_subject(&model, &data, 0).unwrap().remove(0);
        let blank = DepthImage::new(s.depth.width(), s.depth.height(), vec![SENTINEL; s.depth.data().len()]).unwrap();
        let lms = Some(s.landmarks.clone());
        let a = LandmarkFitter::default()
            .estimate(&EstimatorInput { depth: blank, hha: None, landmarks: lms.clone() }, &model)
            .unwrap();
        let b = landmark_fit(&s.landmarks, &model, &LandmarkFitConfig::default()).unwrap();
        assert_eq!(a.params, b.params);
    }
}
