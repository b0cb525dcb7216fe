//! Pose and expression fit to 2-D landmarks with fixed shape and texture.

use ndarray::{Array1, Array2};

use crate::error::{arg_err, Error, Result};
use crate::model::{FaceParameters, ModelBasis};
use crate::raster::Camera;
use crate::real::{self, lit, Mat3, Real, Vec3};

pub const LANDMARK_COUNT: usize = 68;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Initial (and maximum) step multiplier on the preconditioned gradient.
    pub step: f64,
    pub max_halvings: usize,
    /// Stop once the RMS residual falls below this many pixels.
    pub tol_px: f64,
    /// Consecutive residual increases treated as divergence.
    pub divergence_window: usize,
    pub precondition: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 5000,
            step: 1.0,
            max_halvings: 40,
            tol_px: 1e-6,
            divergence_window: 50,
            precondition: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LandmarkFit<T> {
    /// Pose applied to the model before projection: `x -> R x + t`.
    pub rotation: Mat3<T>,
    pub axis_angle: Vec3<T>,
    pub translation: Vec3<T>,
    pub expression: Array1<T>,
    /// RMS reprojection error in pixels.
    pub residual_px: T,
    pub iterations: usize,
    pub history: Vec<T>,
}

/// Rotation matrix to axis-angle vector (inverse of Rodrigues).
pub fn axis_angle_from_rotation<T: Real>(r: &Mat3<T>) -> Vec3<T> {
    let angle = real::rotation_angle(r);
    let s = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    let ns = real::norm(s);
    if angle < lit(1e-12) {
        return real::scale(s, lit(0.5));
    }
    if ns > lit(1e-9) {
        return real::scale(s, angle / ns);
    }
    // Angle near pi: axis from the largest diagonal of (R + I) / 2.
    let b: Mat3<T> = std::array::from_fn(|i| {
        std::array::from_fn(|j| (r[i][j] + if i == j { T::one() } else { T::zero() }) / lit(2.0))
    });
    let k = (0..3).max_by(|&a, &c| b[a][a].partial_cmp(&b[c][c]).unwrap()).unwrap();
    let axis = real::normalize(b[k]).unwrap_or([T::one(), T::zero(), T::zero()]);
    real::scale(axis, angle)
}

struct Problem<'a, T> {
    base: Vec<Vec3<T>>,
    /// Per landmark, `3 x K` expression block already scaled by the deviations.
    expr: Vec<Array2<T>>,
    targets: &'a [[T; 2]],
    camera: &'a Camera<T>,
}

struct Eval<T> {
    f: T,
    residuals: Vec<[T; 2]>,
    jac: Option<Array2<T>>,
}

impl<T: Real> Problem<'_, T> {
    fn points(&self, rot: &Mat3<T>, t: Vec3<T>, e: &Array1<T>) -> Vec<(Vec3<T>, Vec3<T>)> {
        self.base
            .iter()
            .zip(&self.expr)
            .map(|(b, m)| {
                let d = m.dot(e);
                let s = [b[0] + d[0], b[1] + d[1], b[2] + d[2]];
                let y = real::mat3_mul_vec(rot, s);
                (y, real::add(y, t))
            })
            .collect()
    }

    fn eval(&self, rot: &Mat3<T>, t: Vec3<T>, e: &Array1<T>, with_jac: bool) -> Result<Eval<T>> {
        let k = e.len();
        let pts = self.points(rot, t, e);
        let mut f = T::zero();
        let mut residuals = Vec::with_capacity(pts.len());
        let mut jac = with_jac.then(|| Array2::zeros((2 * pts.len(), 6 + k)));
        for (i, (y, x)) in pts.iter().enumerate() {
            let (px, jx) = self
                .camera
                .project_to_pixel(*x)?
                .ok_or_else(|| Error::Numeric(format!("landmark {i} is behind the camera")))?;
            let r = [px[0] - self.targets[i][0], px[1] - self.targets[i][1]];
            f += r[0] * r[0] + r[1] * r[1];
            residuals.push(r);
            if let Some(jac) = jac.as_mut() {
                for c in 0..2 {
                    let row = 2 * i + c;
                    let g = jx[c];
                    for a in 0..3 {
                        jac[[row, a]] = g[a];
                    }
                    // d/d(delta) of exp([delta]) R s at zero is -[y]x.
                    let gr = real::cross(*y, g);
                    for a in 0..3 {
                        jac[[row, 3 + a]] = gr[a];
                    }
                    let gre = real::mat3_mul_vec(&real::mat3_transpose(rot), g);
                    let block = &self.expr[i];
                    for j in 0..k {
                        jac[[row, 6 + j]] = gre[0] * block[[0, j]] + gre[1] * block[[1, j]] + gre[2] * block[[2, j]];
                    }
                }
            }
        }
        Ok(Eval { f, residuals, jac })
    }
}

/// Fits rotation, translation and expression by preconditioned gradient
/// descent with backtracking, starting from the identity pose and a neutral
/// expression.
pub fn fit_pose_expression<T: Real>(
    basis: &ModelBasis<T>,
    params: &FaceParameters<T>,
    landmark_indices: &[usize],
    targets: &[[T; 2]],
    camera: &Camera<T>,
    opts: &FitOptions,
) -> Result<LandmarkFit<T>> {
    if landmark_indices.is_empty() || landmark_indices.len() != targets.len() {
        return Err(arg_err!(
            "need matching non-empty landmark lists, got {} indices and {} targets",
            landmark_indices.len(),
            targets.len()
        ));
    }
    if let Some(i) = landmark_indices.iter().find(|&&i| i >= basis.num_vertices) {
        return Err(arg_err!("landmark index {i} out of range for {} vertices", basis.num_vertices));
    }
    camera.validate()?;
    let d = basis.dims();
    if params.shape.len() != d.shape {
        return Err(arg_err!("shape has {} coefficients, basis expects {}", params.shape.len(), d.shape));
    }
    let neutral = FaceParameters {
        shape: params.shape.clone(),
        texture: Array1::zeros(d.texture),
        expression: Array1::zeros(d.expression),
    };
    let flat = basis.decode_positions_flat(&neutral.shape, &neutral.expression);
    let base = landmark_indices
        .iter()
        .map(|&i| [flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]])
        .collect();
    let expr = landmark_indices
        .iter()
        .map(|&i| Array2::from_shape_fn((3, d.expression), |(a, j)| basis.p_expr[[3 * i + a, j]] * basis.w_expr[j]))
        .collect();
    let prob = Problem {
        base,
        expr,
        targets,
        camera,
    };

    let n = lit::<T>(targets.len() as f64);
    let mut rot = real::mat3_identity::<T>();
    let mut t = [T::zero(); 3];
    let mut e = Array1::<T>::zeros(d.expression);
    let mut cur = prob.eval(&rot, t, &e, true)?;
    let rms = |f: T| (f / n).sqrt();
    let mut history = vec![rms(cur.f)];
    let mut step = lit::<T>(opts.step);
    let mut increases = 0usize;
    let mut iterations = 0usize;
    let tol = lit::<T>(opts.tol_px);
    while iterations < opts.max_iters && rms(cur.f) > tol {
        iterations += 1;
        let jac = cur.jac.as_ref().expect("jacobian requested");
        let r = Array1::from_iter(cur.residuals.iter().flat_map(|r| [r[0], r[1]]));
        let grad = jac.t().dot(&r);
        let mut dir = grad.clone();
        if opts.precondition {
            let diag: Array1<T> = jac.map_axis(ndarray::Axis(0), |c| c.dot(&c));
            let floor = diag.iter().fold(T::zero(), |a, b| a.max(*b)) * lit(1e-12) + T::min_positive_value();
            dir.zip_mut_with(&diag, |g, dg| *g /= (*dg + floor));
        } else {
            let gn = grad.dot(&grad);
            if gn > T::zero() {
                dir.mapv_inplace(|g| g * cur.f / gn / lit(2.0));
            }
        }
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let dt = [-step * dir[0], -step * dir[1], -step * dir[2]];
            let dw = [-step * dir[3], -step * dir[4], -step * dir[5]];
            let r2 = real::mat3_mul(&real::rotation_from_axis_angle(dw), &rot);
            let t2 = real::add(t, dt);
            let e2 = &e - &dir.slice(ndarray::s![6..]).mapv(|v| v * step);
            let trial = prob.eval(&r2, t2, &e2, false)?;
            if trial.f < cur.f {
                accepted = Some((r2, t2, e2));
                break;
            }
            step /= lit(2.0);
        }
        let Some((r2, t2, e2)) = accepted else {
            break;
        };
        rot = r2;
        t = t2;
        e = e2;
        let prev = cur.f;
        cur = prob.eval(&rot, t, &e, true)?;
        if !cur.f.is_finite() {
            return Err(Error::Numeric(format!("landmark residual became non-finite at iteration {iterations}")));
        }
        history.push(rms(cur.f));
        if cur.f > prev {
            increases += 1;
            if increases >= opts.divergence_window {
                return Err(Error::Numeric(format!(
                    "landmark fit diverged: residual rose for {increases} steps, trace tail {:?}",
                    &history[history.len().saturating_sub(5)..]
                )));
            }
        } else {
            increases = 0;
        }
        step = (step * lit(2.0)).min(lit(opts.step));
    }
    Ok(LandmarkFit {
        rotation: rot,
        axis_angle: axis_angle_from_rotation(&rot),
        translation: t,
        expression: e,
        residual_px: rms(cur.f),
        iterations,
        history,
    })
}

/// Pixel positions of `landmark_indices` for a posed, expressive face.
pub fn project_landmarks<T: Real>(
    basis: &ModelBasis<T>,
    params: &FaceParameters<T>,
    rotation: &Mat3<T>,
    translation: Vec3<T>,
    landmark_indices: &[usize],
    camera: &Camera<T>,
) -> Result<Vec<[T; 2]>> {
    let flat = basis.decode_positions_flat(&params.shape, &params.expression);
    landmark_indices
        .iter()
        .map(|&i| {
            if i >= basis.num_vertices {
                return Err(arg_err!("landmark index {i} out of range"));
            }
            let p = [flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]];
            let x = real::add(real::mat3_mul_vec(rotation, p), translation);
            camera
                .project_to_pixel(x)?
                .map(|(px, _)| px)
                .ok_or_else(|| Error::Numeric(format!("landmark {i} is behind the camera")))
        })
        .collect()
}

/// Spread of front-facing vertices usable as a synthetic landmark set.
pub fn default_landmark_indices<T: Real>(basis: &ModelBasis<T>, count: usize) -> Vec<usize> {
    let mu = &basis.mu_shape;
    let mut front: Vec<usize> = (0..basis.num_vertices)
        .filter(|&i| {
            let p = [mu[3 * i], mu[3 * i + 1], mu[3 * i + 2]];
            let r = real::norm(p);
            r > T::zero() && p[2] / r > lit(0.5)
        })
        .collect();
    if front.len() < count {
        front = (0..basis.num_vertices).collect();
    }
    let step = front.len() as f64 / count as f64;
    (0..count.min(front.len()))
        .map(|k| front[(k as f64 * step) as usize])
        .collect()
}
