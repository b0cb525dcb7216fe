//! Similarity ICP (rotation, translation, isotropic scale) and scan cropping.

use std::sync::Arc;

use crate::error::{arg_err, Error, Result};
use crate::eval::nn::PointGrid;
use crate::model::Mesh;
use crate::real::{self, lit, Mat3, Real, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
    pub scale: T,
}

impl<T: Real> SimilarityTransform<T> {
    pub fn identity() -> Self {
        SimilarityTransform {
            rotation: real::mat3_identity(),
            translation: [T::zero(); 3],
            scale: T::one(),
        }
    }

    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        real::add(real::scale(real::mat3_mul_vec(&self.rotation, p), self.scale), self.translation)
    }

    pub fn apply_all(&self, pts: &[Vec3<T>]) -> Vec<Vec3<T>> {
        pts.iter().map(|p| self.apply(*p)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = real::mat3_mul(&real::mat3_transpose(&self.rotation), &self.rotation);
        let mut err = 0.0f64;
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((real::to_f64(*v) - target).abs());
            }
        }
        if err > 1e-9 || (real::to_f64(real::mat3_det(&self.rotation)) - 1.0).abs() > 1e-9 {
            return Err(Error::Validation("rotation is not a proper orthonormal matrix".into()));
        }
        if !(self.scale > T::zero()) {
            return Err(Error::Validation(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }

    /// Mesh with positions (and normals, rotated) transformed.
    pub fn apply_mesh(&self, mesh: &Mesh<T>) -> Mesh<T> {
        Mesh {
            positions: self.apply_all(&mesh.positions),
            colors: mesh.colors.clone(),
            normals: mesh
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| real::mat3_mul_vec(&self.rotation, *n)).collect()),
            triangles: mesh.triangles.clone(),
        }
    }
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order and the matching
/// eigenvectors as columns of `vecs` (`vecs[row][col]`).
pub fn symmetric_eigen<T: Real>(a: &[Vec<T>]) -> (Vec<T>, Vec<Vec<T>>) {
    let n = a.len();
    let mut m: Vec<Vec<T>> = a.to_vec();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let two = lit::<T>(2.0);
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let diag: T = (0..n).map(|i| m[i][i] * m[i][i]).sum();
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == T::zero() {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (two * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].partial_cmp(&m[i][i]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = order.iter().map(|&i| m[i][i]).collect();
    let vecs = (0..n).map(|r| order.iter().map(|&c| v[r][c]).collect()).collect();
    (vals, vecs)
}

fn centroid<T: Real>(pts: &[Vec3<T>]) -> Vec3<T> {
    let n = lit::<T>(pts.len() as f64);
    let mut c = [T::zero(); 3];
    for p in pts {
        c = real::add(c, *p);
    }
    real::scale(c, T::one() / n)
}

fn covariance<T: Real>(pts: &[Vec3<T>], c: Vec3<T>) -> Vec<Vec<T>> {
    let mut m = vec![vec![T::zero(); 3]; 3];
    for p in pts {
        let d = real::sub(*p, c);
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += d[i] * d[j];
            }
        }
    }
    let n = lit::<T>(pts.len() as f64);
    m.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v /= n));
    m
}

/// Closed-form least-squares similarity mapping `src[i]` onto `dst[i]`.
/// The rotation comes from the dominant eigenvector of Horn's 4x4 quaternion
/// matrix, which always yields a proper rotation.
pub fn procrustes_similarity<T: Real>(src: &[Vec3<T>], dst: &[Vec3<T>]) -> Result<SimilarityTransform<T>> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(arg_err!("procrustes needs equal, non-empty point lists"));
    }
    let (ca, cb) = (centroid(src), centroid(dst));
    let mut s = [[T::zero(); 3]; 3];
    let mut var_a = T::zero();
    for (a, b) in src.iter().zip(dst) {
        let (da, db) = (real::sub(*a, ca), real::sub(*b, cb));
        var_a += real::dot(da, da);
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += da[i] * db[j];
            }
        }
    }
    if !(var_a > T::zero()) {
        return Err(Error::Numeric("source points coincide".into()));
    }
    let (sxx, sxy, sxz) = (s[0][0], s[0][1], s[0][2]);
    let (syx, syy, syz) = (s[1][0], s[1][1], s[1][2]);
    let (szx, szy, szz) = (s[2][0], s[2][1], s[2][2]);
    let n = vec![
        vec![sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        vec![syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        vec![szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        vec![sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let (_, vecs) = symmetric_eigen(&n);
    let q: Vec<T> = (0..4).map(|r| vecs[r][0]).collect();
    let qn = q.iter().map(|v| *v * *v).sum::<T>().sqrt();
    let (w, x, y, z) = (q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn);
    let two = lit::<T>(2.0);
    let rotation = [
        [w * w + x * x - y * y - z * z, two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), w * w - x * x + y * y - z * z, two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), w * w - x * x - y * y + z * z],
    ];
    let mut num = T::zero();
    for (a, b) in src.iter().zip(dst) {
        let ra = real::mat3_mul_vec(&rotation, real::sub(*a, ca));
        num += real::dot(real::sub(*b, cb), ra);
    }
    let scale = num / var_a;
    if !(scale > T::zero()) {
        return Err(Error::Numeric(format!("procrustes produced non-positive scale {scale}")));
    }
    let translation = real::sub(cb, real::scale(real::mat3_mul_vec(&rotation, ca), scale));
    Ok(SimilarityTransform {
        rotation,
        translation,
        scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpOptions {
    pub max_iters: usize,
    /// Stop once the RMS residual improves by less than this (mm).
    pub tol: f64,
}

impl Default for IcpOptions {
    fn default() -> Self {
        IcpOptions {
            max_iters: 100,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult<T> {
    pub transform: SimilarityTransform<T>,
    /// RMS nearest-neighbour distance after the final update.
    pub residual: T,
    /// RMS residual after initialisation and after each iteration.
    pub history: Vec<T>,
}

fn rms_residual<T: Real>(grid: &PointGrid<T>, pts: &[Vec3<T>]) -> (T, Vec<usize>) {
    let mut sum = T::zero();
    let mut idx = Vec::with_capacity(pts.len());
    for p in pts {
        let (i, d2) = grid.nearest(*p);
        sum += d2;
        idx.push(i);
    }
    ((sum / lit(pts.len() as f64)).sqrt(), idx)
}

fn run_icp<T: Real>(
    src: &[Vec3<T>],
    grid: &PointGrid<T>,
    target: &[Vec3<T>],
    init: SimilarityTransform<T>,
    opts: &IcpOptions,
) -> Result<IcpResult<T>> {
    let mut tf = init;
    let (mut res, mut idx) = rms_residual(grid, &tf.apply_all(src));
    let mut history = vec![res];
    for _ in 0..opts.max_iters {
        let matched: Vec<Vec3<T>> = idx.iter().map(|&i| target[i]).collect();
        // Collapsed correspondences (e.g. all on one target point) end the run.
        let Ok(next) = procrustes_similarity(src, &matched) else {
            break;
        };
        let (r, i2) = rms_residual(grid, &next.apply_all(src));
        if r > res {
            break;
        }
        let gain = real::to_f64(res - r);
        tf = next;
        res = r;
        idx = i2;
        history.push(res);
        if gain < opts.tol {
            break;
        }
    }
    Ok(IcpResult {
        transform: tf,
        residual: res,
        history,
    })
}

/// Aligns `source` to `target` with a similarity transform.
///
/// Candidates start from centroid and RMS-radius alignment combined with the
/// identity rotation and the four proper sign choices of the principal-axis
/// alignment; the run with the lowest final residual wins.
pub fn icp_similarity<T: Real>(source: &[Vec3<T>], target: &[Vec3<T>], opts: &IcpOptions) -> Result<IcpResult<T>> {
    if source.is_empty() || target.is_empty() {
        return Err(arg_err!("ICP needs non-empty point sets"));
    }
    let (cs, ct) = (centroid(source), centroid(target));
    let (cov_s, cov_t) = (covariance(source, cs), covariance(target, ct));
    let (ev_s, vec_s) = symmetric_eigen(&cov_s);
    let (ev_t, vec_t) = symmetric_eigen(&cov_t);
    let rank_tol = lit::<T>(1e-12);
    if !(ev_s[2] > rank_tol * ev_s[0]) || !(ev_s[0] > T::zero()) {
        return Err(Error::Numeric("source covariance is rank deficient".into()));
    }
    let rs: T = ev_s.iter().copied().sum::<T>().sqrt();
    let rt: T = ev_t.iter().copied().sum::<T>().sqrt();
    let scale = rt / rs;
    if !(scale > T::zero()) {
        return Err(Error::Numeric("target points coincide".into()));
    }
    let grid = PointGrid::new(target)?;

    let mut rotations = vec![real::mat3_identity::<T>()];
    let es: Mat3<T> = std::array::from_fn(|r| std::array::from_fn(|c| vec_s[r][c]));
    let et: Mat3<T> = std::array::from_fn(|r| std::array::from_fn(|c| vec_t[r][c]));
    for signs in [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]] {
        let mut d = real::mat3_identity::<T>();
        for k in 0..3 {
            d[k][k] = lit(signs[k]);
        }
        let mut r = real::mat3_mul(&real::mat3_mul(&et, &d), &real::mat3_transpose(&es));
        if real::mat3_det(&r) < T::zero() {
            d[2][2] = -d[2][2];
            r = real::mat3_mul(&real::mat3_mul(&et, &d), &real::mat3_transpose(&es));
        }
        rotations.push(r);
    }

    let mut best: Option<IcpResult<T>> = None;
    for rotation in rotations {
        let translation = real::sub(ct, real::scale(real::mat3_mul_vec(&rotation, cs), scale));
        let init = SimilarityTransform {
            rotation,
            translation,
            scale,
        };
        let r = run_icp(source, &grid, target, init, opts)?;
        if best.as_ref().is_none_or(|b| r.residual < b.residual) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Vertices within `radius_mm` of `center` and the triangles whose three
/// vertices survive, reindexed.
pub fn crop_scan<T: Real>(mesh: &Mesh<T>, center: Vec3<T>, radius_mm: T) -> Result<Mesh<T>> {
    if !(radius_mm > T::zero()) {
        return Err(arg_err!("crop radius must be positive"));
    }
    let r2 = radius_mm * radius_mm;
    let mut remap = vec![u32::MAX; mesh.positions.len()];
    let mut kept = Vec::new();
    for (i, p) in mesh.positions.iter().enumerate() {
        let d = real::sub(*p, center);
        if real::dot(d, d) <= r2 {
            remap[i] = kept.len() as u32;
            kept.push(i);
        }
    }
    if kept.is_empty() {
        return Err(Error::Validation(format!("no vertices within {radius_mm} mm of the crop centre")));
    }
    let triangles = mesh
        .triangles
        .iter()
        .filter_map(|t| {
            let m = t.map(|v| remap[v as usize]);
            m.iter().all(|v| *v != u32::MAX).then_some(m)
        })
        .collect();
    Ok(Mesh {
        positions: kept.iter().map(|&i| mesh.positions[i]).collect(),
        colors: kept.iter().map(|&i| mesh.colors[i]).collect(),
        normals: mesh.normals.as_ref().map(|ns| kept.iter().map(|&i| ns[i]).collect()),
        triangles: Arc::new(triangles),
    })
}
