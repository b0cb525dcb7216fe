//! Linear PCA face model.
//!
//! A face is `positions = mu_shape + P_shape diag(W_shape) s + P_expr diag(W_expr) e`
//! and `colors = mu_texture + P_texture diag(W_texture) t`, with the coefficient
//! vectors distributed as standard normals.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{arg_err, Error, Result};
use crate::real::{self, lit, Real, Vec3};

pub const SHAPE_DIM: usize = 199;
pub const TEXTURE_DIM: usize = 199;
pub const EXPRESSION_DIM: usize = 100;

const BASIS_MAGIC: &[u8; 4] = b"MMB1";
const BASIS_VERSION: u32 = 1;

pub type Triangle = [u32; 3];

/// Coefficient-space sizes of a basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub shape: usize,
    pub texture: usize,
    pub expression: usize,
}

impl Dims {
    pub const STANDARD: Dims = Dims {
        shape: SHAPE_DIM,
        texture: TEXTURE_DIM,
        expression: EXPRESSION_DIM,
    };

    /// Length of the regressed vector (shape followed by texture).
    pub fn regressed(&self) -> usize {
        self.shape + self.texture
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBasis<T> {
    pub num_vertices: usize,
    pub mu_shape: Array1<T>,
    pub mu_texture: Array1<T>,
    pub p_shape: Array2<T>,
    pub p_expr: Array2<T>,
    pub p_texture: Array2<T>,
    pub w_shape: Array1<T>,
    pub w_expr: Array1<T>,
    pub w_texture: Array1<T>,
    pub triangles: Arc<Vec<Triangle>>,
    pub nose_tip_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceParameters<T> {
    pub shape: Array1<T>,
    pub texture: Array1<T>,
    pub expression: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh<T> {
    pub positions: Vec<Vec3<T>>,
    pub colors: Vec<Vec3<T>>,
    pub normals: Option<Vec<Vec3<T>>>,
    pub triangles: Arc<Vec<Triangle>>,
}

/// Adjoint of a mesh with respect to some scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshGrad<T> {
    pub positions: Vec<Vec3<T>>,
    pub colors: Vec<Vec3<T>>,
}

impl<T: Real> MeshGrad<T> {
    pub fn zeros(n: usize) -> Self {
        MeshGrad {
            positions: vec![[T::zero(); 3]; n],
            colors: vec![[T::zero(); 3]; n],
        }
    }

    pub fn accumulate(&mut self, other: &MeshGrad<T>) {
        for (a, b) in self.positions.iter_mut().zip(&other.positions) {
            *a = real::add(*a, *b);
        }
        for (a, b) in self.colors.iter_mut().zip(&other.colors) {
            *a = real::add(*a, *b);
        }
    }
}

impl<T: Real> FaceParameters<T> {
    pub fn zeros(dims: Dims) -> Self {
        FaceParameters {
            shape: Array1::zeros(dims.shape),
            texture: Array1::zeros(dims.texture),
            expression: Array1::zeros(dims.expression),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            shape: self.shape.len(),
            texture: self.texture.len(),
            expression: self.expression.len(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.shape
            .iter()
            .chain(self.texture.iter())
            .chain(self.expression.iter())
            .all(|v| v.is_finite())
    }

    /// Shape then texture, the layout the decoder network regresses.
    pub fn regressed_vector(&self) -> Array1<T> {
        let mut out = Array1::zeros(self.shape.len() + self.texture.len());
        out.slice_mut(ndarray::s![..self.shape.len()])
            .assign(&self.shape);
        out.slice_mut(ndarray::s![self.shape.len()..])
            .assign(&self.texture);
        out
    }

    /// Inverse of [`regressed_vector`](Self::regressed_vector); expression is zero.
    pub fn from_regressed(v: ArrayView1<T>, dims: Dims) -> Result<Self> {
        if v.len() != dims.regressed() {
            return Err(arg_err!(
                "regressed vector has length {}, expected {}",
                v.len(),
                dims.regressed()
            ));
        }
        Ok(FaceParameters {
            shape: v.slice(ndarray::s![..dims.shape]).to_owned(),
            texture: v.slice(ndarray::s![dims.shape..]).to_owned(),
            expression: Array1::zeros(dims.expression),
        })
    }

    pub fn axpy(&mut self, a: T, other: &FaceParameters<T>) {
        self.shape.scaled_add(a, &other.shape);
        self.texture.scaled_add(a, &other.texture);
        self.expression.scaled_add(a, &other.expression);
    }

    pub fn dot(&self, other: &FaceParameters<T>) -> T {
        self.shape.dot(&other.shape)
            + self.texture.dot(&other.texture)
            + self.expression.dot(&other.expression)
    }
}

impl<T: Real> Mesh<T> {
    pub fn num_vertices(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.colors.len() != n {
            return Err(Error::Validation(format!(
                "mesh has {} positions but {} colors",
                n,
                self.colors.len()
            )));
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::Validation("normal count differs from vertex count".into()));
            }
            if let Some(k) = normals.iter().position(|v| (real::to_f64(real::norm(*v)) - 1.0).abs() > 1e-6) {
                return Err(Error::Validation(format!("normal {k} is not unit length")));
            }
        }
        validate_triangles(&self.triangles, n)
    }
}

fn validate_triangles(triangles: &[Triangle], n: usize) -> Result<()> {
    for (k, t) in triangles.iter().enumerate() {
        if t.iter().any(|&i| i as usize >= n) {
            return Err(Error::Validation(format!(
                "triangle {k} references vertex outside 0..{n}: {t:?}"
            )));
        }
        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
            return Err(Error::Validation(format!("triangle {k} is degenerate: {t:?}")));
        }
    }
    Ok(())
}

impl<T: Real> ModelBasis<T> {
    pub fn dims(&self) -> Dims {
        Dims {
            shape: self.w_shape.len(),
            texture: self.w_texture.len(),
            expression: self.w_expr.len(),
        }
    }

    /// Checks every structural and domain invariant of the basis.
    pub fn validate(&self) -> Result<()> {
        let n3 = 3 * self.num_vertices;
        if self.num_vertices == 0 {
            return Err(Error::Validation("basis has no vertices".into()));
        }
        let d = self.dims();
        let shapes = [
            ("mu_shape", self.mu_shape.len(), n3),
            ("mu_texture", self.mu_texture.len(), n3),
            ("p_shape rows", self.p_shape.nrows(), n3),
            ("p_expr rows", self.p_expr.nrows(), n3),
            ("p_texture rows", self.p_texture.nrows(), n3),
            ("p_shape cols", self.p_shape.ncols(), d.shape),
            ("p_expr cols", self.p_expr.ncols(), d.expression),
            ("p_texture cols", self.p_texture.ncols(), d.texture),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Validation(format!("{name} is {got}, expected {want}")));
            }
        }
        for (name, w) in [
            ("w_shape", &self.w_shape),
            ("w_expr", &self.w_expr),
            ("w_texture", &self.w_texture),
        ] {
            if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(**v > T::zero())) {
                return Err(Error::Validation(format!(
                    "{name}[{i}] = {v} is not strictly positive"
                )));
            }
        }
        if let Some(v) = self
            .mu_texture
            .iter()
            .find(|v| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::Validation(format!("mu_texture entry {v} outside [0,1]")));
        }
        let all_finite = [&self.mu_shape, &self.mu_texture]
            .iter()
            .all(|a| a.iter().all(|v| v.is_finite()))
            && [&self.p_shape, &self.p_expr, &self.p_texture]
                .iter()
                .all(|a| a.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::Validation("basis contains non-finite values".into()));
        }
        if self.nose_tip_index >= self.num_vertices {
            return Err(Error::Validation(format!(
                "nose tip index {} out of range",
                self.nose_tip_index
            )));
        }
        validate_triangles(&self.triangles, self.num_vertices)
    }

    fn check_params(&self, params: &FaceParameters<T>) -> Result<()> {
        if params.dims() != self.dims() {
            return Err(arg_err!(
                "parameter dims {:?} do not match basis dims {:?}",
                params.dims(),
                self.dims()
            ));
        }
        Ok(())
    }

    /// Shape-only decode (flat `3N` layout), shared by mesh decoding and
    /// landmark fitting.
    pub fn decode_positions_flat(&self, shape: &Array1<T>, expression: &Array1<T>) -> Array1<T> {
        let mut pos = self.mu_shape.clone();
        pos += &self.p_shape.dot(&(&self.w_shape * shape));
        pos += &self.p_expr.dot(&(&self.w_expr * expression));
        pos
    }

    /// Decodes coefficients into a mesh. Colors are left unclamped.
    pub fn decode_mesh(&self, params: &FaceParameters<T>) -> Result<Mesh<T>> {
        self.check_params(params)?;
        let pos = self.decode_positions_flat(&params.shape, &params.expression);
        let mut col = self.mu_texture.clone();
        col += &self.p_texture.dot(&(&self.w_texture * &params.texture));
        Ok(Mesh {
            positions: unflatten(&pos),
            colors: unflatten(&col),
            normals: None,
            triangles: Arc::clone(&self.triangles),
        })
    }

    /// Transpose of the decode map: pulls a mesh cotangent back to
    /// coefficient space. The parameters themselves are not needed because the
    /// map is affine.
    pub fn decode_mesh_vjp(&self, cotangent: &MeshGrad<T>) -> Result<FaceParameters<T>> {
        let n = self.num_vertices;
        if cotangent.positions.len() != n || cotangent.colors.len() != n {
            return Err(arg_err!(
                "cotangent has {}/{} rows, basis has {} vertices",
                cotangent.positions.len(),
                cotangent.colors.len(),
                n
            ));
        }
        let gp = flatten(&cotangent.positions);
        let gc = flatten(&cotangent.colors);
        Ok(FaceParameters {
            shape: &self.w_shape * &self.p_shape.t().dot(&gp),
            texture: &self.w_texture * &self.p_texture.t().dot(&gc),
            expression: &self.w_expr * &self.p_expr.t().dot(&gp),
        })
    }

    pub fn mean_mesh(&self) -> Mesh<T> {
        self.decode_mesh(&FaceParameters::zeros(self.dims()))
            .expect("zero parameters always match basis dims")
    }

    /// Converts the scalar type, e.g. to run an `f32` pipeline from an `f64` basis.
    pub fn cast<U: Real>(&self) -> ModelBasis<U> {
        let c1 = |a: &Array1<T>| a.mapv(|v| lit::<U>(real::to_f64(v)));
        let c2 = |a: &Array2<T>| a.mapv(|v| lit::<U>(real::to_f64(v)));
        ModelBasis {
            num_vertices: self.num_vertices,
            mu_shape: c1(&self.mu_shape),
            mu_texture: c1(&self.mu_texture),
            p_shape: c2(&self.p_shape),
            p_expr: c2(&self.p_expr),
            p_texture: c2(&self.p_texture),
            w_shape: c1(&self.w_shape),
            w_expr: c1(&self.w_expr),
            w_texture: c1(&self.w_texture),
            triangles: Arc::clone(&self.triangles),
            nose_tip_index: self.nose_tip_index,
        }
    }
}

pub fn flatten<T: Real>(v: &[Vec3<T>]) -> Array1<T> {
    v.iter().flat_map(|p| p.iter().copied()).collect()
}

pub fn unflatten<T: Real>(a: &Array1<T>) -> Vec<Vec3<T>> {
    a.as_slice()
        .expect("contiguous")
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

/// Draws standard-normal shape and texture coefficients. Expression is zero
/// unless `sample_expression` is set.
pub fn sample_parameters<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    dims: Dims,
    sample_expression: bool,
) -> FaceParameters<T> {
    let mut draw = |n: usize| -> Array1<T> {
        (0..n)
            .map(|_| lit::<T>(rng.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let shape = draw(dims.shape);
    let texture = draw(dims.texture);
    let expression = if sample_expression {
        draw(dims.expression)
    } else {
        Array1::zeros(dims.expression)
    };
    FaceParameters {
        shape,
        texture,
        expression,
    }
}

/// Per-vertex normals plus the number of vertices that fell back to `+z`.
#[derive(Debug, Clone)]
pub struct NormalsResult<T> {
    pub normals: Vec<Vec3<T>>,
    pub fallback_count: usize,
}

/// Unnormalised sum of incident face normals; the cross product of two edges
/// already carries twice the face area, which gives the area weighting.
fn accumulate_face_normals<T: Real>(positions: &[Vec3<T>], triangles: &[Triangle]) -> Vec<Vec3<T>> {
    let mut acc = vec![[T::zero(); 3]; positions.len()];
    for t in triangles {
        let [a, b, c] = t.map(|i| positions[i as usize]);
        let m = real::cross(real::sub(b, a), real::sub(c, a));
        for &i in t {
            acc[i as usize] = real::add(acc[i as usize], m);
        }
    }
    acc
}

pub fn compute_vertex_normals<T: Real>(positions: &[Vec3<T>], triangles: &[Triangle]) -> NormalsResult<T> {
    let acc = accumulate_face_normals(positions, triangles);
    let mut fallback_count = 0;
    let normals = acc
        .into_iter()
        .map(|m| {
            real::normalize(m).unwrap_or_else(|| {
                fallback_count += 1;
                [T::zero(), T::zero(), T::one()]
            })
        })
        .collect();
    NormalsResult {
        normals,
        fallback_count,
    }
}

/// Adjoint of [`compute_vertex_normals`] with respect to vertex positions.
/// Fallback vertices contribute no gradient.
pub fn vertex_normals_vjp<T: Real>(
    positions: &[Vec3<T>],
    triangles: &[Triangle],
    normals_cotangent: &[Vec3<T>],
) -> Vec<Vec3<T>> {
    let acc = accumulate_face_normals(positions, triangles);
    let g_acc: Vec<Vec3<T>> = acc
        .iter()
        .zip(normals_cotangent)
        .map(|(m, g)| real::normalize_vjp(*m, *g))
        .collect();
    let mut grad = vec![[T::zero(); 3]; positions.len()];
    for t in triangles {
        let [i0, i1, i2] = t.map(|i| i as usize);
        let g = real::add(real::add(g_acc[i0], g_acc[i1]), g_acc[i2]);
        let e1 = real::sub(positions[i1], positions[i0]);
        let e2 = real::sub(positions[i2], positions[i0]);
        // d/de1 <e1 x e2, g> = e2 x g, d/de2 = g x e1
        let d1 = real::cross(e2, g);
        let d2 = real::cross(g, e1);
        grad[i1] = real::add(grad[i1], d1);
        grad[i2] = real::add(grad[i2], d2);
        grad[i0] = real::sub(grad[i0], real::add(d1, d2));
    }
    grad
}

impl<T: Real> Mesh<T> {
    /// Returns a copy with area-weighted vertex normals and the fallback count.
    pub fn with_normals(mut self) -> (Self, usize) {
        let r = compute_vertex_normals(&self.positions, &self.triangles);
        self.normals = Some(r.normals);
        (self, r.fallback_count)
    }
}

/// Parameters of the synthetic basis generator.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    pub n_vertices: usize,
    pub dims: Dims,
    /// Log-uniform range of the shape standard deviations (mm per unit coefficient).
    pub shape_w_range: (f64, f64),
    pub texture_w_range: (f64, f64),
    pub expr_w_range: (f64, f64),
    pub radius_mm: f64,
    /// Spatial frequency of the first and last mode fields (cycles per radian).
    pub mode_frequency: (f64, f64),
}

impl BasisSpec {
    /// Standard generator: full coefficient dimensions (capped at `3N`, the
    /// most orthonormal columns a `3N`-row matrix can hold) and all
    /// deviations log-uniform in `[0.1, 10]`.
    pub fn standard(n_vertices: usize) -> Self {
        let cap = 3 * n_vertices;
        BasisSpec {
            n_vertices,
            dims: Dims {
                shape: SHAPE_DIM.min(cap),
                texture: TEXTURE_DIM.min(cap),
                expression: EXPRESSION_DIM.min(cap),
            },
            shape_w_range: (0.1, 10.0),
            texture_w_range: (0.1, 10.0),
            expr_w_range: (0.1, 10.0),
            radius_mm: 100.0,
            mode_frequency: (1.0, 6.0),
        }
    }
}

pub fn make_test_basis<T: Real>(seed: u64, n_vertices: usize) -> Result<ModelBasis<T>> {
    make_basis(seed, &BasisSpec::standard(n_vertices))
}

/// Deterministic synthetic basis: a ~100 mm sphere mean shape, smooth random
/// orthonormal modes and log-uniform deviations sorted in decreasing order.
/// Every stored value is representable in `f32`, so the basis survives a
/// save/load round trip unchanged.
pub fn make_basis<T: Real>(seed: u64, spec: &BasisSpec) -> Result<ModelBasis<T>> {
    let n = spec.n_vertices;
    if n < 4 {
        return Err(arg_err!("synthetic basis needs at least 4 vertices, got {n}"));
    }
    let d = spec.dims;
    for (name, k) in [("shape", d.shape), ("texture", d.texture), ("expression", d.expression)] {
        if k > 3 * n {
            return Err(arg_err!("{name} dimension {k} exceeds 3N = {}", 3 * n));
        }
    }
    for (lo, hi) in [spec.shape_w_range, spec.texture_w_range, spec.expr_w_range] {
        if !(lo > 0.0 && hi >= lo) {
            return Err(arg_err!("invalid deviation range [{lo}, {hi}]"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dirs, triangles) = sphere_topology(n);

    let f32r = |v: f64| -> T { lit(v as f32 as f64) };
    let mu_shape: Array1<T> = dirs
        .iter()
        .flat_map(|u| u.map(|c| c * spec.radius_mm))
        .map(f32r)
        .collect();

    // Smooth skin-like albedo around (0.72, 0.52, 0.42).
    let base = [0.72, 0.52, 0.42];
    let k: [f64; 3] = random_unit(&mut rng);
    let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let mu_texture: Array1<T> = dirs
        .iter()
        .flat_map(|u| {
            let m = 0.08 * (2.0 * (k[0] * u[0] + k[1] * u[1] + k[2] * u[2]) + phase).sin();
            base.map(|b| (b + m).clamp(0.0, 1.0))
        })
        .map(f32r)
        .collect();

    let fr = spec.mode_frequency;
    let p_shape = smooth_orthonormal_columns(&mut rng, &dirs, d.shape, fr).mapv(f32r);
    let p_expr = smooth_orthonormal_columns(&mut rng, &dirs, d.expression, fr).mapv(f32r);
    let p_texture = smooth_orthonormal_columns(&mut rng, &dirs, d.texture, fr).mapv(f32r);

    let mut log_uniform = |count: usize, (lo, hi): (f64, f64)| -> Array1<T> {
        let mut w: Vec<f64> = (0..count)
            .map(|_| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp())
            .collect();
        w.sort_by(|a, b| b.total_cmp(a));
        w.into_iter().map(f32r).collect()
    };
    let w_shape = log_uniform(d.shape, spec.shape_w_range);
    let w_expr = log_uniform(d.expression, spec.expr_w_range);
    let w_texture = log_uniform(d.texture, spec.texture_w_range);

    let nose_tip_index = dirs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1[2].total_cmp(&b.1[2]))
        .map(|(i, _)| i)
        .unwrap_or(0);

    let basis = ModelBasis {
        num_vertices: n,
        mu_shape,
        mu_texture,
        p_shape,
        p_expr,
        p_texture,
        w_shape,
        w_expr,
        w_texture,
        triangles: Arc::new(triangles),
        nose_tip_index,
    };
    basis.validate()?;
    Ok(basis)
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if let Some(u) = real::normalize(v) {
            return u;
        }
    }
}

/// Columns are random low-frequency fields over the sphere, with frequency
/// growing with the column index, orthonormalised by two passes of modified
/// Gram-Schmidt.
fn smooth_orthonormal_columns<R: Rng + ?Sized>(
    rng: &mut R,
    dirs: &[[f64; 3]],
    k: usize,
    (f0, f1): (f64, f64),
) -> Array2<f64> {
    let rows = 3 * dirs.len();
    let mut p = Array2::<f64>::zeros((rows, k));
    let mut c = 0;
    let mut attempts = 0;
    while c < k {
        attempts += 1;
        let freq = f0 + (f1 - f0) * c as f64 / k.max(1) as f64;
        let mut col = Array1::<f64>::zeros(rows);
        if attempts < 4 * k + 16 {
            for ch in 0..3 {
                for _ in 0..3 {
                    let kv = random_unit(rng);
                    let amp: f64 = rng.sample(StandardNormal);
                    let ph = rng.random::<f64>() * std::f64::consts::TAU;
                    for (i, u) in dirs.iter().enumerate() {
                        col[3 * i + ch] +=
                            amp * (freq * (kv[0] * u[0] + kv[1] * u[1] + kv[2] * u[2]) + ph).sin();
                    }
                }
            }
        } else {
            // Smooth fields ran out of new directions; fall back to white noise.
            col.mapv_inplace(|_| rng.sample(StandardNormal));
        }
        let before = col.dot(&col).sqrt();
        for _ in 0..2 {
            for j in 0..c {
                let pj = p.column(j);
                let proj = pj.dot(&col);
                col.scaled_add(-proj, &pj);
            }
        }
        let after = col.dot(&col).sqrt();
        if after > 1e-6 * before && after > 0.0 {
            col /= after;
            p.column_mut(c).assign(&col);
            c += 1;
        }
    }
    p
}

/// Unit-sphere vertex directions (poles on the y axis so the +z front is
/// away from any pole) and an outward-oriented closed triangulation with
/// exactly `n` vertices.
fn sphere_topology(n: usize) -> (Vec<[f64; 3]>, Vec<Triangle>) {
    assert!(n >= 4);
    let mut dirs: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut tris: Vec<Triangle> = Vec::new();
    if n == 4 {
        let s = 1.0 / 3f64.sqrt();
        dirs = vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]];
        tris = vec![[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    } else {
        let ring_total = n - 2;
        let mut rings = (((ring_total as f64) / 2.0).sqrt().round() as usize).max(1);
        while rings > 1 && rings * 3 > ring_total {
            rings -= 1;
        }
        let lat: Vec<f64> = (0..rings)
            .map(|r| std::f64::consts::PI * (r + 1) as f64 / (rings + 1) as f64)
            .collect();
        let counts = apportion(ring_total, &lat.iter().map(|p| p.sin()).collect::<Vec<_>>(), 3);

        dirs.push([0.0, 1.0, 0.0]);
        let mut ring_start = Vec::with_capacity(rings);
        let mut ring_angles: Vec<Vec<f64>> = Vec::with_capacity(rings);
        for (r, (&phi, &count)) in lat.iter().zip(&counts).enumerate() {
            ring_start.push(dirs.len());
            let offset = if r % 2 == 0 { 0.0 } else { 0.5 };
            let angles: Vec<f64> = (0..count)
                .map(|i| std::f64::consts::TAU * (i as f64 + offset) / count as f64)
                .collect();
            for &th in &angles {
                dirs.push([phi.sin() * th.sin(), phi.cos(), phi.sin() * th.cos()]);
            }
            ring_angles.push(angles);
        }
        let south = dirs.len() as u32;
        dirs.push([0.0, -1.0, 0.0]);

        let fan = |tris: &mut Vec<Triangle>, pole: u32, start: usize, count: usize| {
            for i in 0..count {
                let a = (start + i) as u32;
                let b = (start + (i + 1) % count) as u32;
                tris.push([pole, a, b]);
            }
        };
        fan(&mut tris, 0, ring_start[0], counts[0]);
        for r in 0..rings - 1 {
            zip_rings(
                &mut tris,
                (ring_start[r], &ring_angles[r]),
                (ring_start[r + 1], &ring_angles[r + 1]),
            );
        }
        fan(&mut tris, south, ring_start[rings - 1], counts[rings - 1]);
    }
    for t in tris.iter_mut() {
        let [a, b, c] = t.map(|i| dirs[i as usize]);
        let m = real::cross(real::sub(b, a), real::sub(c, a));
        let centroid = real::add(real::add(a, b), c);
        if real::dot(m, centroid) < 0.0 {
            t.swap(1, 2);
        }
    }
    (dirs, tris)
}

/// Largest-remainder split of `total` proportional to `weights`, each share at
/// least `min_each`.
fn apportion(total: usize, weights: &[f64], min_each: usize) -> Vec<usize> {
    let spare = total - min_each * weights.len();
    let wsum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| spare as f64 * w / wsum).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = spare - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts.iter().map(|c| c + min_each).collect()
}

/// Stitches two closed rings of vertices with a triangle strip, advancing
/// whichever ring has the nearer next vertex by angle.
fn zip_rings(tris: &mut Vec<Triangle>, (sa, aa): (usize, &[f64]), (sb, ab): (usize, &[f64])) {
    let (na, nb) = (aa.len(), ab.len());
    let angle = |v: &[f64], k: usize| v[k % v.len()] + std::f64::consts::TAU * (k / v.len()) as f64;
    let (mut i, mut j) = (0usize, 0usize);
    while i < na || j < nb {
        let advance_a = j == nb || (i < na && angle(aa, i + 1) <= angle(ab, j + 1));
        let a0 = (sa + i % na) as u32;
        let b0 = (sb + j % nb) as u32;
        if advance_a {
            tris.push([a0, (sa + (i + 1) % na) as u32, b0]);
            i += 1;
        } else {
            tris.push([a0, (sb + (j + 1) % nb) as u32, b0]);
            j += 1;
        }
    }
}

fn write_f32s<W: Write, T: Real>(w: &mut W, data: impl IntoIterator<Item = T>) -> std::io::Result<()> {
    for v in data {
        w.write_f32::<LittleEndian>(real::to_f64(v) as f32)?;
    }
    Ok(())
}

fn read_f32s<R: Read, T: Real>(r: &mut R, count: usize) -> std::io::Result<Vec<T>> {
    (0..count)
        .map(|_| r.read_f32::<LittleEndian>().map(|v| lit::<T>(v as f64)))
        .collect()
}

/// Serialises the basis to the little-endian `MMB1` layout.
pub fn write_basis<W: Write, T: Real>(w: &mut W, basis: &ModelBasis<T>) -> std::io::Result<()> {
    let d = basis.dims();
    w.write_all(BASIS_MAGIC)?;
    for v in [
        BASIS_VERSION,
        basis.num_vertices as u32,
        d.shape as u32,
        d.texture as u32,
        d.expression as u32,
        basis.nose_tip_index as u32,
        basis.triangles.len() as u32,
    ] {
        w.write_u32::<LittleEndian>(v)?;
    }
    write_f32s(w, basis.mu_shape.iter().copied())?;
    write_f32s(w, basis.mu_texture.iter().copied())?;
    write_f32s(w, basis.p_shape.iter().copied())?;
    write_f32s(w, basis.p_expr.iter().copied())?;
    write_f32s(w, basis.p_texture.iter().copied())?;
    write_f32s(w, basis.w_shape.iter().copied())?;
    write_f32s(w, basis.w_expr.iter().copied())?;
    write_f32s(w, basis.w_texture.iter().copied())?;
    for t in basis.triangles.iter() {
        for &i in t {
            w.write_u32::<LittleEndian>(i)?;
        }
    }
    Ok(())
}

pub fn read_basis<R: Read, T: Real>(r: &mut R) -> Result<ModelBasis<T>> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated basis file: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(fmt)?;
    if &magic != BASIS_MAGIC {
        return Err(Error::Format(format!("bad basis magic {magic:?}")));
    }
    let mut header = [0u32; 7];
    for h in header.iter_mut() {
        *h = r.read_u32::<LittleEndian>().map_err(fmt)?;
    }
    let [version, n, ks, kt, ke, nose, ntri] = header.map(|v| v as usize);
    if version != BASIS_VERSION as usize {
        return Err(Error::Format(format!("unsupported basis version {version}")));
    }
    let n3 = 3 * n;
    let vec = |r: &mut R, len: usize| -> Result<Array1<T>> { Ok(Array1::from(read_f32s(r, len).map_err(fmt)?)) };
    let mat = |r: &mut R, cols: usize| -> Result<Array2<T>> {
        Array2::from_shape_vec((n3, cols), read_f32s(r, n3 * cols).map_err(fmt)?)
            .map_err(|e| Error::Format(e.to_string()))
    };
    let mu_shape = vec(r, n3)?;
    let mu_texture = vec(r, n3)?;
    let p_shape = mat(r, ks)?;
    let p_expr = mat(r, ke)?;
    let p_texture = mat(r, kt)?;
    let w_shape = vec(r, ks)?;
    let w_expr = vec(r, ke)?;
    let w_texture = vec(r, kt)?;
    let mut triangles = Vec::with_capacity(ntri);
    for _ in 0..ntri {
        let mut t = [0u32; 3];
        for i in t.iter_mut() {
            *i = r.read_u32::<LittleEndian>().map_err(fmt)?;
        }
        triangles.push(t);
    }
    let basis = ModelBasis {
        num_vertices: n,
        mu_shape,
        mu_texture,
        p_shape,
        p_expr,
        p_texture,
        w_shape,
        w_expr,
        w_texture,
        triangles: Arc::new(triangles),
        nose_tip_index: nose,
    };
    basis.validate()?;
    Ok(basis)
}

pub fn save_basis<T: Real>(path: impl AsRef<Path>, basis: &ModelBasis<T>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_basis(&mut w, basis)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_basis<T: Real>(path: impl AsRef<Path>) -> Result<ModelBasis<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_basis(&mut BufReader::new(file))
}
