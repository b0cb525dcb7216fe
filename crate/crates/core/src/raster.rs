//! Deferred rasterizer: perspective projection, triangle-id/barycentric
//! G-buffer, attribute interpolation, and the adjoints of each stage.
//!
//! Barycentrics are screen-space (2-D NDC) coordinates. Their derivative
//! with respect to the vertices is the analytic planar formula, which stays
//! valid outside the triangle (negative coordinates). Triangle ownership of
//! a pixel is treated as constant during the backward pass.

use crate::error::{arg_err, Error, Result};
use crate::real::{self, lit, Real, Vec3};
use crate::model::Triangle;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera<T> {
    pub eye: Vec3<T>,
    pub look_at: Vec3<T>,
    pub up: Vec3<T>,
    /// Radians.
    pub vertical_fov: T,
    pub near: T,
    pub far: T,
    pub width: usize,
    pub height: usize,
}

/// Orthonormal camera frame: `right`, `up`, and `forward` (view direction).
#[derive(Debug, Clone, Copy)]
struct Frame<T> {
    right: Vec3<T>,
    up: Vec3<T>,
    forward: Vec3<T>,
}

impl<T: Real> Camera<T> {
    pub fn validate(&self) -> Result<()> {
        let pi = T::PI();
        if !(self.near > T::zero() && self.far > self.near) {
            return Err(arg_err!("camera needs 0 < near < far, got {} / {}", self.near, self.far));
        }
        if !(self.vertical_fov > T::zero() && self.vertical_fov < pi) {
            return Err(arg_err!("vertical fov {} outside (0, pi)", self.vertical_fov));
        }
        if self.width == 0 || self.height == 0 {
            return Err(arg_err!("image size must be at least 1x1"));
        }
        self.frame().map(|_| ())
    }

    fn frame(&self) -> Result<Frame<T>> {
        let forward = real::normalize(real::sub(self.look_at, self.eye))
            .ok_or_else(|| arg_err!("camera eye and look_at coincide"))?;
        let right = real::normalize(real::cross(forward, self.up))
            .ok_or_else(|| arg_err!("camera up vector is parallel to the view direction"))?;
        let up = real::cross(right, forward);
        Ok(Frame { right, up, forward })
    }

    pub fn aspect(&self) -> T {
        lit::<T>(self.width as f64) / lit(self.height as f64)
    }

    fn focal(&self) -> (T, T) {
        let fy = T::one() / (self.vertical_fov / lit(2.0)).tan();
        (fy / self.aspect(), fy)
    }

    fn depth_coeffs(&self) -> (T, T) {
        let (n, f) = (self.near, self.far);
        ((f + n) / (n - f), lit::<T>(2.0) * f * n / (n - f))
    }

    /// Camera-space coordinates (`-z` is the viewing direction).
    pub fn to_camera_space(&self, p: Vec3<T>) -> Result<Vec3<T>> {
        let fr = self.frame()?;
        let d = real::sub(p, self.eye);
        Ok([real::dot(fr.right, d), real::dot(fr.up, d), -real::dot(fr.forward, d)])
    }

    /// NDC position of the centre of pixel `(col, row)`; row 0 is the top.
    pub fn pixel_center_ndc(&self, col: usize, row: usize) -> [T; 2] {
        pixel_center_ndc(col, row, self.width, self.height)
    }

    /// Continuous pixel position of a world point and its 2x3 Jacobian.
    /// `None` if the point is not in front of the eye.
    pub fn project_to_pixel(&self, p: Vec3<T>) -> Result<Option<([T; 2], [Vec3<T>; 2])>> {
        let fr = self.frame()?;
        let (fx, fy) = self.focal();
        let d = real::sub(p, self.eye);
        let (xc, yc, depth) = (real::dot(fr.right, d), real::dot(fr.up, d), real::dot(fr.forward, d));
        if !(depth > T::zero()) {
            return Ok(None);
        }
        let half = lit::<T>(0.5);
        let (w, h) = (lit::<T>(self.width as f64), lit::<T>(self.height as f64));
        let px = (fx * xc / depth + T::one()) * half * w;
        let py = (T::one() - fy * yc / depth) * half * h;
        let inv = T::one() / depth;
        let jx = real::scale(real::sub(real::scale(fr.right, inv), real::scale(fr.forward, xc * inv * inv)), half * w * fx);
        let jy = real::scale(real::sub(real::scale(fr.up, inv), real::scale(fr.forward, yc * inv * inv)), -half * h * fy);
        Ok(Some(([px, py], [jx, jy])))
    }

    /// Maps NDC x/y to continuous pixel coordinates (pixel centres at `i + 0.5`).
    pub fn ndc_to_pixel(&self, x: T, y: T) -> [T; 2] {
        let half = lit::<T>(0.5);
        [
            (x + T::one()) * half * lit(self.width as f64),
            (T::one() - y) * half * lit(self.height as f64),
        ]
    }
}

pub fn pixel_center_ndc<T: Real>(col: usize, row: usize, width: usize, height: usize) -> [T; 2] {
    let two = lit::<T>(2.0);
    [
        two * (lit::<T>(col as f64) + lit(0.5)) / lit(width as f64) - T::one(),
        T::one() - two * (lit::<T>(row as f64) + lit(0.5)) / lit(height as f64),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    pub clip: Vec<[T; 4]>,
    /// NaN for vertices at or behind the eye plane.
    pub ndc: Vec<Vec3<T>>,
    pub behind_eye: usize,
}

impl<T: Real> Projection<T> {
    pub fn clip_w(&self) -> Vec<T> {
        self.clip.iter().map(|c| c[3]).collect()
    }
}

/// View transform, symmetric frustum, homogeneous divide.
pub fn project_vertices<T: Real>(camera: &Camera<T>, positions: &[Vec3<T>]) -> Result<Projection<T>> {
    camera.validate()?;
    let fr = camera.frame()?;
    let (fx, fy) = camera.focal();
    let (a, b) = camera.depth_coeffs();
    let mut behind_eye = 0;
    let mut clip = Vec::with_capacity(positions.len());
    let mut ndc = Vec::with_capacity(positions.len());
    for &p in positions {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(arg_err!("non-finite vertex position {p:?}"));
        }
        let d = real::sub(p, camera.eye);
        let xc = real::dot(fr.right, d);
        let yc = real::dot(fr.up, d);
        let zc = -real::dot(fr.forward, d);
        let c = [fx * xc, fy * yc, a * zc + b, -zc];
        clip.push(c);
        if c[3] > T::zero() {
            ndc.push([c[0] / c[3], c[1] / c[3], c[2] / c[3]]);
        } else {
            behind_eye += 1;
            ndc.push([T::nan(); 3]);
        }
    }
    Ok(Projection { clip, ndc, behind_eye })
}

/// Adjoint of [`project_vertices`]. `grad_w` carries any direct dependence on
/// the clip-space `w` (perspective-correct interpolation).
pub fn project_vertices_vjp<T: Real>(
    camera: &Camera<T>,
    projection: &Projection<T>,
    grad_ndc: &[Vec3<T>],
    grad_w: Option<&[T]>,
) -> Result<Vec<Vec3<T>>> {
    let n = projection.clip.len();
    if grad_ndc.len() != n || grad_w.is_some_and(|g| g.len() != n) {
        return Err(arg_err!("projection cotangent length mismatch"));
    }
    let fr = camera.frame()?;
    let (fx, fy) = camera.focal();
    let (a, _) = camera.depth_coeffs();
    let mut out = Vec::with_capacity(n);
    for (k, c) in projection.clip.iter().enumerate() {
        let w = c[3];
        let g = grad_ndc[k];
        let mut gw = grad_w.map_or(T::zero(), |gw| gw[k]);
        let mut gc = [T::zero(); 3];
        if w > T::zero() && g.iter().all(|v| v.is_finite()) {
            let inv = T::one() / w;
            for i in 0..3 {
                gc[i] = g[i] * inv;
                gw -= g[i] * c[i] * inv * inv;
            }
        }
        let gx = fx * gc[0];
        let gy = fy * gc[1];
        let gz = a * gc[2] - gw;
        let gp = real::sub(
            real::add(real::scale(fr.right, gx), real::scale(fr.up, gy)),
            real::scale(fr.forward, gz),
        );
        out.push(gp);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GBuffer<T> {
    pub width: usize,
    pub height: usize,
    pub num_vertices: usize,
    /// `-1` marks background.
    pub triangle_id: Vec<i32>,
    pub barycentrics: Vec<Vec3<T>>,
    pub ndc_depth: Vec<T>,
    /// Degenerate, non-finite, or behind-eye triangles that were not drawn.
    pub skipped_triangles: usize,
}

impl<T: Real> GBuffer<T> {
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    pub fn covered_pixels(&self) -> usize {
        self.triangle_id.iter().filter(|&&id| id >= 0).count()
    }

    pub fn coverage_fraction(&self) -> f64 {
        self.covered_pixels() as f64 / (self.width * self.height) as f64
    }
}

/// Signed doubled area of `(a, b, p)`; linear in `p`.
#[inline]
fn edge<T: Real>(a: [T; 2], b: [T; 2], p: [T; 2]) -> T {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Screen-space barycentrics of `p` in triangle `v`, or `None` when the
/// triangle is degenerate. Components may be negative.
pub fn barycentrics_at<T: Real>(v: [[T; 2]; 3], p: [T; 2]) -> Option<Vec3<T>> {
    let d = edge(v[0], v[1], v[2]);
    if !(d.abs() > lit(1e-30)) {
        return None;
    }
    Some([edge(v[1], v[2], p) / d, edge(v[2], v[0], p) / d, edge(v[0], v[1], p) / d])
}

/// `jac[k][2*m + c]` is the derivative of barycentric `k` with respect to
/// coordinate `c` (x or y) of vertex `m`.
pub fn barycentric_jacobian<T: Real>(v: [[T; 2]; 3], p: [T; 2]) -> Option<[[T; 6]; 3]> {
    let b = barycentrics_at(v, p)?;
    let d = edge(v[0], v[1], v[2]);
    let mut jac = [[T::zero(); 6]; 3];
    // e_k = edge(v[k+1], v[k+2], p); b_k = e_k / D with D = sum_k e_k.
    // d b_k / d x = (d e_k/dx - b_k * dD/dx) / D
    let mut de = [[T::zero(); 6]; 3];
    for (k, row) in de.iter_mut().enumerate() {
        let ia = (k + 1) % 3;
        let ib = (k + 2) % 3;
        let (a, bb) = (v[ia], v[ib]);
        row[2 * ia] = bb[1] - p[1];
        row[2 * ia + 1] = p[0] - bb[0];
        row[2 * ib] = p[1] - a[1];
        row[2 * ib + 1] = a[0] - p[0];
    }
    for k in 0..3 {
        for c in 0..6 {
            let dd = de[0][c] + de[1][c] + de[2][c];
            jac[k][c] = (de[k][c] - b[k] * dd) / d;
        }
    }
    Some(jac)
}

/// Fills the G-buffer. Pixel centres sit at `(i + 0.5, j + 0.5)`; the nearest
/// NDC depth wins and equal depths keep the lower triangle id. Triangles with
/// non-finite vertices (behind the eye) or zero screen area are skipped.
pub fn rasterize<T: Real>(ndc: &[Vec3<T>], triangles: &[Triangle], width: usize, height: usize) -> Result<GBuffer<T>> {
    if width == 0 || height == 0 {
        return Err(arg_err!("image size must be at least 1x1"));
    }
    if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i as usize >= ndc.len())) {
        return Err(arg_err!("triangle {t:?} references a missing vertex"));
    }
    let npx = width * height;
    let mut gb = GBuffer {
        width,
        height,
        num_vertices: ndc.len(),
        triangle_id: vec![-1; npx],
        barycentrics: vec![[T::zero(); 3]; npx],
        ndc_depth: vec![T::infinity(); npx],
        skipped_triangles: 0,
    };
    let wf = lit::<T>(width as f64);
    let hf = lit::<T>(height as f64);
    let half = lit::<T>(0.5);
    for (id, tri) in triangles.iter().enumerate() {
        let p = tri.map(|i| ndc[i as usize]);
        if p.iter().flatten().any(|v| !v.is_finite()) {
            gb.skipped_triangles += 1;
            continue;
        }
        let v2 = p.map(|q| [q[0], q[1]]);
        if !(edge(v2[0], v2[1], v2[2]).abs() > lit(1e-30)) {
            gb.skipped_triangles += 1;
            continue;
        }
        // pixel-space bounding box
        let xs = p.map(|q| (q[0] + T::one()) * half * wf - half);
        let ys = p.map(|q| (T::one() - q[1]) * half * hf - half);
        let fmin = |a: [T; 3]| a[0].min(a[1]).min(a[2]);
        let fmax = |a: [T; 3]| a[0].max(a[1]).max(a[2]);
        let clamp = |v: T, hi: usize| -> usize { real::to_f64(v).max(0.0).min(hi as f64 - 1.0) as usize };
        if fmax(xs) < T::zero() - T::one() || fmax(ys) < -T::one() || fmin(xs) > wf || fmin(ys) > hf {
            continue;
        }
        let (c0, c1) = (clamp(fmin(xs).floor(), width), clamp(fmax(xs).ceil(), width));
        let (r0, r1) = (clamp(fmin(ys).floor(), height), clamp(fmax(ys).ceil(), height));
        for row in r0..=r1 {
            for col in c0..=c1 {
                let pc = pixel_center_ndc::<T>(col, row, width, height);
                let Some(b) = barycentrics_at(v2, pc) else { continue };
                if b.iter().any(|&x| x < T::zero()) {
                    continue;
                }
                let z = b[0] * p[0][2] + b[1] * p[1][2] + b[2] * p[2][2];
                if z < -T::one() || z > T::one() {
                    continue;
                }
                let idx = row * width + col;
                if z < gb.ndc_depth[idx] {
                    gb.ndc_depth[idx] = z;
                    gb.triangle_id[idx] = id as i32;
                    gb.barycentrics[idx] = b;
                }
            }
        }
    }
    for (d, &id) in gb.ndc_depth.iter_mut().zip(&gb.triangle_id) {
        if id < 0 {
            *d = T::one();
        }
    }
    Ok(gb)
}

/// Adjoint of the barycentric buffer with respect to vertex NDC positions,
/// using the planar formula for the owning triangle of each covered pixel.
/// The z component of the result is always zero.
pub fn barycentric_vjp<T: Real>(
    ndc: &[Vec3<T>],
    triangles: &[Triangle],
    gbuffer: &GBuffer<T>,
    cotangent: &[Vec3<T>],
) -> Result<Vec<Vec3<T>>> {
    if cotangent.len() != gbuffer.triangle_id.len() {
        return Err(arg_err!("barycentric cotangent has wrong pixel count"));
    }
    if ndc.len() != gbuffer.num_vertices {
        return Err(arg_err!("ndc vertex count differs from the G-buffer's"));
    }
    let mut grad = vec![[T::zero(); 3]; ndc.len()];
    for row in 0..gbuffer.height {
        for col in 0..gbuffer.width {
            let idx = gbuffer.index(col, row);
            let id = gbuffer.triangle_id[idx];
            let g = cotangent[idx];
            if id < 0 || g.iter().all(|v| *v == T::zero()) {
                continue;
            }
            let tri = triangles
                .get(id as usize)
                .ok_or_else(|| arg_err!("G-buffer references triangle {id} not in topology"))?;
            let v = tri.map(|i| {
                let q = ndc[i as usize];
                [q[0], q[1]]
            });
            let pc = pixel_center_ndc::<T>(col, row, gbuffer.width, gbuffer.height);
            let Some(jac) = barycentric_jacobian(v, pc) else { continue };
            for (m, &vi) in tri.iter().enumerate() {
                for c in 0..2 {
                    let d: T = (0..3).map(|k| g[k] * jac[k][2 * m + c]).sum();
                    grad[vi as usize][c] += d;
                }
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeBuffer<T, const K: usize> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<[T; K]>,
    pub mask: Vec<bool>,
}

/// Barycentric interpolation of per-vertex attributes. With `clip_w` the
/// interpolation is perspective-correct (weights `b_i / w_i`, renormalised).
pub fn interpolate_attributes<T: Real, const K: usize>(
    gbuffer: &GBuffer<T>,
    triangles: &[Triangle],
    attributes: &[[T; K]],
    background: [T; K],
    clip_w: Option<&[T]>,
) -> Result<AttributeBuffer<T, K>> {
    check_attr_dims(gbuffer, attributes.len(), clip_w)?;
    let mut values = vec![background; gbuffer.triangle_id.len()];
    let mut mask = vec![false; gbuffer.triangle_id.len()];
    for (idx, &id) in gbuffer.triangle_id.iter().enumerate() {
        if id < 0 {
            continue;
        }
        let tri = triangles[id as usize];
        let wts = interpolation_weights(gbuffer.barycentrics[idx], tri, clip_w);
        let mut out = [T::zero(); K];
        for (m, &vi) in tri.iter().enumerate() {
            let a = &attributes[vi as usize];
            for c in 0..K {
                out[c] += wts[m] * a[c];
            }
        }
        values[idx] = out;
        mask[idx] = true;
    }
    Ok(AttributeBuffer {
        width: gbuffer.width,
        height: gbuffer.height,
        values,
        mask,
    })
}

fn check_attr_dims<T: Real>(gbuffer: &GBuffer<T>, rows: usize, clip_w: Option<&[T]>) -> Result<()> {
    if rows != gbuffer.num_vertices {
        return Err(arg_err!(
            "attribute rows {} differ from vertex count {}",
            rows,
            gbuffer.num_vertices
        ));
    }
    if let Some(w) = clip_w {
        if w.len() != rows {
            return Err(arg_err!("clip w has {} entries for {} vertices", w.len(), rows));
        }
    }
    Ok(())
}

#[inline]
fn interpolation_weights<T: Real>(b: Vec3<T>, tri: Triangle, clip_w: Option<&[T]>) -> Vec3<T> {
    match clip_w {
        None => b,
        Some(w) => {
            let q = [0, 1, 2].map(|m| b[m] / w[tri[m] as usize]);
            let s = q[0] + q[1] + q[2];
            [q[0] / s, q[1] / s, q[2] / s]
        }
    }
}

/// Cotangents produced by [`interpolate_attributes_vjp`].
#[derive(Debug, Clone)]
pub struct InterpolationGrad<T, const K: usize> {
    pub attributes: Vec<[T; K]>,
    pub barycentrics: Vec<Vec3<T>>,
    /// Present when interpolation was perspective-correct.
    pub clip_w: Option<Vec<T>>,
}

pub fn interpolate_attributes_vjp<T: Real, const K: usize>(
    gbuffer: &GBuffer<T>,
    triangles: &[Triangle],
    attributes: &[[T; K]],
    clip_w: Option<&[T]>,
    cotangent: &[[T; K]],
) -> Result<InterpolationGrad<T, K>> {
    check_attr_dims(gbuffer, attributes.len(), clip_w)?;
    if cotangent.len() != gbuffer.triangle_id.len() {
        return Err(arg_err!("interpolation cotangent has wrong pixel count"));
    }
    let n = attributes.len();
    let mut g_attr = vec![[T::zero(); K]; n];
    let mut g_bary = vec![[T::zero(); 3]; cotangent.len()];
    let mut g_w = clip_w.map(|_| vec![T::zero(); n]);
    for (idx, &id) in gbuffer.triangle_id.iter().enumerate() {
        if id < 0 {
            continue;
        }
        let g = &cotangent[idx];
        let tri = triangles[id as usize];
        let b = gbuffer.barycentrics[idx];
        let wts = interpolation_weights(b, tri, clip_w);
        // d out / d wts[m] = a_m
        let mut g_wts = [T::zero(); 3];
        for (m, &vi) in tri.iter().enumerate() {
            let a = &attributes[vi as usize];
            let ga = &mut g_attr[vi as usize];
            for c in 0..K {
                ga[c] += wts[m] * g[c];
                g_wts[m] += a[c] * g[c];
            }
        }
        match clip_w {
            None => g_bary[idx] = g_wts,
            Some(w) => {
                // wts_m = q_m / S, q_m = b_m / w_m, S = sum q
                let q = [0, 1, 2].map(|m| b[m] / w[tri[m] as usize]);
                let s = q[0] + q[1] + q[2];
                let mean: T = (0..3).map(|m| g_wts[m] * wts[m]).sum();
                let gw_all = g_w.as_mut().expect("allocated with clip_w");
                for m in 0..3 {
                    let g_q = (g_wts[m] - mean) / s;
                    let wm = w[tri[m] as usize];
                    g_bary[idx][m] = g_q / wm;
                    gw_all[tri[m] as usize] -= g_q * b[m] / (wm * wm);
                }
            }
        }
    }
    Ok(InterpolationGrad {
        attributes: g_attr,
        barycentrics: g_bary,
        clip_w: g_w,
    })
}

/// Checks the G-buffer coverage/sum invariant; returns the worst deviation of
/// a covered pixel's barycentric sum from one.
pub fn check_gbuffer<T: Real>(gb: &GBuffer<T>) -> Result<f64> {
    let mut worst = 0.0_f64;
    for (id, b) in gb.triangle_id.iter().zip(&gb.barycentrics) {
        if *id >= 0 {
            worst = worst.max(real::to_f64((b[0] + b[1] + b[2] - T::one()).abs()));
        } else if b.iter().any(|v| *v != T::zero()) {
            return Err(Error::Validation("background pixel has non-zero barycentrics".into()));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera(width: usize, height: usize) -> Camera<f64> {
        Camera {
            eye: [0.0, 0.0, 500.0],
            look_at: [0.0, 0.0, 0.0],
            up: [0.0, 1.0, 0.0],
            vertical_fov: 0.6,
            near: 10.0,
            far: 2000.0,
            width,
            height,
        }
    }

    #[test]
    fn invalid_camera_rejected() {
        let mut c = camera(8, 8);
        c.near = 0.0;
        assert!(c.validate().is_err());
        let mut c = camera(8, 8);
        c.vertical_fov = 4.0;
        assert!(c.validate().is_err());
        let mut c = camera(8, 8);
        c.up = [0.0, 0.0, 1.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn vertex_behind_eye_is_flagged_and_skipped() {
        let c = camera(8, 8);
        let pts = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 600.0]];
        let proj = project_vertices(&c, &pts).unwrap();
        assert_eq!(proj.behind_eye, 1);
        let gb = rasterize(&proj.ndc, &[[0, 1, 2]], 8, 8).unwrap();
        assert_eq!(gb.skipped_triangles, 1);
        assert_eq!(gb.covered_pixels(), 0);
    }

    #[test]
    fn interpolation_dimension_mismatch() {
        let ndc = [[-1.0, -1.0, 0.0], [3.0, -1.0, 0.0], [-1.0, 3.0, 0.0]];
        let gb = rasterize(&ndc, &[[0, 1, 2]], 4, 4).unwrap();
        let attrs = [[1.0_f64]; 2];
        assert!(matches!(
            interpolate_attributes(&gb, &[[0, 1, 2]], &attrs, [0.0], None),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn projection_vjp_matches_finite_differences() {
        let c = camera(16, 12);
        let pts = vec![[3.0, -20.0, 40.0], [-30.0, 5.0, -10.0]];
        let gn = vec![[0.3, -0.7, 0.2], [1.1, 0.4, -0.5]];
        let gw = vec![0.01, -0.02];
        let proj = project_vertices(&c, &pts).unwrap();
        let an = project_vertices_vjp(&c, &proj, &gn, Some(&gw)).unwrap();
        let f = |pts: &[Vec3<f64>]| {
            let p = project_vertices(&c, pts).unwrap();
            (0..2)
                .map(|k| real::dot(p.ndc[k], gn[k]) + p.clip[k][3] * gw[k])
                .sum::<f64>()
        };
        let h = 1e-5;
        for k in 0..2 {
            for i in 0..3 {
                let mut a = pts.clone();
                let mut b = pts.clone();
                a[k][i] += h;
                b[k][i] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!((fd - an[k][i]).abs() < 1e-8 * fd.abs().max(1e-3), "{fd} vs {}", an[k][i]);
            }
        }
    }
}
