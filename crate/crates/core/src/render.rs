//! Mesh to image through the deferred pipeline, plus the full adjoint from
//! image pixels back to vertex positions and colours.

use crate::error::{arg_err, Result};
use crate::model::{compute_vertex_normals, vertex_normals_vjp, Mesh, MeshGrad};
use crate::raster::{
    barycentric_vjp, interpolate_attributes, interpolate_attributes_vjp, project_vertices, project_vertices_vjp,
    rasterize, AttributeBuffer, Camera, GBuffer, Projection,
};
use crate::real::{self, Real, Vec3};
use crate::shading::{phong_shade, shade_vjp, LightingRig, ShadedImage};

/// Linear RGB image, row-major with row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Vec3<T>>,
}

impl<T: Real> Image<T> {
    pub fn new(width: usize, height: usize, fill: Vec3<T>) -> Self {
        Image {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> Vec3<T> {
        self.pixels[row * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions<T> {
    pub background: Vec3<T>,
    pub perspective_correct: bool,
}

impl<T: Real> Default for RenderOptions<T> {
    fn default() -> Self {
        RenderOptions {
            background: [T::zero(); 3],
            perspective_correct: true,
        }
    }
}

/// Everything the backward pass needs from a forward render.
#[derive(Debug, Clone)]
pub struct Rendered<T> {
    pub camera: Camera<T>,
    pub rig: LightingRig<T>,
    pub options: RenderOptions<T>,
    pub mesh: Mesh<T>,
    pub normals: Vec<Vec3<T>>,
    pub normal_fallbacks: usize,
    pub projection: Projection<T>,
    pub gbuffer: GBuffer<T>,
    pub position_buffer: AttributeBuffer<T, 3>,
    pub normal_buffer: AttributeBuffer<T, 3>,
    pub diffuse_buffer: AttributeBuffer<T, 3>,
    pub shaded: ShadedImage<T>,
}

impl<T: Real> Rendered<T> {
    pub fn image(&self) -> Image<T> {
        Image {
            width: self.shaded.width,
            height: self.shaded.height,
            pixels: self.shaded.image.clone(),
        }
    }
}

pub fn render_mesh<T: Real>(
    mesh: &Mesh<T>,
    camera: &Camera<T>,
    rig: &LightingRig<T>,
    options: &RenderOptions<T>,
) -> Result<Rendered<T>> {
    mesh.validate()?;
    let nr = compute_vertex_normals(&mesh.positions, &mesh.triangles);
    let projection = project_vertices(camera, &mesh.positions)?;
    let gbuffer = rasterize(&projection.ndc, &mesh.triangles, camera.width, camera.height)?;
    let clip_w = projection.clip_w();
    let w = options.perspective_correct.then_some(clip_w.as_slice());
    let zero = [T::zero(); 3];
    let position_buffer = interpolate_attributes(&gbuffer, &mesh.triangles, &mesh.positions, zero, w)?;
    let normal_buffer = interpolate_attributes(&gbuffer, &mesh.triangles, &nr.normals, zero, w)?;
    let diffuse_buffer = interpolate_attributes(&gbuffer, &mesh.triangles, &mesh.colors, zero, w)?;
    let shaded = phong_shade(
        &position_buffer,
        &normal_buffer,
        &diffuse_buffer,
        rig,
        camera,
        options.background,
    )?;
    Ok(Rendered {
        camera: camera.clone(),
        rig: rig.clone(),
        options: options.clone(),
        mesh: mesh.clone(),
        normals: nr.normals,
        normal_fallbacks: nr.fallback_count,
        projection,
        gbuffer,
        position_buffer,
        normal_buffer,
        diffuse_buffer,
        shaded,
    })
}

/// Pulls an image cotangent back to vertex positions and colours.
pub fn render_mesh_vjp<T: Real>(r: &Rendered<T>, grad_image: &[Vec3<T>]) -> Result<MeshGrad<T>> {
    if grad_image.len() != r.shaded.image.len() {
        return Err(arg_err!("image cotangent has wrong pixel count"));
    }
    let tri = &r.mesh.triangles;
    let sg = shade_vjp(
        &r.position_buffer,
        &r.normal_buffer,
        &r.diffuse_buffer,
        &r.rig,
        &r.camera,
        &r.shaded,
        grad_image,
    )?;
    let clip_w = r.projection.clip_w();
    let w = r.options.perspective_correct.then_some(clip_w.as_slice());
    let gp = interpolate_attributes_vjp(&r.gbuffer, tri, &r.mesh.positions, w, &sg.positions)?;
    let gn = interpolate_attributes_vjp(&r.gbuffer, tri, &r.normals, w, &sg.normals)?;
    let gc = interpolate_attributes_vjp(&r.gbuffer, tri, &r.mesh.colors, w, &sg.diffuse)?;

    let npx = grad_image.len();
    let mut g_bary = vec![[T::zero(); 3]; npx];
    for i in 0..npx {
        g_bary[i] = real::add(real::add(gp.barycentrics[i], gn.barycentrics[i]), gc.barycentrics[i]);
    }
    let g_w: Option<Vec<T>> = match (&gp.clip_w, &gn.clip_w, &gc.clip_w) {
        (Some(a), Some(b), Some(c)) => Some((0..a.len()).map(|k| a[k] + b[k] + c[k]).collect()),
        _ => None,
    };
    let g_ndc = barycentric_vjp(&r.projection.ndc, tri, &r.gbuffer, &g_bary)?;
    let g_proj = project_vertices_vjp(&r.camera, &r.projection, &g_ndc, g_w.as_deref())?;
    let g_norm = vertex_normals_vjp(&r.mesh.positions, tri, &gn.attributes);

    let positions = (0..r.mesh.positions.len())
        .map(|k| real::add(real::add(gp.attributes[k], g_proj[k]), g_norm[k]))
        .collect();
    Ok(MeshGrad {
        positions,
        colors: gc.attributes,
    })
}
