//! Per-pixel Phong illumination over interpolated attribute buffers.
//!
//! Radiance per channel is
//! `ambient*Kd + sum_lights Kd*I*max(0, n.l) + Ks*I*max(0, r.v)^shininess`
//! with `Ks = c*(1 - Kd)`. Lights carry received irradiance (no distance
//! falloff). Diffuse colours are clamped to `[0, 1]` on entry and the output
//! only at the final step; gradients are zero wherever either clamp is active.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{arg_err, Result};
use crate::raster::{AttributeBuffer, Camera};
use crate::real::{self, lit, Real, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct PointLight<T> {
    pub position: Vec3<T>,
    pub rgb_intensity: Vec3<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightingRig<T> {
    pub lights: [PointLight<T>; 2],
    pub ambient: Vec3<T>,
    pub specular_c: T,
    pub shininess: T,
}

pub const DEFAULT_SPECULAR_C: f64 = 0.35;
pub const DEFAULT_SHININESS: f64 = 40.0;
pub const COLOR_TEMPERATURES_K: [f64; 5] = [2700.0, 4000.0, 5000.0, 6500.0, 7500.0];

impl<T: Real> LightingRig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.specular_c >= T::zero() && self.specular_c <= T::one()) {
            return Err(arg_err!("specular constant {} outside [0,1]", self.specular_c));
        }
        if !(self.shininess > T::zero()) {
            return Err(arg_err!("shininess must be positive"));
        }
        if self
            .lights
            .iter()
            .any(|l| l.rgb_intensity.iter().any(|&v| !(v >= T::zero())))
        {
            return Err(arg_err!("light intensities must be non-negative"));
        }
        Ok(())
    }

    /// Two identical white lights at `position`, split evenly; handy for tests
    /// and the CLI's fixed-light mode.
    pub fn headlight(position: Vec3<T>) -> Self {
        let half = lit::<T>(0.5);
        let light = PointLight {
            position,
            rgb_intensity: [half; 3],
        };
        LightingRig {
            lights: [light.clone(), light],
            ambient: [T::zero(); 3],
            specular_c: lit(DEFAULT_SPECULAR_C),
            shininess: lit(DEFAULT_SHININESS),
        }
    }
}

/// Distribution of randomised lighting rigs.
#[derive(Debug, Clone, PartialEq)]
pub struct LightingSampler {
    pub distance_mm: (f64, f64),
    pub intensity: (f64, f64),
    pub temperatures_k: Vec<f64>,
    pub color_jitter: f64,
    pub specular_c: f64,
    pub shininess: f64,
    pub ambient: f64,
}

impl Default for LightingSampler {
    fn default() -> Self {
        LightingSampler {
            distance_mm: (2000.0, 4000.0),
            intensity: (0.6, 1.2),
            temperatures_k: COLOR_TEMPERATURES_K.to_vec(),
            color_jitter: 0.05,
            specular_c: DEFAULT_SPECULAR_C,
            shininess: DEFAULT_SHININESS,
            ambient: 0.0,
        }
    }
}

/// A sampled rig together with the colour temperature it used.
#[derive(Debug, Clone)]
pub struct SampledLighting<T> {
    pub rig: LightingRig<T>,
    pub kelvin: f64,
}

impl LightingSampler {
    /// Two lights in the frontal (+z) hemisphere around the origin with a
    /// shared, jittered colour temperature.
    pub fn sample<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> SampledLighting<T> {
        let kelvin = self.temperatures_k[rng.random_range(0..self.temperatures_k.len())];
        let base = color_temperature_to_rgb(kelvin).expect("configured temperatures are in range");
        let jitter = self.color_jitter;
        let color: [f64; 3] = std::array::from_fn(|c| base[c] * rng.random_range(1.0 - jitter..=1.0 + jitter));
        let mut light = || {
            let dir = loop {
                let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
                if let Some(u) = real::normalize(v) {
                    break [u[0], u[1], u[2].abs()];
                }
            };
            let dist = rng.random_range(self.distance_mm.0..=self.distance_mm.1);
            let intensity = rng.random_range(self.intensity.0..=self.intensity.1);
            PointLight {
                position: real::cast_vec3(real::scale(dir, dist)),
                rgb_intensity: real::cast_vec3(color.map(|c| c * intensity)),
            }
        };
        let lights = [light(), light()];
        SampledLighting {
            rig: LightingRig {
                lights,
                ambient: [lit(self.ambient); 3],
                specular_c: lit(self.specular_c),
                shininess: lit(self.shininess),
            },
            kelvin,
        }
    }
}

pub fn sample_lighting<T: Real, R: Rng + ?Sized>(rng: &mut R) -> LightingRig<T> {
    LightingSampler::default().sample(rng).rig
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Blackbody colour as linear RGB with the largest channel equal to one.
///
/// Uses the widely circulated piecewise log/power fit of the Planckian locus
/// in sRGB (Helland), then decodes the sRGB transfer curve.
pub fn color_temperature_to_rgb(kelvin: f64) -> Result<[f64; 3]> {
    if !(1000.0..=12000.0).contains(&kelvin) {
        return Err(arg_err!("color temperature {kelvin} K outside [1000, 12000]"));
    }
    let t = kelvin / 100.0;
    let r = if t <= 66.0 {
        255.0
    } else {
        329.698727446 * (t - 60.0).powf(-0.1332047592)
    };
    let g = if t <= 66.0 {
        99.4708025861 * t.ln() - 161.1195681661
    } else {
        288.1221695283 * (t - 60.0).powf(-0.0755148492)
    };
    let b = if t >= 66.0 {
        255.0
    } else if t <= 19.0 {
        0.0
    } else {
        138.5177312231 * (t - 10.0).ln() - 305.0447927307
    };
    let rgb = [r, g, b].map(|v| srgb_to_linear((v / 255.0).clamp(0.0, 1.0)));
    let m = rgb[0].max(rgb[1]).max(rgb[2]);
    Ok(rgb.map(|v| v / m))
}

/// `Ks = c * (1 - Kd)` per channel, with `Kd` clamped to `[0,1]` first.
pub fn specular_from_diffuse<T: Real>(k_d: Vec3<T>, c: T) -> Vec3<T> {
    k_d.map(|v| c * (T::one() - v.max(T::zero()).min(T::one())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadedImage<T> {
    pub width: usize,
    pub height: usize,
    /// Pre-clamp radiance.
    pub radiance: Vec<Vec3<T>>,
    /// Radiance clamped to `[0, 1]`; background pixels hold the background colour.
    pub image: Vec<Vec3<T>>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ShadeGrad<T> {
    pub positions: Vec<Vec3<T>>,
    pub normals: Vec<Vec3<T>>,
    pub diffuse: Vec<Vec3<T>>,
}

fn check_buffers<T: Real>(
    pos: &AttributeBuffer<T, 3>,
    nrm: &AttributeBuffer<T, 3>,
    dif: &AttributeBuffer<T, 3>,
) -> Result<()> {
    let dims = |b: &AttributeBuffer<T, 3>| (b.width, b.height, b.values.len(), b.mask.len());
    if dims(pos) != dims(nrm) || dims(pos) != dims(dif) {
        return Err(arg_err!("shading buffers differ in size"));
    }
    if pos.mask != nrm.mask || pos.mask != dif.mask {
        return Err(arg_err!("shading buffers differ in coverage"));
    }
    Ok(())
}

#[inline]
fn clamp01<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

#[inline]
fn inside01<T: Real>(v: T) -> bool {
    v >= T::zero() && v <= T::one()
}

/// Pre-clamp radiance of a single pixel.
pub fn shade_pixel<T: Real>(p: Vec3<T>, n_raw: Vec3<T>, kd_raw: Vec3<T>, rig: &LightingRig<T>, eye: Vec3<T>) -> Vec3<T> {
    let kd = kd_raw.map(clamp01);
    let ks = specular_from_diffuse(kd, rig.specular_c);
    let mut out = [0, 1, 2].map(|c| rig.ambient[c] * kd[c]);
    let (Some(n), Some(v)) = (real::normalize(n_raw), real::normalize(real::sub(eye, p))) else {
        return out;
    };
    for light in &rig.lights {
        let Some(l) = real::normalize(real::sub(light.position, p)) else {
            continue;
        };
        let ndl = real::dot(n, l);
        let r = real::sub(real::scale(n, lit::<T>(2.0) * ndl), l);
        let rdv = real::dot(r, v);
        let diffuse = ndl.max(T::zero());
        let spec = if rdv > T::zero() { rdv.powf(rig.shininess) } else { T::zero() };
        for c in 0..3 {
            out[c] += light.rgb_intensity[c] * (kd[c] * diffuse + ks[c] * spec);
        }
    }
    out
}

/// Adjoint of [`shade_pixel`] for a cotangent on the pre-clamp radiance.
/// Returns gradients for the position, the raw normal and the raw diffuse colour.
pub fn shade_pixel_vjp<T: Real>(
    p: Vec3<T>,
    n_raw: Vec3<T>,
    kd_raw: Vec3<T>,
    rig: &LightingRig<T>,
    eye: Vec3<T>,
    g: Vec3<T>,
) -> (Vec3<T>, Vec3<T>, Vec3<T>) {
    let two = lit::<T>(2.0);
    let kd = kd_raw.map(clamp01);
    let ks = specular_from_diffuse(kd, rig.specular_c);
    let mut g_kd = [0, 1, 2].map(|c| g[c] * rig.ambient[c]);
    let mut g_p = [T::zero(); 3];
    let mut g_n = [T::zero(); 3];
    let to_eye = real::sub(eye, p);
    if let (Some(n), Some(v)) = (real::normalize(n_raw), real::normalize(to_eye)) {
        let mut g_nhat = [T::zero(); 3];
        let mut g_v = [T::zero(); 3];
        for light in &rig.lights {
            let to_light = real::sub(light.position, p);
            let Some(l) = real::normalize(to_light) else { continue };
            let ndl = real::dot(n, l);
            let ndv = real::dot(n, v);
            let r = real::sub(real::scale(n, two * ndl), l);
            let rdv = real::dot(r, v);
            let diffuse = ndl.max(T::zero());
            let spec = if rdv > T::zero() { rdv.powf(rig.shininess) } else { T::zero() };
            let mut g_diffuse = T::zero();
            let mut g_spec = T::zero();
            for c in 0..3 {
                let gi = g[c] * light.rgb_intensity[c];
                // Ks_c = c_spec (1 - Kd_c)
                g_kd[c] += gi * (diffuse - rig.specular_c * spec);
                g_diffuse += gi * kd[c];
                g_spec += gi * ks[c];
            }
            let g_ndl = if ndl > T::zero() { g_diffuse } else { T::zero() };
            let g_rdv = if rdv > T::zero() {
                g_spec * rig.shininess * rdv.powf(rig.shininess - T::one())
            } else {
                T::zero()
            };
            // rdv = 2 (n.l)(n.v) - l.v
            let mut g_l = real::scale(n, g_ndl);
            g_l = real::add(g_l, real::scale(real::sub(real::scale(n, two * ndv), v), g_rdv));
            g_nhat = real::add(g_nhat, real::scale(l, g_ndl));
            g_nhat = real::add(
                g_nhat,
                real::scale(real::add(real::scale(v, ndl), real::scale(l, ndv)), two * g_rdv),
            );
            g_v = real::add(g_v, real::scale(r, g_rdv));
            // l = normalize(light - p)
            g_p = real::sub(g_p, real::normalize_vjp(to_light, g_l));
        }
        g_n = real::normalize_vjp(n_raw, g_nhat);
        g_p = real::sub(g_p, real::normalize_vjp(to_eye, g_v));
    }
    for c in 0..3 {
        if !inside01(kd_raw[c]) {
            g_kd[c] = T::zero();
        }
    }
    (g_p, g_n, g_kd)
}

pub fn phong_shade<T: Real>(
    positions: &AttributeBuffer<T, 3>,
    normals: &AttributeBuffer<T, 3>,
    diffuse: &AttributeBuffer<T, 3>,
    rig: &LightingRig<T>,
    camera: &Camera<T>,
    background: Vec3<T>,
) -> Result<ShadedImage<T>> {
    check_buffers(positions, normals, diffuse)?;
    rig.validate()?;
    let npx = positions.values.len();
    let mut radiance = vec![[T::zero(); 3]; npx];
    let mut image = vec![background; npx];
    for i in 0..npx {
        if !positions.mask[i] {
            continue;
        }
        let rad = shade_pixel(positions.values[i], normals.values[i], diffuse.values[i], rig, camera.eye);
        radiance[i] = rad;
        image[i] = rad.map(clamp01);
    }
    Ok(ShadedImage {
        width: positions.width,
        height: positions.height,
        radiance,
        image,
        mask: positions.mask.clone(),
    })
}

/// Adjoint of [`phong_shade`] for a cotangent on the clamped image.
pub fn shade_vjp<T: Real>(
    positions: &AttributeBuffer<T, 3>,
    normals: &AttributeBuffer<T, 3>,
    diffuse: &AttributeBuffer<T, 3>,
    rig: &LightingRig<T>,
    camera: &Camera<T>,
    shaded: &ShadedImage<T>,
    grad_image: &[Vec3<T>],
) -> Result<ShadeGrad<T>> {
    check_buffers(positions, normals, diffuse)?;
    let npx = positions.values.len();
    if grad_image.len() != npx || shaded.radiance.len() != npx {
        return Err(arg_err!("image cotangent has wrong pixel count"));
    }
    let mut out = ShadeGrad {
        positions: vec![[T::zero(); 3]; npx],
        normals: vec![[T::zero(); 3]; npx],
        diffuse: vec![[T::zero(); 3]; npx],
    };
    for i in 0..npx {
        if !positions.mask[i] {
            continue;
        }
        let rad = shaded.radiance[i];
        let g = [0, 1, 2].map(|c| if inside01(rad[c]) { grad_image[i][c] } else { T::zero() });
        if g.iter().all(|v| *v == T::zero()) {
            continue;
        }
        let (gp, gn, gk) = shade_pixel_vjp(positions.values[i], normals.values[i], diffuse.values[i], rig, camera.eye, g);
        out.positions[i] = gp;
        out.normals[i] = gn;
        out.diffuse[i] = gk;
    }
    Ok(out)
}
