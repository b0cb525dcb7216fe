//! Finite-difference checks of every hand-written adjoint.
//!
//! Each case draws random inputs and a random cotangent `c`, forms the scalar
//! `f(x) = <c, F(x)>`, and compares the analytic directional derivative
//! `<grad f, u>` with a central difference along `u`. Directions are the
//! normalised gradient itself plus a few Gaussian ones. Where `F` has kinks
//! (visibility, ReLU, clamping) a case whose discrete pattern differs at
//! `x + h u` or `x - h u` is redrawn.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{batch_distribution_loss, identity_loss, loopback_loss, parameter_loss, LossWeights};
use crate::model::{make_basis, make_test_basis, sample_parameters, BasisSpec, Dims, FaceParameters, MeshGrad};
use crate::network::{decoder_backward, decoder_forward_batch, DecoderShape, DecoderWeights};
use crate::raster::{barycentric_vjp, rasterize, AttributeBuffer, Camera};
use crate::real::Vec3;
use crate::render::{render_mesh, render_mesh_vjp, RenderOptions};
use crate::shading::{phong_shade, sample_lighting, shade_vjp};
use crate::trainer::PoseSampler;

pub const RENDER_TOLERANCE: f64 = 1e-3;
pub const ANALYTIC_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
const RANDOM_DIRECTIONS: usize = 3;
const MAX_REDRAWS: usize = 50;

/// Outcome for one adjoint over all of its cases.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub name: String,
    pub cases: usize,
    pub redraws: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub components: Vec<ComponentReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("component,cases,redraws,max_rel_error,tolerance,passed\n");
        for c in &self.components {
            s += &format!(
                "{},{},{},{:e},{:e},{}\n",
                c.name, c.cases, c.redraws, c.max_rel_error, c.tolerance, c.passed
            );
        }
        s
    }
}

/// A scalar objective on a flat vector, returning `None` when the discrete
/// pattern at `x` differs from the one at the base point.
struct Case<F> {
    x: Vec<f64>,
    /// Per-coordinate step scale.
    scale: Vec<f64>,
    grad: Vec<f64>,
    f: F,
}

/// Largest relative error over the test directions, or `None` if a
/// perturbed evaluation crossed a kink.
fn check_case<F: Fn(&[f64]) -> Option<f64>>(case: &Case<F>, rng: &mut ChaCha8Rng) -> Option<f64> {
    let n = case.x.len();
    let f0 = (case.f)(&case.x)?;
    let floor = 1e-7 * (1.0 + f0.abs());
    let mut dirs = Vec::with_capacity(RANDOM_DIRECTIONS + 1);
    let g: Vec<f64> = (0..n).map(|i| case.grad[i] * case.scale[i]).collect();
    if g.iter().any(|v| *v != 0.0) {
        dirs.push(g);
    }
    for _ in 0..RANDOM_DIRECTIONS {
        dirs.push((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
    }
    let mut worst = 0.0_f64;
    for d in dirs {
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: Vec<f64> = d.iter().zip(&case.scale).map(|(v, s)| v / norm * s).collect();
        let analytic: f64 = u.iter().zip(&case.grad).map(|(a, b)| a * b).sum();
        let at = |t: f64| -> Vec<f64> { case.x.iter().zip(&u).map(|(x, u)| x + t * u).collect() };
        let fp = (case.f)(&at(STEP))?;
        let fm = (case.f)(&at(-STEP))?;
        let numeric = (fp - fm) / (2.0 * STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Some(worst)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn flat3(v: &[Vec3<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn unflat3(x: &[f64]) -> Vec<Vec3<f64>> {
    x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn dot3(a: &[Vec3<f64>], b: &[Vec3<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p[0] * q[0] + p[1] * q[1] + p[2] * q[2]).sum()
}

fn params_flat(p: &[FaceParameters<f64>]) -> Vec<f64> {
    p.iter()
        .flat_map(|q| q.shape.iter().chain(&q.texture).chain(&q.expression).copied().collect::<Vec<_>>())
        .collect()
}

fn params_unflat(x: &[f64], dims: Dims) -> Vec<FaceParameters<f64>> {
    let n = dims.shape + dims.texture + dims.expression;
    x.chunks(n)
        .map(|c| FaceParameters {
            shape: Array1::from(c[..dims.shape].to_vec()),
            texture: Array1::from(c[dims.shape..dims.shape + dims.texture].to_vec()),
            expression: Array1::from(c[dims.shape + dims.texture..].to_vec()),
        })
        .collect()
}

/// A drawn case: returns the worst error, or `None` to ask for a redraw.
type CaseFn = fn(&mut ChaCha8Rng) -> Result<Option<f64>>;

fn barycentric_case(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let (w, h) = (20, 16);
    let ntri = rng.random_range(2..=6);
    let ndc: Vec<Vec3<f64>> = (0..3 * ntri)
        .map(|_| {
            [
                rng.random_range(-0.95..0.95),
                rng.random_range(-0.95..0.95),
                rng.random_range(-0.9..0.9),
            ]
        })
        .collect();
    let tris: Vec<[u32; 3]> = (0..ntri as u32).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
    let gb = rasterize(&ndc, &tris, w, h)?;
    if gb.covered_pixels() == 0 {
        return Ok(None);
    }
    let cot = unflat3(&gaussian(rng, 3 * w * h));
    let grad = barycentric_vjp(&ndc, &tris, &gb, &cot)?;
    let ids = gb.triangle_id.clone();
    let case = Case {
        x: flat3(&ndc),
        scale: vec![0.05; 9 * ntri],
        grad: flat3(&grad),
        f: |x: &[f64]| {
            let g = rasterize(&unflat3(x), &tris, w, h).ok()?;
            (g.triangle_id == ids).then(|| dot3(&g.barycentrics, &cot))
        },
    };
    Ok(check_case(&case, rng))
}

fn shade_case(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let (w, h) = (6, 5);
    let n = w * h;
    let buffer = |values: Vec<Vec3<f64>>| AttributeBuffer {
        width: w,
        height: h,
        values,
        mask: vec![true; n],
    };
    let pos: Vec<Vec3<f64>> = (0..n)
        .map(|_| {
            [
                rng.random_range(-60.0..60.0),
                rng.random_range(-60.0..60.0),
                rng.random_range(-20.0..40.0),
            ]
        })
        .collect();
    let nrm: Vec<Vec3<f64>> = (0..n)
        .map(|_| [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(0.5..1.5)])
        .collect();
    let dif: Vec<Vec3<f64>> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.05..0.95))).collect();
    let rig = sample_lighting::<f64, _>(rng);
    let camera = Camera {
        eye: [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), 600.0],
        look_at: [0.0; 3],
        up: [0.0, 1.0, 0.0],
        vertical_fov: 0.5,
        near: 10.0,
        far: 2000.0,
        width: w,
        height: h,
    };
    let (pb, nb, db) = (buffer(pos.clone()), buffer(nrm.clone()), buffer(dif.clone()));
    let shaded = phong_shade(&pb, &nb, &db, &rig, &camera, [0.0; 3])?;
    let cot = unflat3(&gaussian(rng, 3 * n));
    let g = shade_vjp(&pb, &nb, &db, &rig, &camera, &shaded, &cot)?;
    let inside = |r: &[Vec3<f64>]| -> Vec<bool> { r.iter().flatten().map(|v| (0.0..=1.0).contains(v)).collect() };
    let pattern = inside(&shaded.radiance);
    let x: Vec<f64> = [flat3(&pos), flat3(&nrm), flat3(&dif)].concat();
    let scale: Vec<f64> = [vec![5.0; 3 * n], vec![0.1; 3 * n], vec![0.05; 3 * n]].concat();
    let grad: Vec<f64> = [flat3(&g.positions), flat3(&g.normals), flat3(&g.diffuse)].concat();
    let case = Case {
        x,
        scale,
        grad,
        f: |x: &[f64]| {
            let (p, rest) = x.split_at(3 * n);
            let (q, d) = rest.split_at(3 * n);
            let s = phong_shade(
                &buffer(unflat3(p)),
                &buffer(unflat3(q)),
                &buffer(unflat3(d)),
                &rig,
                &camera,
                [0.0; 3],
            )
            .ok()?;
            (inside(&s.radiance) == pattern).then(|| dot3(&s.image, &cot))
        },
    };
    Ok(check_case(&case, rng))
}

fn decode_case(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let basis = make_test_basis::<f64>(rng.random(), 60)?;
    let dims = basis.dims();
    let p = sample_parameters::<f64, _>(rng, dims, true);
    let nv = basis.num_vertices;
    let cot = MeshGrad {
        positions: unflat3(&gaussian(rng, 3 * nv)),
        colors: unflat3(&gaussian(rng, 3 * nv)),
    };
    let g = basis.decode_mesh_vjp(&cot)?;
    let case = Case {
        x: params_flat(std::slice::from_ref(&p)),
        scale: vec![1.0; dims.shape + dims.texture + dims.expression],
        grad: params_flat(&[g]),
        f: |x: &[f64]| {
            let q = params_unflat(x, dims).pop()?;
            let m = basis.decode_mesh(&q).ok()?;
            Some(dot3(&m.positions, &cot.positions) + dot3(&m.colors, &cot.colors))
        },
    };
    Ok(check_case(&case, rng))
}

fn decoder_case(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let shape = DecoderShape {
        input: rng.random_range(4..=12),
        hidden1: rng.random_range(6..=16),
        hidden2: rng.random_range(6..=16),
        output: rng.random_range(3..=10),
    };
    let batch = rng.random_range(1..=4);
    let mut w = DecoderWeights::<f64>::init(shape, rng);
    for b in [&mut w.b1, &mut w.b2, &mut w.b3] {
        b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    }
    let input = Array2::from_shape_vec((batch, shape.input), gaussian(rng, batch * shape.input)).expect("shape");
    let cot = Array2::from_shape_vec((batch, shape.output), gaussian(rng, batch * shape.output)).expect("shape");
    let decay = rng.random_range(0.0..1e-2);
    let (_, cache) = decoder_forward_batch(&w, &input)?;
    let pattern = cache.activation_pattern();
    let (gw, gx) = decoder_backward(&w, &cache, &cot, decay)?;
    let np = w.num_parameters();
    let mut x: Vec<f64> = (0..np).map(|i| w.get_flat(i)).collect();
    x.extend(input.iter());
    let mut grad: Vec<f64> = (0..np).map(|i| gw.get_flat(i)).collect();
    grad.extend(gx.iter());
    let case = Case {
        scale: vec![0.1; x.len()],
        x,
        grad,
        f: |x: &[f64]| {
            let mut w2 = DecoderWeights::<f64>::zeros(shape);
            for (i, v) in x[..np].iter().enumerate() {
                w2.set_flat(i, *v);
            }
            let inp = Array2::from_shape_vec((batch, shape.input), x[np..].to_vec()).ok()?;
            let (out, c) = decoder_forward_batch(&w2, &inp).ok()?;
            if c.activation_pattern() != pattern {
                return None;
            }
            let reg: f64 = [&w2.w1, &w2.w2, &w2.w3].iter().map(|m| m.iter().map(|v| v * v).sum::<f64>()).sum();
            Some((&out * &cot).sum() + 0.5 * decay * reg)
        },
    };
    Ok(check_case(&case, rng))
}

fn loss_dims(rng: &mut ChaCha8Rng) -> Dims {
    Dims {
        shape: rng.random_range(1..=8),
        texture: rng.random_range(1..=8),
        expression: rng.random_range(0..=4),
    }
}

fn random_weights(rng: &mut ChaCha8Rng) -> LossWeights<f64> {
    LossWeights {
        w_s: rng.random_range(0.05..1.0),
        w_t: rng.random_range(0.001..1.0),
        ..Default::default()
    }
}

fn draw_batch(rng: &mut ChaCha8Rng, dims: Dims, n: usize) -> Vec<FaceParameters<f64>> {
    (0..n).map(|_| sample_parameters(rng, dims, true)).collect()
}

fn parameter_loss_case(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let dims = loss_dims(rng);
    let b = rng.random_range(1..=5);
    let (pred, truth) = (draw_batch(rng, dims, b), draw_batch(rng, dims, b));
    let w = random_weights(rng);
    let (_, g) = parameter_loss(&pred, &truth, &w)?;
    let neg: Vec<f64> = params_flat(&g).iter().map(|v| -v).collect();
    let x = [params_flat(&pred), params_flat(&truth)].concat();
    let half = x.len() / 2;
    let case = Case {
        scale: vec![1.0; x.len()],
        grad: [params_flat(&g), neg].concat(),
        f: |x: &[f64]| {
            let (p, t) = x.split_at(half);
            parameter_loss(&params_unflat(p, dims), &params_unflat(t, dims), &w).ok().map(|r| r.0)
        },
        x,
    };
    Ok(check_case(&case, rng))
}

fn identity_loss_case(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let n = rng.random_range(2..=32);
    let (a, b) = (Array1::from(gaussian(rng, n)), Array1::from(gaussian(rng, n)));
    let (_, da, db) = identity_loss(a.view(), b.view())?;
    let x: Vec<f64> = a.iter().chain(&b).copied().collect();
    let case = Case {
        scale: vec![0.1; 2 * n],
        grad: da.iter().chain(&db).copied().collect(),
        f: |x: &[f64]| {
            let (p, q) = x.split_at(n);
            identity_loss(Array1::from(p.to_vec()).view(), Array1::from(q.to_vec()).view())
                .ok()
                .map(|r| r.0)
        },
        x,
    };
    Ok(check_case(&case, rng))
}

fn batch_loss_case(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let dims = loss_dims(rng);
    let b = rng.random_range(2..=8);
    let batch = draw_batch(rng, dims, b);
    let (_, g) = batch_distribution_loss(&batch)?;
    let x = params_flat(&batch);
    let case = Case {
        scale: vec![1.0; x.len()],
        grad: params_flat(&g),
        f: |x: &[f64]| batch_distribution_loss(&params_unflat(x, dims)).ok().map(|r| r.0),
        x,
    };
    Ok(check_case(&case, rng))
}

fn loopback_loss_case(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let dims = loss_dims(rng);
    let b = rng.random_range(1..=5);
    let (first, second) = (draw_batch(rng, dims, b), draw_batch(rng, dims, b));
    let w = random_weights(rng);
    let (_, g1, g2) = loopback_loss(&first, &second, &w)?;
    let x = [params_flat(&first), params_flat(&second)].concat();
    let half = x.len() / 2;
    let case = Case {
        scale: vec![1.0; x.len()],
        grad: [params_flat(&g1), params_flat(&g2)].concat(),
        f: |x: &[f64]| {
            let (p, q) = x.split_at(half);
            loopback_loss(&params_unflat(p, dims), &params_unflat(q, dims), &w).ok().map(|r| r.0)
        },
        x,
    };
    Ok(check_case(&case, rng))
}

/// Full render chain: coefficients to mesh to G-buffer to shaded image.
fn render_case(rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    let spec = BasisSpec {
        dims: Dims {
            shape: 6,
            texture: 6,
            expression: 4,
        },
        ..BasisSpec::standard(300)
    };
    let basis = make_basis::<f64>(rng.random(), &spec)?;
    let dims = basis.dims();
    let mut p = sample_parameters::<f64, _>(rng, dims, true);
    p.shape.mapv_inplace(|v| 0.5 * v);
    let camera: Camera<f64> = PoseSampler::default().sample(rng, 24, 24);
    let rig = sample_lighting::<f64, _>(rng);
    let opts = RenderOptions::default();
    let r = render_mesh(&basis.decode_mesh(&p)?, &camera, &rig, &opts)?;
    if r.gbuffer.covered_pixels() == 0 {
        return Ok(None);
    }
    let cot = unflat3(&gaussian(rng, 3 * 24 * 24));
    let g = basis.decode_mesh_vjp(&render_mesh_vjp(&r, &cot)?)?;
    let ids = r.gbuffer.triangle_id.clone();
    let inside = |v: &[Vec3<f64>]| -> Vec<bool> { v.iter().flatten().map(|c| (0.0..=1.0).contains(c)).collect() };
    let pattern = (inside(&r.shaded.radiance), inside(&r.diffuse_buffer.values), r.normal_fallbacks);
    let case = Case {
        x: params_flat(std::slice::from_ref(&p)),
        scale: vec![0.1; dims.shape + dims.texture + dims.expression],
        grad: params_flat(&[g]),
        f: |x: &[f64]| {
            let q = params_unflat(x, dims).pop()?;
            let r2 = render_mesh(&basis.decode_mesh(&q).ok()?, &camera, &rig, &opts).ok()?;
            let pat = (inside(&r2.shaded.radiance), inside(&r2.diffuse_buffer.values), r2.normal_fallbacks);
            (r2.gbuffer.triangle_id == ids && pat == pattern).then(|| dot3(&r2.shaded.image, &cot))
        },
    };
    Ok(check_case(&case, rng))
}

/// `(name, tolerance, case)` for every checked adjoint.
pub const COMPONENTS: [(&str, f64, CaseFn); 9] = [
    ("barycentric_vjp", RENDER_TOLERANCE, barycentric_case),
    ("shade_vjp", RENDER_TOLERANCE, shade_case),
    ("render_chain", RENDER_TOLERANCE, render_case),
    ("decode_mesh_vjp", ANALYTIC_TOLERANCE, decode_case),
    ("decoder_backward", ANALYTIC_TOLERANCE, decoder_case),
    ("parameter_loss", ANALYTIC_TOLERANCE, parameter_loss_case),
    ("identity_loss", ANALYTIC_TOLERANCE, identity_loss_case),
    ("batch_distribution_loss", ANALYTIC_TOLERANCE, batch_loss_case),
    ("loopback_loss", ANALYTIC_TOLERANCE, loopback_loss_case),
];

pub fn check_component(name: &str, tolerance: f64, case: CaseFn, cases: usize, seed: u64, stream: u64) -> Result<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut worst = 0.0_f64;
    let mut redraws = 0;
    for k in 0..cases {
        let mut tries = 0;
        let err = loop {
            if let Some(e) = case(&mut rng)? {
                break e;
            }
            tries += 1;
            if tries > MAX_REDRAWS {
                return Err(Error::Numeric(format!("{name}: case {k} kept crossing kinks after {MAX_REDRAWS} redraws")));
            }
        };
        redraws += tries;
        worst = worst.max(err);
    }
    Ok(ComponentReport {
        name: name.to_string(),
        cases,
        redraws,
        max_rel_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

/// Runs `cases` random cases per component.
pub fn run_gradcheck(cases: usize, seed: u64) -> Result<GradcheckReport> {
    let components = COMPONENTS
        .iter()
        .enumerate()
        .map(|(i, (name, tol, case))| check_component(name, *tol, *case, cases, seed, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { seed, components })
}
