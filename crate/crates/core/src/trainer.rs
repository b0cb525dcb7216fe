//! Two-stage training: stage 1 regresses parameters of synthetic renders,
//! stage 2 mixes in "real" photos supervised through multi-view identity,
//! batch-distribution and loopback losses.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Error, Result};
use crate::losses::{total_loss, LossReport, LossWeights, Reduction, SampleTerms};
use crate::model::{sample_parameters, Dims, FaceParameters, MeshGrad, ModelBasis};
use crate::network::{
    decoder_backward, decoder_forward_batch, DecoderShape, DecoderWeights, EmbeddingPair, EncoderCache, ToyEncoder,
    ToyEncoderConfig, FEATURE_DIM, HIDDEN_DIM, IDENTITY_DIM,
};
use crate::raster::Camera;
use crate::real::{self, lit, Real};
use crate::render::{render_mesh, render_mesh_vjp, Image, RenderOptions, Rendered};
use crate::shading::{LightingRig, LightingSampler};

/// Which encoder output feeds the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderInput {
    #[default]
    Features,
    Identity,
}

/// Orbit camera distribution around the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSampler {
    pub yaw_max_deg: f64,
    pub pitch_max_deg: f64,
    pub fov_deg: f64,
    /// Fraction of the frame height spanned by a sphere of `face_radius_mm`.
    pub frame_fraction: f64,
    pub face_radius_mm: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for PoseSampler {
    fn default() -> Self {
        PoseSampler {
            yaw_max_deg: 45.0,
            pitch_max_deg: 15.0,
            fov_deg: 30.0,
            frame_fraction: 0.7,
            face_radius_mm: 100.0,
            near: 100.0,
            far: 2000.0,
        }
    }
}

impl PoseSampler {
    /// Distance at which the face sphere's silhouette covers `frame_fraction`
    /// of the vertical field of view.
    pub fn distance(&self) -> f64 {
        let half = (self.fov_deg.to_radians() / 2.0).tan();
        let angle = (self.frame_fraction * half).atan();
        self.face_radius_mm / angle.sin()
    }

    pub fn camera<T: Real>(&self, yaw_deg: f64, pitch_deg: f64, width: usize, height: usize) -> Camera<T> {
        let (yaw, pitch) = (yaw_deg.to_radians(), pitch_deg.to_radians());
        let d = self.distance();
        let eye = [d * yaw.sin() * pitch.cos(), d * pitch.sin(), d * yaw.cos() * pitch.cos()];
        Camera {
            eye: real::cast_vec3(eye),
            look_at: [T::zero(); 3],
            up: [T::zero(), T::one(), T::zero()],
            vertical_fov: lit(self.fov_deg.to_radians()),
            near: lit(self.near),
            far: lit(self.far),
            width,
            height,
        }
    }

    pub fn sample<T: Real, R: Rng + ?Sized>(&self, rng: &mut R, width: usize, height: usize) -> Camera<T> {
        let yaw = rng.random_range(-self.yaw_max_deg..=self.yaw_max_deg);
        let pitch = rng.random_range(-self.pitch_max_deg..=self.pitch_max_deg);
        self.camera(yaw, pitch, width, height)
    }
}

pub fn sample_pose<T: Real, R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize) -> Camera<T> {
    PoseSampler::default().sample(rng, width, height)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub real_fraction: f64,
    pub views_per_real: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub steps_stage1: u64,
    pub steps_stage2: u64,
    pub seed: u64,
    pub loss_weights: LossWeights<f64>,
    pub reduction: Reduction,
    pub image_width: usize,
    pub image_height: usize,
    pub encoder_seed: u64,
    pub encoder_grid: usize,
    pub feature_dim: usize,
    pub identity_dim: usize,
    pub hidden_dim: usize,
    pub decoder_input: DecoderInput,
    pub pose: PoseSampler,
    pub max_pose_retries: usize,
    pub real_pool_size: usize,
    pub real_pool_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            real_fraction: 0.5,
            views_per_real: 3,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            steps_stage1: 1000,
            steps_stage2: 1000,
            seed: 0,
            loss_weights: LossWeights::default(),
            reduction: Reduction::Sum,
            image_width: 64,
            image_height: 64,
            encoder_seed: 1,
            encoder_grid: 16,
            feature_dim: FEATURE_DIM,
            identity_dim: IDENTITY_DIM,
            hidden_dim: HIDDEN_DIM,
            decoder_input: DecoderInput::Features,
            pose: PoseSampler::default(),
            max_pose_retries: 5,
            real_pool_size: 256,
            real_pool_seed: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let v = |m: String| Err(Error::Validation(m));
        if self.batch_size < 2 {
            return v(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.real_fraction) {
            return v(format!("real_fraction {} outside [0, 1]", self.real_fraction));
        }
        if self.n_real() == 1 {
            return v("real_fraction selects a single real sample; the batch loss needs at least 2".into());
        }
        if self.views_per_real < 1 {
            return v("views_per_real must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return v("optimizer scalars must be lr >= 0, epsilon > 0, weight_decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return v("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.real_pool_size == 0 && self.n_real() > 0 {
            return v("real_pool_size must be positive when real samples are used".into());
        }
        self.loss_weights.validate()
    }

    /// Real samples per stage-2 batch.
    pub fn n_real(&self) -> usize {
        (self.real_fraction * self.batch_size as f64).ceil() as usize
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn encoder_config(&self) -> ToyEncoderConfig {
        ToyEncoderConfig {
            width: self.image_width,
            height: self.image_height,
            grid: self.encoder_grid,
            feature_dim: self.feature_dim,
            identity_dim: self.identity_dim,
            seed: self.encoder_seed,
        }
    }

    pub fn decoder_shape(&self, dims: Dims) -> DecoderShape {
        DecoderShape {
            input: match self.decoder_input {
                DecoderInput::Features => self.feature_dim,
                DecoderInput::Identity => self.identity_dim,
            },
            hidden1: self.hidden_dim,
            hidden2: self.hidden_dim,
            output: dims.regressed(),
        }
    }
}

/// Fixed components shared by every training step.
#[derive(Debug, Clone)]
pub struct Pipeline<T> {
    pub basis: ModelBasis<T>,
    pub encoder: ToyEncoder<T>,
    pub pose: PoseSampler,
    pub lighting: LightingSampler,
    pub render: RenderOptions<T>,
    pub decoder_input: DecoderInput,
    pub width: usize,
    pub height: usize,
    pub max_pose_retries: usize,
}

impl<T: Real> Pipeline<T> {
    pub fn new(basis: ModelBasis<T>, cfg: &TrainConfig) -> Result<Self> {
        basis.validate()?;
        Ok(Pipeline {
            basis,
            encoder: ToyEncoder::new(cfg.encoder_config())?,
            pose: cfg.pose,
            lighting: LightingSampler::default(),
            render: RenderOptions::default(),
            decoder_input: cfg.decoder_input,
            width: cfg.image_width,
            height: cfg.image_height,
            max_pose_retries: cfg.max_pose_retries,
        })
    }

    pub fn dims(&self) -> Dims {
        self.basis.dims()
    }

    pub fn decoder_input(&self, e: &EmbeddingPair<T>) -> Array1<T> {
        match self.decoder_input {
            DecoderInput::Features => e.features.clone(),
            DecoderInput::Identity => e.identity.clone(),
        }
    }

    pub fn sample_view<R: Rng + ?Sized>(&self, rng: &mut R) -> (Camera<T>, LightingRig<T>) {
        let cam = self.pose.sample(rng, self.width, self.height);
        let rig = self.lighting.sample(rng).rig;
        (cam, rig)
    }

    /// Renders `params` in a random pose and lighting, redrawing the pose when
    /// nothing is covered.
    pub fn render_random<R: Rng + ?Sized>(&self, rng: &mut R, params: &FaceParameters<T>) -> Result<Rendered<T>> {
        let mesh = self.basis.decode_mesh(params)?;
        let mut cam = self.pose.sample(rng, self.width, self.height);
        let rig = self.lighting.sample(rng).rig;
        for attempt in 0..=self.max_pose_retries {
            let r = render_mesh(&mesh, &cam, &rig, &self.render)?;
            if r.gbuffer.covered_pixels() > 0 {
                return Ok(r);
            }
            if attempt < self.max_pose_retries {
                cam = self.pose.sample(rng, self.width, self.height);
            }
        }
        Err(Error::Numeric(format!(
            "render covered no pixels after {} pose retries",
            self.max_pose_retries
        )))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample<T> {
    pub image: Image<T>,
    pub truth: FaceParameters<T>,
    pub embedding: EmbeddingPair<T>,
    pub camera: Camera<T>,
    pub rig: LightingRig<T>,
}

pub fn make_synthetic_sample<T: Real, R: Rng + ?Sized>(rng: &mut R, pipeline: &Pipeline<T>) -> Result<SyntheticSample<T>> {
    let truth = sample_parameters(rng, pipeline.dims(), false);
    let r = pipeline.render_random(rng, &truth)?;
    let image = r.image();
    let embedding = pipeline.encoder.encode(&image)?.0;
    Ok(SyntheticSample {
        image,
        truth,
        embedding,
        camera: r.camera,
        rig: r.rig,
    })
}

/// Supplies "real" photographs for stage 2.
pub trait RealSource<T> {
    fn sample_photo(&self, pipeline: &Pipeline<T>, rng: &mut ChaCha8Rng) -> Result<Image<T>>;
}

/// Renders of a fixed pool of identities, drawn from their own seed so the
/// pool is disjoint from the synthetic stream.
#[derive(Debug, Clone)]
pub struct RenderedRealSource<T> {
    pub identities: Vec<FaceParameters<T>>,
}

impl<T: Real> RenderedRealSource<T> {
    pub fn new(seed: u64, count: usize, dims: Dims) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RenderedRealSource {
            identities: (0..count).map(|_| sample_parameters(&mut rng, dims, false)).collect(),
        }
    }
}

impl<T: Real> RealSource<T> for RenderedRealSource<T> {
    fn sample_photo(&self, pipeline: &Pipeline<T>, rng: &mut ChaCha8Rng) -> Result<Image<T>> {
        if self.identities.is_empty() {
            return Err(arg_err!("real source has no identities"));
        }
        let k = rng.random_range(0..self.identities.len());
        Ok(pipeline.render_random(rng, &self.identities[k])?.image())
    }
}

/// A fixed set of photographs, drawn uniformly.
#[derive(Debug, Clone)]
pub struct ImagePoolSource<T> {
    pub images: Vec<Image<T>>,
}

impl<T: Real> RealSource<T> for ImagePoolSource<T> {
    fn sample_photo(&self, pipeline: &Pipeline<T>, rng: &mut ChaCha8Rng) -> Result<Image<T>> {
        if self.images.is_empty() {
            return Err(arg_err!("photo pool is empty"));
        }
        let img = &self.images[rng.random_range(0..self.images.len())];
        if (img.width, img.height) != (pipeline.width, pipeline.height) {
            return Err(arg_err!(
                "photo is {}x{}, pipeline renders {}x{}",
                img.width,
                img.height,
                pipeline.width,
                pipeline.height
            ));
        }
        Ok(img.clone())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticItem<T> {
    pub input: Array1<T>,
    pub truth: FaceParameters<T>,
}

#[derive(Debug, Clone)]
pub struct RealItem<T> {
    pub input: Array1<T>,
    pub photo_identity: Array1<T>,
    pub views: Vec<(Camera<T>, LightingRig<T>)>,
    pub loopback: (Camera<T>, LightingRig<T>),
}

/// Everything random about one step, fixed before the weights are touched.
#[derive(Debug, Clone)]
pub struct BatchPlan<T> {
    pub synthetic: Vec<SyntheticItem<T>>,
    pub real: Vec<RealItem<T>>,
}

pub fn sample_plan<T: Real>(
    rng: &mut ChaCha8Rng,
    pipeline: &Pipeline<T>,
    cfg: &TrainConfig,
    real_source: Option<&dyn RealSource<T>>,
    n_real: usize,
) -> Result<BatchPlan<T>> {
    if n_real > cfg.batch_size {
        return Err(arg_err!("{n_real} real samples exceed batch size {}", cfg.batch_size));
    }
    let mut synthetic = Vec::with_capacity(cfg.batch_size - n_real);
    for _ in 0..cfg.batch_size - n_real {
        let s = make_synthetic_sample(rng, pipeline)?;
        synthetic.push(SyntheticItem {
            input: pipeline.decoder_input(&s.embedding),
            truth: s.truth,
        });
    }
    let mut real = Vec::with_capacity(n_real);
    if n_real > 0 {
        let source = real_source.ok_or_else(|| arg_err!("real samples requested without a real source"))?;
        for _ in 0..n_real {
            let photo = source.sample_photo(pipeline, rng)?;
            let e = pipeline.encoder.encode(&photo)?.0;
            let views = (0..cfg.views_per_real).map(|_| pipeline.sample_view(rng)).collect();
            let loopback = pipeline.sample_view(rng);
            real.push(RealItem {
                input: pipeline.decoder_input(&e),
                photo_identity: e.identity,
                views,
                loopback,
            });
        }
    }
    Ok(BatchPlan { synthetic, real })
}

/// Kink indicators of one evaluation; finite differences are only
/// meaningful between evaluations with equal diagnostics.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Diagnostics {
    pub relu_pattern: Vec<bool>,
    pub triangle_ids: Vec<i32>,
    pub clamp_pattern: Vec<bool>,
}

impl Diagnostics {
    fn record_render<T: Real>(&mut self, r: &Rendered<T>) {
        self.triangle_ids.extend_from_slice(&r.gbuffer.triangle_id);
        for (k, rad) in r.shaded.radiance.iter().enumerate() {
            if !r.shaded.mask[k] {
                continue;
            }
            for c in 0..3 {
                self.clamp_pattern.push(rad[c] < T::zero() || rad[c] > T::one());
            }
            let kd = r.diffuse_buffer.values[k];
            for c in 0..3 {
                self.clamp_pattern.push(kd[c] < T::zero() || kd[c] > T::one());
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchEval<T> {
    pub report: LossReport<T>,
    /// Loss gradient without the weight-decay term.
    pub grads: DecoderWeights<T>,
    pub diagnostics: Diagnostics,
}

fn stack<T: Real>(rows: &[&Array1<T>], width: usize) -> Array2<T> {
    let mut m = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    m
}

fn encode_input<T: Real>(pipeline: &Pipeline<T>, image: &Image<T>) -> Result<(Array1<T>, EncoderCache<T>, EmbeddingPair<T>)> {
    let (e, cache) = pipeline.encoder.encode(image)?;
    Ok((pipeline.decoder_input(&e), cache, e))
}

/// Loss and weight gradient for a fixed plan.
pub fn evaluate_batch<T: Real>(
    weights: &DecoderWeights<T>,
    plan: &BatchPlan<T>,
    pipeline: &Pipeline<T>,
    cfg: &TrainConfig,
) -> Result<BatchEval<T>> {
    let dims = pipeline.dims();
    let shape = weights.shape();
    let n_syn = plan.synthetic.len();
    let inputs: Vec<&Array1<T>> = plan
        .synthetic
        .iter()
        .map(|s| &s.input)
        .chain(plan.real.iter().map(|r| &r.input))
        .collect();
    let x1 = stack(&inputs, shape.input);
    let (out1, cache1) = decoder_forward_batch(weights, &x1)?;
    let mut diagnostics = Diagnostics {
        relu_pattern: cache1.activation_pattern(),
        ..Default::default()
    };
    let p1: Vec<FaceParameters<T>> = out1
        .rows()
        .into_iter()
        .map(|r| FaceParameters::from_regressed(r, dims))
        .collect::<Result<_>>()?;

    // Renders of the first-pass predictions for the real samples.
    let mut view_renders = Vec::with_capacity(plan.real.len());
    let mut view_ids = Vec::with_capacity(plan.real.len());
    let mut loop_renders = Vec::with_capacity(plan.real.len());
    let mut loop_inputs = Vec::with_capacity(plan.real.len());
    for (r, item) in plan.real.iter().enumerate() {
        let mesh = pipeline.basis.decode_mesh(&p1[n_syn + r])?;
        let mut renders = Vec::with_capacity(item.views.len());
        let mut ids = Vec::with_capacity(item.views.len());
        for (cam, rig) in &item.views {
            let rendered = render_mesh(&mesh, cam, rig, &pipeline.render)?;
            diagnostics.record_render(&rendered);
            let (e, cache) = pipeline.encoder.encode(&rendered.image())?;
            ids.push(e.identity);
            renders.push((rendered, cache));
        }
        view_renders.push(renders);
        view_ids.push(ids);
        let rendered = render_mesh(&mesh, &item.loopback.0, &item.loopback.1, &pipeline.render)?;
        diagnostics.record_render(&rendered);
        let (input, cache, _) = encode_input(pipeline, &rendered.image())?;
        loop_inputs.push(input);
        loop_renders.push((rendered, cache));
    }

    let second = if plan.real.is_empty() {
        None
    } else {
        let x2 = stack(&loop_inputs.iter().collect::<Vec<_>>(), shape.input);
        let (out2, cache2) = decoder_forward_batch(weights, &x2)?;
        diagnostics.relu_pattern.extend(cache2.activation_pattern());
        let p2: Vec<FaceParameters<T>> = out2
            .rows()
            .into_iter()
            .map(|r| FaceParameters::from_regressed(r, dims))
            .collect::<Result<_>>()?;
        Some((p2, cache2))
    };

    let mut samples = Vec::with_capacity(p1.len());
    for (i, s) in plan.synthetic.iter().enumerate() {
        samples.push(SampleTerms::Synthetic {
            pred: p1[i].clone(),
            truth: s.truth.clone(),
        });
    }
    for (r, item) in plan.real.iter().enumerate() {
        samples.push(SampleTerms::Real {
            pred: p1[n_syn + r].clone(),
            photo_identity: Some(item.photo_identity.clone()),
            render_identities: view_ids[r].clone(),
            loopback: second.as_ref().map(|(p2, _)| p2[r].clone()),
        });
    }
    let w = LossWeights {
        w_s: lit::<T>(cfg.loss_weights.w_s),
        w_t: lit(cfg.loss_weights.w_t),
        w_batch: lit(cfg.loss_weights.w_batch),
        w_loop: lit(cfg.loss_weights.w_loop),
    };
    let report = total_loss(&samples, &w, cfg.reduction)?;

    let n_vertices = pipeline.basis.num_vertices;
    let mut mesh_grads: Vec<MeshGrad<T>> = Vec::with_capacity(plan.real.len());
    for (r, renders) in view_renders.iter().enumerate() {
        let mut mg = MeshGrad::zeros(n_vertices);
        for ((rendered, cache), g_id) in renders.iter().zip(&report.grads[n_syn + r].render_identities) {
            let g_img = pipeline.encoder.vjp(cache, None, Some(g_id.view()))?;
            mg.accumulate(&render_mesh_vjp(rendered, &g_img)?);
        }
        mesh_grads.push(mg);
    }

    let mut grads = None;
    if let Some((_, cache2)) = &second {
        let mut cot2 = Array2::zeros((plan.real.len(), shape.output));
        for r in 0..plan.real.len() {
            let g = report.grads[n_syn + r].loopback.as_ref().expect("real samples carry loopback gradients");
            cot2.row_mut(r).assign(&g.regressed_vector());
        }
        let (gw2, gx2) = decoder_backward(weights, cache2, &cot2, T::zero())?;
        for (r, (rendered, cache)) in loop_renders.iter().enumerate() {
            let gx = gx2.row(r);
            let g_img = match pipeline.decoder_input {
                DecoderInput::Features => pipeline.encoder.vjp(cache, Some(gx), None)?,
                DecoderInput::Identity => pipeline.encoder.vjp(cache, None, Some(gx))?,
            };
            mesh_grads[r].accumulate(&render_mesh_vjp(rendered, &g_img)?);
        }
        grads = Some(gw2);
    }

    let mut cot1 = Array2::zeros((p1.len(), shape.output));
    for (i, g) in report.grads.iter().enumerate() {
        let mut gp = g.pred.clone();
        if i >= n_syn {
            let through_render = pipeline.basis.decode_mesh_vjp(&mesh_grads[i - n_syn])?;
            gp.shape += &through_render.shape;
            gp.texture += &through_render.texture;
        }
        cot1.row_mut(i).assign(&gp.regressed_vector());
    }
    let (mut gw, _) = decoder_backward(weights, &cache1, &cot1, T::zero())?;
    if let Some(gw2) = grads {
        gw.add_assign(&gw2);
    }
    Ok(BatchEval {
        report,
        grads: gw,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

/// One bias-corrected Adam update of a flat tensor at step `t` (1-based).
/// `decay` adds `weight_decay * w` to the gradient first.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Real>(w: &mut [T], g: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &AdamConfig, decay: bool) {
    let (b1, b2) = (lit::<T>(cfg.beta1), lit::<T>(cfg.beta2));
    let lr = lit::<T>(cfg.learning_rate);
    let eps = lit::<T>(cfg.epsilon);
    let lambda = if decay { lit::<T>(cfg.weight_decay) } else { T::zero() };
    let c1 = T::one() - b1.powi(t as i32);
    let c2 = T::one() - b2.powi(t as i32);
    for i in 0..w.len() {
        let gi = g[i] + lambda * w[i];
        m[i] = b1 * m[i] + (T::one() - b1) * gi;
        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        w[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub weights: DecoderWeights<T>,
    pub m: DecoderWeights<T>,
    pub v: DecoderWeights<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    /// Fresh state: the weight initialisation draws from the training stream.
    pub fn new(cfg: &TrainConfig, dims: Dims) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shape = cfg.decoder_shape(dims);
        let weights = DecoderWeights::init(shape, &mut rng);
        TrainState {
            weights,
            m: DecoderWeights::zeros(shape),
            v: DecoderWeights::zeros(shape),
            step: 0,
            rng,
        }
    }
}

/// Applies one optimizer update; weight matrices are decayed, biases are not.
pub fn optimizer_step<T: Real>(state: &mut TrainState<T>, grads: &DecoderWeights<T>, cfg: &AdamConfig) -> Result<()> {
    if grads.shape() != state.weights.shape() {
        return Err(arg_err!("gradient shape does not match weights"));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient at step {}", state.step)));
    }
    let t = state.step + 1;
    let ws = state.weights.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (k, (((w, g), m), v)) in ws.into_iter().zip(grads.tensors()).zip(ms).zip(vs).enumerate() {
        adam_update(w, g, m, v, t, cfg, k % 2 == 0);
    }
    state.step = t;
    Ok(())
}

/// Loss terms of one step, for the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub l_param: f64,
    pub l_id: f64,
    pub l_batch: f64,
    pub l_loop: f64,
    pub total: f64,
}

impl LogRow {
    pub fn csv_header() -> &'static str {
        LossReport::<f64>::csv_header()
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_param, self.l_id, self.l_batch, self.l_loop, self.total
        )
    }
}

/// Samples a batch with `n_real` real members, evaluates it and updates.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    pipeline: &Pipeline<T>,
    real_source: Option<&dyn RealSource<T>>,
    n_real: usize,
) -> Result<LogRow> {
    let plan = sample_plan(&mut state.rng, pipeline, cfg, real_source, n_real)?;
    let eval = evaluate_batch(&state.weights, &plan, pipeline, cfg)?;
    let r = &eval.report;
    let row = LogRow {
        step: state.step,
        l_param: real::to_f64(r.l_param),
        l_id: real::to_f64(r.l_id),
        l_batch: real::to_f64(r.l_batch),
        l_loop: real::to_f64(r.l_loop),
        total: real::to_f64(r.total),
    };
    if !row.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {}: l_param={} l_id={} l_batch={} l_loop={}",
            row.step, row.l_param, row.l_id, row.l_batch, row.l_loop
        )));
    }
    optimizer_step(state, &eval.grads, &cfg.adam())?;
    Ok(row)
}

/// Runs `steps` synthetic-only steps.
pub fn train_stage1<T: Real>(state: &mut TrainState<T>, cfg: &TrainConfig, pipeline: &Pipeline<T>, steps: u64) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    (0..steps).map(|_| train_step(state, cfg, pipeline, None, 0)).collect()
}

/// Runs `steps` mixed steps with `ceil(real_fraction * B)` real samples each.
pub fn train_stage2<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    pipeline: &Pipeline<T>,
    real_source: &dyn RealSource<T>,
    steps: u64,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let n_real = cfg.n_real();
    (0..steps)
        .map(|_| train_step(state, cfg, pipeline, Some(real_source), n_real))
        .collect()
}

fn predict<T: Real>(weights: &DecoderWeights<T>, inputs: &[Array1<T>], dims: Dims) -> Result<Vec<FaceParameters<T>>> {
    let x = stack(&inputs.iter().collect::<Vec<_>>(), weights.shape().input);
    let (out, _) = decoder_forward_batch(weights, &x)?;
    out.rows().into_iter().map(|r| FaceParameters::from_regressed(r, dims)).collect()
}

/// Mean per-sample parameter loss on `n` synthetic samples drawn from `seed`.
pub fn heldout_parameter_loss<T: Real>(
    weights: &DecoderWeights<T>,
    pipeline: &Pipeline<T>,
    w: &LossWeights<T>,
    seed: u64,
    n: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for _ in 0..n {
        let s = make_synthetic_sample(&mut rng, pipeline)?;
        inputs.push(pipeline.decoder_input(&s.embedding));
        truths.push(s.truth);
    }
    let pred = predict(weights, &inputs, pipeline.dims())?;
    let (l, _) = crate::losses::parameter_loss(&pred, &truths, w)?;
    Ok(real::to_f64(l) / n as f64)
}

/// Mean multi-view identity loss on `n` photos from `source`, with poses and
/// lighting drawn from `seed`.
pub fn heldout_identity_loss<T: Real>(
    weights: &DecoderWeights<T>,
    pipeline: &Pipeline<T>,
    source: &dyn RealSource<T>,
    views: usize,
    seed: u64,
    n: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n {
        let photo = source.sample_photo(pipeline, &mut rng)?;
        let e = pipeline.encoder.encode(&photo)?.0;
        let p = predict(weights, &[pipeline.decoder_input(&e)], pipeline.dims())?.remove(0);
        let mesh = pipeline.basis.decode_mesh(&p)?;
        let mut ids = Vec::with_capacity(views);
        for _ in 0..views {
            let (cam, rig) = pipeline.sample_view(&mut rng);
            let r = render_mesh(&mesh, &cam, &rig, &pipeline.render)?;
            ids.push(pipeline.encoder.encode(&r.image())?.0.identity);
        }
        let (l, _, _) = crate::losses::multiview_identity_loss(e.identity.view(), &ids)?;
        total += real::to_f64(l);
    }
    Ok(total / n as f64)
}

/// Per-dimension mean of predicted shape coefficients over `n` photos.
pub fn probe_shape_mean<T: Real>(
    weights: &DecoderWeights<T>,
    pipeline: &Pipeline<T>,
    source: &dyn RealSource<T>,
    seed: u64,
    n: usize,
) -> Result<Array1<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    for _ in 0..n {
        let photo = source.sample_photo(pipeline, &mut rng)?;
        inputs.push(pipeline.decoder_input(&pipeline.encoder.encode(&photo)?.0));
    }
    let pred = predict(weights, &inputs, pipeline.dims())?;
    let mut mean = Array1::zeros(pipeline.dims().shape);
    for p in &pred {
        mean += &p.shape.mapv(real::to_f64);
    }
    Ok(mean / n as f64)
}

const CKP_MAGIC: &[u8; 4] = b"CKP1";
const CKP_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write, T: Real>(w: &mut W, state: &TrainState<T>) -> std::io::Result<()> {
    w.write_all(CKP_MAGIC)?;
    w.write_u32::<LittleEndian>(CKP_VERSION)?;
    let s = state.weights.shape();
    for d in [s.input, s.hidden1, s.hidden2, s.output] {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    w.write_u64::<LittleEndian>(state.step)?;
    w.write_all(&state.rng.get_seed())?;
    w.write_u64::<LittleEndian>(state.rng.get_stream())?;
    w.write_u128::<LittleEndian>(state.rng.get_word_pos())?;
    for part in [&state.weights, &state.m, &state.v] {
        for t in part.tensors() {
            for v in t {
                w.write_f64::<LittleEndian>(real::to_f64(*v))?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read, T: Real>(r: &mut R) -> Result<TrainState<T>> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(fmt)?;
    if &magic != CKP_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
    if version != CKP_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut d = [0usize; 4];
    for x in &mut d {
        *x = r.read_u64::<LittleEndian>().map_err(fmt)? as usize;
    }
    if d.iter().any(|&x| x == 0 || x > 1 << 16) {
        return Err(Error::Format(format!("implausible checkpoint layer sizes {d:?}")));
    }
    let shape = DecoderShape {
        input: d[0],
        hidden1: d[1],
        hidden2: d[2],
        output: d[3],
    };
    let step = r.read_u64::<LittleEndian>().map_err(fmt)?;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed).map_err(fmt)?;
    let stream = r.read_u64::<LittleEndian>().map_err(fmt)?;
    let word_pos = r.read_u128::<LittleEndian>().map_err(fmt)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let mut parts = [
        DecoderWeights::zeros(shape),
        DecoderWeights::zeros(shape),
        DecoderWeights::zeros(shape),
    ];
    for part in &mut parts {
        for t in part.tensors_mut() {
            for v in t.iter_mut() {
                *v = lit(r.read_f64::<LittleEndian>().map_err(fmt)?);
            }
        }
    }
    let [weights, m, v] = parts;
    if !weights.is_finite() {
        return Err(Error::Format("checkpoint weights are not finite".into()));
    }
    Ok(TrainState {
        weights,
        m,
        v,
        step,
        rng,
    })
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, state: &TrainState<T>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write_checkpoint(&mut w, state)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<TrainState<T>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}
