//! Trainable decoder (two ReLU layers and a linear regression layer) with a
//! hand-written backward pass, and the identity-embedding providers that
//! stand in for a fixed recognition network.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{arg_err, Error, Result};
use crate::model::{Dims, FaceParameters};
use crate::real::{self, lit, Real, Vec3};
use crate::render::Image;

pub const FEATURE_DIM: usize = 1024;
pub const IDENTITY_DIM: usize = 128;
pub const HIDDEN_DIM: usize = 1024;

/// Feature vector for the decoder plus the unit identity vector for losses.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair<T> {
    pub features: Array1<T>,
    pub identity: Array1<T>,
}

impl<T: Real> EmbeddingPair<T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.identity.dot(&self.identity).sqrt();
        if (real::to_f64(n) - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("identity vector has norm {n}, expected 1")));
        }
        Ok(())
    }
}

/// Layer widths of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderShape {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub output: usize,
}

impl DecoderShape {
    pub fn standard(dims: Dims) -> Self {
        DecoderShape {
            input: FEATURE_DIM,
            hidden1: HIDDEN_DIM,
            hidden2: HIDDEN_DIM,
            output: dims.regressed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    pub w3: Array2<T>,
    pub b3: Array1<T>,
}

impl<T: Real> DecoderWeights<T> {
    pub fn zeros(s: DecoderShape) -> Self {
        DecoderWeights {
            w1: Array2::zeros((s.hidden1, s.input)),
            b1: Array1::zeros(s.hidden1),
            w2: Array2::zeros((s.hidden2, s.hidden1)),
            b2: Array1::zeros(s.hidden2),
            w3: Array2::zeros((s.output, s.hidden2)),
            b3: Array1::zeros(s.output),
        }
    }

    /// Fan-in scaled uniform initialisation (He-uniform for the ReLU layers,
    /// LeCun-uniform for the regression layer), zero biases.
    pub fn init<R: Rng + ?Sized>(s: DecoderShape, rng: &mut R) -> Self {
        let mut w = Self::zeros(s);
        let mut fill = |m: &mut Array2<T>, gain: f64| {
            let limit = (gain / m.ncols() as f64).sqrt();
            m.mapv_inplace(|_| lit(rng.random_range(-limit..=limit)));
        };
        fill(&mut w.w1, 6.0);
        fill(&mut w.w2, 6.0);
        fill(&mut w.w3, 3.0);
        w
    }

    pub fn shape(&self) -> DecoderShape {
        DecoderShape {
            input: self.w1.ncols(),
            hidden1: self.w1.nrows(),
            hidden2: self.w2.nrows(),
            output: self.w3.nrows(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// The six parameter tensors as flat slices, in a fixed order.
    pub fn tensors(&self) -> [&[T]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat read access across all tensors in [`tensors`](Self::tensors) order.
    pub fn get_flat(&self, mut i: usize) -> T {
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut i: usize, v: T) {
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn add_assign(&mut self, other: &DecoderWeights<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scaled_add(&mut self, s: T, other: &DecoderWeights<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * *y;
            }
        }
    }

    pub fn dot(&self, other: &DecoderWeights<T>) -> T {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x * *y).sum::<T>())
            .sum()
    }
}

/// Activations cached by the forward pass, one row per batch element.
#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    pub input: Array2<T>,
    pub pre1: Array2<T>,
    pub act1: Array2<T>,
    pub pre2: Array2<T>,
    pub act2: Array2<T>,
}

impl<T: Real> DecoderCache<T> {
    /// Bit pattern of which ReLUs are active, for detecting gate flips.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.pre1
            .iter()
            .chain(self.pre2.iter())
            .map(|v| *v > T::zero())
            .collect()
    }
}

fn relu<T: Real>(v: T) -> T {
    v.max(T::zero())
}

/// Batched forward pass: `input` is `batch x input_dim`, the result
/// `batch x output_dim`.
pub fn decoder_forward_batch<T: Real>(w: &DecoderWeights<T>, input: &Array2<T>) -> Result<(Array2<T>, DecoderCache<T>)> {
    let s = w.shape();
    if input.ncols() != s.input {
        return Err(arg_err!("decoder input width {} != {}", input.ncols(), s.input));
    }
    let pre1 = input.dot(&w.w1.t()) + &w.b1;
    let act1 = pre1.mapv(relu);
    let pre2 = act1.dot(&w.w2.t()) + &w.b2;
    let act2 = pre2.mapv(relu);
    let out = act2.dot(&w.w3.t()) + &w.b3;
    Ok((
        out,
        DecoderCache {
            input: input.clone(),
            pre1,
            act1,
            pre2,
            act2,
        },
    ))
}

/// Single-input forward pass producing face parameters (expression zero).
pub fn decoder_forward<T: Real>(w: &DecoderWeights<T>, features: ArrayView1<T>, dims: Dims) -> Result<FaceParameters<T>> {
    if !features.iter().all(|v| v.is_finite()) {
        return Err(arg_err!("decoder input is not finite"));
    }
    if w.shape().output != dims.regressed() {
        return Err(arg_err!("decoder output {} != regressed dims {}", w.shape().output, dims.regressed()));
    }
    let x = features.to_owned().insert_axis(Axis(0));
    let (out, _) = decoder_forward_batch(w, &x)?;
    FaceParameters::from_regressed(out.row(0), dims)
}

/// Reverse pass for a batch. `cotangent` is `batch x output_dim`; the weight
/// gradient includes the decay term `decay * W` (biases are not decayed).
pub fn decoder_backward<T: Real>(
    w: &DecoderWeights<T>,
    cache: &DecoderCache<T>,
    cotangent: &Array2<T>,
    decay: T,
) -> Result<(DecoderWeights<T>, Array2<T>)> {
    let s = w.shape();
    if cotangent.ncols() != s.output || cotangent.nrows() != cache.input.nrows() {
        return Err(arg_err!("decoder cotangent shape {:?} mismatches batch", cotangent.dim()));
    }
    let g3 = cotangent;
    let mut gw3 = g3.t().dot(&cache.act2);
    let gb3 = g3.sum_axis(Axis(0));
    let mut g2 = g3.dot(&w.w3);
    Zip::from(&mut g2).and(&cache.pre2).for_each(|g, &z| {
        if z <= T::zero() {
            *g = T::zero();
        }
    });
    let mut gw2 = g2.t().dot(&cache.act1);
    let gb2 = g2.sum_axis(Axis(0));
    let mut g1 = g2.dot(&w.w2);
    Zip::from(&mut g1).and(&cache.pre1).for_each(|g, &z| {
        if z <= T::zero() {
            *g = T::zero();
        }
    });
    let mut gw1 = g1.t().dot(&cache.input);
    let gb1 = g1.sum_axis(Axis(0));
    let gx = g1.dot(&w.w1);
    if decay != T::zero() {
        gw1.scaled_add(decay, &w.w1);
        gw2.scaled_add(decay, &w.w2);
        gw3.scaled_add(decay, &w.w3);
    }
    Ok((
        DecoderWeights {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
            w3: gw3,
            b3: gb3,
        },
        gx,
    ))
}

/// Source of embeddings; repeated calls with the same input must agree.
pub trait EmbeddingProvider<T> {
    type Input: ?Sized;
    fn embed(&self, input: &Self::Input) -> Result<EmbeddingPair<T>>;
}

/// Differentiable stand-in for a recognition network.
///
/// The image is box-filtered to a `grid x grid` RGB thumbnail `x`. Features are
/// `A x`; the identity vector is `B (x - mean(x))` normalised to unit length.
/// Both projections are fixed Gaussian matrices drawn from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder<T> {
    pub width: usize,
    pub height: usize,
    pub grid: usize,
    pub seed: u64,
    pub feature_proj: Array2<T>,
    pub identity_proj: Array2<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyEncoderConfig {
    pub width: usize,
    pub height: usize,
    pub grid: usize,
    pub feature_dim: usize,
    pub identity_dim: usize,
    pub seed: u64,
}

impl ToyEncoderConfig {
    pub fn standard(width: usize, height: usize, seed: u64) -> Self {
        ToyEncoderConfig {
            width,
            height,
            grid: 16,
            feature_dim: FEATURE_DIM,
            identity_dim: IDENTITY_DIM,
            seed,
        }
    }
}

/// Intermediate values needed by [`ToyEncoder::vjp`].
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    pub thumbnail: Array1<T>,
    pub identity_raw: Array1<T>,
}

impl<T: Real> ToyEncoder<T> {
    pub fn new(cfg: ToyEncoderConfig) -> Result<Self> {
        if cfg.grid == 0 || !cfg.width.is_multiple_of(cfg.grid) || !cfg.height.is_multiple_of(cfg.grid) {
            return Err(arg_err!(
                "image {}x{} is not divisible into a {}-cell grid",
                cfg.width,
                cfg.height,
                cfg.grid
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = 3 * cfg.grid * cfg.grid;
        let scale = 1.0 / (d as f64).sqrt();
        let mut gauss =
            |rows: usize| Array2::from_shape_simple_fn((rows, d), || lit::<T>(scale * rng.sample::<f64, _>(StandardNormal)));
        let feature_proj = gauss(cfg.feature_dim);
        let identity_proj = gauss(cfg.identity_dim);
        Ok(ToyEncoder {
            width: cfg.width,
            height: cfg.height,
            grid: cfg.grid,
            seed: cfg.seed,
            feature_proj,
            identity_proj,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_proj.nrows()
    }

    fn thumbnail(&self, image: &Image<T>) -> Result<Array1<T>> {
        if image.width != self.width || image.height != self.height {
            return Err(arg_err!(
                "encoder expects {}x{} images, got {}x{}",
                self.width,
                self.height,
                image.width,
                image.height
            ));
        }
        let (bw, bh) = (self.width / self.grid, self.height / self.grid);
        let inv = T::one() / lit((bw * bh) as f64);
        let mut x = Array1::zeros(3 * self.grid * self.grid);
        for row in 0..self.height {
            for col in 0..self.width {
                let cell = (row / bh) * self.grid + col / bw;
                let p = image.get(col, row);
                for c in 0..3 {
                    x[3 * cell + c] += p[c] * inv;
                }
            }
        }
        Ok(x)
    }

    pub fn encode(&self, image: &Image<T>) -> Result<(EmbeddingPair<T>, EncoderCache<T>)> {
        let x = self.thumbnail(image)?;
        let features = self.feature_proj.dot(&x);
        let mean = x.sum() / lit(x.len() as f64);
        let centered = x.mapv(|v| v - mean);
        let identity_raw = self.identity_proj.dot(&centered);
        let norm = identity_raw.dot(&identity_raw).sqrt();
        if !(norm > T::zero()) {
            return Err(Error::Numeric("identity projection of a constant image is zero".into()));
        }
        let identity = identity_raw.mapv(|v| v / norm);
        Ok((
            EmbeddingPair { features, identity },
            EncoderCache {
                thumbnail: x,
                identity_raw,
            },
        ))
    }

    /// Pulls cotangents on features and identity back to image pixels.
    pub fn vjp(
        &self,
        cache: &EncoderCache<T>,
        grad_features: Option<ArrayView1<T>>,
        grad_identity: Option<ArrayView1<T>>,
    ) -> Result<Vec<Vec3<T>>> {
        let mut gx: Array1<T> = Array1::zeros(cache.thumbnail.len());
        if let Some(gf) = grad_features {
            if gf.len() != self.feature_proj.nrows() {
                return Err(arg_err!("feature cotangent length mismatch"));
            }
            gx += &self.feature_proj.t().dot(&gf);
        }
        if let Some(gi) = grad_identity {
            if gi.len() != self.identity_proj.nrows() {
                return Err(arg_err!("identity cotangent length mismatch"));
            }
            let u = &cache.identity_raw;
            let norm = u.dot(u).sqrt();
            let unit = u.mapv(|v| v / norm);
            let radial = unit.dot(&gi);
            let gu = (&gi - &unit.mapv(|v| v * radial)).mapv(|v| v / norm);
            let mut gc = self.identity_proj.t().dot(&gu);
            let mean = gc.sum() / lit(gc.len() as f64);
            gc.mapv_inplace(|v| v - mean);
            gx += &gc;
        }
        let (bw, bh) = (self.width / self.grid, self.height / self.grid);
        let inv = T::one() / lit((bw * bh) as f64);
        let mut out = vec![[T::zero(); 3]; self.width * self.height];
        for row in 0..self.height {
            for col in 0..self.width {
                let cell = (row / bh) * self.grid + col / bw;
                out[row * self.width + col] = [0, 1, 2].map(|c| gx[3 * cell + c] * inv);
            }
        }
        Ok(out)
    }
}

impl<T: Real> EmbeddingProvider<T> for ToyEncoder<T> {
    type Input = Image<T>;

    fn embed(&self, input: &Image<T>) -> Result<EmbeddingPair<T>> {
        self.encode(input).map(|(e, _)| e)
    }
}

const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Writes records in the `EMB1` layout (fixed 1024 + 128 f32 per record).
pub fn write_embeddings<W: Write, T: Real>(w: &mut W, records: &[(String, EmbeddingPair<T>)]) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(format!("embedding write failed: {e}"));
    w.write_all(EMB_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(records.len() as u32).map_err(io)?;
    for (key, pair) in records {
        if pair.features.len() != FEATURE_DIM || pair.identity.len() != IDENTITY_DIM {
            return Err(Error::Format(format!(
                "record {key:?} has {}/{} dims, expected {FEATURE_DIM}/{IDENTITY_DIM}",
                pair.features.len(),
                pair.identity.len()
            )));
        }
        let bytes = key.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("key {key:?} too long")))?;
        w.write_u16::<LittleEndian>(len).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        for v in pair.features.iter().chain(pair.identity.iter()) {
            w.write_f32::<LittleEndian>(real::to_f64(*v) as f32).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_embeddings<R: Read, T: Real>(r: &mut R) -> Result<Vec<(String, EmbeddingPair<T>)>> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated embedding file: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(fmt)?;
    if &magic != EMB_MAGIC {
        return Err(Error::Format(format!("bad embedding magic {magic:?}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>().map_err(fmt)? as usize;
        let mut key = vec![0u8; len];
        r.read_exact(&mut key).map_err(fmt)?;
        let key = String::from_utf8(key).map_err(|e| Error::Format(format!("key is not UTF-8: {e}")))?;
        let mut read = |n: usize| -> Result<Array1<T>> {
            (0..n)
                .map(|_| r.read_f32::<LittleEndian>().map(|v| lit::<T>(v as f64)).map_err(fmt))
                .collect()
        };
        let features = read(FEATURE_DIM)?;
        let identity = read(IDENTITY_DIM)?;
        out.push((key, EmbeddingPair { features, identity }));
    }
    Ok(out)
}

pub fn save_embeddings<T: Real>(path: impl AsRef<Path>, records: &[(String, EmbeddingPair<T>)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write_embeddings(&mut w, records)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_embeddings<T: Real>(path: impl AsRef<Path>) -> Result<Vec<(String, EmbeddingPair<T>)>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(&mut BufReader::new(f))
}

/// Serves precomputed embeddings by record key.
#[derive(Debug, Clone, Default)]
pub struct FileEmbeddingProvider {
    records: BTreeMap<String, EmbeddingPair<f32>>,
}

impl FileEmbeddingProvider {
    /// Loads a manifest of `key path` lines (`#` starts a comment). Paths are
    /// relative to the manifest's directory; the key must exist in that file.
    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut files: BTreeMap<PathBuf, BTreeMap<String, EmbeddingPair<f32>>> = BTreeMap::new();
        let mut records = BTreeMap::new();
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message,
            };
            let mut parts = line.split_whitespace();
            let (Some(key), Some(file), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(parse_err("expected `key path`".into()));
            };
            let file = dir.join(file);
            if !files.contains_key(&file) {
                let loaded = load_embeddings::<f32>(&file)?;
                files.insert(file.clone(), loaded.into_iter().collect());
            }
            let pair = files[&file]
                .get(key)
                .ok_or_else(|| Error::Lookup(format!("key {key:?} not found in {}", file.display())))?;
            pair.validate()?;
            if records.insert(key.to_string(), pair.clone()).is_some() {
                return Err(parse_err(format!("duplicate key {key:?}")));
            }
        }
        Ok(FileEmbeddingProvider { records })
    }

    /// Serves every record of a single embedding file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut records = BTreeMap::new();
        for (k, p) in load_embeddings::<f32>(path)? {
            p.validate()?;
            if records.insert(k.clone(), p).is_some() {
                return Err(Error::Validation(format!("duplicate key {k:?}")));
            }
        }
        Ok(FileEmbeddingProvider { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingPair<f32>)> {
        self.records.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl<T: Real> EmbeddingProvider<T> for FileEmbeddingProvider {
    type Input = str;

    fn embed(&self, key: &str) -> Result<EmbeddingPair<T>> {
        let p = self
            .records
            .get(key)
            .ok_or_else(|| Error::Lookup(format!("no embedding for key {key:?}")))?;
        let cast = |a: &Array1<f32>| a.mapv(|v| lit::<T>(v as f64));
        Ok(EmbeddingPair {
            features: cast(&p.features),
            identity: cast(&p.identity),
        })
    }
}
