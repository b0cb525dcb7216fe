//! Surface distance, score-distribution distance, embedding averaging and
//! retrieval recall.

use ndarray::{Array1, ArrayView1};

use crate::error::{arg_err, Error, Result};
use crate::eval::nn::PointGrid;
use crate::model::{compute_vertex_normals, Mesh};
use crate::network::EmbeddingPair;
use crate::real::{self, lit, Real, Vec3};

/// Multiple of the median nearest distance beyond which a point is taken to
/// lie outside the region where the two surfaces overlap.
pub const OVERLAP_MEDIAN_FACTOR: f64 = 5.0;

fn normals_of<T: Real>(m: &Mesh<T>) -> Vec<Vec3<T>> {
    match &m.normals {
        Some(n) => n.clone(),
        None => compute_vertex_normals(&m.positions, &m.triangles).normals,
    }
}

/// Mean point-to-plane distance from `a`'s vertices to `b`, over the vertices
/// whose nearest distance is within the overlap threshold.
pub fn one_sided_point_to_plane<T: Real>(a: &Mesh<T>, b: &Mesh<T>) -> Result<T> {
    if a.positions.is_empty() || b.positions.is_empty() {
        return Err(arg_err!("point-to-plane distance needs non-empty meshes"));
    }
    let nb = normals_of(b);
    let grid = PointGrid::new(&b.positions)?;
    let matches: Vec<(usize, T)> = a.positions.iter().map(|p| grid.nearest(*p)).collect();
    let mut d: Vec<f64> = matches.iter().map(|m| real::to_f64(m.1).sqrt()).collect();
    d.sort_by(f64::total_cmp);
    let median = d[d.len() / 2];
    let thresh = OVERLAP_MEDIAN_FACTOR * median;
    let mut sum = T::zero();
    let mut count = 0usize;
    for (p, (j, d2)) in a.positions.iter().zip(&matches) {
        if real::to_f64(*d2).sqrt() <= thresh {
            sum += real::dot(real::sub(*p, b.positions[*j]), nb[*j]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Validation("meshes have no overlapping region".into()));
    }
    Ok(sum / lit(count as f64))
}

/// Average of the two one-sided distances; exactly symmetric in its inputs.
pub fn symmetric_point_to_plane<T: Real>(a: &Mesh<T>, b: &Mesh<T>) -> Result<T> {
    let ab = one_sided_point_to_plane(a, b)?;
    let ba = one_sided_point_to_plane(b, a)?;
    Ok((ab + ba) / lit(2.0))
}

/// Sorted sample of cosine scores in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram1D {
    values: Vec<f64>,
}

impl Histogram1D {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(arg_err!("histogram needs at least one sample"));
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("score {v} outside [-1, 1]")));
        }
        values.sort_by(f64::total_cmp);
        Ok(Histogram1D { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Earth mover's distance between two equal-weight samples on the line:
/// the integral of the absolute difference of their empirical CDFs.
pub fn emd_samples(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(arg_err!("EMD needs non-empty samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(arg_err!("EMD samples must be finite"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (m, n) = (a.len() as i64, b.len() as i64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut x = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        // CDF difference on [x, next) as an exact integer ratio.
        let diff = (i as i64 * n - j as i64 * m).unsigned_abs() as f64 / (m * n) as f64;
        total += diff * (next - x);
        x = next;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    Ok(total)
}

pub fn emd_1d(h1: &Histogram1D, h2: &Histogram1D) -> f64 {
    emd_samples(&h1.values, &h2.values).expect("histograms are non-empty and finite")
}

/// Cosine of the angle between two vectors; errors on a zero vector.
pub fn cosine<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(arg_err!("vectors differ in length: {} vs {}", a.len(), b.len()));
    }
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if !(na > T::zero()) || !(nb > T::zero()) {
        return Err(arg_err!("cosine of a zero vector"));
    }
    Ok((a.dot(&b) / (na * nb)).max(-T::one()).min(T::one()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityStats {
    pub histogram: Histogram1D,
    pub mean: f64,
}

/// Cosine per pair, the sorted scores and their arithmetic mean.
pub fn similarity_stats<T: Real>(pairs: &[(Array1<T>, Array1<T>)]) -> Result<SimilarityStats> {
    let scores = pairs
        .iter()
        .map(|(a, b)| cosine(a.view(), b.view()).map(real::to_f64))
        .collect::<Result<Vec<f64>>>()?;
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    Ok(SimilarityStats {
        histogram: Histogram1D::new(scores)?,
        mean,
    })
}

/// Mean features and renormalised mean identity over the frames of a video.
pub fn video_average_embeddings<T: Real>(frames: &[EmbeddingPair<T>]) -> Result<EmbeddingPair<T>> {
    let first = frames.first().ok_or_else(|| arg_err!("no frames to average"))?;
    let k = lit::<T>(frames.len() as f64);
    let mut features = Array1::zeros(first.features.len());
    let mut identity = Array1::zeros(first.identity.len());
    for f in frames {
        if f.features.len() != features.len() || f.identity.len() != identity.len() {
            return Err(arg_err!("frame embeddings differ in length"));
        }
        features += &f.features;
        identity += &f.identity;
    }
    features.mapv_inplace(|v| v / k);
    identity.mapv_inplace(|v| v / k);
    let n = identity.dot(&identity).sqrt();
    if !(n > lit(1e-12)) {
        return Err(Error::Numeric("mean identity vector has zero norm".into()));
    }
    identity.mapv_inplace(|v| v / n);
    Ok(EmbeddingPair { features, identity })
}

/// Arithmetic mean of per-frame results.
pub fn video_average_results(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(arg_err!("no frame results to average"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// An embedding tagged with its record key and identity label.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyedEmbedding<T> {
    pub key: String,
    pub identity: String,
    pub vector: Array1<T>,
}

impl<T> KeyedEmbedding<T> {
    /// Identity taken from the key prefix before the first `/`.
    pub fn from_key(key: impl Into<String>, vector: Array1<T>) -> Self {
        let key = key.into();
        let identity = key.split('/').next().unwrap_or("").to_string();
        KeyedEmbedding { key, identity, vector }
    }
}

/// For each render, photos ranked by descending cosine (ties by key); the
/// recall at `k` is the fraction of renders with a same-identity photo in
/// the top `k`.
pub fn clustering_recall<T: Real>(
    renders: &[KeyedEmbedding<T>],
    photos: &[KeyedEmbedding<T>],
    ks: &[usize],
) -> Result<Vec<f64>> {
    if renders.is_empty() || photos.is_empty() {
        return Err(arg_err!("recall needs non-empty render and photo sets"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(arg_err!("recall k values must be positive"));
    }
    let mut order: Vec<usize> = (0..photos.len()).collect();
    order.sort_by(|&a, &b| photos[a].key.cmp(&photos[b].key));
    let mut hits = vec![0usize; ks.len()];
    for r in renders {
        if !photos.iter().any(|p| p.identity == r.identity) {
            return Err(arg_err!("no photo of identity {:?} (render {:?})", r.identity, r.key));
        }
        let mut scored: Vec<(T, usize)> = order
            .iter()
            .map(|&i| cosine(r.vector.view(), photos[i].vector.view()).map(|c| (c, i)))
            .collect::<Result<_>>()?;
        // Stable sort keeps key order among equal scores.
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let first_hit = scored.iter().position(|(_, i)| photos[*i].identity == r.identity);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first_hit.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / renders.len() as f64).collect())
}
