//! Parameter, identity, batch-distribution and loopback losses, each with
//! exact gradients, and their weighted combination over a mixed batch.

use ndarray::{Array1, ArrayView1};

use crate::error::{arg_err, Result};
use crate::model::FaceParameters;
use crate::real::{lit, Real};

pub const DEFAULT_W_SHAPE: f64 = 0.4;
pub const DEFAULT_W_TEXTURE: f64 = 0.002;
pub const DEFAULT_W_BATCH: f64 = 10.0;
pub const DEFAULT_W_LOOP: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    pub w_s: T,
    pub w_t: T,
    pub w_batch: T,
    pub w_loop: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        LossWeights {
            w_s: lit(DEFAULT_W_SHAPE),
            w_t: lit(DEFAULT_W_TEXTURE),
            w_batch: lit(DEFAULT_W_BATCH),
            w_loop: lit(DEFAULT_W_LOOP),
        }
    }
}

impl<T: Real> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_s", self.w_s), ("w_t", self.w_t), ("w_batch", self.w_batch), ("w_loop", self.w_loop)] {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(crate::Error::Validation(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// How per-sample terms are combined over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

fn check_pairs<T: Real>(a: &[FaceParameters<T>], b: &[FaceParameters<T>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(arg_err!("batch sizes differ: {} vs {}", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape.len() != y.shape.len() || x.texture.len() != y.texture.len() {
            return Err(arg_err!("parameter dimensions differ within batch"));
        }
    }
    Ok(())
}

/// `w_s * sum |s - s'|^2 + w_t * sum |t - t'|^2` and its gradient with respect
/// to `pred` (the gradient with respect to `truth` is the negation).
pub fn parameter_loss<T: Real>(
    pred: &[FaceParameters<T>],
    truth: &[FaceParameters<T>],
    w: &LossWeights<T>,
) -> Result<(T, Vec<FaceParameters<T>>)> {
    check_pairs(pred, truth)?;
    let two = lit::<T>(2.0);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(truth) {
        let ds = &p.shape - &t.shape;
        let dt = &p.texture - &t.texture;
        total += w.w_s * ds.dot(&ds) + w.w_t * dt.dot(&dt);
        grads.push(FaceParameters {
            shape: ds.mapv(|v| two * w.w_s * v),
            texture: dt.mapv(|v| two * w.w_t * v),
            expression: Array1::zeros(p.expression.len()),
        });
    }
    Ok((total, grads))
}

/// `1 - cos(g1, g2)` with gradients for both inputs. Inputs are renormalised.
pub fn identity_loss<T: Real>(g1: ArrayView1<T>, g2: ArrayView1<T>) -> Result<(T, Array1<T>, Array1<T>)> {
    if g1.len() != g2.len() {
        return Err(arg_err!("identity vectors differ in length: {} vs {}", g1.len(), g2.len()));
    }
    let n1 = g1.dot(&g1).sqrt();
    let n2 = g2.dot(&g2).sqrt();
    if !(n1 > T::zero()) || !(n2 > T::zero()) {
        return Err(arg_err!("identity vector has zero norm"));
    }
    let u1 = g1.mapv(|v| v / n1);
    let u2 = g2.mapv(|v| v / n2);
    let c = u1.dot(&u2);
    let d1 = (&u2 - &u1.mapv(|v| v * c)).mapv(|v| -v / n1);
    let d2 = (&u1 - &u2.mapv(|v| v * c)).mapv(|v| -v / n2);
    Ok((T::one() - c, d1, d2))
}

/// Mean identity loss between one photo embedding and several render
/// embeddings. Returns the gradients for the photo and for each render.
pub fn multiview_identity_loss<T: Real>(
    photo: ArrayView1<T>,
    renders: &[Array1<T>],
) -> Result<(T, Array1<T>, Vec<Array1<T>>)> {
    if renders.is_empty() {
        return Err(arg_err!("multi-view identity loss needs at least one view"));
    }
    let k = lit::<T>(renders.len() as f64);
    let mut total = T::zero();
    let mut g_photo = Array1::zeros(photo.len());
    let mut g_views = Vec::with_capacity(renders.len());
    for r in renders {
        let (l, gp, gr) = identity_loss(photo, r.view())?;
        total += l;
        g_photo += &gp.mapv(|v| v / k);
        g_views.push(gr.mapv(|v| v / k));
    }
    Ok((total / k, g_photo, g_views))
}

fn moment_term<T: Real>(cols: &[&Array1<T>]) -> (T, Vec<Array1<T>>) {
    let b = lit::<T>(cols.len() as f64);
    let dim = cols[0].len();
    let mut mean = Array1::<T>::zeros(dim);
    for c in cols {
        mean += *c;
    }
    mean.mapv_inplace(|v| v / b);
    let mut var = Array1::<T>::zeros(dim);
    for c in cols {
        let d = *c - &mean;
        var += &(&d * &d);
    }
    var.mapv_inplace(|v| v / b);
    let mut loss = mean.dot(&mean);
    for v in var.iter() {
        loss += (*v - T::one()) * (*v - T::one());
    }
    let two = lit::<T>(2.0);
    let grads = cols
        .iter()
        .map(|c| {
            let mut g = Array1::zeros(dim);
            for j in 0..dim {
                g[j] = two * mean[j] / b + two * (var[j] - T::one()) * two * (c[j] - mean[j]) / b;
            }
            g
        })
        .collect();
    (loss, grads)
}

/// `|mean s|^2 + |var s - 1|^2 + |mean t|^2 + |var t - 1|^2` with population
/// variance over the batch, and its gradient per batch member.
pub fn batch_distribution_loss<T: Real>(batch: &[FaceParameters<T>]) -> Result<(T, Vec<FaceParameters<T>>)> {
    if batch.len() < 2 {
        return Err(arg_err!("batch distribution loss needs at least 2 samples, got {}", batch.len()));
    }
    let d = batch[0].dims();
    if batch.iter().any(|p| p.shape.len() != d.shape || p.texture.len() != d.texture) {
        return Err(arg_err!("parameter dimensions differ within batch"));
    }
    let shapes: Vec<&Array1<T>> = batch.iter().map(|p| &p.shape).collect();
    let textures: Vec<&Array1<T>> = batch.iter().map(|p| &p.texture).collect();
    let (ls, gs) = moment_term(&shapes);
    let (lt, gt) = moment_term(&textures);
    let grads = gs
        .into_iter()
        .zip(gt)
        .zip(batch)
        .map(|((shape, texture), p)| FaceParameters {
            shape,
            texture,
            expression: Array1::zeros(p.expression.len()),
        })
        .collect();
    Ok((ls + lt, grads))
}

/// Parameter loss between the second and first pass, with gradients for both.
pub fn loopback_loss<T: Real>(
    first: &[FaceParameters<T>],
    second: &[FaceParameters<T>],
    w: &LossWeights<T>,
) -> Result<(T, Vec<FaceParameters<T>>, Vec<FaceParameters<T>>)> {
    let (l, g_second) = parameter_loss(second, first, w)?;
    let g_first = g_second
        .iter()
        .map(|g| FaceParameters {
            shape: g.shape.mapv(|v| -v),
            texture: g.texture.mapv(|v| -v),
            expression: g.expression.mapv(|v| -v),
        })
        .collect();
    Ok((l, g_first, g_second))
}

/// Loss inputs for one batch member.
#[derive(Debug, Clone)]
pub enum SampleTerms<T> {
    Synthetic {
        pred: FaceParameters<T>,
        truth: FaceParameters<T>,
    },
    Real {
        pred: FaceParameters<T>,
        photo_identity: Option<Array1<T>>,
        render_identities: Vec<Array1<T>>,
        loopback: Option<FaceParameters<T>>,
    },
}

/// Gradients for one batch member, mirroring [`SampleTerms`].
#[derive(Debug, Clone)]
pub struct SampleGrad<T> {
    pub pred: FaceParameters<T>,
    pub render_identities: Vec<Array1<T>>,
    pub loopback: Option<FaceParameters<T>>,
}

#[derive(Debug, Clone)]
pub struct LossReport<T> {
    pub l_param: T,
    pub l_id: T,
    pub l_batch: T,
    pub l_loop: T,
    pub total: T,
    pub grads: Vec<SampleGrad<T>>,
}

impl<T: Real> LossReport<T> {
    pub fn csv_header() -> &'static str {
        "step,l_param,l_id,l_batch,l_loop,total"
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!("{step},{},{},{},{},{}", self.l_param, self.l_id, self.l_batch, self.l_loop, self.total)
    }
}

/// Combines the terms over a mixed batch: the parameter loss over synthetic
/// members, identity, batch and loopback losses over real members.
pub fn total_loss<T: Real>(samples: &[SampleTerms<T>], w: &LossWeights<T>, reduction: Reduction) -> Result<LossReport<T>> {
    w.validate()?;
    let n_syn = samples.iter().filter(|s| matches!(s, SampleTerms::Synthetic { .. })).count();
    let n_real = samples.len() - n_syn;
    let scale = |n: usize| match reduction {
        Reduction::Sum => T::one(),
        Reduction::Mean => T::one() / lit(n.max(1) as f64),
    };
    let (syn_scale, real_scale) = (scale(n_syn), scale(n_real));

    let mut l_param = T::zero();
    let mut l_id = T::zero();
    let mut l_loop = T::zero();
    let mut grads = Vec::with_capacity(samples.len());
    let mut real_preds = Vec::with_capacity(n_real);
    let mut real_slots = Vec::with_capacity(n_real);
    for (i, s) in samples.iter().enumerate() {
        match s {
            SampleTerms::Synthetic { pred, truth } => {
                let (l, mut g) = parameter_loss(std::slice::from_ref(pred), std::slice::from_ref(truth), w)?;
                l_param += l * syn_scale;
                let mut g = g.pop().expect("one sample");
                g.shape.mapv_inplace(|v| v * syn_scale);
                g.texture.mapv_inplace(|v| v * syn_scale);
                grads.push(SampleGrad {
                    pred: g,
                    render_identities: Vec::new(),
                    loopback: None,
                });
            }
            SampleTerms::Real {
                pred,
                photo_identity,
                render_identities,
                loopback,
            } => {
                let photo = photo_identity
                    .as_ref()
                    .ok_or_else(|| arg_err!("real sample {i} has no photo identity embedding"))?;
                if render_identities.is_empty() {
                    return Err(arg_err!("real sample {i} has no render identity embeddings"));
                }
                let second = loopback
                    .as_ref()
                    .ok_or_else(|| arg_err!("real sample {i} has no loopback parameters"))?;
                let (lid, _, g_views) = multiview_identity_loss(photo.view(), render_identities)?;
                l_id += lid * real_scale;
                let (ll, mut g_first, mut g_second) =
                    loopback_loss(std::slice::from_ref(pred), std::slice::from_ref(second), w)?;
                l_loop += ll * real_scale;
                let k = w.w_loop * real_scale;
                let mut g_pred = g_first.pop().expect("one sample");
                g_pred.shape.mapv_inplace(|v| v * k);
                g_pred.texture.mapv_inplace(|v| v * k);
                let mut g_loop = g_second.pop().expect("one sample");
                g_loop.shape.mapv_inplace(|v| v * k);
                g_loop.texture.mapv_inplace(|v| v * k);
                grads.push(SampleGrad {
                    pred: g_pred,
                    render_identities: g_views.into_iter().map(|g| g.mapv(|v| v * real_scale)).collect(),
                    loopback: Some(g_loop),
                });
                real_preds.push(pred.clone());
                real_slots.push(i);
            }
        }
    }

    let mut l_batch = T::zero();
    if n_real > 0 {
        let (lb, gb) = batch_distribution_loss(&real_preds)?;
        l_batch = lb;
        for (slot, g) in real_slots.into_iter().zip(gb) {
            let p = &mut grads[slot].pred;
            p.shape.scaled_add(w.w_batch, &g.shape);
            p.texture.scaled_add(w.w_batch, &g.texture);
        }
    }
    let total = l_param + l_id + w.w_batch * l_batch + w.w_loop * l_loop;
    Ok(LossReport {
        l_param,
        l_id,
        l_batch,
        l_loop,
        total,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;

    fn zeros() -> FaceParameters<f64> {
        FaceParameters::zeros(Dims::STANDARD)
    }

    #[test]
    fn closed_forms() {
        let w = LossWeights::default();
        let mut p = zeros();
        p.shape[7] = 1.0;
        assert_eq!(parameter_loss(&[p], &[zeros()], &w).unwrap().0, 0.4);
        let mut p = zeros();
        p.texture[0] = 1.0;
        assert_eq!(parameter_loss(&[p], &[zeros()], &w).unwrap().0, 0.002);
        assert_eq!(batch_distribution_loss(&[zeros(), zeros(), zeros()]).unwrap().0, 398.0);
    }

    #[test]
    fn identity_endpoints() {
        let a = Array1::from(vec![1.0, 0.0]);
        let b = Array1::from(vec![0.0, 1.0]);
        assert_eq!(identity_loss(a.view(), a.view()).unwrap().0, 0.0);
        assert_eq!(identity_loss(a.view(), b.view()).unwrap().0, 1.0);
        assert_eq!(identity_loss(a.view(), a.mapv(|v: f64| -v).view()).unwrap().0, 2.0);
        assert!(identity_loss(a.view(), Array1::zeros(2).view()).is_err());
        let (l, _, _) = multiview_identity_loss(a.view(), &[a.clone(), b.clone()]).unwrap();
        assert_eq!(l, 0.5);
        assert!(multiview_identity_loss::<f64>(a.view(), &[]).is_err());
    }

    #[test]
    fn batch_errors() {
        assert!(batch_distribution_loss(&[zeros()]).is_err());
        assert!(parameter_loss(&[zeros()], &[], &LossWeights::default()).is_err());
        let s = SampleTerms::Real {
            pred: zeros(),
            photo_identity: None,
            render_identities: vec![],
            loopback: None,
        };
        assert!(total_loss(&[s], &LossWeights::default(), Reduction::Sum).is_err());
    }
}
