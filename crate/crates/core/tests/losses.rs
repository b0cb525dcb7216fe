use morphrec::losses::{
    batch_distribution_loss, identity_loss, loopback_loss, multiview_identity_loss, parameter_loss, total_loss,
    LossWeights, Reduction, SampleTerms,
};
use morphrec::model::{Dims, FaceParameters};
use ndarray::Array1;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SMALL: Dims = Dims {
    shape: 5,
    texture: 4,
    expression: 2,
};

fn random(rng: &mut ChaCha8Rng, d: Dims) -> FaceParameters<f64> {
    FaceParameters {
        shape: (0..d.shape).map(|_| rng.random_range(-2.0..2.0)).collect(),
        texture: (0..d.texture).map(|_| rng.random_range(-2.0..2.0)).collect(),
        expression: Array1::zeros(d.expression),
    }
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn zeros() -> FaceParameters<f64> {
    FaceParameters::zeros(Dims::STANDARD)
}

#[test]
fn parameter_loss_closed_forms() {
    let w = LossWeights::default();
    assert_eq!(parameter_loss(&[zeros()], &[zeros()], &w).unwrap().0, 0.0);
    for k in [0, 100, 198] {
        let mut p = zeros();
        p.shape[k] = 1.0;
        assert_eq!(parameter_loss(&[p], &[zeros()], &w).unwrap().0, 0.4);
        let mut p = zeros();
        p.texture[k] = -1.0;
        assert_eq!(parameter_loss(&[p], &[zeros()], &w).unwrap().0, 0.002);
    }
}

#[test]
fn identity_loss_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = vector(&mut rng, 128);
    let mut b = vector(&mut rng, 128);
    b = &b - &a.mapv(|v| v * a.dot(&b) / a.dot(&a));
    assert!(identity_loss(a.view(), a.view()).unwrap().0.abs() < 1e-15);
    assert!((identity_loss(a.view(), b.view()).unwrap().0 - 1.0).abs() < 1e-15);
    assert!((identity_loss(a.view(), a.mapv(|v| -v).view()).unwrap().0 - 2.0).abs() < 1e-15);
}

#[test]
fn multiview_cases() {
    let a: Array1<f64> = Array1::from(vec![0.6, 0.8]);
    let b = Array1::from(vec![-0.8, 0.6]);
    assert_eq!(multiview_identity_loss(a.view(), &[a.clone(), a.clone(), a.clone()]).unwrap().0, 0.0);
    assert!((multiview_identity_loss(a.view(), &[a.clone(), b.clone()]).unwrap().0 - 0.5).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let views: Vec<Array1<f64>> = (0..3).map(|_| vector(&mut rng, 16)).collect();
    let photo = vector(&mut rng, 16);
    let l = multiview_identity_loss(photo.view(), &views).unwrap().0;
    let rev: Vec<Array1<f64>> = views.iter().rev().cloned().collect();
    assert!((multiview_identity_loss(photo.view(), &rev).unwrap().0 - l).abs() < 1e-15);
}

#[test]
fn moment_matched_batch_has_zero_loss() {
    let mut plus = FaceParameters::<f64>::zeros(SMALL);
    plus.shape.fill(1.0);
    plus.texture.fill(1.0);
    let mut minus = plus.clone();
    minus.shape.fill(-1.0);
    minus.texture.fill(-1.0);
    let batch = vec![plus.clone(), minus.clone(), plus, minus];
    assert_eq!(batch_distribution_loss(&batch).unwrap().0, 0.0);
    assert_eq!(batch_distribution_loss(&vec![zeros(); 2]).unwrap().0, 398.0);
}

fn moment_oracle(batch: &[FaceParameters<f64>]) -> f64 {
    let b = batch.len() as f64;
    let mut total = 0.0;
    for field in [0, 1] {
        let get = |p: &FaceParameters<f64>| if field == 0 { p.shape.to_vec() } else { p.texture.to_vec() };
        let dim = get(&batch[0]).len();
        for j in 0..dim {
            let mean: f64 = batch.iter().map(|p| get(p)[j]).sum::<f64>() / b;
            let var: f64 = batch.iter().map(|p| (get(p)[j] - mean).powi(2)).sum::<f64>() / b;
            total += mean * mean + (var - 1.0) * (var - 1.0);
        }
    }
    total
}

#[test]
fn batch_loss_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 2..10 {
        let batch: Vec<_> = (0..n).map(|_| random(&mut rng, SMALL)).collect();
        let got = batch_distribution_loss(&batch).unwrap().0;
        assert!(rel(got, moment_oracle(&batch)) < 1e-10);
    }
}

#[test]
fn loopback_is_parameter_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = LossWeights::default();
    let first: Vec<_> = (0..3).map(|_| random(&mut rng, SMALL)).collect();
    let second: Vec<_> = (0..3).map(|_| random(&mut rng, SMALL)).collect();
    let (l, gf, gs) = loopback_loss(&first, &second, &w).unwrap();
    assert_eq!(l, parameter_loss(&second, &first, &w).unwrap().0);
    assert_eq!(loopback_loss(&first, &first, &w).unwrap().0, 0.0);
    for (a, b) in gf.iter().zip(&gs) {
        assert_eq!(a.shape, b.shape.mapv(|v| -v));
        assert_eq!(a.texture, b.texture.mapv(|v| -v));
    }
}

fn fd_check(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
    let h = 1e-5;
    for i in 0..x.len() {
        let (mut up, mut dn) = (x.to_vec(), x.to_vec());
        up[i] += h;
        dn[i] -= h;
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        assert!(rel(analytic[i], fd) < 1e-4, "coordinate {i}: {} vs {fd}", analytic[i]);
    }
}

fn flatten(batch: &[FaceParameters<f64>]) -> Vec<f64> {
    batch.iter().flat_map(|p| p.shape.iter().chain(&p.texture).copied().collect::<Vec<_>>()).collect()
}

fn unflatten(x: &[f64], n: usize) -> Vec<FaceParameters<f64>> {
    let k = SMALL.shape + SMALL.texture;
    (0..n)
        .map(|b| FaceParameters {
            shape: Array1::from(x[b * k..b * k + SMALL.shape].to_vec()),
            texture: Array1::from(x[b * k + SMALL.shape..(b + 1) * k].to_vec()),
            expression: Array1::zeros(SMALL.expression),
        })
        .collect()
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = LossWeights::default();
    for _ in 0..10 {
        let a: Vec<_> = (0..4).map(|_| random(&mut rng, SMALL)).collect();
        let b: Vec<_> = (0..4).map(|_| random(&mut rng, SMALL)).collect();
        let x = flatten(&a);

        let g = flatten(&parameter_loss(&a, &b, &w).unwrap().1);
        fd_check(&|x| parameter_loss(&unflatten(x, 4), &b, &w).unwrap().0, &x, &g);

        let g = flatten(&batch_distribution_loss(&a).unwrap().1);
        fd_check(&|x| batch_distribution_loss(&unflatten(x, 4)).unwrap().0, &x, &g);

        let (_, gf, gs) = loopback_loss(&a, &b, &w).unwrap();
        fd_check(&|x| loopback_loss(&unflatten(x, 4), &b, &w).unwrap().0, &x, &flatten(&gf));
        fd_check(&|y| loopback_loss(&a, &unflatten(y, 4), &w).unwrap().0, &flatten(&b), &flatten(&gs));

        let (g1, g2) = (vector(&mut rng, 12), vector(&mut rng, 12));
        let (_, d1, d2) = identity_loss(g1.view(), g2.view()).unwrap();
        fd_check(&|x| identity_loss(Array1::from(x.to_vec()).view(), g2.view()).unwrap().0, &g1.to_vec(), &d1.to_vec());
        fd_check(&|x| identity_loss(g1.view(), Array1::from(x.to_vec()).view()).unwrap().0, &g2.to_vec(), &d2.to_vec());
    }
}

fn real_sample(rng: &mut ChaCha8Rng) -> SampleTerms<f64> {
    SampleTerms::Real {
        pred: random(rng, SMALL),
        photo_identity: Some(vector(rng, 8)),
        render_identities: (0..3).map(|_| vector(rng, 8)).collect(),
        loopback: Some(random(rng, SMALL)),
    }
}

#[test]
fn total_loss_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = LossWeights::default();
    let syn: Vec<_> = (0..3)
        .map(|_| SampleTerms::Synthetic {
            pred: random(&mut rng, SMALL),
            truth: random(&mut rng, SMALL),
        })
        .collect();
    let r = total_loss(&syn, &w, Reduction::Sum).unwrap();
    assert_eq!(r.total, r.l_param);
    assert_eq!((r.l_id, r.l_batch, r.l_loop), (0.0, 0.0, 0.0));

    let real: Vec<_> = (0..4).map(|_| real_sample(&mut rng)).collect();
    let r = total_loss(&real, &w, Reduction::Sum).unwrap();
    assert_eq!(r.l_param, 0.0);
    assert!((r.total - (r.l_id + 10.0 * r.l_batch + 0.07 * r.l_loop)).abs() < 1e-12);
    let mut oracle_id = 0.0;
    let mut preds = Vec::new();
    for s in &real {
        if let SampleTerms::Real { pred, photo_identity, render_identities, .. } = s {
            oracle_id += multiview_identity_loss(photo_identity.as_ref().unwrap().view(), render_identities).unwrap().0;
            preds.push(pred.clone());
        }
    }
    assert!(rel(r.l_id, oracle_id) < 1e-12);
    assert!(rel(r.l_batch, moment_oracle(&preds)) < 1e-10);

    let mut x = FaceParameters::<f64>::zeros(SMALL);
    x.shape.fill(1.0);
    x.texture.fill(1.0);
    let mut y = x.clone();
    y.shape.fill(-1.0);
    y.texture.fill(-1.0);
    let e = Array1::from(vec![1.0, 0.0]);
    let still = |p: &FaceParameters<f64>| SampleTerms::Real {
        pred: p.clone(),
        photo_identity: Some(e.clone()),
        render_identities: vec![e.clone()],
        loopback: Some(p.clone()),
    };
    let zero = total_loss(&[still(&x), still(&y)], &w, Reduction::Mean).unwrap();
    assert_eq!(zero.total, 0.0);
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = LossWeights::default();
    let mut samples: Vec<_> = (0..3).map(|_| real_sample(&mut rng)).collect();
    samples.push(SampleTerms::Synthetic {
        pred: random(&mut rng, SMALL),
        truth: random(&mut rng, SMALL),
    });
    for reduction in [Reduction::Sum, Reduction::Mean] {
        let r = total_loss(&samples, &w, reduction).unwrap();
        let preds: Vec<_> = samples
            .iter()
            .map(|s| match s {
                SampleTerms::Synthetic { pred, .. } | SampleTerms::Real { pred, .. } => pred.clone(),
            })
            .collect();
        let with = |x: &[f64]| {
            let ps = unflatten(x, preds.len());
            let s: Vec<_> = samples
                .iter()
                .zip(ps)
                .map(|(s, p)| match s.clone() {
                    SampleTerms::Synthetic { truth, .. } => SampleTerms::Synthetic { pred: p, truth },
                    SampleTerms::Real { photo_identity, render_identities, loopback, .. } => {
                        SampleTerms::Real { pred: p, photo_identity, render_identities, loopback }
                    }
                })
                .collect();
            total_loss(&s, &w, reduction).unwrap().total
        };
        let g: Vec<FaceParameters<f64>> = r.grads.iter().map(|g| g.pred.clone()).collect();
        fd_check(&with, &flatten(&preds), &flatten(&g));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_non_negative_and_identity_is_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = LossWeights::default();
        let a: Vec<_> = (0..3).map(|_| random(&mut rng, SMALL)).collect();
        let b: Vec<_> = (0..3).map(|_| random(&mut rng, SMALL)).collect();
        prop_assert!(parameter_loss(&a, &b, &w).unwrap().0 >= 0.0);
        prop_assert!(batch_distribution_loss(&a).unwrap().0 >= 0.0);
        prop_assert!(loopback_loss(&a, &b, &w).unwrap().0 >= 0.0);
        let (g1, g2) = (vector(&mut rng, 6), vector(&mut rng, 6));
        let l = identity_loss(g1.view(), g2.view()).unwrap().0;
        prop_assert!((0.0..=2.0).contains(&l));
    }

    #[test]
    fn batch_loss_symmetries(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<_> = (0..6).map(|_| random(&mut rng, SMALL)).collect();
        let l = batch_distribution_loss(&a).unwrap().0;
        let mut perm = a.clone();
        perm.reverse();
        perm.swap(0, 3);
        let lp = batch_distribution_loss(&perm).unwrap().0;
        prop_assert!((lp - l).abs() <= 1e-12 * l.max(1.0));
        let neg: Vec<_> = a.iter().map(|p| FaceParameters { shape: -&p.shape, texture: -&p.texture, expression: p.expression.clone() }).collect();
        prop_assert!((batch_distribution_loss(&neg).unwrap().0 - l).abs() <= 1e-12 * l.max(1.0));
    }

    #[test]
    fn doubling_a_weight_doubles_its_term(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = LossWeights { w_s: 0.4, w_t: 0.0, w_batch: 10.0, w_loop: 0.07 };
        let a = vec![random(&mut rng, SMALL)];
        let b = vec![random(&mut rng, SMALL)];
        let ls = parameter_loss(&a, &b, &base).unwrap().0;
        let ls2 = parameter_loss(&a, &b, &LossWeights { w_s: 0.8, ..base }).unwrap().0;
        prop_assert_eq!(ls2, 2.0 * ls);
        let tex = LossWeights { w_s: 0.0, w_t: 0.002, ..base };
        let lt = parameter_loss(&a, &b, &tex).unwrap().0;
        let lt2 = parameter_loss(&a, &b, &LossWeights { w_t: 0.004, ..tex }).unwrap().0;
        prop_assert_eq!(lt2, 2.0 * lt);
    }
}
