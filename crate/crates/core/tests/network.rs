use morphrec::model::{make_test_basis, sample_parameters, Dims, FaceParameters};
use morphrec::network::{
    decoder_backward, decoder_forward, decoder_forward_batch, load_embeddings, save_embeddings, DecoderShape,
    DecoderWeights, EmbeddingPair, EmbeddingProvider, FileEmbeddingProvider, ToyEncoder, ToyEncoderConfig, FEATURE_DIM,
    IDENTITY_DIM,
};
use morphrec::render::{render_mesh, Image, RenderOptions};
use morphrec::shading::LightingRig;
use morphrec::trainer::PoseSampler;
use morphrec::Error;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SMALL: DecoderShape = DecoderShape {
    input: 8,
    hidden1: 8,
    hidden2: 8,
    output: 6,
};

fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn random_weights(rng: &mut ChaCha8Rng, s: DecoderShape) -> DecoderWeights<f64> {
    let mut w = DecoderWeights::init(s, rng);
    for b in [&mut w.b1, &mut w.b2, &mut w.b3] {
        b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    }
    w
}

fn relu_oracle(m: &Array2<f64>, b: &Array1<f64>, x: &[f64], relu: bool) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| {
            let mut s = b[i];
            for (j, xj) in x.iter().enumerate() {
                s += m[[i, j]] * xj;
            }
            if relu {
                s.max(0.0)
            } else {
                s
            }
        })
        .collect()
}

#[test]
fn zero_weights_give_zero_parameters() {
    let dims = Dims {
        shape: 3,
        texture: 3,
        expression: 2,
    };
    let w = DecoderWeights::<f64>::zeros(SMALL);
    let p = decoder_forward(&w, Array1::from_elem(8, 0.7).view(), dims).unwrap();
    assert_eq!(p, FaceParameters::zeros(dims));
}

#[test]
fn zero_input_routes_biases() {
    let dims = Dims {
        shape: 3,
        texture: 3,
        expression: 0,
    };
    let mut w = DecoderWeights::<f64>::zeros(SMALL);
    for i in 0..8 {
        w.w2[[i, i]] = 1.0;
    }
    for i in 0..6 {
        w.w3[[i, i]] = 1.0;
    }
    w.b1.fill(0.5);
    w.b2 = Array1::from_vec(vec![0.1, -0.2, 0.3, -0.4, 0.5, -0.6, 0.7, -0.8]);
    w.b3 = Array1::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let p = decoder_forward(&w, Array1::zeros(8).view(), dims).unwrap();
    // relu(b2 + I * relu(b1)) with b1 = 0.5 passes through W2 = I.
    let h2: Vec<f64> = w.b2.iter().map(|b| (b + 0.5f64).max(0.0)).collect();
    let want: Vec<f64> = (0..6).map(|i| w.b3[i] + h2[i]).collect();
    assert_eq!(p.regressed_vector().to_vec(), want);
}

#[test]
fn forward_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = DecoderShape {
        input: 40,
        hidden1: 32,
        hidden2: 24,
        output: 10,
    };
    let w = random_weights(&mut rng, s);
    let x = randn(&mut rng, (5, 40));
    let (out, _) = decoder_forward_batch(&w, &x).unwrap();
    for r in 0..5 {
        let xr = x.row(r).to_vec();
        let h1 = relu_oracle(&w.w1, &w.b1, &xr, true);
        let h2 = relu_oracle(&w.w2, &w.b2, &h1, true);
        let o = relu_oracle(&w.w3, &w.b3, &h2, false);
        for (a, b) in out.row(r).iter().zip(&o) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}

#[test]
fn zero_cotangent_without_decay_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random_weights(&mut rng, SMALL);
    let (_, cache) = decoder_forward_batch(&w, &randn(&mut rng, (3, 8))).unwrap();
    let (g, gx) = decoder_backward(&w, &cache, &Array2::zeros((3, 6)), 0.0).unwrap();
    assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
    assert!(gx.iter().all(|v| *v == 0.0));
}

#[test]
fn decay_only_gradient_is_lambda_w() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = random_weights(&mut rng, SMALL);
    let (_, cache) = decoder_forward_batch(&w, &randn(&mut rng, (2, 8))).unwrap();
    let (g, _) = decoder_backward(&w, &cache, &Array2::zeros((2, 6)), 1e-4).unwrap();
    assert_eq!(g.w1, w.w1.mapv(|v| 1e-4 * v));
    assert_eq!(g.w2, w.w2.mapv(|v| 1e-4 * v));
    assert_eq!(g.w3, w.w3.mapv(|v| 1e-4 * v));
    assert!(g.b2.iter().all(|v| *v == 0.0));
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = random_weights(&mut rng, SMALL);
    let x = randn(&mut rng, (3, 8));
    let cot = randn(&mut rng, (3, 6));
    let decay = 1e-3;
    let loss = |w: &DecoderWeights<f64>, x: &Array2<f64>| {
        let (o, _) = decoder_forward_batch(w, x).unwrap();
        let sq: f64 = [&w.w1, &w.w2, &w.w3].iter().map(|m| m.iter().map(|v| v * v).sum::<f64>()).sum();
        (&o * &cot).sum() + 0.5 * decay * sq
    };
    let (_, cache) = decoder_forward_batch(&w, &x).unwrap();
    let (g, gx) = decoder_backward(&w, &cache, &cot, decay).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..w.num_parameters() {
        let (mut up, mut dn) = (w.clone(), w.clone());
        up.set_flat(i, w.get_flat(i) + h);
        dn.set_flat(i, w.get_flat(i) - h);
        let fd = (loss(&up, &x) - loss(&dn, &x)) / (2.0 * h);
        let a = g.get_flat(i);
        let scale = a.abs().max(fd.abs());
        if scale > 1e-8 {
            worst = worst.max((a - fd).abs() / scale);
        }
    }
    for r in 0..3 {
        for c in 0..8 {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[[r, c]] += h;
            dn[[r, c]] -= h;
            let fd = (loss(&w, &up) - loss(&w, &dn)) / (2.0 * h);
            let a = gx[[r, c]];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn backward_passes_adjoint_test() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = random_weights(&mut rng, SMALL);
    let x = randn(&mut rng, (1, 8));
    let (o0, cache) = decoder_forward_batch(&w, &x).unwrap();
    let pattern = cache.activation_pattern();
    for _ in 0..20 {
        let u = randn(&mut rng, (1, 8)).mapv(|v| 1e-4 * v);
        let v = randn(&mut rng, (1, 6));
        let (o1, c1) = decoder_forward_batch(&w, &(&x + &u)).unwrap();
        // Piecewise linear: within one activation region J u is exact.
        if c1.activation_pattern() != pattern {
            continue;
        }
        let ju = &o1 - &o0;
        let (_, jtv) = decoder_backward(&w, &cache, &v, 0.0).unwrap();
        let lhs = (&ju * &v).sum();
        let rhs = (&u * &jtv).sum();
        assert!((lhs - rhs).abs() <= 1e-7 * lhs.abs().max(1e-4), "{lhs} vs {rhs}");
    }
}

#[test]
fn superposition_within_an_activation_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = random_weights(&mut rng, SMALL);
    let x = randn(&mut rng, (1, 8));
    let (o0, c0) = decoder_forward_batch(&w, &x).unwrap();
    let mut checked = 0;
    for _ in 0..200 {
        let a = randn(&mut rng, (1, 8)).mapv(|v| 1e-3 * v);
        let b = randn(&mut rng, (1, 8)).mapv(|v| 1e-3 * v);
        let run = |d: &Array2<f64>| decoder_forward_batch(&w, &(&x + d)).unwrap();
        let ((oa, ca), (ob, cb), (oab, cab)) = (run(&a), run(&b), run(&(&a + &b)));
        let p = c0.activation_pattern();
        if ca.activation_pattern() != p || cb.activation_pattern() != p || cab.activation_pattern() != p {
            continue;
        }
        let want = &oa + &ob - &o0;
        for (g, w) in oab.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-9);
        }
        checked += 1;
    }
    assert!(checked > 50);
}

fn encoder(w: usize, seed: u64) -> ToyEncoder<f64> {
    ToyEncoder::new(ToyEncoderConfig::standard(w, w, seed)).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, w: usize) -> Image<f64> {
    Image {
        width: w,
        height: w,
        pixels: (0..w * w).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect(),
    }
}

#[test]
fn encoder_is_deterministic_with_unit_identity() {
    let enc = encoder(32, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let img = random_image(&mut rng, 32);
        let a = enc.embed(&img).unwrap();
        assert_eq!(a, enc.embed(&img).unwrap());
        assert_eq!(a, encoder(32, 1).embed(&img).unwrap());
        assert_eq!(a.features.len(), FEATURE_DIM);
        assert_eq!(a.identity.len(), IDENTITY_DIM);
        assert!((a.identity.dot(&a.identity).sqrt() - 1.0).abs() < 1e-6);
    }
    let wrong = Image::new(16, 16, [0.5; 3]);
    assert!(matches!(enc.embed(&wrong), Err(Error::Argument(_))));
}

#[test]
fn encoder_vjp_matches_finite_differences() {
    let enc = encoder(32, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random_image(&mut rng, 32);
    let gf = Array1::from_shape_fn(FEATURE_DIM, |_| rng.random_range(-1.0..1.0));
    let gi = Array1::from_shape_fn(IDENTITY_DIM, |_| rng.random_range(-1.0..1.0));
    let f = |im: &Image<f64>| {
        let e = enc.embed(im).unwrap();
        e.features.dot(&gf) + e.identity.dot(&gi)
    };
    let (_, cache) = enc.encode(&img).unwrap();
    let g = enc.vjp(&cache, Some(gf.view()), Some(gi.view())).unwrap();
    let h = 1e-6;
    for _ in 0..40 {
        let (px, c) = (rng.random_range(0..32 * 32), rng.random_range(0..3));
        let (mut up, mut dn) = (img.clone(), img.clone());
        up.pixels[px][c] += h;
        dn.pixels[px][c] -= h;
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        let a = g[px][c];
        assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-4, "{a} vs {fd}");
    }
}

#[test]
fn same_face_is_closer_than_a_different_face() {
    let basis = make_test_basis::<f64>(3, 1000).unwrap();
    let enc = encoder(64, 3);
    let pose = PoseSampler::default();
    let rig = LightingRig::headlight([0.0, 300.0, 3000.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ids: Vec<(Array1<f64>, Array1<f64>)> = (0..50)
        .map(|_| {
            let p = sample_parameters::<f64, _>(&mut rng, basis.dims(), false);
            let mesh = basis.decode_mesh(&p).unwrap();
            let view = |yaw: f64| {
                let cam = pose.camera(yaw, 0.0, 64, 64);
                let img = render_mesh(&mesh, &cam, &rig, &RenderOptions::default()).unwrap().image();
                enc.embed(&img).unwrap().identity
            };
            (view(-10.0), view(10.0))
        })
        .collect();
    let (mut same, mut diff, mut wins) = (0.0, 0.0, 0);
    for i in 0..50 {
        let s = ids[i].0.dot(&ids[i].1);
        let d = ids[i].0.dot(&ids[(i + 1) % 50].1);
        same += s / 50.0;
        diff += d / 50.0;
        wins += (s > d) as usize;
    }
    assert!(same > diff, "same {same} diff {diff}");
    assert!(wins >= 40, "only {wins}/50 identities separated");
}

fn unit_pair(rng: &mut ChaCha8Rng) -> EmbeddingPair<f64> {
    let mut id: Array1<f64> = Array1::from_shape_fn(IDENTITY_DIM, |_| rng.random_range(-1.0..1.0));
    id /= id.dot(&id).sqrt();
    // f32 storage: store exactly representable values so the round trip is exact.
    EmbeddingPair {
        features: Array1::from_shape_fn(FEATURE_DIM, |_| rng.random_range(-4.0..4.0f32) as f64),
        identity: id.mapv(|v| v as f32 as f64),
    }
}

#[test]
fn embedding_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let recs: Vec<(String, EmbeddingPair<f64>)> = (0..3).map(|i| (format!("img{i}"), unit_pair(&mut rng))).collect();
    let path = dir.path().join("e.emb");
    save_embeddings(&path, &recs).unwrap();
    assert_eq!(load_embeddings::<f64>(&path).unwrap(), recs);
    let provider = FileEmbeddingProvider::from_file(&path).unwrap();
    for (k, p) in &recs {
        assert_eq!(&EmbeddingProvider::<f64>::embed(&provider, k).unwrap(), p);
    }
}

#[test]
fn non_unit_identity_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut p = unit_pair(&mut rng);
    p.identity *= 1.1;
    save_embeddings(dir.path().join("e.emb"), &[("k".to_string(), p)]).unwrap();
    std::fs::write(dir.path().join("m.txt"), "k e.emb\n").unwrap();
    assert!(matches!(FileEmbeddingProvider::from_manifest(dir.path().join("m.txt")), Err(Error::Validation(_))));
}

#[test]
fn large_manifest_matches_linear_scan() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut all = Vec::new();
    let mut manifest = String::new();
    for f in 0..4 {
        let recs: Vec<(String, EmbeddingPair<f64>)> =
            (0..2500).map(|i| (format!("face_{f}_{i}"), unit_pair(&mut rng))).collect();
        let name = format!("part{f}.emb");
        save_embeddings(dir.path().join(&name), &recs).unwrap();
        for (k, _) in &recs {
            manifest.push_str(&format!("{k} {name}\n"));
        }
        all.extend(recs);
    }
    std::fs::write(dir.path().join("m.txt"), manifest).unwrap();
    let provider = FileEmbeddingProvider::from_manifest(dir.path().join("m.txt")).unwrap();
    assert_eq!(provider.len(), 10_000);
    for _ in 0..200 {
        let key = &all[rng.random_range(0..all.len())].0;
        let scan = all.iter().find(|(k, _)| k == key).map(|(_, p)| p).unwrap();
        let got: EmbeddingPair<f64> = provider.embed(key.as_str()).unwrap();
        assert_eq!(&got, scan);
    }
    assert!(matches!(EmbeddingProvider::<f64>::embed(&provider, "absent"), Err(Error::Lookup(_))));
}
