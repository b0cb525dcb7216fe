mod common;

use std::sync::Arc;

use common::{brute_force_recall, transport_oracle, warped_face};
use morphrec::eval::landmarks::default_landmark_indices;
use morphrec::eval::{
    clustering_recall, crop_scan, emd_1d, emd_samples, fit_pose_expression, icp_similarity, project_landmarks,
    similarity_stats, symmetric_point_to_plane, video_average_embeddings, FitOptions, Histogram1D, IcpOptions,
    KeyedEmbedding, SimilarityTransform,
};
use morphrec::model::{sample_parameters, FaceParameters, Mesh};
use morphrec::network::EmbeddingPair;
use morphrec::real::{self, rotation_from_axis_angle, Vec3};
use morphrec::trainer::PoseSampler;
use morphrec::Error;
use ndarray::Array1;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn plane(z: f64, n: usize) -> Mesh<f64> {
    let mut positions = Vec::new();
    for i in 0..n {
        for j in 0..n {
            positions.push([i as f64, j as f64, z]);
        }
    }
    let mut triangles = Vec::new();
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            let a = (i * n + j) as u32;
            triangles.push([a, a + n as u32, a + 1]);
            triangles.push([a + 1, a + n as u32, a + n as u32 + 1]);
        }
    }
    Mesh {
        colors: vec![[0.5; 3]; positions.len()],
        positions,
        normals: None,
        triangles: Arc::new(triangles),
    }
}

fn sphere(radius: f64, rings: usize, segments: usize) -> Mesh<f64> {
    let mut positions = vec![[0.0, 0.0, radius]];
    for r in 1..rings {
        let th = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let ph = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            positions.push([radius * th.sin() * ph.cos(), radius * th.sin() * ph.sin(), radius * th.cos()]);
        }
    }
    positions.push([0.0, 0.0, -radius]);
    Mesh {
        colors: vec![[0.5; 3]; positions.len()],
        positions,
        normals: None,
        triangles: Arc::new(Vec::new()),
    }
}

fn random_similarity(rng: &mut ChaCha8Rng, max_deg: f64) -> SimilarityTransform<f64> {
    let axis = real::normalize(std::array::from_fn(|_| rng.sample(StandardNormal))).unwrap();
    let angle = rng.random_range(0.0..max_deg.to_radians());
    SimilarityTransform {
        rotation: rotation_from_axis_angle(real::scale(axis, angle)),
        translation: std::array::from_fn(|_| rng.random_range(-20.0..20.0)),
        scale: rng.random_range(0.8f64.ln()..1.25f64.ln()).exp(),
    }
}

fn angle_between(a: &real::Mat3<f64>, b: &real::Mat3<f64>) -> f64 {
    real::rotation_angle(&real::mat3_mul(&real::mat3_transpose(a), b))
}

#[test]
fn crop_keeps_points_inside_radius() {
    let (_, face) = warped_face(3, 400);
    let c = face.positions.iter().fold([0.0; 3], |a, p| real::add(a, *p));
    let c = real::scale(c, 1.0 / face.positions.len() as f64);
    let far = face.positions.iter().map(|p| real::norm(real::sub(*p, c))).fold(0.0, f64::max);
    let kept = crop_scan(&face, c, far + 1.0).unwrap();
    assert_eq!(kept, face);

    let mut m = plane(0.0, 3);
    let kept = crop_scan(&m, [0.0; 3], 1.0).unwrap();
    assert_eq!(kept.positions, vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
    assert_eq!(*kept.triangles, vec![[0, 2, 1]]);

    m.positions[8] = [95.0 + 1e-9, 0.0, 0.0];
    let kept = crop_scan(&m, [0.0; 3], 95.0).unwrap();
    assert_eq!(kept.positions.len(), 8);
}

#[test]
fn crop_of_sphere_surface_inside_radius_is_empty() {
    let s = sphere(100.0, 12, 16);
    assert!(matches!(crop_scan(&s, [0.0; 3], 95.0), Err(Error::Validation(_))));
    assert!(crop_scan(&s, [0.0; 3], -1.0).is_err());
}

#[test]
fn icp_identity_case() {
    let (_, face) = warped_face(3, 500);
    let r = icp_similarity(&face.positions, &face.positions, &IcpOptions::default()).unwrap();
    assert!(r.residual < 1e-9);
    assert!(angle_between(&r.transform.rotation, &real::mat3_identity()) < 1e-9);
    assert!((r.transform.scale - 1.0).abs() < 1e-9);
}

#[test]
fn icp_recovers_known_similarity() {
    let (_, face) = warped_face(3, 500);
    let tf = SimilarityTransform {
        rotation: rotation_from_axis_angle(real::scale(real::normalize([1.0, 2.0, -0.5]).unwrap(), 10f64.to_radians())),
        translation: [5.0, 0.0, 0.0],
        scale: 1.2,
    };
    let r = icp_similarity(&face.positions, &tf.apply_all(&face.positions), &IcpOptions::default()).unwrap();
    assert!(angle_between(&tf.rotation, &r.transform.rotation) < 1e-3);
    assert!((r.transform.scale - 1.2).abs() < 1e-4);
    let t_err = real::norm(real::sub(r.transform.translation, tf.translation));
    assert!(t_err < 1e-3, "translation error {t_err}");
    r.transform.validate().unwrap();

    let scaled = SimilarityTransform {
        scale: 0.9,
        ..SimilarityTransform::identity()
    };
    let r = icp_similarity(&face.positions, &scaled.apply_all(&face.positions), &IcpOptions::default()).unwrap();
    assert!((r.transform.scale - 0.9).abs() < 1e-4);
}

#[test]
fn icp_residual_history_is_non_increasing() {
    let (_, face) = warped_face(5, 300);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let tf = random_similarity(&mut rng, 30.0);
        // Noisy target so correspondences change between iterations.
        let target: Vec<Vec3<f64>> = tf
            .apply_all(&face.positions)
            .into_iter()
            .map(|p| std::array::from_fn(|k| p[k] + 0.5 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let r = icp_similarity(&face.positions, &target, &IcpOptions::default()).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1] <= w[0], "history {:?}", r.history);
        }
        assert_eq!(*r.history.last().unwrap(), r.residual);
    }
}

#[test]
fn icp_rejects_degenerate_input() {
    let line: Vec<Vec3<f64>> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
    assert!(matches!(icp_similarity(&line, &line, &IcpOptions::default()), Err(Error::Numeric(_))));
    assert!(icp_similarity::<f64>(&[], &line, &IcpOptions::default()).is_err());
}

#[test]
fn point_to_plane_plane_cases() {
    let a = plane(0.0, 11);
    assert_eq!(symmetric_point_to_plane(&a, &a).unwrap(), 0.0);
    for d in [0.25, 0.5, 0.9] {
        let b = plane(d, 11);
        let ab = symmetric_point_to_plane(&a, &b).unwrap();
        assert!((ab - d).abs() < 1e-9, "offset {d}: {ab}");
        assert_eq!(ab, symmetric_point_to_plane(&b, &a).unwrap());
    }
}

#[test]
fn point_to_plane_after_icp_alignment() {
    let (_, face) = warped_face(3, 500);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let tf = random_similarity(&mut rng, 30.0);
        let target = tf.apply_mesh(&face);
        let r = icp_similarity(&face.positions, &target.positions, &IcpOptions::default()).unwrap();
        let aligned = r.transform.apply_mesh(&face);
        let d = symmetric_point_to_plane(&aligned, &target).unwrap();
        assert!(d < 1e-6, "distance {d}");
    }
}

fn pair(features: Vec<f64>, identity: Vec<f64>) -> EmbeddingPair<f64> {
    EmbeddingPair {
        features: Array1::from(features),
        identity: Array1::from(identity),
    }
}

#[test]
fn video_average_cases() {
    let one = pair(vec![1.0, 2.0], vec![0.6, 0.8]);
    assert_eq!(video_average_embeddings(std::slice::from_ref(&one)).unwrap(), one);
    let copies = vec![one.clone(); 7];
    let avg = video_average_embeddings(&copies).unwrap();
    for (x, y) in avg.identity.iter().zip(&one.identity) {
        assert!((x - y).abs() < 1e-15);
    }
    for (x, y) in avg.features.iter().zip(&one.features) {
        assert!((x - y).abs() < 1e-15);
    }
    let opposite = [pair(vec![0.0], vec![1.0, 0.0]), pair(vec![0.0], vec![-1.0, 0.0])];
    assert!(matches!(video_average_embeddings(&opposite), Err(Error::Numeric(_))));

    let mixed = [pair(vec![1.0, 0.0], vec![1.0, 0.0]), pair(vec![3.0, 2.0], vec![0.0, 1.0])];
    let avg = video_average_embeddings(&mixed).unwrap();
    assert_eq!(avg.features.to_vec(), vec![2.0, 1.0]);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert!((avg.identity[0] - h).abs() < 1e-15 && (avg.identity[1] - h).abs() < 1e-15);
}

#[test]
fn similarity_stats_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let v = |rng: &mut ChaCha8Rng| Array1::from_iter((0..16).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let same: Vec<_> = (0..5).map(|_| {
        let a = v(&mut rng);
        (a.clone(), a)
    }).collect();
    assert!((similarity_stats(&same).unwrap().mean - 1.0).abs() < 1e-15);

    let e = |i: usize| Array1::from_iter((0..4).map(|k| if k == i { 1.0 } else { 0.0 }));
    let orth = vec![(e(0), e(1)), (e(2), e(3)), (e(1), e(3))];
    assert_eq!(similarity_stats(&orth).unwrap().mean, 0.0);

    let mixed: Vec<_> = (0..40).map(|_| (v(&mut rng), v(&mut rng))).collect();
    let stats = similarity_stats(&mixed).unwrap();
    let direct: Vec<f64> = mixed
        .iter()
        .map(|(a, b)| a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt()))
        .collect();
    let mean = direct.iter().sum::<f64>() / direct.len() as f64;
    assert!((stats.mean - mean).abs() < 1e-12);
    let mut sorted = direct.clone();
    sorted.sort_by(f64::total_cmp);
    for (x, y) in stats.histogram.values().iter().zip(&sorted) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn emd_basic_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h = Histogram1D::new(s.clone()).unwrap();
    assert_eq!(emd_1d(&h, &h), 0.0);
    let d0 = Histogram1D::new(vec![0.0]).unwrap();
    let d1 = Histogram1D::new(vec![1.0]).unwrap();
    assert_eq!(emd_1d(&d0, &d1), 1.0);
    assert!(Histogram1D::new(vec![1.5]).is_err());
    assert!(Histogram1D::new(vec![]).is_err());
}

#[test]
fn emd_matches_transport_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..40 {
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.random_range(-0.5..1.0)).collect();
        let e = emd_samples(&a, &b).unwrap();
        let o = transport_oracle(&a, &b);
        assert!((e - o).abs() < 1e-9, "{e} vs {o}");
    }
    for (m, n) in [(3, 5), (4, 6), (7, 2)] {
        let a: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = emd_samples(&a, &b).unwrap();
        assert!((e - transport_oracle(&a, &b)).abs() < 1e-9);
    }
}

fn sample_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..25)
}

proptest! {
    #[test]
    fn emd_is_a_metric(a in sample_strategy(), b in sample_strategy(), c in sample_strategy()) {
        let ab = emd_samples(&a, &b).unwrap();
        prop_assert_eq!(ab, emd_samples(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!(emd_samples(&a, &a).unwrap() == 0.0);
        let ac = emd_samples(&a, &c).unwrap();
        let cb = emd_samples(&c, &b).unwrap();
        prop_assert!(ab <= ac + cb + 1e-9);
    }
}

fn keyed(ids: &[&str], vectors: Vec<Array1<f64>>) -> Vec<KeyedEmbedding<f64>> {
    ids.iter()
        .zip(vectors)
        .enumerate()
        .map(|(i, (id, v))| KeyedEmbedding::from_key(format!("{id}/{i:03}"), v))
        .collect()
}

fn gaussian_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Array1<f64>> {
    (0..n)
        .map(|_| Array1::from_iter((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal))))
        .collect()
}

#[test]
fn recall_is_one_for_matching_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids: Vec<String> = (0..12).map(|i| format!("p{i:02}")).collect();
    let id_refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
    let vecs = gaussian_vectors(&mut rng, 12, 8);
    let photos = keyed(&id_refs, vecs.clone());
    let renders = keyed(&id_refs, vecs);
    assert_eq!(clustering_recall(&renders, &photos, &[1, 5]).unwrap(), vec![1.0, 1.0]);
}

#[test]
fn recall_matches_brute_force_including_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..30 {
        let n_ids = 6;
        let photo_ids: Vec<String> = (0..15).map(|i| format!("p{}", i % n_ids)).collect();
        let render_ids: Vec<String> = (0..n_ids).map(|i| format!("p{i}")).collect();
        // Small integer vectors make exact cosine ties common.
        let small = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Array1<f64>> {
            (0..n)
                .map(|_| loop {
                    let v = Array1::from_iter((0..3).map(|_| rng.random_range(-1i32..=1) as f64));
                    if v.dot(&v) > 0.0 {
                        break v;
                    }
                })
                .collect()
        };
        let (pv, rv) = if trial % 2 == 0 {
            (small(&mut rng, 15), small(&mut rng, n_ids))
        } else {
            (gaussian_vectors(&mut rng, 15, 5), gaussian_vectors(&mut rng, n_ids, 5))
        };
        let photos = keyed(&photo_ids.iter().map(|s| s.as_str()).collect::<Vec<_>>(), pv);
        let renders = keyed(&render_ids.iter().map(|s| s.as_str()).collect::<Vec<_>>(), rv);
        let ks = [1, 2, 3, 5, 10];
        assert_eq!(clustering_recall(&renders, &photos, &ks).unwrap(), brute_force_recall(&renders, &photos, &ks));
    }
}

#[test]
fn recall_invariant_to_global_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let photo_ids: Vec<String> = (0..30).map(|i| format!("p{}", i % 20)).collect();
        let render_ids: Vec<String> = (0..20).map(|i| format!("p{i}")).collect();
        let photos = keyed(&photo_ids.iter().map(|s| s.as_str()).collect::<Vec<_>>(), gaussian_vectors(&mut rng, 30, 3));
        let renders = keyed(&render_ids.iter().map(|s| s.as_str()).collect::<Vec<_>>(), gaussian_vectors(&mut rng, 20, 3));
        let axis = real::normalize(std::array::from_fn(|_| rng.sample(StandardNormal))).unwrap();
        let rot = rotation_from_axis_angle(real::scale(axis, rng.random_range(0.0..3.0)));
        let turn = |set: &[KeyedEmbedding<f64>]| -> Vec<KeyedEmbedding<f64>> {
            set.iter()
                .map(|k| {
                    let v = real::mat3_mul_vec(&rot, [k.vector[0], k.vector[1], k.vector[2]]);
                    KeyedEmbedding {
                        vector: Array1::from(v.to_vec()),
                        ..k.clone()
                    }
                })
                .collect()
        };
        let ks = [1, 3, 5];
        let before = clustering_recall(&renders, &photos, &ks).unwrap();
        let after = clustering_recall(&turn(&renders), &turn(&photos), &ks).unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn landmark_fit_fixed_point_and_ground_truth() {
    let (basis, _) = warped_face(3, 1000);
    let cam = PoseSampler::default().camera::<f64>(0.0, 0.0, 256, 256);
    let idx = default_landmark_indices(&basis, 68);
    assert_eq!(idx.len(), 68);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p: FaceParameters<f64> = sample_parameters(&mut rng, basis.dims(), true);
    p.expression.fill(0.0);
    let targets = project_landmarks(&basis, &p, &real::mat3_identity(), [0.0; 3], &idx, &cam).unwrap();
    let fit = fit_pose_expression(&basis, &p, &idx, &targets, &cam, &FitOptions::default()).unwrap();
    assert!(fit.residual_px < 1e-9);
    assert!(fit.expression.dot(&fit.expression).sqrt() < 1e-3);
    assert_eq!(fit.iterations, 0);
}

#[test]
fn landmark_fit_recovers_synthetic_targets() {
    let (basis, _) = warped_face(3, 1000);
    let cam = PoseSampler::default().camera::<f64>(0.0, 0.0, 256, 256);
    let idx = default_landmark_indices(&basis, 68);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..4 {
        let mut p: FaceParameters<f64> = sample_parameters(&mut rng, basis.dims(), true);
        let w: Vec3<f64> = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
        let t: Vec3<f64> = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
        let rot = rotation_from_axis_angle(w);
        let targets = project_landmarks(&basis, &p, &rot, t, &idx, &cam).unwrap();
        let at_truth = project_landmarks(&basis, &p, &rot, t, &idx, &cam).unwrap();
        assert_eq!(targets, at_truth);
        p.expression.fill(0.0);
        let fit = fit_pose_expression(&basis, &p, &idx, &targets, &cam, &FitOptions::default()).unwrap();
        assert!(fit.residual_px < 0.5, "residual {}", fit.residual_px);
        let again = fit_pose_expression(&basis, &p, &idx, &targets, &cam, &FitOptions::default()).unwrap();
        assert_eq!(fit.residual_px, again.residual_px);
    }
}

#[test]
fn landmark_fit_rejects_mismatched_inputs() {
    let (basis, _) = warped_face(3, 200);
    let cam = PoseSampler::default().camera::<f64>(0.0, 0.0, 64, 64);
    let p = FaceParameters::zeros(basis.dims());
    assert!(fit_pose_expression(&basis, &p, &[0, 1], &[[0.0, 0.0]], &cam, &FitOptions::default()).is_err());
    assert!(fit_pose_expression(&basis, &p, &[10_000], &[[0.0, 0.0]], &cam, &FitOptions::default()).is_err());
}
