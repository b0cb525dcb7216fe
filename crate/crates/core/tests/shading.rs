use morphrec::raster::{AttributeBuffer, Camera};
use morphrec::real::{self, rotation_from_axis_angle, Mat3, Vec3};
use morphrec::shading::{
    color_temperature_to_rgb, phong_shade, sample_lighting, shade_pixel, shade_vjp, specular_from_diffuse,
    LightingRig, LightingSampler, PointLight, COLOR_TEMPERATURES_K,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rig(lights: [PointLight<f64>; 2], c: f64, shininess: f64) -> LightingRig<f64> {
    LightingRig {
        lights,
        ambient: [0.0; 3],
        specular_c: c,
        shininess,
    }
}

fn dark() -> PointLight<f64> {
    PointLight {
        position: [0.0, 0.0, 1000.0],
        rgb_intensity: [0.0; 3],
    }
}

fn unit(v: Vec3<f64>) -> Vec3<f64> {
    real::normalize(v).unwrap()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3<f64> {
    unit([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
}

#[test]
fn head_on_diffuse_is_the_albedo() {
    let light = PointLight {
        position: [0.0, 0.0, 3000.0],
        rgb_intensity: [1.0; 3],
    };
    let out = shade_pixel([0.0; 3], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0], &rig([light, dark()], 0.0, 40.0), [0.0, 0.0, 500.0]);
    assert!((out[0] - 1.0).abs() < 1e-12 && out[1] == 0.0 && out[2] == 0.0);
}

#[test]
fn light_behind_the_surface_contributes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = random_unit(&mut rng);
        let mut l = random_unit(&mut rng);
        if real::dot(l, n) > 0.0 {
            l = real::scale(l, -1.0);
        }
        let light = PointLight {
            position: real::scale(l, 2500.0),
            rgb_intensity: [1.0; 3],
        };
        let out = shade_pixel([0.0; 3], n, [0.6, 0.5, 0.4], &rig([light, dark()], 0.0, 40.0), real::scale(n, 500.0));
        assert!(out.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn mirror_configuration_gives_pure_specular() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let n = random_unit(&mut rng);
        let t = unit(real::cross(n, random_unit(&mut rng)));
        let ang: f64 = rng.random_range(0.1..1.2);
        let l = real::add(real::scale(n, ang.cos()), real::scale(t, ang.sin()));
        let v = real::sub(real::scale(n, 2.0 * ang.cos()), l);
        let light = PointLight {
            position: real::scale(l, 3000.0),
            rgb_intensity: [0.9, 0.8, 0.7],
        };
        let shininess = rng.random_range(1.0..100.0);
        // K_d = 0 leaves only the specular term, with K_s = c.
        let out = shade_pixel([0.0; 3], n, [0.0; 3], &rig([light, dark()], 0.2, shininess), real::scale(v, 700.0));
        for c in 0..3 {
            assert!((out[c] - 0.2 * [0.9, 0.8, 0.7][c]).abs() < 1e-9, "{out:?}");
        }
    }
}

#[test]
fn specular_from_diffuse_endpoints() {
    assert_eq!(specular_from_diffuse([0.0; 3], 0.35), [0.35; 3]);
    assert_eq!(specular_from_diffuse([1.0; 3], 0.35), [0.0; 3]);
    assert!(specular_from_diffuse([0.5f64; 3], 0.35).iter().all(|v| (v - 0.175).abs() < 1e-15));
    assert_eq!(specular_from_diffuse([-1.0, 2.0, 0.0], 0.5), [0.5, 0.0, 0.5]);
}

#[test]
fn colour_temperature_reference_points() {
    let d65 = color_temperature_to_rgb(6500.0).unwrap();
    assert!(d65.iter().all(|v| (v - 1.0).abs() < 0.05), "{d65:?}");
    let warm = color_temperature_to_rgb(2700.0).unwrap();
    assert!(warm[0] > warm[1] && warm[1] > warm[2], "{warm:?}");
    for k in [1000.0, 2700.0, 6500.0, 12000.0] {
        let c = color_temperature_to_rgb(k).unwrap();
        assert!((c.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    }
    assert!(color_temperature_to_rgb(999.0).is_err());
    assert!(color_temperature_to_rgb(12001.0).is_err());
}

#[test]
fn blue_to_red_ratio_rises_with_temperature() {
    let mut prev = -1.0;
    for k in (2000..=10000).step_by(100) {
        let c = color_temperature_to_rgb(k as f64).unwrap();
        let ratio = c[2] / c[0];
        assert!(ratio >= prev, "{k} K: {ratio} < {prev}");
        prev = ratio;
    }
}

#[test]
fn lighting_sampler_ranges_and_determinism() {
    let a: LightingRig<f64> = sample_lighting(&mut ChaCha8Rng::seed_from_u64(4));
    let b: LightingRig<f64> = sample_lighting(&mut ChaCha8Rng::seed_from_u64(4));
    assert_eq!(a, b);
    let sampler = LightingSampler::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts = [0usize; 5];
    let n = 10_000;
    for _ in 0..n {
        let s = sampler.sample::<f64, _>(&mut rng);
        s.rig.validate().unwrap();
        for l in &s.rig.lights {
            let d = real::norm(l.position);
            assert!((2000.0 - 1e-9..=4000.0 + 1e-9).contains(&d), "distance {d}");
            assert!(l.position[2] >= 0.0);
        }
        counts[COLOR_TEMPERATURES_K.iter().position(|k| *k == s.kelvin).unwrap()] += 1;
    }
    let (p, nf) = (0.2, n as f64);
    let sigma = (nf * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - nf * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

fn shade_rig(rng: &mut ChaCha8Rng, ambient: f64) -> LightingRig<f64> {
    let mut r: LightingRig<f64> = sample_lighting(rng);
    r.ambient = [ambient; 3];
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn radiance_is_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = shade_rig(&mut rng, 0.1);
        let kd = [rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5)];
        let p = [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
        let out = shade_pixel(p, random_unit(&mut rng), kd, &r, [0.0, 0.0, 500.0]);
        prop_assert!(out.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn lights_add(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = shade_rig(&mut rng, 0.15);
        let only = |k: usize| {
            let mut s = r.clone();
            s.lights[1 - k].rgb_intensity = [0.0; 3];
            s
        };
        let kd = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let p = [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
        let n = random_unit(&mut rng);
        let eye = [0.0, 0.0, 500.0];
        let both = shade_pixel(p, n, kd, &r, eye);
        let (a, b) = (shade_pixel(p, n, kd, &only(0), eye), shade_pixel(p, n, kd, &only(1), eye));
        for c in 0..3 {
            let want = a[c] + b[c] - r.ambient[c] * kd[c];
            prop_assert!((both[c] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn rotating_everything_leaves_the_pixel_unchanged(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = shade_rig(&mut rng, 0.05);
        let rot: Mat3<f64> = rotation_from_axis_angle(real::scale(random_unit(&mut rng), rng.random_range(0.0..3.0)));
        let m = |v: Vec3<f64>| real::mat3_mul_vec(&rot, v);
        let mut rr = r.clone();
        for l in rr.lights.iter_mut() {
            l.position = m(l.position);
        }
        let kd = [0.7, 0.5, 0.3];
        let p = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
        let n = random_unit(&mut rng);
        let eye = [0.0, 0.0, 500.0];
        let a = shade_pixel(p, n, kd, &r, eye);
        let b = shade_pixel(m(p), m(n), kd, &rr, m(eye));
        for c in 0..3 {
            prop_assert!((a[c] - b[c]).abs() < 1e-6);
        }
    }
}

fn buffer(values: Vec<Vec3<f64>>) -> AttributeBuffer<f64, 3> {
    let n = values.len();
    AttributeBuffer {
        width: n,
        height: 1,
        values,
        mask: vec![true; n],
    }
}

#[test]
fn shade_vjp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cam = Camera {
        eye: [0.0, 0.0, 500.0],
        look_at: [0.0; 3],
        up: [0.0, 1.0, 0.0],
        vertical_fov: 0.5,
        near: 10.0,
        far: 2000.0,
        width: 64,
        height: 1,
    };
    let mut checked = 0;
    while checked < 64 {
        let r = shade_rig(&mut rng, 0.05);
        let p = [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)];
        let n = unit(real::add(random_unit(&mut rng), [0.0, 0.0, 1.5]));
        let kd = [rng.random_range(0.05..0.6), rng.random_range(0.05..0.6), rng.random_range(0.05..0.6)];
        let out = shade_pixel(p, n, kd, &r, cam.eye);
        // Stay in the unclamped regime and away from the lambert and specular kinks.
        let l_ok = r.lights.iter().all(|l| real::dot(n, unit(real::sub(l.position, p))).abs() > 0.05);
        if !out.iter().all(|v| *v > 0.01 && *v < 0.99) || !l_ok {
            continue;
        }
        let (pb, nb, kb) = (buffer(vec![p]), buffer(vec![n]), buffer(vec![kd]));
        let shaded = phong_shade(&pb, &nb, &kb, &r, &cam, [0.0; 3]).unwrap();
        let g = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let grad = shade_vjp(&pb, &nb, &kb, &r, &cam, &shaded, &[g]).unwrap();
        let f = |p: Vec3<f64>, n: Vec3<f64>, kd: Vec3<f64>| {
            let o = shade_pixel(p, n, kd, &r, cam.eye);
            o[0] * g[0] + o[1] * g[1] + o[2] * g[2]
        };
        let h = 1e-5;
        for c in 0..3 {
            let e = |v: Vec3<f64>, s: f64| {
                let mut w = v;
                w[c] += s;
                w
            };
            let fds = [
                (f(e(p, h), n, kd) - f(e(p, -h), n, kd)) / (2.0 * h),
                (f(p, e(n, h), kd) - f(p, e(n, -h), kd)) / (2.0 * h),
                (f(p, n, e(kd, h)) - f(p, n, e(kd, -h))) / (2.0 * h),
            ];
            let an = [grad.positions[0][c], grad.normals[0][c], grad.diffuse[0][c]];
            for (a, fd) in an.iter().zip(fds) {
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-3, "analytic {a} fd {fd}");
            }
        }
        checked += 1;
    }
}
