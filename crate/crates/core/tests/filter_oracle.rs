use fedkalman::filter::*;
use fedkalman::selfcheck::{filter_equivalence_error, random_filter_case};
use proptest::prelude::*;

type M = [[f64; 3]; 3];

fn to_arr(m: &Mat3) -> M {
    let mut a = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            a[i][j] = m[(i, j)];
        }
    }
    a
}

fn mul(a: &M, b: &M) -> M {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

fn add(a: &M, b: &M) -> M {
    let mut c = *a;
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] += b[i][j];
        }
    }
    c
}

fn inv(a: &M) -> M {
    // cofactor expansion
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (i1, i2) = ((j + 1) % 3, (j + 2) % 3);
            let (j1, j2) = ((i + 1) % 3, (i + 2) % 3);
            r[i][j] = (a[i1][j1] * a[i2][j2] - a[i1][j2] * a[i2][j1]) / det;
        }
    }
    r
}

/// Plain-array Riccati recursion: S̄ = Ŝ + R, K = S̄(S̄+Q)⁻¹, Ŝ = (I−K)S̄.
fn riccati_oracle(p0: &M, r: &M, q: &M, steps: usize) -> M {
    let mut p = *p0;
    for _ in 0..steps {
        let s = add(&p, r);
        let k = mul(&s, &inv(&add(&s, q)));
        let ks = mul(&k, &s);
        for i in 0..3 {
            for j in 0..3 {
                p[i][j] = s[i][j] - ks[i][j];
            }
        }
        for i in 0..3 {
            for j in 0..i {
                let m = 0.5 * (p[i][j] + p[j][i]);
                p[i][j] = m;
                p[j][i] = m;
            }
        }
    }
    p
}

fn spd(seed: f64, scale: f64) -> Mat3 {
    let a = Mat3::new(1.0, 0.2 * seed, 0.1, 0.3, 1.0 + seed, -0.2, 0.05, 0.1, 0.8);
    (a * a.transpose()) * scale + Mat3::identity() * 0.05
}

#[test]
fn steady_state_covariance_matches_iterated_riccati() {
    let noise = NoiseModel {
        state_cov: spd(0.4, 0.02),
        meas_cov: spd(1.3, 2.0),
    };
    let steps = 400;
    let meas: Vec<Measurement> = (0..steps)
        .map(|t| Measurement::with_velocity(Vec3::new(t as f64, 0.0, 1.0), Vec3::new(10.0, 0.0, 0.0)))
        .collect();
    let controls = controls_from_measurements(&meas, 0.1).unwrap();
    let init = initial_state(&meas[0], &noise.meas_cov);
    let trace = run_analytic_kf(&meas, &controls, &noise, &init).unwrap();
    let lib = trace.last().unwrap().updated_cov;
    let oracle = riccati_oracle(&to_arr(&noise.meas_cov), &to_arr(&noise.state_cov), &to_arr(&noise.meas_cov), steps);
    for i in 0..3 {
        for j in 0..3 {
            assert!((lib[(i, j)] - oracle[i][j]).abs() <= 1e-10, "({i},{j}) {} vs {}", lib[(i, j)], oracle[i][j]);
        }
    }
}

#[test]
fn scalar_steady_state_closed_form() {
    // per axis: p² + r p − r q = 0
    let (r, q): (f64, f64) = (0.04, 2.25);
    let closed = (-r + (r * r + 4.0 * r * q).sqrt()) / 2.0;
    let noise = NoiseModel::diagonal(Vec3::repeat(r), Vec3::repeat(q));
    let meas = vec![Measurement::with_velocity(Vec3::zeros(), Vec3::zeros()); 500];
    let controls = controls_from_measurements(&meas, 0.1).unwrap();
    let trace = run_analytic_kf(&meas, &controls, &noise, &initial_state(&meas[0], &noise.meas_cov)).unwrap();
    let p = trace.last().unwrap().updated_cov;
    for a in 0..3 {
        assert!((p[(a, a)] - closed).abs() <= 1e-10);
    }
}

#[test]
fn gain_injection_reproduces_analytic_filter() {
    assert!(filter_equivalence_error(11, 100, 50).unwrap() <= 1e-10);
}

#[test]
fn known_gain_examples() {
    let k = analytic_gain(&Mat3::identity(), &Mat3::identity()).unwrap();
    assert!((k - Mat3::identity() * 0.5).abs().max() < 1e-15);
    // huge measurement noise, tiny gain
    let k = analytic_gain(&Mat3::identity(), &(Mat3::identity() * 1e8)).unwrap();
    assert!(k.abs().max() < 1e-7);
    assert!(matches!(
        analytic_gain(&Mat3::zeros(), &Mat3::zeros()),
        Err(fedkalman::Error::Singular { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn analytic_covariances_stay_symmetric_psd(seed in any::<u64>(), len in 1usize..60) {
        let (meas, controls, noise, init) = random_filter_case(seed, len);
        let trace = run_analytic_kf(&meas, &controls, &noise, &init).unwrap();
        for s in &trace.steps {
            prop_assert!((s.updated_cov - s.updated_cov.transpose()).abs().max() <= SYMMETRY_TOL);
            prop_assert!(min_eigenvalue(&s.updated_cov) >= PSD_TOL);
            // posterior never exceeds prior along any direction
            prop_assert!(min_eigenvalue(&(s.predicted_cov - s.updated_cov)) >= -1e-9);
        }
    }

    #[test]
    fn unit_gain_follows_measurements(seed in any::<u64>(), len in 1usize..30) {
        let (meas, controls, noise, init) = random_filter_case(seed, len);
        let mut src = |_: &GainContext<'_>| -> fedkalman::Result<InjectedGain> { Ok(InjectedGain::gain_only(Mat3::identity())) };
        let trace = run_gain_injected_kf(&meas, &controls, &noise.state_cov, &mut src, &init).unwrap();
        for (s, z) in trace.steps.iter().zip(&meas) {
            prop_assert!((s.updated_mean - z.position).abs().max() <= 1e-12);
        }
    }

    #[test]
    fn zero_gain_dead_reckons(seed in any::<u64>(), len in 1usize..30) {
        let (meas, controls, noise, init) = random_filter_case(seed, len);
        let mut src = |_: &GainContext<'_>| -> fedkalman::Result<InjectedGain> { Ok(InjectedGain::gain_only(Mat3::zeros())) };
        let trace = run_gain_injected_kf(&meas, &controls, &noise.state_cov, &mut src, &init).unwrap();
        let mut x = init.mean;
        for (s, u) in trace.steps.iter().zip(&controls) {
            x += u.velocity * u.dt;
            prop_assert!((s.updated_mean - x).abs().max() <= 1e-9);
        }
    }
}
