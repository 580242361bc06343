use approx::assert_abs_diff_eq;
use rankgap::skorokhod::{reflect_1d_values, solve_coupled_regulators_stepwise};
use rankgap::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn grid(dt: f64, n: usize) -> TimeGrid<f64> {
    TimeGrid::new(dt, n).unwrap()
}

fn brownian(g: TimeGrid<f64>, seed: u64) -> SamplePath<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = vec![0.0];
    for _ in 0..g.n_steps {
        let z: f64 = StandardNormal.sample(&mut rng);
        w.push(w.last().unwrap() + g.dt.sqrt() * z);
    }
    SamplePath::new(g, w).unwrap()
}

fn md(delta: [f64; 3]) -> ReflectionSpec<f64> {
    reflection_spec(SystemKind::MiddleDiffusive, &DriftSpec::new(delta).unwrap())
}

#[test]
fn reflect_line() {
    let g = grid(0.01, 300);
    let u = SamplePath::from_fn(g, |t| 1.0 - t);
    let (gap, l) = reflect_1d(&u).unwrap();
    for k in 0..g.len() {
        let t = g.time(k);
        assert_abs_diff_eq!(l.values[k], (t - 1.0).max(0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(gap.values[k], (1.0 - t).max(0.0), epsilon = 1e-12);
    }
}

#[test]
fn reflect_nonnegative_is_identity() {
    let g = grid(0.1, 50);
    let u = SamplePath::from_fn(g, |t| 1.0 + (3.0 * t).sin());
    let (gap, l) = reflect_1d(&u).unwrap();
    assert!(l.values.iter().all(|&x| x == 0.0));
    assert_eq!(gap.values, u.values);
}

#[test]
fn reflect_five_points() {
    let u = [1.0, 0.5, -0.3, 0.2, -0.5];
    let (g, l) = reflect_1d_values(&u).unwrap();
    assert_eq!(l, vec![0.0, 0.0, 0.3, 0.3, 0.5]);
    let expected = [1.0, 0.5, 0.0, 0.5, 0.0];
    for (a, b) in g.iter().zip(expected) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
    }
    // brute force over prefixes
    for k in 0..u.len() {
        let m = u[..=k].iter().map(|x: &f64| (-x).max(0.0)).fold(0.0, f64::max);
        assert_eq!(l[k], m);
    }
}

#[test]
fn reflect_rejects_negative_start() {
    assert!(matches!(reflect_1d_values(&[-0.1, 1.0]), Err(Error::InvalidPath(_))));
    assert!(reflect_1d_values::<f64>(&[]).is_err());
}

#[test]
fn reflect_exact_zero_at_increase() {
    let g = grid(1e-3, 5000);
    let w = brownian(g, 3);
    let (gap, l) = reflect_1d(&w).unwrap();
    for k in 1..g.len() {
        assert!(gap.values[k] >= 0.0);
        if l.values[k] > l.values[k - 1] {
            assert_eq!(gap.values[k], 0.0);
        }
    }
    let (_, l2) = reflect_1d(&gap).unwrap();
    assert!(l2.values.iter().all(|&x| x == 0.0));
}

#[test]
fn reflect_f32() {
    let (g, l) = reflect_1d_values(&[1.0f32, -0.5, 0.25]).unwrap();
    assert_eq!(l, vec![0.0, 0.5, 0.5]);
    assert_eq!(g, vec![1.0, 0.0, 0.75]);
}

/// `A = Γ = 2(γt − 1)⁺`, `G = H = (1 − γt)⁺` for `W ≡ 0`, `g0 = h0 = 1`.
#[test]
fn zero_noise_fixed_point() {
    for gamma in [0.5, 1.0, 2.0] {
        let spec = md([0.0, gamma, 2.0 * gamma]);
        assert_eq!(spec.m, [-gamma, -gamma]);
        let g = grid(1e-3, 3000);
        let z1 = SamplePath::from_fn(g, |t| spec.m[0] * t);
        let z2 = SamplePath::from_fn(g, |t| spec.m[1] * t);
        let sol = solve_coupled_regulators(&spec, &z1, &z2, 1.0, 1.0, 1e-14, 200).unwrap();
        let a_exact = SamplePath::from_fn(g, |t| 2.0 * (gamma * t - 1.0).max(0.0));
        let g_exact = SamplePath::from_fn(g, |t| (1.0 - gamma * t).max(0.0));
        assert!(sol.regulators.a.sup_distance(&a_exact) <= 1e-12);
        assert!(sol.regulators.gamma.sup_distance(&a_exact) <= 1e-12);
        assert!(sol.gaps.g.sup_distance(&g_exact) <= 1e-12);
        assert!(sol.gaps.h.sup_distance(&g_exact) <= 1e-12);
        let rep = local_time_identification_check(&sol.regulators, &sol.gaps, 1e-10, false);
        assert!(rep.flat_ok());
        assert!(rep.a_increases > 0);
    }
}

#[test]
fn inactive_reflection() {
    let spec = md([0.0, 0.1, 0.2]);
    let g = grid(1e-2, 100);
    let w = brownian(g, 1);
    let z1 = SamplePath::new(g, w.values.iter().map(|x| -x).collect()).unwrap();
    let z2 = w.clone();
    let sol = solve_coupled_regulators(&spec, &z1, &z2, 50.0, 50.0, 1e-12, 200).unwrap();
    assert!(sol.regulators.a.values.iter().all(|&x| x == 0.0));
    assert!(sol.regulators.gamma.values.iter().all(|&x| x == 0.0));
    for k in 0..g.len() {
        assert_eq!(sol.gaps.g.values[k], 50.0 + z1.values[k]);
    }
    let rep = local_time_identification_check(&sol.regulators, &sol.gaps, 1e-10, true);
    assert_eq!(rep, IdentificationReport::default());
}

#[test]
fn decoupled_reduces_to_one_dimension() {
    let mut spec = md([0.0, 0.1, 0.2]);
    spec.q = [[0.0, 0.0], [0.0, 0.0]];
    let g = grid(1e-3, 4000);
    let z1 = brownian(g, 11);
    let z2 = brownian(g, 12);
    let sol = solve_coupled_regulators(&spec, &z1, &z2, 0.3, 0.2, 1e-12, 200).unwrap();
    for (z, x0, reg, gap) in [
        (&z1, 0.3, &sol.regulators.a, &sol.gaps.g),
        (&z2, 0.2, &sol.regulators.gamma, &sol.gaps.h),
    ] {
        let u: Vec<f64> = z.values.iter().map(|v| x0 + v).collect();
        let (g1, l1) = reflect_1d_values(&u).unwrap();
        for k in 0..g.len() {
            assert_abs_diff_eq!(reg.values[k], l1[k], epsilon = 1e-12);
            assert_abs_diff_eq!(gap.values[k], g1[k], epsilon = 1e-12);
        }
    }
}

fn drivers_for(kind: SystemKind, delta: [f64; 3], seed: u64, dt: f64, n: usize) -> (ReflectionSpec<f64>, SamplePath<f64>, SamplePath<f64>) {
    let spec = reflection_spec(kind, &DriftSpec::new(delta).unwrap());
    let g = grid(dt, n);
    let w = brownian(g, seed);
    let w3 = brownian(g, seed + 1000);
    let (s1, s2) = match kind {
        SystemKind::MiddleBallistic => (w.clone(), SamplePath::new(g, w3.values.iter().map(|x| -x).collect()).unwrap()),
        _ => (SamplePath::new(g, w.values.iter().map(|x| -x).collect()).unwrap(), w.clone()),
    };
    let z1 = SamplePath::new(g, (0..g.len()).map(|k| spec.m[0] * g.time(k) + s1.values[k]).collect()).unwrap();
    let z2 = SamplePath::new(g, (0..g.len()).map(|k| spec.m[1] * g.time(k) + s2.values[k]).collect()).unwrap();
    (spec, z1, z2)
}

const TEST_DRIVERS: [(SystemKind, [f64; 3]); 6] = [
    (SystemKind::MiddleDiffusive, [0.01, 0.02, 0.03]),
    (SystemKind::MiddleDiffusive, [-0.5, 0.0, 0.5]),
    (SystemKind::MiddleBallistic, [0.0, 0.0, 0.0]),
    (SystemKind::MiddleBallistic, [-0.2, 0.0, 0.3]),
    (SystemKind::SkewElastic, [-1.0, -2.0, -1.0]),
    (SystemKind::SkewElastic, [0.0, 0.0, 0.5]),
];

#[test]
fn picard_iterations_bounded() {
    for (i, (kind, delta)) in TEST_DRIVERS.into_iter().enumerate() {
        let (spec, z1, z2) = drivers_for(kind, delta, i as u64, 1e-3, 20_000);
        let sol = solve_coupled_regulators(&spec, &z1, &z2, 0.5, 0.5, 1e-10, 200).unwrap();
        eprintln!("{kind} {delta:?}: {} iterations", sol.iterations);
        let limit = if kind == SystemKind::SkewElastic { 200 } else { 60 };
        assert!(sol.iterations <= limit, "{kind} needed {} iterations", sol.iterations);
        let rep = local_time_identification_check(&sol.regulators, &sol.gaps, 1e-10, false);
        assert!(rep.flat_ok(), "{kind}: {rep:?}");
        for k in 1..z1.len() {
            assert!(sol.regulators.a.values[k] >= sol.regulators.a.values[k - 1]);
            assert!(sol.regulators.gamma.values[k] >= sol.regulators.gamma.values[k - 1]);
            assert!(sol.gaps.g.values[k] >= 0.0 && sol.gaps.h.values[k] >= 0.0);
        }
    }
}

#[test]
fn picard_contraction() {
    for (i, (kind, delta)) in TEST_DRIVERS.into_iter().enumerate() {
        let (spec, z1, z2) = drivers_for(kind, delta, 100 + i as u64, 1e-3, 20_000);
        let sol = solve_coupled_regulators(&spec, &z1, &z2, 0.5, 0.5, 1e-13, 400).unwrap();
        let rho = spec.spectral_radius();
        let c = &sol.changes;
        let n = c.len();
        let start = n.saturating_sub(10);
        let bound = c[start] * 1.0001;
        for (j, &x) in c[start..].iter().enumerate() {
            if x > 0.0 {
                assert!(x <= bound * rho.powi(j as i32) * 4.0, "{kind}: change {x} at {j}");
            }
        }
    }
}

#[test]
fn picard_reports_nonconvergence() {
    let (spec, z1, z2) = drivers_for(SystemKind::SkewElastic, [-1.0, -2.0, -1.0], 5, 1e-3, 5000);
    match solve_coupled_regulators(&spec, &z1, &z2, 0.5, 0.5, 1e-12, 2) {
        Err(Error::NonConvergence { iterations, last_change }) => {
            assert_eq!(iterations, 2);
            assert!(last_change > 1e-12);
        }
        other => panic!("expected NonConvergence, got {other:?}"),
    }
}

#[test]
fn stepper_matches_picard() {
    for (i, (kind, delta)) in TEST_DRIVERS.into_iter().enumerate() {
        let (spec, z1, z2) = drivers_for(kind, delta, 200 + i as u64, 1e-3, 20_000);
        let sol = solve_coupled_regulators(&spec, &z1, &z2, 0.5, 0.5, 1e-12, 400).unwrap();
        let (reg, gaps) = solve_coupled_regulators_stepwise(&spec, &z1, &z2, 0.5, 0.5).unwrap();
        let scale = 1.0 + reg.a.max().max(reg.gamma.max());
        assert!(reg.a.sup_distance(&sol.regulators.a) <= 1e-9 * scale, "{kind}");
        assert!(reg.gamma.sup_distance(&sol.regulators.gamma) <= 1e-9 * scale, "{kind}");
        assert!(gaps.g.sup_distance(&sol.gaps.g) <= 1e-9 * scale);
        assert!(gaps.h.sup_distance(&sol.gaps.h) <= 1e-9 * scale);
    }
}

#[test]
fn middle_diffusive_separation() {
    let (spec, z1, z2) = drivers_for(SystemKind::MiddleDiffusive, [0.01, 0.02, 0.03], 7, 1e-3, 100_000);
    let sol = solve_coupled_regulators(&spec, &z1, &z2, 1.0, 1.0, 1e-10, 200).unwrap();
    let rep = local_time_identification_check(&sol.regulators, &sol.gaps, 1e-10, true);
    assert!(rep.flat_ok());
    assert_eq!(rep.simultaneous, 0);
    assert!(rep.a_increases > 0 && rep.gamma_increases > 0);
}

/// Between regulator increases `G + H` moves by `−(δ3 − δ1)·dt` exactly.
#[test]
fn gap_sum_finite_variation() {
    for kind in [SystemKind::MiddleDiffusive, SystemKind::SkewElastic] {
        let delta = [0.1, 0.2, 0.4];
        let (spec, z1, z2) = drivers_for(kind, delta, 9, 1e-3, 50_000);
        let (reg, gaps) = solve_coupled_regulators_stepwise(&spec, &z1, &z2, 1.0, 1.0).unwrap();
        let (q12, q21) = (spec.q12(), spec.q21());
        for k in 1..z1.len() {
            let da = reg.a.values[k] - reg.a.values[k - 1];
            let dg = reg.gamma.values[k] - reg.gamma.values[k - 1];
            let ds = gaps.g.values[k] + gaps.h.values[k] - gaps.g.values[k - 1] - gaps.h.values[k - 1];
            let expected = -(delta[2] - delta[0]) * 1e-3 + (1.0 - q21) * da + (1.0 - q12) * dg;
            assert_abs_diff_eq!(ds, expected, epsilon = 1e-9);
        }
    }
}

/// Refines a Brownian path by bridge midpoints.
fn refine(w: &SamplePath<f64>, rng: &mut ChaCha8Rng) -> SamplePath<f64> {
    let dt = w.grid.dt / 2.0;
    let mut v = vec![w.values[0]];
    for k in 1..w.len() {
        let z: f64 = StandardNormal.sample(rng);
        let mid = 0.5 * (w.values[k - 1] + w.values[k]) + (dt / 2.0).sqrt() * z;
        v.push(mid);
        v.push(w.values[k]);
    }
    SamplePath::new(TimeGrid::new(dt, 2 * w.grid.n_steps).unwrap(), v).unwrap()
}

#[test]
fn grid_refinement_shrinks_change() {
    let spec = md([0.0, 0.5, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut changes = vec![];
    let mut w = brownian(grid(1e-2, 1000), 21);
    let mut prev: Option<[f64; 2]> = None;
    for _ in 0..5 {
        let g = w.grid;
        let z1 = SamplePath::new(g, (0..g.len()).map(|k| spec.m[0] * g.time(k) - w.values[k]).collect()).unwrap();
        let z2 = SamplePath::new(g, (0..g.len()).map(|k| spec.m[1] * g.time(k) + w.values[k]).collect()).unwrap();
        let (reg, _) = solve_coupled_regulators_stepwise(&spec, &z1, &z2, 0.5, 0.5).unwrap();
        let end = [reg.a.last(), reg.gamma.last()];
        if let Some(p) = prev {
            changes.push((end[0] - p[0]).abs().max((end[1] - p[1]).abs()));
        }
        prev = Some(end);
        w = refine(&w, &mut rng);
    }
    assert!(changes[3] < changes[0] && changes[2] < changes[0], "{changes:?}");
}
