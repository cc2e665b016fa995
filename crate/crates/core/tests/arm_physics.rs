use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlgssm::arm::*;

fn no_damping() -> ArmConfig {
    ArmConfig {
        damping: 0.0,
        ..ArmConfig::default()
    }
}

#[test]
fn kinetic_energy_conserved_without_damping() {
    let c = no_damping();
    let mut s = ArmState::at_rest([0.5, 1.2]);
    assert_eq!(integrate(&s, &[0.0; 4], &c).unwrap().theta, s.theta);

    s.dtheta = [0.3, -0.4];
    let e0 = kinetic_energy(s.theta, s.dtheta, &c);
    for _ in 0..10 {
        s = integrate(&s, &[0.0; 4], &c).unwrap();
    }
    let e1 = kinetic_energy(s.theta, s.dtheta, &c);
    // moving start: semi-implicit Euler with a pose-dependent mass matrix
    // keeps energy only to O(h)
    assert!(((e1 - e0) / e0).abs() < 5e-3, "energy drift {e0} -> {e1}");
}

#[test]
fn damping_dissipates_energy() {
    let c = ArmConfig::default();
    let mut s = ArmState::at_rest([0.5, 1.2]);
    s.dtheta = [0.8, -0.6];
    let mut e = kinetic_energy(s.theta, s.dtheta, &c);
    for _ in 0..30 {
        s = integrate(&s, &[0.0; 4], &c).unwrap();
        let n = kinetic_energy(s.theta, s.dtheta, &c);
        assert!(n <= e + 1e-12, "{n} > {e}");
        e = n;
    }
}

fn theta_after_one_step(substeps: usize) -> [f64; 2] {
    let c = ArmConfig {
        substeps,
        ..ArmConfig::default()
    };
    let mut s = ArmState::at_rest([0.6, 1.0]);
    s.dtheta = [0.2, 0.1];
    s.activation = [0.2, 0.1, 0.4, 0.0];
    integrate(&s, &[0.9, 0.1, 0.7, 0.2], &c).unwrap().theta
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

// Strong stimulation accelerates the forearm at O(100) rad/s², so the
// one-step position error of a first-order scheme is O(a·T·h) ≈ 1e-2 rad.
// The check is on the convergence order.
#[test]
fn step_halving_converges_at_first_order() {
    let (t10, t20, t40) = (
        theta_after_one_step(10),
        theta_after_one_step(20),
        theta_after_one_step(40),
    );
    let d1 = dist(t10, t20);
    let d2 = dist(t20, t40);
    assert!(d1 < 0.05, "halving changed theta by {d1}");
    let ratio = d1 / d2;
    assert!((1.7..2.3).contains(&ratio), "error ratio {ratio}");
}

#[test]
fn fatigue_equilibrium_matches_ode() {
    let (tf, tr, phi0): (f64, f64, f64) = (30.0, 60.0, 1.0);
    let k = 1.0 / tf + 1.0 / tr;
    let eq = (1.0 / tr) / k;
    assert!((eq - 1.0 / 3.0).abs() < 1e-15);
    let exact = |t: f64| eq + (phi0 - eq) * (-k * t).exp();

    let mut coarse = phi0;
    for _ in 0..3000 {
        coarse = fatigue_step(coarse, 1.0, tf, tr, 0.01, 0.2);
    }
    let mut fine = phi0;
    for _ in 0..300_000 {
        fine = fatigue_step(fine, 1.0, tf, tr, 1e-4, 0.2);
    }
    assert!((fine - exact(30.0)).abs() < 1e-6);
    assert!((coarse - fine).abs() < 1e-4);

    let mut long = phi0;
    for _ in 0..200_000 {
        long = fatigue_step(long, 1.0, tf, tr, 0.01, 0.2);
    }
    assert!((long - eq).abs() < 1e-9);
}

#[test]
fn sustained_stimulation_fatigues_monotonically() {
    let c = ArmConfig::default();
    let mut s = ArmState::at_rest([0.5, 1.0]);
    let eq = 1.0 / 3.0;
    let mut prev = s.phi[0];
    for _ in 0..3000 {
        s = integrate(&s, &[1.0, 0.0, 0.0, 0.0], &c).unwrap();
        if prev - eq > 1e-6 {
            assert!(s.phi[0] <= prev);
        }
        prev = s.phi[0];
    }
    assert!((s.phi[0] - eq).abs() < 1e-3);
    assert_eq!(s.phi[1], 1.0);
}

#[test]
fn fatigue_is_hidden_but_matters() {
    let c = ArmConfig::default();
    let fresh = ArmState::at_rest([0.4, 0.9]);
    let mut tired = fresh;
    tired.phi = [0.5; 4];
    assert_eq!(fresh.observation(), tired.observation());
    let e = [0.8, 0.1, 0.6, 0.2];
    let a = env_step(&fresh, &e, [0.0, 0.0], &c).unwrap();
    let b = env_step(&tired, &e, [0.0, 0.0], &c).unwrap();
    assert_ne!(a.observation, b.observation);
    assert!(dist(a.state.theta, b.state.theta) > 1e-3);
}

#[test]
fn stepping_is_deterministic() {
    let c = ArmConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (s, _, t) = env_reset(&mut rng, &ResetRanges::from_config(&c));
    let e = [0.3, 0.6, 0.1, 0.9];
    assert_eq!(
        env_step(&s, &e, t, &c).unwrap(),
        env_step(&s, &e, t, &c).unwrap()
    );
}

#[test]
fn resets_stay_in_range() {
    let c = ArmConfig::default();
    let ranges = ResetRanges::from_config(&c);
    let lim = c.limits();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let first = env_reset(&mut ChaCha8Rng::seed_from_u64(5), &ranges);
    for i in 0..1000 {
        let (s, o, t) = env_reset(&mut rng, &ranges);
        if i == 0 {
            assert_eq!((s, o, t), first);
        }
        assert!(s.phi.iter().all(|p| (0.4..=1.0).contains(p)));
        for j in 0..2 {
            assert!((lim[j][0]..=lim[j][1]).contains(&s.theta[j]));
            assert!((lim[j][0]..=lim[j][1]).contains(&t[j]));
        }
        assert_eq!(s.dtheta, [0.0; 2]);
        assert_eq!(s.activation, [0.0; 4]);
    }
}

#[test]
fn million_step_fuzz_keeps_ranges() {
    let c = ArmConfig::default();
    let lim = c.limits();
    let mut env = ArmEnv::new(c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    env.reset(&mut rng);
    for _ in 0..1_000_000 {
        let e: [f64; 4] = std::array::from_fn(|_| rng.gen());
        let tr = env.step(&e, &mut rng).unwrap();
        let s = &env.state;
        assert!(s.activation.iter().all(|a| (0.0..=1.0).contains(a)));
        assert!(s.phi.iter().all(|p| *p > 0.0 && *p <= 1.0));
        assert!(
            (lim[0][0]..=lim[0][1]).contains(&s.theta[0])
                && (lim[1][0]..=lim[1][1]).contains(&s.theta[1])
        );
        if tr.done {
            env.reset(&mut rng);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn activation_update_stays_in_unit_interval(a in 0.0..=1.0f64, e in 0.0..=1.0f64, dt in 1e-4..10.0f64) {
        let n = activation_step(a, e, 0.1, dt).unwrap();
        prop_assert!((0.0..=1.0).contains(&n));
        prop_assert!((n - e).abs() <= (a - e).abs() + 1e-15);
    }

    #[test]
    fn reward_is_never_positive(
        ts in -1.0..2.6f64, te in 0.0..2.6f64,
        gs in -1.0..2.6f64, ge in 0.0..2.6f64,
        e in proptest::array::uniform4(0.0..=1.0f64),
    ) {
        prop_assert!(reward([ts, te], [gs, ge], &e) <= 0.0);
    }

    #[test]
    fn random_excitation_keeps_state_valid(
        e in proptest::array::uniform4(0.0..=1.0f64),
        phi in proptest::array::uniform4(0.2..=1.0f64),
        ts in -1.0..2.6f64, te in 0.0..2.6f64,
    ) {
        let c = ArmConfig::default();
        let mut s = ArmState::at_rest([ts, te]);
        s.phi = phi;
        for _ in 0..20 {
            s = integrate(&s, &e, &c).unwrap();
        }
        prop_assert!(s.activation.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert!(s.phi.iter().all(|p| (0.2..=1.0).contains(p)));
    }
}
