use lyapbar::certify::{self, Certificate, KFunction, Tolerances};
use lyapbar::converse::{self, ConverseOptions, NumericLyapunov};
use lyapbar::dynamics::{
    default_policy_battery, integrate, DisturbancePolicy, IntegrationSettings, PerturbedSystem,
};
use lyapbar::expr::{ScalarField, VectorField};
use lyapbar::geometry::{BoxSet, Grid, ProperIndicator, SetSpec};
use lyapbar::reach::{Semantics, Sweep};
use proptest::prelude::*;

fn interval(lo: f64, hi: f64) -> SetSpec {
    SetSpec::Box(BoxSet::interval(lo, hi).unwrap())
}

fn linear(a: f64) -> PerturbedSystem {
    PerturbedSystem::new(VectorField::parse(&[format!("-{a}*x")], &["x"]).unwrap(), 0.0).unwrap()
}

fn origin() -> ProperIndicator {
    ProperIndicator::new(interval(0.0, 0.0), None).unwrap()
}

fn envelope(a: f64, c: f64) -> converse::KlEnvelope {
    let sys = PerturbedSystem::new(
        VectorField::parse(&[format!("-{a}*x - {c}*x^3")], &["x"]).unwrap(),
        0.0,
    )
    .unwrap();
    let battery = default_policy_battery(&sys, 0, 1, 0.1, &[]).unwrap();
    let points: Vec<Vec<f64>> = (0..=60).map(|k| vec![-1.0 + k as f64 / 30.0]).collect();
    converse::estimate_kl(
        &sys,
        &origin(),
        &points,
        &battery,
        &IntegrationSettings::new(1e-2, 10.0),
        &ConverseOptions::default(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn worst_case_lie_scales_with_v(
        c in 0.1f64..10.0,
        delta in 0.0f64..1.0,
        x in -2.0f64..2.0,
        y in -2.0f64..2.0,
    ) {
        let vars = ["x", "y"];
        let src = "x^2 + x*y + 2*y^4";
        let sys = PerturbedSystem::new(VectorField::parse(&["y", "-x - y + x^3"], &vars).unwrap(), delta).unwrap();
        let v = ScalarField::parse(src, &vars).unwrap();
        let cv = ScalarField::parse(&format!("{c}*({src})"), &vars).unwrap();
        let base = certify::worst_case_lie(&v.grad(), &sys, &[x, y]);
        let scaled = certify::worst_case_lie(&cv.grad(), &sys, &[x, y]);
        prop_assert!((scaled - c * base).abs() <= 1e-9 * scaled.abs().max(1.0));
    }

    #[test]
    fn rk4_semigroup(x0 in -1.0f64..0.4, d in -0.2f64..0.2, k1 in 1usize..300, k2 in 1usize..300) {
        let sys = PerturbedSystem::new(VectorField::parse(&["-x + x^2"], &["x"]).unwrap(), 0.2).unwrap();
        let policy = DisturbancePolicy::Constant(vec![d]);
        let dt = 1e-2;
        let run = |x: f64, k: usize| {
            integrate(&sys, &[x], &policy, &IntegrationSettings::new(dt, k as f64 * dt)).unwrap().final_state()[0]
        };
        let split = run(run(x0, k1), k2);
        let whole = run(x0, k1 + k2);
        prop_assert!((split - whole).abs() <= 1e-12);
    }

    #[test]
    fn batteries_are_deterministic(seed in any::<u64>(), x0 in -1.0f64..0.4) {
        let sys = PerturbedSystem::new(VectorField::parse(&["-x + x^2"], &["x"]).unwrap(), 0.25).unwrap();
        let a = default_policy_battery(&sys, 3, seed, 0.1, &[]).unwrap();
        let b = default_policy_battery(&sys, 3, seed, 0.1, &[]).unwrap();
        prop_assert_eq!(a.len(), b.len());
        let settings = IntegrationSettings::new(1e-2, 3.0);
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!(p.label(), q.label());
            let tp = integrate(&sys, &[x0], p, &settings).unwrap();
            let tq = integrate(&sys, &[x0], q, &settings).unwrap();
            prop_assert_eq!(tp.states, tq.states);
        }
    }

    #[test]
    fn necessity_chain(a in 0.5f64..3.0, w in 0.2f64..0.8) {
        let sys = linear(a);
        let grid = Grid::new(BoxSet::interval(-2.5, 2.5).unwrap(), 1e-2).unwrap();
        let v = ScalarField::parse("x^2", &["x"]).unwrap();
        let mut cert = Certificate::new(v.clone(), interval(-1.5, 1.5));
        cert.alpha1 = Some(KFunction::parse("s^2").unwrap());
        cert.alpha2 = Some(KFunction::parse("s^2").unwrap());
        cert.omega = Some(origin());
        let lyap = certify::check_theorem8(&cert, &sys, &grid, Tolerances::default()).unwrap();
        prop_assert!(lyap.passed());

        let ws = interval(-w, w);
        let (b, _) = certify::barrier_from_lyapunov(&v, &ws, &ws, &grid, 0.05).unwrap();
        cert.b = Some(b);
        let u = SetSpec::BoxComplement(BoxSet::interval(-2.0, 2.0).unwrap());
        let report = certify::check_prop11(&cert, &sys, &interval(0.0, 0.0), &ws, &u, &grid, Tolerances::default()).unwrap();
        prop_assert!(report.passed());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn kl_envelope_is_monotone(a in 0.5f64..2.0, c in 0.0f64..1.0) {
        let env = envelope(a, c);
        for row in &env.table {
            prop_assert!(row.windows(2).all(|w| w[1] <= w[0]));
        }
        for j in 0..env.t_samples.len() {
            prop_assert!(env.table.windows(2).all(|r| r[0][j] <= r[1][j]));
        }
    }

    #[test]
    fn sontag_pair_dominates_envelope(a in 0.5f64..2.0, c in 0.0f64..1.0) {
        let env = envelope(a, c);
        let opts = ConverseOptions::default();
        let pair = converse::sontag_fit(&env, 0.5 * env.decay_rate, &opts).unwrap();
        for (k, s) in env.s_bins.iter().enumerate() {
            for (j, t) in env.t_samples.iter().enumerate() {
                let lhs = pair.alpha1(env.table[k][j]);
                let rhs = pair.alpha2(*s) * (-pair.lambda * t).exp();
                prop_assert!(lhs <= rhs * (1.0 + 1e-9), "s {s} t {t}: {lhs} > {rhs}");
            }
        }
    }
}

#[test]
fn doubling_mu_scales_decrease_rate() {
    let sys = linear(1.0);
    let omega = origin();
    let battery = default_policy_battery(&sys, 0, 1, 0.1, &[]).unwrap();
    let settings = IntegrationSettings::new(1e-3, 10.0);
    let opts = ConverseOptions::default();
    let points: Vec<Vec<f64>> = (0..=100).map(|k| vec![-1.0 + k as f64 * 0.02]).collect();
    let env = converse::estimate_kl(&sys, &omega, &points, &battery, &settings, &opts).unwrap();
    let pair = converse::sontag_fit(&env, 0.5 * env.decay_rate, &opts).unwrap();
    let samples = converse::sample_box(&BoxSet::interval(-1.0, 1.0).unwrap(), 40, 3);
    for mu in [0.2, 0.4] {
        let v = NumericLyapunov::new(&sys, &omega, &pair, &battery, settings.clone(), mu).unwrap();
        let report = converse::validate_v(&v, &samples, &converse::DEFAULT_TAUS, 1e-3).unwrap();
        let rate = report.min_decrease_rate.unwrap();
        assert!(rate >= 0.8 * mu, "mu {mu}: measured rate {rate}");
    }
}

#[test]
fn reach_tube_is_reproducible() {
    let sys = PerturbedSystem::new(VectorField::parse(&["-x + x^2"], &["x"]).unwrap(), 0.25).unwrap();
    let grid = Grid::new(BoxSet::interval(-1.5, 1.5).unwrap(), 1e-2).unwrap();
    let tube = || {
        let battery = default_policy_battery(&sys, 4, 77, 0.1, &[]).unwrap();
        Sweep::new(&sys, &grid, &battery, IntegrationSettings::new(1e-2, 5.0))
            .reach_tube(&interval(-1.0, -0.9), 0.0, 5.0, Semantics::SampledUnder)
            .unwrap()
            .mask
    };
    assert_eq!(tube(), tube());
}
