//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::PathBuf;
use std::time::Instant;

use lyapbar::certify::{self, Certificate, CheckStatus, Tolerances};
use lyapbar::cli::{self, CommonArgs, Command, RunConfig};
use lyapbar::converse::{self, ConverseOptions, NumericLyapunov, DEFAULT_TAUS};
use lyapbar::dynamics::{
    default_policy_battery, integrate, DisturbancePolicy, IntegrationSettings, PerturbedSystem,
};
use lyapbar::expr::{ScalarField, VectorField};
use lyapbar::geometry::{mask_extent, BoxSet, Grid, ProperIndicator, SetSpec};
use lyapbar::reach::{ProbeSettings, Semantics, Sweep, UasVerdict};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run_cli(make: fn(CommonArgs) -> Command, config: &str, out: &std::path::Path) -> cli::Outcome {
    let args = CommonArgs {
        config: config_path(config),
        out: out.to_path_buf(),
        threads: None,
        seed: None,
    };
    cli::execute(&make(args)).expect("command runs")
}

fn interval(lo: f64, hi: f64) -> SetSpec {
    SetSpec::Box(BoxSet::interval(lo, hi).unwrap())
}

fn example14(delta: f64) -> PerturbedSystem {
    PerturbedSystem::new(VectorField::parse(&["-x + x^2"], &["x"]).unwrap(), delta).unwrap()
}

fn a_lo() -> f64 {
    0.5 - 0.5 * 2f64.sqrt()
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion1(out: &std::path::Path) -> Outcome {
    let t0 = Instant::now();
    let o = run_cli(Command::VerifyRas, "example14.toml", out);
    let secs = t0.elapsed().as_secs_f64();
    let res = &o.report["result"];
    let max_state = res["state_max"][0].as_f64().unwrap_or(f64::INFINITY);
    let witness = res["witness_t"].as_f64();
    let pass = o.exit_code == 0 && max_state < 0.6 - 1e-3 && witness.is_some_and(f64::is_finite) && secs < 60.0;
    outcome(
        pass,
        format!(
            "exit {} witness_T {:?} max sample {max_state:.4} runtime {secs:.1}s",
            o.exit_code, witness
        ),
    )
}

fn criterion2(out: &std::path::Path) -> Outcome {
    let o = run_cli(Command::InvariantSet, "example14.toml", out);
    let res = &o.report["result"];
    let lo = res["lo"][0].as_f64().unwrap_or(f64::NAN);
    let hi = res["hi"][0].as_f64().unwrap_or(f64::NAN);
    let pass = (lo - a_lo()).abs() <= 2e-3 && (hi - 0.5).abs() <= 2e-3;

    // Diagnostic: late-time reach set of W.
    let sys = example14(0.25);
    let grid = Grid::new(BoxSet::interval(-1.5, 1.5).unwrap(), 1e-3).unwrap();
    let battery = default_policy_battery(&sys, 8, 20240601, 0.1, &[]).unwrap();
    let sweep = Sweep::new(&sys, &grid, &battery, IntegrationSettings::new(1e-3, 30.0));
    let late = sweep
        .reach_tube(&interval(-1.0, -0.9), 20.0, 30.0, Semantics::SampledUnder)
        .unwrap();
    let (llo, lhi) = mask_extent(&grid, &late.mask).unwrap();
    outcome(
        pass,
        format!(
            "invariant mask [{lo:.4}, {hi:.4}] vs expected [{:.6}, 0.5]; late-time reach set of W on [20, 30] is [{:.4}, {:.4}]",
            a_lo(),
            llo[0],
            lhi[0]
        ),
    )
}

fn criterion3() -> Outcome {
    let text = std::fs::read_to_string(config_path("example14.toml")).unwrap();
    let r = RunConfig::from_toml(&text).unwrap().resolve().unwrap();
    let grid = r.grid().unwrap().clone();
    let pc = r.config.probe.clone().unwrap();
    let mut probe = ProbeSettings::new(pc.eps.clone(), pc.rho, pc.horizon.unwrap());
    probe.dt = pc.dt;
    let a = r.set("A").unwrap().clone();

    let robust = r.system.with_delta(0.2).unwrap();
    let battery = r.battery_for(&robust).unwrap();
    let ok = Sweep::new(&robust, &grid, &battery, r.settings.clone())
        .probe_uas(&a, &probe)
        .unwrap();

    let battery = r.battery().unwrap();
    let bad = Sweep::new(&r.system, &grid, &battery, r.settings.clone())
        .probe_uas(&a, &probe)
        .unwrap();
    let (bad_ok, detail) = match &bad.verdict {
        UasVerdict::Violated(c) => (
            c.x0[0] > 0.5 && c.x0[0] <= 0.51 + 1e-12 && c.policy == "constant[+0.25]" && c.peak_state[0] > 1.0,
            format!("x0 {:.4} policy {} peak {:.3e}", c.x0[0], c.policy, c.peak_state[0]),
        ),
        UasVerdict::ConsistentWithUas => (false, "no counterexample".into()),
    };
    outcome(
        ok.consistent() && bad_ok,
        format!(
            "delta 0.20 {}; delta 0.25 violated: {detail}",
            if ok.consistent() { "consistent_with_UAS" } else { "violated" }
        ),
    )
}

fn criterion4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vars = ["x1", "x2"];
    let monomials = ["1", "x1", "x2", "x1^2", "x1*x2", "x2^2", "x1^3", "x1^2*x2", "x1*x2^2", "x2^3"];
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let poly = |rng: &mut ChaCha8Rng| {
            monomials
                .iter()
                .map(|m| format!("({:.6})*{m}", rng.random_range(-2.0..2.0)))
                .collect::<Vec<_>>()
                .join(" + ")
        };
        let v = ScalarField::parse(&poly(&mut rng), &vars).unwrap();
        let f = VectorField::parse(&[poly(&mut rng), poly(&mut rng)], &vars).unwrap();
        let delta = rng.random_range(0.0..1.0);
        let sys = PerturbedSystem::new(f, delta).unwrap();
        let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let grad = v.grad();
        let closed = certify::worst_case_lie(&grad, &sys, &x);
        let g = grad.eval(&x).unwrap();
        let fx = sys.f().eval(&x).unwrap();
        let mut brute = f64::NEG_INFINITY;
        for k in 0..10_000 {
            let th = k as f64 / 10_000.0 * std::f64::consts::TAU;
            let d = [delta * th.cos(), delta * th.sin()];
            brute = brute.max(g[0] * (fx[0] + d[0]) + g[1] * (fx[1] + d[1]));
        }
        let rel = (closed - brute).abs() / closed.abs().max(1.0);
        worst = worst.max(rel);
    }
    outcome(worst <= 1e-6, format!("200 cases, worst relative gap {worst:.2e}"))
}

fn criterion5() -> Outcome {
    let grid = Grid::new(BoxSet::interval(-2.5, 2.5).unwrap(), 1e-2).unwrap();
    let v = ScalarField::parse("x^2", &["x"]).unwrap();
    let w = interval(-0.5, 0.5);
    let (b, c) = certify::barrier_from_lyapunov(&v, &w, &w, &grid, 0.05).unwrap();
    let mut cert = Certificate::new(v, interval(-1.5, 1.5));
    cert.b = Some(b);
    let u = SetSpec::BoxComplement(BoxSet::interval(-2.0, 2.0).unwrap());
    let a = interval(0.0, 0.0);
    let run = |delta: f64| {
        let sys = PerturbedSystem::new(VectorField::parse(&["-x"], &["x"]).unwrap(), delta).unwrap();
        certify::check_prop11(&cert, &sys, &a, &w, &u, &grid, Tolerances::default()).unwrap()
    };
    let clean = run(0.0);
    let noisy = run(0.4);
    let repeat = run(0.4);
    let cex = noisy
        .counterexamples
        .iter()
        .find(|c| c.condition == "c4_barrier_nondecreasing");
    let pass = (c - 0.2625).abs() < 1e-12
        && clean.passed()
        && clean.passed() == run(0.0).passed()
        && noisy.status("c4_barrier_nondecreasing") == Some(CheckStatus::Fail)
        && cex.is_some_and(|c| c.x[0].abs() < 0.4)
        && noisy == repeat;
    outcome(
        pass,
        format!(
            "c = {c:.4}; delta 0 passed {}; delta 0.4 condition (4) counterexample {:?}; reproducible {}",
            clean.passed(),
            cex.map(|c| c.x[0]),
            noisy == repeat
        ),
    )
}

fn criterion6() -> Outcome {
    let sys = PerturbedSystem::new(VectorField::parse(&["-x"], &["x"]).unwrap(), 0.0).unwrap();
    let omega = ProperIndicator::new(interval(0.0, 0.0), None).unwrap();
    let battery = default_policy_battery(&sys, 0, 1, 0.1, &[]).unwrap();
    let settings = IntegrationSettings::new(1e-3, 10.0);
    let opts = ConverseOptions::default();
    let points: Vec<Vec<f64>> = (0..=200).map(|k| vec![-1.0 + k as f64 * 0.01]).collect();
    let env = converse::estimate_kl(&sys, &omega, &points, &battery, &settings, &opts).unwrap();
    let mut worst_rel: f64 = 0.0;
    for (k, s) in env.s_bins.iter().enumerate() {
        for (j, t) in env.t_samples.iter().enumerate() {
            if *t <= 5.0 {
                let exact = s * (-t).exp();
                worst_rel = worst_rel.max((env.table[k][j] - exact).abs() / exact);
            }
        }
    }
    let lambda = 0.5 * env.decay_rate;
    let pair = converse::sontag_fit(&env, lambda, &opts).unwrap();
    let v = NumericLyapunov::new(&sys, &omega, &pair, &battery, settings, 0.5 * lambda).unwrap();
    let samples = converse::sample_box(&BoxSet::interval(-1.0, 1.0).unwrap(), 200, 6);
    let report = converse::validate_v(&v, &samples, &DEFAULT_TAUS, 1e-3).unwrap();
    let pass = worst_rel <= 0.05 && pair.margin >= 0.0 && report.passed();
    outcome(
        pass,
        format!(
            "envelope worst relative error {worst_rel:.2e}; decay {:.4}; pair margin {:.2e}; validation passed {} ({} decrease checks)",
            env.decay_rate, pair.margin, report.passed(), report.decrease.checked
        ),
    )
}

fn criterion7(out: &std::path::Path) -> Outcome {
    let text = std::fs::read_to_string(config_path("example14_robust.toml")).unwrap();
    let r = RunConfig::from_toml(&text).unwrap().resolve().unwrap();
    let grid = r.grid().unwrap();
    let battery = r.battery().unwrap();
    let winning = Sweep::new(&r.system, grid, &battery, r.settings.clone())
        .winning_set(r.set("A").unwrap(), r.set("U").unwrap(), r.settings.horizon, None)
        .unwrap();
    let d = r.set("D").unwrap();
    let d_inside = grid
        .points_in(d)
        .iter()
        .all(|&i| winning.mask[i]);

    let o = run_cli(Command::ConstructLyapunov, "example14_robust.toml", out);
    let val: &Value = &o.report["result"]["validation"];
    let flag = |k: &str| val[k]["passed"].as_bool().unwrap_or(false);
    let pass = d_inside && o.exit_code == 0 && flag("sandwich_lower") && flag("sandwich_upper") && flag("decrease");
    outcome(
        pass,
        format!(
            "D inside sampled winning set {d_inside}; samples {}; sandwich {}/{}; decrease {} (worst slack {:.3})",
            val["samples"],
            flag("sandwich_lower"),
            flag("sandwich_upper"),
            flag("decrease"),
            val["decrease"]["worst_margin"].as_f64().unwrap_or(f64::NAN)
        ),
    )
}

fn rk4_order() -> (bool, String) {
    // x' = x^2 - x has x(t) = 1 / (1 + (1/x0 - 1) e^t).
    let sys = example14(0.0);
    let x0 = -0.5;
    let exact = 1.0 / (1.0 + (1.0 / x0 - 1.0) * 2f64.exp());
    let err = |dt: f64| {
        let tr = integrate(&sys, &[x0], &DisturbancePolicy::Zero, &IntegrationSettings::new(dt, 2.0)).unwrap();
        (tr.final_state()[0] - exact).abs()
    };
    let ratio = err(0.1) / err(0.05);
    (ratio >= 12.0, format!("RK4 halving ratio {ratio:.2}"))
}

fn tube_monotonicity() -> (bool, String) {
    let grid = Grid::new(BoxSet::interval(-1.5, 1.5).unwrap(), 1e-2).unwrap();
    let w = interval(-1.0, -0.9);
    let tube = |delta: f64, t: f64| {
        let sys = example14(delta);
        let battery = default_policy_battery(&sys, 4, 9, 0.1, &[]).unwrap();
        Sweep::new(&sys, &grid, &battery, IntegrationSettings::new(1e-3, t))
            .reach_tube(&w, 0.0, t, Semantics::SampledUnder)
            .unwrap()
            .mask
    };
    let subset = |a: &[bool], b: &[bool]| a.iter().zip(b).all(|(x, y)| !*x || *y);
    let in_delta = subset(&tube(0.1, 5.0), &tube(0.25, 5.0));
    let in_t = subset(&tube(0.25, 1.0), &tube(0.25, 5.0));
    (in_delta && in_t, format!("tube monotone in delta {in_delta}, in T {in_t}"))
}

fn extremal_oracle() -> (bool, String) {
    let sys = example14(0.25);
    let grid = Grid::new(BoxSet::interval(-1.5, 1.5).unwrap(), 1e-3).unwrap();
    let battery = default_policy_battery(&sys, 4, 9, 0.1, &[]).unwrap();
    let settings = IntegrationSettings::new(1e-3, 5.0);
    let tube = Sweep::new(&sys, &grid, &battery, settings.clone())
        .reach_tube(&interval(-1.0, -0.9), 0.0, 5.0, Semantics::SampledUnder)
        .unwrap();
    let (lo, hi) = mask_extent(&grid, &tube.mask).unwrap();
    let mut o_lo = f64::INFINITY;
    let mut o_hi = f64::NEG_INFINITY;
    for x0 in [-1.0, -0.9] {
        for d in [-0.25, 0.25] {
            let tr = integrate(&sys, &[x0], &DisturbancePolicy::Constant(vec![d]), &settings).unwrap();
            for s in &tr.states {
                o_lo = o_lo.min(s[0]);
                o_hi = o_hi.max(s[0]);
            }
        }
    }
    let cell = grid.widths()[0];
    let pass = (lo[0] - o_lo).abs() <= cell && (hi[0] - o_hi).abs() <= cell;
    (pass, format!("tube [{:.4}, {:.4}] vs extremal [{o_lo:.4}, {o_hi:.4}]", lo[0], hi[0]))
}

fn winning_properties() -> (bool, String) {
    let sys = example14(0.2);
    let grid = Grid::new(BoxSet::interval(-1.5, 1.5).unwrap(), 1e-2).unwrap();
    let battery = default_policy_battery(&sys, 4, 9, 0.1, &[]).unwrap();
    let settings = IntegrationSettings::new(1e-3, 20.0);
    let a = interval(a_lo(), 0.5);
    let u = interval(0.6, f64::INFINITY);
    let ws = Sweep::new(&sys, &grid, &battery, settings.clone())
        .winning_set(&a, &u, 20.0, None)
        .unwrap();
    let u_mask = grid.mask_of(&u);
    let disjoint = ws.mask.iter().zip(&u_mask).all(|(w, u)| !(*w && *u));
    let mut closed = true;
    'outer: for i in (0..grid.len()).filter(|&i| ws.mask[i]) {
        for p in &battery {
            let tr = integrate(&sys, &grid.point(i), p, &settings).unwrap();
            for s in tr.states.iter().step_by(10) {
                let ok = grid.locate(s).is_some_and(|c| ws.mask[c]) || a.dist_raw(s) <= ws.conv_radius;
                if !ok {
                    closed = false;
                    break 'outer;
                }
            }
        }
    }
    (disjoint && closed, format!("winning set disjoint from U {disjoint}, forward-closed {closed}"))
}

fn gradient_corpus() -> (bool, String) {
    let corpus = [
        "x1^2 + x2^2",
        "sin(x1) * cos(x2)",
        "exp(-x1^2 - x2^2)",
        "log(1 + x1^2) + sqrt(4 + x2^2)",
        "tanh(x1 * x2)",
        "x1^3 - 3*x1*x2^2",
        "(x1 - x2) / (2 + x1^2)",
        "(x1^2 + 1) ^ 0.5 + x2",
        "-x1 + x1^2 + 0.25*x2",
        "abs(x1) + x2",
        "max(x1, x2) + min(x1^2, x2)",
        "exp(sin(x1) + cos(x2))",
        "(1 + x1^2)^x2",
        "sqrt(1 + x1^2 + x2^4)",
        "x2 * log(2 + sin(x1))",
    ];
    let vars = ["x1", "x2"];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for src in corpus {
        let f = ScalarField::parse(src, &vars).unwrap();
        let g = f.grad();
        for _ in 0..20 {
            let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let gx = g.eval(&x).unwrap();
            for k in 0..2 {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let fd = (f.eval_raw(&xp) - f.eval_raw(&xm)) / (2.0 * h);
                worst = worst.max((gx[k] - fd).abs() / gx[k].abs().max(1.0));
            }
        }
    }
    (worst <= 1e-4, format!("gradient vs finite difference worst relative gap {worst:.2e}"))
}

fn criterion8() -> Outcome {
    let t0 = Instant::now();
    let parts = [
        rk4_order(),
        tube_monotonicity(),
        extremal_oracle(),
        winning_properties(),
        gradient_corpus(),
    ];
    let pass = parts.iter().all(|p| p.0) && t0.elapsed().as_secs() < 600;
    let detail = parts
        .iter()
        .map(|(ok, d)| format!("{d} [{}]", if *ok { "ok" } else { "FAILED" }))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, format!("{detail}; {:.1}s", t0.elapsed().as_secs_f64()))
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let started = Instant::now();
    let criteria: Vec<Criterion> = vec![
        ("1 Example 14 reach-avoid-stay", Box::new(|| criterion1(out))),
        ("2 Example 14 maximal invariant set", Box::new(|| criterion2(out))),
        ("3 robustness gap probe", Box::new(criterion3)),
        ("4 worst-case Lie closed form", Box::new(criterion4)),
        ("5 certificate checker soundness", Box::new(criterion5)),
        ("6 converse pipeline, linear", Box::new(criterion6)),
        ("7 converse pipeline, Example 14 at 0.2", Box::new(|| criterion7(out))),
        ("8 property suites", Box::new(criterion8)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let t0 = Instant::now();
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {name}: {} ({:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
