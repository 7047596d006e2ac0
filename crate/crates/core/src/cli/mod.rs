//! Command-line front end: subcommands, run directories and reports.
//!
//! Exit codes: 0 yes (sampled), 1 no (counterexample found),
//! 2 configuration or runtime error, 3 inconclusive.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::certify::{self, Certificate, KFunction, Tolerances};
use crate::converse::{self, ConverseError, ConverseOptions, NumericLyapunov};
use crate::dynamics;
use crate::expr::ScalarField;
use crate::geometry::{mask_extent, BoxSet, Grid, ProperIndicator, SetSpec};
use crate::reach::{ProbeSettings, Satisfied, Semantics, Sweep, UasVerdict};

pub use config::{ConfigError, Resolved, RunConfig};

pub const EXIT_YES: i32 = 0;
pub const EXIT_NO: i32 = 1;
pub const EXIT_ERROR: i32 = 2;
pub const EXIT_INCONCLUSIVE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "lyapbar", version, about = "Sampled reachability and Lyapunov-barrier checks for perturbed ODEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides `battery.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Integrate the policy battery from `simulate.x0` or `simulate.set`.
    Simulate(CommonArgs),
    /// Reach tube from `reach.from` over `[reach.t_lo, reach.t_hi]`.
    Reach(CommonArgs),
    /// Maximal invariant subset of `invariant.set`.
    InvariantSet(CommonArgs),
    /// Cells that avoid U and converge to A.
    WinningSet(CommonArgs),
    /// Reach-avoid-stay check for (W, U, Omega).
    VerifyRas(CommonArgs),
    /// Stability-with-safety check for (W, U, A).
    VerifySws(CommonArgs),
    /// Uniform asymptotic stability probe of A.
    ProbeUas(CommonArgs),
    /// Check the `[certificate]` block.
    CheckCert(CommonArgs),
    /// Build and validate a numerical Lyapunov function.
    ConstructLyapunov(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Reach(_) => "reach",
            Command::InvariantSet(_) => "invariant-set",
            Command::WinningSet(_) => "winning-set",
            Command::VerifyRas(_) => "verify-ras",
            Command::VerifySws(_) => "verify-sws",
            Command::ProbeUas(_) => "probe-uas",
            Command::CheckCert(_) => "check-cert",
            Command::ConstructLyapunov(_) => "construct-lyapunov",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a)
            | Command::Reach(a)
            | Command::InvariantSet(a)
            | Command::WinningSet(a)
            | Command::VerifyRas(a)
            | Command::VerifySws(a)
            | Command::ProbeUas(a)
            | Command::CheckCert(a)
            | Command::ConstructLyapunov(a) => a,
        }
    }
}

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Io(PathBuf, std::io::Error),
    Failed(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "configuration error: {e}"),
            RunError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            RunError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

fn failed(e: impl std::fmt::Display) -> RunError {
    RunError::Failed(e.to_string())
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub exit_code: i32,
    pub run_dir: PathBuf,
    pub report: Value,
}

fn exit_for(s: Satisfied) -> i32 {
    match s {
        Satisfied::YesSampled => EXIT_YES,
        Satisfied::No => EXIT_NO,
        Satisfied::Inconclusive => EXIT_INCONCLUSIVE,
    }
}

fn verdict_name(code: i32) -> &'static str {
    match code {
        EXIT_YES => "yes_sampled",
        EXIT_NO => "no",
        _ => "inconclusive",
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let args = cli.command.args().clone();
    if let Some(n) = args.threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(&cli.command) {
        Ok(outcome) => {
            println!(
                "{}: {} (report: {})",
                cli.command.name(),
                verdict_name(outcome.exit_code),
                outcome.run_dir.join("report.json").display()
            );
            outcome.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

struct RunDir {
    path: PathBuf,
    artifacts: Vec<String>,
}

impl RunDir {
    fn create(parent: &Path, hash: &str) -> Result<Self, RunError> {
        let stamp = utc_stamp(Utc::now());
        let mut path = parent.join(format!("{hash}-{stamp}"));
        let mut k = 1;
        while path.exists() {
            path = parent.join(format!("{hash}-{stamp}-{k}"));
            k += 1;
        }
        fs::create_dir_all(&path).map_err(|e| RunError::Io(path.clone(), e))?;
        Ok(Self {
            path,
            artifacts: Vec::new(),
        })
    }

    fn write_with<F>(&mut self, name: &str, f: F) -> Result<(), RunError>
    where
        F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    {
        let p = self.path.join(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| RunError::Io(dir.to_path_buf(), e))?;
        }
        let file = File::create(&p).map_err(|e| RunError::Io(p.clone(), e))?;
        let mut w = BufWriter::new(file);
        f(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| RunError::Io(p.clone(), e))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
            writeln!(w)
        })
    }
}

/// `YYYYMMDDTHHMMSSZ` in UTC.
fn utc_stamp(t: DateTime<Utc>) -> String {
    t.format("%Y%m%dT%H%M%SZ").to_string()
}

fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Loads the configuration, runs the command and writes `report.json`.
pub fn execute(command: &Command) -> Result<Outcome, RunError> {
    let args = command.args();
    let text = fs::read_to_string(&args.config).map_err(|e| RunError::Io(args.config.clone(), e))?;
    let mut cfg = RunConfig::from_toml(&text)?;
    if let Some(seed) = args.seed {
        cfg.battery.seed = Some(seed);
    }
    let resolved = cfg.resolve()?;
    let hash = config_hash(&text);
    let mut dir = RunDir::create(&args.out, &hash)?;
    let started = Instant::now();
    let (code, result) = match command {
        Command::Simulate(_) => simulate(&resolved, &mut dir)?,
        Command::Reach(_) => reach(&resolved, &mut dir)?,
        Command::InvariantSet(_) => invariant_set(&resolved, &mut dir)?,
        Command::WinningSet(_) => winning_set(&resolved, &mut dir)?,
        Command::VerifyRas(_) => verify_ras(&resolved)?,
        Command::VerifySws(_) => verify_sws(&resolved)?,
        Command::ProbeUas(_) => probe_uas(&resolved)?,
        Command::CheckCert(_) => check_cert(&resolved, &mut dir)?,
        Command::ConstructLyapunov(_) => construct_lyapunov(&resolved, &mut dir)?,
    };
    let converse_seed = resolved
        .config
        .converse
        .as_ref()
        .and_then(|c| c.seed)
        .unwrap_or(resolved.seed());
    let report = json!({
        "command": command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "verdict": verdict_name(code),
        "exit_code": code,
        "config_hash": hash,
        "config_text": text,
        "config": resolved.config,
        "seeds": { "battery": resolved.seed(), "converse": converse_seed },
        "elapsed_seconds": started.elapsed().as_secs_f64(),
        "artifacts": dir.artifacts,
        "result": result,
    });
    dir.write_json("report.json", &report)?;
    Ok(Outcome {
        exit_code: code,
        run_dir: dir.path,
        report,
    })
}

type CommandResult = Result<(i32, Value), RunError>;

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn sweep<'a>(
    r: &'a Resolved,
    sys: &'a dynamics::PerturbedSystem,
    grid: &'a Grid,
    battery: &'a [dynamics::DisturbancePolicy],
) -> Sweep<'a> {
    Sweep::new(sys, grid, battery, r.settings.clone())
}

fn simulate(r: &Resolved, dir: &mut RunDir) -> CommandResult {
    let sim = r
        .config
        .simulate
        .as_ref()
        .ok_or_else(|| ConfigError::new("simulate", "section is required"))?;
    let starts: Vec<Vec<f64>> = match (&sim.x0, &sim.set) {
        (Some(x0), _) => {
            if x0.len() != r.system.dim() {
                return Err(ConfigError::new(
                    "simulate.x0",
                    format!("has {} entries, expected {}", x0.len(), r.system.dim()),
                )
                .into());
            }
            vec![x0.clone()]
        }
        (None, Some(name)) => {
            let set = r.set(name)?;
            let mut pts: Vec<Vec<f64>> = match &r.grid {
                Some(g) => g.points_in(set).into_iter().map(|i| g.point(i)).collect(),
                None => Vec::new(),
            };
            pts.extend(set.box_corners());
            if pts.is_empty() {
                return Err(ConfigError::new("simulate.set", "has no grid points or corners").into());
            }
            pts
        }
        (None, None) => {
            return Err(ConfigError::new("simulate", "needs x0 or set").into());
        }
    };
    let battery = r.battery()?;
    let mut index = Vec::new();
    for (i, x0) in starts.iter().enumerate() {
        let runs = dynamics::ensemble(&r.system, x0, &battery, &r.settings).map_err(failed)?;
        for (j, run) in runs.into_iter().enumerate() {
            let traj = run.map_err(failed)?;
            let name = format!("trajectories/start{i:03}_policy{j:02}.csv");
            dir.write_with(&name, |w| traj.write_csv(w, &r.vars))?;
            index.push(json!({
                "file": name,
                "x0": x0,
                "policy": traj.policy,
                "termination": traj.termination,
                "final_time": traj.final_time(),
                "final_state": traj.final_state(),
            }));
        }
    }
    dir.write_json("index.json", &index)?;
    Ok((EXIT_YES, json!({ "trajectories": index.len(), "policies": battery.len() })))
}

fn reach(r: &Resolved, dir: &mut RunDir) -> CommandResult {
    let rc = r.config.reach.clone().unwrap_or_default();
    let semantics = match rc.semantics.as_str() {
        "sampled_under" => Semantics::SampledUnder,
        "lipschitz_over" => Semantics::LipschitzOver,
        other => {
            return Err(ConfigError::new(
                "reach.semantics",
                format!("unknown value `{other}` (sampled_under | lipschitz_over)"),
            )
            .into())
        }
    };
    let grid = r.grid()?;
    let battery = r.battery()?;
    let w = r.set(&rc.from)?;
    let t_hi = rc.t_hi.unwrap_or(r.settings.horizon);
    let res = sweep(r, &r.system, grid, &battery)
        .reach_tube(w, rc.t_lo, t_hi, semantics)
        .map_err(failed)?;
    dir.write_with("reach_mask.csv", |out| grid.write_mask_csv(out, &r.vars, &res.mask))?;
    let extent = mask_extent(grid, &res.mask);
    let mut v = to_value(&res);
    v["cells"] = json!(res.marked());
    v["extent"] = to_value(&extent);
    Ok((EXIT_YES, v))
}

fn invariant_set(r: &Resolved, dir: &mut RunDir) -> CommandResult {
    let ic = r.config.invariant.clone().unwrap_or_default();
    let grid = r.grid()?;
    let battery = r.battery()?;
    let omega = r.set(&ic.set)?;
    let horizon = ic.horizon.unwrap_or(r.settings.horizon);
    let inv = sweep(r, &r.system, grid, &battery)
        .maximal_invariant(omega, horizon, ic.stride)
        .map_err(failed)?;
    dir.write_with("invariant_mask.csv", |out| grid.write_mask_csv(out, &r.vars, &inv.mask))?;
    let code = if inv.empty { EXIT_NO } else { EXIT_YES };
    Ok((code, to_value(&inv)))
}

fn winning_set(r: &Resolved, dir: &mut RunDir) -> CommandResult {
    let wc = r.config.winning.clone().unwrap_or_default();
    let grid = r.grid()?;
    let battery = r.battery()?;
    let horizon = wc.horizon.unwrap_or(r.settings.horizon);
    let ws = sweep(r, &r.system, grid, &battery)
        .winning_set(r.set("A")?, r.set("U")?, horizon, wc.conv_radius)
        .map_err(failed)?;
    dir.write_with("winning_mask.csv", |out| grid.write_mask_csv(out, &r.vars, &ws.mask))?;
    let mut v = to_value(&ws);
    v["extent"] = to_value(&mask_extent(grid, &ws.mask));
    Ok((exit_for(ws.satisfied), v))
}

fn verify_ras(r: &Resolved) -> CommandResult {
    let grid = r.grid()?;
    let battery = r.battery()?;
    let v = sweep(r, &r.system, grid, &battery)
        .check_ras(r.set("W")?, r.set("U")?, r.set("Omega")?, r.settings.horizon)
        .map_err(failed)?;
    Ok((exit_for(v.satisfied), to_value(&v)))
}

fn probe_settings(r: &Resolved) -> Result<(ProbeSettings, Option<f64>), ConfigError> {
    let pc = r.config.probe.clone().unwrap_or_default();
    if pc.eps.is_empty() || pc.eps.iter().any(|e| !(*e > 0.0)) {
        return Err(ConfigError::new("probe.eps", "must be a nonempty list of positive values"));
    }
    if !(pc.rho > 0.0) {
        return Err(ConfigError::new("probe.rho", "must be positive"));
    }
    let mut s = ProbeSettings::new(pc.eps, pc.rho, pc.horizon.unwrap_or(r.settings.horizon));
    s.conv_radius = pc.conv_radius;
    s.dt = pc.dt;
    Ok((s, pc.delta))
}

fn verify_sws(r: &Resolved) -> CommandResult {
    let grid = r.grid()?;
    let battery = r.battery()?;
    let (probe, _) = probe_settings(r)?;
    let v = sweep(r, &r.system, grid, &battery)
        .check_sws(
            r.set("W")?,
            r.set("U")?,
            r.set("A")?,
            r.settings.horizon,
            &probe,
        )
        .map_err(failed)?;
    Ok((exit_for(v.satisfied), to_value(&v)))
}

fn probe_uas(r: &Resolved) -> CommandResult {
    let grid = r.grid()?;
    let (probe, delta) = probe_settings(r)?;
    let sys = r.system_with_delta(delta, "probe.delta")?;
    let battery = r.battery_for(&sys)?;
    let report = sweep(r, &sys, grid, &battery)
        .probe_uas(r.set("A")?, &probe).map_err(failed)?;
    let code = match report.verdict {
        UasVerdict::ConsistentWithUas => EXIT_YES,
        UasVerdict::Violated(_) => EXIT_NO,
    };
    let mut v = to_value(&report);
    v["delta"] = json!(sys.delta());
    Ok((code, v))
}

fn check_cert(r: &Resolved, dir: &mut RunDir) -> CommandResult {
    let cc = r
        .config
        .certificate
        .as_ref()
        .ok_or_else(|| ConfigError::new("certificate", "section is required"))?;
    let grid = r.grid()?;
    let parse = |src: &str, path: &str| {
        ScalarField::parse(src, &r.vars).map_err(|e| ConfigError::new(path, e.to_string()))
    };
    let domain = match r.sets.get("D") {
        Some(d) => d.clone(),
        None => SetSpec::Box(grid.domain().clone()),
    };
    let mut cert = Certificate::new(parse(&cc.v, "certificate.V")?, domain);
    let tolerances = Tolerances {
        tol: r.config.tolerances.tol,
        strict_tol: r.config.tolerances.strict_tol,
        pd_coeff: r.config.tolerances.pd_coeff,
    };
    let mut barrier_constant = None;
    if cc.barrier_from_v {
        let k = r.sets.get("K").or_else(|| r.sets.get("A")).ok_or_else(|| {
            ConfigError::new("sets.K", "is required when certificate.barrier_from_v is set")
        })?;
        let (b, c) = certify::barrier_from_lyapunov(&cert.v, k, r.set("W")?, grid, cc.barrier_margin)
            .map_err(failed)?;
        cert.b = Some(b);
        barrier_constant = Some(c);
    } else if let Some(b) = &cc.b {
        cert.b = Some(parse(b, "certificate.B")?);
    }
    let k_fn = |src: &Option<String>, path: &str| -> Result<Option<KFunction>, ConfigError> {
        src.as_deref()
            .map(|s| KFunction::parse(s).map_err(|e| ConfigError::new(path, e.to_string())))
            .transpose()
    };
    cert.alpha1 = k_fn(&cc.alpha1, "certificate.alpha1")?;
    cert.alpha2 = k_fn(&cc.alpha2, "certificate.alpha2")?;
    let check = match cc.check.as_deref() {
        Some(c) => c.to_string(),
        None => match (cert.alpha1.is_some(), cert.b.is_some()) {
            (true, true) => "both".into(),
            (true, false) => "theorem8".into(),
            (false, _) => "prop11".into(),
        },
    };
    if !["theorem8", "prop11", "both"].contains(&check.as_str()) {
        return Err(ConfigError::new("certificate.check", "must be theorem8, prop11 or both").into());
    }
    let mut reports = serde_json::Map::new();
    let mut passed = true;
    if check != "prop11" {
        let omega = ProperIndicator::new(r.set("A")?.clone(), r.sets.get("D").cloned())
            .map_err(|e| ConfigError::new("sets.A", e.to_string()))?;
        cert.omega = Some(omega);
        let rep = certify::check_theorem8(&cert, &r.system, grid, tolerances)
            .map_err(|e| ConfigError::new("certificate", e.to_string()))?;
        passed &= rep.passed();
        reports.insert("theorem8".into(), to_value(&rep));
    }
    if check != "theorem8" {
        let rep = certify::check_prop11(
            &cert,
            &r.system,
            r.set("A")?,
            r.set("W")?,
            r.set("U")?,
            grid,
            tolerances,
        )
        .map_err(|e| ConfigError::new("certificate", e.to_string()))?;
        passed &= rep.passed();
        reports.insert("prop11".into(), to_value(&rep));
    }
    let mut v = Value::Object(reports);
    if let (Some(c), Some(b)) = (barrier_constant, &cert.b) {
        v["barrier"] = json!({ "c": c, "B": b.to_string() });
    }
    dir.write_json("certificate.json", &v)?;
    Ok((if passed { EXIT_YES } else { EXIT_NO }, v))
}

fn construct_lyapunov(r: &Resolved, dir: &mut RunDir) -> CommandResult {
    let cc = r.config.converse.clone().unwrap_or_default();
    let grid = r.grid()?;
    let sys = r.system_with_delta(cc.delta, "converse.delta")?;
    let battery = r.battery_for(&sys)?;
    let a = r.set("A")?.clone();
    let d = r.sets.get("D").cloned();
    let omega = ProperIndicator::new(a, d).map_err(|e| ConfigError::new("sets.A", e.to_string()))?;
    let mut settings = r.settings.clone();
    if let Some(h) = cc.horizon {
        settings.horizon = h;
    }
    if let Some(dt) = cc.dt {
        settings.dt = dt;
    }
    settings
        .validate()
        .map_err(|e| ConfigError::new("converse", e.to_string()))?;

    let inside: Vec<usize> = (0..grid.len())
        .filter(|&i| omega.in_domain(&grid.point(i)))
        .collect();
    if inside.is_empty() {
        return Err(ConfigError::new("sets.D", "contains no grid points").into());
    }
    let stride = inside.len().div_ceil(cc.points.max(1)).max(1);
    let points: Vec<Vec<f64>> = inside.iter().step_by(stride).map(|&i| grid.point(i)).collect();
    let hull = {
        let n = grid.dim();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for &i in &inside {
            let p = grid.point(i);
            for k in 0..n {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        BoxSet::new(lo, hi).map_err(failed)?
    };
    let options = ConverseOptions {
        n_bins: cc.n_bins,
        n_times: cc.n_times,
        settle_ratio: cc.settle_ratio,
        ..ConverseOptions::default()
    };
    let env = converse::estimate_kl(&sys, &omega, &points, &battery, &settings, &options)
        .map_err(failed)?;
    let lambda = cc.lambda.unwrap_or(options.safety_factor * env.decay_rate);
    let pair = converse::sontag_fit(&env, lambda, &options).map_err(|e| match e {
        ConverseError::RateTooAggressive { .. } => {
            RunError::Config(ConfigError::new("converse.lambda", e.to_string()))
        }
        e => failed(e),
    })?;
    let mu = cc.mu.unwrap_or(0.5 * lambda);
    let v = NumericLyapunov::new(&sys, &omega, &pair, &battery, settings, mu)
        .map_err(|e| ConfigError::new("converse.mu", e.to_string()))?;
    let seed = cc.seed.unwrap_or(r.seed());
    let samples = converse::sample_box(&hull, cc.samples, seed);
    let validation =
        converse::validate_v(&v, &samples, &cc.taus, r.config.tolerances.validation_tol).map_err(failed)?;
    dir.write_with("kl_envelope.csv", |w| env.write_csv(w))?;
    let values = v.grid_values(grid);
    dir.write_with("v_grid.csv", |w| v.write_grid_csv(w, grid, &values, &r.vars))?;
    let code = if validation.passed() { EXIT_YES } else { EXIT_NO };
    Ok((
        code,
        json!({
            "delta": sys.delta(),
            "envelope": {
                "bins": env.s_bins.len(),
                "times": env.t_samples.len(),
                "decay_rate": env.decay_rate,
                "horizon": env.horizon,
                "points": points.len(),
            },
            "lambda": lambda,
            "mu": mu,
            "pair": pair,
            "region": { "lo": hull.lo(), "hi": hull.hi() },
            "validation": validation,
        }),
    ))
}
