//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every exported function takes plain numbers and strings and returns a JSON
//! string. The `*_json` functions carry the logic and are callable natively.

use lyapbar::certify;
use lyapbar::dynamics::{default_policy_battery, ensemble, IntegrationSettings, PerturbedSystem};
use lyapbar::expr::{ScalarField, VectorField};
use lyapbar::geometry::{BoxSet, Grid, SetSpec};
use lyapbar::reach::Sweep;
use serde_json::json;
use wasm_bindgen::prelude::*;

const MAX_PLOT_POINTS: usize = 400;
const DWELL: f64 = 0.1;

fn system(f: &str, vars: &str, delta: f64) -> Result<(PerturbedSystem, Vec<String>), String> {
    let vars: Vec<String> = vars
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    let names: Vec<&str> = vars.iter().map(String::as_str).collect();
    let comps: Vec<&str> = f.split(';').map(str::trim).collect();
    let field = VectorField::parse(&comps, &names).map_err(|e| format!("f: {e}"))?;
    let sys = PerturbedSystem::new(field, delta).map_err(|e| e.to_string())?;
    Ok((sys, vars))
}

fn line_grid(lo: f64, hi: f64, h: f64) -> Result<Grid, String> {
    let domain = BoxSet::interval(lo, hi).map_err(|e| e.to_string())?;
    Grid::new(domain, h).map_err(|e| e.to_string())
}

fn interval(lo: f64, hi: f64) -> Result<SetSpec, String> {
    Ok(SetSpec::Box(BoxSet::interval(lo, hi).map_err(|e| e.to_string())?))
}

/// Trajectories of the default policy battery from `x0` (comma separated).
/// `f` lists vector-field components separated by `;`.
pub fn simulate_json(
    f: &str,
    vars: &str,
    delta: f64,
    x0: &str,
    horizon: f64,
    n_random: usize,
    seed: u64,
) -> Result<String, String> {
    let (sys, vars) = system(f, vars, delta)?;
    let x0: Vec<f64> = x0
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("x0: {e}")))
        .collect::<Result<_, _>>()?;
    if x0.len() != sys.dim() {
        return Err(format!("x0 has {} entries, system has {}", x0.len(), sys.dim()));
    }
    let battery = default_policy_battery(&sys, n_random, seed, DWELL, &[]).map_err(|e| e.to_string())?;
    let settings = IntegrationSettings::new((horizon / 2000.0).min(1e-2), horizon);
    let runs = ensemble(&sys, &x0, &battery, &settings).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(runs.len());
    for run in runs {
        let tr = run.map_err(|e| e.to_string())?;
        let stride = (tr.times.len() / MAX_PLOT_POINTS).max(1);
        let t: Vec<f64> = tr.times.iter().step_by(stride).copied().collect();
        let x: Vec<&Vec<f64>> = tr.states.iter().step_by(stride).collect();
        out.push(json!({
            "policy": tr.policy,
            "termination": format!("{:?}", tr.termination),
            "t": t,
            "x": x,
        }));
    }
    Ok(json!({ "vars": vars, "trajectories": out }).to_string())
}

/// Sampled winning set of a scalar system on `[lo, hi]`: cells whose battery
/// runs avoid `U = [u_lo, u_hi]` and settle in `A = [a_lo, a_hi]`.
#[allow(clippy::too_many_arguments)]
pub fn winning_set_json(
    f: &str,
    delta: f64,
    lo: f64,
    hi: f64,
    h: f64,
    a_lo: f64,
    a_hi: f64,
    u_lo: f64,
    u_hi: f64,
    horizon: f64,
    n_random: usize,
    seed: u64,
) -> Result<String, String> {
    let (sys, _) = system(f, "x", delta)?;
    let grid = line_grid(lo, hi, h)?;
    let a = interval(a_lo, a_hi)?;
    let u = interval(u_lo, u_hi)?;
    let battery = default_policy_battery(&sys, n_random, seed, DWELL, &[]).map_err(|e| e.to_string())?;
    let settings = IntegrationSettings::new(1e-2, horizon);
    let ws = Sweep::new(&sys, &grid, &battery, settings)
        .winning_set(&a, &u, horizon, None)
        .map_err(|e| e.to_string())?;
    let centers: Vec<f64> = (0..grid.len()).map(|i| grid.point(i)[0]).collect();
    Ok(json!({
        "centers": centers,
        "winning": ws.mask,
        "unsafe": grid.mask_of(&u),
        "target": grid.mask_of(&a),
        "satisfied": ws.satisfied,
        "cells": ws.cells,
        "conv_radius": ws.conv_radius,
    })
    .to_string())
}

/// Worst-case derivative `sup_d ∇V·(f + d)` of a scalar candidate `V` and the
/// decrease margin `-V - sup_d ∇V·(f + d)` on a grid of `[lo, hi]`.
pub fn certificate_margins_json(
    f: &str,
    delta: f64,
    v: &str,
    lo: f64,
    hi: f64,
    h: f64,
) -> Result<String, String> {
    let (sys, _) = system(f, "x", delta)?;
    let v = ScalarField::parse(v, &["x"]).map_err(|e| format!("V: {e}"))?;
    let grad = v.grad();
    let grid = line_grid(lo, hi, h)?;
    let mut xs = Vec::with_capacity(grid.len());
    let mut vs = Vec::with_capacity(grid.len());
    let mut lie = Vec::with_capacity(grid.len());
    let mut margin = Vec::with_capacity(grid.len());
    let mut worst = (f64::NAN, f64::INFINITY);
    for i in 0..grid.len() {
        let x = grid.point(i);
        let vx = v.eval_raw(&x);
        let dv = certify::worst_case_lie(&grad, &sys, &x);
        let m = -vx - dv;
        if m < worst.1 {
            worst = (x[0], m);
        }
        xs.push(x[0]);
        vs.push(vx);
        lie.push(dv);
        margin.push(m);
    }
    Ok(json!({
        "x": xs,
        "v": vs,
        "lie": lie,
        "margin": margin,
        "worst_x": worst.0,
        "worst_margin": worst.1,
    })
    .to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn simulate(
    f: &str,
    vars: &str,
    delta: f64,
    x0: &str,
    horizon: f64,
    n_random: usize,
    seed: u64,
) -> Result<String, JsValue> {
    js(simulate_json(f, vars, delta, x0, horizon, n_random, seed))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn winning_set(
    f: &str,
    delta: f64,
    lo: f64,
    hi: f64,
    h: f64,
    a_lo: f64,
    a_hi: f64,
    u_lo: f64,
    u_hi: f64,
    horizon: f64,
    n_random: usize,
    seed: u64,
) -> Result<String, JsValue> {
    js(winning_set_json(
        f, delta, lo, hi, h, a_lo, a_hi, u_lo, u_hi, horizon, n_random, seed,
    ))
}

#[wasm_bindgen]
pub fn certificate_margins(
    f: &str,
    delta: f64,
    v: &str,
    lo: f64,
    hi: f64,
    h: f64,
) -> Result<String, JsValue> {
    js(certificate_margins_json(f, delta, v, lo, hi, h))
}
