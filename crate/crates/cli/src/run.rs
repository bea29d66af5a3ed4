//! Task dispatch: each task writes its artifacts into a [`Sink`] and
//! reports convergence statuses for the manifest.

use std::path::Path;

use mfgtube_core::bvp::{
    bifurcation_diagram, composite_guess, continue_branch, phase_decomposition, rotation_count, solve_bvp, Branch,
    BranchEnd, BoundaryConditions, BvpOptions, BvpSolution, Guess, Phases, StepPolicy,
};
use mfgtube_core::dynamics::{integrate_sampled, FlowOptions};
use mfgtube_core::linalg::eigenvalues4;
use mfgtube_core::model::{energy, state_jacobian};
use mfgtube_core::orbits::{default_displacement, orbit_at_energy, tube, TubeOptions};
use mfgtube_core::pde::{
    compare_topology, discrete_residuals, extract_moments, gaussian_density, picard_solve, Grid, PicardResult,
};
use mfgtube_core::spectral::{eigen_basis, find_equilibria, Abcd, Equilibrium, EquilibriumKind, Rates, RegionSpec};
use mfgtube_core::{Error, ModelParams, PhaseState};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::*;
use crate::error::{CliError, Result};
use crate::output::{num, read_table, sha256_hex, unix_now, RunManifest, Sink, Status};

/// Validates `config`, runs its task into `out` and writes `manifest.json`.
/// Nothing is written when validation fails.
pub fn run(config: &RunConfig, out: &Path, workers: Option<usize>) -> Result<RunManifest> {
    config.validate()?;
    let started = unix_now();
    let mut sink = Sink::create(out)?;
    sink.json("config.json", config)?;
    let model = config.model;
    let statuses = match &config.task {
        Task::Equilibria(t) => equilibria(&model, t, &mut sink)?,
        Task::Linearize(t) => linearize(&model, t, &mut sink)?,
        Task::Orbit(t) => orbit(&model, t, &mut sink)?,
        Task::Tube(t) => tube_task(&model, t, &mut sink)?,
        Task::Bvp(t) => bvp(&model, t, &mut sink)?,
        Task::Continue(t) => {
            continuation(&model, &t.bc, std::slice::from_ref(&t.branch), &t.options, &t.policy, t.q1_window, 1, &mut sink)?
        }
        Task::Diagram(t) => continuation(
            &model,
            &t.bc,
            &t.branches,
            &t.options,
            &t.policy,
            t.q1_window,
            workers.unwrap_or(1),
            &mut sink,
        )?,
        Task::Pde(t) => pde(&model, t, &mut sink)?.0,
        Task::Compare(t) => compare(&model, t, &mut sink)?,
    };
    let mut manifest = RunManifest {
        task: config.task.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: sha256_hex(config.canonical_json().as_bytes()),
        seed: config.seed,
        started_unix: started,
        finished_unix: 0.0,
        files: sink.files().to_vec(),
        statuses,
    };
    manifest.finished_unix = unix_now();
    sink.json("manifest.json", &manifest)?;
    manifest.files = sink.files().to_vec();
    Ok(manifest)
}

fn ok(item: &str, detail: impl Into<String>) -> Status {
    Status { item: item.to_string(), converged: true, detail: detail.into() }
}

fn failed(item: &str, detail: impl Into<String>) -> Status {
    Status { item: item.to_string(), converged: false, detail: detail.into() }
}

/// Solver failures that count as non-convergence rather than bad input.
fn is_convergence_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::NonConvergence { .. }
            | Error::SingularSystem
            | Error::StepUnderflow { .. }
            | Error::Singularity { .. }
            | Error::VarianceCollapse { .. }
    )
}

#[derive(Serialize)]
struct EquilibriumRecord {
    params: ModelParams,
    q2: f64,
    kind: EquilibriumKind,
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    rates: Rates,
    #[serde(rename = "E_eq")]
    e_eq: f64,
}

fn record(model: &ModelParams, eq: &Equilibrium) -> EquilibriumRecord {
    let Abcd { a, b, c, d } = eq.abcd;
    EquilibriumRecord { params: *model, q2: eq.state.q2, kind: eq.kind, a, b, c, d, rates: eq.rates, e_eq: eq.energy }
}

fn primary_equilibrium(model: &ModelParams, range: (f64, f64)) -> Result<Equilibrium> {
    find_equilibria(model, range)?
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Config("no equilibrium in the q2 search range".into()))
}

fn saddle_center(model: &ModelParams) -> Result<Equilibrium> {
    let eq = primary_equilibrium(model, (0.5, 100.0))?;
    if eq.kind != EquilibriumKind::SaddleCenter {
        return Err(CliError::Config("this task needs a saddle×center equilibrium".into()));
    }
    Ok(eq)
}

fn equilibria(model: &ModelParams, t: &EquilibriaTask, sink: &mut Sink) -> Result<Vec<Status>> {
    let eqs = find_equilibria(model, (t.q2_min, t.q2_max))?;
    let records: Vec<EquilibriumRecord> = eqs.iter().map(|e| record(model, e)).collect();
    sink.json("equilibria.json", &records)?;
    Ok(vec![ok("equilibria", format!("{} found", records.len()))])
}

fn linearize(model: &ModelParams, t: &LinearizeTask, sink: &mut Sink) -> Result<Vec<Status>> {
    let eq = primary_equilibrium(model, (t.q2_min, t.q2_max))?;
    let basis = eigen_basis(&eq);
    let jac = state_jacobian(model, &eq.state)?;
    let mut ev: Vec<[f64; 2]> = eigenvalues4(&jac).iter().map(|z| [z.re, z.im]).collect();
    ev.sort_by(|a, b| b[0].total_cmp(&a[0]).then(b[1].total_cmp(&a[1])));
    let region = match eq.kind {
        EquilibriumKind::SaddleCenter => Some(RegionSpec::new(&basis, t.eps1, t.c)?),
        EquilibriumKind::SaddleSaddle => None,
    };
    let doc = json!({
        "equilibrium": record(model, &eq),
        "jacobian": rows(&jac),
        "eigenvalues": ev,
        "basis": rows(&basis.t),
        "basis_inverse": rows(&basis.t_inv),
        "a1": basis.a1,
        "a2": basis.a2,
        "q1_coefficient": basis.t[(0, 0)],
        "linear_period": eq.linear_period(),
        "region": region,
    });
    sink.json("linearize.json", &doc)?;
    Ok(vec![ok("linearize", format!("{:?}", eq.kind))])
}

fn rows<M: std::ops::Index<(usize, usize), Output = f64>>(m: &M) -> Vec<[f64; 4]> {
    (0..4).map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)], m[(i, 3)]]).collect()
}

const STATE_HEADER: [&str; 6] = ["t", "q1", "p1", "q2", "p2", "E"];

fn orbit(model: &ModelParams, t: &OrbitTask, sink: &mut Sink) -> Result<Vec<Status>> {
    let eq = saddle_center(model)?;
    let po = orbit_at_energy(model, &eq, eq.energy + t.energy_offset)?;
    let last = t.samples - 1;
    let times: Vec<f64> =
        (0..t.samples).map(|k| if k == last { po.period } else { po.period * k as f64 / last as f64 }).collect();
    let tr = integrate_sampled(model, &po.seed, (0.0, po.period), &times, &FlowOptions::default())?;
    sink.csv("orbit.csv", &STATE_HEADER, tr.rows(model))?;
    let mult: Vec<[f64; 2]> = po.multipliers().iter().map(|z| [z.re, z.im]).collect();
    sink.json(
        "orbit.json",
        &json!({
            "E": po.energy,
            "t_p": po.period,
            "lambda_u": po.lambda_u,
            "d": default_displacement(&po),
            "n_strands": 0,
            "closure": po.closure,
            "multipliers": mult,
            "monodromy_det": po.monodromy.determinant(),
        }),
    )?;
    Ok(vec![ok("orbit", format!("t_p = {}", po.period))])
}

fn tube_task(model: &ModelParams, t: &TubeTask, sink: &mut Sink) -> Result<Vec<Status>> {
    let eq = saddle_center(model)?;
    let po = orbit_at_energy(model, &eq, eq.energy + t.energy_offset)?;
    let d = t.displacement.unwrap_or_else(|| default_displacement(&po));
    let opts = TubeOptions { q1_stop: t.q1_stop, flow: FlowOptions::default() };
    let tm = tube(model, &po, t.branch, t.side, d, t.n_strands, t.t_int, &opts)?;
    let mut truncated = 0;
    for (k, s) in tm.strands.iter().enumerate() {
        sink.csv(&format!("strand_{k:03}.csv"), &STATE_HEADER, s.trajectory.rows(model))?;
        truncated += usize::from(s.truncated);
    }
    sink.json(
        "tube.json",
        &json!({
            "E": po.energy,
            "t_p": po.period,
            "lambda_u": po.lambda_u,
            "d": d,
            "n_strands": tm.strands.len(),
            "branch": t.branch,
            "side": tm.side,
            "truncated": truncated,
        }),
    )?;
    Ok(vec![ok("tube", format!("{} strands", tm.strands.len()))])
}

/// Turns a guess specification into a solver guess and the horizon to
/// solve at.
pub fn build_guess(model: &ModelParams, bc: &BoundaryConditions, horizon: f64, spec: &GuessSpec) -> Result<(f64, Guess)> {
    match spec {
        GuessSpec::StraightLine { nodes } => Ok((horizon, Guess::StraightLine { nodes: *nodes })),
        GuessSpec::Tube { energy_offset, half_periods, seed } => {
            let eq = saddle_center(model)?;
            let po = orbit_at_energy(model, &eq, eq.energy + energy_offset)?;
            let g = composite_guess(model, bc, &po, *half_periods, seed)?;
            Ok((g.horizon, Guess::Solution(g)))
        }
        GuessSpec::File { path } => {
            let table = read_table(path, 0)?;
            if table.len() < 3 || table.iter().any(|r| r.len() < 5) {
                return Err(CliError::Config(format!("{}: expected columns t,q1,p1,q2,p2", path.display())));
            }
            let mesh: Vec<f64> = table.iter().map(|r| r[0]).collect();
            let states: Vec<PhaseState> = table.iter().map(|r| PhaseState::new(r[1], r[2], r[3], r[4])).collect();
            let sol = BvpSolution {
                horizon: *mesh.last().unwrap(),
                energy: energy(model, &states[0])?,
                mesh,
                states,
                residual: f64::NAN,
                bc_residual: f64::NAN,
                newton_iterations: 0,
            };
            Ok((horizon, Guess::Solution(sol)))
        }
    }
}

fn solution_rows(sol: &BvpSolution) -> Vec<[f64; 5]> {
    sol.mesh.iter().zip(&sol.states).map(|(t, s)| [*t, s.q1, s.p1, s.q2, s.p2]).collect()
}

#[derive(Serialize)]
struct BvpSummary {
    converged: bool,
    #[serde(rename = "T")]
    horizon: f64,
    #[serde(rename = "E")]
    energy: Option<f64>,
    n: Option<usize>,
    residual: Option<f64>,
    bc_residual: Option<f64>,
    energy_spread: Option<f64>,
    nodes: Option<usize>,
    newton_iterations: Option<usize>,
    phases: Option<Phases>,
    error: Option<String>,
}

/// Solves one BVP and writes `solution.csv` and `summary.json` (prefixed
/// by `prefix`). Returns the solution when it converged.
fn solve_and_write(
    model: &ModelParams,
    bc: &BoundaryConditions,
    horizon: f64,
    guess: &GuessSpec,
    options: &BvpOptions,
    q1_window: f64,
    prefix: &str,
    sink: &mut Sink,
) -> Result<(Status, Option<BvpSolution>)> {
    let (t, g) = build_guess(model, bc, horizon, guess)?;
    let item = format!("{prefix}bvp");
    match solve_bvp(model, bc, t, &g, options) {
        Ok(sol) => {
            let n = rotation_count(model, &sol, q1_window)?;
            sink.csv(&format!("{prefix}solution.csv"), &["t", "q1", "p1", "q2", "p2"], solution_rows(&sol))?;
            let summary = BvpSummary {
                converged: true,
                horizon: sol.horizon,
                energy: Some(sol.energy),
                n: Some(n),
                residual: Some(sol.residual),
                bc_residual: Some(sol.bc_residual),
                energy_spread: Some(sol.energy_spread(model)),
                nodes: Some(sol.mesh.len()),
                newton_iterations: Some(sol.newton_iterations),
                phases: phase_decomposition(model, &sol, q1_window),
                error: None,
            };
            sink.json(&format!("{prefix}summary.json"), &summary)?;
            Ok((ok(&item, format!("E = {}, n = {n}", sol.energy)), Some(sol)))
        }
        Err(e) if is_convergence_failure(&e) => {
            if let Guess::Solution(gs) = &g {
                sink.csv(&format!("{prefix}guess.csv"), &["t", "q1", "p1", "q2", "p2"], solution_rows(gs))?;
            }
            let summary = BvpSummary {
                converged: false,
                horizon: t,
                energy: None,
                n: None,
                residual: None,
                bc_residual: None,
                energy_spread: None,
                nodes: None,
                newton_iterations: None,
                phases: None,
                error: Some(e.to_string()),
            };
            sink.json(&format!("{prefix}summary.json"), &summary)?;
            Ok((failed(&item, e.to_string()), None))
        }
        Err(e) => Err(e.into()),
    }
}

fn bvp(model: &ModelParams, t: &BvpTask, sink: &mut Sink) -> Result<Vec<Status>> {
    let (status, _) = solve_and_write(model, &t.bc, t.horizon, &t.guess, &t.options, t.q1_window, "", sink)?;
    Ok(vec![status])
}

type BranchRun = std::result::Result<Branch, Error>;

fn run_branch(
    model: &ModelParams,
    bc: &BoundaryConditions,
    spec: &BranchSpec,
    options: &BvpOptions,
    policy: &StepPolicy,
    q1_window: f64,
) -> Result<BranchRun> {
    let (t, g) = build_guess(model, bc, spec.horizon, &spec.guess)?;
    let seed = match solve_bvp(model, bc, t, &g, options) {
        Ok(s) => s,
        Err(e) if is_convergence_failure(&e) => return Ok(Err(e)),
        Err(e) => return Err(e.into()),
    };
    match continue_branch(model, bc, &seed, spec.horizon_target, policy, options, q1_window, &spec.label) {
        Ok(b) => Ok(Ok(b)),
        Err(e) if is_convergence_failure(&e) => Ok(Err(e)),
        Err(e) => Err(e.into()),
    }
}

/// Continues every branch (on a pool of `workers` threads), then merges
/// the points into `diagram.csv` sorted by label and horizon.
#[allow(clippy::too_many_arguments)]
fn continuation(
    model: &ModelParams,
    bc: &BoundaryConditions,
    specs: &[BranchSpec],
    options: &BvpOptions,
    policy: &StepPolicy,
    q1_window: f64,
    workers: usize,
    sink: &mut Sink,
) -> Result<Vec<Status>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let runs: Vec<Result<BranchRun>> =
        pool.install(|| specs.par_iter().map(|s| run_branch(model, bc, s, options, policy, q1_window)).collect());
    let mut branches = Vec::new();
    let mut statuses = Vec::new();
    let mut info = Vec::new();
    for (spec, run) in specs.iter().zip(runs) {
        match run? {
            Ok(b) => {
                let (converged, detail) = match b.end {
                    BranchEnd::Completed => (true, "completed".to_string()),
                    BranchEnd::Terminated { horizon, energy } => {
                        (true, format!("terminated at T = {horizon}, E = {energy}"))
                    }
                    BranchEnd::PointLimit => (false, "point limit reached".to_string()),
                };
                statuses.push(Status { item: b.label.clone(), converged, detail });
                info.push(json!({
                    "branch": b.label,
                    "points": b.points.len(),
                    "end": b.end,
                    "topology": b.topology(),
                    "energy_increasing": b.energy_increasing(),
                    "energy_decreasing": b.energy_decreasing(),
                    "used_arclength": b.used_arclength,
                }));
                branches.push(b);
            }
            Err(e) => {
                statuses.push(failed(&spec.label, format!("seed or continuation failed: {e}")));
                info.push(json!({ "branch": spec.label, "points": 0, "error": e.to_string() }));
            }
        }
    }
    let rows = bifurcation_diagram(&branches);
    sink.csv_rows(
        "diagram.csv",
        &["branch", "T", "E", "n"],
        rows.iter().map(|r| vec![r.branch.clone(), num(r.horizon), num(r.energy), r.rotations.to_string()]),
    )?;
    sink.csv_rows("multiplicity.csv", &["T", "solutions", "topologies"], multiplicity(&branches))?;
    sink.json("branches.json", &info)?;
    Ok(statuses)
}

/// Number of branches covering each horizon on a grid of step 0.1, and the
/// number of distinct rotation counts among them.
fn multiplicity(branches: &[Branch]) -> Vec<Vec<String>> {
    let spans: Vec<(f64, f64, Option<usize>)> = branches
        .iter()
        .filter(|b| !b.points.is_empty())
        .map(|b| {
            let lo = b.points.iter().map(|p| p.horizon).fold(f64::INFINITY, f64::min);
            let hi = b.points.iter().map(|p| p.horizon).fold(f64::NEG_INFINITY, f64::max);
            (lo, hi, b.topology())
        })
        .collect();
    let Some(lo) = spans.iter().map(|s| s.0).reduce(f64::min) else { return Vec::new() };
    let hi = spans.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let k0 = (lo * 10.0).ceil() as i64;
    let k1 = (hi * 10.0).floor() as i64;
    (k0..=k1)
        .map(|k| {
            let t = k as f64 / 10.0;
            let covering: Vec<Option<usize>> =
                spans.iter().filter(|s| s.0 <= t && t <= s.1).map(|s| s.2).collect();
            let mut topo: Vec<usize> = covering.iter().flatten().copied().collect();
            topo.sort_unstable();
            topo.dedup();
            vec![num(t), covering.len().to_string(), topo.len().to_string()]
        })
        .collect()
}

fn density(model: &ModelParams, spec: &DensitySpec, grid: &Grid) -> Result<Vec<f64>> {
    Ok(gaussian_density(spec.mean, model.epsilon * spec.q2, grid)?)
}

fn field_table(grid: &Grid, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .enumerate()
        .map(|(n, r)| {
            let mut v = Vec::with_capacity(r.len() + 1);
            v.push(grid.t(n));
            v.extend_from_slice(r);
            v
        })
        .collect()
}

/// Runs the Picard solver and writes its tables. Also returns the result
/// and the extracted phase trajectory for comparison.
fn pde(model: &ModelParams, t: &PdeTask, sink: &mut Sink) -> Result<(Vec<Status>, PicardResult, Option<Vec<PhaseState>>)> {
    let grid = t.grid;
    let m_ic = density(model, &t.m_ic, &grid)?;
    let m_fc = density(model, &t.m_fc, &grid)?;
    let guess = match &t.warm_start {
        Some(path) => {
            let table = read_table(path, 1)?;
            if table.len() != grid.nt + 1 || table.iter().any(|r| r.len() != grid.nx + 1) {
                return Err(CliError::Config(format!("{}: warm start does not match the grid", path.display())));
            }
            Some(table)
        }
        None => None,
    };
    let r = picard_solve(model, &m_ic, &m_fc, &grid, &t.solver, guess)?;

    let mut header = vec!["t".to_string()];
    header.extend(grid.xs().iter().map(|x| num(*x)));
    sink.csv("density.csv", &header, field_table(&grid, &r.fields.m))?;
    sink.csv("value.csv", &header, field_table(&grid, &r.fields.u))?;
    sink.csv_rows(
        "convergence.csv",
        &["k", "err_u", "err_m"],
        r.log.steps.iter().map(|s| vec![s.k.to_string(), num(s.err_u), num(s.err_m)]),
    )?;

    let phase = match extract_moments(&r.fields, &grid, model) {
        Ok((_, ph)) => {
            let rows: Vec<[f64; 5]> =
                ph.iter().enumerate().map(|(n, s)| [grid.t(n), s.q1, s.p1, s.q2, s.p2]).collect();
            sink.csv("phase.csv", &["t", "q1", "p1", "q2", "p2"], rows)?;
            Some(ph)
        }
        Err(_) => None,
    };
    let rotations = phase.as_ref().map(|ph| mfgtube_core::bvp::count_window_crossings(ph, t.q1_window));
    let final_err = r.fields.m[grid.nt].iter().zip(&m_fc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let (hjb_res, fp_res) = discrete_residuals(&r.fields, &grid, model);
    let masses = r.fields.masses(&grid);
    let mass_drift = masses.iter().map(|m| (m - masses[0]).abs()).fold(0.0, f64::max);
    let failure = r.log.failure.as_ref().map(|e| e.to_string());
    sink.json(
        "pde_summary.json",
        &json!({
            "converged": r.log.converged,
            "iterations": r.log.steps.len(),
            "final_density_max_error": final_err,
            "rotation_count": rotations,
            "last_err_u": r.log.steps.last().map(|s| s.err_u),
            "last_err_m": r.log.steps.last().map(|s| s.err_m),
            "hjb_residual": hjb_res,
            "fp_residual": fp_res,
            "min_density": r.fields.min_density(),
            "mass_drift": mass_drift,
            "dt": grid.dt(),
            "dx": grid.dx(),
            "failure": failure,
        }),
    )?;
    let status = if r.log.converged {
        ok("pde", format!("{} iterations", r.log.steps.len()))
    } else {
        let why = failure.unwrap_or_else(|| format!("no convergence in {} iterations", r.log.steps.len()));
        failed("pde", why)
    };
    Ok((vec![status], r, phase))
}

fn compare(model: &ModelParams, t: &CompareTask, sink: &mut Sink) -> Result<Vec<Status>> {
    let (mut statuses, _, phase) = pde(model, &t.pde, sink)?;
    let bc = t.pde.boundary_conditions();
    let (status, sol) =
        solve_and_write(model, &bc, t.pde.grid.horizon, &t.guess, &t.options, t.pde.q1_window, "bvp_", sink)?;
    statuses.push(status);
    let doc = match (&phase, &sol) {
        (Some(ph), Some(sol)) => {
            let rep = compare_topology(model, ph, sol, t.pde.q1_window)?;
            let grid = t.pde.grid;
            let mut dq1: f64 = 0.0;
            let mut dq2: f64 = 0.0;
            for (n, s) in ph.iter().enumerate() {
                let b = sol.state_at(model, grid.t(n) * sol.horizon / grid.horizon);
                dq1 = dq1.max((s.q1 - b.q1).abs());
                dq2 = dq2.max((s.q2 - b.q2).abs());
            }
            if !rep.matches {
                statuses.push(failed("topology", format!("PDE {} vs BVP {} crossings", rep.n_pde, rep.n_bvp)));
            }
            json!({ "n_pde": rep.n_pde, "n_bvp": rep.n_bvp, "matches": rep.matches, "max_abs_dq1": dq1, "max_abs_dq2": dq2 })
        }
        _ => json!({
            "n_pde": phase.as_ref().map(|ph| mfgtube_core::bvp::count_window_crossings(ph, t.pde.q1_window)),
            "n_bvp": null,
            "matches": false,
        }),
    };
    sink.json("compare.json", &doc)?;
    Ok(statuses)
}
