//! Finite-difference solver for the MFG planning problem and moment
//! extraction back into phase space.
//!
//! Central differences in the interior, one-sided stencils at the two free
//! boundaries, implicit Euler in time. The HJB row is solved by Newton on a
//! near-tridiagonal Jacobian and the FP row by one linear solve; the two
//! sweeps are coupled by damped Picard iteration.

use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, fabs, pow, sqrt};

use crate::error::{Error, Result};
use crate::linalg::NearTridiagonal;
use crate::model::{lagrangian_to_phase, LagrangianState, ModelParams, PhaseState};

/// Uniform space-time grid on `[-L/2, L/2] × [0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Grid {
    pub length: f64,
    pub nx: usize,
    pub nt: usize,
    pub horizon: f64,
}

impl Grid {
    pub fn new(length: f64, nx: usize, nt: usize, horizon: f64) -> Result<Self> {
        let g = Self { length, nx, nt, horizon };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::InvalidParameter("grid length must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter("horizon must be positive"));
        }
        if self.nx < 4 || self.nt < 1 {
            return Err(Error::InvalidParameter("grid needs nx >= 4 and nt >= 1"));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.length / self.nx as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        -0.5 * self.length + i as f64 * self.dx()
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..=self.nx).map(|i| self.x(i)).collect()
    }

    /// Trapezoidal integral of a row.
    pub fn integrate(&self, row: &[f64]) -> f64 {
        let n = row.len();
        let inner: f64 = row[1..n - 1].iter().sum();
        self.dx() * (inner + 0.5 * (row[0] + row[n - 1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PdeConfig {
    /// Penalty weight of the final value condition.
    pub eps_p: f64,
    pub delta: f64,
    pub k_max: usize,
    pub tol: f64,
    /// Newton tolerance for each HJB row.
    pub newton_tol: f64,
    pub newton_max: usize,
}

impl Default for PdeConfig {
    fn default() -> Self {
        Self { eps_p: 0.01, delta: 0.5, k_max: 1000, tol: 1e-6, newton_tol: 1e-10, newton_max: 50 }
    }
}

impl PdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_p > 0.0) {
            return Err(Error::InvalidParameter("eps_p must be positive"));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::InvalidParameter("delta must lie in [0, 1)"));
        }
        if !(self.tol > 0.0) || !(self.newton_tol > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive"));
        }
        if self.newton_max == 0 {
            return Err(Error::InvalidParameter("newton_max must be positive"));
        }
        Ok(())
    }
}

/// Density and value tables, one row per time node.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeFields {
    pub m: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl PdeFields {
    pub fn masses(&self, grid: &Grid) -> Vec<f64> {
        self.m.iter().map(|r| grid.integrate(r)).collect()
    }

    pub fn min_density(&self) -> f64 {
        self.m.iter().flatten().cloned().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PicardStep {
    pub k: usize,
    pub err_u: f64,
    pub err_m: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceLog {
    pub steps: Vec<PicardStep>,
    pub converged: bool,
    /// Sweep failure that ended the iteration early, if any.
    pub failure: Option<Error>,
}

/// Gaussian density with mean `x_mean` and standard deviation `sigma`.
pub fn gaussian_density(x_mean: f64, sigma: f64, grid: &Grid) -> Result<Vec<f64>> {
    grid.validate()?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter("standard deviation must be positive"));
    }
    let c = 1.0 / sqrt(2.0 * core::f64::consts::PI * sigma * sigma);
    let row: Vec<f64> = grid
        .xs()
        .iter()
        .map(|x| {
            let z = (x - x_mean) / sigma;
            c * exp(-0.5 * z * z)
        })
        .collect();
    let mass = grid.integrate(&row);
    if mass < 0.999 {
        return Err(Error::DomainTooSmall { mass });
    }
    Ok(row)
}

/// `(f(m), U0(x)) = (g max(m,0)^α, -h x²/2 - x⁴/4)`.
pub fn cost_terms(params: &ModelParams, x: f64, m: f64) -> (f64, f64) {
    let f = params.g * pow(m.max(0.0), params.alpha);
    let x2 = x * x;
    (f, -0.5 * params.h * x2 - 0.25 * x2 * x2)
}

/// First derivative with central differences and one-sided boundary values.
fn d1(z: &[f64], i: usize, dx: f64) -> f64 {
    let n = z.len() - 1;
    if i == 0 {
        (z[1] - z[0]) / dx
    } else if i == n {
        (z[n] - z[n - 1]) / dx
    } else {
        (z[i + 1] - z[i - 1]) / (2.0 * dx)
    }
}

/// Second derivative; first-order one-sided stencils at the boundary nodes.
fn d2(z: &[f64], i: usize, dx: f64) -> f64 {
    let n = z.len() - 1;
    let dx2 = dx * dx;
    if i == 0 {
        (z[0] - 2.0 * z[1] + z[2]) / dx2
    } else if i == n {
        (z[n] - 2.0 * z[n - 1] + z[n - 2]) / dx2
    } else {
        (z[i + 1] - 2.0 * z[i] + z[i - 1]) / dx2
    }
}

/// Coefficients of `D_x` and `Δ_x` in row `i` as (column, weight) triples.
fn stencils(i: usize, n: usize, dx: f64) -> ([(usize, f64); 3], [(usize, f64); 3]) {
    let dx2 = dx * dx;
    if i == 0 {
        ([(0, -1.0 / dx), (1, 1.0 / dx), (2, 0.0)], [(0, 1.0 / dx2), (1, -2.0 / dx2), (2, 1.0 / dx2)])
    } else if i == n {
        (
            [(n - 2, 0.0), (n - 1, -1.0 / dx), (n, 1.0 / dx)],
            [(n - 2, 1.0 / dx2), (n - 1, -2.0 / dx2), (n, 1.0 / dx2)],
        )
    } else {
        (
            [(i - 1, -0.5 / dx), (i, 0.0), (i + 1, 0.5 / dx)],
            [(i - 1, 1.0 / dx2), (i, -2.0 / dx2), (i + 1, 1.0 / dx2)],
        )
    }
}

fn add_entry(a: &mut NearTridiagonal, row: usize, col: usize, v: f64) {
    let n = a.len() - 1;
    if col == row {
        a.diag[row] += v;
    } else if col + 1 == row {
        a.lower[row] += v;
    } else if col == row + 1 {
        a.upper[row] += v;
    } else if row == 0 && col == 2 {
        a.first_extra += v;
    } else if row == n && col + 2 == n {
        a.last_extra += v;
    } else {
        unreachable!("stencil outside the near-tridiagonal pattern");
    }
}

/// HJB residual `F1` of a candidate row.
pub fn hjb_residual(u: &[f64], u_next: &[f64], m_next: &[f64], grid: &Grid, params: &ModelParams) -> Vec<f64> {
    residual_weighted(u, u_next, m_next, grid, params, 1.0)
}

/// `F1` with the Hamiltonian term scaled by `w`.
fn residual_weighted(u: &[f64], u_next: &[f64], m_next: &[f64], grid: &Grid, params: &ModelParams, w: f64) -> Vec<f64> {
    let (dx, dt) = (grid.dx(), grid.dt());
    let s2 = params.sigma * params.sigma;
    (0..u.len())
        .map(|i| {
            let (f, u0) = cost_terms(params, grid.x(i), m_next[i]);
            let du = d1(u, i, dx);
            -(u_next[i] - u[i]) / dt - 0.5 * s2 * d2(u, i, dx) + w * du * du / (2.0 * params.mu) + f + u0
        })
        .collect()
}

fn jacobian_weighted(u: &[f64], grid: &Grid, params: &ModelParams, w: f64) -> NearTridiagonal {
    let n = u.len();
    let (dx, dt) = (grid.dx(), grid.dt());
    let s2 = params.sigma * params.sigma;
    let mut a = NearTridiagonal::zeros(n);
    for i in 0..n {
        let (dst, lst) = stencils(i, n - 1, dx);
        let du = w * d1(u, i, dx);
        add_entry(&mut a, i, i, 1.0 / dt);
        for (c, c_w) in lst {
            add_entry(&mut a, i, c, -0.5 * s2 * c_w);
        }
        for (c, c_w) in dst {
            if c_w != 0.0 {
                add_entry(&mut a, i, c, du / params.mu * c_w);
            }
        }
    }
    a
}

fn residual_scale(u: &[f64], dx: f64, dt: f64, s2: f64, mu: f64) -> f64 {
    let umax = u.iter().map(|v| fabs(*v)).fold(0.0, f64::max);
    let dmax = (0..u.len()).map(|i| fabs(d1(u, i, dx))).fold(0.0, f64::max);
    (1.0 + umax) * (1.0 / dt + s2 / (dx * dx) + dmax / (mu * dx))
}

struct HjbRow<'a> {
    u_next: &'a [f64],
    m_next: &'a [f64],
    grid: &'a Grid,
    params: &'a ModelParams,
    tol: f64,
    max: usize,
}

impl HjbRow<'_> {
    fn norm(r: &[f64]) -> f64 {
        r.iter().map(|v| fabs(*v)).fold(0.0, f64::max)
    }

    fn converged(&self, u: &[f64], res: f64) -> bool {
        let s2 = self.params.sigma * self.params.sigma;
        res < self.tol * residual_scale(u, self.grid.dx(), self.grid.dt(), s2, self.params.mu)
    }

    /// Damped Newton at Hamiltonian weight `w`.
    fn newton(&self, mut u: Vec<f64>, w: f64) -> core::result::Result<Vec<f64>, f64> {
        let mut r = residual_weighted(&u, self.u_next, self.m_next, self.grid, self.params, w);
        for _ in 0..self.max {
            let res = Self::norm(&r);
            if !res.is_finite() {
                return Err(res);
            }
            if self.converged(&u, res) {
                return Ok(u);
            }
            let step = jacobian_weighted(&u, self.grid, self.params, w).solve(&r).map_err(|_| res)?;
            let mut lam = 1.0;
            loop {
                let trial: Vec<f64> = u.iter().zip(&step).map(|(x, d)| x - lam * d).collect();
                let rt = residual_weighted(&trial, self.u_next, self.m_next, self.grid, self.params, w);
                let rn = Self::norm(&rt);
                if rn.is_finite() && rn < res {
                    u = trial;
                    r = rt;
                    break;
                }
                lam *= 0.5;
                if lam < 1e-8 {
                    return Err(res);
                }
            }
        }
        let res = Self::norm(&r);
        if self.converged(&u, res) {
            Ok(u)
        } else {
            Err(res)
        }
    }
}

/// Solves `F1(U^n) = 0` for one backward step by Newton, starting from
/// `U^{n+1}`. When that stalls, the Hamiltonian term is switched on
/// gradually from the linear problem.
pub fn hjb_backward_step(
    u_next: &[f64],
    m_next: &[f64],
    grid: &Grid,
    params: &ModelParams,
    newton_tol: f64,
    newton_max: usize,
) -> Result<Vec<f64>> {
    let n = u_next.len();
    if n != grid.nx + 1 || m_next.len() != n {
        return Err(Error::InvalidParameter("row length does not match the grid"));
    }
    let row = HjbRow { u_next, m_next, grid, params, tol: newton_tol, max: newton_max };
    let first = match row.newton(u_next.to_vec(), 1.0) {
        Ok(u) => return Ok(u),
        Err(res) => res,
    };
    let mut u = row.newton(u_next.to_vec(), 0.0).map_err(|_| Error::NonConvergence { iterations: newton_max, residual: first })?;
    let (mut w, mut dw): (f64, f64) = (0.0, 0.1);
    let mut steps = 0;
    while w < 1.0 {
        let wt = (w + dw).min(1.0);
        match row.newton(u.clone(), wt) {
            Ok(v) => {
                u = v;
                w = wt;
                dw *= 1.5;
            }
            Err(_) => {
                dw *= 0.5;
                if dw < 1e-6 {
                    return Err(Error::NonConvergence { iterations: steps, residual: first });
                }
            }
        }
        steps += 1;
    }
    Ok(u)
}

/// Assembles the FP matrix for the step `n → n+1` with the lagged value row.
pub fn fp_matrix(u: &[f64], grid: &Grid, params: &ModelParams) -> NearTridiagonal {
    let n = u.len();
    let (dx, dt) = (grid.dx(), grid.dt());
    let s2 = params.sigma * params.sigma;
    let mu = params.mu;
    let mut a = NearTridiagonal::zeros(n);
    for q in 0..n {
        let (dst, lst) = stencils(q, n - 1, dx);
        let du = d1(u, q, dx);
        let lu = d2(u, q, dx);
        // D_t M − σ²/2 Δ M − (1/μ)(D_x M · D_x U + M Δ_x U) = 0, implicit in M.
        add_entry(&mut a, q, q, 1.0 / dt - lu / mu);
        for (c, w) in lst {
            add_entry(&mut a, q, c, -0.5 * s2 * w);
        }
        for (c, w) in dst {
            if w != 0.0 {
                add_entry(&mut a, q, c, -du / mu * w);
            }
        }
    }
    a
}

/// One implicit FP step `A^FP M^{n+1} = M^n / δt`.
pub fn fp_forward_step(m: &[f64], u: &[f64], grid: &Grid, params: &ModelParams) -> Result<Vec<f64>> {
    if m.len() != grid.nx + 1 || u.len() != m.len() {
        return Err(Error::InvalidParameter("row length does not match the grid"));
    }
    let a = fp_matrix(u, grid, params);
    let dt = grid.dt();
    let rhs: Vec<f64> = m.iter().map(|v| v / dt).collect();
    a.solve(&rhs)
}

/// Result of [`picard_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct PicardResult {
    pub fields: PdeFields,
    pub log: ConvergenceLog,
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| fabs(p - q)))
        .fold(0.0, f64::max)
}

/// Linear-in-time interpolation between the two boundary densities.
pub fn linear_density_guess(m_ic: &[f64], m_fc: &[f64], grid: &Grid) -> Vec<Vec<f64>> {
    (0..=grid.nt)
        .map(|n| {
            let s = n as f64 / grid.nt as f64;
            m_ic.iter().zip(m_fc).map(|(a, b)| (1.0 - s) * a + s * b).collect()
        })
        .collect()
}

/// Damped Picard iteration of backward HJB and forward FP sweeps. Starts
/// from `m_guess` (linear interpolation when `None`) and `U ≡ 0`.
///
/// Running out of iterations or a failed sweep is reported through the log,
/// together with the last damped iterate.
pub fn picard_solve(
    params: &ModelParams,
    m_ic: &[f64],
    m_fc: &[f64],
    grid: &Grid,
    config: &PdeConfig,
    m_guess: Option<Vec<Vec<f64>>>,
) -> Result<PicardResult> {
    params.validate()?;
    grid.validate()?;
    config.validate()?;
    let nx1 = grid.nx + 1;
    if m_ic.len() != nx1 || m_fc.len() != nx1 {
        return Err(Error::InvalidParameter("boundary densities do not match the grid"));
    }
    let nt = grid.nt;
    let mut m_t = m_guess.unwrap_or_else(|| linear_density_guess(m_ic, m_fc, grid));
    if m_t.len() != nt + 1 || m_t.iter().any(|r| r.len() != nx1) {
        return Err(Error::InvalidParameter("density guess does not match the grid"));
    }
    let mut u_t = vec![vec![0.0; nx1]; nt + 1];
    let mut log = ConvergenceLog::default();
    let d = config.delta;
    'outer: for k in 0..config.k_max {
        let mut u_new = vec![vec![0.0; nx1]; nt + 1];
        u_new[nt] = m_t[nt].iter().zip(m_fc).map(|(m, f)| (m - f) / config.eps_p).collect();
        for n in (0..nt).rev() {
            match hjb_backward_step(&u_new[n + 1], &m_t[n + 1], grid, params, config.newton_tol, config.newton_max) {
                Ok(row) => u_new[n] = row,
                Err(e) => {
                    log.failure = Some(e);
                    break 'outer;
                }
            }
        }
        let mut m_new = vec![m_ic.to_vec(); nt + 1];
        for n in 0..nt {
            match fp_forward_step(&m_new[n], &u_new[n], grid, params) {
                Ok(row) => m_new[n + 1] = row,
                Err(e) => {
                    log.failure = Some(e);
                    break 'outer;
                }
            }
        }
        for n in 0..=nt {
            for i in 0..nx1 {
                m_new[n][i] = d * m_t[n][i] + (1.0 - d) * m_new[n][i];
                u_new[n][i] = d * u_t[n][i] + (1.0 - d) * u_new[n][i];
            }
        }
        let err_u = max_diff(&u_new, &u_t);
        let err_m = max_diff(&m_new, &m_t);
        m_t = m_new;
        u_t = u_new;
        log.steps.push(PicardStep { k: k + 1, err_u, err_m });
        if !(err_u.is_finite() && err_m.is_finite()) {
            break;
        }
        if err_u < config.tol && err_m < config.tol {
            log.converged = true;
            break;
        }
    }
    Ok(PicardResult { fields: PdeFields { m: m_t, u: u_t }, log })
}

/// Largest residuals of the discrete HJB and FP equations on a fixed point.
pub fn discrete_residuals(fields: &PdeFields, grid: &Grid, params: &ModelParams) -> (f64, f64) {
    let nt = grid.nt;
    let mut hjb: f64 = 0.0;
    let mut fp: f64 = 0.0;
    for n in 0..nt {
        let r = hjb_residual(&fields.u[n], &fields.u[n + 1], &fields.m[n + 1], grid, params);
        hjb = hjb.max(r.iter().map(|v| fabs(*v)).fold(0.0, f64::max));
        let a = fp_matrix(&fields.u[n], grid, params);
        let lhs = a.apply(&fields.m[n + 1]);
        let dt = grid.dt();
        for (l, m) in lhs.iter().zip(&fields.m[n]) {
            fp = fp.max(fabs(l - m / dt) * dt);
        }
    }
    (hjb, fp)
}

/// Moments and momenta of one time row.
pub fn row_moments(m: &[f64], u: &[f64], grid: &Grid, params: &ModelParams) -> Result<LagrangianState> {
    let xs = grid.xs();
    let dx = grid.dx();
    let mc: Vec<f64> = m.iter().map(|v| v.max(0.0)).collect();
    let mass = grid.integrate(&mc);
    if !(mass > 0.0) {
        return Err(Error::DegenerateDensity);
    }
    let xm: Vec<f64> = xs.iter().zip(&mc).map(|(x, v)| x * v).collect();
    let x2m: Vec<f64> = xs.iter().zip(&mc).map(|(x, v)| x * x * v).collect();
    let x_mean = grid.integrate(&xm);
    let var = grid.integrate(&x2m) - x_mean * x_mean;
    if !(var > 0.0) {
        return Err(Error::DegenerateDensity);
    }
    let sigma_sd = sqrt(var);
    let ms2 = params.mu * params.sigma * params.sigma;
    // Φ_i ∂xΓ_i with Γ = m/Φ, evaluated through ratios Φ_i/Φ_j so that
    // large |u| never overflows.
    let ratio = |i: usize, j: usize| exp(-(u[i] - u[j]) / ms2);
    let n = m.len() - 1;
    let phi_dgamma = |w: &dyn Fn(usize) -> f64, i: usize| -> f64 {
        if i == 0 {
            (w(1) * ratio(0, 1) - w(0)) / dx
        } else if i == n {
            (w(n) - w(n - 1) * ratio(n, n - 1)) / dx
        } else {
            (w(i + 1) * ratio(i, i + 1) - w(i - 1) * ratio(i, i - 1)) / (2.0 * dx)
        }
    };
    let gm = |j: usize| mc[j];
    let gxm = |j: usize| xs[j] * mc[j];
    let p_int: Vec<f64> = (0..=n).map(|i| -ms2 * phi_dgamma(&gm, i)).collect();
    let l_int: Vec<f64> = (0..=n)
        .map(|i| -ms2 * (xs[i] * phi_dgamma(&gm, i) + phi_dgamma(&gxm, i)))
        .collect();
    let p = grid.integrate(&p_int);
    let lambda = grid.integrate(&l_int) - 2.0 * x_mean * p;
    Ok(LagrangianState { x: x_mean, s: sigma_sd / params.epsilon, p, lambda })
}

/// Lagrangian and phase-space series of a solved field pair.
pub fn extract_moments(
    fields: &PdeFields,
    grid: &Grid,
    params: &ModelParams,
) -> Result<(Vec<LagrangianState>, Vec<PhaseState>)> {
    let mut lag = Vec::with_capacity(fields.m.len());
    let mut ph = Vec::with_capacity(fields.m.len());
    for (m, u) in fields.m.iter().zip(&fields.u) {
        let l = row_moments(m, u, grid, params)?;
        ph.push(lagrangian_to_phase(&l)?);
        lag.push(l);
    }
    Ok((lag, ph))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TopologyReport {
    pub n_pde: usize,
    pub n_bvp: usize,
    pub matches: bool,
}

/// Compares `p2 = 0` crossing counts inside the ergodic window.
pub fn compare_topology(
    params: &ModelParams,
    pde_phase: &[PhaseState],
    bvp: &crate::bvp::BvpSolution,
    q1_window: f64,
) -> Result<TopologyReport> {
    let n_pde = crate::bvp::count_window_crossings(pde_phase, q1_window);
    let n_bvp = crate::bvp::rotation_count(params, bvp, q1_window)?;
    Ok(TopologyReport { n_pde, n_bvp, matches: n_pde == n_bvp })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> Grid {
        Grid::new(40.0, 500, 50, 1.0).unwrap()
    }

    #[test]
    fn appendix_spacings() {
        let g = Grid::new(40.0, 500, 500, 9.5).unwrap();
        assert_eq!(g.dx(), 0.08);
        assert_eq!(g.dt(), 0.019);
    }

    #[test]
    fn gaussian_is_normalised_and_mirrored() {
        let g = small_grid();
        let row = gaussian_density(0.0, 1.0, &g).unwrap();
        assert!((g.integrate(&row) - 1.0).abs() < 1e-6);
        let a = gaussian_density(-10.0, 0.225, &g).unwrap();
        let b = gaussian_density(10.0, 0.225, &g).unwrap();
        for (x, y) in a.iter().zip(b.iter().rev()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(gaussian_density(19.5, 2.0, &g), Err(Error::DomainTooSmall { .. })));
    }

    #[test]
    fn cost_terms_by_hand() {
        let p = ModelParams::saddle_center();
        assert_eq!(cost_terms(&p, 0.0, 0.0).0, 0.0);
        assert_eq!(cost_terms(&p, 0.0, 0.5).0, 0.5);
        assert_eq!(cost_terms(&p, 2.0, 0.0).1, -4.0);
        assert_eq!(cost_terms(&p, 0.0, -1.0).0, 0.0);
    }

    #[test]
    fn hjb_constant_data_reduces_to_explicit_update() {
        // Vanishing derivatives: (U^n - c)/dt + f + U0 = 0 on a tiny domain.
        let p = ModelParams::saddle_center();
        let g = Grid::new(1e-3, 8, 10, 1.0).unwrap();
        let c = 2.0;
        let mbar = 0.3;
        let u = hjb_backward_step(&vec![c; 9], &vec![mbar; 9], &g, &p, 1e-15, 20).unwrap();
        for (i, v) in u.iter().enumerate() {
            let (f, u0) = cost_terms(&p, g.x(i), mbar);
            assert!((v - (c - g.dt() * (f + u0))).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn fp_constant_value_conserves_mass() {
        let p = ModelParams::saddle_center();
        let g = small_grid();
        let m = gaussian_density(0.0, 1.0, &g).unwrap();
        let u = vec![3.0; g.nx + 1];
        let m1 = fp_forward_step(&m, &u, &g, &p).unwrap();
        assert!((g.integrate(&m1) - g.integrate(&m)).abs() < 1e-8);
        let z = fp_forward_step(&vec![0.0; g.nx + 1], &u, &g, &p).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn moments_of_resting_gaussian() {
        let p = ModelParams::saddle_center();
        let g = small_grid();
        let m = gaussian_density(1.5, 0.8, &g).unwrap();
        let l = row_moments(&m, &vec![0.0; g.nx + 1], &g, &p).unwrap();
        assert!((l.x - 1.5).abs() < 1e-4);
        assert!((l.s * p.epsilon - 0.8).abs() < 1e-4);
        assert!(l.p.abs() < 1e-10);
    }
}
