//! Two-point boundary value problem on a fixed horizon: Lobatto IIIA
//! (Simpson/Hermite-cubic) collocation with damped Newton, defect-driven
//! mesh refinement, continuation in the horizon, and topology bookkeeping.
//!
//! Time is rescaled to `τ = t/T ∈ [0, 1]` and `T` is carried as a fifth,
//! constant state component. The collocation system then stays square and
//! banded whichever scalar closes it: a fixed horizon, a fixed energy, or a
//! pseudo-arclength condition in the `(T, E)` plane.

use alloc::vec;
use alloc::vec::Vec;

use libm::{fabs, sqrt};
use nalgebra::{Matrix4, SMatrix, SVector};

use crate::dynamics::{find_section_crossings, integrate_sampled, FlowOptions, Section, SectionEvent, Trajectory};
use crate::orbits::{default_displacement, tube, PeriodicOrbit, TubeBranch, TubeOptions};
use crate::error::{Error, Result};
use crate::linalg::BandMatrix;
use crate::model::{energy_unchecked, field, jacobian, ModelParams, PhaseState};

type M5 = SMatrix<f64, 5, 5>;
type V5 = SVector<f64, 5>;

/// Prescribed mean and scaled deviation at both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct BoundaryConditions {
    pub q1_0: f64,
    pub q2_0: f64,
    pub q1_t: f64,
    pub q2_t: f64,
}

impl BoundaryConditions {
    /// `q1: -10 → 10`, `q2 = 4.5` at both ends.
    pub fn transfer() -> Self {
        Self { q1_0: -10.0, q2_0: 4.5, q1_t: 10.0, q2_t: 4.5 }
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.q1_0, self.q2_0, self.q1_t, self.q2_t];
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("boundary values must be finite"));
        }
        if self.q2_0 <= 0.0 || self.q2_t <= 0.0 {
            return Err(Error::InvalidParameter("boundary q2 values must be positive"));
        }
        Ok(())
    }

    /// Symmetric under `q1 → -q1` combined with time reversal.
    pub fn is_symmetric(&self) -> bool {
        self.q1_0 == -self.q1_t && self.q2_0 == self.q2_t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Phases {
    pub t_a: f64,
    pub tau_erg: f64,
    pub t_d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BvpSolution {
    pub horizon: f64,
    /// Physical times `t ∈ [0, T]`.
    pub mesh: Vec<f64>,
    pub states: Vec<PhaseState>,
    /// Energy at `t = 0`.
    pub energy: f64,
    /// Largest scaled collocation defect.
    pub residual: f64,
    /// Largest boundary mismatch.
    pub bc_residual: f64,
    pub newton_iterations: usize,
}

impl BvpSolution {
    /// Largest relative deviation of the energy from its value at `t = 0`.
    pub fn energy_spread(&self, params: &ModelParams) -> f64 {
        let e0 = self.energy;
        self.states
            .iter()
            .map(|s| fabs(energy_unchecked(params, s) - e0))
            .fold(0.0, f64::max)
            / fabs(e0).max(1e-300)
    }

    /// Dense trajectory: mesh nodes plus `sub` Hermite-interpolated points
    /// per interval.
    pub fn trajectory(&self, params: &ModelParams, sub: usize) -> Trajectory {
        let mut times = Vec::with_capacity(self.mesh.len() * (sub + 1));
        let mut states = Vec::with_capacity(times.capacity());
        for i in 0..self.mesh.len() {
            times.push(self.mesh[i]);
            states.push(self.states[i]);
            if i + 1 == self.mesh.len() {
                break;
            }
            let (t0, t1) = (self.mesh[i], self.mesh[i + 1]);
            let (y0, y1) = (self.states[i].to_array(), self.states[i + 1].to_array());
            let (f0, f1) = (field(params, &y0), field(params, &y1));
            for k in 1..=sub {
                let th = k as f64 / (sub + 1) as f64;
                let y = hermite(&y0, &y1, &f0, &f1, t1 - t0, th);
                times.push(t0 + th * (t1 - t0));
                states.push(PhaseState::from_array(y));
            }
        }
        Trajectory { times, states, energy0: self.energy }
    }

    /// State at physical time `t` from the Hermite interpolant.
    pub fn state_at(&self, params: &ModelParams, t: f64) -> PhaseState {
        let n = self.mesh.len();
        let i = match self.mesh.iter().position(|&m| m > t) {
            Some(0) => 0,
            Some(k) => k - 1,
            None => n - 2,
        };
        let (t0, t1) = (self.mesh[i], self.mesh[i + 1]);
        let (y0, y1) = (self.states[i].to_array(), self.states[i + 1].to_array());
        let th = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        PhaseState::from_array(hermite(&y0, &y1, &field(params, &y0), &field(params, &y1), t1 - t0, th))
    }

    /// Resamples onto `n` uniform nodes, keeping the horizon.
    pub fn resample(&self, params: &ModelParams, n: usize) -> BvpSolution {
        let n = n.max(2);
        let mut mesh = Vec::with_capacity(n);
        let mut states = Vec::with_capacity(n);
        for k in 0..n {
            let t = self.horizon * k as f64 / (n - 1) as f64;
            mesh.push(t);
            states.push(self.state_at(params, t));
        }
        BvpSolution { mesh, states, ..self.clone() }
    }

    /// Mirror image `(q1, p1, q2, p2)(t) → (-q1, p1, q2, -p2)(T - t)`.
    pub fn reflected(&self) -> BvpSolution {
        let t = self.horizon;
        let mesh: Vec<f64> = self.mesh.iter().rev().map(|m| t - m).collect();
        let states: Vec<PhaseState> = self
            .states
            .iter()
            .rev()
            .map(|s| PhaseState::new(-s.q1, s.p1, s.q2, -s.p2))
            .collect();
        BvpSolution { mesh, states, ..self.clone() }
    }
}

fn hermite(y0: &[f64; 4], y1: &[f64; 4], f0: &[f64; 4], f1: &[f64; 4], h: f64, th: f64) -> [f64; 4] {
    let t2 = th * th;
    let t3 = t2 * th;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + th;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    let mut y = [0.0; 4];
    for j in 0..4 {
        y[j] = h00 * y0[j] + h10 * h * f0[j] + h01 * y1[j] + h11 * h * f1[j];
    }
    y
}

/// Scalar condition that closes the system alongside the four boundary values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParameterCondition {
    /// Fixed horizon.
    Horizon(f64),
    /// Fixed energy at `t = 0`; the horizon is free.
    Energy(f64),
    /// `wt (T − T0) + we (E − E0) = ds`.
    Arclength { t0: f64, e0: f64, wt: f64, we: f64, ds: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct BvpOptions {
    /// Target for the largest scaled defect.
    pub tol: f64,
    /// Newton stops when the largest residual drops below this value times
    /// `1 + max |y|`.
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_nodes: usize,
    pub max_refinements: usize,
    /// Largest accepted relative energy spread along the solution; the
    /// defect target is tightened until it holds.
    pub energy_tol: f64,
}

impl Default for BvpOptions {
    fn default() -> Self {
        Self { tol: 1e-8, newton_tol: 1e-10, max_newton: 60, max_nodes: 40_000, max_refinements: 25, energy_tol: 1e-6 }
    }
}

/// Defect level below which tightening for energy constancy stops.
const DEFECT_FLOOR: f64 = 3e-11;

/// Starting point for [`solve_bvp`].
#[derive(Debug, Clone, PartialEq)]
pub enum Guess {
    /// Linear interpolation of the boundary values with consistent
    /// momenta, on `nodes` uniform nodes.
    StraightLine { nodes: usize },
    /// A previous solution, rescaled to the requested horizon.
    Solution(BvpSolution),
}

/// Straight-line initial guess.
pub fn straight_line_guess(params: &ModelParams, bc: &BoundaryConditions, horizon: f64, nodes: usize) -> BvpSolution {
    let n = nodes.max(3);
    let e2mu = params.epsilon * params.epsilon * params.mu;
    let p1 = -params.mu * (bc.q1_t - bc.q1_0) / horizon;
    let p2 = -e2mu * (bc.q2_t - bc.q2_0) / horizon;
    let mut mesh = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for k in 0..n {
        let s = k as f64 / (n - 1) as f64;
        mesh.push(s * horizon);
        states.push(PhaseState::new(
            bc.q1_0 + s * (bc.q1_t - bc.q1_0),
            p1,
            bc.q2_0 + s * (bc.q2_t - bc.q2_0),
            p2,
        ));
    }
    let energy = energy_unchecked(params, &states[0]);
    BvpSolution { horizon, mesh, states, energy, residual: f64::NAN, bc_residual: f64::NAN, newton_iterations: 0 }
}

/// Working representation on the unit interval.
#[derive(Clone)]
struct Work {
    tau: Vec<f64>,
    y: Vec<V5>,
}

impl Work {
    fn from_solution(sol: &BvpSolution, horizon: f64) -> Self {
        let t_end = sol.horizon;
        let tau = sol.mesh.iter().map(|t| t / t_end).collect();
        let y = sol
            .states
            .iter()
            .map(|s| V5::new(s.q1, s.p1 * t_end / horizon, s.q2, s.p2 * t_end / horizon, horizon))
            .collect();
        // Momenta scale with 1/T when the time axis is stretched.
        Work { tau, y }
    }

    fn horizon(&self) -> f64 {
        self.y[0][4]
    }
}

#[inline]
fn x4(y: &V5) -> [f64; 4] {
    [y[0], y[1], y[2], y[3]]
}

#[inline]
fn g(params: &ModelParams, y: &V5) -> V5 {
    let f = field(params, &x4(y));
    let t = y[4];
    V5::new(t * f[0], t * f[1], t * f[2], t * f[3], 0.0)
}

#[inline]
fn g_jac(params: &ModelParams, y: &V5) -> M5 {
    let x = x4(y);
    let f = field(params, &x);
    let j: Matrix4<f64> = jacobian(params, &x);
    let t = y[4];
    let mut m = M5::zeros();
    for r in 0..4 {
        for c in 0..4 {
            m[(r, c)] = t * j[(r, c)];
        }
        m[(r, 4)] = f[r];
    }
    m
}

fn energy_of(params: &ModelParams, y: &V5) -> f64 {
    energy_unchecked(params, &PhaseState::new(y[0], y[1], y[2], y[3]))
}

fn energy_grad(params: &ModelParams, y: &V5) -> [f64; 4] {
    // ∂E/∂(q1,p1,q2,p2) = (ṗ1, -q̇1, ṗ2, -q̇2).
    let f = field(params, &x4(y));
    [f[1], -f[0], f[3], -f[2]]
}

const KL: usize = 7;
const KU: usize = 6;

struct System<'a> {
    params: &'a ModelParams,
    bc: &'a BoundaryConditions,
    cond: ParameterCondition,
    /// Dense arclength row replacing the scalar condition, on the current mesh.
    arc: Option<ArcRow>,
}

/// `Σ a_k (x_k − base_k) = ds` over all unknowns.
struct ArcRow {
    a: Vec<f64>,
    base: Vec<f64>,
    ds: f64,
}

/// Arclength constraint in the full discretised space, carried on the mesh
/// of the point it starts from and transferred to other meshes by linear
/// interpolation in `τ`.
struct ArcRef {
    tau: Vec<f64>,
    base: Vec<V5>,
    tangent: Vec<V5>,
    scale: V5,
    ds: f64,
}

fn interp(tau0: &[f64], y0: &[V5], tau: f64) -> V5 {
    let k = match tau0.iter().position(|&t| t > tau) {
        Some(0) => 0,
        Some(k) => k - 1,
        None => tau0.len() - 2,
    };
    let th = ((tau - tau0[k]) / (tau0[k + 1] - tau0[k])).clamp(0.0, 1.0);
    y0[k] * (1.0 - th) + y0[k + 1] * th
}

/// Trapezoidal weights on a mesh of `[0, 1]`.
fn trapezoid(tau: &[f64]) -> Vec<f64> {
    let n = tau.len();
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = 0.5 * (tau[i + 1] - tau[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

impl ArcRef {
    fn new(cur: &Work, prev: &Work, ds: f64) -> Option<Self> {
        let mut scale = V5::repeat(1.0);
        for y in &cur.y {
            for c in 0..5 {
                scale[c] = scale[c].max(1.0 + fabs(y[c]));
            }
        }
        let diff: Vec<V5> = cur.tau.iter().zip(&cur.y).map(|(t, y)| y - interp(&prev.tau, &prev.y, *t)).collect();
        let w = trapezoid(&cur.tau);
        let nrm = sqrt(
            diff.iter()
                .zip(&w)
                .map(|(d, wi)| wi * d.component_div(&scale).norm_squared())
                .sum::<f64>(),
        );
        if !(nrm > 0.0 && nrm.is_finite()) {
            return None;
        }
        let tangent = diff.into_iter().map(|d| d / nrm).collect();
        Some(Self { tau: cur.tau.clone(), base: cur.y.clone(), tangent, scale, ds })
    }

    fn predictor(&self) -> Work {
        let y = self.base.iter().zip(&self.tangent).map(|(b, t)| b + t * self.ds).collect();
        Work { tau: self.tau.clone(), y }
    }

    fn row(&self, tau: &[f64]) -> ArcRow {
        let w = trapezoid(tau);
        let mut a = Vec::with_capacity(5 * tau.len());
        let mut base = Vec::with_capacity(5 * tau.len());
        for (t, wi) in tau.iter().zip(&w) {
            let tg = interp(&self.tau, &self.tangent, *t);
            let b = interp(&self.tau, &self.base, *t);
            for c in 0..5 {
                a.push(wi * tg[c] / (self.scale[c] * self.scale[c]));
                base.push(b[c]);
            }
        }
        ArcRow { a, base, ds: self.ds }
    }
}

impl System<'_> {
    fn residual(&self, w: &Work) -> Vec<f64> {
        let n = w.y.len();
        let mut r = vec![0.0; 5 * n];
        let y0 = &w.y[0];
        r[0] = y0[0] - self.bc.q1_0;
        r[1] = y0[2] - self.bc.q2_0;
        r[2] = match &self.arc {
            Some(arc) => {
                let mut v = -arc.ds;
                for (k, y) in w.y.iter().enumerate() {
                    for c in 0..5 {
                        v += arc.a[5 * k + c] * (y[c] - arc.base[5 * k + c]);
                    }
                }
                v
            }
            None => self.cond_value(y0),
        };
        let mut g0 = g(self.params, &w.y[0]);
        for i in 0..n - 1 {
            let h = w.tau[i + 1] - w.tau[i];
            let (ya, yb) = (&w.y[i], &w.y[i + 1]);
            let g1 = g(self.params, yb);
            let ym = (ya + yb) * 0.5 - (g1 - g0) * (h / 8.0);
            let gm = g(self.params, &ym);
            let ri = yb - ya - (g0 + gm * 4.0 + g1) * (h / 6.0);
            for k in 0..5 {
                r[3 + 5 * i + k] = ri[k];
            }
            g0 = g1;
        }
        let yn = &w.y[n - 1];
        r[5 * n - 2] = yn[0] - self.bc.q1_t;
        r[5 * n - 1] = yn[2] - self.bc.q2_t;
        r
    }

    fn cond_value(&self, y0: &V5) -> f64 {
        match self.cond {
            ParameterCondition::Horizon(t) => y0[4] - t,
            ParameterCondition::Energy(e) => energy_of(self.params, y0) - e,
            ParameterCondition::Arclength { t0, e0, wt, we, ds } => {
                wt * (y0[4] - t0) + we * (energy_of(self.params, y0) - e0) - ds
            }
        }
    }

    fn jacobian(&self, w: &Work) -> BandMatrix {
        let n = w.y.len();
        let mut a = BandMatrix::zeros(5 * n, KL, KU);
        a.set(0, 0, 1.0);
        a.set(1, 2, 1.0);
        let y0 = &w.y[0];
        // With an arclength row the banded part keeps a unit entry on T and
        // the dense correction is applied in `solve_newton_step`.
        let cond = if self.arc.is_some() { ParameterCondition::Horizon(0.0) } else { self.cond };
        match cond {
            ParameterCondition::Horizon(_) => a.set(2, 4, 1.0),
            ParameterCondition::Energy(_) => {
                let ge = energy_grad(self.params, y0);
                for c in 0..4 {
                    a.set(2, c, ge[c]);
                }
            }
            ParameterCondition::Arclength { wt, we, .. } => {
                let ge = energy_grad(self.params, y0);
                for c in 0..4 {
                    a.set(2, c, we * ge[c]);
                }
                a.set(2, 4, wt);
            }
        }
        let id = M5::identity();
        let mut g0 = g(self.params, &w.y[0]);
        let mut j0 = g_jac(self.params, &w.y[0]);
        for i in 0..n - 1 {
            let h = w.tau[i + 1] - w.tau[i];
            let (ya, yb) = (&w.y[i], &w.y[i + 1]);
            let g1 = g(self.params, yb);
            let j1 = g_jac(self.params, yb);
            let ym = (ya + yb) * 0.5 - (g1 - g0) * (h / 8.0);
            let jm = g_jac(self.params, &ym);
            let da = -id - (j0 + jm * (id * 0.5 + j0 * (h / 8.0)) * 4.0) * (h / 6.0);
            let db = id - (j1 + jm * (id * 0.5 - j1 * (h / 8.0)) * 4.0) * (h / 6.0);
            let row = 3 + 5 * i;
            for r in 0..5 {
                for c in 0..5 {
                    a.set(row + r, 5 * i + c, da[(r, c)]);
                    a.set(row + r, 5 * (i + 1) + c, db[(r, c)]);
                }
            }
            g0 = g1;
            j0 = j1;
        }
        a.set(5 * n - 2, 5 * (n - 1), 1.0);
        a.set(5 * n - 1, 5 * (n - 1) + 2, 1.0);
        a
    }

    /// Newton step `J⁻¹ r`, with a Sherman–Morrison update for the dense
    /// arclength row.
    fn newton_step(&self, w: &Work, r: &[f64]) -> Result<Vec<f64>> {
        let mut a = self.jacobian(w);
        a.factor()?;
        let mut z = r.to_vec();
        a.solve(&mut z);
        if let Some(arc) = &self.arc {
            let mut u = vec![0.0; r.len()];
            u[2] = 1.0;
            a.solve(&mut u);
            // Row 2 of J is e_T + v with v = a − e_T.
            let vdot = |x: &[f64]| arc.a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() - x[4];
            let den = 1.0 + vdot(&u);
            if fabs(den) < 1e-14 {
                return Err(Error::SingularSystem);
            }
            let f = vdot(&z) / den;
            for (zi, ui) in z.iter_mut().zip(&u) {
                *zi -= f * ui;
            }
        }
        Ok(z)
    }

    fn feasible(&self, w: &Work) -> bool {
        w.y.iter().all(|y| y[2] > 0.0 && y[4] > 0.0 && y.iter().all(|v| v.is_finite()))
    }
}

fn norm2(v: &[f64]) -> f64 {
    sqrt(v.iter().map(|x| x * x).sum())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| fabs(*x)).fold(0.0, f64::max)
}

/// Damped Newton on a fixed mesh.
fn newton(sys: &System<'_>, w: &mut Work, opts: &BvpOptions) -> Result<usize> {
    if !sys.feasible(w) {
        return Err(Error::InfeasibleGuess);
    }
    let scale = |w: &Work| 1.0 + w.y.iter().map(|y| y.amax()).fold(0.0, f64::max);
    let mut r = sys.residual(w);
    let mut rn = norm2(&r);
    for it in 0..opts.max_newton {
        let tol = opts.newton_tol * scale(w);
        if max_abs(&r) < tol {
            return Ok(it);
        }
        let dx = sys.newton_step(w, &r)?;
        let mut lam = 1.0;
        loop {
            let mut trial = w.clone();
            for (k, y) in trial.y.iter_mut().enumerate() {
                for c in 0..5 {
                    y[c] -= lam * dx[5 * k + c];
                }
            }
            if sys.feasible(&trial) {
                let rt = sys.residual(&trial);
                let rtn = norm2(&rt);
                if rtn.is_finite() && rtn <= (1.0 - 1e-4 * lam) * rn {
                    *w = trial;
                    r = rt;
                    rn = rtn;
                    break;
                }
            }
            lam *= 0.5;
            if lam < 1e-6 {
                // Round-off floor: accept if already close.
                if max_abs(&r) < 10.0 * tol {
                    return Ok(it);
                }
                return Err(Error::NonConvergence { iterations: it, residual: max_abs(&r) });
            }
        }
        let step = max_abs(&dx) * lam;
        if step < 1e-14 * scale(w) && max_abs(&r) < 10.0 * tol {
            return Ok(it + 1);
        }
    }
    if max_abs(&r) < opts.newton_tol * scale(w) {
        Ok(opts.max_newton)
    } else {
        Err(Error::NonConvergence { iterations: opts.max_newton, residual: max_abs(&r) })
    }
}

/// Per-interval scaled defect `h·|S' − g(S)| / (1 + |g(S)|)` of the
/// Hermite-cubic interpolant, sampled off the collocation points.
fn defects(params: &ModelParams, w: &Work) -> Vec<f64> {
    let n = w.y.len();
    let mut out = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let h = w.tau[i + 1] - w.tau[i];
        let (ya, yb) = (&w.y[i], &w.y[i + 1]);
        let (ga, gb) = (g(params, ya), g(params, yb));
        let mut worst: f64 = 0.0;
        for &th in &[0.25, 0.75] {
            let t2 = th * th;
            let t3 = t2 * th;
            let s = ya * (2.0 * t3 - 3.0 * t2 + 1.0)
                + ga * (h * (t3 - 2.0 * t2 + th))
                + yb * (-2.0 * t3 + 3.0 * t2)
                + gb * (h * (t3 - t2));
            let ds = (ya - yb) * ((6.0 * t2 - 6.0 * th) / h)
                + ga * (3.0 * t2 - 4.0 * th + 1.0)
                + gb * (3.0 * t2 - 2.0 * th);
            if s[2] <= 0.0 {
                return vec![f64::INFINITY; n - 1];
            }
            let gs = g(params, &s);
            for c in 0..4 {
                let d = h * fabs(ds[c] - gs[c]) / (1.0 + fabs(gs[c]));
                worst = worst.max(d);
            }
        }
        out.push(worst);
    }
    out
}

fn refine(params: &ModelParams, w: &Work, d: &[f64], tol: f64) -> Work {
    let mut tau = Vec::with_capacity(2 * w.tau.len());
    let mut y = Vec::with_capacity(2 * w.tau.len());
    for i in 0..w.tau.len() - 1 {
        tau.push(w.tau[i]);
        y.push(w.y[i]);
        let pieces = if d[i] > 100.0 * tol {
            3
        } else if d[i] > tol {
            2
        } else {
            1
        };
        if pieces > 1 {
            let h = w.tau[i + 1] - w.tau[i];
            let (ya, yb) = (&w.y[i], &w.y[i + 1]);
            let (ga, gb) = (g(params, ya), g(params, yb));
            for k in 1..pieces {
                let th = k as f64 / pieces as f64;
                let t2 = th * th;
                let t3 = t2 * th;
                let s = ya * (2.0 * t3 - 3.0 * t2 + 1.0)
                    + ga * (h * (t3 - 2.0 * t2 + th))
                    + yb * (-2.0 * t3 + 3.0 * t2)
                    + gb * (h * (t3 - t2));
                tau.push(w.tau[i] + th * h);
                y.push(s);
            }
        }
    }
    tau.push(*w.tau.last().unwrap());
    y.push(*w.y.last().unwrap());
    Work { tau, y }
}

/// Drops every other node in runs of intervals whose defect is far below
/// `tol`, so a mesh refined for an earlier solution does not keep growing.
fn coarsen(params: &ModelParams, w: &Work, tol: f64, min_nodes: usize) -> Work {
    if w.tau.len() <= min_nodes {
        return w.clone();
    }
    let d = defects(params, w);
    let mut tau = vec![w.tau[0]];
    let mut y = vec![w.y[0]];
    let mut i = 0;
    let n = w.tau.len();
    while i + 1 < n {
        if i + 2 < n && d[i] < tol / 64.0 && d[i + 1] < tol / 64.0 {
            i += 2;
        } else {
            i += 1;
        }
        tau.push(w.tau[i]);
        y.push(w.y[i]);
    }
    Work { tau, y }
}

fn work_energy_spread(params: &ModelParams, w: &Work) -> f64 {
    let e = |y: &V5| energy_unchecked(params, &PhaseState::new(y[0], y[1], y[2], y[3]));
    let e0 = e(&w.y[0]);
    w.y.iter().map(|y| fabs(e(y) - e0)).fold(0.0, f64::max) / fabs(e0).max(1e-6)
}

fn finish(params: &ModelParams, bc: &BoundaryConditions, w: &Work, residual: f64, iters: usize) -> BvpSolution {
    let horizon = w.horizon();
    let mesh: Vec<f64> = w.tau.iter().map(|t| t * horizon).collect();
    let states: Vec<PhaseState> = w.y.iter().map(|y| PhaseState::new(y[0], y[1], y[2], y[3])).collect();
    let first = states[0];
    let last = *states.last().unwrap();
    let bc_residual = fabs(first.q1 - bc.q1_0)
        .max(fabs(first.q2 - bc.q2_0))
        .max(fabs(last.q1 - bc.q1_t))
        .max(fabs(last.q2 - bc.q2_t));
    BvpSolution {
        horizon,
        mesh,
        states,
        energy: energy_unchecked(params, &first),
        residual,
        bc_residual,
        newton_iterations: iters,
    }
}

/// Solves the boundary value problem closed by `cond`, starting from
/// `guess` (whose horizon is replaced by the condition's target when the
/// horizon is fixed).
pub fn solve_with_condition(
    params: &ModelParams,
    bc: &BoundaryConditions,
    cond: ParameterCondition,
    guess: &BvpSolution,
    opts: &BvpOptions,
) -> Result<BvpSolution> {
    params.validate()?;
    bc.validate()?;
    let t_start = match cond {
        ParameterCondition::Horizon(t) => t,
        _ => guess.horizon,
    };
    if !(t_start > 0.0) {
        return Err(Error::InvalidParameter("horizon must be positive"));
    }
    if guess.mesh.len() < 2 {
        return Err(Error::InvalidParameter("guess needs at least two nodes"));
    }
    let mut w = Work::from_solution(guess, t_start);
    w = coarsen(params, &w, opts.tol, 64);
    solve_work(params, bc, cond, None, w, opts)
}

fn solve_work(
    params: &ModelParams,
    bc: &BoundaryConditions,
    cond: ParameterCondition,
    arc: Option<&ArcRef>,
    mut w: Work,
    opts: &BvpOptions,
) -> Result<BvpSolution> {
    let mut total = 0;
    let mut tol = opts.tol;
    for _ in 0..=opts.max_refinements {
        let sys = System { params, bc, cond, arc: arc.map(|a| a.row(&w.tau)) };
        total += newton(&sys, &mut w, opts)?;
        let d = defects(params, &w);
        let worst = d.iter().cloned().fold(0.0, f64::max);
        if worst <= tol {
            let spread = work_energy_spread(params, &w);
            if spread <= opts.energy_tol || tol <= DEFECT_FLOOR {
                return Ok(finish(params, bc, &w, worst, total));
            }
            tol = (tol * (0.5 * opts.energy_tol / spread).min(0.5)).max(DEFECT_FLOOR);
        }
        if w.tau.len() >= opts.max_nodes {
            return Err(Error::NonConvergence { iterations: total, residual: worst });
        }
        w = refine(params, &w, &d, tol);
        if w.tau.len() > opts.max_nodes {
            return Err(Error::NonConvergence { iterations: total, residual: worst });
        }
    }
    Err(Error::NonConvergence { iterations: total, residual: f64::NAN })
}

/// Weighted distance between two solutions in the space of discretised
/// states and horizon, as used by [`arclength_step`].
pub fn solution_distance(cur: &BvpSolution, prev: &BvpSolution) -> f64 {
    let (c, p) = (Work::from_solution(cur, cur.horizon), Work::from_solution(prev, prev.horizon));
    match ArcRef::new(&c, &p, 0.0) {
        Some(_) => {
            let mut scale = V5::repeat(1.0);
            for y in &c.y {
                for k in 0..5 {
                    scale[k] = scale[k].max(1.0 + fabs(y[k]));
                }
            }
            let w = trapezoid(&c.tau);
            sqrt(
                c.tau
                    .iter()
                    .zip(&c.y)
                    .zip(&w)
                    .map(|((t, y), wi)| wi * (y - interp(&p.tau, &p.y, *t)).component_div(&scale).norm_squared())
                    .sum::<f64>(),
            )
        }
        None => 0.0,
    }
}

/// One pseudo-arclength step of length `ds` along the secant through
/// `prev` and `cur`, in the full space of discretised states and horizon.
pub fn arclength_step(
    params: &ModelParams,
    bc: &BoundaryConditions,
    cur: &BvpSolution,
    prev: &BvpSolution,
    ds: f64,
    opts: &BvpOptions,
) -> Result<BvpSolution> {
    let c = Work::from_solution(cur, cur.horizon);
    let p = Work::from_solution(prev, prev.horizon);
    let arc = ArcRef::new(&c, &p, ds).ok_or(Error::InvalidParameter("coincident continuation points"))?;
    let w = arc.predictor();
    if w.y.iter().any(|y| y[2] <= 0.0 || y[4] <= 0.0) {
        return Err(Error::InfeasibleGuess);
    }
    solve_work(params, bc, ParameterCondition::Horizon(cur.horizon), Some(&arc), w, opts)
}

/// Solves on the fixed horizon `horizon`.
pub fn solve_bvp(
    params: &ModelParams,
    bc: &BoundaryConditions,
    horizon: f64,
    guess: &Guess,
    opts: &BvpOptions,
) -> Result<BvpSolution> {
    let g = match guess {
        Guess::StraightLine { nodes } => straight_line_guess(params, bc, horizon, *nodes),
        Guess::Solution(s) => s.clone(),
    };
    solve_with_condition(params, bc, ParameterCondition::Horizon(horizon), &g, opts)
}

/// Solves on the existing mesh only (no refinement) and reports the defect;
/// used to measure the convergence order of the scheme.
pub fn defect_on_mesh(
    params: &ModelParams,
    bc: &BoundaryConditions,
    sol: &BvpSolution,
    opts: &BvpOptions,
) -> Result<f64> {
    let mut w = Work::from_solution(sol, sol.horizon);
    let sys = System { params, bc, cond: ParameterCondition::Horizon(sol.horizon), arc: None };
    newton(&sys, &mut w, opts)?;
    Ok(defects(params, &w).into_iter().fold(0.0, f64::max))
}

/// Same solution on a mesh with every interval halved.
pub fn halve_mesh(sol: &BvpSolution, params: &ModelParams) -> BvpSolution {
    let mut mesh = Vec::with_capacity(2 * sol.mesh.len());
    let mut states = Vec::with_capacity(2 * sol.mesh.len());
    for i in 0..sol.mesh.len() - 1 {
        mesh.push(sol.mesh[i]);
        states.push(sol.states[i]);
        let tm = 0.5 * (sol.mesh[i] + sol.mesh[i + 1]);
        mesh.push(tm);
        states.push(sol.state_at(params, tm));
    }
    mesh.push(*sol.mesh.last().unwrap());
    states.push(*sol.states.last().unwrap());
    BvpSolution { mesh, states, ..sol.clone() }
}

/// `p2 = 0` crossings of a solution, polished on the flow.
pub fn p2_crossings(params: &ModelParams, sol: &BvpSolution) -> Result<Vec<SectionEvent>> {
    find_section_crossings(&sol.trajectory(params, 3), Section::P2, params)
}

/// Number of `p2 = 0` crossings inside the ergodic window `|q1| ≤ q1_window`.
/// Tangential crossings count once.
pub fn rotation_count(params: &ModelParams, sol: &BvpSolution, q1_window: f64) -> Result<usize> {
    if !(q1_window > 0.0) {
        return Err(Error::InvalidParameter("q1_window must be positive"));
    }
    Ok(count_window_crossings(&sol.trajectory(params, 3).states, q1_window))
}

/// Sign changes of `p2` inside `|q1| ≤ q1_window` along a sampled path.
/// A hysteresis band keeps round-off on a resting path from counting.
pub fn count_window_crossings(states: &[PhaseState], q1_window: f64) -> usize {
    let scale = states.iter().map(|s| fabs(s.p2)).fold(0.0, f64::max);
    let thr = (1e-8 * scale).max(1e-9);
    let mut count = 0;
    let mut last: Option<(usize, f64)> = None;
    for (k, s) in states.iter().enumerate() {
        if fabs(s.p2) <= thr {
            continue;
        }
        let sign = s.p2.signum();
        if let Some((j, prev)) = last {
            if sign != prev {
                let (a, b) = (states[k - 1], states[k]);
                let q1 = if a.p2 == b.p2 { b.q1 } else { a.q1 + (b.q1 - a.q1) * a.p2 / (a.p2 - b.p2) };
                let q1 = if j + 1 == k { q1 } else { 0.5 * (states[j].q1 + b.q1) };
                if fabs(q1) <= q1_window {
                    count += 1;
                }
            }
        }
        last = Some((k, sign));
    }
    count
}

/// Arrival time, ergodic dwell and departure time relative to the window
/// `|q1| ≤ q1_window`. `None` when the solution never enters the window.
pub fn phase_decomposition(params: &ModelParams, sol: &BvpSolution, q1_window: f64) -> Option<Phases> {
    let tr = sol.trajectory(params, 3);
    let inside = |s: &PhaseState| fabs(s.q1) <= q1_window;
    let first = tr.states.iter().position(inside)?;
    let last = tr.states.iter().rposition(inside)?;
    let cross = |i: usize, j: usize| {
        // Linear interpolation of |q1| = window between samples i and j.
        let (a, b) = (fabs(tr.states[i].q1) - q1_window, fabs(tr.states[j].q1) - q1_window);
        let (ta, tb) = (tr.times[i], tr.times[j]);
        if a == b {
            ta
        } else {
            ta + (tb - ta) * a / (a - b)
        }
    };
    let t_in = if first == 0 { 0.0 } else { cross(first - 1, first) };
    let t_out = if last + 1 == tr.len() { sol.horizon } else { cross(last, last + 1) };
    let t_a = t_in;
    let t_d = sol.horizon - t_out;
    Some(Phases { t_a, tau_erg: sol.horizon - t_a - t_d, t_d })
}

/// Step policy for [`continue_branch`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct StepPolicy {
    pub initial: f64,
    pub floor: f64,
    pub max: f64,
    pub max_points: usize,
}

impl Default for StepPolicy {
    fn default() -> Self {
        Self { initial: 0.1, floor: 1e-4, max: 0.2, max_points: 2000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum BranchEnd {
    /// The horizon range was covered.
    Completed,
    /// Both predictors failed below the step floor.
    Terminated { horizon: f64, energy: f64 },
    /// Stopped after `max_points`.
    PointLimit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BranchPoint {
    pub horizon: f64,
    pub energy: f64,
    pub rotations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub label: alloc::string::String,
    pub points: Vec<BranchPoint>,
    pub solutions: Vec<BvpSolution>,
    pub end: BranchEnd,
    /// Whether a pseudo-arclength segment was used.
    pub used_arclength: bool,
}

impl Branch {
    /// Common rotation count of all points, if they agree.
    pub fn topology(&self) -> Option<usize> {
        let n = self.points.first()?.rotations;
        self.points.iter().all(|p| p.rotations == n).then_some(n)
    }

    pub fn energy_increasing(&self) -> bool {
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| a.horizon.partial_cmp(&b.horizon).unwrap());
        pts.windows(2).all(|w| w[1].energy > w[0].energy)
    }

    pub fn energy_decreasing(&self) -> bool {
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| a.horizon.partial_cmp(&b.horizon).unwrap());
        pts.windows(2).all(|w| w[1].energy < w[0].energy)
    }
}

/// Continues a converged `seed` in the horizon towards `t_target`: natural
/// steps with a secant predictor, halved on failure, and a switch to
/// pseudo-arclength in the full solution space once the natural step falls
/// below the floor.
#[allow(clippy::too_many_arguments)]
pub fn continue_branch(
    params: &ModelParams,
    bc: &BoundaryConditions,
    seed: &BvpSolution,
    t_target: f64,
    policy: &StepPolicy,
    opts: &BvpOptions,
    q1_window: f64,
    label: &str,
) -> Result<Branch> {
    let dir = if t_target >= seed.horizon { 1.0 } else { -1.0 };
    let mut branch = Branch {
        label: label.into(),
        points: Vec::new(),
        solutions: Vec::new(),
        end: BranchEnd::Completed,
        used_arclength: false,
    };
    let push = |b: &mut Branch, s: &BvpSolution| -> Result<()> {
        let n = rotation_count(params, s, q1_window)?;
        b.points.push(BranchPoint { horizon: s.horizon, energy: s.energy, rotations: n });
        b.solutions.push(s.clone());
        Ok(())
    };
    push(&mut branch, seed)?;
    let mut cur = seed.clone();
    let mut prev: Option<BvpSolution> = None;
    let mut dt = policy.initial;
    let mut arclength = false;
    let (mut ds, mut ds_max, mut ds_min) = (0.0, 0.0, 0.0);
    while branch.points.len() < policy.max_points {
        if !arclength {
            if dir * (t_target - cur.horizon) <= 1e-12 {
                branch.end = BranchEnd::Completed;
                return Ok(branch);
            }
            let step = dt.min(fabs(t_target - cur.horizon));
            let t_new = cur.horizon + dir * step;
            let guess = secant_guess(params, &cur, prev.as_ref(), t_new);
            match solve_with_condition(params, bc, ParameterCondition::Horizon(t_new), &guess, opts) {
                Ok(s) => {
                    prev = Some(core::mem::replace(&mut cur, s));
                    push(&mut branch, &cur)?;
                    dt = (dt * 1.5).min(policy.max);
                }
                Err(_) => {
                    dt *= 0.5;
                    if dt < policy.floor {
                        let Some(p) = prev.as_ref() else {
                            branch.end = BranchEnd::Terminated { horizon: cur.horizon, energy: cur.energy };
                            return Ok(branch);
                        };
                        // Arclength per unit horizon near the stall point.
                        let rate = solution_distance(&cur, p) / fabs(cur.horizon - p.horizon).max(1e-300);
                        ds = rate * policy.initial;
                        ds_max = rate * policy.max;
                        ds_min = rate * policy.floor;
                        if !(ds > 0.0 && ds.is_finite()) {
                            branch.end = BranchEnd::Terminated { horizon: cur.horizon, energy: cur.energy };
                            return Ok(branch);
                        }
                        arclength = true;
                        branch.used_arclength = true;
                    }
                }
            }
        } else {
            let p = prev.as_ref().expect("arclength needs two points");
            match arclength_step(params, bc, &cur, p, ds, opts) {
                Ok(s) => {
                    prev = Some(core::mem::replace(&mut cur, s));
                    push(&mut branch, &cur)?;
                    ds = (ds * 1.5).min(ds_max);
                    if cur.horizon < 1e-3 * seed.horizon.min(t_target) {
                        branch.end = BranchEnd::Terminated { horizon: cur.horizon, energy: cur.energy };
                        return Ok(branch);
                    }
                    if dir * (cur.horizon - t_target) >= 0.0 {
                        branch.end = BranchEnd::Completed;
                        return Ok(branch);
                    }
                }
                Err(_) => {
                    ds *= 0.5;
                    if ds < ds_min {
                        branch.end = BranchEnd::Terminated { horizon: cur.horizon, energy: cur.energy };
                        return Ok(branch);
                    }
                }
            }
        }
    }
    branch.end = BranchEnd::PointLimit;
    Ok(branch)
}

/// Previous solution stretched to `t_new`, extrapolated along the secant
/// through the last two solutions when available.
fn secant_guess(params: &ModelParams, cur: &BvpSolution, prev: Option<&BvpSolution>, t_new: f64) -> BvpSolution {
    let scaled = |s: &BvpSolution, t: f64| -> Vec<PhaseState> {
        s.mesh
            .iter()
            .zip(&s.states)
            .map(|(_, st)| PhaseState::new(st.q1, st.p1 * s.horizon / t, st.q2, st.p2 * s.horizon / t))
            .collect()
    };
    let mut guess = cur.clone();
    guess.mesh = cur.mesh.iter().map(|m| m / cur.horizon * t_new).collect();
    guess.states = scaled(cur, t_new);
    guess.horizon = t_new;
    if let Some(p) = prev {
        let dt = cur.horizon - p.horizon;
        if dt != 0.0 {
            let a = (t_new - cur.horizon) / dt;
            let pr: Vec<PhaseState> = guess
                .mesh
                .iter()
                .map(|m| {
                    let st = p.state_at(params, m / t_new * p.horizon);
                    PhaseState::new(st.q1, st.p1 * p.horizon / t_new, st.q2, st.p2 * p.horizon / t_new)
                })
                .collect();
            for (g, q) in guess.states.iter_mut().zip(pr) {
                let ex = PhaseState::new(
                    g.q1 + a * (g.q1 - q.q1),
                    g.p1 + a * (g.p1 - q.p1),
                    g.q2 + a * (g.q2 - q.q2),
                    g.p2 + a * (g.p2 - q.p2),
                );
                if ex.q2 > 0.0 {
                    *g = ex;
                }
            }
        }
    }
    guess
}

/// Settings for [`composite_guess`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SeedOptions {
    pub n_strands: usize,
    pub t_int: f64,
    pub nodes: usize,
    /// Strand samples with `|q1|` below this value are dropped, removing
    /// the slow spiral off the orbit.
    pub trim_q1: f64,
}

impl Default for SeedOptions {
    fn default() -> Self {
        Self { n_strands: 32, t_int: 120.0, nodes: 800, trim_q1: 0.05 }
    }
}

/// Initial guess following the tubes of `po`: a stable-tube strand from the
/// plane `q1 = q1_0`, `half_periods` half-periods on the orbit, and an
/// unstable-tube strand to the plane `q1 = q1_T`. Strands are chosen to
/// land closest to the prescribed `q2` values; the horizon of the guess is
/// the total travel time.
pub fn composite_guess(
    params: &ModelParams,
    bc: &BoundaryConditions,
    po: &PeriodicOrbit,
    half_periods: usize,
    seed: &SeedOptions,
) -> Result<BvpSolution> {
    let d = default_displacement(po);
    let stop = TubeOptions { q1_stop: Some(1.05 * fabs(bc.q1_0).max(fabs(bc.q1_t))), flow: FlowOptions::default() };
    let side_in = if bc.q1_0 < 0.0 { -1.0 } else { 1.0 };
    let side_out = if bc.q1_t < 0.0 { -1.0 } else { 1.0 };
    let ws = tube(params, po, TubeBranch::Stable, side_in, d, seed.n_strands, seed.t_int, &stop)?;
    let wu = tube(params, po, TubeBranch::Unstable, side_out, d, seed.n_strands, seed.t_int, &stop)?;

    // Arrival: last crossing of q1 = q1_0 before reaching the orbit.
    let mut best: Option<(f64, usize, SectionEvent)> = None;
    for (k, s) in ws.strands.iter().enumerate() {
        if let Some(e) = find_section_crossings(&s.trajectory, Section::Q1(bc.q1_0), params)?.last() {
            let miss = fabs(e.state.q2 - bc.q2_0);
            if best.as_ref().map_or(true, |b| miss < b.0) {
                best = Some((miss, k, *e));
            }
        }
    }
    let (_, k_in, e_in) = best.ok_or(Error::InfeasibleGuess)?;
    let strand_in = &ws.strands[k_in];

    // Departure strand launched nearest the phase reached after the orbit leg.
    let leg = 0.5 * po.period * half_periods as f64;
    let phase_out = (strand_in.phase + leg) % po.period;
    let mut best: Option<(f64, usize, SectionEvent)> = None;
    for (k, s) in wu.strands.iter().enumerate() {
        let dp = fabs(s.phase - phase_out);
        let dp = dp.min(po.period - dp);
        if let Some(e) = find_section_crossings(&s.trajectory, Section::Q1(bc.q1_t), params)?.first() {
            let miss = fabs(e.state.q2 - bc.q2_t) + dp / po.period;
            if best.as_ref().map_or(true, |b| miss < b.0) {
                best = Some((miss, k, *e));
            }
        }
    }
    let (_, k_out, e_out) = best.ok_or(Error::InfeasibleGuess)?;
    let strand_out = &wu.strands[k_out];

    let mut mesh: Vec<f64> = Vec::new();
    let mut states: Vec<PhaseState> = Vec::new();
    fn push(mesh: &mut Vec<f64>, states: &mut Vec<PhaseState>, t: f64, s: PhaseState) {
        if mesh.last().map_or(true, |&l| t > l + 1e-12) {
            mesh.push(t);
            states.push(s);
        }
    }
    let tr = &strand_in.trajectory;
    push(&mut mesh, &mut states, 0.0, e_in.state);
    for (t, s) in tr.times.iter().zip(&tr.states) {
        if *t > e_in.time {
            if fabs(s.q1) < seed.trim_q1 {
                break;
            }
            push(&mut mesh, &mut states, t - e_in.time, *s);
        }
    }
    let t1 = *mesh.last().unwrap();
    if half_periods > 0 {
        let start = *tr.states.last().unwrap();
        let n_leg = 40 * half_periods;
        let times: Vec<f64> = (1..=n_leg).map(|i| leg * i as f64 / n_leg as f64).collect();
        let orbit_leg = integrate_sampled(params, &start, (0.0, leg), &times, &FlowOptions::default())?;
        for (t, s) in orbit_leg.times.iter().zip(&orbit_leg.states) {
            push(&mut mesh, &mut states, t1 + t, *s);
        }
    }
    let t2 = *mesh.last().unwrap();
    let tr = &strand_out.trajectory;
    let t_skip = tr
        .times
        .iter()
        .zip(&tr.states)
        .find(|(_, s)| fabs(s.q1) >= seed.trim_q1)
        .map_or(0.0, |(t, _)| *t);
    for (t, s) in tr.times.iter().zip(&tr.states) {
        if *t >= t_skip && *t < e_out.time {
            push(&mut mesh, &mut states, t2 + 1e-3 + t - t_skip, *s);
        }
    }
    let t_last = t2 + 1e-3 + (e_out.time - t_skip).max(1e-9);
    push(&mut mesh, &mut states, t_last, e_out.state);

    let horizon = *mesh.last().unwrap();
    let raw = BvpSolution {
        horizon,
        energy: po.energy,
        mesh,
        states,
        residual: f64::NAN,
        bc_residual: f64::NAN,
        newton_iterations: 0,
    };
    Ok(raw.resample(params, seed.nodes))
}

/// One row of the bifurcation table.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagramRow {
    pub branch: alloc::string::String,
    pub horizon: f64,
    pub energy: f64,
    pub rotations: usize,
}

/// Merges continued branches into a table sorted by branch label then `T`.
pub fn bifurcation_diagram(branches: &[Branch]) -> Vec<DiagramRow> {
    let mut rows: Vec<DiagramRow> = branches
        .iter()
        .flat_map(|b| {
            b.points.iter().map(move |p| DiagramRow {
                branch: b.label.clone(),
                horizon: p.horizon,
                energy: p.energy,
                rotations: p.rotations,
            })
        })
        .collect();
    rows.sort_by(|a, b| a.branch.cmp(&b.branch).then(a.horizon.partial_cmp(&b.horizon).unwrap()));
    rows
}

/// Branch solutions whose horizon lies within `tol` of `t`, one per branch
/// (nearest point), for multiplicity checks.
pub fn solutions_at(branches: &[Branch], t: f64, tol: f64) -> Vec<(alloc::string::String, BranchPoint)> {
    let mut out = Vec::new();
    for b in branches {
        if let Some(p) = b
            .points
            .iter()
            .filter(|p| fabs(p.horizon - t) <= tol)
            .min_by(|x, y| fabs(x.horizon - t).partial_cmp(&fabs(y.horizon - t)).unwrap())
        {
            out.push((b.label.clone(), *p));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::find_equilibria;

    #[test]
    fn equilibrium_solves_degenerate_problem() {
        let p = ModelParams::saddle_center();
        let eq = find_equilibria(&p, (1.0, 10.0)).unwrap()[0];
        let q = eq.state.q2;
        let bc = BoundaryConditions { q1_0: 0.0, q2_0: q, q1_t: 0.0, q2_t: q };
        let s = solve_bvp(&p, &bc, 3.0, &Guess::StraightLine { nodes: 20 }, &BvpOptions::default()).unwrap();
        for st in &s.states {
            assert!(st.q1.abs() < 1e-12 && (st.q2 - q).abs() < 1e-9 && st.p1.abs() < 1e-12 && st.p2.abs() < 1e-9);
        }
        assert_eq!(rotation_count(&p, &s, 0.5).unwrap(), 0);
        let ph = phase_decomposition(&p, &s, 0.5).unwrap();
        assert_eq!((ph.t_a, ph.t_d), (0.0, 0.0));
        assert_eq!(ph.tau_erg, 3.0);
    }

    #[test]
    fn short_transfer_matches_flow() {
        // Small excursion near the equilibrium: converged solution must be a
        // trajectory of the flow.
        let p = ModelParams::saddle_center();
        let bc = BoundaryConditions { q1_0: -0.5, q2_0: 3.7, q1_t: 0.5, q2_t: 3.7 };
        let s = solve_bvp(&p, &bc, 2.0, &Guess::StraightLine { nodes: 50 }, &BvpOptions::default()).unwrap();
        assert!(s.bc_residual < 1e-9);
        let end = crate::dynamics::flow(&p, &s.states[0], 2.0, &crate::dynamics::FlowOptions::default()).unwrap();
        assert!((end.q1 - 0.5).abs() < 1e-5, "{}", end.q1);
        assert!((end.q2 - 3.7).abs() < 1e-5, "{}", end.q2);
        assert!(s.energy_spread(&p) < 1e-6);
    }

    #[test]
    fn band_jacobian_matches_finite_differences() {
        let p = ModelParams::saddle_center();
        let bc = BoundaryConditions { q1_0: -1.0, q2_0: 3.5, q1_t: 1.0, q2_t: 4.0 };
        let g0 = straight_line_guess(&p, &bc, 2.0, 6);
        let mut w = Work::from_solution(&g0, 2.1);
        for (k, y) in w.y.iter_mut().enumerate() {
            y[1] += 0.01 * k as f64;
            y[3] -= 0.002 * k as f64;
        }
        for cond in [
            ParameterCondition::Horizon(2.0),
            ParameterCondition::Energy(-2.0),
            ParameterCondition::Arclength { t0: 2.0, e0: -2.0, wt: 0.6, we: 0.8, ds: 0.1 },
        ] {
            let sys = System { params: &p, bc: &bc, cond, arc: None };
            let a = sys.jacobian(&w);
            let r0 = sys.residual(&w);
            let n = r0.len();
            for col in 0..n {
                let mut wp = w.clone();
                let h = 1e-6 * (1.0 + fabs(wp.y[col / 5][col % 5]));
                wp.y[col / 5][col % 5] += h;
                let r1 = sys.residual(&wp);
                for row in 0..n {
                    let fd = (r1[row] - r0[row]) / h;
                    let an = a.get(row, col);
                    assert!((fd - an).abs() < 1e-4 * (1.0 + an.abs()), "({row},{col}) {fd} vs {an}");
                }
            }
        }
    }
}

