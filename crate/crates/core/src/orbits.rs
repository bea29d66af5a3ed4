//! Periodic orbits around the saddle×center bottleneck and their stable
//! and unstable tubes.
//!
//! The plane `q1 = p1 = 0` is invariant, so the bottleneck orbit is a
//! one-degree-of-freedom oscillation of the variance. Its monodromy is
//! block diagonal: the mean block carries the hyperbolic pair and the
//! variance block the double unit eigenvalue.

use alloc::vec::Vec;

use libm::{fabs, sqrt};
use nalgebra::{Complex, Matrix4, Vector4};

use crate::dynamics::{
    find_section_crossings, flow, flow_with_stm, integrate_until, FlowOptions, Section, Trajectory,
};
use crate::error::{Error, Result};
use crate::linalg::eigenvalues4;
use crate::model::{energy_unchecked, field, potential_unchecked, ModelParams, PhaseState};
use crate::spectral::{to_eigen_coords, EigenBasis, Equilibrium, EquilibriumKind, RegionSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicOrbit {
    pub energy: f64,
    /// Inner turning point `(0, 0, q2_0, 0)`.
    pub seed: PhaseState,
    /// Outer turning point `q2` (half a period after the seed).
    pub q2_outer: f64,
    pub period: f64,
    pub samples: Trajectory,
    pub monodromy: Matrix4<f64>,
    /// Unstable Floquet multiplier (`> 1`); the stable one is its inverse.
    pub lambda_u: f64,
    /// Unit unstable and stable eigenvectors at the seed, oriented with a
    /// positive `q1` component.
    pub unstable_dir: Vector4<f64>,
    pub stable_dir: Vector4<f64>,
    /// `|φ_T(seed) − seed|`.
    pub closure: f64,
}

impl PeriodicOrbit {
    pub fn multipliers(&self) -> [Complex<f64>; 4] {
        eigenvalues4(&self.monodromy)
    }

    /// Half-width of the variance oscillation.
    pub fn amplitude(&self) -> f64 {
        0.5 * (self.q2_outer - self.seed.q2)
    }
}

fn v0(params: &ModelParams, q2: f64) -> f64 {
    potential_unchecked(params, 0.0, q2)
}

/// Solves `V(0, q2) = e` on a bracket where `V − e` changes sign.
fn turning_point(params: &ModelParams, e: f64, mut a: f64, mut b: f64) -> f64 {
    let fa0 = v0(params, a) - e;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = v0(params, m) - e;
        if fm == 0.0 {
            return m;
        }
        if (fm > 0.0) == (fa0 > 0.0) {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Inner and outer turning points of the variance oscillation at energy `e`.
pub fn turning_points(params: &ModelParams, eq: &Equilibrium, e: f64) -> Result<(f64, f64)> {
    let q_eq = eq.state.q2;
    // Inner: walk inward geometrically until the potential rises above e.
    let mut lo = q_eq;
    let mut found = false;
    for _ in 0..200 {
        lo *= 0.95;
        if lo < 1e-6 {
            break;
        }
        if v0(params, lo) > e {
            found = true;
            break;
        }
    }
    if !found {
        return Err(Error::ExistenceBound { energy: e });
    }
    let inner = turning_point(params, e, lo, q_eq);
    let mut hi = q_eq;
    found = false;
    let mut prev = v0(params, q_eq);
    for _ in 0..2000 {
        hi *= 1.01;
        let v = v0(params, hi);
        if v > e {
            found = true;
            break;
        }
        if v < prev && v < e && hi > 1.05 * q_eq {
            // Past the ridge of the well without reaching e.
            break;
        }
        prev = v;
    }
    if !found {
        return Err(Error::ExistenceBound { energy: e });
    }
    let outer = turning_point(params, e, q_eq, hi);
    Ok((inner, outer))
}

/// The bottleneck periodic orbit at energy `e`.
pub fn orbit_at_energy(params: &ModelParams, eq: &Equilibrium, e: f64) -> Result<PeriodicOrbit> {
    if eq.kind != EquilibriumKind::SaddleCenter {
        return Err(Error::InvalidParameter("periodic orbits need a saddle×center equilibrium"));
    }
    if !(e > eq.energy) {
        return Err(Error::NoOrbit { energy: e, e_eq: eq.energy });
    }
    let (inner, outer) = turning_points(params, eq, e)?;
    let seed = PhaseState::new(0.0, 0.0, inner, 0.0);
    let opts = FlowOptions::default();
    let guess = eq.linear_period().unwrap_or(1.0);
    let mut span = 1.5 * guess;
    let (samples, period) = loop {
        let run = integrate_until(params, &seed, 0.0, span, &opts, |_| false)?;
        if let Some(err) = run.stopped {
            return Err(err);
        }
        let ev = find_section_crossings(&run.trajectory, Section::P2, params)?;
        if ev.len() >= 2 {
            let tp = ev[1].time;
            let cut = run.trajectory.times.iter().position(|t| *t >= tp).unwrap_or(run.trajectory.len());
            let mut tr = run.trajectory;
            tr.times.truncate(cut);
            tr.states.truncate(cut);
            tr.times.push(tp);
            tr.states.push(ev[1].state);
            break (tr, tp);
        }
        span *= 2.0;
        if span > 1e3 * guess {
            return Err(Error::ExistenceBound { energy: e });
        }
    };
    let (end, monodromy) = flow_with_stm(params, &seed, period, &opts)?;
    let closure = sqrt(
        end.to_array().iter().zip(seed.to_array()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
    );
    // Mean block of the monodromy.
    let (m00, m01, m10, m11) = (monodromy[(0, 0)], monodromy[(0, 1)], monodromy[(1, 0)], monodromy[(1, 1)]);
    let tr = m00 + m11;
    let det = m00 * m11 - m01 * m10;
    let disc = tr * tr / 4.0 - det;
    if disc <= 0.0 || fabs(tr) <= 2.0 {
        return Err(Error::HyperbolicityLost { energy: e });
    }
    let root = sqrt(disc);
    let (l1, l2) = (tr / 2.0 + root, tr / 2.0 - root);
    let (lu, ls) = if fabs(l1) > fabs(l2) { (l1, l2) } else { (l2, l1) };
    if fabs(lu) <= 1.0 + 1e-9 {
        return Err(Error::HyperbolicityLost { energy: e });
    }
    let dir = |lam: f64| {
        // (M - λI) v = 0 in the mean block.
        let v = if fabs(m01) > fabs(m10) {
            Vector4::new(m01, lam - m00, 0.0, 0.0)
        } else {
            Vector4::new(lam - m11, m10, 0.0, 0.0)
        };
        let v = v / v.norm();
        if v[0] < 0.0 {
            -v
        } else {
            v
        }
    };
    Ok(PeriodicOrbit {
        energy: e,
        seed,
        q2_outer: outer,
        period,
        samples,
        monodromy,
        lambda_u: lu,
        unstable_dir: dir(lu),
        stable_dir: dir(ls),
        closure,
    })
}

/// Energy just below the top of the variance well (second equilibrium
/// on the plane), where the outer turning point ceases to exist.
pub fn well_top_energy(params: &ModelParams, eq: &Equilibrium) -> Option<f64> {
    let eqs = crate::spectral::find_equilibria(params, (eq.state.q2 * 1.0001, eq.state.q2 * 100.0)).ok()?;
    eqs.first().map(|e| e.energy)
}

/// Scans the orbit family upward from `E_eq + de` with step `de`, refining
/// the first failure by bisection, and returns the highest energy at which
/// a hyperbolic orbit was found.
pub fn existence_bound(params: &ModelParams, eq: &Equilibrium, de: f64, e_max: f64) -> Result<f64> {
    let mut good = eq.energy + de;
    orbit_at_energy(params, eq, good)?;
    let mut bad = None;
    let mut e = good;
    while e < e_max {
        e += de;
        if orbit_at_energy(params, eq, e).is_ok() {
            good = e;
        } else {
            bad = Some(e);
            break;
        }
    }
    let Some(mut hi) = bad else { return Ok(good) };
    for _ in 0..30 {
        let mid = 0.5 * (good + hi);
        if orbit_at_energy(params, eq, mid).is_ok() {
            good = mid;
        } else {
            hi = mid;
        }
        if hi - good < 1e-9 * (1.0 + fabs(good)) {
            break;
        }
    }
    Ok(good)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TubeBranch {
    Stable,
    Unstable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TubeStrand {
    /// Orbit phase `τ_k` of the launch point.
    pub phase: f64,
    pub trajectory: Trajectory,
    /// The strand stopped before `t_int` (collapse, underflow or exit).
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TubeManifold {
    pub branch: TubeBranch,
    pub side: f64,
    pub displacement: f64,
    pub energy: f64,
    pub strands: Vec<TubeStrand>,
}

/// Optional stopping plane for tube strands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeOptions {
    /// Stop a strand once `|q1|` exceeds this value.
    pub q1_stop: Option<f64>,
    pub flow: FlowOptions,
}

impl Default for TubeOptions {
    fn default() -> Self {
        Self { q1_stop: None, flow: FlowOptions::default() }
    }
}

/// Globalises the stable or unstable manifold of `po` by launching
/// `n_strands` displaced points along the orbit.
pub fn tube(
    params: &ModelParams,
    po: &PeriodicOrbit,
    branch: TubeBranch,
    side: f64,
    d: f64,
    n_strands: usize,
    t_int: f64,
    opts: &TubeOptions,
) -> Result<TubeManifold> {
    if n_strands < 8 {
        return Err(Error::InvalidParameter("a tube needs at least 8 strands"));
    }
    if !(d > 0.0) || !(t_int > 0.0) {
        return Err(Error::InvalidParameter("displacement and integration time must be positive"));
    }
    let v0 = match branch {
        TubeBranch::Stable => po.stable_dir,
        TubeBranch::Unstable => po.unstable_dir,
    };
    let sgn = if side < 0.0 { -1.0 } else { 1.0 };
    let mut strands = Vec::with_capacity(n_strands);
    for k in 0..n_strands {
        let tau = po.period * k as f64 / n_strands as f64;
        let (x, phi) = flow_with_stm(params, &po.seed, tau, &opts.flow)?;
        let mut v = phi * v0;
        v /= v.norm();
        let y = Vector4::from(x.to_array()) + v * (sgn * d);
        let start = PhaseState::new(y[0], y[1], y[2], y[3]);
        let t_end = match branch {
            TubeBranch::Stable => -t_int,
            TubeBranch::Unstable => t_int,
        };
        let stop = opts.q1_stop;
        let run = integrate_until(params, &start, 0.0, t_end, &opts.flow, |s| {
            stop.is_some_and(|q| fabs(s.q1) >= q)
        })?;
        strands.push(TubeStrand {
            phase: tau,
            truncated: run.stopped.is_some() || run.triggered,
            trajectory: run.trajectory,
        });
    }
    Ok(TubeManifold { branch, side: sgn, displacement: d, energy: po.energy, strands })
}

/// Default displacement `1e-5` times the variance amplitude of the orbit.
pub fn default_displacement(po: &PeriodicOrbit) -> f64 {
    1e-5 * po.amplitude().max(1e-12)
}

/// First crossing of each strand with the plane `q1 = level`, in strand
/// order; strands that never reach the plane are skipped.
pub fn tube_section(params: &ModelParams, tube: &TubeManifold, level: f64) -> Result<Vec<PhaseState>> {
    let mut out = Vec::new();
    for s in &tube.strands {
        let ev = find_section_crossings(&s.trajectory, Section::Q1(level), params)?;
        // Stable strands are stored with increasing time, so the crossing
        // nearest the orbit is the last one.
        let pick = match tube.branch {
            TubeBranch::Stable => ev.last(),
            TubeBranch::Unstable => ev.first(),
        };
        if let Some(e) = pick {
            out.push(e.state);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TransitOutcome {
    Transited,
    Bounced,
    Undecided,
}

/// Integrates until `|q1| ≥ q1_exit` while moving outward, or `t_max`.
pub fn transit_test_nonlinear(
    params: &ModelParams,
    state: &PhaseState,
    q1_exit: f64,
    t_max: f64,
) -> Result<TransitOutcome> {
    let f0 = field(params, &state.to_array());
    let entry = if state.q1 != 0.0 { state.q1.signum() } else { -f0[0].signum() };
    let run = integrate_until(params, state, 0.0, t_max, &FlowOptions::default(), |s| {
        let q1dot = -s.p1 / params.mu;
        fabs(s.q1) >= q1_exit && s.q1 * q1dot > 0.0
    })?;
    if !run.triggered {
        if let Some(err) = run.stopped {
            return Err(err);
        }
        return Ok(TransitOutcome::Undecided);
    }
    let last = run.trajectory.last().expect("non-empty trajectory");
    Ok(if last.q1.signum() == entry { TransitOutcome::Bounced } else { TransitOutcome::Transited })
}

/// Nonlinear check of the linear transit picture: integrates from `state`
/// until the eigencoordinate `ζ + η` leaves `[-C, C]`, and compares the
/// exit face with the entry face.
pub fn transit_through_region(
    params: &ModelParams,
    eq: &Equilibrium,
    basis: &EigenBasis,
    region: &RegionSpec,
    state: &PhaseState,
    t_max: f64,
) -> Result<TransitOutcome> {
    let y0 = to_eigen_coords(basis, eq, state);
    let entry = (y0.zeta + y0.eta).signum();
    let c = region.c;
    let mut inside_seen = false;
    let run = integrate_until(params, state, 0.0, t_max, &FlowOptions::default(), |s| {
        let y = to_eigen_coords(basis, eq, s);
        let w = y.zeta + y.eta;
        if fabs(w) < c {
            inside_seen = true;
            false
        } else {
            inside_seen
        }
    })?;
    if !run.triggered {
        if let Some(err) = run.stopped {
            return Err(err);
        }
        return Ok(TransitOutcome::Undecided);
    }
    let last = run.trajectory.last().expect("non-empty trajectory");
    let y = to_eigen_coords(basis, eq, last);
    Ok(if (y.zeta + y.eta).signum() == entry { TransitOutcome::Bounced } else { TransitOutcome::Transited })
}

/// Energy of a state, for checking strands against the shell.
pub fn shell_error(params: &ModelParams, e: f64, s: &PhaseState) -> f64 {
    fabs(energy_unchecked(params, s) - e) / fabs(e).max(1.0)
}

/// Convenience: the state half a period after the seed.
pub fn outer_state(params: &ModelParams, po: &PeriodicOrbit) -> Result<PhaseState> {
    flow(params, &po.seed, 0.5 * po.period, &FlowOptions::default())
}
