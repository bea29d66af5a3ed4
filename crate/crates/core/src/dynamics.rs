//! Flow of the Hamiltonian system, its variational equations, and
//! Poincaré-section events.

use alloc::vec::Vec;

use libm::fabs;
use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::model::{energy_unchecked, field, jacobian, ModelParams, PhaseState};
use crate::ode::{DenseSegment, Dop853, OdeSystem, StepControl};

/// Integration stops once `q2` drops below this value.
pub const Q2_GUARD: f64 = 1e-6;

/// Tolerances and sampling for the flow integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    /// Use fixed steps of this size instead of error control.
    pub fixed_step: Option<f64>,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { rtol: 1e-12, atol: 1e-12, max_step: f64::INFINITY, fixed_step: None }
    }
}

impl FlowOptions {
    pub fn tolerances(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }

    fn control(&self) -> StepControl {
        match self.fixed_step {
            Some(h) => StepControl::Fixed { h },
            None => StepControl::Adaptive { rtol: self.rtol, atol: self.atol, max_step: self.max_step },
        }
    }
}

/// Sampled solution of the flow, stored with increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhaseState>,
    pub energy0: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first(&self) -> Option<&PhaseState> {
        self.states.first()
    }

    pub fn last(&self) -> Option<&PhaseState> {
        self.states.last()
    }

    /// Largest `|E(t) − E(t0)| / max(1, |E(t0)|)` over the samples.
    pub fn energy_drift(&self, params: &ModelParams) -> f64 {
        let scale = fabs(self.energy0).max(1.0);
        self.states
            .iter()
            .map(|s| fabs(energy_unchecked(params, s) - self.energy0) / scale)
            .fold(0.0, f64::max)
    }

    /// Rows `(t, q1, p1, q2, p2, E)` for tabular export.
    pub fn rows(&self, params: &ModelParams) -> Vec<[f64; 6]> {
        self.times
            .iter()
            .zip(&self.states)
            .map(|(t, s)| [*t, s.q1, s.p1, s.q2, s.p2, energy_unchecked(params, s)])
            .collect()
    }

    fn reverse(&mut self) {
        self.times.reverse();
        self.states.reverse();
    }
}

/// Trajectory together with the state-transition matrices `Φ(t_k, t_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StmTrajectory {
    pub trajectory: Trajectory,
    pub stms: Vec<Matrix4<f64>>,
}

impl StmTrajectory {
    pub fn final_stm(&self) -> Matrix4<f64> {
        *self.stms.last().expect("trajectory has at least one sample")
    }
}

pub(crate) struct Hamiltonian<'a> {
    pub params: &'a ModelParams,
}

impl OdeSystem<4> for Hamiltonian<'_> {
    #[inline]
    fn rhs(&self, _t: f64, y: &[f64; 4]) -> [f64; 4] {
        field(self.params, y)
    }

    fn admissible(&self, y: &[f64; 4]) -> bool {
        y[2] >= Q2_GUARD
    }
}

struct Variational<'a> {
    params: &'a ModelParams,
}

impl OdeSystem<20> for Variational<'_> {
    fn rhs(&self, _t: f64, y: &[f64; 20]) -> [f64; 20] {
        let x = [y[0], y[1], y[2], y[3]];
        let f = field(self.params, &x);
        let j = jacobian(self.params, &x);
        let mut out = [0.0; 20];
        out[..4].copy_from_slice(&f);
        // Φ stored row-major in y[4..20].
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += j[(r, k)] * y[4 + 4 * k + c];
                }
                out[4 + 4 * r + c] = acc;
            }
        }
        out
    }

    fn admissible(&self, y: &[f64; 20]) -> bool {
        y[2] >= Q2_GUARD
    }
}

fn stm_from(y: &[f64; 20]) -> Matrix4<f64> {
    Matrix4::from_row_slice(&y[4..20])
}

fn validate_start(params: &ModelParams, state0: &PhaseState) -> Result<()> {
    params.validate()?;
    state0.check()?;
    if state0.q2 < Q2_GUARD {
        return Err(Error::VarianceCollapse { q2: state0.q2 });
    }
    Ok(())
}

/// Outcome of an integration that may stop early.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRun {
    pub trajectory: Trajectory,
    /// Set when the integrator stopped on an error before the end time.
    pub stopped: Option<Error>,
    /// Set when the user predicate ended the run.
    pub triggered: bool,
}

/// Integrates from `t0` towards `t1` (either direction), recording every
/// accepted step, until `t1`, an integration failure, or `stop(state)`
/// returning `true`. Samples are returned with increasing times.
pub fn integrate_until<F>(
    params: &ModelParams,
    state0: &PhaseState,
    t0: f64,
    t1: f64,
    opts: &FlowOptions,
    mut stop: F,
) -> Result<FlowRun>
where
    F: FnMut(&PhaseState) -> bool,
{
    validate_start(params, state0)?;
    let sys = Hamiltonian { params };
    let mut ode = Dop853::new(&sys, t0, state0.to_array(), t1, opts.control());
    let mut traj = Trajectory { times: alloc::vec![t0], states: alloc::vec![*state0], energy0: energy_unchecked(params, state0) };
    let backward = t1 < t0;
    let mut stopped = None;
    let mut triggered = false;
    while (t1 - ode.t) * if backward { -1.0 } else { 1.0 } > 0.0 {
        if let Err(e) = ode.step(t1) {
            stopped = Some(e);
            break;
        }
        let s = PhaseState::from_array(ode.y);
        traj.times.push(ode.t);
        traj.states.push(s);
        if stop(&s) {
            triggered = true;
            break;
        }
    }
    if backward {
        traj.reverse();
    }
    Ok(FlowRun { trajectory: traj, stopped, triggered })
}

/// Integrates over `t_span`, returning every accepted step. Fails if `q2`
/// collapses or the step size underflows.
pub fn integrate(
    params: &ModelParams,
    state0: &PhaseState,
    t_span: (f64, f64),
    rtol: f64,
    atol: f64,
) -> Result<Trajectory> {
    integrate_with(params, state0, t_span, &FlowOptions::tolerances(rtol, atol))
}

pub fn integrate_with(
    params: &ModelParams,
    state0: &PhaseState,
    t_span: (f64, f64),
    opts: &FlowOptions,
) -> Result<Trajectory> {
    if t_span.1 <= t_span.0 {
        return Err(Error::InvalidParameter("t_span must be increasing"));
    }
    let run = integrate_until(params, state0, t_span.0, t_span.1, opts, |_| false)?;
    match run.stopped {
        Some(e) => Err(e),
        None => Ok(run.trajectory),
    }
}

/// Integrates and additionally samples the dense output at `sample_times`
/// (which must lie inside `t_span`, increasing).
pub fn integrate_sampled(
    params: &ModelParams,
    state0: &PhaseState,
    t_span: (f64, f64),
    sample_times: &[f64],
    opts: &FlowOptions,
) -> Result<Trajectory> {
    validate_start(params, state0)?;
    let sys = Hamiltonian { params };
    let (t0, t1) = t_span;
    let mut ode = Dop853::new(&sys, t0, state0.to_array(), t1, opts.control());
    let mut out = Trajectory { times: Vec::new(), states: Vec::new(), energy0: energy_unchecked(params, state0) };
    let mut k = 0;
    while k < sample_times.len() && sample_times[k] <= t0 {
        out.times.push(sample_times[k]);
        out.states.push(*state0);
        k += 1;
    }
    while ode.t < t1 && k < sample_times.len() {
        ode.step(t1)?;
        let seg: DenseSegment<4> = ode.dense();
        while k < sample_times.len() && sample_times[k] <= ode.t {
            out.times.push(sample_times[k]);
            out.states.push(PhaseState::from_array(seg.eval(sample_times[k])));
            k += 1;
        }
    }
    Ok(out)
}

/// Flow map `φ_t(x)` for any sign of `t`.
pub fn flow(params: &ModelParams, state0: &PhaseState, t: f64, opts: &FlowOptions) -> Result<PhaseState> {
    validate_start(params, state0)?;
    if t == 0.0 {
        return Ok(*state0);
    }
    let sys = Hamiltonian { params };
    let mut ode = Dop853::new(&sys, 0.0, state0.to_array(), t, opts.control());
    Ok(PhaseState::from_array(ode.run_to(t)?))
}

/// Integrates the flow together with its state-transition matrix.
pub fn integrate_with_stm(
    params: &ModelParams,
    state0: &PhaseState,
    t_span: (f64, f64),
    rtol: f64,
    atol: f64,
) -> Result<StmTrajectory> {
    validate_start(params, state0)?;
    let (t0, t1) = t_span;
    if t1 < t0 {
        return Err(Error::InvalidParameter("t_span must be non-decreasing"));
    }
    let mut y0 = [0.0; 20];
    y0[..4].copy_from_slice(&state0.to_array());
    for i in 0..4 {
        y0[4 + 5 * i] = 1.0;
    }
    let e0 = energy_unchecked(params, state0);
    let mut out = StmTrajectory {
        trajectory: Trajectory { times: alloc::vec![t0], states: alloc::vec![*state0], energy0: e0 },
        stms: alloc::vec![Matrix4::identity()],
    };
    if t1 == t0 {
        return Ok(out);
    }
    let sys = Variational { params };
    let mut ode = Dop853::new(&sys, t0, y0, t1, StepControl::adaptive(rtol, atol));
    while ode.t < t1 {
        ode.step(t1)?;
        out.trajectory.times.push(ode.t);
        out.trajectory.states.push(PhaseState::new(ode.y[0], ode.y[1], ode.y[2], ode.y[3]));
        out.stms.push(stm_from(&ode.y));
    }
    Ok(out)
}

/// Final state and `Φ(t, 0)` of the variational flow, for either sign of `t`.
pub fn flow_with_stm(
    params: &ModelParams,
    state0: &PhaseState,
    t: f64,
    opts: &FlowOptions,
) -> Result<(PhaseState, Matrix4<f64>)> {
    validate_start(params, state0)?;
    let mut y0 = [0.0; 20];
    y0[..4].copy_from_slice(&state0.to_array());
    for i in 0..4 {
        y0[4 + 5 * i] = 1.0;
    }
    if t == 0.0 {
        return Ok((*state0, Matrix4::identity()));
    }
    let sys = Variational { params };
    let mut ode = Dop853::new(&sys, 0.0, y0, t, opts.control());
    let y = ode.run_to(t)?;
    Ok((PhaseState::new(y[0], y[1], y[2], y[3]), stm_from(&y)))
}

/// Coordinate hyperplane used as a Poincaré section.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Section {
    /// `p2 = 0`, the turning points of the variance oscillation.
    P2,
    /// `q1 = level`.
    Q1(f64),
}

impl Section {
    pub fn value(&self, s: &PhaseState) -> f64 {
        match *self {
            Section::P2 => s.p2,
            Section::Q1(level) => s.q1 - level,
        }
    }

    fn rate(&self, params: &ModelParams, s: &PhaseState) -> f64 {
        let f = field(params, &s.to_array());
        match self {
            Section::P2 => f[3],
            Section::Q1(_) => f[0],
        }
    }
}

/// A refined crossing of a section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectionEvent {
    pub time: f64,
    pub state: PhaseState,
    pub section: Section,
    /// Sign of the section coordinate's time derivative at the crossing.
    pub direction: i8,
    /// The crossing is (nearly) tangential, so neighbouring crossings may
    /// coalesce.
    pub tangential: bool,
}

const EVENT_TOL: f64 = 1e-10;

/// All sign changes of the section coordinate between consecutive samples,
/// each polished on the flow until the coordinate is below `1e-10`.
pub fn find_section_crossings(
    traj: &Trajectory,
    section: Section,
    params: &ModelParams,
) -> Result<Vec<SectionEvent>> {
    let mut events = Vec::new();
    let n = traj.len();
    if n < 2 {
        return Ok(events);
    }
    let vals: Vec<f64> = traj.states.iter().map(|s| section.value(s)).collect();
    let mut k = 0;
    while k + 1 < n {
        let (a, b) = (vals[k], vals[k + 1]);
        if a == 0.0 && k == 0 {
            k += 1;
            continue;
        }
        if a * b < 0.0 {
            events.push(refine(traj, k, section, params)?);
        } else if b == 0.0 && k + 2 < n {
            // Sample sits exactly on the section: count it when the sign flips across it.
            let c = vals[k + 2];
            if a * c < 0.0 {
                let s = traj.states[k + 1];
                let rate = section.rate(params, &s);
                events.push(SectionEvent {
                    time: traj.times[k + 1],
                    state: s,
                    section,
                    direction: if rate >= 0.0 { 1 } else { -1 },
                    tangential: is_tangential(params, section, &s, rate),
                });
                k += 2;
                continue;
            }
        }
        k += 1;
    }
    Ok(events)
}

fn is_tangential(params: &ModelParams, section: Section, s: &PhaseState, rate: f64) -> bool {
    let f = field(params, &s.to_array());
    let scale = f.iter().map(|v| fabs(*v)).fold(0.0, f64::max).max(1e-300);
    let _ = section;
    fabs(rate) < 1e-8 * scale
}

fn refine(traj: &Trajectory, k: usize, section: Section, params: &ModelParams) -> Result<SectionEvent> {
    let (t0, t1) = (traj.times[k], traj.times[k + 1]);
    let (s0, s1) = (traj.states[k], traj.states[k + 1]);
    let h = t1 - t0;
    let (v0, v1) = (section.value(&s0), section.value(&s1));
    let (d0, d1) = (section.rate(params, &s0) * h, section.rate(params, &s1) * h);
    // Root of the cubic Hermite interpolant of the section coordinate.
    let herm = |x: f64| {
        let x2 = x * x;
        let x3 = x2 * x;
        (2.0 * x3 - 3.0 * x2 + 1.0) * v0 + (x3 - 2.0 * x2 + x) * d0 + (-2.0 * x3 + 3.0 * x2) * v1
            + (x3 - x2) * d1
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut flo = v0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let fm = herm(mid);
        if fm * flo > 0.0 {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    let opts = FlowOptions::tolerances(1e-13, 1e-14);
    let mut tau = 0.5 * (lo + hi) * h;
    // Bracket in elapsed time from the left sample, tightened as we go.
    let (mut a, mut b) = (0.0, h);
    let mut state = flow(params, &s0, tau, &opts)?;
    for _ in 0..40 {
        let v = section.value(&state);
        if fabs(v) < EVENT_TOL {
            let rate = section.rate(params, &state);
            return Ok(SectionEvent {
                time: t0 + tau,
                state,
                section,
                direction: if rate >= 0.0 { 1 } else { -1 },
                tangential: is_tangential(params, section, &state, rate),
            });
        }
        if v * v0 > 0.0 {
            a = tau;
        } else {
            b = tau;
        }
        let rate = section.rate(params, &state);
        let mut next = tau - v / rate;
        if !(next.is_finite() && next > a && next < b) {
            next = 0.5 * (a + b);
        }
        tau = next;
        state = flow(params, &s0, tau, &opts)?;
    }
    Err(Error::EventRefinement { time: t0 + tau })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc() -> ModelParams {
        ModelParams::saddle_center()
    }

    #[test]
    fn backward_samples_are_increasing() {
        let p = sc();
        let s = PhaseState::new(0.1, 0.0, 3.7, 0.0);
        let run = integrate_until(&p, &s, 0.0, -1.0, &FlowOptions::default(), |_| false).unwrap();
        let t = &run.trajectory.times;
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*t.last().unwrap(), 0.0);
        assert_eq!(*t.first().unwrap(), -1.0);
    }

    #[test]
    fn collapse_is_reported_with_time() {
        // Large outward mean puts the variance on a collapsing path for alpha = 1.
        let p = ModelParams::saddle_saddle();
        let s = PhaseState::new(0.0, 0.0, 0.5, 0.0);
        let r = integrate(&p, &s, (0.0, 10.0), 1e-10, 1e-10);
        assert!(matches!(r, Err(Error::Singularity { .. }) | Err(Error::StepUnderflow { .. })));
    }

    #[test]
    fn sampled_matches_flow() {
        let p = sc();
        let s = PhaseState::new(0.2, 0.1, 3.6, 0.05);
        let ts = [0.0, 0.13, 0.5, 0.77];
        let tr = integrate_sampled(&p, &s, (0.0, 0.77), &ts, &FlowOptions::default()).unwrap();
        assert_eq!(tr.len(), 4);
        for (t, st) in tr.times.iter().zip(&tr.states) {
            let f = flow(&p, &s, *t, &FlowOptions::default()).unwrap();
            for (a, b) in f.to_array().iter().zip(st.to_array()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn crossings_on_plane_orbit() {
        let p = sc();
        let s = PhaseState::new(0.0, 0.0, 3.7, 0.0);
        let tr = integrate(&p, &s, (0.0, 1.0), 1e-12, 1e-12).unwrap();
        let ev = find_section_crossings(&tr, Section::P2, &p).unwrap();
        assert!(ev.len() >= 3);
        for e in &ev {
            assert!(e.state.p2.abs() < 1e-10);
            assert!(!e.tangential);
        }
        assert!(ev.windows(2).all(|w| w[1].time > w[0].time && w[1].direction != w[0].direction));
    }
}
