//! Explicit Dormand–Prince 8(5,3) stepper with a 7th-order dense output.
//!
//! The stepper is generic over the state dimension so the same code drives
//! the 4D Hamiltonian flow and the 20D flow-plus-variational system.

use libm::{fabs, pow, sqrt};

use crate::dop853_tableau::{A, B, C, D, E3, E5, STAGES};
use crate::error::{Error, Result};

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const ERROR_EXPONENT: f64 = -1.0 / 8.0;

/// Right-hand side of an autonomous-or-not ODE `y' = f(t, y)`.
pub trait OdeSystem<const N: usize> {
    fn rhs(&self, t: f64, y: &[f64; N]) -> [f64; N];

    /// `false` once the state leaves the admissible domain; the stepper
    /// then stops with [`Error::Singularity`].
    fn admissible(&self, _y: &[f64; N]) -> bool {
        true
    }
}

/// Step-size policy.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum StepControl {
    /// Error-controlled steps with `atol + rtol·|y|` weights.
    Adaptive { rtol: f64, atol: f64, max_step: f64 },
    /// Fixed step (last step clipped to the end point).
    Fixed { h: f64 },
}

impl StepControl {
    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        StepControl::Adaptive { rtol, atol, max_step: f64::INFINITY }
    }
}

/// Polynomial interpolant over one accepted step.
#[derive(Debug, Clone, Copy)]
pub struct DenseSegment<const N: usize> {
    pub t_old: f64,
    pub h: f64,
    y_old: [f64; N],
    coeffs: [[f64; N]; 7],
}

impl<const N: usize> DenseSegment<N> {
    pub fn t_new(&self) -> f64 {
        self.t_old + self.h
    }

    pub fn eval(&self, t: f64) -> [f64; N] {
        let x = (t - self.t_old) / self.h;
        let mut y = [0.0; N];
        for (i, f) in self.coeffs.iter().rev().enumerate() {
            let w = if i % 2 == 0 { x } else { 1.0 - x };
            for j in 0..N {
                y[j] = (y[j] + f[j]) * w;
            }
        }
        for j in 0..N {
            y[j] += self.y_old[j];
        }
        y
    }
}

/// A single-direction DOP853 integrator.
pub struct Dop853<'a, S, const N: usize> {
    sys: &'a S,
    control: StepControl,
    direction: f64,
    pub t: f64,
    pub y: [f64; N],
    f: [f64; N],
    h_abs: f64,
    t_old: f64,
    y_old: [f64; N],
    h_prev: f64,
    k: [[f64; N]; 16],
    pub nfev: usize,
}

fn rms_norm<const N: usize>(v: &[f64; N], scale: &[f64; N]) -> f64 {
    let s: f64 = v.iter().zip(scale).map(|(a, b)| (a / b) * (a / b)).sum();
    sqrt(s / N as f64)
}

impl<'a, S: OdeSystem<N>, const N: usize> Dop853<'a, S, N> {
    /// `t_end` fixes the direction and caps the first step.
    pub fn new(sys: &'a S, t0: f64, y0: [f64; N], t_end: f64, control: StepControl) -> Self {
        let direction = if t_end >= t0 { 1.0 } else { -1.0 };
        let f = sys.rhs(t0, &y0);
        let mut s = Self {
            sys,
            control,
            direction,
            t: t0,
            y: y0,
            f,
            h_abs: 0.0,
            t_old: t0,
            y_old: y0,
            h_prev: 0.0,
            k: [[0.0; N]; 16],
            nfev: 1,
        };
        s.h_abs = match control {
            StepControl::Fixed { h } => fabs(h),
            StepControl::Adaptive { rtol, atol, max_step } => {
                s.initial_step(rtol, atol).min(max_step).min(fabs(t_end - t0).max(1e-300))
            }
        };
        s
    }

    fn initial_step(&mut self, rtol: f64, atol: f64) -> f64 {
        let mut scale = [0.0; N];
        for j in 0..N {
            scale[j] = atol + fabs(self.y[j]) * rtol;
        }
        let d0 = rms_norm(&self.y, &scale);
        let d1 = rms_norm(&self.f, &scale);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let mut y1 = [0.0; N];
        for j in 0..N {
            y1[j] = self.y[j] + h0 * self.direction * self.f[j];
        }
        let f1 = self.sys.rhs(self.t + h0 * self.direction, &y1);
        self.nfev += 1;
        let mut df = [0.0; N];
        for j in 0..N {
            df[j] = f1[j] - self.f[j];
        }
        let d2 = rms_norm(&df, &scale) / h0;
        let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
            (1e-6f64).max(h0 * 1e-3)
        } else {
            pow(0.01 / d1.max(d2), 1.0 / 8.0)
        };
        let h = (100.0 * h0).min(h1);
        if h.is_finite() && h > 0.0 {
            h
        } else {
            1e-6
        }
    }

    /// Runs the 12 stages for a trial step `h` (signed); returns `y_new`.
    fn trial(&mut self, h: f64) -> [f64; N] {
        self.k[0] = self.f;
        for s in 1..STAGES {
            let mut ys = self.y;
            for (m, a) in A[s][..s].iter().enumerate() {
                if *a != 0.0 {
                    for j in 0..N {
                        ys[j] += h * a * self.k[m][j];
                    }
                }
            }
            self.k[s] = self.sys.rhs(self.t + C[s] * h, &ys);
        }
        self.nfev += STAGES - 1;
        let mut y_new = self.y;
        for (m, b) in B.iter().enumerate() {
            if *b != 0.0 {
                for j in 0..N {
                    y_new[j] += h * b * self.k[m][j];
                }
            }
        }
        y_new
    }

    fn error_norm(&self, h: f64, y_new: &[f64; N], rtol: f64, atol: f64) -> f64 {
        let mut e5n = 0.0;
        let mut e3n = 0.0;
        for j in 0..N {
            let scale = atol + fabs(self.y[j]).max(fabs(y_new[j])) * rtol;
            let mut e5 = 0.0;
            let mut e3 = 0.0;
            for m in 0..=STAGES {
                e5 += self.k[m][j] * E5[m];
                e3 += self.k[m][j] * E3[m];
            }
            e5n += (e5 / scale) * (e5 / scale);
            e3n += (e3 / scale) * (e3 / scale);
        }
        if e5n == 0.0 && e3n == 0.0 {
            return 0.0;
        }
        let denom = e5n + 0.01 * e3n;
        fabs(h) * e5n / sqrt(denom * N as f64)
    }

    /// Advances one accepted step without passing `t_bound`.
    pub fn step(&mut self, t_bound: f64) -> Result<()> {
        let min_step = 10.0 * fabs(next_after(self.t) - self.t);
        let mut h_abs = self.h_abs;
        let mut rejected = false;
        loop {
            if let StepControl::Adaptive { max_step, .. } = self.control {
                h_abs = h_abs.min(max_step);
            }
            if h_abs < min_step {
                return Err(Error::StepUnderflow { time: self.t });
            }
            let mut h = h_abs * self.direction;
            let mut t_new = self.t + h;
            if self.direction * (t_new - t_bound) > 0.0 {
                t_new = t_bound;
            }
            h = t_new - self.t;
            let step_len = fabs(h);
            let y_new = self.trial(h);
            let finite = y_new.iter().all(|v| v.is_finite());
            let accept = match self.control {
                StepControl::Fixed { .. } => {
                    if !finite {
                        return Err(Error::Singularity { time: self.t });
                    }
                    true
                }
                StepControl::Adaptive { rtol, atol, .. } => {
                    // The last stage slot holds f(t_new, y_new) for the estimator.
                    let f_new = if finite { self.sys.rhs(t_new, &y_new) } else { [f64::NAN; N] };
                    self.k[STAGES] = f_new;
                    let en = if finite && f_new.iter().all(|v| v.is_finite()) {
                        self.error_norm(h, &y_new, rtol, atol)
                    } else {
                        f64::INFINITY
                    };
                    if en < 1.0 {
                        let mut factor =
                            if en == 0.0 { MAX_FACTOR } else { (SAFETY * pow(en, ERROR_EXPONENT)).min(MAX_FACTOR) };
                        if rejected {
                            factor = factor.min(1.0);
                        }
                        h_abs = step_len * factor;
                        true
                    } else {
                        let factor = if en.is_finite() {
                            (SAFETY * pow(en, ERROR_EXPONENT)).max(MIN_FACTOR)
                        } else {
                            MIN_FACTOR
                        };
                        h_abs = step_len * factor;
                        rejected = true;
                        false
                    }
                }
            };
            if !accept {
                continue;
            }
            if !self.sys.admissible(&y_new) {
                return Err(Error::Singularity { time: t_new });
            }
            let f_new = match self.control {
                StepControl::Fixed { .. } => {
                    self.nfev += 1;
                    let f = self.sys.rhs(t_new, &y_new);
                    self.k[STAGES] = f;
                    f
                }
                StepControl::Adaptive { .. } => {
                    self.nfev += 1;
                    self.k[STAGES]
                }
            };
            self.t_old = self.t;
            self.y_old = self.y;
            self.h_prev = h;
            self.t = t_new;
            self.y = y_new;
            self.f = f_new;
            if let StepControl::Adaptive { .. } = self.control {
                self.h_abs = h_abs;
            }
            return Ok(());
        }
    }

    /// Interpolant over the most recent accepted step.
    pub fn dense(&mut self) -> DenseSegment<N> {
        let h = self.h_prev;
        for s in (STAGES + 1)..16 {
            let mut ys = self.y_old;
            for m in 0..s {
                let a = A[s][m];
                if a != 0.0 {
                    for j in 0..N {
                        ys[j] += h * a * self.k[m][j];
                    }
                }
            }
            self.k[s] = self.sys.rhs(self.t_old + C[s] * h, &ys);
        }
        self.nfev += 3;
        let mut coeffs = [[0.0; N]; 7];
        let f_old = self.k[0];
        for j in 0..N {
            let dy = self.y[j] - self.y_old[j];
            coeffs[0][j] = dy;
            coeffs[1][j] = h * f_old[j] - dy;
            coeffs[2][j] = 2.0 * dy - h * (self.f[j] + f_old[j]);
        }
        for (r, drow) in D.iter().enumerate() {
            for j in 0..N {
                let mut acc = 0.0;
                for (m, d) in drow.iter().enumerate() {
                    acc += d * self.k[m][j];
                }
                coeffs[3 + r][j] = h * acc;
            }
        }
        DenseSegment { t_old: self.t_old, h, y_old: self.y_old, coeffs }
    }

    pub fn derivative(&self) -> [f64; N] {
        self.f
    }

    /// Integrates straight to `t_end` and returns the final state.
    pub fn run_to(&mut self, t_end: f64) -> Result<[f64; N]> {
        while self.direction * (t_end - self.t) > 0.0 {
            self.step(t_end)?;
        }
        Ok(self.y)
    }
}

fn next_after(t: f64) -> f64 {
    if t == 0.0 {
        f64::MIN_POSITIVE
    } else {
        let bits = t.to_bits();
        let nb = if t > 0.0 { bits + 1 } else { bits - 1 };
        f64::from_bits(nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oscillator;
    impl OdeSystem<2> for Oscillator {
        fn rhs(&self, _t: f64, y: &[f64; 2]) -> [f64; 2] {
            [y[1], -y[0]]
        }
    }

    #[test]
    fn harmonic_oscillator_to_tight_tolerance() {
        let mut s = Dop853::new(&Oscillator, 0.0, [1.0, 0.0], 10.0, StepControl::adaptive(1e-12, 1e-12));
        let y = s.run_to(10.0).unwrap();
        assert!((y[0] - libm::cos(10.0)).abs() < 1e-10);
        assert!((y[1] + libm::sin(10.0)).abs() < 1e-10);
    }

    #[test]
    fn backward_integration() {
        let mut s = Dop853::new(&Oscillator, 0.0, [1.0, 0.0], -3.0, StepControl::adaptive(1e-12, 1e-12));
        let y = s.run_to(-3.0).unwrap();
        assert!((y[0] - libm::cos(3.0)).abs() < 1e-10);
        assert!((y[1] - libm::sin(3.0)).abs() < 1e-10);
    }

    #[test]
    fn dense_output_matches_solution() {
        let mut s = Dop853::new(&Oscillator, 0.0, [1.0, 0.0], 5.0, StepControl::adaptive(1e-10, 1e-10));
        s.step(5.0).unwrap();
        let seg = s.dense();
        for i in 0..=10 {
            let t = seg.t_old + seg.h * i as f64 / 10.0;
            let y = seg.eval(t);
            assert!((y[0] - libm::cos(t)).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn fixed_step_is_eighth_order() {
        let err = |h: f64| {
            let mut s = Dop853::new(&Oscillator, 0.0, [1.0, 0.0], 4.0, StepControl::Fixed { h });
            let y = s.run_to(4.0).unwrap();
            (y[0] - libm::cos(4.0)).abs()
        };
        let (e1, e2) = (err(0.4), err(0.2));
        assert!(e1 / e2 > 100.0, "{e1} {e2}");
    }
}
