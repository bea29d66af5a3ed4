//! The reduced-order Hamiltonian model: parameters, state types, the
//! potential, the energy, the vector field and its Jacobian, and the maps
//! between the Lagrangian moment variables and canonical coordinates.
//!
//! Energy is reported as `E = -H`, so `E = p1²/(2μ) + p2²/(2ε²μ) + V`.

use core::f64::consts::PI;

use libm::pow;
use nalgebra::Matrix4;

use crate::error::{Error, Result};

/// The six scalars that define the game.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelParams {
    pub sigma: f64,
    pub mu: f64,
    pub g: f64,
    pub h: f64,
    pub alpha: f64,
    pub epsilon: f64,
}

impl ModelParams {
    pub fn new(sigma: f64, mu: f64, g: f64, h: f64, alpha: f64, epsilon: f64) -> Result<Self> {
        let p = Self { sigma, mu, g, h, alpha, epsilon };
        p.validate()?;
        Ok(p)
    }

    /// Saddle×saddle parameter set (`α = 1`).
    pub fn saddle_saddle() -> Self {
        Self { sigma: 1.0, mu: 2.0, g: 4.0, h: 0.0, alpha: 1.0, epsilon: 0.05 }
    }

    /// Saddle×center parameter set (`α = 3`).
    pub fn saddle_center() -> Self {
        Self { sigma: 1.0, mu: 2.0, g: 4.0, h: 0.0, alpha: 3.0, epsilon: 0.05 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma, self.mu, self.g, self.h, self.alpha, self.epsilon];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("model parameters must be finite"));
        }
        if self.sigma <= 0.0 {
            return Err(Error::InvalidParameter("sigma must be positive"));
        }
        if self.mu <= 0.0 {
            return Err(Error::InvalidParameter("mu must be positive"));
        }
        if self.g <= 0.0 {
            return Err(Error::InvalidParameter("g must be positive"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::InvalidParameter("alpha must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidParameter("epsilon must lie in (0, 1)"));
        }
        if self.h < 0.0 {
            return Err(Error::InvalidParameter("h must be non-negative"));
        }
        Ok(())
    }

    /// `g / ((α+1)^{3/2} (2π)^{α/2})`, the prefactor of the interaction energy.
    pub fn interaction_coeff(&self) -> f64 {
        self.g / (pow(self.alpha + 1.0, 1.5) * pow(2.0 * PI, 0.5 * self.alpha))
    }

    /// `μσ⁴`, which appears in the kinetic energy of the variance.
    fn mu_sigma4(&self) -> f64 {
        let s2 = self.sigma * self.sigma;
        self.mu * s2 * s2
    }
}

/// A point `(q1, p1, q2, p2)` of the 4D phase space.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PhaseState {
    pub q1: f64,
    pub p1: f64,
    pub q2: f64,
    pub p2: f64,
}

impl PhaseState {
    pub const fn new(q1: f64, p1: f64, q2: f64, p2: f64) -> Self {
        Self { q1, p1, q2, p2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { q1: a[0], p1: a[1], q2: a[2], p2: a[3] }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.q1, self.p1, self.q2, self.p2]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Momentum reversal `(q, p) -> (q, -p)`.
    pub fn flip_momenta(self) -> Self {
        Self { p1: -self.p1, p2: -self.p2, ..self }
    }

    /// Mean parity `(q1, p1) -> (-q1, -p1)`.
    pub fn mirror(self) -> Self {
        Self { q1: -self.q1, p1: -self.p1, ..self }
    }

    pub fn check(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::InvalidParameter("phase state must be finite"));
        }
        if self.q2 <= 0.0 {
            return Err(Error::VarianceCollapse { q2: self.q2 });
        }
        Ok(())
    }
}

/// Moment variables `(X, S, P, Λ)`: mean, scaled standard deviation and the
/// two momentum-like variables of the Gaussian ansatz.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LagrangianState {
    pub x: f64,
    pub s: f64,
    pub p: f64,
    pub lambda: f64,
}

/// Kinetic, interaction and external-potential parts of the total energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub e_kin: f64,
    pub e_ipot: f64,
    pub e_epot: f64,
    pub e_tot: f64,
}

fn check_q2(q2: f64) -> Result<()> {
    if q2 > 0.0 && q2.is_finite() {
        Ok(())
    } else {
        Err(Error::VarianceCollapse { q2 })
    }
}

/// Potential energy `V(q1, q2)`.
pub fn potential_energy(params: &ModelParams, q1: f64, q2: f64) -> Result<f64> {
    check_q2(q2)?;
    Ok(potential_unchecked(params, q1, q2))
}

pub(crate) fn potential_unchecked(params: &ModelParams, q1: f64, q2: f64) -> f64 {
    let h = params.h;
    let z = params.epsilon * q2;
    let z2 = z * z;
    let q1sq = q1 * q1;
    -h * q1sq / 2.0 - q1sq * q1sq / 4.0 - 0.5 * z2 * (h + 3.0 * q1sq)
        - params.mu_sigma4() / (8.0 * z2)
        + params.interaction_coeff() / pow(z, params.alpha)
        - 0.75 * z2 * z2
}

/// `(∂V/∂q1, ∂V/∂q2)`.
pub(crate) fn potential_gradient(params: &ModelParams, q1: f64, q2: f64) -> (f64, f64) {
    let (h, eps) = (params.h, params.epsilon);
    let z = eps * q2;
    let z2 = z * z;
    let dq1 = -q1 * (h + q1 * q1 + 3.0 * z2);
    let dq2 = eps
        * (-z * (h + 3.0 * q1 * q1) + params.mu_sigma4() / (4.0 * z2 * z)
            - params.alpha * params.interaction_coeff() / pow(z, params.alpha + 1.0)
            - 3.0 * z2 * z);
    (dq1, dq2)
}

/// `∂V/∂q2` on the invariant plane `q1 = 0`; its roots are the equilibria.
pub fn potential_slope_q2(params: &ModelParams, q2: f64) -> f64 {
    potential_gradient(params, 0.0, q2).1
}

/// Energy `E = -H` of a phase state.
pub fn energy(params: &ModelParams, state: &PhaseState) -> Result<f64> {
    check_q2(state.q2)?;
    Ok(energy_unchecked(params, state))
}

pub(crate) fn energy_unchecked(params: &ModelParams, s: &PhaseState) -> f64 {
    let mu = params.mu;
    let e2 = params.epsilon * params.epsilon;
    s.p1 * s.p1 / (2.0 * mu) + s.p2 * s.p2 / (2.0 * e2 * mu) + potential_unchecked(params, s.q1, s.q2)
}

/// Hamilton's equations `(q̇1, ṗ1, q̇2, ṗ2)`.
pub fn vector_field(params: &ModelParams, state: &PhaseState) -> Result<[f64; 4]> {
    check_q2(state.q2)?;
    Ok(field(params, &state.to_array()))
}

/// Unchecked vector field on a raw array; used in the integrator hot loop.
#[inline]
pub(crate) fn field(params: &ModelParams, y: &[f64; 4]) -> [f64; 4] {
    let mu = params.mu;
    let e2 = params.epsilon * params.epsilon;
    let (dv1, dv2) = potential_gradient(params, y[0], y[2]);
    [-y[1] / mu, dv1, -y[3] / (e2 * mu), dv2]
}

/// Jacobian of the vector field at an arbitrary state (row-major in
/// `(q1, p1, q2, p2)`). At momentum-free points it has the block form of
/// the linearisation about an equilibrium.
pub fn state_jacobian(params: &ModelParams, state: &PhaseState) -> Result<Matrix4<f64>> {
    check_q2(state.q2)?;
    Ok(jacobian(params, &state.to_array()))
}

#[inline]
pub(crate) fn jacobian(params: &ModelParams, y: &[f64; 4]) -> Matrix4<f64> {
    let (h, eps, mu) = (params.h, params.epsilon, params.mu);
    let (q1, q2) = (y[0], y[2]);
    let z = eps * q2;
    let z2 = z * z;
    let v11 = -h - 3.0 * q1 * q1 - 3.0 * z2;
    let v12 = -6.0 * eps * z * q1;
    let v22 = eps
        * eps
        * (-(h + 3.0 * q1 * q1) - 3.0 * params.mu_sigma4() / (4.0 * z2 * z2)
            + params.alpha * (params.alpha + 1.0) * params.interaction_coeff()
                / pow(z, params.alpha + 2.0)
            - 9.0 * z2);
    Matrix4::new(
        0.0, -1.0 / mu, 0.0, 0.0, //
        v11, 0.0, v12, 0.0, //
        0.0, 0.0, 0.0, -1.0 / (eps * eps * mu), //
        v12, 0.0, v22, 0.0,
    )
}

/// Legendre map `(X, S, P, Λ) -> (q1, p1, q2, p2) = (X, -P, S, -Λ/(2S))`.
pub fn lagrangian_to_phase(l: &LagrangianState) -> Result<PhaseState> {
    check_q2(l.s)?;
    Ok(PhaseState { q1: l.x, p1: -l.p, q2: l.s, p2: -l.lambda / (2.0 * l.s) })
}

/// Inverse of [`lagrangian_to_phase`].
pub fn phase_to_lagrangian(s: &PhaseState) -> Result<LagrangianState> {
    check_q2(s.q2)?;
    Ok(LagrangianState { x: s.q1, s: s.q2, p: -s.p1, lambda: -2.0 * s.q2 * s.p2 })
}

/// Velocities `(Ẋ, Ṡ)` implied by the moment momenta.
pub fn lagrangian_velocities(params: &ModelParams, l: &LagrangianState) -> Result<(f64, f64)> {
    check_q2(l.s)?;
    let e2 = params.epsilon * params.epsilon;
    Ok((l.p / params.mu, l.lambda / (2.0 * params.mu * e2 * l.s)))
}

/// Kinetic, interaction and (fourth-order) external-potential energies of
/// the Gaussian ansatz.
pub fn energy_components(params: &ModelParams, l: &LagrangianState) -> Result<EnergyBreakdown> {
    check_q2(l.s)?;
    let mu = params.mu;
    let z = params.epsilon * l.s;
    let z2 = z * z;
    let e_kin = l.p * l.p / (2.0 * mu) + l.lambda * l.lambda / (8.0 * mu * z2)
        - params.mu_sigma4() / (8.0 * z2);
    let e_ipot = params.interaction_coeff() / pow(z, params.alpha);
    let x2 = l.x * l.x;
    // U0 = -h x²/2 - x⁴/4, U0'' = -h - 3x², U0'''' = -6.
    let e_epot = -params.h * x2 / 2.0 - x2 * x2 / 4.0 - 0.5 * z2 * (params.h + 3.0 * x2)
        - 0.75 * z2 * z2;
    Ok(EnergyBreakdown { e_kin, e_ipot, e_epot, e_tot: e_kin + e_ipot + e_epot })
}

/// The reduced Lagrangian `L̄ = -PẊ - ΛṠ/(2S) + E_tot`.
pub fn reduced_lagrangian(params: &ModelParams, l: &LagrangianState) -> Result<f64> {
    let (xdot, sdot) = lagrangian_velocities(params, l)?;
    let e = energy_components(params, l)?;
    Ok(-l.p * xdot - l.lambda * sdot / (2.0 * l.s) + e.e_tot)
}

/// Interaction energy `g / ((α+1)^{3/2} (2π)^{α/2} (εS)^α)` written out
/// independently of [`energy_components`].
pub fn interaction_energy(params: &ModelParams, s: f64) -> f64 {
    let a = params.alpha;
    params.g / (pow(a + 1.0, 1.5) * pow(2.0 * PI, a / 2.0) * pow(params.epsilon * s, a))
}

/// Standard deviation `Σ = εS` of the Gaussian density for a given `q2`.
pub fn std_dev(params: &ModelParams, q2: f64) -> f64 {
    params.epsilon * q2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sc() -> ModelParams {
        ModelParams::saddle_center()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(ModelParams::new(1.0, -2.0, 4.0, 0.0, 3.0, 0.05).is_err());
        assert!(ModelParams::new(1.0, 2.0, 4.0, -0.1, 3.0, 0.05).is_err());
        assert!(ModelParams::new(1.0, 2.0, 4.0, 0.0, 3.0, 1.0).is_err());
        assert!(ModelParams::new(0.0, 2.0, 4.0, 0.0, 3.0, 0.5).is_err());
        assert!(ModelParams::new(1.0, 2.0, 4.0, 0.0, 3.0, 0.05).is_ok());
    }

    #[test]
    fn potential_is_even_in_mean() {
        let p = sc();
        let a = potential_energy(&p, 2.0, 5.0).unwrap();
        let b = potential_energy(&p, -2.0, 5.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn potential_rejects_collapse() {
        assert_eq!(
            potential_energy(&sc(), 0.0, 0.0),
            Err(Error::VarianceCollapse { q2: 0.0 })
        );
        assert!(vector_field(&sc(), &PhaseState::new(0.0, 0.0, -1.0, 0.0)).is_err());
        assert!(state_jacobian(&sc(), &PhaseState::new(0.0, 0.0, -1.0, 0.0)).is_err());
    }

    #[test]
    fn energy_adds_kinetic_terms() {
        let p = sc();
        let v = potential_energy(&p, 0.3, 3.0).unwrap();
        assert_eq!(energy(&p, &PhaseState::new(0.3, 0.0, 3.0, 0.0)).unwrap(), v);
        let e0 = energy(&p, &PhaseState::new(0.0, 0.0, 3.81, 0.0)).unwrap();
        let e1 = energy(&p, &PhaseState::new(0.0, 1.0, 3.81, 0.0)).unwrap();
        assert!((e1 - e0 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mean_force_matches_hand_evaluation() {
        let p = sc();
        let f = vector_field(&p, &PhaseState::new(1.0, 0.0, 3.81, 0.0)).unwrap();
        let z: f64 = 0.05 * 3.81;
        assert!((f[1] - (-1.0 - 3.0 * z * z)).abs() < 1e-14);
        assert_eq!(f[0], 0.0);
    }

    #[test]
    fn invariant_plane_has_no_mean_motion() {
        let p = sc();
        for &(q2, p2) in &[(2.0, 0.3), (3.81, -1.0), (7.0, 0.0)] {
            let f = vector_field(&p, &PhaseState::new(0.0, 0.0, q2, p2)).unwrap();
            assert_eq!(f[0], 0.0);
            assert_eq!(f[1], 0.0);
        }
    }

    #[test]
    fn jacobian_is_traceless() {
        let p = sc();
        let j = state_jacobian(&p, &PhaseState::new(0.7, -0.2, 4.1, 0.3)).unwrap();
        assert_eq!(j.trace(), 0.0);
    }

    #[test]
    fn legendre_map_examples() {
        let s = lagrangian_to_phase(&LagrangianState { x: -10.0, s: 4.5, p: 0.0, lambda: 0.0 })
            .unwrap();
        assert_eq!(s.to_array(), [-10.0, 0.0, 4.5, 0.0]);
        let s = lagrangian_to_phase(&LagrangianState { x: 1.0, s: 2.0, p: 3.0, lambda: 4.0 })
            .unwrap();
        assert_eq!(s.to_array(), [1.0, -3.0, 2.0, -1.0]);
        assert!(lagrangian_to_phase(&LagrangianState { x: 0.0, s: 0.0, p: 0.0, lambda: 0.0 })
            .is_err());
        assert!(phase_to_lagrangian(&PhaseState::new(0.0, 0.0, -1.0, 0.0)).is_err());
    }

    #[test]
    fn breakdown_sums() {
        let l = LagrangianState { x: 0.4, s: 3.2, p: 0.7, lambda: -0.3 };
        let e = energy_components(&sc(), &l).unwrap();
        assert!((e.e_tot - (e.e_kin + e.e_ipot + e.e_epot)).abs() < 1e-14);
    }

    #[test]
    fn zero_momenta_lagrangian_is_potential() {
        let p = sc();
        let l = LagrangianState { x: 0.5, s: 3.0, p: 0.0, lambda: 0.0 };
        let lbar = reduced_lagrangian(&p, &l).unwrap();
        let v = potential_energy(&p, 0.5, 3.0).unwrap();
        assert!((lbar - v).abs() < 1e-13);
    }
}
