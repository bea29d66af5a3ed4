//! Equilibria on the invariant plane, their linearisation, and linear
//! transit analysis in the eigenbasis.
//!
//! For `h ≥ 0` the mean force `ṗ1 = -q1(h + q1² + 3ε²q2²)` vanishes only at
//! `q1 = 0`, so every equilibrium is a root of `∂V/∂q2(0, ·)`.

use alloc::vec::Vec;

use libm::{cos, fabs, sin, sqrt};
use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::model::{energy_unchecked, field, jacobian, potential_slope_q2, ModelParams, PhaseState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EquilibriumKind {
    SaddleSaddle,
    SaddleCenter,
}

/// Positive entries of the block Jacobian at an equilibrium:
/// `q̇1 = -a p1`, `ṗ1 = -b q1`, `q̇2 = -c p2`, `ṗ2 = ±d q2`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Abcd {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

/// `(√(ab), √(cd))`: `(γ1, γ2)` for a saddle×saddle, `(λ, ν)` for a
/// saddle×center.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rates {
    pub hyperbolic: f64,
    pub second: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Equilibrium {
    pub state: PhaseState,
    pub kind: EquilibriumKind,
    pub abcd: Abcd,
    pub rates: Rates,
    pub energy: f64,
}

impl Equilibrium {
    /// Linear period `2π/ν` of the center (saddle×center only).
    pub fn linear_period(&self) -> Option<f64> {
        match self.kind {
            EquilibriumKind::SaddleCenter => Some(2.0 * core::f64::consts::PI / self.rates.second),
            EquilibriumKind::SaddleSaddle => None,
        }
    }
}

/// Roots of `∂V/∂q2(0, ·)` in `q2_range`, classified.
pub fn find_equilibria(params: &ModelParams, q2_range: (f64, f64)) -> Result<Vec<Equilibrium>> {
    params.validate()?;
    let (lo, hi) = q2_range;
    let mut out: Vec<f64> = Vec::new();
    if !(lo > 0.0 && hi > lo) {
        return Ok(Vec::new());
    }
    // Geometric scan resolves the steep small-q2 end as well as the tail.
    let n = 20_000;
    let ratio = libm::pow(hi / lo, 1.0 / n as f64);
    let mut x0 = lo;
    let mut f0 = potential_slope_q2(params, x0);
    for i in 1..=n {
        let x1 = if i == n { hi } else { x0 * ratio };
        let f1 = potential_slope_q2(params, x1);
        if f0 == 0.0 {
            out.push(x0);
        } else if f0 * f1 < 0.0 {
            out.push(bisect(params, x0, x1, f0));
        }
        x0 = x1;
        f0 = f1;
    }
    if f0 == 0.0 {
        out.push(hi);
    }
    out.into_iter()
        .map(|q2| {
            let state = PhaseState::new(0.0, 0.0, q2, 0.0);
            let (kind, abcd, rates) = classify_equilibrium(params, &state)?;
            Ok(Equilibrium { state, kind, abcd, rates, energy: energy_unchecked(params, &state) })
        })
        .collect()
}

fn bisect(params: &ModelParams, mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = potential_slope_q2(params, m);
        if fm == 0.0 {
            return m;
        }
        if fm * fa > 0.0 {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Reads `(a, b, c, d)` off the analytic Jacobian and classifies the
/// equilibrium by the sign of the `(4,3)` entry.
pub fn classify_equilibrium(
    params: &ModelParams,
    state: &PhaseState,
) -> Result<(EquilibriumKind, Abcd, Rates)> {
    state.check()?;
    let y = state.to_array();
    let f = field(params, &y);
    let scale = 1.0 / (params.epsilon * params.epsilon * params.mu);
    if f.iter().map(|v| fabs(*v)).fold(0.0, f64::max) > 1e-8 * scale.max(1.0) {
        return Err(Error::InvalidParameter("state is not an equilibrium"));
    }
    let j = jacobian(params, &y);
    let d43 = j[(3, 2)];
    if fabs(d43) < 1e-12 {
        return Err(Error::DegenerateEquilibrium);
    }
    let abcd = Abcd { a: -j[(0, 1)], b: -j[(1, 0)], c: -j[(2, 3)], d: fabs(d43) };
    let kind = if d43 > 0.0 { EquilibriumKind::SaddleCenter } else { EquilibriumKind::SaddleSaddle };
    let rates = Rates { hyperbolic: sqrt(abcd.a * abcd.b), second: sqrt(abcd.c * abcd.d) };
    Ok((kind, abcd, rates))
}

/// Eigenvector basis `Z = T Y` of the linearisation, with the energy weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenBasis {
    pub kind: EquilibriumKind,
    pub t: Matrix4<f64>,
    pub t_inv: Matrix4<f64>,
    /// `2ab/(a+b)`.
    pub a1: f64,
    /// `0.5cd/(c+d)`.
    pub a2: f64,
    pub rates: Rates,
}

pub fn eigen_basis(eq: &Equilibrium) -> EigenBasis {
    let Abcd { a, b, c, d } = eq.abcd;
    let sa = sqrt(a / (a + b));
    let sb = sqrt(b / (a + b));
    let sc = sqrt(c / (c + d));
    let sd = sqrt(d / (c + d));
    let t = match eq.kind {
        EquilibriumKind::SaddleSaddle => Matrix4::new(
            sa, sa, 0.0, 0.0, //
            -sb, sb, 0.0, 0.0, //
            0.0, 0.0, sc, sc, //
            0.0, 0.0, -sd, sd,
        ),
        EquilibriumKind::SaddleCenter => Matrix4::new(
            sa, sa, 0.0, 0.0, //
            -sb, sb, 0.0, 0.0, //
            0.0, 0.0, sc, 0.0, //
            0.0, 0.0, 0.0, -sd,
        ),
    };
    // Both blocks invert in closed form.
    let t_inv = match eq.kind {
        EquilibriumKind::SaddleSaddle => Matrix4::new(
            0.5 / sa, -0.5 / sb, 0.0, 0.0, //
            0.5 / sa, 0.5 / sb, 0.0, 0.0, //
            0.0, 0.0, 0.5 / sc, -0.5 / sd, //
            0.0, 0.0, 0.5 / sc, 0.5 / sd,
        ),
        EquilibriumKind::SaddleCenter => Matrix4::new(
            0.5 / sa, -0.5 / sb, 0.0, 0.0, //
            0.5 / sa, 0.5 / sb, 0.0, 0.0, //
            0.0, 0.0, 1.0 / sc, 0.0, //
            0.0, 0.0, 0.0, -1.0 / sd,
        ),
    };
    EigenBasis {
        kind: eq.kind,
        t,
        t_inv,
        a1: 2.0 * a * b / (a + b),
        a2: 0.5 * c * d / (c + d),
        rates: eq.rates,
    }
}

/// Coordinates `(ζ, η, ρ1, ρ2)` in the eigenbasis.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EigenCoords {
    pub zeta: f64,
    pub eta: f64,
    pub rho1: f64,
    pub rho2: f64,
}

impl EigenCoords {
    pub fn rho(&self) -> f64 {
        libm::hypot(self.rho1, self.rho2)
    }

    fn vector(&self) -> Vector4<f64> {
        Vector4::new(self.zeta, self.eta, self.rho1, self.rho2)
    }

    fn from_vector(v: &Vector4<f64>) -> Self {
        Self { zeta: v[0], eta: v[1], rho1: v[2], rho2: v[3] }
    }
}

pub fn to_eigen_coords(basis: &EigenBasis, eq: &Equilibrium, state: &PhaseState) -> EigenCoords {
    let z = Vector4::from(state.to_array()) - Vector4::from(eq.state.to_array());
    EigenCoords::from_vector(&(basis.t_inv * z))
}

pub fn from_eigen_coords(basis: &EigenBasis, eq: &Equilibrium, y: &EigenCoords) -> PhaseState {
    let z = basis.t * y.vector() + Vector4::from(eq.state.to_array());
    PhaseState::new(z[0], z[1], z[2], z[3])
}

/// Linearised energy `E_l` in eigencoordinates. For a saddle×center this
/// is `-a1 ζη + a2 (ρ1² + ρ2²)`; for a saddle×saddle the second block is
/// hyperbolic as well and contributes `-(2cd/(c+d)) ρ1ρ2`.
pub fn linear_energy(basis: &EigenBasis, y: &EigenCoords) -> f64 {
    match basis.kind {
        EquilibriumKind::SaddleCenter => {
            -basis.a1 * y.zeta * y.eta + basis.a2 * (y.rho1 * y.rho1 + y.rho2 * y.rho2)
        }
        EquilibriumKind::SaddleSaddle => -basis.a1 * y.zeta * y.eta - 4.0 * basis.a2 * y.rho1 * y.rho2,
    }
}

/// `E_l = -H_l = 0.5(a p1² - b q1² + c p2² ± d q2²)` evaluated directly on
/// a displacement from the equilibrium.
pub fn linear_energy_phase(eq: &Equilibrium, dz: &PhaseState) -> f64 {
    let Abcd { a, b, c, d } = eq.abcd;
    let sign = match eq.kind {
        EquilibriumKind::SaddleCenter => 1.0,
        EquilibriumKind::SaddleSaddle => -1.0,
    };
    0.5 * (a * dz.p1 * dz.p1 - b * dz.q1 * dz.q1 + c * dz.p2 * dz.p2 + sign * d * dz.q2 * dz.q2)
}

/// Exact flow of the linearised saddle×center system in eigencoordinates:
/// `ζ e^{λt}`, `η e^{-λt}`, and a rotation of `(ρ1, ρ2)` by `νt`.
///
/// The rotation sense is the one generated by `T⁻¹AT` for the basis above,
/// `ρ̇1 = νρ2`, `ρ̇2 = -νρ1`.
pub fn linear_flow(y0: &EigenCoords, t: f64, rates: &Rates) -> EigenCoords {
    let (lam, nu) = (rates.hyperbolic, rates.second);
    let (c, s) = (cos(nu * t), sin(nu * t));
    EigenCoords {
        zeta: y0.zeta * libm::exp(lam * t),
        eta: y0.eta * libm::exp(-lam * t),
        rho1: c * y0.rho1 + s * y0.rho2,
        rho2: -s * y0.rho1 + c * y0.rho2,
    }
}

/// The isoenergetic slab `E_l = eps1`, `|ζ + η| ≤ C` around the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RegionSpec {
    pub eps1: f64,
    pub c: f64,
    pub rho_star: f64,
}

impl RegionSpec {
    pub fn new(basis: &EigenBasis, eps1: f64, c: f64) -> Result<Self> {
        if !(eps1 > 0.0 && c > 0.0) {
            return Err(Error::InvalidParameter("region needs eps1 > 0 and C > 0"));
        }
        Ok(Self { eps1, c, rho_star: sqrt(eps1 / basis.a2) })
    }

    /// Point on the bounding sphere `ζ + η = side·C` with elliptic radius
    /// `rho` and phase `theta`, heading into the slab. `None` when `rho`
    /// exceeds the sphere.
    pub fn bounding_sphere_point(
        &self,
        basis: &EigenBasis,
        side: f64,
        rho: f64,
        theta: f64,
    ) -> Option<EigenCoords> {
        let s = side.signum() * self.c;
        let rhs = self.eps1 + basis.a1 * s * s / 4.0 - basis.a2 * rho * rho;
        if rhs < 0.0 {
            return None;
        }
        // d(ζ+η)/dt = λ(ζ−η), so inward motion needs ζ−η of sign −side.
        let diff = -side.signum() * sqrt(4.0 * rhs / basis.a1);
        Some(EigenCoords {
            zeta: 0.5 * (s + diff),
            eta: 0.5 * (s - diff),
            rho1: rho * cos(theta),
            rho2: rho * sin(theta),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TransitClass {
    Transit,
    NonTransit,
    Asymptotic,
}

/// Dead-band that absorbs sign noise of `ζη` at the cylinder boundary.
pub fn default_transit_tol(y: &EigenCoords) -> f64 {
    let m = fabs(y.zeta).max(fabs(y.eta));
    (1e-10 * m * m).max(f64::MIN_POSITIVE)
}

/// Linear transit class from the sign of the invariant `ζη`.
pub fn transit_classify(y: &EigenCoords, tol: f64) -> TransitClass {
    let p = y.zeta * y.eta;
    if fabs(p) <= tol {
        TransitClass::Asymptotic
    } else if p < 0.0 {
        TransitClass::Transit
    } else {
        TransitClass::NonTransit
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saddle_center_linear_data() {
        let p = ModelParams::saddle_center();
        let eqs = find_equilibria(&p, (1.0, 10.0)).unwrap();
        assert_eq!(eqs.len(), 1);
        let e = eqs[0];
        assert_eq!(e.kind, EquilibriumKind::SaddleCenter);
        assert!((e.state.q2 - 3.8107).abs() < 1e-3);
        assert!((e.abcd.c - 200.0).abs() < 1e-9);
        assert!((e.abcd.a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_or_non_equilibrium_rejected() {
        let p = ModelParams::saddle_center();
        assert!(classify_equilibrium(&p, &PhaseState::new(0.0, 0.0, 3.0, 0.0)).is_err());
    }

    #[test]
    fn basis_inverse() {
        for p in [ModelParams::saddle_center(), ModelParams::saddle_saddle()] {
            let e = find_equilibria(&p, (1.0, 13.0)).unwrap()[0];
            let b = eigen_basis(&e);
            let err = (b.t * b.t_inv - Matrix4::identity()).abs().max();
            assert!(err < 1e-12);
        }
    }

    #[test]
    fn basis_diagonalises_linearisation() {
        let p = ModelParams::saddle_saddle();
        let e = find_equilibria(&p, (1.0, 50.0)).unwrap()[0];
        let b = eigen_basis(&e);
        let a = jacobian(&p, &e.state.to_array());
        let dmat = b.t_inv * a * b.t;
        let (g1, g2) = (e.rates.hyperbolic, e.rates.second);
        let expect = Matrix4::from_diagonal(&Vector4::new(g1, -g1, g2, -g2));
        assert!((dmat - expect).abs().max() < 1e-9 * g2.max(1.0));
    }

    #[test]
    fn transit_examples() {
        let y = |z, e| EigenCoords { zeta: z, eta: e, rho1: 0.0, rho2: 0.0 };
        assert_eq!(transit_classify(&y(1.0, -1.0), 1e-12), TransitClass::Transit);
        assert_eq!(transit_classify(&y(1.0, 1.0), 1e-12), TransitClass::NonTransit);
        assert_eq!(transit_classify(&y(0.5, 0.0), 1e-12), TransitClass::Asymptotic);
    }

    #[test]
    fn bounding_sphere_points_lie_on_shell() {
        let p = ModelParams::saddle_center();
        let e = find_equilibria(&p, (1.0, 10.0)).unwrap()[0];
        let b = eigen_basis(&e);
        let r = RegionSpec::new(&b, 1e-4, 0.05).unwrap();
        let y = r.bounding_sphere_point(&b, -1.0, 0.5 * r.rho_star, 1.0).unwrap();
        assert!((linear_energy(&b, &y) - 1e-4).abs() < 1e-15);
        assert!((y.zeta + y.eta + 0.05).abs() < 1e-15);
        assert!(y.zeta - y.eta > 0.0);
        assert!(r.bounding_sphere_point(&b, -1.0, 10.0, 0.0).is_none());
    }
}
