use core::fmt;

/// Failure modes shared by every solver in the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A model or solver parameter violates its documented range.
    InvalidParameter(&'static str),
    /// The scaled standard deviation reached a non-positive value.
    VarianceCollapse { q2: f64 },
    /// Integration stopped because `q2` fell below the collapse guard.
    Singularity { time: f64 },
    /// The adaptive step size underflowed.
    StepUnderflow { time: f64 },
    /// The (4,3) Jacobian entry vanishes, so the equilibrium cannot be classified.
    DegenerateEquilibrium,
    /// Requested energy does not lie above the equilibrium energy.
    NoOrbit { energy: f64, e_eq: f64 },
    /// No outer turning point brackets the requested energy.
    ExistenceBound { energy: f64 },
    /// The monodromy matrix has no real eigenvalue pair off the unit circle.
    HyperbolicityLost { energy: f64 },
    /// An iterative method stalled.
    NonConvergence { iterations: usize, residual: f64 },
    /// An initial guess placed `q2 <= 0` on the mesh.
    InfeasibleGuess,
    /// A linear system had a zero pivot.
    SingularSystem,
    /// A density sampled on the grid lost mass to the boundary.
    DomainTooSmall { mass: f64 },
    /// A density row had non-positive variance.
    DegenerateDensity,
    /// A section event could not be polished onto the section.
    EventRefinement { time: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidParameter(what) => write!(f, "invalid parameter: {what}"),
            Error::VarianceCollapse { q2 } => write!(f, "variance collapse (q2 = {q2})"),
            Error::Singularity { time } => write!(f, "q2 collapsed during integration at t = {time}"),
            Error::StepUnderflow { time } => write!(f, "step size underflow at t = {time}"),
            Error::DegenerateEquilibrium => write!(f, "degenerate equilibrium"),
            Error::NoOrbit { energy, e_eq } => {
                write!(f, "no periodic orbit at E = {energy} (E_eq = {e_eq})")
            }
            Error::ExistenceBound { energy } => {
                write!(f, "E = {energy} lies above the periodic-orbit existence bound")
            }
            Error::HyperbolicityLost { energy } => {
                write!(f, "periodic orbit at E = {energy} is not hyperbolic")
            }
            Error::NonConvergence { iterations, residual } => write!(
                f,
                "no convergence after {iterations} iterations (residual {residual:e})"
            ),
            Error::InfeasibleGuess => write!(f, "initial guess has q2 <= 0"),
            Error::SingularSystem => write!(f, "singular linear system"),
            Error::DomainTooSmall { mass } => {
                write!(f, "density mass on grid is {mass}, domain too small")
            }
            Error::DegenerateDensity => write!(f, "density has non-positive variance"),
            Error::EventRefinement { time } => {
                write!(f, "section event near t = {time} could not be refined")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
