//! Run configuration: a versioned JSON document naming one task.

use std::path::{Path, PathBuf};

use mfgtube_core::bvp::{BoundaryConditions, BvpOptions, SeedOptions, StepPolicy};
use mfgtube_core::orbits::TubeBranch;
use mfgtube_core::pde::{Grid, PdeConfig};
use mfgtube_core::ModelParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA: &str = "mfgtube.run/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub model: ModelParams,
    pub task: Task,
    /// Overridden by `--out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Recorded in the manifest; no numerical path draws random numbers.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Equilibria(EquilibriaTask),
    Linearize(LinearizeTask),
    Orbit(OrbitTask),
    Tube(TubeTask),
    Bvp(BvpTask),
    Continue(ContinueTask),
    Diagram(DiagramTask),
    Pde(PdeTask),
    Compare(CompareTask),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Equilibria(_) => "equilibria",
            Task::Linearize(_) => "linearize",
            Task::Orbit(_) => "orbit",
            Task::Tube(_) => "tube",
            Task::Bvp(_) => "bvp",
            Task::Continue(_) => "continue",
            Task::Diagram(_) => "diagram",
            Task::Pde(_) => "pde",
            Task::Compare(_) => "compare",
        }
    }
}

fn q2_lo() -> f64 {
    0.5
}

fn q2_hi() -> f64 {
    100.0
}

fn window() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriaTask {
    #[serde(default = "q2_lo")]
    pub q2_min: f64,
    #[serde(default = "q2_hi")]
    pub q2_max: f64,
}

impl Default for EquilibriaTask {
    fn default() -> Self {
        Self { q2_min: q2_lo(), q2_max: q2_hi() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearizeTask {
    #[serde(default = "q2_lo")]
    pub q2_min: f64,
    #[serde(default = "q2_hi")]
    pub q2_max: f64,
    /// Energy above the equilibrium for the bottleneck region.
    #[serde(default = "LinearizeTask::default_eps1")]
    pub eps1: f64,
    /// Half-width of the slab in `ζ + η`.
    #[serde(default = "LinearizeTask::default_c")]
    pub c: f64,
}

impl LinearizeTask {
    fn default_eps1() -> f64 {
        1e-4
    }

    fn default_c() -> f64 {
        0.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitTask {
    /// `E − E_eq`.
    pub energy_offset: f64,
    #[serde(default = "OrbitTask::default_samples")]
    pub samples: usize,
}

impl OrbitTask {
    fn default_samples() -> usize {
        400
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeTask {
    pub energy_offset: f64,
    pub branch: TubeBranch,
    /// Sign of the `q1` displacement.
    pub side: f64,
    #[serde(default = "TubeTask::default_strands")]
    pub n_strands: usize,
    #[serde(default = "TubeTask::default_t_int")]
    pub t_int: f64,
    /// Relative displacement; the default is `1e-5` of the orbit amplitude.
    #[serde(default)]
    pub displacement: Option<f64>,
    #[serde(default)]
    pub q1_stop: Option<f64>,
}

impl TubeTask {
    fn default_strands() -> usize {
        32
    }

    fn default_t_int() -> f64 {
        60.0
    }
}

/// Where the collocation solver starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuessSpec {
    StraightLine {
        nodes: usize,
    },
    /// Tube-following seed at `E_eq + energy_offset` with `half_periods`
    /// half-turns on the orbit. Its own horizon replaces the task horizon.
    Tube {
        energy_offset: f64,
        half_periods: usize,
        #[serde(default)]
        seed: SeedOptions,
    },
    /// A `solution.csv` written by an earlier `bvp` run.
    File {
        path: PathBuf,
    },
}

impl Default for GuessSpec {
    fn default() -> Self {
        GuessSpec::StraightLine { nodes: 200 }
    }
}

fn transfer() -> BoundaryConditions {
    BoundaryConditions::transfer()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BvpTask {
    #[serde(default = "transfer")]
    pub bc: BoundaryConditions,
    pub horizon: f64,
    #[serde(default)]
    pub guess: GuessSpec,
    #[serde(default)]
    pub options: BvpOptions,
    #[serde(default = "window")]
    pub q1_window: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinueTask {
    #[serde(default = "transfer")]
    pub bc: BoundaryConditions,
    pub branch: BranchSpec,
    #[serde(default)]
    pub options: BvpOptions,
    #[serde(default)]
    pub policy: StepPolicy,
    #[serde(default = "window")]
    pub q1_window: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub label: String,
    /// Horizon of the seed solve.
    pub horizon: f64,
    pub horizon_target: f64,
    #[serde(default)]
    pub guess: GuessSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagramTask {
    #[serde(default = "transfer")]
    pub bc: BoundaryConditions,
    pub branches: Vec<BranchSpec>,
    #[serde(default)]
    pub options: BvpOptions,
    #[serde(default)]
    pub policy: StepPolicy,
    #[serde(default = "window")]
    pub q1_window: f64,
}

/// Gaussian density with mean `mean` and standard deviation `ε·q2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySpec {
    pub mean: f64,
    pub q2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeTask {
    pub grid: Grid,
    #[serde(default)]
    pub solver: PdeConfig,
    pub m_ic: DensitySpec,
    pub m_fc: DensitySpec,
    /// A `density.csv` from an earlier run, used as the first iterate.
    #[serde(default)]
    pub warm_start: Option<PathBuf>,
    #[serde(default = "window")]
    pub q1_window: f64,
}

impl PdeTask {
    /// Boundary conditions of the moment model matching the two densities.
    pub fn boundary_conditions(&self) -> BoundaryConditions {
        BoundaryConditions { q1_0: self.m_ic.mean, q2_0: self.m_ic.q2, q1_t: self.m_fc.mean, q2_t: self.m_fc.q2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareTask {
    pub pde: PdeTask,
    #[serde(default)]
    pub guess: GuessSpec,
    #[serde(default)]
    pub options: BvpOptions,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Canonical serialisation, the input of the manifest hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(CliError::Config(format!("unsupported schema '{}', expected '{SCHEMA}'", self.schema)));
        }
        self.model.validate()?;
        match &self.task {
            Task::Equilibria(t) => range(t.q2_min, t.q2_max),
            Task::Linearize(t) => {
                range(t.q2_min, t.q2_max)?;
                positive(t.eps1, "eps1")?;
                positive(t.c, "c")
            }
            Task::Orbit(t) => {
                positive(t.energy_offset, "energy_offset")?;
                if t.samples < 2 {
                    return Err(CliError::Config("orbit needs at least 2 samples".into()));
                }
                Ok(())
            }
            Task::Tube(t) => {
                positive(t.energy_offset, "energy_offset")?;
                positive(t.t_int, "t_int")?;
                if t.side == 0.0 || !t.side.is_finite() {
                    return Err(CliError::Config("tube side must be +1 or -1".into()));
                }
                if let Some(d) = t.displacement {
                    positive(d, "displacement")?;
                }
                Ok(())
            }
            Task::Bvp(t) => {
                t.bc.validate()?;
                positive(t.horizon, "horizon")?;
                guess(&t.guess)?;
                bvp_options(&t.options)?;
                positive(t.q1_window, "q1_window")
            }
            Task::Continue(t) => {
                t.bc.validate()?;
                branch(&t.branch)?;
                bvp_options(&t.options)?;
                policy(&t.policy)?;
                positive(t.q1_window, "q1_window")
            }
            Task::Diagram(t) => {
                t.bc.validate()?;
                if t.branches.is_empty() {
                    return Err(CliError::Config("diagram needs at least one branch".into()));
                }
                let mut labels: Vec<&str> = t.branches.iter().map(|b| b.label.as_str()).collect();
                labels.sort_unstable();
                if labels.windows(2).any(|w| w[0] == w[1]) {
                    return Err(CliError::Config("branch labels must be unique".into()));
                }
                t.branches.iter().try_for_each(branch)?;
                bvp_options(&t.options)?;
                policy(&t.policy)?;
                positive(t.q1_window, "q1_window")
            }
            Task::Pde(t) => pde(t),
            Task::Compare(t) => {
                pde(&t.pde)?;
                t.pde.boundary_conditions().validate()?;
                guess(&t.guess)?;
                bvp_options(&t.options)
            }
        }
    }
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} must be positive and finite")))
    }
}

fn range(lo: f64, hi: f64) -> Result<()> {
    positive(lo, "q2_min")?;
    if hi > lo && hi.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config("q2_max must exceed q2_min".into()))
    }
}

fn guess(g: &GuessSpec) -> Result<()> {
    match g {
        GuessSpec::StraightLine { nodes } if *nodes < 3 => {
            Err(CliError::Config("straight-line guess needs at least 3 nodes".into()))
        }
        GuessSpec::Tube { energy_offset, seed, .. } => {
            positive(*energy_offset, "energy_offset")?;
            positive(seed.t_int, "seed.t_int")?;
            if seed.nodes < 3 {
                return Err(CliError::Config("seed.nodes must be at least 3".into()));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn bvp_options(o: &BvpOptions) -> Result<()> {
    positive(o.tol, "options.tol")?;
    positive(o.newton_tol, "options.newton_tol")?;
    positive(o.energy_tol, "options.energy_tol")?;
    if o.max_newton == 0 || o.max_nodes < 3 {
        return Err(CliError::Config("options.max_newton and options.max_nodes are too small".into()));
    }
    Ok(())
}

fn policy(p: &StepPolicy) -> Result<()> {
    positive(p.initial, "policy.initial")?;
    positive(p.floor, "policy.floor")?;
    positive(p.max, "policy.max")?;
    if p.floor > p.initial || p.initial > p.max || p.max_points == 0 {
        return Err(CliError::Config("policy needs floor <= initial <= max and max_points > 0".into()));
    }
    Ok(())
}

fn branch(b: &BranchSpec) -> Result<()> {
    if b.label.is_empty() {
        return Err(CliError::Config("branch label must not be empty".into()));
    }
    positive(b.horizon, "horizon")?;
    positive(b.horizon_target, "horizon_target")?;
    guess(&b.guess)
}

fn pde(t: &PdeTask) -> Result<()> {
    t.grid.validate()?;
    t.solver.validate()?;
    for d in [t.m_ic, t.m_fc] {
        positive(d.q2, "density q2")?;
        if !d.mean.is_finite() {
            return Err(CliError::Config("density mean must be finite".into()));
        }
    }
    positive(t.q1_window, "q1_window")
}
