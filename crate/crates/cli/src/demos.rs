//! Bundled presets.

use mfgtube_core::bvp::{BoundaryConditions, BvpOptions, StepPolicy};
use mfgtube_core::pde::{Grid, PdeConfig};
use mfgtube_core::ModelParams;

use crate::config::*;

pub const DEMO_NAMES: [&str; 3] = ["ss-case", "sc-case", "pde-tworotation"];

/// Grid of the two-rotation planning run: `L = 40`, `Nx = Nt = 500`, `T = 9.5`.
pub fn two_rotation_grid() -> Grid {
    Grid { length: 40.0, nx: 500, nt: 500, horizon: 9.5 }
}

/// Planning problem moving a Gaussian of scaled deviation 4.5 from
/// `x = -10` to `x = 10` on `grid`.
pub fn transfer_pde(grid: Grid) -> PdeTask {
    let bc = BoundaryConditions::transfer();
    PdeTask {
        grid,
        solver: PdeConfig::default(),
        m_ic: DensitySpec { mean: bc.q1_0, q2: bc.q2_0 },
        m_fc: DensitySpec { mean: bc.q1_t, q2: bc.q2_t },
        warm_start: None,
        q1_window: 0.5,
    }
}

fn config(model: ModelParams, task: Task) -> RunConfig {
    RunConfig { schema: SCHEMA.to_string(), model, task, output_dir: None, seed: 0 }
}

pub fn bundled_demos() -> Vec<(&'static str, RunConfig)> {
    let ss = config(
        ModelParams::saddle_saddle(),
        Task::Continue(ContinueTask {
            bc: BoundaryConditions::transfer(),
            branch: BranchSpec {
                label: "S".into(),
                horizon: 1.0,
                horizon_target: 12.0,
                guess: GuessSpec::StraightLine { nodes: 200 },
            },
            options: BvpOptions::default(),
            policy: StepPolicy { initial: 0.25, max: 0.5, ..StepPolicy::default() },
            q1_window: 0.5,
        }),
    );
    let sc = config(
        ModelParams::saddle_center(),
        Task::Linearize(LinearizeTask { q2_min: 0.5, q2_max: 100.0, eps1: 1e-4, c: 0.1 }),
    );
    let pde = config(ModelParams::saddle_center(), Task::Pde(transfer_pde(two_rotation_grid())));
    vec![("ss-case", ss), ("sc-case", sc), ("pde-tworotation", pde)]
}

pub fn demo(name: &str) -> Option<RunConfig> {
    bundled_demos().into_iter().find(|(n, _)| *n == name).map(|(_, c)| c)
}
