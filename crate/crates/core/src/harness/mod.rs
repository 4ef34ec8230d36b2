//! Experiment orchestration: configuration, convergence studies, the check
//! suite and output files.

pub mod checks;
pub mod config;
pub mod output;
pub mod run;
pub mod table;

pub use checks::{parse_check_list, run_check_suite, CheckLine, CheckReport, CHECK_NAMES};
pub use config::{preset, BbarMode, DeltaPolicy, ExperimentConfig, FbarMode, InitialSpec};
pub use output::{emit_outputs, Manifest};
pub use run::{
    estimate_cost, run_convergence, run_model1_convergence, run_model2_convergence, ConvergenceReport, CostEstimate,
    RungSummary, Setup, Verdict,
};
pub use table::{CurveRow, MomentRow, MomentTable, TimeKey};

use crate::error::{Error, Result};

/// Run `f` on a dedicated pool of `threads` workers (0 = all cores).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
