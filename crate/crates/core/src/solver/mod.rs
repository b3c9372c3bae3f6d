//! Backward solvers: Picard iteration and direct integration for globally
//! Lipschitz drivers, and the truncation cascade for locally Lipschitz ones.

pub mod lipschitz;
pub mod local;

pub use lipschitz::{
    picard_step, solve_direct, solve_linear_fk, solve_picard, solve_picard_from, PicardDiagnostics,
    PicardOptions,
};
pub use local::{
    lipschitz_profile_check, solve_local, truncate_driver, CascadeDiagnostics, LipschitzReport,
    LocalOptions, TruncationSchedule,
};

use crate::bsde::{Driver, TerminalCondition, ValueField};
use crate::error::Result;
use crate::markov::{MarginalLaw, MarkovModel};

/// Which backward solver to run.
#[derive(Debug, Clone, PartialEq)]
pub enum SolverChoice {
    /// Picard iteration; the driver must be globally Lipschitz.
    Picard(PicardOptions),
    /// Direct nonlinear integration.
    Direct,
    /// Truncation cascade for locally Lipschitz drivers.
    Local(TruncationSchedule, LocalOptions),
}

impl SolverChoice {
    /// Solves and returns the field. Diagnostics are dropped; a Picard run
    /// that does not reach its tolerance is an error.
    pub fn solve(
        &self,
        model: &MarkovModel,
        law: &MarginalLaw,
        driver: &Driver,
        h: &TerminalCondition,
    ) -> Result<ValueField> {
        match self {
            SolverChoice::Picard(opts) => {
                let (u, diag) = solve_picard(model, law, driver, h, *opts)?;
                if !diag.converged {
                    return crate::error::domain(format!(
                        "Picard iteration did not reach tolerance {:e} in {} steps",
                        opts.tol, diag.iterates
                    ));
                }
                Ok(u)
            }
            SolverChoice::Direct => solve_direct(model, driver, h, law.grid()),
            SolverChoice::Local(schedule, opts) => {
                let (u, _) = solve_local(model, law, driver, h, schedule, *opts)?;
                Ok(u)
            }
        }
    }
}
