//! Solver against exhaustive enumeration on small random markets.

use crate::model::{generate_instance, GenerationConfig, MarketInstance, ModelError};
use crate::oracle::{enumerate_optimal, EnumerationBudget, OracleError, UtilitySelector};
use crate::solver::{self, Matching, ObjectiveWeights, SolveStatus, SolverError, SolverOptions};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("trial {trial}: {source}")]
    Model { trial: usize, source: ModelError },
    #[error("trial {trial}: {source}")]
    Solver { trial: usize, source: SolverError },
    #[error("trial {trial}: {source}")]
    Oracle { trial: usize, source: OracleError },
    #[error("no lender counts given")]
    NoSizes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheckConfig {
    pub num_borrowers: usize,
    /// Lender counts, cycled over the trials.
    pub num_lenders: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub capacity_range: (f64, f64),
    pub budget_range: (f64, f64),
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self {
            num_borrowers: 2,
            num_lenders: vec![4, 5, 6],
            trials: 100,
            seed: 0,
            capacity_range: (2.0, 8.0),
            budget_range: (1.0, 5.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleCheckReport {
    pub trials: usize,
    /// Trials where both objectives agreed with the oracle.
    pub matched: usize,
    /// Trials where the oracle found a zero-blocking covering assignment
    /// under stability-first weights.
    pub stable_exists: usize,
    /// Of those, trials where the solver also returned zero blocking pairs.
    pub stable_found: usize,
    pub failures: Vec<String>,
}

impl OracleCheckReport {
    pub fn passed(&self) -> bool {
        self.matched == self.trials && self.stable_found == self.stable_exists
    }
}

/// Same status, objectives within `1e-9`, identical assignment.
pub fn agrees(solver: &Matching, oracle: &Matching) -> Result<(), String> {
    match (solver.status, oracle.status) {
        (SolveStatus::Infeasible, SolveStatus::Infeasible) => Ok(()),
        (SolveStatus::Optimal, SolveStatus::Optimal) => {
            if (solver.objective - oracle.objective).abs() > 1e-9 {
                return Err(format!("objective {} vs oracle {}", solver.objective, oracle.objective));
            }
            if solver.assignment != oracle.assignment {
                return Err(format!(
                    "assignment {:?} vs oracle {:?}",
                    solver.lender_match, oracle.lender_match
                ));
            }
            Ok(())
        }
        (s, o) => Err(format!("status {s} vs oracle {o}")),
    }
}

pub fn trial_instances(config: &OracleCheckConfig) -> Result<Vec<MarketInstance>, CheckError> {
    if config.num_lenders.is_empty() {
        return Err(CheckError::NoSizes);
    }
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.trials)
        .map(|trial| {
            generate_instance(&GenerationConfig {
                num_borrowers: config.num_borrowers,
                num_lenders: config.num_lenders[trial % config.num_lenders.len()],
                capacity_range: config.capacity_range,
                budget_range: config.budget_range,
                seed: master.next_u64(),
                ..GenerationConfig::default()
            })
            .map_err(|source| CheckError::Model { trial, source })
        })
        .collect()
}

pub fn oracle_check(config: &OracleCheckConfig) -> Result<OracleCheckReport, CheckError> {
    let options = SolverOptions::default();
    let budget = EnumerationBudget::default();
    let mut report = OracleCheckReport { trials: config.trials, ..Default::default() };
    for (trial, inst) in trial_instances(config)?.iter().enumerate() {
        let solver_err = |source| CheckError::Solver { trial, source };
        let oracle_err = |source| CheckError::Oracle { trial, source };
        let weights = ObjectiveWeights::default();

        let got = solver::solve_matching(inst, &weights, None, &options).map_err(solver_err)?;
        let want = enumerate_optimal(inst, &weights, UtilitySelector::LenderOnly, budget).map_err(oracle_err)?;
        let lender = agrees(&got, &want);
        let got = solver::solve_optimal_combined(inst, &weights, &options).map_err(solver_err)?;
        let want = enumerate_optimal(inst, &weights, UtilitySelector::Combined, budget).map_err(oracle_err)?;
        let combined = agrees(&got, &want);
        match (lender, combined) {
            (Ok(()), Ok(())) => report.matched += 1,
            (l, c) => {
                for (what, r) in [("lender objective", l), ("combined objective", c)] {
                    if let Err(e) = r {
                        report.failures.push(format!("trial {trial} ({what}): {e}"));
                    }
                }
            }
        }

        let stable = ObjectiveWeights::stability_first(inst, 1.0);
        let want = enumerate_optimal(inst, &stable, UtilitySelector::LenderOnly, budget).map_err(oracle_err)?;
        if want.status == SolveStatus::Optimal && want.blocking_count == 0 {
            report.stable_exists += 1;
            let got = solver::solve_matching(inst, &stable, None, &options).map_err(solver_err)?;
            if got.status == SolveStatus::Optimal && got.blocking_count == 0 {
                report.stable_found += 1;
            } else {
                report
                    .failures
                    .push(format!("trial {trial} (stability): solver left {} blocking pairs", got.blocking_count));
            }
        }
    }
    Ok(report)
}
