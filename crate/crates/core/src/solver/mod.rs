//! Solvers for the blocking-pair-penalized many-to-one matching program.
//!
//! The program maximizes `λ1·Σ u·x − λ2·Σ w` over binary assignments `x`
//! (borrowers × lenders) where every lender funds at most one borrower and
//! every borrower's matched budgets cover its requested amount. The
//! blocking indicator `w` is a function of `x` (see [`blocking_pairs`]), so
//! all search happens in `x`-space.

mod bnb;
mod heuristic;
mod problem;

use crate::model::MarketInstance;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;
use thiserror::Error;

pub use heuristic::deferred_acceptance_warm_start;
pub(crate) use problem::Problem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("lender {0} is assigned to more than one borrower")]
    LenderOverassigned(usize),
    #[error("utility override row {0} is not strictly ordered")]
    InvalidOverride(usize),
    #[error("invalid objective weights: {0}")]
    InvalidWeights(String),
    #[error("branch-and-bound node limit {limit} exceeded")]
    NodeLimitExceeded {
        limit: usize,
        /// Best covering assignment found before the limit, if any.
        incumbent: Option<Box<Matching>>,
    },
    #[error("LP relaxation failed: {0}")]
    Lp(#[from] crate::lp::LpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl ObjectiveWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self, SolverError> {
        let w = Self { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda1) || !ok(self.lambda2) {
            return Err(SolverError::InvalidWeights("weights must be finite and nonnegative".into()));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(SolverError::InvalidWeights("weights must not both be zero".into()));
        }
        Ok(())
    }

    /// Weights that make any blocking pair cost more than all utility gains
    /// of a market with utilities in `[0, 1]`.
    pub fn stability_first(instance: &MarketInstance, lambda1: f64) -> Self {
        Self {
            lambda1,
            lambda2: (instance.num_borrowers * instance.num_lenders) as f64 * lambda1,
        }
    }
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0 }
    }
}

/// Row-major binary matrix over borrowers × lenders.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl BinaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, cells: vec![false; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self, SolverError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SolverError::DimensionMismatch("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, cells: rows.concat() })
    }

    /// Builds `x` from each lender's matched borrower.
    pub fn from_lender_match(num_borrowers: usize, lender_match: &[Option<usize>]) -> Self {
        let mut m = Self::zeros(num_borrowers, lender_match.len());
        for (l, b) in lender_match.iter().enumerate() {
            if let Some(b) = *b {
                m.set(b, l, true);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.cells[r * self.cols + c] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.cells.iter().filter(|&&v| v).count()
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    /// Row-major lexicographic comparison (`0 < 1` at the first difference).
    pub fn lex_cmp(&self, other: &Self) -> Ordering {
        self.cells.cmp(&other.cells)
    }

    /// Per-lender matched borrower; the first match wins if a column has
    /// several ones.
    pub fn lender_match(&self) -> Vec<Option<usize>> {
        (0..self.cols)
            .map(|l| (0..self.rows).find(|&b| self.get(b, l)))
            .collect()
    }

    pub fn borrower_match(&self) -> Vec<Vec<usize>> {
        (0..self.rows)
            .map(|b| (0..self.cols).filter(|&l| self.get(b, l)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Heuristic,
    Infeasible,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Heuristic => "heuristic",
            SolveStatus::Infeasible => "infeasible",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    /// LP relaxations solved.
    pub nodes: usize,
    /// Exact search hit its node limit and the result came from the heuristic.
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matching {
    pub assignment: BinaryMatrix,
    pub blocking: BinaryMatrix,
    pub blocking_count: usize,
    pub objective: f64,
    pub lender_match: Vec<Option<usize>>,
    pub borrower_match: Vec<Vec<usize>>,
    pub status: SolveStatus,
    /// For infeasible results: a set of borrowers that cannot be covered
    /// simultaneously and is minimal under single deletions when the search
    /// could establish it.
    pub uncoverable: Option<Vec<usize>>,
    pub stats: SolveStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    Exact,
    Heuristic,
}

impl FromStr for SolverMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Self::Exact),
            "heuristic" => Ok(Self::Heuristic),
            other => Err(format!("unknown solver mode `{other}`")),
        }
    }
}

impl fmt::Display for SolverMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverMode::Exact => "exact",
            SolverMode::Heuristic => "heuristic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub mode: SolverMode,
    pub node_limit: usize,
    pub pivot_tol: f64,
    pub integrality_tol: f64,
    /// Wall-clock budget for exact search. Results then depend on machine
    /// speed, so leave unset where reproducibility matters.
    pub time_budget: Option<Duration>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            mode: SolverMode::Exact,
            node_limit: 100_000,
            pivot_tol: 1e-9,
            integrality_tol: 1e-6,
            time_budget: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.pivot_tol > 0.0 && self.integrality_tol > 0.0 && self.integrality_tol < 0.5) {
            return Err(SolverError::InvalidWeights("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Relative tolerance under which two objective values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// True when `(objective, assignment)` beats the current best: strictly
/// larger objective, or a tie broken towards the lexicographically smaller
/// assignment.
pub fn improves(objective: f64, assignment: &BinaryMatrix, best: Option<(f64, &BinaryMatrix)>) -> bool {
    match best {
        None => true,
        Some((best_obj, best_x)) => {
            let tol = TIE_TOLERANCE * best_obj.abs().max(1.0);
            objective > best_obj + tol
                || ((objective - best_obj).abs() <= tol && assignment.lex_cmp(best_x) == Ordering::Less)
        }
    }
}

fn check_shape(instance: &MarketInstance, assignment: &BinaryMatrix) -> Result<(), SolverError> {
    if assignment.rows() != instance.num_borrowers || assignment.cols() != instance.num_lenders {
        return Err(SolverError::DimensionMismatch(format!(
            "assignment is {}x{}, market is {}x{}",
            assignment.rows(),
            assignment.cols(),
            instance.num_borrowers,
            instance.num_lenders
        )));
    }
    Ok(())
}

fn check_utility_shape(instance: &MarketInstance, utility: &[Vec<f64>]) -> Result<(), SolverError> {
    if utility.len() != instance.num_lenders || utility.iter().any(|r| r.len() != instance.num_borrowers) {
        return Err(SolverError::DimensionMismatch(
            "utility matrix must be lenders x borrowers".into(),
        ));
    }
    Ok(())
}

/// Blocking indicators under the market's own preferences.
pub fn blocking_pairs(
    instance: &MarketInstance,
    assignment: &BinaryMatrix,
) -> Result<(BinaryMatrix, usize), SolverError> {
    blocking_pairs_under(instance, &instance.lender_utility, assignment)
}

/// Blocking indicators when lenders rank borrowers by `lender_preferences`
/// (lenders × borrowers) instead of their true utilities.
///
/// `w_bl = 0` exactly when
/// `c_b·x_bl + c_b·Σ_{l' ≻_b l} x_bl' + q_l·Σ_{b' ≻_l b} x_b'l ≥ c_b`.
pub fn blocking_pairs_under(
    instance: &MarketInstance,
    lender_preferences: &[Vec<f64>],
    assignment: &BinaryMatrix,
) -> Result<(BinaryMatrix, usize), SolverError> {
    check_shape(instance, assignment)?;
    check_utility_shape(instance, lender_preferences)?;
    for l in 0..instance.num_lenders {
        if (0..instance.num_borrowers).filter(|&b| assignment.get(b, l)).count() > 1 {
            return Err(SolverError::LenderOverassigned(l));
        }
    }
    let blocking = problem::blocking_matrix(
        &instance.capacity,
        &instance.budget,
        lender_preferences,
        &instance.borrower_utility,
        assignment,
    );
    let count = blocking.count_ones();
    Ok((blocking, count))
}

/// `λ1·Σ_b Σ_l utility[l][b]·x_bl − λ2·Σ w_bl`, summed in row-major order.
pub fn objective_value(
    instance: &MarketInstance,
    assignment: &BinaryMatrix,
    blocking: &BinaryMatrix,
    weights: &ObjectiveWeights,
    utility: &[Vec<f64>],
) -> Result<f64, SolverError> {
    check_shape(instance, assignment)?;
    check_shape(instance, blocking)?;
    check_utility_shape(instance, utility)?;
    Ok(problem::objective(assignment, blocking, weights, utility))
}

/// Maximizes the lender-utility objective. `utility_override` replaces the
/// lenders' utilities both in the objective and in the lender preference
/// order used for blocking pairs; borrower preferences always come from the
/// instance.
pub fn solve_matching(
    instance: &MarketInstance,
    weights: &ObjectiveWeights,
    utility_override: Option<&[Vec<f64>]>,
    options: &SolverOptions,
) -> Result<Matching, SolverError> {
    solve_matching_hinted(instance, weights, utility_override, options, None)
}

/// As [`solve_matching`], seeding the search with a known assignment (for
/// example the previous round's matching).
pub fn solve_matching_hinted(
    instance: &MarketInstance,
    weights: &ObjectiveWeights,
    utility_override: Option<&[Vec<f64>]>,
    options: &SolverOptions,
    hint: Option<&BinaryMatrix>,
) -> Result<Matching, SolverError> {
    solve_matching_pooled(instance, weights, utility_override, options, hint, &mut CutPool::default())
}

/// Valid inequalities found while solving. They depend only on requests and
/// budgets, so repeated solves on one market with changing utilities can
/// share them. A pool built for another market is reset on use.
#[derive(Clone, Default)]
pub struct CutPool {
    key: Vec<u64>,
    cuts: Vec<PooledCut>,
    // Rows and optimal tableau of the last root relaxation; the next solve
    // starts from it when its rows are the same.
    root: Option<(Vec<crate::lp::Constraint>, crate::lp::WarmStart)>,
}

impl fmt::Debug for CutPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CutPool").field("cuts", &self.cuts.len()).finish()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PooledCut {
    pub coeffs: Vec<(usize, f64)>,
    /// Consecutive root solves at which the cut was slack.
    pub idle: u32,
}

impl CutPool {
    pub fn len(&self) -> usize {
        self.cuts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cuts.is_empty()
    }

    pub(crate) fn cuts_for(&mut self, problem: &Problem<'_>) -> PoolView<'_> {
        let key: Vec<u64> = [problem.k as u64, problem.n as u64]
            .into_iter()
            .chain(problem.capacity.iter().chain(problem.budget.iter()).map(|v| v.to_bits()))
            .collect();
        if key != self.key {
            self.key = key;
            self.cuts.clear();
            self.root = None;
        }
        PoolView { cuts: &mut self.cuts, root: &mut self.root }
    }
}

pub(crate) struct PoolView<'a> {
    pub cuts: &'a mut Vec<PooledCut>,
    pub root: &'a mut Option<(Vec<crate::lp::Constraint>, crate::lp::WarmStart)>,
}

/// As [`solve_matching_hinted`], reusing and extending `pool`.
pub fn solve_matching_pooled(
    instance: &MarketInstance,
    weights: &ObjectiveWeights,
    utility_override: Option<&[Vec<f64>]>,
    options: &SolverOptions,
    hint: Option<&BinaryMatrix>,
    pool: &mut CutPool,
) -> Result<Matching, SolverError> {
    let lender_utility = utility_override.unwrap_or(&instance.lender_utility);
    check_utility_shape(instance, lender_utility)?;
    if let Some(row) = lender_utility
        .iter()
        .position(|r| crate::model::rank_descending(r).is_none())
    {
        return Err(SolverError::InvalidOverride(row));
    }
    let problem = Problem::new(instance, lender_utility.to_vec(), lender_utility, *weights)?;
    solve_problem(&problem, options, hint, pool)
}

/// Maximizes the combined utility `u_b(l) + u_l(b)` under the same
/// constraints, with both preference orders taken from the true utilities.
/// This is the hindsight baseline for regret.
pub fn solve_optimal_combined(
    instance: &MarketInstance,
    weights: &ObjectiveWeights,
    options: &SolverOptions,
) -> Result<Matching, SolverError> {
    let problem = Problem::new(
        instance,
        instance.combined_utility(),
        &instance.lender_utility,
        *weights,
    )?;
    solve_problem(&problem, options, None, &mut CutPool::default())
}

pub(crate) fn solve_problem(
    problem: &Problem<'_>,
    options: &SolverOptions,
    hint: Option<&BinaryMatrix>,
    pool: &mut CutPool,
) -> Result<Matching, SolverError> {
    options.validate()?;
    match options.mode {
        SolverMode::Exact => bnb::branch_and_bound(problem, options, hint, pool),
        SolverMode::Heuristic => heuristic::solve_heuristic(problem, options, hint),
    }
}
