//! The learning loop: match under current indices, sample rewards for the
//! matched lenders, update, repeat. Regret is measured per lender against
//! the combined-utility optimum computed once from the true utilities.

use crate::bandit::{self, BanditError, RewardModel};
use crate::model::MarketInstance;
use crate::solver::{
    self, BinaryMatrix, Matching, ObjectiveWeights, SolveStatus, SolverError, SolverMode, SolverOptions,
};
use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("horizon must be at least 1")]
    InvalidHorizon,
    #[error("no covering assignment exists (step {step}); uncoverable borrowers {uncoverable:?}")]
    Infeasible { step: u64, uncoverable: Vec<usize> },
    #[error("solver failed at step {step}: {source}")]
    Solver { step: u64, source: SolverError },
    #[error(transparent)]
    Bandit(#[from] BanditError),
    #[error("unknown regret mode `{0}`")]
    ModeUnknown(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// What the subtracted term of a lender's per-step regret measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegretMode {
    /// `u_l(b_alg)`, the lender's true utility for the borrower it got.
    #[default]
    ExpectedLenderUtility,
    /// The sampled reward.
    RealizedReward,
    /// `u_{b_alg}(l)`, the mean of the reward distribution.
    ExpectedBorrowerUtility,
}

impl FromStr for RegretMode {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "expected_lender_utility" => Ok(Self::ExpectedLenderUtility),
            "realized_reward" => Ok(Self::RealizedReward),
            "expected_borrower_utility" => Ok(Self::ExpectedBorrowerUtility),
            other => Err(SimError::ModeUnknown(other.to_string())),
        }
    }
}

impl fmt::Display for RegretMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegretMode::ExpectedLenderUtility => "expected_lender_utility",
            RegretMode::RealizedReward => "realized_reward",
            RegretMode::ExpectedBorrowerUtility => "expected_borrower_utility",
        })
    }
}

/// Index used for pairs that were never matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialIndex {
    /// The dominating constant, so every pair is tried optimistically.
    #[default]
    Sentinel,
    /// The lender's prior utility.
    Prior,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimOptions {
    pub solver: SolverOptions,
    pub initial: InitialIndex,
    pub regret_mode: RegretMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: u64,
    pub lender_match: Vec<Option<usize>>,
    /// Zero for unmatched lenders.
    pub rewards: Vec<f64>,
    pub status: SolveStatus,
    pub nodes: usize,
    pub fell_back: bool,
}

/// Per-lender regret indexed `[t - 1][l]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretTrace {
    pub increments: Vec<Vec<f64>>,
    /// `cumulative[t] = cumulative[t - 1] + increments[t]`, evaluated in
    /// exactly that order.
    pub cumulative: Vec<Vec<f64>>,
}

impl RegretTrace {
    pub fn horizon(&self) -> usize {
        self.cumulative.len()
    }

    pub fn terminal(&self) -> Option<&[f64]> {
        self.cumulative.last().map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub instance_fingerprint: String,
    pub seed: u64,
    pub optimal: Matching,
    pub records: Vec<StepRecord>,
    pub regret: RegretTrace,
    /// Last step's matching; `None` only if that step failed in heuristic mode.
    pub final_matching: Option<Matching>,
}

impl RunResult {
    pub fn solver_summary(&self) -> SolverSummary {
        let mut s = SolverSummary::default();
        for r in &self.records {
            s.steps += 1;
            s.nodes += r.nodes as u64;
            s.fallbacks += r.fell_back as u64;
            match r.status {
                SolveStatus::Optimal => s.optimal_steps += 1,
                SolveStatus::Heuristic => s.heuristic_steps += 1,
                SolveStatus::Infeasible => s.failed_steps += 1,
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SolverSummary {
    pub steps: u64,
    pub nodes: u64,
    pub optimal_steps: u64,
    pub heuristic_steps: u64,
    pub failed_steps: u64,
    pub fallbacks: u64,
}

impl SolverSummary {
    pub fn merge(&mut self, other: &SolverSummary) {
        self.steps += other.steps;
        self.nodes += other.nodes;
        self.optimal_steps += other.optimal_steps;
        self.heuristic_steps += other.heuristic_steps;
        self.failed_steps += other.failed_steps;
        self.fallbacks += other.fallbacks;
    }
}

/// Solves, retrying with the heuristic when exact search hits its node limit.
fn solve_with_fallback(
    options: &SolverOptions,
    step: u64,
    mut solve: impl FnMut(&SolverOptions) -> Result<Matching, SolverError>,
) -> Result<Matching, SimError> {
    match solve(options) {
        Ok(m) => Ok(m),
        Err(SolverError::NodeLimitExceeded { limit, .. }) if options.mode == SolverMode::Exact => {
            warn!("step {step}: exact search exceeded {limit} nodes, falling back to heuristic");
            let heuristic = SolverOptions { mode: SolverMode::Heuristic, ..*options };
            let mut m = solve(&heuristic).map_err(|source| SimError::Solver { step, source })?;
            m.stats.fell_back = true;
            Ok(m)
        }
        Err(source) => Err(SimError::Solver { step, source }),
    }
}

/// Hindsight baseline: the combined-utility optimum on the true utilities.
pub fn optimal_baseline(
    instance: &MarketInstance,
    weights: &ObjectiveWeights,
    options: &SolverOptions,
) -> Result<Matching, SimError> {
    let m = solve_with_fallback(options, 0, |o| solver::solve_optimal_combined(instance, weights, o))?;
    if m.status == SolveStatus::Infeasible {
        return Err(SimError::Infeasible { step: 0, uncoverable: m.uncoverable.unwrap_or_default() });
    }
    Ok(m)
}

pub fn run_simulation(
    instance: &MarketInstance,
    weights: &ObjectiveWeights,
    reward_model: &RewardModel,
    horizon: u64,
    options: &SimOptions,
    seed: u64,
) -> Result<RunResult, SimError> {
    let optimal = optimal_baseline(instance, weights, &options.solver)?;
    run_simulation_with_baseline(instance, weights, reward_model, horizon, options, seed, optimal)
}

/// As [`run_simulation`] with a baseline computed by the caller, so repeated
/// runs on one instance solve it once.
pub fn run_simulation_with_baseline(
    instance: &MarketInstance,
    weights: &ObjectiveWeights,
    reward_model: &RewardModel,
    horizon: u64,
    options: &SimOptions,
    seed: u64,
    optimal: Matching,
) -> Result<RunResult, SimError> {
    if horizon == 0 {
        return Err(SimError::InvalidHorizon);
    }
    reward_model.validate()?;
    let n = instance.num_lenders;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = bandit::init_state(instance);
    let mut records = Vec::with_capacity(horizon as usize);
    let mut hint: Option<BinaryMatrix> = None;
    let mut pool = solver::CutPool::default();
    let mut final_matching = None;
    let prior = options.initial == InitialIndex::Prior;

    for t in 1..=horizon {
        state.advance();
        let cu = state.current_utilities(horizon, prior);
        let solved = solve_with_fallback(&options.solver, t, |o| {
            solver::solve_matching_pooled(instance, weights, Some(&cu), o, hint.as_ref(), &mut pool)
        });
        let m = match solved {
            Ok(m) if m.status != SolveStatus::Infeasible => m,
            Ok(m) if options.solver.mode == SolverMode::Exact => {
                return Err(SimError::Infeasible { step: t, uncoverable: m.uncoverable.unwrap_or_default() });
            }
            Err(e) if options.solver.mode == SolverMode::Exact => return Err(e),
            failed => {
                warn!("step {t}: heuristic found no covering assignment ({:?}); nobody is matched", failed.err());
                records.push(StepRecord {
                    t,
                    lender_match: vec![None; n],
                    rewards: vec![0.0; n],
                    status: SolveStatus::Infeasible,
                    nodes: 0,
                    fell_back: false,
                });
                final_matching = None;
                continue;
            }
        };
        let mut rewards = vec![0.0; n];
        for (l, b) in m.lender_match.iter().enumerate() {
            if let Some(b) = *b {
                rewards[l] = bandit::sample_reward(reward_model, instance.borrower_utility[b][l], &mut rng);
                state.update_on_match(l, b, rewards[l])?;
            }
        }
        debug!("step {t}: nodes {} objective {}", m.stats.nodes, m.objective);
        records.push(StepRecord {
            t,
            lender_match: m.lender_match.clone(),
            rewards,
            status: m.status,
            nodes: m.stats.nodes,
            fell_back: m.stats.fell_back,
        });
        hint = Some(m.assignment.clone());
        final_matching = Some(m);
    }

    let regret = cumulative_regret(&records, &optimal, instance, options.regret_mode)?;
    Ok(RunResult {
        instance_fingerprint: instance.fingerprint(),
        seed,
        optimal,
        records,
        regret,
        final_matching,
    })
}

/// Per-lender regret of the recorded steps against `optimal`. The baseline
/// term is always `u_l(b_opt)` (zero if the lender is unmatched there);
/// `mode` picks the subtracted term, which is zero on unmatched steps.
pub fn cumulative_regret(
    records: &[StepRecord],
    optimal: &Matching,
    instance: &MarketInstance,
    mode: RegretMode,
) -> Result<RegretTrace, SimError> {
    let n = instance.num_lenders;
    if optimal.lender_match.len() != n {
        return Err(SimError::ShapeMismatch("optimal matching has the wrong number of lenders".into()));
    }
    let baseline: Vec<f64> = (0..n)
        .map(|l| optimal.lender_match[l].map_or(0.0, |b| instance.lender_utility[l][b]))
        .collect();
    let mut increments = Vec::with_capacity(records.len());
    let mut cumulative: Vec<Vec<f64>> = Vec::with_capacity(records.len());
    for r in records {
        if r.lender_match.len() != n || r.rewards.len() != n {
            return Err(SimError::ShapeMismatch(format!("step {} has the wrong number of lenders", r.t)));
        }
        let inc: Vec<f64> = (0..n)
            .map(|l| {
                let got = match (r.lender_match[l], mode) {
                    (None, _) => 0.0,
                    (Some(b), RegretMode::ExpectedLenderUtility) => instance.lender_utility[l][b],
                    (Some(_), RegretMode::RealizedReward) => r.rewards[l],
                    (Some(b), RegretMode::ExpectedBorrowerUtility) => instance.borrower_utility[b][l],
                };
                baseline[l] - got
            })
            .collect();
        let cum = match cumulative.last() {
            Some(prev) => prev.iter().zip(&inc).map(|(p, i)| p + i).collect(),
            None => inc.clone(),
        };
        increments.push(inc);
        cumulative.push(cum);
    }
    Ok(RegretTrace { increments, cumulative })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateResult {
    pub runs: usize,
    pub horizon: usize,
    pub num_lenders: usize,
    /// `[t - 1][l]` mean cumulative regret across runs.
    pub mean: Vec<Vec<f64>>,
    /// Sample standard deviation (zero for a single run).
    pub std: Vec<Vec<f64>>,
    pub terminal_mean: Vec<f64>,
    pub terminal_std: Vec<f64>,
    /// Least-squares slope of the last quarter of each lender's mean trace.
    pub terminal_slope: Vec<f64>,
    pub solver: SolverSummary,
}

/// Streaming reduction over runs, so long experiments never hold every
/// trace at once. Means are plain sums divided by the run count; variances
/// use Welford's update.
#[derive(Debug, Clone)]
pub struct AggregateAccumulator {
    horizon: usize,
    num_lenders: usize,
    runs: usize,
    sum: Vec<Vec<f64>>,
    welford_mean: Vec<Vec<f64>>,
    m2: Vec<Vec<f64>>,
    solver: SolverSummary,
}

impl AggregateAccumulator {
    pub fn new(horizon: usize, num_lenders: usize) -> Self {
        let zeros = vec![vec![0.0; num_lenders]; horizon];
        Self {
            horizon,
            num_lenders,
            runs: 0,
            sum: zeros.clone(),
            welford_mean: zeros.clone(),
            m2: zeros,
            solver: SolverSummary::default(),
        }
    }

    pub fn push(&mut self, result: &RunResult) -> Result<(), SimError> {
        self.push_trace(&result.regret.cumulative, &result.solver_summary())
    }

    pub fn push_trace(&mut self, cumulative: &[Vec<f64>], solver: &SolverSummary) -> Result<(), SimError> {
        if cumulative.len() != self.horizon || cumulative.iter().any(|r| r.len() != self.num_lenders) {
            return Err(SimError::ShapeMismatch(format!(
                "expected {} steps x {} lenders",
                self.horizon, self.num_lenders
            )));
        }
        self.runs += 1;
        let k = self.runs as f64;
        for (t, row) in cumulative.iter().enumerate() {
            for (l, &v) in row.iter().enumerate() {
                self.sum[t][l] += v;
                let delta = v - self.welford_mean[t][l];
                self.welford_mean[t][l] += delta / k;
                self.m2[t][l] += delta * (v - self.welford_mean[t][l]);
            }
        }
        self.solver.merge(solver);
        Ok(())
    }

    pub fn finish(self) -> Result<AggregateResult, SimError> {
        if self.runs == 0 {
            return Err(SimError::ShapeMismatch("no runs to aggregate".into()));
        }
        let runs = self.runs as f64;
        let mean: Vec<Vec<f64>> = self.sum.iter().map(|r| r.iter().map(|s| s / runs).collect()).collect();
        let std: Vec<Vec<f64>> = self
            .m2
            .iter()
            .map(|r| {
                r.iter()
                    .map(|m2| if self.runs > 1 { (m2.max(0.0) / (runs - 1.0)).sqrt() } else { 0.0 })
                    .collect()
            })
            .collect();
        let empty = vec![0.0; self.num_lenders];
        let terminal_mean = mean.last().unwrap_or(&empty).clone();
        let terminal_std = std.last().unwrap_or(&empty).clone();
        let terminal_slope = (0..self.num_lenders)
            .map(|l| tail_slope(&mean.iter().map(|r| r[l]).collect::<Vec<_>>()))
            .collect();
        Ok(AggregateResult {
            runs: self.runs,
            horizon: self.horizon,
            num_lenders: self.num_lenders,
            mean,
            std,
            terminal_mean,
            terminal_std,
            terminal_slope,
            solver: self.solver,
        })
    }
}

pub fn aggregate_runs(results: &[RunResult]) -> Result<AggregateResult, SimError> {
    let first = results.first().ok_or_else(|| SimError::ShapeMismatch("no runs to aggregate".into()))?;
    let n = first.records.first().map_or(0, |r| r.lender_match.len());
    let mut acc = AggregateAccumulator::new(first.regret.horizon(), n);
    for r in results {
        acc.push(r)?;
    }
    acc.finish()
}

/// Least-squares slope of `series[i]` against `i` over the last quarter of
/// the series (at least two points). Zero for series shorter than two.
pub fn tail_slope(series: &[f64]) -> f64 {
    let len = series.len();
    if len < 2 {
        return 0.0;
    }
    let m = len.div_ceil(4).max(2);
    let tail = &series[len - m..];
    let xs = (0..m).map(|i| i as f64);
    let x_mean = (m - 1) as f64 / 2.0;
    let y_mean = tail.iter().sum::<f64>() / m as f64;
    let (num, den) = xs.zip(tail).fold((0.0, 0.0), |(num, den), (x, y)| {
        (num + (x - x_mean) * (y - y_mean), den + (x - x_mean) * (x - x_mean))
    });
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_instance, GenerationConfig};
    use crate::oracle::{enumerate_optimal_with, EnumerationBudget};
    use crate::solver::solve_optimal_combined;

    fn two_by_four() -> MarketInstance {
        MarketInstance {
            num_borrowers: 2,
            num_lenders: 4,
            capacity: vec![3.0, 3.0],
            budget: vec![3.0; 4],
            lender_utility: vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.1, 0.9], vec![0.2, 0.8]],
            borrower_utility: vec![vec![0.9, 0.8, 0.2, 0.1], vec![0.1, 0.2, 0.9, 0.8]],
        }
    }

    fn record(t: u64, lender_match: Vec<Option<usize>>, rewards: Vec<f64>) -> StepRecord {
        StepRecord { t, lender_match, rewards, status: SolveStatus::Optimal, nodes: 0, fell_back: false }
    }

    fn fixed_records(t_max: u64, lender_match: Vec<Option<usize>>) -> Vec<StepRecord> {
        let n = lender_match.len();
        (1..=t_max).map(|t| record(t, lender_match.clone(), vec![0.0; n])).collect()
    }

    #[test]
    fn regret_is_zero_at_optimum() {
        let inst = two_by_four();
        let opt = solve_optimal_combined(&inst, &ObjectiveWeights::default(), &SolverOptions::default()).unwrap();
        let trace = cumulative_regret(&fixed_records(20, opt.lender_match.clone()), &opt, &inst, RegretMode::default())
            .unwrap();
        assert!(trace.cumulative.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn regret_closed_form() {
        // Lender 0 prefers borrower 0 at 0.8 but is stuck at 0.3 (and the
        // reverse case gives negative regret).
        let inst = MarketInstance {
            num_borrowers: 2,
            num_lenders: 1,
            capacity: vec![1.0, 1.0],
            budget: vec![1.0],
            lender_utility: vec![vec![0.8, 0.3]],
            borrower_utility: vec![vec![0.5], vec![0.5]],
        };
        let opt = |b| crate::solver::Matching {
            lender_match: vec![Some(b)],
            ..solve_optimal_combined(&inst, &ObjectiveWeights::default(), &SolverOptions::default()).unwrap()
        };
        let trace = cumulative_regret(&fixed_records(10, vec![Some(1)]), &opt(0), &inst, RegretMode::default()).unwrap();
        for (t, row) in trace.cumulative.iter().enumerate() {
            assert!((row[0] - 0.5 * (t + 1) as f64).abs() < 1e-12);
        }
        assert!((trace.cumulative[9][0] - 5.0).abs() < 1e-12);

        let neg = cumulative_regret(&fixed_records(10, vec![Some(0)]), &opt(1), &inst, RegretMode::default()).unwrap();
        assert!((neg.cumulative[9][0] + 5.0).abs() < 1e-12);
    }

    #[test]
    fn regret_modes_and_unmatched() {
        let inst = two_by_four();
        let opt = solve_optimal_combined(&inst, &ObjectiveWeights::default(), &SolverOptions::default()).unwrap();
        let recs = vec![
            record(1, vec![Some(1), Some(0), None, Some(1)], vec![0.25, 0.5, 0.0, 0.75]),
        ];
        let e = cumulative_regret(&recs, &opt, &inst, RegretMode::ExpectedLenderUtility).unwrap();
        assert_eq!(e.increments[0], vec![0.9 - 0.1, 0.0, 0.9, 0.0]);
        let r = cumulative_regret(&recs, &opt, &inst, RegretMode::RealizedReward).unwrap();
        assert_eq!(r.increments[0], vec![0.9 - 0.25, 0.8 - 0.5, 0.9, 0.8 - 0.75]);
        let b = cumulative_regret(&recs, &opt, &inst, RegretMode::ExpectedBorrowerUtility).unwrap();
        assert_eq!(b.increments[0], vec![0.9 - 0.1, 0.8 - 0.8, 0.9, 0.8 - 0.8]);
        assert!(matches!("bogus".parse::<RegretMode>(), Err(SimError::ModeUnknown(_))));
        assert_eq!("realized_reward".parse::<RegretMode>().unwrap(), RegretMode::RealizedReward);
    }

    #[test]
    fn single_pair_has_zero_regret() {
        let inst = MarketInstance {
            num_borrowers: 1,
            num_lenders: 1,
            capacity: vec![1.0],
            budget: vec![2.0],
            lender_utility: vec![vec![0.6]],
            borrower_utility: vec![vec![0.4]],
        };
        let r = run_simulation(
            &inst,
            &ObjectiveWeights::default(),
            &RewardModel::deterministic(),
            25,
            &SimOptions::default(),
            1,
        )
        .unwrap();
        assert_eq!(r.records.len(), 25);
        assert!(r.regret.cumulative.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn warm_start_with_aligned_optimum_has_zero_first_step_regret() {
        let inst = two_by_four();
        let opts = SimOptions { initial: InitialIndex::Prior, ..SimOptions::default() };
        let r = run_simulation(&inst, &ObjectiveWeights::default(), &RewardModel::deterministic(), 1, &opts, 0)
            .unwrap();
        assert_eq!(r.regret.cumulative[0], vec![0.0; 4]);
    }

    #[test]
    fn invalid_horizon_and_infeasible() {
        let inst = two_by_four();
        let err = run_simulation(&inst, &ObjectiveWeights::default(), &RewardModel::default(), 0, &SimOptions::default(), 0);
        assert!(matches!(err, Err(SimError::InvalidHorizon)));
        let bad = MarketInstance {
            num_borrowers: 2,
            num_lenders: 3,
            capacity: vec![3.0, 3.0],
            budget: vec![2.0; 3],
            lender_utility: vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.1, 0.9]],
            borrower_utility: vec![vec![0.9, 0.8, 0.2], vec![0.1, 0.2, 0.9]],
        };
        let err = run_simulation(&bad, &ObjectiveWeights::default(), &RewardModel::default(), 3, &SimOptions::default(), 0);
        assert!(matches!(err, Err(SimError::Infeasible { step: 0, .. })));
    }

    #[test]
    fn counts_match_history_and_runs_repeat() {
        let inst = generate_instance(&GenerationConfig {
            num_borrowers: 2,
            num_lenders: 5,
            capacity_range: (2.0, 6.0),
            budget_range: (1.0, 4.0),
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let w = ObjectiveWeights::default();
        let run = || run_simulation(&inst, &w, &RewardModel::default(), 40, &SimOptions::default(), 11).unwrap();
        let a = run();
        assert_eq!(a, run());
        let mut counts = [0u64; 5];
        for r in &a.records {
            for (l, b) in r.lender_match.iter().enumerate() {
                counts[l] += b.is_some() as u64;
            }
        }
        assert!(counts.iter().all(|&c| c <= 40));
        for (t, (inc, cum)) in a.regret.increments.iter().zip(&a.regret.cumulative).enumerate() {
            for l in 0..5 {
                let prev = if t == 0 { 0.0 } else { a.regret.cumulative[t - 1][l] };
                assert_eq!(if t == 0 { inc[l] } else { prev + inc[l] }, cum[l]);
            }
        }
    }

    /// The same loop written independently, with the enumeration oracle as
    /// the per-step matcher and its own mean and index bookkeeping.
    #[test]
    fn matches_oracle_driven_reference_loop() {
        let inst = two_by_four();
        let w = ObjectiveWeights::default();
        let horizon = 50u64;
        let got = run_simulation(&inst, &w, &RewardModel::deterministic(), horizon, &SimOptions::default(), 0).unwrap();

        let (n, k) = (4, 2);
        let mut sums = vec![vec![0.0; k]; n];
        let mut counts = vec![vec![0u64; k]; n];
        let opt = crate::oracle::enumerate_optimal(
            &inst,
            &w,
            crate::oracle::UtilitySelector::Combined,
            EnumerationBudget::default(),
        )
        .unwrap();
        let mut cum = vec![0.0; n];
        for t in 1..=horizon {
            let mut cu = vec![vec![0.0; k]; n];
            let mut finite_max = f64::NEG_INFINITY;
            for l in 0..n {
                for b in 0..k {
                    if counts[l][b] > 0 {
                        let mean = (inst.lender_utility[l][b] + sums[l][b]) / (1.0 + counts[l][b] as f64);
                        cu[l][b] = mean + (1.5 * (t as f64).ln() / counts[l][b] as f64).sqrt();
                        finite_max = finite_max.max(cu[l][b]);
                    }
                }
            }
            let big = (2.0 + (1.5 * (horizon as f64).ln()).sqrt()).max(finite_max + 1.0);
            for l in 0..n {
                // Two borrowers: the lower one is pushed strictly below the
                // other, ties resolving toward borrower 0.
                let mut v: Vec<f64> = (0..k).map(|b| if counts[l][b] == 0 { big } else { cu[l][b] }).collect();
                let (hi, lo) = if v[0] >= v[1] { (0, 1) } else { (1, 0) };
                v[lo] = v[lo].min(v[hi] - 1e-6 * v[hi].abs().max(1.0));
                cu[l] = v;
            }
            let m = enumerate_optimal_with(&inst, &w, &cu, &cu, EnumerationBudget::default()).unwrap();
            assert_eq!(m.lender_match, got.records[t as usize - 1].lender_match, "step {t}");
            for l in 0..n {
                let gain = match m.lender_match[l] {
                    Some(b) => {
                        sums[l][b] += inst.borrower_utility[b][l];
                        counts[l][b] += 1;
                        inst.lender_utility[l][b]
                    }
                    None => 0.0,
                };
                let best = opt.lender_match[l].map_or(0.0, |b| inst.lender_utility[l][b]);
                cum[l] += best - gain;
                assert!((cum[l] - got.regret.cumulative[t as usize - 1][l]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_examples() {
        let inst = two_by_four();
        let w = ObjectiveWeights::default();
        let runs: Vec<RunResult> = (0..4)
            .map(|s| run_simulation(&inst, &w, &RewardModel::default(), 30, &SimOptions::default(), s).unwrap())
            .collect();
        let one = aggregate_runs(&runs[..1]).unwrap();
        assert_eq!(one.mean, runs[0].regret.cumulative);
        assert!(one.std.iter().flatten().all(|&v| v == 0.0));

        let same = aggregate_runs(&[runs[0].clone(), runs[0].clone()]).unwrap();
        assert!(same.std.iter().flatten().all(|&v| v == 0.0));

        let agg = aggregate_runs(&runs).unwrap();
        for t in 0..30 {
            for l in 0..4 {
                let xs: Vec<f64> = runs.iter().map(|r| r.regret.cumulative[t][l]).collect();
                let mean = xs.iter().sum::<f64>() / 4.0;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
                assert!((agg.mean[t][l] - mean).abs() < 1e-12);
                assert!((agg.std[t][l] - var.sqrt()).abs() < 1e-9);
            }
        }
        assert_eq!(agg.solver.steps, 120);

        let mut short = runs[1].clone();
        short.regret.cumulative.pop();
        assert!(matches!(aggregate_runs(&[runs[0].clone(), short]), Err(SimError::ShapeMismatch(_))));
    }

    #[test]
    fn tail_slope_of_lines() {
        let line: Vec<f64> = (0..100).map(|i| 3.0 - 0.25 * i as f64).collect();
        assert!((tail_slope(&line) + 0.25).abs() < 1e-12);
        assert_eq!(tail_slope(&[1.0]), 0.0);
        assert!((tail_slope(&[0.0, 2.0]) - 2.0).abs() < 1e-12);
    }
}
