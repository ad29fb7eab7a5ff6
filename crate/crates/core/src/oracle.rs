//! Exhaustive ground truth for small markets.
//!
//! Every map from lenders to `{borrowers} ∪ {unmatched}` is visited through
//! a base-`(K+1)` counter, so memory stays `O(N)`. Stability and objective
//! are evaluated here from preference lists, independently of the solver.

use crate::model::{rank_descending, MarketInstance};
use crate::solver::{BinaryMatrix, Matching, ObjectiveWeights, SolveStats, SolveStatus};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("enumeration needs {required} assignments but the budget is {budget}")]
    BudgetExceeded { required: u128, budget: u64 },
    #[error("enumeration budget must be positive")]
    InvalidBudget,
    #[error("utility rows must be strictly ordered and lenders x borrowers")]
    InvalidUtilities,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationBudget {
    pub max_assignments: u64,
}

impl EnumerationBudget {
    pub fn new(max_assignments: u64) -> Result<Self, OracleError> {
        if max_assignments == 0 {
            return Err(OracleError::InvalidBudget);
        }
        Ok(Self { max_assignments })
    }
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self { max_assignments: 2_000_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilitySelector {
    /// Objective uses `u_l(b)` only.
    LenderOnly,
    /// Objective uses `u_b(l) + u_l(b)`.
    Combined,
}

fn check_budget(instance: &MarketInstance, budget: EnumerationBudget) -> Result<(), OracleError> {
    if budget.max_assignments == 0 {
        return Err(OracleError::InvalidBudget);
    }
    let base = instance.num_borrowers as u128 + 1;
    let mut required: u128 = 1;
    for _ in 0..instance.num_lenders {
        required = required.saturating_mul(base);
    }
    if required > budget.max_assignments as u128 {
        return Err(OracleError::BudgetExceeded { required, budget: budget.max_assignments });
    }
    Ok(())
}

/// Advances the counter; `false` once it wraps around.
fn increment(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

struct Market<'a> {
    k: usize,
    n: usize,
    capacity: &'a [f64],
    budget: &'a [f64],
    objective: &'a [Vec<f64>],
    /// `lender_rank[l][b]`: position of `b` in lender `l`'s list.
    lender_rank: Vec<Vec<usize>>,
    borrower_rank: Vec<Vec<usize>>,
}

fn ranks(rows: &[Vec<f64>]) -> Option<Vec<Vec<usize>>> {
    rows.iter()
        .map(|row| {
            let order = rank_descending(row)?;
            let mut rank = vec![0; row.len()];
            for (pos, &i) in order.iter().enumerate() {
                rank[i] = pos;
            }
            Some(rank)
        })
        .collect()
}

impl Market<'_> {
    fn covers(&self, lm: &[usize]) -> bool {
        (0..self.k).all(|b| {
            let funded: f64 = (0..self.n).filter(|&l| lm[l] == b).map(|l| self.budget[l]).sum();
            funded >= self.capacity[b] - 1e-9 * self.capacity[b].abs().max(1.0)
        })
    }

    /// Minimal `w` for the pair: the stability inequality evaluated directly.
    fn blocks(&self, lm: &[usize], b: usize, l: usize) -> bool {
        let c = self.capacity[b];
        let x = |bb: usize, ll: usize| if lm[ll] == bb { 1.0 } else { 0.0 };
        let mut lhs = c * x(b, l);
        for lp in 0..self.n {
            if self.borrower_rank[b][lp] < self.borrower_rank[b][l] {
                lhs += c * x(b, lp);
            }
        }
        for bp in 0..self.k {
            if self.lender_rank[l][bp] < self.lender_rank[l][b] {
                lhs += self.budget[l] * x(bp, l);
            }
        }
        lhs < c
    }

    fn blocking_count(&self, lm: &[usize]) -> usize {
        let mut count = 0;
        for b in 0..self.k {
            for l in 0..self.n {
                if self.blocks(lm, b, l) {
                    count += 1;
                }
            }
        }
        count
    }

    fn value(&self, lm: &[usize], weights: &ObjectiveWeights) -> f64 {
        let mut gain = 0.0;
        for b in 0..self.k {
            for l in 0..self.n {
                if lm[l] == b {
                    gain += self.objective[l][b];
                }
            }
        }
        weights.lambda1 * gain - weights.lambda2 * self.blocking_count(lm) as f64
    }

    fn to_matrix(&self, lm: &[usize]) -> BinaryMatrix {
        let mut x = BinaryMatrix::zeros(self.k, self.n);
        for (l, &b) in lm.iter().enumerate() {
            if b < self.k {
                x.set(b, l, true);
            }
        }
        x
    }

    fn blocking_matrix(&self, lm: &[usize]) -> BinaryMatrix {
        let mut w = BinaryMatrix::zeros(self.k, self.n);
        for b in 0..self.k {
            for l in 0..self.n {
                w.set(b, l, self.blocks(lm, b, l));
            }
        }
        w
    }
}

/// Row-major lexicographic order of the assignment matrices of two
/// lender-to-borrower maps.
fn lex_cmp(k: usize, a: &[usize], b: &[usize]) -> Ordering {
    for row in 0..k {
        for (&ai, &bi) in a.iter().zip(b) {
            let (xa, xb) = (ai == row, bi == row);
            if xa != xb {
                return if xb { Ordering::Less } else { Ordering::Greater };
            }
        }
    }
    Ordering::Equal
}

pub fn enumerate_optimal(
    instance: &MarketInstance,
    weights: &ObjectiveWeights,
    selector: UtilitySelector,
    budget: EnumerationBudget,
) -> Result<Matching, OracleError> {
    let objective = match selector {
        UtilitySelector::LenderOnly => instance.lender_utility.clone(),
        UtilitySelector::Combined => instance.combined_utility(),
    };
    enumerate_optimal_with(instance, weights, &objective, &instance.lender_utility, budget)
}

/// Enumeration with explicit objective coefficients and lender preference
/// values (both lenders × borrowers); borrower preferences come from the
/// instance.
pub fn enumerate_optimal_with(
    instance: &MarketInstance,
    weights: &ObjectiveWeights,
    objective: &[Vec<f64>],
    lender_preferences: &[Vec<f64>],
    budget: EnumerationBudget,
) -> Result<Matching, OracleError> {
    check_budget(instance, budget)?;
    let k = instance.num_borrowers;
    let n = instance.num_lenders;
    if objective.len() != n || objective.iter().any(|r| r.len() != k) || lender_preferences.len() != n {
        return Err(OracleError::InvalidUtilities);
    }
    let market = Market {
        k,
        n,
        capacity: &instance.capacity,
        budget: &instance.budget,
        objective,
        lender_rank: ranks(lender_preferences).ok_or(OracleError::InvalidUtilities)?,
        borrower_rank: ranks(&instance.borrower_utility).ok_or(OracleError::InvalidUtilities)?,
    };

    let mut digits = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        if market.covers(&digits) {
            let v = market.value(&digits, weights);
            let better = match &best {
                None => true,
                Some((bv, bx)) => {
                    let tol = 1e-9 * bv.abs().max(1.0);
                    v > bv + tol || ((v - bv).abs() <= tol && lex_cmp(k, &digits, bx) == Ordering::Less)
                }
            };
            if better {
                best = Some((v, digits.clone()));
            }
        }
        if !increment(&mut digits, k + 1) {
            break;
        }
    }

    Ok(match best {
        Some((objective, lm)) => {
            let assignment = market.to_matrix(&lm);
            let blocking = market.blocking_matrix(&lm);
            Matching {
                lender_match: assignment.lender_match(),
                borrower_match: assignment.borrower_match(),
                blocking_count: blocking.count_ones(),
                assignment,
                blocking,
                objective,
                status: SolveStatus::Optimal,
                uncoverable: None,
                stats: SolveStats::default(),
            }
        }
        None => {
            let empty = vec![k; n];
            let blocking = market.blocking_matrix(&empty);
            Matching {
                assignment: market.to_matrix(&empty),
                blocking_count: blocking.count_ones(),
                blocking,
                objective: f64::NEG_INFINITY,
                lender_match: vec![None; n],
                borrower_match: vec![Vec::new(); k],
                status: SolveStatus::Infeasible,
                uncoverable: Some((0..k).collect()),
                stats: SolveStats::default(),
            }
        }
    })
}

/// Number of assignments with every lender matched at most once and every
/// borrower covered.
pub fn count_feasible(instance: &MarketInstance, budget: EnumerationBudget) -> Result<u64, OracleError> {
    check_budget(instance, budget)?;
    let k = instance.num_borrowers;
    let n = instance.num_lenders;
    let mut digits = vec![0usize; n];
    let mut count = 0;
    loop {
        let covers = (0..k).all(|b| {
            let funded: f64 = (0..n).filter(|&l| digits[l] == b).map(|l| instance.budget[l]).sum();
            funded >= instance.capacity[b] - 1e-9 * instance.capacity[b].abs().max(1.0)
        });
        if covers {
            count += 1;
        }
        if !increment(&mut digits, k + 1) {
            break;
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn market(capacity: Vec<f64>, budget: Vec<f64>) -> MarketInstance {
        let k = capacity.len();
        let n = budget.len();
        MarketInstance {
            num_borrowers: k,
            num_lenders: n,
            lender_utility: (0..n)
                .map(|l| (0..k).map(|b| 0.1 + 0.8 * ((l * 7 + b * 3) % 10) as f64 / 10.0 + b as f64 * 1e-3).collect())
                .collect(),
            borrower_utility: (0..k)
                .map(|b| (0..n).map(|l| 0.05 + 0.9 * ((b * 5 + l * 3) % 11) as f64 / 11.0 + l as f64 * 1e-4).collect())
                .collect(),
            capacity,
            budget,
        }
    }

    #[test]
    fn single_pair() {
        let inst = market(vec![5.0], vec![5.0]);
        let m = enumerate_optimal(&inst, &ObjectiveWeights::default(), UtilitySelector::LenderOnly, EnumerationBudget::default()).unwrap();
        assert_eq!(m.lender_match, vec![Some(0)]);
        assert_eq!(count_feasible(&inst, EnumerationBudget::default()).unwrap(), 1);
    }

    #[test]
    fn infeasible_partition() {
        let inst = market(vec![3.0, 3.0], vec![2.0, 2.0, 2.0]);
        let m = enumerate_optimal(&inst, &ObjectiveWeights::default(), UtilitySelector::LenderOnly, EnumerationBudget::default()).unwrap();
        assert_eq!(m.status, SolveStatus::Infeasible);
        assert_eq!(count_feasible(&inst, EnumerationBudget::default()).unwrap(), 0);
    }

    #[test]
    fn feasible_counts() {
        assert_eq!(count_feasible(&market(vec![7.0], vec![3.0, 3.0]), EnumerationBudget::default()).unwrap(), 0);
        assert_eq!(count_feasible(&market(vec![2.0], vec![3.0, 3.0]), EnumerationBudget::default()).unwrap(), 3);
    }

    #[test]
    fn budget_is_enforced() {
        let inst = market(vec![1.0, 1.0], vec![1.0; 5]);
        assert_eq!(
            count_feasible(&inst, EnumerationBudget { max_assignments: 100 }),
            Err(OracleError::BudgetExceeded { required: 243, budget: 100 })
        );
        assert_eq!(EnumerationBudget::new(0), Err(OracleError::InvalidBudget));
    }

    #[test]
    fn lex_order_prefers_zero_first() {
        // k = 2; maps over 2 lenders, value 2 = unmatched.
        assert_eq!(lex_cmp(2, &[1, 0], &[0, 1]), Ordering::Less);
        assert_eq!(lex_cmp(2, &[2, 2], &[0, 2]), Ordering::Less);
        assert_eq!(lex_cmp(2, &[0, 1], &[0, 1]), Ordering::Equal);
    }

    #[test]
    fn count_is_invariant_under_relabeling_equal_budgets() {
        let a = market(vec![3.0, 2.0], vec![2.0, 1.0, 2.0, 1.0]);
        let mut b = a.clone();
        b.budget.swap(0, 2);
        b.budget.swap(1, 3);
        let budget = EnumerationBudget::default();
        assert_eq!(count_feasible(&a, budget), count_feasible(&b, budget));
    }
}
