use super::{BinaryMatrix, Matching, ObjectiveWeights, SolveStats, SolveStatus, SolverError};
use crate::model::MarketInstance;

/// A fully specified matching program: amounts, objective coefficients and
/// the two preference orders that define blocking pairs.
#[derive(Debug, Clone)]
pub(crate) struct Problem<'a> {
    pub k: usize,
    pub n: usize,
    pub capacity: &'a [f64],
    pub budget: &'a [f64],
    /// Objective coefficients, lenders × borrowers.
    pub utility: Vec<Vec<f64>>,
    /// Lender-side preference values, lenders × borrowers.
    pub lender_pref: &'a [Vec<f64>],
    /// Borrower-side preference values, borrowers × lenders.
    pub borrower_pref: &'a [Vec<f64>],
    pub weights: ObjectiveWeights,
    /// `lender_order[l]`: borrowers by descending preference.
    pub lender_order: Vec<Vec<usize>>,
    /// `borrower_order[b]`: lenders by descending preference.
    pub borrower_order: Vec<Vec<usize>>,
}

impl<'a> Problem<'a> {
    pub fn new(
        instance: &'a MarketInstance,
        utility: Vec<Vec<f64>>,
        lender_pref: &'a [Vec<f64>],
        weights: ObjectiveWeights,
    ) -> Result<Self, SolverError> {
        weights.validate()?;
        let k = instance.num_borrowers;
        let n = instance.num_lenders;
        if instance.capacity.len() != k
            || instance.budget.len() != n
            || instance.borrower_utility.len() != k
            || instance.borrower_utility.iter().any(|r| r.len() != n)
            || utility.len() != n
            || utility.iter().any(|r| r.len() != k)
        {
            return Err(SolverError::DimensionMismatch("inconsistent market dimensions".into()));
        }
        let order = |row: &[f64]| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx
        };
        Ok(Self {
            k,
            n,
            capacity: &instance.capacity,
            budget: &instance.budget,
            lender_order: lender_pref.iter().map(|r| order(r)).collect(),
            borrower_order: instance.borrower_utility.iter().map(|r| order(r)).collect(),
            utility,
            lender_pref,
            borrower_pref: &instance.borrower_utility,
            weights,
        })
    }

    pub fn var(&self, b: usize, l: usize) -> usize {
        b * self.n + l
    }

    pub fn covers(&self, x: &BinaryMatrix) -> bool {
        (0..self.k).all(|b| covered(self.capacity[b], self.funded(x, b)))
    }

    pub fn funded(&self, x: &BinaryMatrix, b: usize) -> f64 {
        (0..self.n).filter(|&l| x.get(b, l)).map(|l| self.budget[l]).sum()
    }

    pub fn blocking(&self, x: &BinaryMatrix) -> BinaryMatrix {
        blocking_matrix(self.capacity, self.budget, self.lender_pref, self.borrower_pref, x)
    }

    /// Full objective with `w` derived from `x`.
    pub fn evaluate(&self, x: &BinaryMatrix) -> f64 {
        objective(x, &self.blocking(x), &self.weights, &self.utility)
    }

    pub fn matching(&self, x: BinaryMatrix, status: SolveStatus, stats: SolveStats) -> Matching {
        let blocking = self.blocking(&x);
        let blocking_count = blocking.count_ones();
        let objective = objective(&x, &blocking, &self.weights, &self.utility);
        Matching {
            lender_match: x.lender_match(),
            borrower_match: x.borrower_match(),
            assignment: x,
            blocking,
            blocking_count,
            objective,
            status,
            uncoverable: None,
            stats,
        }
    }

    pub fn infeasible(&self, uncoverable: Vec<usize>, stats: SolveStats) -> Matching {
        let x = BinaryMatrix::zeros(self.k, self.n);
        let blocking = self.blocking(&x);
        Matching {
            lender_match: vec![None; self.n],
            borrower_match: vec![Vec::new(); self.k],
            blocking_count: blocking.count_ones(),
            assignment: x,
            blocking,
            objective: f64::NEG_INFINITY,
            status: SolveStatus::Infeasible,
            uncoverable: Some(uncoverable),
            stats,
        }
    }
}

/// Coverage test shared by every solver path. The slack absorbs rounding in
/// sums of real-valued budgets.
pub(crate) fn covered(capacity: f64, funded: f64) -> bool {
    funded >= capacity - 1e-9 * capacity.abs().max(1.0)
}

pub(crate) fn blocking_matrix(
    capacity: &[f64],
    budget: &[f64],
    lender_pref: &[Vec<f64>],
    borrower_pref: &[Vec<f64>],
    x: &BinaryMatrix,
) -> BinaryMatrix {
    let k = x.rows();
    let n = x.cols();
    let mut w = BinaryMatrix::zeros(k, n);
    for b in 0..k {
        let c = capacity[b];
        for l in 0..n {
            let preferred_lenders = (0..n)
                .filter(|&lp| borrower_pref[b][lp] > borrower_pref[b][l] && x.get(b, lp))
                .count() as f64;
            let preferred_borrowers = (0..k)
                .filter(|&bp| lender_pref[l][bp] > lender_pref[l][b] && x.get(bp, l))
                .count() as f64;
            let own = if x.get(b, l) { 1.0 } else { 0.0 };
            let lhs = c * own + c * preferred_lenders + budget[l] * preferred_borrowers;
            w.set(b, l, lhs < c);
        }
    }
    w
}

pub(crate) fn objective(
    x: &BinaryMatrix,
    w: &BinaryMatrix,
    weights: &ObjectiveWeights,
    utility: &[Vec<f64>],
) -> f64 {
    let mut gain = 0.0;
    for b in 0..x.rows() {
        for l in 0..x.cols() {
            if x.get(b, l) {
                gain += utility[l][b];
            }
        }
    }
    weights.lambda1 * gain - weights.lambda2 * w.count_ones() as f64
}
