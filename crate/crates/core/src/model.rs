//! Market model: borrowers with requested amounts, lenders with budgets, and
//! the two utility matrices that induce strict preference orders.
//!
//! Indexing convention used throughout the crate: `lender_utility[l][b]` is
//! lender `l`'s utility for borrower `b`, `borrower_utility[b][l]` is borrower
//! `b`'s utility for lender `l`. All indices are zero-based.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("aggregate feasibility (sum of capacities <= sum of budgets) not met after {attempts} attempts")]
    AttemptCapExceeded { attempts: usize },
    #[error("tied utilities in {side} row {row}")]
    TiedUtilities { side: Side, row: usize },
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
}

/// Which side of the market a row of utilities belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Lender,
    Borrower,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Lender => f.write_str("lender"),
            Side::Borrower => f.write_str("borrower"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketInstance {
    pub num_borrowers: usize,
    pub num_lenders: usize,
    /// Requested amount `c_b` per borrower.
    pub capacity: Vec<f64>,
    /// Investable amount `q_l` per lender.
    pub budget: Vec<f64>,
    /// `lender_utility[l][b] = u_l(b)`.
    pub lender_utility: Vec<Vec<f64>>,
    /// `borrower_utility[b][l] = u_b(l)`.
    pub borrower_utility: Vec<Vec<f64>>,
}

impl MarketInstance {
    pub fn capacity_sum(&self) -> f64 {
        self.capacity.iter().sum()
    }

    pub fn budget_sum(&self) -> f64 {
        self.budget.iter().sum()
    }

    /// Combined utility `u_b(l) + u_l(b)`, laid out lender-major like
    /// `lender_utility`.
    pub fn combined_utility(&self) -> Vec<Vec<f64>> {
        (0..self.num_lenders)
            .map(|l| {
                (0..self.num_borrowers)
                    .map(|b| self.borrower_utility[b][l] + self.lender_utility[l][b])
                    .collect()
            })
            .collect()
    }

    /// Stable content hash (hex SHA-256 over the little-endian bit patterns).
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.num_borrowers as u64).to_le_bytes());
        hasher.update((self.num_lenders as u64).to_le_bytes());
        let rows = std::iter::once(&self.capacity)
            .chain(std::iter::once(&self.budget))
            .chain(self.lender_utility.iter())
            .chain(self.borrower_utility.iter());
        for row in rows {
            for v in row {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .take(16)
            .map(|byte| format!("{byte:02x}"))
            .collect()
    }
}

/// Per-agent preference lists, most preferred first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceLists {
    /// `lender[l]` lists borrower indices by descending `u_l(b)`.
    pub lender: Vec<Vec<usize>>,
    /// `borrower[b]` lists lender indices by descending `u_b(l)`.
    pub borrower: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub num_borrowers: usize,
    pub num_lenders: usize,
    pub capacity_range: (f64, f64),
    pub budget_range: (f64, f64),
    pub utility_range: (f64, f64),
    /// Sample capacities and budgets as integers in the closed range.
    pub integer_amounts: bool,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_borrowers: 20,
            num_lenders: 60,
            capacity_range: (5.0, 40.0),
            budget_range: (1.0, 10.0),
            utility_range: (0.0, 1.0),
            integer_amounts: false,
            max_attempts: 10_000,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.num_borrowers == 0 || self.num_lenders == 0 {
            return bad("need at least one borrower and one lender");
        }
        let (c_min, c_max) = self.capacity_range;
        let (q_min, q_max) = self.budget_range;
        let (u_min, u_max) = self.utility_range;
        if !(c_min > 0.0 && c_min <= c_max && c_max.is_finite()) {
            return bad("capacity range must satisfy 0 < c_min <= c_max");
        }
        if !(q_min > 0.0 && q_min <= q_max && q_max.is_finite()) {
            return bad("budget range must satisfy 0 < q_min <= q_max");
        }
        if !(0.0 <= u_min && u_min < u_max && u_max <= 1.0) {
            return bad("utility range must satisfy 0 <= u_min < u_max <= 1");
        }
        if self.integer_amounts && (c_min.ceil() > c_max.floor() || q_min.ceil() > q_max.floor()) {
            return bad("integer sampling needs an integer inside each amount range");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }
}

fn sample_amount(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64), integer: bool) -> f64 {
    if integer {
        let lo = lo.ceil() as i64;
        let hi = hi.floor() as i64;
        rng.random_range(lo..=hi) as f64
    } else if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn sample_distinct_row(rng: &mut ChaCha8Rng, len: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    // Re-sample the later entry of any tied pair until the row is strict.
    let mut i = 1;
    while i < row.len() {
        if row[..i].contains(&row[i]) {
            row[i] = rng.random_range(lo..hi);
        } else {
            i += 1;
        }
    }
    row
}

/// Samples a random market. Amounts are rejection-sampled until the sum of
/// capacities does not exceed the sum of budgets; utilities are then drawn
/// i.i.d. uniform, lender rows first.
pub fn generate_instance(config: &GenerationConfig) -> Result<MarketInstance, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.num_borrowers;
    let n = config.num_lenders;
    if k >= n {
        log::warn!("market has {k} borrowers and {n} lenders; the intended regime has far fewer borrowers");
    }

    let mut amounts = None;
    for _ in 0..config.max_attempts {
        let capacity: Vec<f64> = (0..k)
            .map(|_| sample_amount(&mut rng, config.capacity_range, config.integer_amounts))
            .collect();
        let budget: Vec<f64> = (0..n)
            .map(|_| sample_amount(&mut rng, config.budget_range, config.integer_amounts))
            .collect();
        if capacity.iter().sum::<f64>() <= budget.iter().sum::<f64>() {
            amounts = Some((capacity, budget));
            break;
        }
    }
    let (capacity, budget) = amounts.ok_or(ModelError::AttemptCapExceeded {
        attempts: config.max_attempts,
    })?;

    let lender_utility = (0..n)
        .map(|_| sample_distinct_row(&mut rng, k, config.utility_range))
        .collect();
    let borrower_utility = (0..k)
        .map(|_| sample_distinct_row(&mut rng, n, config.utility_range))
        .collect();

    Ok(MarketInstance {
        num_borrowers: k,
        num_lenders: n,
        capacity,
        budget,
        lender_utility,
        borrower_utility,
    })
}

/// Indices of `row` sorted by strictly descending value.
pub fn rank_descending(row: &[f64]) -> Option<Vec<usize>> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let strict = order.windows(2).all(|w| row[w[0]] > row[w[1]]);
    strict.then_some(order)
}

pub fn preferences_from_utilities(instance: &MarketInstance) -> Result<PreferenceLists, ModelError> {
    let lender = instance
        .lender_utility
        .iter()
        .enumerate()
        .map(|(row, u)| {
            rank_descending(u).ok_or(ModelError::TiedUtilities {
                side: Side::Lender,
                row,
            })
        })
        .collect::<Result<_, _>>()?;
    let borrower = instance
        .borrower_utility
        .iter()
        .enumerate()
        .map(|(row, u)| {
            rank_descending(u).ok_or(ModelError::TiedUtilities {
                side: Side::Borrower,
                row,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(PreferenceLists { lender, borrower })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Finding {
    EmptyMarket,
    DimensionMismatch { field: String, expected: usize, found: usize },
    NonPositiveAmount { field: String, index: usize, value: f64 },
    UtilityOutOfRange { side: Side, row: usize, col: usize, value: f64 },
    TiedUtilities { side: Side, row: usize },
    AggregateInfeasible { capacity_sum: f64, budget_sum: f64 },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::EmptyMarket => write!(f, "market needs at least one borrower and one lender"),
            Finding::DimensionMismatch { field, expected, found } => {
                write!(f, "{field}: expected length {expected}, found {found}")
            }
            Finding::NonPositiveAmount { field, index, value } => {
                write!(f, "{field}[{index}] = {value} is not a positive finite amount")
            }
            Finding::UtilityOutOfRange { side, row, col, value } => {
                write!(f, "{side} utility [{row}][{col}] = {value} outside [0, 1]")
            }
            Finding::TiedUtilities { side, row } => write!(f, "{side} row {row} contains tied utilities"),
            Finding::AggregateInfeasible { capacity_sum, budget_sum } => write!(
                f,
                "sum of capacities {capacity_sum} exceeds sum of budgets {budget_sum}"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
    /// Non-fatal observations, e.g. the market has at least as many
    /// borrowers as lenders.
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

fn check_rows(
    report: &mut ValidationReport,
    side: Side,
    field: &str,
    rows: &[Vec<f64>],
    expected_rows: usize,
    expected_cols: usize,
) {
    if rows.len() != expected_rows {
        report.findings.push(Finding::DimensionMismatch {
            field: field.to_string(),
            expected: expected_rows,
            found: rows.len(),
        });
    }
    for (r, row) in rows.iter().enumerate() {
        if row.len() != expected_cols {
            report.findings.push(Finding::DimensionMismatch {
                field: format!("{field}[{r}]"),
                expected: expected_cols,
                found: row.len(),
            });
            continue;
        }
        for (c, &v) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                report.findings.push(Finding::UtilityOutOfRange { side, row: r, col: c, value: v });
            }
        }
        if rank_descending(row).is_none() {
            report.findings.push(Finding::TiedUtilities { side, row: r });
        }
    }
}

/// Checks every structural invariant of a market and reports all violations.
pub fn validate_instance(instance: &MarketInstance) -> ValidationReport {
    let mut report = ValidationReport::default();
    let k = instance.num_borrowers;
    let n = instance.num_lenders;
    if k == 0 || n == 0 {
        report.findings.push(Finding::EmptyMarket);
    }
    if k >= n && k > 0 {
        report
            .warnings
            .push(format!("{k} borrowers vs {n} lenders: expected far fewer borrowers than lenders"));
    }
    for (field, values, expected) in [("capacity", &instance.capacity, k), ("budget", &instance.budget, n)] {
        if values.len() != expected {
            report.findings.push(Finding::DimensionMismatch {
                field: field.to_string(),
                expected,
                found: values.len(),
            });
        }
        for (index, &value) in values.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                report.findings.push(Finding::NonPositiveAmount {
                    field: field.to_string(),
                    index,
                    value,
                });
            }
        }
    }
    check_rows(&mut report, Side::Lender, "lender_utility", &instance.lender_utility, n, k);
    check_rows(&mut report, Side::Borrower, "borrower_utility", &instance.borrower_utility, k, n);
    let capacity_sum = instance.capacity_sum();
    let budget_sum = instance.budget_sum();
    if capacity_sum > budget_sum {
        report.findings.push(Finding::AggregateInfeasible { capacity_sum, budget_sum });
    }
    report
}
