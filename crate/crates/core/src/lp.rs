//! Dense bounded-variable simplex for the small LP relaxations solved inside
//! branch-and-bound.
//!
//! Every variable carries a finite lower bound and an optional upper bound;
//! nonbasic variables sit at one of their bounds. Phase one minimizes the sum
//! of artificial variables, phase two maximizes the real objective.

use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<(usize, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

/// `maximize objective·x` subject to the constraints and `lower <= x <= upper`.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

impl LinearProgram {
    pub fn new(num_vars: usize) -> Self {
        Self {
            objective: vec![0.0; num_vars],
            lower: vec![0.0; num_vars],
            upper: vec![f64::INFINITY; num_vars],
            constraints: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add_constraint(&mut self, coeffs: Vec<(usize, f64)>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint { coeffs, relation, rhs });
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LpOptions {
    pub pivot_tol: f64,
    pub feasibility_tol: f64,
    pub optimality_tol: f64,
    pub max_iterations: usize,
}

impl Default for LpOptions {
    fn default() -> Self {
        Self {
            pivot_tol: 1e-9,
            feasibility_tol: 1e-9,
            optimality_tol: 1e-9,
            max_iterations: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal {
        values: Vec<f64>,
        objective: f64,
        /// Objective change per unit increase of each variable with the
        /// basis held fixed; zero for basic variables.
        reduced_costs: Vec<f64>,
    },
    Infeasible,
    Unbounded,
    /// A warm re-solve proved the optimum lies below the caller's cutoff.
    BelowCutoff,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("simplex iteration limit ({0}) reached")]
    IterationLimit(usize),
    #[error("variable {0} has a non-finite lower bound or lower > upper")]
    BadBounds(usize),
}

// Consecutive degenerate pivots before switching to Bland's rule.
const DEGENERATE_STREAK: usize = 40;

#[derive(Clone)]
struct Tableau {
    rows: usize,
    cols: usize,
    // B^-1 A, row-major.
    a: Vec<f64>,
    beta: Vec<f64>,
    basis: Vec<usize>,
    basic_row: Vec<Option<usize>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    at_upper: Vec<bool>,
    cost: Vec<f64>,
    reduced: Vec<f64>,
    iterations: usize,
}

enum Step {
    Optimal,
    Unbounded,
    /// Carries the objective change of the step.
    Continue(f64),
}

impl Tableau {
    fn nonbasic_value(&self, j: usize) -> f64 {
        if self.at_upper[j] {
            self.hi[j]
        } else {
            self.lo[j]
        }
    }

    fn reset_reduced_costs(&mut self) {
        self.reduced.copy_from_slice(&self.cost);
        for i in 0..self.rows {
            let cb = self.cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.a[i * self.cols..(i + 1) * self.cols];
                for (d, &v) in self.reduced.iter_mut().zip(row) {
                    *d -= cb * v;
                }
            }
        }
        for i in 0..self.rows {
            self.reduced[self.basis[i]] = 0.0;
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let cols = self.cols;
        let p = self.a[r * cols + j];
        {
            let row = &mut self.a[r * cols..(r + 1) * cols];
            for v in row.iter_mut() {
                *v /= p;
            }
        }
        let (before, rest) = self.a.split_at_mut(r * cols);
        let (pivot_row, after) = rest.split_at_mut(cols);
        let pivot_row = &*pivot_row;
        let nonzero: Vec<usize> = (0..cols).filter(|&c| pivot_row[c] != 0.0).collect();
        let sparse = nonzero.len() * 3 < cols;
        for row in before.chunks_exact_mut(cols).chain(after.chunks_exact_mut(cols)) {
            let f = row[j];
            if f != 0.0 {
                if sparse {
                    for &c in &nonzero {
                        row[c] -= f * pivot_row[c];
                    }
                } else {
                    for (v, &pv) in row.iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
                row[j] = 0.0;
            }
        }
        let f = self.reduced[j];
        if f != 0.0 {
            for (d, &pv) in self.reduced.iter_mut().zip(pivot_row) {
                *d -= f * pv;
            }
        }
        self.reduced[j] = 0.0;
        let leaving = self.basis[r];
        self.basic_row[leaving] = None;
        self.basic_row[j] = Some(r);
        self.basis[r] = j;
    }

    fn iterate(&mut self, opts: &LpOptions, bland: bool) -> Step {
        let cols = self.cols;
        // Pricing.
        let mut entering = None;
        let mut best = 0.0;
        for j in 0..cols {
            if self.basic_row[j].is_some() || self.hi[j] - self.lo[j] <= 0.0 {
                continue;
            }
            let d = self.reduced[j];
            let gain = if self.at_upper[j] { -d } else { d };
            if gain > opts.optimality_tol {
                if bland {
                    best = gain;
                    entering = Some(j);
                    break;
                }
                if gain > best {
                    best = gain;
                    entering = Some(j);
                }
            }
        }
        let Some(j) = entering else {
            return Step::Optimal;
        };
        let dir = if self.at_upper[j] { -1.0 } else { 1.0 };

        // Ratio test.
        let mut theta = self.hi[j] - self.lo[j];
        let mut leave: Option<(usize, bool)> = None;
        let mut leave_mag = 0.0;
        for i in 0..self.rows {
            let alpha = self.a[i * cols + j];
            if alpha.abs() <= opts.pivot_tol {
                continue;
            }
            let bv = self.basis[i];
            // Basic value moves by -dir * alpha * theta.
            let rate = -dir * alpha;
            let (limit, to_upper) = if rate < 0.0 {
                ((self.beta[i] - self.lo[bv]).max(0.0) / -rate, false)
            } else if self.hi[bv].is_finite() {
                ((self.hi[bv] - self.beta[i]).max(0.0) / rate, true)
            } else {
                continue;
            };
            let better = if limit < theta - 1e-12 {
                true
            } else if let Some((r, _)) = leave {
                limit <= theta + 1e-12
                    && if bland {
                        bv < self.basis[r]
                    } else {
                        alpha.abs() > leave_mag
                    }
            } else {
                false
            };
            if better {
                theta = theta.min(limit);
                leave = Some((i, to_upper));
                leave_mag = alpha.abs();
            }
        }
        if !theta.is_finite() {
            return Step::Unbounded;
        }

        let start = self.nonbasic_value(j);
        for i in 0..self.rows {
            let alpha = self.a[i * cols + j];
            if alpha != 0.0 {
                self.beta[i] -= dir * alpha * theta;
            }
        }
        match leave {
            None => {
                self.at_upper[j] = !self.at_upper[j];
            }
            Some((r, to_upper)) => {
                let leaving = self.basis[r];
                self.pivot(r, j);
                self.at_upper[leaving] = to_upper;
                self.beta[r] = start + dir * theta;
            }
        }
        self.iterations += 1;
        Step::Continue(best * theta)
    }

    fn run(&mut self, opts: &LpOptions) -> Result<Step, LpError> {
        let mut streak = 0usize;
        loop {
            if self.iterations >= opts.max_iterations {
                return Err(LpError::IterationLimit(opts.max_iterations));
            }
            match self.iterate(opts, streak >= DEGENERATE_STREAK) {
                Step::Continue(change) => {
                    if change.abs() <= 1e-12 {
                        streak += 1;
                    } else {
                        streak = 0;
                    }
                }
                other => return Ok(other),
            }
        }
    }

    fn objective_value(&self) -> f64 {
        let mut total = 0.0;
        for j in 0..self.cols {
            let c = self.cost[j];
            if c == 0.0 {
                continue;
            }
            let v = match self.basic_row[j] {
                Some(r) => self.beta[r],
                None => self.nonbasic_value(j),
            };
            total += c * v;
        }
        total
    }

    fn value(&self, j: usize) -> f64 {
        match self.basic_row[j] {
            Some(r) => self.beta[r],
            None => self.nonbasic_value(j),
        }
    }

    /// Drops the columns whose `keep` flag is false. They must be nonbasic.
    fn retain_columns(&mut self, keep: &[bool]) {
        let old_cols = self.cols;
        let map: Vec<usize> = (0..old_cols).filter(|&j| keep[j]).collect();
        let cols = map.len();
        let mut a = vec![0.0; self.rows * cols];
        for i in 0..self.rows {
            for (nj, &j) in map.iter().enumerate() {
                a[i * cols + nj] = self.a[i * old_cols + j];
            }
        }
        let pick = |v: &[f64]| map.iter().map(|&j| v[j]).collect::<Vec<f64>>();
        self.lo = pick(&self.lo);
        self.hi = pick(&self.hi);
        self.cost = pick(&self.cost);
        self.reduced = pick(&self.reduced);
        self.at_upper = map.iter().map(|&j| self.at_upper[j]).collect();
        let mut new_index = vec![usize::MAX; old_cols];
        for (nj, &j) in map.iter().enumerate() {
            new_index[j] = nj;
        }
        for b in self.basis.iter_mut() {
            debug_assert!(keep[*b], "retained columns must include the basis");
            *b = new_index[*b];
        }
        self.basic_row = vec![None; cols];
        for (i, &b) in self.basis.iter().enumerate() {
            self.basic_row[b] = Some(i);
        }
        self.a = a;
        self.cols = cols;
    }

    /// One bounded dual simplex pivot: the most infeasible basic variable
    /// leaves at its violated bound.
    fn dual_iterate(&mut self, opts: &LpOptions) -> DualStep {
        let cols = self.cols;
        let mut leave = None;
        let mut worst = 0.0;
        for i in 0..self.rows {
            let bv = self.basis[i];
            let (lo, hi, v) = (self.lo[bv], self.hi[bv], self.beta[i]);
            let viol = if v < lo - opts.feasibility_tol * (1.0 + lo.abs()) {
                lo - v
            } else if v > hi + opts.feasibility_tol * (1.0 + hi.abs()) {
                v - hi
            } else {
                continue;
            };
            if viol > worst {
                worst = viol;
                leave = Some(i);
            }
        }
        let Some(r) = leave else {
            return DualStep::Feasible;
        };
        let leaving = self.basis[r];
        let increase = self.beta[r] < self.lo[leaving];
        let target = if increase { self.lo[leaving] } else { self.hi[leaving] };

        let mut entering = None;
        let mut best_ratio = f64::INFINITY;
        let mut best_mag = 0.0;
        for j in 0..cols {
            if self.basic_row[j].is_some() || self.hi[j] - self.lo[j] <= 0.0 {
                continue;
            }
            let alpha = self.a[r * cols + j];
            if alpha.abs() <= opts.pivot_tol {
                continue;
            }
            // The leaving value moves by -alpha per unit of entering movement.
            let eligible = match (self.at_upper[j], increase) {
                (false, true) => alpha < 0.0,
                (true, true) => alpha > 0.0,
                (false, false) => alpha > 0.0,
                (true, false) => alpha < 0.0,
            };
            if !eligible {
                continue;
            }
            let d = self.reduced[j];
            let slack = if self.at_upper[j] { d.max(0.0) } else { (-d).max(0.0) };
            let ratio = slack / alpha.abs();
            if ratio < best_ratio - 1e-12 || (ratio <= best_ratio + 1e-12 && alpha.abs() > best_mag) {
                best_ratio = ratio;
                best_mag = alpha.abs();
                entering = Some(j);
            }
        }
        let Some(j) = entering else {
            return DualStep::Infeasible;
        };
        let alpha = self.a[r * cols + j];
        let delta = -(target - self.beta[r]) / alpha;
        let start = self.nonbasic_value(j);
        let change = self.reduced[j] * delta;
        for i in 0..self.rows {
            let a = self.a[i * cols + j];
            if a != 0.0 {
                self.beta[i] -= a * delta;
            }
        }
        self.pivot(r, j);
        self.at_upper[leaving] = !increase;
        self.beta[r] = start + delta;
        self.iterations += 1;
        DualStep::Continue(change)
    }

    fn extract(&self, lp: &LinearProgram, lower: &[f64], upper: &[f64]) -> LpOutcome {
        let n = lp.num_vars();
        let values: Vec<f64> = (0..n)
            .map(|j| self.value(j).clamp(lower[j], upper[j]))
            .collect();
        let objective = values.iter().zip(&lp.objective).map(|(x, c)| x * c).sum();
        let reduced_costs = (0..n)
            .map(|j| if self.basic_row[j].is_some() { 0.0 } else { self.reduced[j] })
            .collect();
        LpOutcome::Optimal { values, objective, reduced_costs }
    }
}

enum DualStep {
    Feasible,
    Infeasible,
    /// Carries the objective change of the step.
    Continue(f64),
}

/// Optimal tableau of a previous solve. Re-solving after bound changes
/// starts from it with the dual simplex.
#[derive(Clone)]
pub struct WarmStart {
    state: WarmState,
    // The cold-solved tableau this one descends from. Compact starts are
    // rebuilt from it.
    origin: Rc<Tableau>,
}

#[derive(Clone)]
enum WarmState {
    Full(Tableau),
    Compact { basis: Vec<usize>, at_upper: Vec<bool> },
}

impl WarmStart {
    fn new(tab: Tableau, origin: Rc<Tableau>) -> Self {
        Self { state: WarmState::Full(tab), origin }
    }

    /// Keeps only the basis, a few hundred bytes instead of the tableau.
    pub fn compact(&mut self) {
        if let WarmState::Full(tab) = &self.state {
            self.state = WarmState::Compact {
                basis: tab.basis.clone(),
                at_upper: tab.at_upper.clone(),
            };
        }
    }

    /// Rebuilds the tableau of a compacted start. `None` when the stored
    /// basis turns out numerically singular.
    pub fn expand(self, opts: &LpOptions) -> Option<Self> {
        match self.state {
            WarmState::Full(_) => Some(self),
            WarmState::Compact { basis, at_upper } => {
                let tab = crash(&self.origin, &basis, &at_upper, opts)?;
                Some(Self::new(tab, self.origin))
            }
        }
    }
}

/// Pivots a copy of `origin` into `basis`, then moves the nonbasic columns to
/// the bounds named by `at_upper`.
fn crash(origin: &Tableau, basis: &[usize], at_upper: &[bool], opts: &LpOptions) -> Option<Tableau> {
    let mut tab = origin.clone();
    let cols = tab.cols;
    let point: Vec<f64> = (0..cols).map(|j| tab.value(j)).collect();
    let mut wanted = vec![false; cols];
    for &v in basis {
        wanted[v] = true;
    }
    for &v in basis {
        if tab.basic_row[v].is_some() {
            continue;
        }
        let (r, mag) = (0..tab.rows)
            .filter(|&i| !wanted[tab.basis[i]])
            .map(|i| (i, tab.a[i * cols + v].abs()))
            .fold((usize::MAX, 0.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if mag <= opts.pivot_tol.max(1e-7) {
            return None;
        }
        tab.pivot(r, v);
    }
    // The point is unchanged by the basis swap, so the basic values can be
    // read off it before the nonbasic columns move to their bounds.
    for i in 0..tab.rows {
        tab.beta[i] = point[tab.basis[i]];
    }
    for j in 0..cols {
        if tab.basic_row[j].is_some() {
            continue;
        }
        tab.at_upper[j] = at_upper[j];
        let delta = tab.nonbasic_value(j) - point[j];
        if delta != 0.0 {
            for i in 0..tab.rows {
                let a = tab.a[i * cols + j];
                if a != 0.0 {
                    tab.beta[i] -= a * delta;
                }
            }
        }
    }
    tab.reset_reduced_costs();
    tab.iterations = 0;
    Some(tab)
}

fn check_bounds(lp: &LinearProgram, lower: &[f64], upper: &[f64]) -> Result<(), LpError> {
    let n = lp.num_vars();
    assert_eq!(lower.len(), n);
    assert_eq!(upper.len(), n);
    for j in 0..n {
        if !lower[j].is_finite() || lower[j] > upper[j] {
            return Err(LpError::BadBounds(j));
        }
    }
    Ok(())
}

/// Solves the LP with a two-phase bounded primal simplex.
pub fn solve(lp: &LinearProgram, opts: &LpOptions) -> Result<LpOutcome, LpError> {
    solve_with_bounds(lp, &lp.lower, &lp.upper, opts)
}

/// Solves `lp` with its variable bounds replaced by `lower`/`upper`.
pub fn solve_with_bounds(
    lp: &LinearProgram,
    lower: &[f64],
    upper: &[f64],
    opts: &LpOptions,
) -> Result<LpOutcome, LpError> {
    check_bounds(lp, lower, upper)?;
    Ok(cold(lp, lower, upper, opts)?.0)
}

/// As [`solve_with_bounds`], starting from `warm` when given (it must come
/// from the same `lp`), and returning the final tableau when optimal. A warm
/// solve may stop early with [`LpOutcome::BelowCutoff`] once its bound drops
/// under `cutoff`.
pub fn solve_warm(
    lp: &LinearProgram,
    lower: &[f64],
    upper: &[f64],
    opts: &LpOptions,
    warm: Option<&WarmStart>,
    cutoff: f64,
) -> Result<(LpOutcome, Option<WarmStart>), LpError> {
    check_bounds(lp, lower, upper)?;
    if let Some(ws) = warm {
        if let Some(done) = rewarm(ws, lp, lower, upper, opts, cutoff)? {
            return Ok(done);
        }
    }
    let (outcome, tab) = cold(lp, lower, upper, opts)?;
    Ok((outcome, tab.map(|tab| {
        let origin = Rc::new(tab.clone());
        WarmStart::new(tab, origin)
    })))
}

/// Re-solves with a new objective from the optimum in `warm`, which must
/// come from an LP with the same constraints and bounds as `lp`. The old
/// basis stays primal feasible, so only phase two runs. `None` asks the
/// caller to solve from scratch.
pub fn resolve_objective(
    lp: &LinearProgram,
    warm: &WarmStart,
    opts: &LpOptions,
) -> Result<Option<(LpOutcome, WarmStart)>, LpError> {
    check_bounds(lp, &lp.lower, &lp.upper)?;
    let mut tab = match warm.clone().expand(opts) {
        Some(WarmStart { state: WarmState::Full(tab), .. }) => tab,
        _ => return Ok(None),
    };
    let n = lp.num_vars();
    for j in 0..tab.cols {
        tab.cost[j] = if j < n { lp.objective[j] } else { 0.0 };
    }
    tab.reset_reduced_costs();
    tab.iterations = 0;
    match tab.run(opts) {
        Ok(Step::Optimal) => {}
        Ok(Step::Unbounded) => return Ok(Some((LpOutcome::Unbounded, warm.clone()))),
        Ok(Step::Continue(_)) => unreachable!("run only returns terminal steps"),
        Err(_) => return Ok(None),
    }
    let outcome = tab.extract(lp, &lp.lower, &lp.upper);
    // Compact starts are rebuilt from the origin, whose costs must match.
    let origin = Rc::new(tab.clone());
    Ok(Some((outcome, WarmStart::new(tab, origin))))
}

/// Dual simplex from a previous optimum. `None` asks the caller to solve
/// from scratch.
fn rewarm(
    ws: &WarmStart,
    lp: &LinearProgram,
    lower: &[f64],
    upper: &[f64],
    opts: &LpOptions,
    cutoff: f64,
) -> Result<Option<(LpOutcome, Option<WarmStart>)>, LpError> {
    let mut tab = match &ws.state {
        WarmState::Full(tab) => tab.clone(),
        WarmState::Compact { basis, at_upper } => match crash(&ws.origin, basis, at_upper, opts) {
            Some(tab) => tab,
            None => return Ok(None),
        },
    };
    tab.iterations = 0;
    for j in 0..lp.num_vars() {
        if tab.lo[j] == lower[j] && tab.hi[j] == upper[j] {
            continue;
        }
        if tab.basic_row[j].is_some() {
            tab.lo[j] = lower[j];
            tab.hi[j] = upper[j];
            continue;
        }
        let old = tab.nonbasic_value(j);
        tab.lo[j] = lower[j];
        tab.hi[j] = upper[j];
        let d = tab.reduced[j];
        tab.at_upper[j] = if upper[j] == lower[j] {
            false
        } else if d > opts.optimality_tol {
            true
        } else if d < -opts.optimality_tol {
            false
        } else {
            tab.at_upper[j]
        };
        if tab.at_upper[j] && !upper[j].is_finite() {
            return Ok(None);
        }
        let delta = tab.nonbasic_value(j) - old;
        if delta != 0.0 {
            let cols = tab.cols;
            for i in 0..tab.rows {
                let a = tab.a[i * cols + j];
                if a != 0.0 {
                    tab.beta[i] -= a * delta;
                }
            }
        }
    }
    let limit = 50 * (tab.rows + 10);
    // Dual iterates stay dual feasible up to the optimality tolerance, so
    // their objective bounds the optimum once this margin is allowed for.
    let margin = 1e-7 * cutoff.abs().max(1.0);
    let mut objective = tab.objective_value();
    loop {
        if tab.iterations >= limit {
            return Ok(None);
        }
        match tab.dual_iterate(opts) {
            DualStep::Continue(change) => {
                objective += change;
                if objective + margin < cutoff {
                    return Ok(Some((LpOutcome::BelowCutoff, None)));
                }
            }
            DualStep::Infeasible => return Ok(Some((LpOutcome::Infeasible, None))),
            DualStep::Feasible => break,
        }
    }
    // Clean up any dual infeasibility left by round-off or loosened bounds.
    match tab.run(opts) {
        Ok(Step::Optimal) => {}
        Ok(Step::Unbounded) => return Ok(Some((LpOutcome::Unbounded, None))),
        Ok(Step::Continue(_)) => unreachable!("run only returns terminal steps"),
        Err(_) => return Ok(None),
    }
    let outcome = tab.extract(lp, lower, upper);
    Ok(Some((outcome, Some(WarmStart::new(tab, Rc::clone(&ws.origin))))))
}

fn cold(
    lp: &LinearProgram,
    lower: &[f64],
    upper: &[f64],
    opts: &LpOptions,
) -> Result<(LpOutcome, Option<Tableau>), LpError> {
    let n = lp.num_vars();
    let m = lp.constraints.len();
    let num_slack = lp
        .constraints
        .iter()
        .filter(|c| c.relation != Relation::Eq)
        .count();

    // Residuals with every structural variable at its lower bound.
    let residual: Vec<f64> = lp
        .constraints
        .iter()
        .map(|c| c.rhs - c.coeffs.iter().map(|&(j, v)| v * lower[j]).sum::<f64>())
        .collect();

    // Decide the starting basic variable of each row.
    let mut slack_col = vec![None; m];
    let mut needs_artificial = vec![false; m];
    let mut next = n;
    for (i, c) in lp.constraints.iter().enumerate() {
        if c.relation != Relation::Eq {
            slack_col[i] = Some(next);
            next += 1;
        }
        needs_artificial[i] = match c.relation {
            Relation::Le => residual[i] < 0.0,
            Relation::Ge => residual[i] > 0.0,
            Relation::Eq => true,
        };
    }
    let num_art = needs_artificial.iter().filter(|&&x| x).count();
    let cols = n + num_slack + num_art;

    let mut a = vec![0.0; m * cols];
    let mut lo = vec![0.0; cols];
    let mut hi = vec![f64::INFINITY; cols];
    lo[..n].copy_from_slice(lower);
    hi[..n].copy_from_slice(upper);
    let mut basis = vec![0; m];
    let mut beta = vec![0.0; m];
    let mut art = n + num_slack;
    let mut art_cols = Vec::with_capacity(num_art);
    for (i, c) in lp.constraints.iter().enumerate() {
        let row = &mut a[i * cols..(i + 1) * cols];
        for &(j, v) in &c.coeffs {
            row[j] += v;
        }
        if let Some(s) = slack_col[i] {
            row[s] = if c.relation == Relation::Le { 1.0 } else { -1.0 };
        }
        let (basic, sign) = if needs_artificial[i] {
            let sign = if residual[i] >= 0.0 { 1.0 } else { -1.0 };
            row[art] = sign;
            art_cols.push(art);
            art += 1;
            (art - 1, sign)
        } else {
            let s = slack_col[i].expect("rows without artificial carry a slack");
            (s, row[s])
        };
        if sign != 1.0 {
            for v in row.iter_mut() {
                *v /= sign;
            }
        }
        basis[i] = basic;
        beta[i] = residual[i] / sign;
    }
    let mut basic_row = vec![None; cols];
    for (i, &b) in basis.iter().enumerate() {
        basic_row[b] = Some(i);
    }

    let mut tab = Tableau {
        rows: m,
        cols,
        a,
        beta,
        basis,
        basic_row,
        lo,
        hi,
        at_upper: vec![false; cols],
        cost: vec![0.0; cols],
        reduced: vec![0.0; cols],
        iterations: 0,
    };

    if num_art > 0 {
        for &c in &art_cols {
            tab.cost[c] = -1.0;
        }
        tab.reset_reduced_costs();
        match tab.run(opts)? {
            Step::Optimal => {}
            // Phase one is bounded by zero; treat anything else as numerical trouble.
            _ => return Ok((LpOutcome::Infeasible, None)),
        }
        let infeasibility: f64 = art_cols.iter().map(|&c| tab.value(c)).sum();
        if infeasibility > opts.feasibility_tol * (1.0 + m as f64) {
            return Ok((LpOutcome::Infeasible, None));
        }
        // Nonbasic artificials are gone for good; basic ones stay pinned at 0.
        let mut keep = vec![true; cols];
        for &c in &art_cols {
            tab.hi[c] = 0.0;
            tab.cost[c] = 0.0;
            match tab.basic_row[c] {
                Some(r) => tab.beta[r] = 0.0,
                None => keep[c] = false,
            }
        }
        tab.retain_columns(&keep);
    }

    tab.cost[..n].copy_from_slice(&lp.objective);
    for c in tab.cost[n..].iter_mut() {
        *c = 0.0;
    }
    tab.reset_reduced_costs();
    match tab.run(opts)? {
        Step::Optimal => {}
        Step::Unbounded => return Ok((LpOutcome::Unbounded, None)),
        Step::Continue(_) => unreachable!("run only returns terminal steps"),
    }
    let outcome = tab.extract(lp, lower, upper);
    Ok((outcome, Some(tab)))
}
