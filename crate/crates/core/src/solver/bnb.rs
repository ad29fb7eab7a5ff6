//! Best-first branch-and-bound over the assignment variables.
//!
//! The LP relaxation keeps one continuous blocking variable per pair with the
//! stability row divided by `c_b`. The lender-side term only matters when
//! `q_l >= c_b`, so its coefficient is 1 there and 0 otherwise. On binary
//! points the row is then exact, so an integral relaxation optimum is a true
//! optimum of its subtree.

use super::problem::{covered, Problem};
use super::{improves, BinaryMatrix, PoolView, PooledCut, Matching, SolveStats, SolveStatus, SolverError, SolverOptions};
use crate::lp::{self, LinearProgram, LpOptions, LpOutcome, Relation};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

const FREE: i8 = -1;

// Relative slack when pruning on LP bounds, wider than the tie tolerance so
// LP round-off can never discard a tied optimum.
const PRUNE_TOLERANCE: f64 = 2e-9;

// Open nodes beyond this many keep only their basis, which keeps memory
// bounded.
const WARM_NODES: usize = 256;

// Strong-branching probes per node, and how many observations make a
// pseudocost trustworthy.
const MAX_STRONG: usize = 8;
const RELIABLE: u32 = 1;

// Rounds of cover-cut separation at the root.
const CUT_ROUNDS: usize = 8;

// Root solves a pooled cut may stay slack before it is no longer loaded.
const MAX_IDLE: u32 = 10;

struct Node {
    fix: Vec<i8>,
    bound: f64,
    values: Vec<f64>,
    reduced_costs: Vec<f64>,
    seq: u64,
    warm: Option<lp::WarmStart>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // Max-heap: larger bound first, then older node.
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound
            .total_cmp(&other.bound)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[allow(clippy::large_enum_variant)]
enum Evaluated {
    Pruned,
    Open(Node),
}

pub(crate) struct Search<'p, 'a> {
    problem: &'p Problem<'a>,
    options: &'p SolverOptions,
    lp: LinearProgram,
    lp_options: LpOptions,
    incumbent: Option<(f64, BinaryMatrix)>,
    nodes: usize,
    seq: u64,
    started: Instant,
    // Integral leaves of the main search. Tied alternatives can only hide in
    // these, since every other leaf was closed by its bound.
    closed: Option<Vec<(f64, Vec<i8>)>>,
    pseudo: Vec<PseudoCost>,
}

/// Observed bound drop per unit of rounding, for each direction.
#[derive(Debug, Clone, Copy, Default)]
struct PseudoCost {
    sum: [f64; 2],
    count: [u32; 2],
}

impl PseudoCost {
    fn reliable(&self) -> bool {
        self.count[0] >= RELIABLE && self.count[1] >= RELIABLE
    }

    fn record(&mut self, value: f64, down: f64, up: f64) {
        self.sum[0] += down / value.max(1e-6);
        self.sum[1] += up / (1.0 - value).max(1e-6);
        self.count[0] += 1;
        self.count[1] += 1;
    }

    fn estimate(&self, value: f64) -> f64 {
        let per_unit = |d: usize| self.sum[d] / self.count[d].max(1) as f64;
        score_of(value * per_unit(0), (1.0 - value) * per_unit(1))
    }
}

fn score_of(down: f64, up: f64) -> f64 {
    down.max(1e-6) * up.max(1e-6)
}

impl<'p, 'a> Search<'p, 'a> {
    pub fn new(problem: &'p Problem<'a>, options: &'p SolverOptions) -> Self {
        Self {
            lp: relaxation(problem),
            lp_options: LpOptions {
                pivot_tol: options.pivot_tol,
                ..LpOptions::default()
            },
            problem,
            options,
            incumbent: None,
            nodes: 0,
            seq: 0,
            started: Instant::now(),
            closed: Some(Vec::new()),
            pseudo: vec![PseudoCost::default(); problem.k * problem.n * 2],
        }
    }

    /// Tightens the relaxation with knapsack cover cuts separated at the
    /// root. The cuts are valid for every covering assignment, so the whole
    /// tree can use them.
    /// Cuts from `pool` that were tight recently are loaded up front; the
    /// others return when the root point violates them. Returns the final
    /// root tableau when the last round added nothing.
    pub fn add_root_cuts(&mut self, view: PoolView<'_>) -> Result<Option<lp::WarmStart>, SolverError> {
        let PoolView { cuts: pool, root } = view;
        let mut loaded: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].idle < MAX_IDLE).collect();
        for &i in &loaded {
            self.lp.add_constraint(pool[i].coeffs.clone(), Relation::Ge, 1.0);
        }
        let lhs = |coeffs: &[(usize, f64)], values: &[f64]| coeffs.iter().map(|&(j, a)| a * values[j]).sum::<f64>();
        let mut previous = root.take().filter(|(rows, _)| *rows == self.lp.constraints).map(|(_, w)| w);
        for _ in 0..CUT_ROUNDS {
            let resolved = match previous.take() {
                Some(w) => lp::resolve_objective(&self.lp, &w, &self.lp_options)?.map(|(o, w)| (o, Some(w))),
                None => None,
            };
            let solved = match resolved {
                Some(done) => done,
                None => {
                    let (lower, upper) = (&self.lp.lower, &self.lp.upper);
                    lp::solve_warm(&self.lp, lower, upper, &self.lp_options, None, f64::NEG_INFINITY)?
                }
            };
            let (values, warm) = match solved {
                (LpOutcome::Optimal { values, .. }, warm) => (values, warm),
                _ => return Ok(None),
            };
            let mut added: Vec<usize> = (0..pool.len())
                .filter(|&i| pool[i].idle >= MAX_IDLE && lhs(&pool[i].coeffs, &values) < 1.0 - 1e-6)
                .collect();
            if added.is_empty() {
                for coeffs in cover_cuts(self.problem, &values) {
                    added.push(pool.len());
                    pool.push(PooledCut { coeffs, idle: 0 });
                }
            }
            if added.is_empty() {
                for &i in &loaded {
                    let cut = &mut pool[i];
                    cut.idle = if lhs(&cut.coeffs, &values) <= 1.0 + 1e-7 { 0 } else { cut.idle + 1 };
                }
                if let Some(w) = &warm {
                    *root = Some((self.lp.constraints.clone(), w.clone()));
                }
                return Ok(warm);
            }
            for i in added {
                pool[i].idle = 0;
                self.lp.add_constraint(pool[i].coeffs.clone(), Relation::Ge, 1.0);
                loaded.push(i);
            }
        }
        Ok(None)
    }

    /// Fixing vector with every LP variable free.
    pub fn free(&self) -> Vec<i8> {
        vec![FREE; self.lp.num_vars()]
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn offer(&mut self, x: &BinaryMatrix) {
        if !self.problem.covers(x) {
            return;
        }
        let obj = self.problem.evaluate(x);
        let best = self.incumbent.as_ref().map(|(o, b)| (*o, b));
        if improves(obj, x, best) {
            self.incumbent = Some((obj, x.clone()));
        }
    }

    pub fn into_incumbent(self) -> Option<(f64, BinaryMatrix)> {
        self.incumbent
    }

    fn cutoff(&self) -> f64 {
        match &self.incumbent {
            Some((obj, _)) => obj - PRUNE_TOLERANCE * obj.abs().max(1.0),
            None => f64::NEG_INFINITY,
        }
    }

    fn limit_error(&self) -> SolverError {
        let incumbent = self.incumbent.as_ref().map(|(_, x)| {
            Box::new(self.problem.matching(
                x.clone(),
                SolveStatus::Heuristic,
                SolveStats { nodes: self.nodes, fell_back: false },
            ))
        });
        SolverError::NodeLimitExceeded { limit: self.options.node_limit, incumbent }
    }

    /// Fixes `x_bl = 1` and closes the rest of column `l`. Returns false on
    /// conflict.
    fn fix_one(&self, fix: &mut [i8], b: usize, l: usize) -> bool {
        let p = self.problem;
        for bp in 0..p.k {
            let v = &mut fix[p.var(bp, l)];
            if bp == b {
                if *v == 0 {
                    return false;
                }
                *v = 1;
            } else {
                if *v == 1 {
                    return false;
                }
                *v = 0;
            }
        }
        true
    }

    /// Cheap necessary conditions: every borrower can still be covered.
    fn potentially_feasible(&self, fix: &[i8]) -> bool {
        let p = self.problem;
        (0..p.k).all(|b| {
            let reach: f64 = (0..p.n)
                .filter(|&l| fix[p.var(b, l)] != 0)
                .map(|l| p.budget[l])
                .sum();
            covered(p.capacity[b], reach)
        })
    }

    /// Combinatorial upper bound: best reachable utility per lender minus
    /// blocking pairs already forced by the fixings.
    fn quick_bound(&self, fix: &[i8]) -> f64 {
        let p = self.problem;
        let mut gain = 0.0;
        for l in 0..p.n {
            let mut best: f64 = 0.0;
            let mut forced = None;
            for b in 0..p.k {
                match fix[p.var(b, l)] {
                    1 => forced = Some(p.utility[l][b]),
                    FREE => best = best.max(p.utility[l][b]),
                    _ => {}
                }
            }
            gain += forced.unwrap_or(best);
        }
        let mut blocked = 0usize;
        if p.weights.lambda2 > 0.0 {
            for b in 0..p.k {
                for &l in &p.borrower_order[b] {
                    if fix[p.var(b, l)] != 0 {
                        // Lenders ranked lower may be outranked by this one.
                        break;
                    }
                    let protected = p.budget[l] >= p.capacity[b]
                        && p.lender_order[l]
                            .iter()
                            .take_while(|&&bp| bp != b)
                            .any(|&bp| fix[p.var(bp, l)] != 0);
                    if !protected {
                        blocked += 1;
                    }
                }
            }
        }
        p.weights.lambda1 * gain - p.weights.lambda2 * blocked as f64
    }

    fn evaluate(&mut self, fix: Vec<i8>, warm: Option<&lp::WarmStart>) -> Result<Evaluated, SolverError> {
        if !self.potentially_feasible(&fix) || self.quick_bound(&fix) < self.cutoff() {
            return Ok(Evaluated::Pruned);
        }
        if self.nodes >= self.options.node_limit {
            return Err(self.limit_error());
        }
        if let Some(budget) = self.options.time_budget {
            if self.started.elapsed() > budget {
                return Err(self.limit_error());
            }
        }
        self.nodes += 1;
        let mut lower = self.lp.lower.clone();
        let mut upper = self.lp.upper.clone();
        for (j, &f) in fix.iter().enumerate() {
            if f != FREE {
                lower[j] = f as f64;
                upper[j] = f as f64;
            }
        }
        match lp::solve_warm(&self.lp, &lower, &upper, &self.lp_options, warm, self.cutoff())? {
            (LpOutcome::Optimal { values, objective, reduced_costs }, warm) => {
                if objective < self.cutoff() {
                    return Ok(Evaluated::Pruned);
                }
                self.seq += 1;
                Ok(Evaluated::Open(Node {
                    fix,
                    bound: objective,
                    values,
                    reduced_costs,
                    seq: self.seq,
                    warm,
                }))
            }
            (LpOutcome::Infeasible | LpOutcome::BelowCutoff, _) => Ok(Evaluated::Pruned),
            (LpOutcome::Unbounded, _) => unreachable!("relaxation variables are bounded"),
        }
    }

    fn round(&self, values: &[f64]) -> BinaryMatrix {
        let p = self.problem;
        let mut x = BinaryMatrix::zeros(p.k, p.n);
        for l in 0..p.n {
            let (b, v) = (0..p.k)
                .map(|b| (b, values[p.var(b, l)]))
                .fold((0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
            if v >= 0.5 - self.options.integrality_tol {
                x.set(b, l, true);
            }
        }
        x
    }

    /// Explores the subtree under `root` and updates the incumbent.
    pub fn run(&mut self, root: Vec<i8>, warm: Option<&lp::WarmStart>) -> Result<(), SolverError> {
        let tol = self.options.integrality_tol;
        let mut heap = BinaryHeap::new();
        if let Evaluated::Open(node) = self.evaluate(root, warm)? {
            heap.push(node);
        }
        while let Some(mut node) = heap.pop() {
            if node.bound < self.cutoff() {
                continue;
            }
            node.warm = node.warm.and_then(|w| w.expand(&self.lp_options));
            self.fix_by_reduced_cost(&mut node);
            let rounded = self.round(&node.values);
            self.offer(&rounded);
            let mut candidates: Vec<(usize, f64)> = (0..node.values.len())
                .filter(|&j| node.fix[j] == FREE)
                .map(|j| (j, node.values[j]))
                .filter(|&(_, v)| v.min(1.0 - v) > tol)
                .collect();
            if candidates.is_empty() {
                // Integral relaxation: the rounded point is its optimum.
                if let Some(closed) = &mut self.closed {
                    closed.push((node.bound, node.fix));
                }
                continue;
            }
            candidates.sort_by(|a, b| {
                let fa = a.1.min(1.0 - a.1);
                let fb = b.1.min(1.0 - b.1);
                fb.total_cmp(&fa).then(a.0.cmp(&b.0))
            });
            let mut chosen: Option<(f64, usize)> = None;
            let mut kept: Option<(usize, [Evaluated; 2])> = None;
            let mut strong = 0;
            for &(j, v) in &candidates {
                let (score, evaluated) = if self.pseudo[j].reliable() {
                    (self.pseudo[j].estimate(v), None)
                } else if strong < MAX_STRONG {
                    strong += 1;
                    let children = self.children(&node, j)?;
                    let floor = (node.bound - self.cutoff()).max(0.0);
                    let drop = |c: &Evaluated| match c {
                        Evaluated::Open(child) => (node.bound - child.bound).max(0.0),
                        Evaluated::Pruned => floor,
                    };
                    let (down, up) = (drop(&children[0]), drop(&children[1]));
                    self.pseudo[j].record(v, down, up);
                    let score = if children.iter().all(|c| matches!(c, Evaluated::Pruned)) {
                        f64::INFINITY
                    } else {
                        score_of(down, up)
                    };
                    (score, Some(children))
                } else {
                    continue;
                };
                if chosen.is_none_or(|c| score > c.0) {
                    chosen = Some((score, j));
                    if let Some(children) = evaluated {
                        kept = Some((j, children));
                    }
                }
                if score == f64::INFINITY {
                    break;
                }
            }
            let (_, j) = chosen.expect("at least one fractional candidate");
            let children = match kept {
                Some((kj, children)) if kj == j => children,
                _ => self.children(&node, j)?,
            };
            for child in children {
                if let Evaluated::Open(child) = child {
                    push(&mut heap, child);
                }
            }
        }
        Ok(())
    }

    /// Fixes every free variable whose move off its bound would take the LP
    /// bound below the cutoff. Only points that cannot tie the incumbent are
    /// cut off, so tie-breaking is unaffected.
    fn fix_by_reduced_cost(&self, node: &mut Node) {
        let cutoff = self.cutoff();
        if !cutoff.is_finite() {
            return;
        }
        let margin = 1e-7 * cutoff.abs().max(1.0);
        let tol = self.options.integrality_tol;
        let kn = self.problem.k * self.problem.n;
        for j in 0..node.values.len() {
            if node.fix[j] != FREE {
                continue;
            }
            let (v, d) = (node.values[j], node.reduced_costs[j]);
            if v <= tol && node.bound + d < cutoff - margin {
                node.fix[j] = 0;
            } else if v >= 1.0 - tol && node.bound - d < cutoff - margin {
                if j < kn {
                    let (b, l) = (j / self.problem.n, j % self.problem.n);
                    let mut fix = node.fix.clone();
                    if self.fix_one(&mut fix, b, l) {
                        node.fix = fix;
                    }
                } else {
                    node.fix[j] = 1;
                }
            }
        }
    }

    /// Down and up children of `node` on variable `j`.
    fn children(&mut self, node: &Node, j: usize) -> Result<[Evaluated; 2], SolverError> {
        let kn = self.problem.k * self.problem.n;
        let warm = node.warm.as_ref();
        let mut down = node.fix.clone();
        down[j] = 0;
        let down = self.evaluate(down, warm)?;
        let mut up = node.fix.clone();
        let up_ok = if j < kn {
            let (b, l) = (j / self.problem.n, j % self.problem.n);
            self.fix_one(&mut up, b, l)
        } else {
            up[j] = 1;
            true
        };
        let up = if up_ok { self.evaluate(up, warm)? } else { Evaluated::Pruned };
        Ok([down, up])
    }

    /// Settles ties toward the row-major smallest assignment. Only integral
    /// leaves whose bound survives the final cutoff can hold a tied point.
    pub fn refine_lexicographically(&mut self) -> Result<(), SolverError> {
        let closed = self.closed.take().unwrap_or_default();
        for (bound, fix) in closed {
            if bound < self.cutoff() {
                continue;
            }
            let global = self.incumbent.take();
            self.incumbent = None;
            let mut warm = None;
            if let Evaluated::Open(node) = self.evaluate(fix.clone(), None)? {
                let x = self.round(&node.values);
                self.offer(&x);
                warm = node.warm;
            }
            if self.incumbent.is_some() {
                self.refine_within(fix, warm.as_ref())?;
            }
            let local = std::mem::replace(&mut self.incumbent, global);
            if let Some((_, x)) = local {
                self.offer(&x);
            }
        }
        Ok(())
    }

    /// Walks the incumbent in row-major order and, wherever it has a free one,
    /// searches the subtree under `prefix` for a tied optimum with a zero there.
    fn refine_within(&mut self, mut prefix: Vec<i8>, warm: Option<&lp::WarmStart>) -> Result<(), SolverError> {
        let p = self.problem;
        for j in 0..p.k * p.n {
            let Some((_, best)) = &self.incumbent else {
                return Ok(());
            };
            let (b, l) = (j / p.n, j % p.n);
            if prefix[j] != FREE {
                continue;
            }
            if best.get(b, l) {
                let mut probe = prefix.clone();
                probe[j] = 0;
                self.run(probe, warm)?;
            }
            let best = &self.incumbent.as_ref().expect("incumbent persists").1;
            if best.get(b, l) {
                let ok = self.fix_one(&mut prefix, b, l);
                debug_assert!(ok);
            } else {
                prefix[j] = 0;
            }
        }
        Ok(())
    }
}

fn push(heap: &mut BinaryHeap<Node>, mut node: Node) {
    if heap.len() >= WARM_NODES {
        if let Some(warm) = &mut node.warm {
            warm.compact();
        }
    }
    heap.push(node);
}

/// If the lenders in `T` cannot cover `c_b` on their own, the others must
/// add at least the residual `r`, which gives `sum_{l not in T}
/// min(q_l, r)/r x_bl >= 1`. `T` is grown greedily from the lenders the
/// point uses most; a cut is kept only when the point violates it.
fn cover_cuts(p: &Problem<'_>, values: &[f64]) -> Vec<Vec<(usize, f64)>> {
    let mut cuts = Vec::new();
    for b in 0..p.k {
        let c = p.capacity[b];
        let mut order: Vec<usize> = (0..p.n).collect();
        order.sort_by(|&l1, &l2| {
            values[p.var(b, l2)]
                .total_cmp(&values[p.var(b, l1)])
                .then(p.budget[l1].total_cmp(&p.budget[l2]))
        });
        let mut in_t = vec![false; p.n];
        let mut funded = 0.0;
        for &l in &order {
            if values[p.var(b, l)] <= 1e-9 {
                break;
            }
            if !covered(c, funded + p.budget[l]) {
                funded += p.budget[l];
                in_t[l] = true;
            }
        }
        let residual = c - 1e-9 * c.abs().max(1.0) - funded;
        if residual <= 0.0 {
            continue;
        }
        let coeffs: Vec<(usize, f64)> = (0..p.n)
            .filter(|&l| !in_t[l])
            .map(|l| (p.var(b, l), p.budget[l].min(residual) / residual))
            .collect();
        let lhs: f64 = coeffs.iter().map(|&(j, a)| a * values[j]).sum();
        if lhs < 1.0 - 1e-6 {
            cuts.push(coeffs);
        }
    }
    cuts
}

fn relaxation(p: &Problem<'_>) -> LinearProgram {
    let kn = p.k * p.n;
    let with_blocking = p.weights.lambda2 > 0.0;
    let num_vars = if with_blocking { 2 * kn } else { kn };
    let mut lp = LinearProgram::new(num_vars);
    for b in 0..p.k {
        for l in 0..p.n {
            let j = p.var(b, l);
            lp.objective[j] = p.weights.lambda1 * p.utility[l][b];
            lp.upper[j] = 1.0;
        }
    }
    for l in 0..p.n {
        lp.add_constraint((0..p.k).map(|b| (p.var(b, l), 1.0)).collect(), Relation::Le, 1.0);
    }
    let mut sorted_budgets = p.budget.to_vec();
    sorted_budgets.sort_by(|a, b| b.total_cmp(a));
    for b in 0..p.k {
        let c = p.capacity[b];
        // A lender worth more than the whole request counts once. The right
        // side carries the same slack as the integer coverage test.
        lp.add_constraint(
            (0..p.n).map(|l| (p.var(b, l), p.budget[l].min(c) / c)).collect(),
            Relation::Ge,
            (c - 1e-9 * c.abs().max(1.0)) / c,
        );
        // Fewest lenders that could cover the request.
        let mut funded = 0.0;
        let needed = sorted_budgets
            .iter()
            .position(|q| {
                funded += q;
                covered(c, funded)
            })
            .map_or(p.n + 1, |i| i + 1);
        if needed > 1 {
            lp.add_constraint((0..p.n).map(|l| (p.var(b, l), 1.0)).collect(), Relation::Ge, needed as f64);
        }
    }
    if with_blocking {
        for b in 0..p.k {
            let c = p.capacity[b];
            for (rank, &l) in p.borrower_order[b].iter().enumerate() {
                let j = p.var(b, l);
                lp.objective[kn + j] = -p.weights.lambda2;
                let mut coeffs = vec![(j, 1.0), (kn + j, 1.0)];
                coeffs.extend(p.borrower_order[b][..rank].iter().map(|&better| (p.var(b, better), 1.0)));
                let a = if p.budget[l] >= c { 1.0 } else { 0.0 };
                if a > 0.0 {
                    for &bp in p.lender_order[l].iter().take_while(|&&bp| bp != b) {
                        coeffs.push((p.var(bp, l), a));
                    }
                }
                lp.add_constraint(coeffs, Relation::Ge, 1.0);
            }
        }
    }
    lp
}

pub(crate) fn branch_and_bound(
    problem: &Problem<'_>,
    options: &SolverOptions,
    hint: Option<&BinaryMatrix>,
    pool: &mut super::CutPool,
) -> Result<Matching, SolverError> {
    let mut search = Search::new(problem, options);
    for start in super::heuristic::starting_points(problem, hint) {
        search.offer(&start);
    }
    let warm = search.add_root_cuts(pool.cuts_for(problem))?;
    search.run(search.free(), warm.as_ref())?;
    search.refine_lexicographically()?;
    let nodes = search.nodes();
    let stats = SolveStats { nodes, fell_back: false };
    match search.into_incumbent() {
        Some((_, x)) => Ok(problem.matching(x, SolveStatus::Optimal, stats)),
        None => {
            let core = super::heuristic::uncoverable_core(problem, options.node_limit);
            Ok(problem.infeasible(core, stats))
        }
    }
}
