//! Deferred acceptance adapted to budget cover, plus repair and local search
//! used for incumbents and for heuristic mode.

use super::bnb;
use super::problem::{covered, Problem};
use super::{
    BinaryMatrix, Matching, ObjectiveWeights, SolveStats, SolveStatus, SolverError, SolverOptions,
};
use crate::model::MarketInstance;
use std::collections::VecDeque;

// Passes of single-lender moves before local search gives up.
const MAX_PASSES: usize = 64;

/// Lender-proposing deferred acceptance under the market's own preferences.
///
/// A borrower holds every proposer until it is covered, then keeps shedding
/// its least preferred held lender while coverage survives the drop. The
/// result matches each lender at most once; coverage is not guaranteed.
pub fn deferred_acceptance_warm_start(instance: &MarketInstance) -> BinaryMatrix {
    let problem = Problem::new(
        instance,
        instance.lender_utility.clone(),
        &instance.lender_utility,
        ObjectiveWeights::default(),
    )
    .expect("instance dimensions are consistent");
    deferred_acceptance(&problem)
}

pub(crate) fn deferred_acceptance(p: &Problem<'_>) -> BinaryMatrix {
    let mut next = vec![0usize; p.n];
    let mut held: Vec<Vec<usize>> = vec![Vec::new(); p.k];
    let mut held_sum = vec![0.0; p.k];
    let mut queue: VecDeque<usize> = (0..p.n).collect();
    while let Some(l) = queue.pop_front() {
        let Some(&b) = p.lender_order[l].get(next[l]) else {
            continue;
        };
        next[l] += 1;
        held[b].push(l);
        held_sum[b] += p.budget[l];
        while covered(p.capacity[b], held_sum[b]) {
            let (pos, &worst) = held[b]
                .iter()
                .enumerate()
                .min_by(|a, c| p.borrower_pref[b][*a.1].total_cmp(&p.borrower_pref[b][*c.1]))
                .expect("covered borrower holds someone");
            if !covered(p.capacity[b], held_sum[b] - p.budget[worst]) {
                break;
            }
            held[b].swap_remove(pos);
            held_sum[b] -= p.budget[worst];
            queue.push_back(worst);
        }
    }
    let mut x = BinaryMatrix::zeros(p.k, p.n);
    for (b, lenders) in held.iter().enumerate() {
        for &l in lenders {
            x.set(b, l, true);
        }
    }
    x
}

fn funding(p: &Problem<'_>, lender_match: &[Option<usize>]) -> Vec<f64> {
    let mut funded = vec![0.0; p.k];
    for (l, b) in lender_match.iter().enumerate() {
        if let Some(b) = *b {
            funded[b] += p.budget[l];
        }
    }
    funded
}

/// Moves lenders into uncovered borrowers from the unmatched pool or from
/// borrowers with surplus. Returns `None` when stuck.
pub(crate) fn repair(p: &Problem<'_>, x: &BinaryMatrix) -> Option<BinaryMatrix> {
    let mut lm = x.lender_match();
    let mut funded = funding(p, &lm);
    for _ in 0..p.n * p.k + 1 {
        let Some(b) = (0..p.k).find(|&b| !covered(p.capacity[b], funded[b])) else {
            return Some(BinaryMatrix::from_lender_match(p.k, &lm));
        };
        let candidate = (0..p.n)
            .filter(|&l| match lm[l] {
                None => true,
                Some(cur) => cur != b && covered(p.capacity[cur], funded[cur] - p.budget[l]),
            })
            .map(|l| {
                let loss = lm[l].map_or(0.0, |cur| p.utility[l][cur]);
                (l, p.utility[l][b] - loss)
            })
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        let (l, _) = candidate?;
        if let Some(cur) = lm[l] {
            funded[cur] -= p.budget[l];
        }
        lm[l] = Some(b);
        funded[b] += p.budget[l];
    }
    None
}

/// First-improvement descent over single-lender moves that keep every
/// borrower covered. `x` must already cover.
pub(crate) fn local_search(p: &Problem<'_>, x: BinaryMatrix) -> BinaryMatrix {
    let mut lm = x.lender_match();
    let mut funded = funding(p, &lm);
    let mut current = p.evaluate(&x);
    for _ in 0..MAX_PASSES {
        let mut improved = false;
        for l in 0..p.n {
            let from = lm[l];
            if let Some(b) = from {
                if !covered(p.capacity[b], funded[b] - p.budget[l]) {
                    continue;
                }
            }
            for to in (0..p.k).map(Some).chain(std::iter::once(None)) {
                if to == from {
                    continue;
                }
                lm[l] = to;
                let value = p.evaluate(&BinaryMatrix::from_lender_match(p.k, &lm));
                if value > current + 1e-12 * current.abs().max(1.0) {
                    current = value;
                    if let Some(b) = from {
                        funded[b] -= p.budget[l];
                    }
                    if let Some(b) = to {
                        funded[b] += p.budget[l];
                    }
                    improved = true;
                    break;
                }
                lm[l] = from;
            }
        }
        if !improved {
            break;
        }
    }
    BinaryMatrix::from_lender_match(p.k, &lm)
}

/// Covering starting points for the exact search: the (repaired) deferred
/// acceptance outcome and the caller's hint, each polished by local search.
pub(crate) fn starting_points(p: &Problem<'_>, hint: Option<&BinaryMatrix>) -> Vec<BinaryMatrix> {
    let mut starts = Vec::new();
    let da = deferred_acceptance(p);
    let da = if p.covers(&da) { Some(da) } else { repair(p, &da) };
    starts.extend(da);
    if let Some(h) = hint {
        let valid = h.rows() == p.k
            && h.cols() == p.n
            && (0..p.n).all(|l| (0..p.k).filter(|&b| h.get(b, l)).count() <= 1);
        if valid && p.covers(h) {
            starts.push(h.clone());
        }
    }
    starts.into_iter().map(|x| local_search(p, x)).collect()
}

pub(crate) fn solve_heuristic(
    p: &Problem<'_>,
    options: &SolverOptions,
    hint: Option<&BinaryMatrix>,
) -> Result<Matching, SolverError> {
    let best = starting_points(p, hint)
        .into_iter()
        .map(|x| (p.evaluate(&x), x))
        .fold(None, |acc: Option<(f64, BinaryMatrix)>, (v, x)| {
            let current = acc.as_ref().map(|(o, b)| (*o, b));
            if super::improves(v, &x, current) {
                Some((v, x))
            } else {
                acc
            }
        });
    if let Some((_, x)) = best {
        return Ok(p.matching(x, SolveStatus::Heuristic, SolveStats::default()));
    }
    // No covering start: let a node-limited exact search look for one.
    let exact = SolverOptions { mode: super::SolverMode::Exact, ..*options };
    match bnb::branch_and_bound(p, &exact, hint, &mut super::CutPool::default()) {
        Ok(mut m) => {
            if m.status == SolveStatus::Optimal {
                m.status = SolveStatus::Heuristic;
            }
            Ok(m)
        }
        Err(SolverError::NodeLimitExceeded { incumbent: Some(m), .. }) => Ok(*m),
        Err(e) => Err(e),
    }
}

/// Depth-first test whether the lenders can cover every capacity in
/// `capacities`. `None` when the node budget runs out.
fn coverable(capacities: &[f64], budgets: &[f64], node_limit: usize) -> Option<bool> {
    let mut budgets = budgets.to_vec();
    budgets.sort_by(|a, b| b.total_cmp(a));
    let mut deficits = capacities.to_vec();
    let mut suffix = vec![0.0; budgets.len() + 1];
    for i in (0..budgets.len()).rev() {
        suffix[i] = suffix[i + 1] + budgets[i];
    }
    let mut nodes = 0usize;

    fn dfs(
        i: usize,
        budgets: &[f64],
        suffix: &[f64],
        deficits: &mut Vec<f64>,
        capacities: &[f64],
        nodes: &mut usize,
        limit: usize,
    ) -> Option<bool> {
        *nodes += 1;
        if *nodes > limit {
            return None;
        }
        let open: Vec<usize> = (0..deficits.len())
            .filter(|&b| !covered(capacities[b], capacities[b] - deficits[b]))
            .collect();
        if open.is_empty() {
            return Some(true);
        }
        let need: f64 = open.iter().map(|&b| deficits[b]).sum();
        if i == budgets.len() || suffix[i] < need - 1e-9 * need.max(1.0) {
            return Some(false);
        }
        let mut tried: Vec<f64> = Vec::new();
        for &b in &open {
            if tried.contains(&deficits[b]) {
                continue;
            }
            tried.push(deficits[b]);
            deficits[b] -= budgets[i];
            let r = dfs(i + 1, budgets, suffix, deficits, capacities, nodes, limit);
            deficits[b] += budgets[i];
            match r {
                Some(true) | None => return r,
                Some(false) => {}
            }
        }
        dfs(i + 1, budgets, suffix, deficits, capacities, nodes, limit)
    }

    dfs(0, &budgets, &suffix, &mut deficits, capacities, &mut nodes, node_limit)
}

/// Deletion filter over borrowers: drops each borrower whose removal leaves
/// the rest still uncoverable.
pub(crate) fn uncoverable_core(p: &Problem<'_>, node_limit: usize) -> Vec<usize> {
    let mut core: Vec<usize> = (0..p.k).collect();
    for b in 0..p.k {
        let rest: Vec<usize> = core.iter().copied().filter(|&x| x != b).collect();
        let caps: Vec<f64> = rest.iter().map(|&x| p.capacity[x]).collect();
        if coverable(&caps, p.budget, node_limit) == Some(false) {
            core = rest;
        }
    }
    core
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverable_small_cases() {
        assert_eq!(coverable(&[3.0, 3.0], &[2.0, 2.0, 2.0], 1000), Some(false));
        assert_eq!(coverable(&[3.0], &[2.0, 2.0, 2.0], 1000), Some(true));
        assert_eq!(coverable(&[4.0, 2.0], &[2.0, 2.0, 2.0], 1000), Some(true));
        assert_eq!(coverable(&[], &[1.0], 1000), Some(true));
    }
}
