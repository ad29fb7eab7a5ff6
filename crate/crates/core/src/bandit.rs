//! Per-lender UCB state: empirical means with the initial utility counted as
//! one pseudo-observation, match counts, indices and reward sampling.
//!
//! All matrices are lender-major (`[l][b]`), matching the utility override
//! the solver expects.

use crate::model::MarketInstance;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Spacing used to make tied index rows strictly ordered.
pub const TIE_BREAK_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BanditError {
    #[error("pair (lender {lender}, borrower {borrower}) is out of range")]
    IndexOutOfRange { lender: usize, borrower: usize },
    #[error("invalid reward model: {0}")]
    InvalidRewardModel(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    /// Initial utilities `u_l(b)`, the pseudo-observation.
    pub prior: Vec<Vec<f64>>,
    pub reward_sums: Vec<Vec<f64>>,
    pub match_count: Vec<Vec<u64>>,
    pub empirical_mean: Vec<Vec<f64>>,
    pub step: u64,
}

pub fn init_state(instance: &MarketInstance) -> BanditState {
    let n = instance.num_lenders;
    let k = instance.num_borrowers;
    BanditState {
        prior: instance.lender_utility.clone(),
        reward_sums: vec![vec![0.0; k]; n],
        match_count: vec![vec![0; k]; n],
        empirical_mean: instance.lender_utility.clone(),
        step: 0,
    }
}

impl BanditState {
    pub fn num_lenders(&self) -> usize {
        self.prior.len()
    }

    pub fn num_borrowers(&self) -> usize {
        self.prior.first().map_or(0, Vec::len)
    }

    /// Moves the clock to the next round.
    pub fn advance(&mut self) {
        self.step += 1;
    }

    fn check(&self, lender: usize, borrower: usize) -> Result<(), BanditError> {
        if lender >= self.num_lenders() || borrower >= self.num_borrowers() {
            return Err(BanditError::IndexOutOfRange { lender, borrower });
        }
        Ok(())
    }

    /// Records a reward for the pair and refreshes its empirical mean.
    pub fn update_on_match(&mut self, lender: usize, borrower: usize, reward: f64) -> Result<(), BanditError> {
        self.check(lender, borrower)?;
        self.reward_sums[lender][borrower] += reward;
        self.match_count[lender][borrower] += 1;
        self.empirical_mean[lender][borrower] = (self.prior[lender][borrower] + self.reward_sums[lender][borrower])
            / (1 + self.match_count[lender][borrower]) as f64;
        Ok(())
    }

    /// `μ̂ + sqrt(3 ln t / (2T))`, or `f64::INFINITY` for a pair never matched.
    pub fn ucb_index(&self, lender: usize, borrower: usize) -> Result<f64, BanditError> {
        self.check(lender, borrower)?;
        let count = self.match_count[lender][borrower];
        if count == 0 {
            return Ok(f64::INFINITY);
        }
        Ok(ucb_value(self.empirical_mean[lender][borrower], self.step, count))
    }

    /// Index matrix ready for the solver: never-matched pairs get a finite
    /// constant above every finite index, and each row is made strict.
    ///
    /// With `prior_for_unvisited`, never-matched pairs use their prior
    /// instead, which starts the loop from the true lender utilities.
    pub fn current_utilities(&self, horizon: u64, prior_for_unvisited: bool) -> Vec<Vec<f64>> {
        let mut raw: Vec<Vec<f64>> = (0..self.num_lenders())
            .map(|l| {
                (0..self.num_borrowers())
                    .map(|b| match self.match_count[l][b] {
                        0 if prior_for_unvisited => self.prior[l][b],
                        0 => f64::INFINITY,
                        count => ucb_value(self.empirical_mean[l][b], self.step, count),
                    })
                    .collect()
            })
            .collect();
        let top = raw.iter().flatten().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        let sentinel = sentinel_constant(horizon).max(top + 1.0);
        for row in &mut raw {
            for v in row.iter_mut() {
                if v.is_infinite() {
                    *v = sentinel;
                }
            }
            make_strict(row);
        }
        raw
    }
}

/// `μ̂ + sqrt(3 ln t / (2T))` for `count ≥ 1`.
pub fn ucb_value(mean: f64, step: u64, count: u64) -> f64 {
    let t = step.max(1) as f64;
    mean + (3.0 * t.ln() / (2.0 * count as f64)).sqrt()
}

/// `2 + sqrt(3 ln H / 2)`: above any index reachable with rewards in `[0, 1]`.
pub fn sentinel_constant(horizon: u64) -> f64 {
    2.0 + (3.0 * (horizon.max(1) as f64).ln() / 2.0).sqrt()
}

/// Lowers entries just enough that the row is strictly decreasing in its
/// sorted order; equal values keep their index order.
fn make_strict(row: &mut [f64]) {
    let order: Vec<usize> = {
        let mut o: Vec<usize> = (0..row.len()).collect();
        o.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        o
    };
    let mut prev: Option<f64> = None;
    for &i in &order {
        if let Some(p) = prev {
            row[i] = row[i].min(p - TIE_BREAK_STEP * p.abs().max(1.0));
        }
        prev = Some(row[i]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardFamily {
    Gaussian,
    Deterministic,
}

impl FromStr for RewardFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "deterministic" => Ok(Self::Deterministic),
            other => Err(format!("unknown reward family `{other}`")),
        }
    }
}

impl fmt::Display for RewardFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardFamily::Gaussian => "gaussian",
            RewardFamily::Deterministic => "deterministic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub family: RewardFamily,
    pub sigma: f64,
}

impl Default for RewardModel {
    fn default() -> Self {
        Self::gaussian(1.0)
    }
}

impl RewardModel {
    pub fn gaussian(sigma: f64) -> Self {
        Self { family: RewardFamily::Gaussian, sigma }
    }

    pub fn deterministic() -> Self {
        Self { family: RewardFamily::Deterministic, sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<(), BanditError> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(BanditError::InvalidRewardModel(format!("sigma {} must be finite and >= 0", self.sigma)));
        }
        if self.family == RewardFamily::Deterministic && self.sigma != 0.0 {
            return Err(BanditError::InvalidRewardModel("deterministic rewards need sigma = 0".into()));
        }
        Ok(())
    }
}

/// Gaussian draws always consume one normal variate, even at `σ = 0`, so
/// the random stream does not depend on the scale.
pub fn sample_reward<R: Rng + ?Sized>(model: &RewardModel, mean: f64, rng: &mut R) -> f64 {
    match model.family {
        RewardFamily::Deterministic => mean,
        RewardFamily::Gaussian => {
            let z: f64 = rng.sample(StandardNormal);
            mean + model.sigma * z
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(k: usize, n: usize, seed: u64) -> MarketInstance {
        crate::model::generate_instance(&crate::model::GenerationConfig {
            num_borrowers: k,
            num_lenders: n,
            capacity_range: (1.0, 2.0),
            budget_range: (2.0, 5.0),
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn fresh_state_is_all_sentinel() {
        let inst = instance(3, 4, 1);
        let s = init_state(&inst);
        assert_eq!(s.step, 0);
        for l in 0..4 {
            for b in 0..3 {
                assert_eq!(s.match_count[l][b], 0);
                assert_eq!(s.ucb_index(l, b).unwrap(), f64::INFINITY);
                assert_eq!(s.empirical_mean[l][b], inst.lender_utility[l][b]);
            }
        }
        assert_eq!(s, init_state(&inst));
    }

    #[test]
    fn mean_update_examples() {
        let mut inst = instance(1, 1, 0);
        inst.lender_utility = vec![vec![0.4]];
        let mut s = init_state(&inst);
        assert_eq!(s.empirical_mean[0][0], 0.4);
        s.update_on_match(0, 0, 0.6).unwrap();
        assert!((s.empirical_mean[0][0] - 0.5).abs() < 1e-15);

        inst.lender_utility = vec![vec![0.5]];
        let mut s = init_state(&inst);
        s.update_on_match(0, 0, 0.2).unwrap();
        s.update_on_match(0, 0, 0.8).unwrap();
        assert!((s.empirical_mean[0][0] - 0.5).abs() < 1e-15);
        assert_eq!(
            s.update_on_match(1, 0, 0.0),
            Err(BanditError::IndexOutOfRange { lender: 1, borrower: 0 })
        );
    }

    #[test]
    fn index_examples() {
        let mut inst = instance(1, 1, 0);
        inst.lender_utility = vec![vec![0.5]];
        let mut s = init_state(&inst);
        s.advance();
        s.update_on_match(0, 0, 0.5).unwrap();
        assert_eq!(s.ucb_index(0, 0).unwrap(), 0.5);

        let expected = 0.2 + (3.0 * 8f64.ln() / 4.0).sqrt();
        assert!((ucb_value(0.2, 8, 2) - expected).abs() < 1e-12);
        assert!((ucb_value(0.2, 8, 2) - 1.4489).abs() < 1e-4);
    }

    #[test]
    fn fresh_utilities_dominate_and_are_strict() {
        let inst = instance(3, 2, 4);
        let s = init_state(&inst);
        let cu = s.current_utilities(100, false);
        let c = sentinel_constant(100);
        for row in &cu {
            assert_eq!(row[0], c);
            assert_eq!(row[1], c - TIE_BREAK_STEP * c);
            assert!(row[0] > row[1] && row[1] > row[2]);
            assert!(crate::model::rank_descending(row).is_some());
        }
    }

    #[test]
    fn single_match_is_dominated() {
        let inst = instance(3, 2, 4);
        let mut s = init_state(&inst);
        s.advance();
        s.update_on_match(1, 2, 0.7).unwrap();
        let cu = s.current_utilities(100, false);
        assert_eq!(cu[1][2], s.ucb_index(1, 2).unwrap());
        assert!(cu[1][0] > cu[1][2] && cu[1][1] > cu[1][2]);
    }

    #[test]
    fn sentinel_rises_above_large_means() {
        let inst = instance(2, 1, 4);
        let mut s = init_state(&inst);
        s.advance();
        s.update_on_match(0, 0, 50.0).unwrap();
        let cu = s.current_utilities(10, false);
        assert!(cu[0][1] > cu[0][0]);
    }

    #[test]
    fn prior_mode_starts_from_true_utilities() {
        let inst = instance(3, 4, 9);
        let cu = init_state(&inst).current_utilities(100, true);
        assert_eq!(cu, inst.lender_utility);
    }

    #[test]
    fn rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_reward(&RewardModel::deterministic(), 0.7, &mut rng), 0.7);
        assert_eq!(sample_reward(&RewardModel::gaussian(0.0), 0.7, &mut rng), 0.7);
        let a = sample_reward(&RewardModel::gaussian(1.0), 0.3, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_reward(&RewardModel::gaussian(1.0), 0.3, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let model = RewardModel::default();
        let draws = 100_000;
        let mean: f64 = (0..draws).map(|_| sample_reward(&model, 0.3, &mut rng)).sum::<f64>() / draws as f64;
        assert!((mean - 0.3).abs() < 0.02, "{mean}");
    }

    #[test]
    fn reward_model_validation() {
        assert!(RewardModel::default().validate().is_ok());
        assert!(RewardModel::deterministic().validate().is_ok());
        assert!(RewardModel::gaussian(-1.0).validate().is_err());
        assert!(RewardModel { family: RewardFamily::Deterministic, sigma: 0.5 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn mean_matches_history(
            prior in 0.0f64..1.0,
            rewards in proptest::collection::vec(-3.0f64..4.0, 0..40),
        ) {
            let mut inst = instance(1, 1, 0);
            inst.lender_utility = vec![vec![prior]];
            let mut s = init_state(&inst);
            for &r in &rewards {
                s.update_on_match(0, 0, r).unwrap();
            }
            let direct = (prior + rewards.iter().sum::<f64>()) / (1 + rewards.len()) as f64;
            prop_assert!((s.empirical_mean[0][0] - direct).abs() < 1e-12);
        }

        #[test]
        fn bonus_monotone(mean in 0.0f64..1.0, t in 2u64..10_000, count in 1u64..1000) {
            prop_assert!(ucb_value(mean, t, count) > ucb_value(mean, t, count + 1));
            prop_assert!(ucb_value(mean, t + 1, count) > ucb_value(mean, t, count));
        }

        #[test]
        fn strict_rows_keep_raw_order(
            seed in 0u64..500,
            plays in proptest::collection::vec((0usize..4, 0usize..3, 0.0f64..1.0), 0..30),
        ) {
            let inst = instance(3, 4, seed);
            let mut s = init_state(&inst);
            for &(l, b, r) in &plays {
                s.advance();
                s.update_on_match(l, b, r).unwrap();
            }
            let cu = s.current_utilities(1000, false);
            for l in 0..4 {
                prop_assert!(crate::model::rank_descending(&cu[l]).is_some());
                for b in 0..3 {
                    for b2 in 0..3 {
                        let (x, y) = (s.ucb_index(l, b).unwrap(), s.ucb_index(l, b2).unwrap());
                        if x > y {
                            prop_assert!(cu[l][b] > cu[l][b2]);
                        }
                    }
                }
            }
        }
    }
}
