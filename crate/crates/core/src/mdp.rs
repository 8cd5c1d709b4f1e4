//! Domain types and return arithmetic shared by the simulator, trainer and
//! evaluator.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Default number of decision steps: one simulated day at one-minute steps.
pub const DEFAULT_HORIZON: usize = 1440;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Conversions are sampled per won auction.
    #[default]
    Sampled,
    /// Each won auction contributes its expected conversion value.
    Expected,
}

/// One simulated campaign. Every episode runs against exactly one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub id: u64,
    pub budget: f64,
    pub horizon: usize,
    /// Expected number of auction opportunities over the whole horizon.
    pub audience_size: f64,
    /// Per-step Poisson arrival rates; sums to `audience_size`.
    pub opportunity_density: Vec<f64>,
    pub value_per_conversion: f64,
    pub true_cvr_mean: f64,
    /// Median of the log-normal highest competing price.
    pub competitor_price_scale: f64,
    pub seed: u64,
    /// Bid in force before the first decision (the controller's `a_{-1}`).
    pub initial_bid: f64,
    /// Log-space spread of per-auction conversion rates.
    #[serde(default = "default_spread")]
    pub cvr_spread: f64,
    /// Log-space spread of competitor prices.
    #[serde(default = "default_spread")]
    pub price_spread: f64,
    #[serde(default)]
    pub reward_mode: RewardMode,
    /// Per-step probability that the advertiser ends the campaign early.
    /// Zero disables the censoring switch.
    #[serde(default)]
    pub early_stop_rate: f64,
}

fn default_spread() -> f64 {
    0.5
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("campaign {}: {msg}", self.id)));
        for (name, v) in [
            ("budget", self.budget),
            ("audience_size", self.audience_size),
            ("value_per_conversion", self.value_per_conversion),
            ("competitor_price_scale", self.competitor_price_scale),
            ("initial_bid", self.initial_bid),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if !(self.true_cvr_mean > 0.0 && self.true_cvr_mean < 1.0) {
            return bad(format!(
                "true_cvr_mean must lie in (0,1), got {}",
                self.true_cvr_mean
            ));
        }
        for (name, v) in [
            ("cvr_spread", self.cvr_spread),
            ("price_spread", self.price_spread),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.early_stop_rate) {
            return bad(format!(
                "early_stop_rate must lie in [0,1), got {}",
                self.early_stop_rate
            ));
        }
        if self.horizon < 1 {
            return bad("horizon must be >= 1".into());
        }
        if self.opportunity_density.len() != self.horizon {
            return bad(format!(
                "opportunity_density has {} entries for horizon {}",
                self.opportunity_density.len(),
                self.horizon
            ));
        }
        if self
            .opportunity_density
            .iter()
            .any(|d| !(d.is_finite() && *d >= 0.0))
        {
            return bad("opportunity_density entries must be finite and >= 0".into());
        }
        let total: f64 = self.opportunity_density.iter().sum();
        if (total - self.audience_size).abs() > 1e-6 * self.audience_size {
            return bad(format!(
                "opportunity_density sums to {total}, expected audience_size {}",
                self.audience_size
            ));
        }
        Ok(())
    }

    /// Remaining budget at or below this balance ends the episode.
    pub fn budget_epsilon(&self) -> f64 {
        1e-6 * self.budget
    }
}

/// Raw running counters from which observations are derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacingCounters {
    pub budget: f64,
    pub spent: f64,
    pub step_index: usize,
    pub horizon: usize,
    /// Expected opportunities that have already elapsed.
    pub opportunities_passed: f64,
    pub audience_size: f64,
    pub bid_sum: f64,
    pub bid_count: usize,
    pub last_action: f64,
    /// Sum of pacing errors observed at earlier steps.
    pub past_error_sum: f64,
}

/// Features visible to the deployable base policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorObservation {
    pub fraction_budget_spent: f64,
    pub fraction_time_elapsed: f64,
    pub fraction_opportunities_passed: f64,
    pub avg_past_bid: f64,
    pub last_action: f64,
    /// `fraction_budget_spent - fraction_opportunities_passed`.
    pub pacing_error: f64,
    /// Sum of pacing errors up to and including this step.
    pub cumulative_pacing_error: f64,
}

impl ActorObservation {
    pub const LEN: usize = 7;
    pub const FIELD_NAMES: [&'static str; Self::LEN] = [
        "fraction_budget_spent",
        "fraction_time_elapsed",
        "fraction_opportunities_passed",
        "avg_past_bid",
        "last_action",
        "pacing_error",
        "cumulative_pacing_error",
    ];

    pub fn from_counters(c: &PacingCounters) -> Self {
        let fraction_budget_spent = clamp_unit(c.spent / c.budget);
        let fraction_time_elapsed = clamp_unit(c.step_index as f64 / c.horizon as f64);
        let fraction_opportunities_passed = clamp_unit(c.opportunities_passed / c.audience_size);
        let pacing_error = fraction_budget_spent - fraction_opportunities_passed;
        let avg_past_bid = if c.bid_count == 0 {
            0.0
        } else {
            c.bid_sum / c.bid_count as f64
        };
        Self {
            fraction_budget_spent,
            fraction_time_elapsed,
            fraction_opportunities_passed,
            avg_past_bid,
            last_action: c.last_action,
            pacing_error,
            cumulative_pacing_error: c.past_error_sum + pacing_error,
        }
    }

    pub fn to_array(&self) -> [f64; Self::LEN] {
        [
            self.fraction_budget_spent,
            self.fraction_time_elapsed,
            self.fraction_opportunities_passed,
            self.avg_past_bid,
            self.last_action,
            self.pacing_error,
            self.cumulative_pacing_error,
        ]
    }

    pub fn from_array(a: &[f64; Self::LEN]) -> Self {
        Self {
            fraction_budget_spent: a[0],
            fraction_time_elapsed: a[1],
            fraction_opportunities_passed: a[2],
            avg_past_bid: a[3],
            last_action: a[4],
            pacing_error: a[5],
            cumulative_pacing_error: a[6],
        }
    }
}

fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// The critic's extended view: every actor field plus campaign context that
/// the deployed policy is not allowed to read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticObservation {
    pub actor: ActorObservation,
    pub remaining_budget: f64,
    pub total_budget: f64,
    pub audience_size: f64,
    pub current_step_density: f64,
    pub step_index: usize,
    pub recent_win_rate: f64,
}

impl CriticObservation {
    pub const EXTRA_LEN: usize = 6;
    pub const LEN: usize = ActorObservation::LEN + Self::EXTRA_LEN;
    pub const EXTRA_FIELD_NAMES: [&'static str; Self::EXTRA_LEN] = [
        "remaining_budget",
        "total_budget",
        "audience_size",
        "current_step_density",
        "step_index",
        "recent_win_rate",
    ];

    pub fn field_names() -> Vec<&'static str> {
        ActorObservation::FIELD_NAMES
            .iter()
            .chain(Self::EXTRA_FIELD_NAMES.iter())
            .copied()
            .collect()
    }

    pub fn to_array(&self) -> [f64; Self::LEN] {
        let mut out = [0.0; Self::LEN];
        out[..ActorObservation::LEN].copy_from_slice(&self.actor.to_array());
        out[ActorObservation::LEN..].copy_from_slice(&[
            self.remaining_budget,
            self.total_budget,
            self.audience_size,
            self.current_step_density,
            self.step_index as f64,
            self.recent_win_rate,
        ]);
        out
    }

    pub fn from_array(a: &[f64; Self::LEN]) -> Self {
        let mut actor = [0.0; ActorObservation::LEN];
        actor.copy_from_slice(&a[..ActorObservation::LEN]);
        let e = &a[ActorObservation::LEN..];
        Self {
            actor: ActorObservation::from_array(&actor),
            remaining_budget: e[0],
            total_budget: e[1],
            audience_size: e[2],
            current_step_density: e[3],
            step_index: e[4] as usize,
            recent_win_rate: e[5],
        }
    }
}

/// One logged decision step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub actor_obs: ActorObservation,
    pub critic_obs: CriticObservation,
    pub action: f64,
    /// Deterministic base-policy output at collection time.
    pub behavior_mean: f64,
    pub reward: f64,
    pub next_actor_obs: ActorObservation,
    pub next_critic_obs: CriticObservation,
    pub done: bool,
    pub episode_id: u64,
    pub step_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    BudgetExhausted,
    HorizonReached,
    /// Only produced when the early-stop censoring switch is enabled.
    AdvertiserStopped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeReturn {
    pub undiscounted: f64,
    pub discounted: f64,
    pub length: usize,
    pub terminal_reason: TerminalReason,
}

fn check_inputs(rewards: &[f64], gamma: f64) -> Result<()> {
    ensure_finite("gamma", gamma)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "gamma must lie in [0,1], got {gamma}"
        )));
    }
    for r in rewards {
        ensure_finite("reward", *r)?;
    }
    Ok(())
}

/// `sum_k gamma^k * rewards[k]`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> Result<f64> {
    check_inputs(rewards, gamma)?;
    Ok(rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc))
}

/// Discounted return of every suffix of `rewards`.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_inputs(rewards, gamma)?;
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Forward (left) fold with explicit powers, independent of the Horner
    // recursion used by `discounted_return`.
    fn left_fold_oracle(rewards: &[f64], gamma: f64) -> f64 {
        let mut total = 0.0;
        let mut weight = 1.0;
        for r in rewards {
            total += weight * r;
            weight *= gamma;
        }
        total
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn discounted_return_examples() {
        assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5).unwrap(), 1.75);
        assert_eq!(discounted_return(&[7.0, 3.0, 9.0], 0.0).unwrap(), 7.0);
        assert_eq!(discounted_return(&[], 0.9).unwrap(), 0.0);
    }

    #[test]
    fn discounted_return_matches_left_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rewards: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let got = discounted_return(&rewards, 0.9998).unwrap();
        assert!(rel_close(got, left_fold_oracle(&rewards, 0.9998), 1e-9));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            discounted_return(&[1.0, f64::NAN], 0.5),
            Err(Error::InvalidArgument(_))
        ));
        assert!(discounted_return(&[1.0], f64::INFINITY).is_err());
        assert!(returns_to_go(&[1.0], 1.5).is_err());
    }

    #[test]
    fn returns_to_go_examples() {
        assert_eq!(returns_to_go(&[1.0, 1.0], 1.0).unwrap(), vec![2.0, 1.0]);
        assert_eq!(returns_to_go(&[5.0], 0.3).unwrap(), vec![5.0]);
    }

    #[test]
    fn returns_to_go_matches_suffix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rewards: Vec<f64> = (0..50).map(|_| rng.random::<f64>() * 10.0).collect();
        let rtg = returns_to_go(&rewards, 0.99).unwrap();
        assert_eq!(rtg.len(), rewards.len());
        for t in 0..rewards.len() {
            assert!(rel_close(
                rtg[t],
                left_fold_oracle(&rewards[t..], 0.99),
                1e-9
            ));
        }
    }

    #[test]
    fn fresh_counters_give_zero_fractions() {
        let c = PacingCounters {
            budget: 100.0,
            spent: 0.0,
            step_index: 0,
            horizon: 10,
            opportunities_passed: 0.0,
            audience_size: 1000.0,
            bid_sum: 0.0,
            bid_count: 0,
            last_action: 1.5,
            past_error_sum: 0.0,
        };
        let o = ActorObservation::from_counters(&c);
        assert_eq!(o.fraction_budget_spent, 0.0);
        assert_eq!(o.pacing_error, 0.0);
        assert_eq!(o.avg_past_bid, 0.0);
        assert_eq!(o.last_action, 1.5);
        assert_eq!(ActorObservation::from_array(&o.to_array()), o);
    }

    proptest! {
        #[test]
        fn monotone_in_each_reward(
            rewards in prop::collection::vec(0.0f64..100.0, 1..30),
            idx in 0usize..30,
            bump in 0.0f64..10.0,
            gamma in 0.0f64..=1.0,
        ) {
            let idx = idx % rewards.len();
            let mut raised = rewards.clone();
            raised[idx] += bump;
            prop_assert!(discounted_return(&raised, gamma).unwrap() >= discounted_return(&rewards, gamma).unwrap());
        }

        #[test]
        fn bellman_recursion_holds(
            rewards in prop::collection::vec(0.0f64..100.0, 2..40),
            gamma in 0.0f64..=1.0,
        ) {
            let rtg = returns_to_go(&rewards, gamma).unwrap();
            for t in 0..rewards.len() - 1 {
                let rhs = rewards[t] + gamma * rtg[t + 1];
                prop_assert!((rtg[t] - rhs).abs() <= 1e-12 * rtg[t].abs().max(1.0));
            }
        }

        #[test]
        fn discounted_not_above_undiscounted(
            rewards in prop::collection::vec(0.0f64..100.0, 0..40),
            gamma in 0.0f64..=1.0,
        ) {
            let undiscounted: f64 = rewards.iter().sum();
            prop_assert!(discounted_return(&rewards, gamma).unwrap() <= undiscounted + 1e-9);
        }

        #[test]
        fn observation_is_deterministic(
            spent in 0.0f64..200.0,
            step in 0usize..100,
            passed in 0.0f64..1200.0,
            past in -5.0f64..5.0,
        ) {
            let c = PacingCounters {
                budget: 100.0, spent, step_index: step, horizon: 100,
                opportunities_passed: passed, audience_size: 1000.0,
                bid_sum: 3.0, bid_count: 2, last_action: 1.0, past_error_sum: past,
            };
            let a = ActorObservation::from_counters(&c);
            let b = ActorObservation::from_counters(&c);
            prop_assert_eq!(a.to_array().map(f64::to_bits), b.to_array().map(f64::to_bits));
            prop_assert!((0.0..=1.0).contains(&a.fraction_budget_spent));
            prop_assert!((0.0..=1.0).contains(&a.fraction_opportunities_passed));
            prop_assert_eq!(a.pacing_error, a.fraction_budget_spent - a.fraction_opportunities_passed);
        }
    }
}
