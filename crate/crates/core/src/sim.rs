//! Episodic bidding environment: one decision per step, a Poisson batch of
//! second-price auctions per step, eCVR-scaled bids and budget accounting.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::mdp::{
    ActorObservation, CampaignConfig, CriticObservation, PacingCounters, RewardMode,
    TerminalReason, DEFAULT_HORIZON,
};
use crate::rng::{derive_seed, derive_seed3, rng_from_seed, SimRng};

/// Trailing window (in steps) for `recent_win_rate`.
pub const WIN_RATE_WINDOW: usize = 10;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepWins {
    pub entered: u64,
    pub won: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub config: Arc<CampaignConfig>,
    pub step_index: usize,
    pub remaining_budget: f64,
    /// Expected opportunities elapsed so far, from the density profile.
    pub opportunities_passed: f64,
    pub spend_history: Vec<f64>,
    pub bid_history: Vec<f64>,
    pub win_history: Vec<StepWins>,
    pub last_action: f64,
    past_error_sum: f64,
    bid_sum: f64,
    terminal_reason: Option<TerminalReason>,
    pub rng: SimRng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub auctions_entered: u64,
    pub auctions_won: u64,
    pub conversions: u64,
    pub spend: f64,
    pub done: bool,
    pub terminal_reason: Option<TerminalReason>,
}

impl EnvState {
    /// Starts an episode. The auction stream depends on `(config.seed, seed)`
    /// only, so two policies reset with the same pair face identical auctions.
    pub fn reset(config: impl Into<Arc<CampaignConfig>>, seed: u64) -> Result<Self> {
        let config = config.into();
        config.validate()?;
        let rng = rng_from_seed(derive_seed(config.seed, seed));
        Ok(Self {
            step_index: 0,
            remaining_budget: config.budget,
            opportunities_passed: 0.0,
            spend_history: Vec::new(),
            bid_history: Vec::new(),
            win_history: Vec::new(),
            last_action: config.initial_bid,
            past_error_sum: 0.0,
            bid_sum: 0.0,
            terminal_reason: None,
            rng,
            config,
        })
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal_reason.is_some()
    }

    pub fn terminal_reason(&self) -> Option<TerminalReason> {
        self.terminal_reason
    }

    pub fn spent(&self) -> f64 {
        self.config.budget - self.remaining_budget
    }

    fn counters(&self) -> PacingCounters {
        PacingCounters {
            budget: self.config.budget,
            spent: self.spent(),
            step_index: self.step_index,
            horizon: self.config.horizon,
            opportunities_passed: self.opportunities_passed,
            audience_size: self.config.audience_size,
            bid_sum: self.bid_sum,
            bid_count: self.bid_history.len(),
            last_action: self.last_action,
            past_error_sum: self.past_error_sum,
        }
    }

    pub fn observe(&self) -> ActorObservation {
        ActorObservation::from_counters(&self.counters())
    }

    pub fn observe_critic(&self) -> CriticObservation {
        let window = &self.win_history[self.win_history.len().saturating_sub(WIN_RATE_WINDOW)..];
        let (entered, won) = window
            .iter()
            .fold((0u64, 0u64), |(e, w), s| (e + s.entered, w + s.won));
        let recent_win_rate = if entered == 0 {
            0.0
        } else {
            won as f64 / entered as f64
        };
        CriticObservation {
            actor: self.observe(),
            remaining_budget: self.remaining_budget,
            total_budget: self.config.budget,
            audience_size: self.config.audience_size,
            current_step_density: self
                .config
                .opportunity_density
                .get(self.step_index)
                .copied()
                .unwrap_or(0.0),
            step_index: self.step_index,
            recent_win_rate,
        }
    }

    /// Runs one decision step with bid `action`.
    pub fn step(&mut self, action: f64) -> Result<StepOutcome> {
        if self.is_terminal() {
            return Err(Error::Contract("step called on a terminal state".into()));
        }
        if !(action.is_finite() && action >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bid must be finite and >= 0, got {action}"
            )));
        }
        let cfg = Arc::clone(&self.config);
        let t = self.step_index;
        let pacing_error = self.observe().pacing_error;

        let rate = cfg.opportunity_density[t];
        let arrivals = if rate > 0.0 {
            let poisson = Poisson::new(rate)
                .map_err(|e| Error::Config(format!("bad arrival rate {rate}: {e}")))?;
            poisson.sample(&mut self.rng) as u64
        } else {
            0
        };

        let cvr_shift = -0.5 * cfg.cvr_spread * cfg.cvr_spread;
        let mut remaining = self.remaining_budget;
        let mut won = 0u64;
        let mut conversions = 0u64;
        let mut reward = 0.0;
        for _ in 0..arrivals {
            // All three draws happen for every auction, won or not, so paired
            // evaluations stay on a common random stream.
            let z_cvr: f64 = self.rng.sample(StandardNormal);
            let z_price: f64 = self.rng.sample(StandardNormal);
            let u: f64 = self.rng.random();
            let cvr = (cfg.true_cvr_mean * (cfg.cvr_spread * z_cvr + cvr_shift).exp()).min(1.0);
            let price = cfg.competitor_price_scale * (cfg.price_spread * z_price).exp();
            if action * cvr > price && price <= remaining {
                remaining -= price;
                won += 1;
                match cfg.reward_mode {
                    RewardMode::Sampled => {
                        if u < cvr {
                            conversions += 1;
                            reward += cfg.value_per_conversion;
                        }
                    }
                    RewardMode::Expected => reward += cfg.value_per_conversion * cvr,
                }
            }
        }
        let stop_draw = if cfg.early_stop_rate > 0.0 {
            Some(self.rng.random::<f64>())
        } else {
            None
        };

        let spend = self.remaining_budget - remaining;
        self.remaining_budget = remaining;
        self.spend_history.push(spend);
        self.bid_history.push(action);
        self.bid_sum += action;
        self.win_history.push(StepWins {
            entered: arrivals,
            won,
        });
        self.last_action = action;
        self.past_error_sum += pacing_error;
        self.opportunities_passed += rate;
        self.step_index += 1;

        let reason = if self.remaining_budget <= cfg.budget_epsilon() {
            Some(TerminalReason::BudgetExhausted)
        } else if self.step_index >= cfg.horizon {
            Some(TerminalReason::HorizonReached)
        } else if stop_draw.is_some_and(|u| u < cfg.early_stop_rate) {
            Some(TerminalReason::AdvertiserStopped)
        } else {
            None
        };
        self.terminal_reason = reason;

        Ok(StepOutcome {
            reward,
            auctions_entered: arrivals,
            auctions_won: won,
            conversions,
            spend,
            done: reason.is_some(),
            terminal_reason: reason,
        })
    }
}

/// Randomization bounds for [`sample_configs`]. Pairs are inclusive `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRanges {
    pub horizon: usize,
    pub budget: (f64, f64),
    pub audience_size: (f64, f64),
    /// Number of smooth bumps in the opportunity density.
    pub bumps: (usize, usize),
    /// Bump width as a fraction of the horizon.
    pub bump_width: (f64, f64),
    pub value_per_conversion: (f64, f64),
    pub true_cvr_mean: (f64, f64),
    pub competitor_price_scale: (f64, f64),
    /// Initial bid as a multiple of the expected-spend-matching constant bid.
    pub initial_bid_factor: (f64, f64),
    pub cvr_spread: f64,
    pub price_spread: f64,
    #[serde(default)]
    pub reward_mode: RewardMode,
    #[serde(default)]
    pub early_stop_rate: f64,
}

impl Default for ConfigRanges {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            budget: (300.0, 3000.0),
            audience_size: (2.0e4, 1.0e5),
            bumps: (1, 4),
            bump_width: (0.05, 0.3),
            value_per_conversion: (1.0, 1.0),
            true_cvr_mean: (0.05, 0.15),
            competitor_price_scale: (0.5, 2.0),
            initial_bid_factor: (0.5, 2.0),
            cvr_spread: 0.5,
            price_spread: 0.5,
            reward_mode: RewardMode::Sampled,
            early_stop_rate: 0.0,
        }
    }
}

impl ConfigRanges {
    /// Default ranges with a 48-step day, for single-machine experiments.
    pub fn desk() -> Self {
        Self {
            horizon: 48,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, (lo, hi): (f64, f64), positive: bool| -> Result<()> {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || (positive && lo <= 0.0) {
                return Err(Error::Config(format!(
                    "range {name} = ({lo}, {hi}) is empty or inverted"
                )));
            }
            Ok(())
        };
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        check("budget", self.budget, true)?;
        check("audience_size", self.audience_size, true)?;
        check("bump_width", self.bump_width, true)?;
        check("value_per_conversion", self.value_per_conversion, true)?;
        check("true_cvr_mean", self.true_cvr_mean, true)?;
        check("competitor_price_scale", self.competitor_price_scale, true)?;
        check("initial_bid_factor", self.initial_bid_factor, true)?;
        if self.true_cvr_mean.1 >= 1.0 {
            return Err(Error::Config("true_cvr_mean must stay below 1".into()));
        }
        if self.bumps.0 > self.bumps.1 {
            return Err(Error::Config("range bumps is inverted".into()));
        }
        if self.cvr_spread < 0.0 || self.price_spread < 0.0 {
            return Err(Error::Config("spreads must be >= 0".into()));
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut SimRng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn uniform(rng: &mut SimRng, (lo, hi): (f64, f64)) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

/// Draws `n` campaign configurations. Budgets and audience sizes are
/// log-uniform; the opportunity density is a random mixture of Gaussian bumps
/// over a flat floor, normalized to the audience size.
pub fn sample_configs(n: usize, ranges: &ConfigRanges, seed: u64) -> Result<Vec<CampaignConfig>> {
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    ranges.validate()?;
    (0..n)
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed3(seed, 0xC0F1, i as u64));
            let budget = log_uniform(&mut rng, ranges.budget);
            let audience_size = log_uniform(&mut rng, ranges.audience_size);
            let opportunity_density = random_density(&mut rng, ranges, audience_size);
            let mut cfg = CampaignConfig {
                id: i as u64,
                budget,
                horizon: ranges.horizon,
                audience_size,
                opportunity_density,
                value_per_conversion: log_uniform(&mut rng, ranges.value_per_conversion),
                true_cvr_mean: uniform(&mut rng, ranges.true_cvr_mean),
                competitor_price_scale: log_uniform(&mut rng, ranges.competitor_price_scale),
                seed: rng.random(),
                initial_bid: 1.0,
                cvr_spread: ranges.cvr_spread,
                price_spread: ranges.price_spread,
                reward_mode: ranges.reward_mode,
                early_stop_rate: ranges.early_stop_rate,
            };
            let factor = log_uniform(&mut rng, ranges.initial_bid_factor);
            cfg.initial_bid = pacing_bid(&cfg) * factor;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

fn random_density(rng: &mut SimRng, ranges: &ConfigRanges, audience_size: f64) -> Vec<f64> {
    let h = ranges.horizon as f64;
    let n_bumps = rng.random_range(ranges.bumps.0..=ranges.bumps.1);
    let floor = 0.2;
    let bumps: Vec<(f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            let center = rng.random::<f64>() * h;
            let width = uniform(rng, ranges.bump_width) * h;
            let weight = uniform(rng, (0.5, 1.5));
            (center, width, weight)
        })
        .collect();
    let raw: Vec<f64> = (0..ranges.horizon)
        .map(|t| {
            let x = t as f64 + 0.5;
            floor
                + bumps
                    .iter()
                    .map(|(c, w, a)| a * (-0.5 * ((x - c) / w).powi(2)).exp())
                    .sum::<f64>()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| audience_size * r / total).collect()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Expected spend per auction when bidding the constant `bid`, by quadrature
/// over the conversion-rate distribution and the closed-form partial mean of
/// the log-normal competitor price.
pub fn expected_spend_per_auction(cfg: &CampaignConfig, bid: f64) -> f64 {
    const NODES: usize = 241;
    let sp = cfg.price_spread;
    let sc = cfg.cvr_spread;
    let scale = cfg.competitor_price_scale;
    let mut acc = 0.0;
    let mut norm = 0.0;
    for k in 0..NODES {
        let z = -6.0 + 12.0 * k as f64 / (NODES - 1) as f64;
        let w = (-0.5 * z * z).exp();
        let cvr = (cfg.true_cvr_mean * (sc * z - 0.5 * sc * sc).exp()).min(1.0);
        let threshold = bid * cvr;
        let partial = if threshold <= 0.0 {
            0.0
        } else if sp == 0.0 {
            if scale < threshold {
                scale
            } else {
                0.0
            }
        } else {
            scale
                * (0.5 * sp * sp).exp()
                * std_normal_cdf(((threshold / scale).ln() - sp * sp) / sp)
        };
        acc += w * partial;
        norm += w;
    }
    acc / norm
}

/// Constant bid whose expected total spend over the horizon matches the
/// budget (capped at 95% of the spend reachable by winning everything).
pub fn pacing_bid(cfg: &CampaignConfig) -> f64 {
    let per_auction_target = cfg.budget / cfg.audience_size;
    let center = cfg.competitor_price_scale / cfg.true_cvr_mean;
    let max_spend = expected_spend_per_auction(cfg, center * 1e6);
    let target = per_auction_target.min(0.95 * max_spend);
    let (mut lo, mut hi) = (center.ln() - 20.0, center.ln() + 14.0);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if expected_spend_per_auction(cfg, mid.exp()) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// On-disk campaign config set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSet {
    pub schema_version: u32,
    pub configs: Vec<CampaignConfig>,
}

impl ConfigSet {
    pub fn new(configs: Vec<CampaignConfig>) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            configs,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing configs: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let set: ConfigSet =
            toml::from_str(text).map_err(|e| Error::load("configs", e.to_string()))?;
        if set.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                found: set.schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        if set.configs.is_empty() {
            return Err(Error::Config("config set is empty".into()));
        }
        for c in &set.configs {
            c.validate()?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

impl ConfigRanges {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: ConfigRanges =
            toml::from_str(&text).map_err(|e| Error::load("ranges", e.to_string()))?;
        r.validate()?;
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Uniform};

    fn toy_config(horizon: usize, budget: f64) -> CampaignConfig {
        let audience = 200.0 * horizon as f64;
        CampaignConfig {
            id: 0,
            budget,
            horizon,
            audience_size: audience,
            opportunity_density: vec![200.0; horizon],
            value_per_conversion: 1.0,
            true_cvr_mean: 0.1,
            competitor_price_scale: 1.0,
            seed: 42,
            initial_bid: 10.0,
            cvr_spread: 0.5,
            price_spread: 0.5,
            reward_mode: RewardMode::Sampled,
            early_stop_rate: 0.0,
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = toy_config(10, 100.0);
        let a = EnvState::reset(cfg.clone(), 3).unwrap();
        let b = EnvState::reset(cfg.clone(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.remaining_budget, 100.0);
        assert_eq!(a.observe().fraction_budget_spent, 0.0);
        assert_eq!(a.observe().pacing_error, 0.0);

        let c = EnvState::reset(cfg, 4).unwrap();
        assert_ne!(a.rng, c.rng);
        assert_eq!(a.remaining_budget, c.remaining_budget);
        assert_eq!(a.step_index, c.step_index);
        assert_eq!(a.observe(), c.observe());
        assert_eq!(a.observe_critic(), c.observe_critic());
    }

    #[test]
    fn reset_rejects_invalid_config() {
        let mut cfg = toy_config(10, 100.0);
        cfg.opportunity_density[0] += 5.0;
        assert!(matches!(EnvState::reset(cfg, 0), Err(Error::Config(_))));
        let mut cfg = toy_config(10, 100.0);
        cfg.budget = -1.0;
        assert!(EnvState::reset(cfg, 0).is_err());
    }

    #[test]
    fn zero_bid_wins_nothing() {
        let mut env = EnvState::reset(toy_config(5, 100.0), 1).unwrap();
        while !env.is_terminal() {
            let o = env.step(0.0).unwrap();
            assert_eq!(o.auctions_won, 0);
            assert_eq!(o.spend, 0.0);
            assert!(o.auctions_entered > 0);
        }
        assert_eq!(env.terminal_reason(), Some(TerminalReason::HorizonReached));
    }

    #[test]
    fn step_errors() {
        let mut env = EnvState::reset(toy_config(1, 100.0), 1).unwrap();
        assert!(matches!(env.step(-1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(env.step(f64::NAN), Err(Error::InvalidArgument(_))));
        let o = env.step(1.0).unwrap();
        assert!(o.done);
        assert!(matches!(env.step(1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_density_step_only_ends_by_rule() {
        let mut cfg = toy_config(3, 1e-9);
        cfg.opportunity_density = vec![0.0, 600.0, 0.0];
        let mut env = EnvState::reset(cfg, 0).unwrap();
        let o = env.step(100.0).unwrap();
        assert_eq!(o.reward, 0.0);
        assert_eq!(o.auctions_entered, 0);
        assert!(!o.done);
    }

    #[test]
    fn huge_bid_exhausts_budget_without_overspend() {
        let mut env = EnvState::reset(toy_config(50, 30.0), 9).unwrap();
        let mut total = 0.0;
        while !env.is_terminal() {
            let o = env.step(1e6).unwrap();
            assert!(env.remaining_budget >= 0.0);
            total += o.spend;
        }
        assert!(total <= 30.0 * (1.0 + 1e-12));
        // Dust left behind is below any plausible price, so the campaign is
        // capped by the horizon or by the epsilon rule.
        assert!(env.terminal_reason().is_some());
    }

    #[test]
    fn observe_tracks_spend() {
        let mut env = EnvState::reset(toy_config(20, 50.0), 2).unwrap();
        env.step(50.0).unwrap();
        let o = env.observe();
        let c = env.observe_critic();
        assert_eq!(
            o.pacing_error,
            o.fraction_budget_spent - o.fraction_opportunities_passed
        );
        assert_eq!(c.actor, o);
        assert_eq!(o.last_action, 50.0);
        assert!(c.remaining_budget <= c.total_budget && c.remaining_budget >= 0.0);
        assert!((0.0..=1.0).contains(&c.recent_win_rate));
    }

    #[test]
    fn full_spend_observes_one() {
        let mut env = EnvState::reset(toy_config(50, 5.0), 2).unwrap();
        env.step(1e9).unwrap();
        env.remaining_budget = 0.0;
        assert_eq!(env.observe().fraction_budget_spent, 1.0);
    }

    #[test]
    fn identical_actions_reproduce_outcomes() {
        let cfg = toy_config(30, 80.0);
        let run = || {
            let mut env = EnvState::reset(cfg.clone(), 77).unwrap();
            let mut outs = Vec::new();
            let mut k = 0;
            while !env.is_terminal() {
                outs.push(env.step(5.0 + (k % 7) as f64).unwrap());
                k += 1;
            }
            outs
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.reward.to_bits(), y.reward.to_bits());
            assert_eq!(x.spend.to_bits(), y.spend.to_bits());
            assert_eq!(x.auctions_won, y.auctions_won);
        }
    }

    #[test]
    fn sample_configs_deterministic_and_normalized() {
        let ranges = ConfigRanges {
            horizon: 96,
            ..ConfigRanges::default()
        };
        let a = sample_configs(100, &ranges, 7).unwrap();
        let b = sample_configs(100, &ranges, 7).unwrap();
        assert_eq!(a, b);
        for c in &a {
            let total: f64 = c.opportunity_density.iter().sum();
            assert!((total - c.audience_size).abs() <= 1e-6 * c.audience_size);
            assert!(c.budget >= ranges.budget.0 && c.budget <= ranges.budget.1);
        }
    }

    #[test]
    fn sample_configs_rejects_bad_ranges() {
        assert!(matches!(
            sample_configs(0, &ConfigRanges::default(), 1),
            Err(Error::Config(_))
        ));
        let inverted = ConfigRanges {
            budget: (10.0, 1.0),
            ..ConfigRanges::default()
        };
        assert!(matches!(
            sample_configs(3, &inverted, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn budgets_are_log_uniform() {
        let ranges = ConfigRanges {
            horizon: 4,
            ..ConfigRanges::default()
        };
        let configs = sample_configs(10_000, &ranges, 99).unwrap();
        let (lo, hi) = ranges.budget;
        // Kolmogorov-Smirnov on log(budget) against Uniform(log lo, log hi).
        let u = Uniform::new(lo.ln(), hi.ln()).unwrap();
        let mut logs: Vec<f64> = configs.iter().map(|c| c.budget.ln()).collect();
        logs.sort_by(f64::total_cmp);
        let n = logs.len() as f64;
        let d = logs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = u.cdf(*x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // Asymptotic KS critical value at p = 0.01.
        assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn pacing_bid_matches_budget() {
        let cfg = toy_config(10, 100.0);
        let bid = pacing_bid(&cfg);
        let spend = expected_spend_per_auction(&cfg, bid) * cfg.audience_size;
        assert!((spend - 100.0).abs() < 1e-6);
    }

    #[test]
    fn config_set_round_trip() {
        let ranges = ConfigRanges {
            horizon: 12,
            ..ConfigRanges::default()
        };
        let set = ConfigSet::new(sample_configs(3, &ranges, 5).unwrap());
        let back = ConfigSet::from_toml(&set.to_toml().unwrap()).unwrap();
        assert_eq!(set, back);
        let bumped = set
            .to_toml()
            .unwrap()
            .replace("schema_version = 1", "schema_version = 2");
        assert!(matches!(
            ConfigSet::from_toml(&bumped),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }
}
