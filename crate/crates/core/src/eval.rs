//! Policy evaluation with common random numbers, learning curves and critic
//! diagnostics.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::{discounted_return, returns_to_go, CampaignConfig};
use crate::policy::{BasePolicy, BehaviorNoiseSpec};
use crate::rng::{derive_seed, derive_seed3, rng_from_seed};
use crate::sim::EnvState;
use crate::trainer::Trainer;

const Z95: f64 = 1.96;

/// Environment seed for episode `e` of config `c`. Every evaluator uses this,
/// so two policies evaluated with the same `seed` face the same draws.
pub fn episode_seed(seed: u64, config_index: usize, episode: usize) -> u64 {
    derive_seed3(seed, config_index as u64, episode as u64)
}

/// Rolls one episode, asking `act` for a bid at every step. Returns rewards.
pub fn rollout<F>(config: &CampaignConfig, env_seed: u64, mut act: F) -> Result<Vec<f64>>
where
    F: FnMut(&EnvState) -> Result<f64>,
{
    let mut env = EnvState::reset(config.clone(), env_seed)?;
    let mut rewards = Vec::with_capacity(config.horizon);
    while !env.is_terminal() {
        let a = act(&env)?;
        rewards.push(env.step(a)?.reward);
    }
    Ok(rewards)
}

fn episode_grid(
    configs: &[CampaignConfig],
    episodes_per_config: usize,
) -> Result<Vec<(usize, usize)>> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("no configs to evaluate on".into()));
    }
    if episodes_per_config == 0 {
        return Err(Error::InvalidArgument(
            "episodes_per_config must be >= 1".into(),
        ));
    }
    Ok((0..configs.len())
        .flat_map(|c| (0..episodes_per_config).map(move |e| (c, e)))
        .collect())
}

/// Undiscounted returns of the deterministic mean policy, config-major.
pub fn mean_policy_returns(
    policy: &BasePolicy,
    configs: &[CampaignConfig],
    episodes_per_config: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    episode_grid(configs, episodes_per_config)?
        .into_par_iter()
        .map(|(c, e)| {
            let r = rollout(&configs[c], episode_seed(seed, c, e), |env| {
                policy.forward(&env.observe())
            })?;
            Ok(r.iter().sum())
        })
        .collect()
}

/// Undiscounted returns of the noised behavior policy. Exploration noise
/// comes from its own stream so auction draws still match the noiseless
/// evaluation.
pub fn behavior_policy_returns(
    policy: &BasePolicy,
    noise: &BehaviorNoiseSpec,
    configs: &[CampaignConfig],
    episodes_per_config: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    noise.validate()?;
    episode_grid(configs, episodes_per_config)?
        .into_par_iter()
        .map(|(c, e)| {
            let mut nrng = rng_from_seed(derive_seed(episode_seed(seed, c, e), 0xB0B));
            let r = rollout(&configs[c], episode_seed(seed, c, e), |env| {
                Ok(policy.forward(&env.observe())? * (1.0 + noise.sample_factor(&mut nrng)))
            })?;
            Ok(r.iter().sum())
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample standard deviation; `None` below two samples.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some((xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

/// Normal-approximation 95% half-width, `None` below two samples.
pub fn ci_half_width(xs: &[f64]) -> Option<f64> {
    sample_std(xs).map(|s| Z95 * s / (xs.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub checkpoint_id: u64,
    pub episodes: usize,
    pub per_config_mean: Vec<f64>,
    pub pooled_mean: f64,
    /// `None` when fewer than two episodes were run.
    pub ci_half_width: Option<f64>,
    pub baseline_mean: f64,
    /// `100 * (mean - baseline_mean) / baseline_mean`.
    pub gain_pct: f64,
    /// Paired 95% interval on `gain_pct` (ratio estimator, delta method).
    pub gain_ci: Option<(f64, f64)>,
}

impl EvalResult {
    /// Builds the summary from paired per-episode returns (same order, same
    /// seeds).
    pub fn from_paired(
        checkpoint_id: u64,
        returns: &[f64],
        baseline: &[f64],
        episodes_per_config: usize,
    ) -> Result<Self> {
        if returns.len() != baseline.len() || returns.is_empty() {
            return Err(Error::Contract(
                "paired return vectors differ in length or are empty".into(),
            ));
        }
        if episodes_per_config == 0 || !returns.len().is_multiple_of(episodes_per_config) {
            return Err(Error::Contract(
                "episode count is not configs x episodes_per_config".into(),
            ));
        }
        let n = returns.len();
        let pooled_mean = mean(returns);
        let baseline_mean = mean(baseline);
        let diffs: Vec<f64> = returns.iter().zip(baseline).map(|(a, b)| a - b).collect();
        let (gain_pct, gain_ci) = if baseline_mean > 0.0 {
            let g = mean(&diffs) / baseline_mean;
            // Linearized residuals of the ratio estimator.
            let resid: Vec<f64> = diffs.iter().zip(baseline).map(|(d, b)| d - g * b).collect();
            let ci = sample_std(&resid).map(|s| {
                let hw = Z95 * s / (n as f64).sqrt() / baseline_mean;
                (100.0 * (g - hw), 100.0 * (g + hw))
            });
            (100.0 * g, ci)
        } else {
            (0.0, None)
        };
        Ok(Self {
            checkpoint_id,
            episodes: n,
            per_config_mean: returns.chunks(episodes_per_config).map(mean).collect(),
            pooled_mean,
            ci_half_width: ci_half_width(returns),
            baseline_mean,
            gain_pct,
            gain_ci,
        })
    }

    pub fn gain_ci_excludes_zero(&self) -> bool {
        self.gain_ci.is_some_and(|(lo, hi)| lo > 0.0 || hi < 0.0)
    }
}

/// Deterministic evaluation of `policy` against `baseline` under common
/// random numbers.
pub fn evaluate(
    checkpoint_id: u64,
    policy: &BasePolicy,
    baseline: &BasePolicy,
    configs: &[CampaignConfig],
    episodes_per_config: usize,
    seed: u64,
) -> Result<EvalResult> {
    let returns = mean_policy_returns(policy, configs, episodes_per_config, seed)?;
    let base = if policy == baseline {
        returns.clone()
    } else {
        mean_policy_returns(baseline, configs, episodes_per_config, seed)?
    };
    EvalResult::from_paired(checkpoint_id, &returns, &base, episodes_per_config)
}

/// [`evaluate`] for each `(checkpoint id, policy)`, sharing seeds and
/// computing the baseline once.
pub fn learning_curve(
    checkpoints: &[(u64, BasePolicy)],
    baseline: &BasePolicy,
    configs: &[CampaignConfig],
    episodes_per_config: usize,
    seed: u64,
) -> Result<Vec<EvalResult>> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument(
            "learning curve needs at least one checkpoint".into(),
        ));
    }
    let base = mean_policy_returns(baseline, configs, episodes_per_config, seed)?;
    checkpoints
        .iter()
        .map(|(id, p)| {
            let r = if p == baseline {
                base.clone()
            } else {
                mean_policy_returns(p, configs, episodes_per_config, seed)?
            };
            EvalResult::from_paired(*id, &r, &base, episodes_per_config)
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// CSV: `checkpoint,episodes,mean_return,ci_half_width,baseline_mean,gain_pct,gain_ci_lo,gain_ci_hi`.
/// Empty cells mark not-applicable intervals.
pub fn write_curve_csv<W: Write>(out: W, curve: &[EvalResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "checkpoint",
        "episodes",
        "mean_return",
        "ci_half_width",
        "baseline_mean",
        "gain_pct",
        "gain_ci_lo",
        "gain_ci_hi",
    ])?;
    for r in curve {
        w.write_record([
            r.checkpoint_id.to_string(),
            r.episodes.to_string(),
            format!("{:?}", r.pooled_mean),
            opt(r.ci_half_width),
            format!("{:?}", r.baseline_mean),
            format!("{:?}", r.gain_pct),
            opt(r.gain_ci.map(|c| c.0)),
            opt(r.gain_ci.map(|c| c.1)),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<curve csv>", e))?;
    Ok(())
}

/// Whitespace-separated `x y err` rows (gain in percent, error = CI
/// half-width) for plotting.
pub fn write_curve_plot_data<W: Write>(mut out: W, curve: &[EvalResult]) -> Result<()> {
    let io = |e| Error::io("<plot data>", e);
    writeln!(out, "# x y err").map_err(io)?;
    for r in curve {
        let err = r.gain_ci.map(|(lo, hi)| 0.5 * (hi - lo)).unwrap_or(0.0);
        writeln!(out, "{} {:?} {:?}", r.checkpoint_id, r.gain_pct, err).map_err(io)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignDiagnostic {
    pub config_id: u64,
    pub budget: f64,
    /// Mean over episodes of `min_h Q_h(s0, a0)` in reward units.
    pub predicted_q: f64,
    pub empirical_mean: f64,
    pub empirical_std: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimestepPoint {
    pub config_id: u64,
    pub step: usize,
    /// Episodes still running at this step.
    pub episodes: usize,
    pub q_mean: f64,
    pub q_std: f64,
    pub rtg_mean: f64,
    pub rtg_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticDiagnostic {
    /// Ordered by budget.
    pub campaigns: Vec<CampaignDiagnostic>,
    pub curves: Vec<TimestepPoint>,
    /// Correlation of predicted and empirical initial values across campaigns.
    pub pearson: Option<f64>,
}

impl CriticDiagnostic {
    /// Share of curve points on `config_id` whose mean Q lies within `k`
    /// empirical standard deviations of the mean return-to-go.
    pub fn fraction_within(&self, config_id: u64, k: f64) -> Option<f64> {
        let pts: Vec<&TimestepPoint> = self
            .curves
            .iter()
            .filter(|p| p.config_id == config_id)
            .collect();
        if pts.is_empty() {
            return None;
        }
        let ok = pts
            .iter()
            .filter(|p| (p.q_mean - p.rtg_mean).abs() <= k * p.rtg_std)
            .count();
        Some(ok as f64 / pts.len() as f64)
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

struct EpisodeTrace {
    q: Vec<f64>,
    rewards: Vec<f64>,
}

/// Rolls out the trained stochastic policy on fresh seeds and compares the
/// critic's predictions with realized discounted returns. Per-timestep curves
/// are produced for the configs at positions `probes`.
pub fn critic_diagnostics(
    trainer: &Trainer,
    configs: &[CampaignConfig],
    episodes_per_config: usize,
    probes: &[usize],
    seed: u64,
) -> Result<CriticDiagnostic> {
    if let Some(p) = probes.iter().find(|p| **p >= configs.len()) {
        return Err(Error::InvalidArgument(format!(
            "probe index {p} out of range"
        )));
    }
    let gamma = trainer.config.gamma;
    let scale = trainer.reward_scale;
    let fresh = derive_seed(seed, 0xD1A6);
    let traces: Vec<EpisodeTrace> = episode_grid(configs, episodes_per_config)?
        .into_par_iter()
        .map(|(c, e)| {
            let env_seed = episode_seed(fresh, c, e);
            let mut prng = rng_from_seed(derive_seed(env_seed, 0xAC7));
            let mut q = Vec::new();
            let rewards = rollout(&configs[c], env_seed, |env| {
                let obs = env.observe();
                let xi: f64 = prng.sample(rand_distr::StandardNormal);
                let a = trainer.actor.act_with_noise(&obs, xi)?;
                q.push(trainer.critic.q_min(&env.observe_critic(), a)? / scale);
                Ok(a)
            })?;
            Ok(EpisodeTrace { q, rewards })
        })
        .collect::<Result<_>>()?;

    let mut campaigns = Vec::with_capacity(configs.len());
    let mut curves = Vec::new();
    for (c, cfg) in configs.iter().enumerate() {
        let eps = &traces[c * episodes_per_config..(c + 1) * episodes_per_config];
        let returns: Vec<f64> = eps
            .iter()
            .map(|t| discounted_return(&t.rewards, gamma))
            .collect::<Result<_>>()?;
        let q0: Vec<f64> = eps.iter().map(|t| t.q[0]).collect();
        campaigns.push(CampaignDiagnostic {
            config_id: cfg.id,
            budget: cfg.budget,
            predicted_q: mean(&q0),
            empirical_mean: mean(&returns),
            empirical_std: sample_std(&returns).unwrap_or(0.0),
            episodes: eps.len(),
        });
        if probes.contains(&c) {
            let rtgs: Vec<Vec<f64>> = eps
                .iter()
                .map(|t| returns_to_go(&t.rewards, gamma))
                .collect::<Result<_>>()?;
            let longest = eps.iter().map(|t| t.q.len()).max().unwrap_or(0);
            for step in 0..longest {
                let qs: Vec<f64> = eps.iter().filter_map(|t| t.q.get(step).copied()).collect();
                let rs: Vec<f64> = rtgs.iter().filter_map(|r| r.get(step).copied()).collect();
                curves.push(TimestepPoint {
                    config_id: cfg.id,
                    step,
                    episodes: qs.len(),
                    q_mean: mean(&qs),
                    q_std: sample_std(&qs).unwrap_or(0.0),
                    rtg_mean: mean(&rs),
                    rtg_std: sample_std(&rs).unwrap_or(0.0),
                });
            }
        }
    }
    let pearson = pearson(
        &campaigns.iter().map(|c| c.predicted_q).collect::<Vec<_>>(),
        &campaigns
            .iter()
            .map(|c| c.empirical_mean)
            .collect::<Vec<_>>(),
    );
    campaigns.sort_by(|a, b| {
        a.budget
            .total_cmp(&b.budget)
            .then(a.config_id.cmp(&b.config_id))
    });
    Ok(CriticDiagnostic {
        campaigns,
        curves,
        pearson,
    })
}

/// Writes the per-campaign table and the per-timestep curves as two CSVs.
pub fn write_diagnostic_csvs<W1: Write, W2: Write>(
    campaigns_out: W1,
    curves_out: W2,
    d: &CriticDiagnostic,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(campaigns_out);
    for c in &d.campaigns {
        w.serialize(c)?;
    }
    w.flush().map_err(|e| Error::io("<diagnostic csv>", e))?;
    let mut w = csv::Writer::from_writer(curves_out);
    for p in &d.curves {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("<diagnostic csv>", e))?;
    Ok(())
}
