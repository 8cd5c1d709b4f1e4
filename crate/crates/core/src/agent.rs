//! Hybrid actor-critic: a Gaussian policy whose mean is the base policy and
//! whose relative spread comes from a small network, plus twin critics that
//! see the extended observation.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_finite, Error, Result};
use crate::mdp::{ActorObservation, CriticObservation, DEFAULT_HORIZON};
use crate::nn::{MlpNet, TargetNet};
use crate::policy::{BasePolicy, ACTION_FLOOR};

pub const ACTOR_FEATURES: usize = 7;
pub const CRITIC_STATE_FEATURES: usize = 13;
pub const ACTION_FEATURES: usize = 2;
pub const CRITIC_INPUTS: usize = CRITIC_STATE_FEATURES + ACTION_FEATURES;

/// Bounds on `sigma / mean` for the learned policy.
pub const REL_STD_BOUNDS: (f64, f64) = (0.01, 0.5);

/// Scale on the relative-move action feature; a 5% bid change maps to ~0.5.
const REL_MOVE_SCALE: f64 = 10.0;

fn signed_log(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

pub fn actor_features(obs: &ActorObservation) -> [f64; ACTOR_FEATURES] {
    [
        obs.fraction_budget_spent,
        obs.fraction_time_elapsed,
        obs.fraction_opportunities_passed,
        obs.avg_past_bid.ln_1p(),
        obs.last_action.ln_1p(),
        obs.pacing_error,
        signed_log(obs.cumulative_pacing_error),
    ]
}

pub fn critic_state_features(obs: &CriticObservation) -> [f64; CRITIC_STATE_FEATURES] {
    let a = actor_features(&obs.actor);
    [
        a[0],
        a[1],
        a[2],
        a[3],
        a[4],
        a[5],
        a[6],
        obs.remaining_budget.ln_1p(),
        obs.total_budget.ln_1p(),
        obs.audience_size.ln_1p(),
        obs.current_step_density.ln_1p(),
        obs.step_index as f64 / DEFAULT_HORIZON as f64,
        obs.recent_win_rate,
    ]
}

/// Encodes a bid relative to the previous bid and on a log scale.
pub fn action_features(action: f64, last_action: f64) -> [f64; ACTION_FEATURES] {
    let a = action.max(ACTION_FLOOR).ln();
    let prev = last_action.max(ACTION_FLOOR).ln();
    [REL_MOVE_SCALE * (a - prev), a]
}

/// `d action_features / d action`.
pub fn action_features_grad(action: f64) -> [f64; ACTION_FEATURES] {
    let a = action.max(ACTION_FLOOR);
    [REL_MOVE_SCALE / a, 1.0 / a]
}

/// Per-feature affine standardization fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            inv_std: vec![1.0; width],
        }
    }

    pub fn fit<'a, I>(width: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        for row in rows {
            n += 1;
            for k in 0..width {
                sum[k] += row[k];
                sq[k] += row[k] * row[k];
            }
        }
        if n == 0 {
            return Self::identity(width);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let inv_std = (0..width)
            .map(|k| {
                let var = (sq[k] / n as f64 - mean[k] * mean[k]).max(0.0);
                if var.sqrt() > 1e-8 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, inv_std }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &mut [f64]) {
        for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
            *x = (*x - m) * s;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridActor {
    pub base: BasePolicy,
    pub variance_net: MlpNet,
    pub norm: Normalizer,
    pub rel_std_bounds: (f64, f64),
}

impl HybridActor {
    /// Builds an actor whose initial relative spread equals `initial_rel_std`
    /// everywhere (up to the tiny random output weights).
    pub fn new<R: Rng + ?Sized>(
        base: BasePolicy,
        hidden: &[usize],
        initial_rel_std: f64,
        norm: Normalizer,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![ACTOR_FEATURES];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let variance_net = MlpNet::new(&widths, 1e-3, initial_rel_std.ln(), rng)?;
        Ok(Self {
            base,
            variance_net,
            norm,
            rel_std_bounds: REL_STD_BOUNDS,
        })
    }

    pub fn normalized_features(&self, obs: &ActorObservation) -> [f64; ACTOR_FEATURES] {
        let mut f = actor_features(obs);
        self.norm.apply(&mut f);
        f
    }

    /// Deterministic deployment bid.
    pub fn act_mean(&self, obs: &ActorObservation) -> Result<f64> {
        self.base.forward(obs)
    }

    /// Clamped log relative std and whether the clamp is active.
    pub fn clamp_raw(&self, raw: f64) -> (f64, bool) {
        let (lo, hi) = (self.rel_std_bounds.0.ln(), self.rel_std_bounds.1.ln());
        if raw < lo {
            (lo, true)
        } else if raw > hi {
            (hi, true)
        } else {
            (raw, false)
        }
    }

    pub fn rel_std(&self, obs: &ActorObservation) -> Result<f64> {
        let raw = self.variance_net.forward(&self.normalized_features(obs))?[0];
        Ok(self.clamp_raw(raw).0.exp())
    }

    pub fn std(&self, obs: &ActorObservation) -> Result<f64> {
        Ok(self.act_mean(obs)? * self.rel_std(obs)?)
    }

    /// Action for an injected standard-normal draw `xi`.
    pub fn act_with_noise(&self, obs: &ActorObservation, xi: f64) -> Result<f64> {
        let mean = self.act_mean(obs)?;
        let sigma = mean * self.rel_std(obs)?;
        Ok((mean + sigma * xi).max(ACTION_FLOOR))
    }

    /// Samples `(action, xi)`; `xi` is kept for the reparameterized gradient.
    pub fn act_sample<R: Rng + ?Sized>(
        &self,
        obs: &ActorObservation,
        rng: &mut R,
    ) -> Result<(f64, f64)> {
        let xi: f64 = rng.sample(StandardNormal);
        Ok((self.act_with_noise(obs, xi)?, xi))
    }

    /// Gaussian log density of the unclamped action variable; the floor clamp
    /// is ignored.
    pub fn log_prob(&self, obs: &ActorObservation, action: f64) -> Result<f64> {
        ensure_finite("action", action)?;
        let mean = self.act_mean(obs)?;
        let sigma = mean * self.rel_std(obs)?;
        Ok(gaussian_log_density(action, mean, sigma))
    }
}

pub fn gaussian_log_density(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    -sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z
}

/// Q heads over `(critic features, action features)` with target copies.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinCritic {
    pub heads: Vec<MlpNet>,
    pub targets: Vec<TargetNet>,
    pub norm: Normalizer,
}

impl TwinCritic {
    pub fn new<R: Rng + ?Sized>(
        hidden: &[usize],
        twin: bool,
        norm: Normalizer,
        rng: &mut R,
    ) -> Result<Self> {
        if norm.width() != CRITIC_INPUTS {
            return Err(Error::Contract(format!(
                "critic normalizer width {} != {CRITIC_INPUTS}",
                norm.width()
            )));
        }
        let mut widths = vec![CRITIC_INPUTS];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let n = if twin { 2 } else { 1 };
        let heads = (0..n)
            .map(|_| MlpNet::new(&widths, 1e-3, 0.0, rng))
            .collect::<Result<Vec<_>>>()?;
        let targets = heads.iter().map(TargetNet::new).collect();
        Ok(Self {
            heads,
            targets,
            norm,
        })
    }

    /// Normalized network input for one state-action pair.
    pub fn input(&self, obs: &CriticObservation, action: f64) -> [f64; CRITIC_INPUTS] {
        let mut row = [0.0; CRITIC_INPUTS];
        row[..CRITIC_STATE_FEATURES].copy_from_slice(&critic_state_features(obs));
        row[CRITIC_STATE_FEATURES..]
            .copy_from_slice(&action_features(action, obs.actor.last_action));
        self.norm.apply(&mut row);
        row
    }

    /// Writes the normalized action features into the last columns of `row`.
    pub fn set_action(&self, row: &mut [f64], action: f64, last_action: f64) {
        let f = action_features(action, last_action);
        for k in 0..ACTION_FEATURES {
            let c = CRITIC_STATE_FEATURES + k;
            row[c] = (f[k] - self.norm.mean[c]) * self.norm.inv_std[c];
        }
    }

    /// Chain-rule factor from network input gradient to `dQ/d action`.
    pub fn action_grad(&self, input_grad_row: &[f64], action: f64) -> f64 {
        let g = action_features_grad(action);
        (0..ACTION_FEATURES)
            .map(|k| {
                let c = CRITIC_STATE_FEATURES + k;
                input_grad_row[c] * self.norm.inv_std[c] * g[k]
            })
            .sum()
    }

    /// Per-head Q values.
    pub fn q_values(&self, obs: &CriticObservation, action: f64) -> Result<Vec<f64>> {
        let x = self.input(obs, action);
        self.heads.iter().map(|h| Ok(h.forward(&x)?[0])).collect()
    }

    pub fn q_min(&self, obs: &CriticObservation, action: f64) -> Result<f64> {
        Ok(self
            .q_values(obs, action)?
            .into_iter()
            .fold(f64::INFINITY, f64::min))
    }

    /// Row-wise minimum over target heads for a batch of normalized inputs.
    pub fn target_min_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let mut best = vec![f64::INFINITY; inputs.nrows()];
        for t in &self.targets {
            let (q, _) = t.net().forward_batch(inputs)?;
            for (b, v) in best.iter_mut().zip(q.column(0)) {
                *b = b.min(*v);
            }
        }
        Ok(best)
    }

    /// Row-wise online Q values per head.
    pub fn q_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
        self.heads
            .iter()
            .map(|h| Ok(h.forward_batch(inputs)?.0))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn obs() -> ActorObservation {
        ActorObservation {
            fraction_budget_spent: 0.4,
            fraction_time_elapsed: 0.35,
            fraction_opportunities_passed: 0.37,
            avg_past_bid: 1.1,
            last_action: 1.0,
            pacing_error: 0.03,
            cumulative_pacing_error: 0.2,
        }
    }

    fn actor() -> HybridActor {
        let base = BasePolicy::piecewise_poly(vec![0.0], 1, vec![0.0, -2.0, 0.0, -2.0]).unwrap();
        HybridActor::new(
            base,
            &[16, 16],
            0.05,
            Normalizer::identity(ACTOR_FEATURES),
            &mut rng_from_seed(2),
        )
        .unwrap()
    }

    #[test]
    fn act_mean_delegates_and_ignores_variance_net() {
        let mut a = actor();
        let o = obs();
        let direct = a.base.forward(&o).unwrap();
        assert_eq!(a.act_mean(&o).unwrap(), direct);
        for p in a.variance_net.params_mut() {
            *p += 0.37;
        }
        assert_eq!(a.act_mean(&o).unwrap(), direct);
    }

    #[test]
    fn initial_rel_std_matches_behavior() {
        let a = actor();
        let r = a.rel_std(&obs()).unwrap();
        assert!((r / 0.05 - 1.0).abs() < 0.01, "{r}");
    }

    #[test]
    fn zero_noise_gives_mean() {
        let a = actor();
        assert_eq!(
            a.act_with_noise(&obs(), 0.0).unwrap(),
            a.act_mean(&obs()).unwrap()
        );
    }

    #[test]
    fn log_prob_peak_and_one_sigma() {
        let a = actor();
        let o = obs();
        let m = a.act_mean(&o).unwrap();
        let s = a.std(&o).unwrap();
        let peak = a.log_prob(&o, m).unwrap();
        assert!((peak - (-s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((a.log_prob(&o, m + s).unwrap() - (peak - 0.5)).abs() < 1e-12);
        assert!(a.log_prob(&o, f64::NAN).is_err());
    }

    #[test]
    fn log_prob_integrates_to_one() {
        let a = actor();
        let o = obs();
        let m = a.act_mean(&o).unwrap();
        let s = a.std(&o).unwrap();
        // Composite Simpson over mean +- 12 sigma.
        let n = 4000;
        let (lo, hi) = (m - 12.0 * s, m + 12.0 * s);
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for k in 0..=n {
            let x = lo + k as f64 * h;
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * a.log_prob(&o, x).unwrap().exp();
        }
        assert!((acc * h / 3.0 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rel_std_respects_bounds() {
        let mut a = actor();
        let n = a.variance_net.num_params();
        a.variance_net.params_mut()[n - 1] = 10.0;
        assert_eq!(a.rel_std(&obs()).unwrap(), REL_STD_BOUNDS.1.ln().exp());
        a.variance_net.params_mut()[n - 1] = -10.0;
        assert_eq!(a.rel_std(&obs()).unwrap(), REL_STD_BOUNDS.0.ln().exp());
    }

    #[test]
    fn fresh_critic_is_near_zero_and_min_is_min() {
        let mut rng = rng_from_seed(5);
        let critic = TwinCritic::new(
            &[32, 32],
            true,
            Normalizer::identity(CRITIC_INPUTS),
            &mut rng,
        )
        .unwrap();
        let c = CriticObservation {
            actor: obs(),
            remaining_budget: 300.0,
            total_budget: 500.0,
            audience_size: 1e4,
            current_step_density: 20.0,
            step_index: 30,
            recent_win_rate: 0.2,
        };
        for k in 0..50 {
            let a = 0.2 + k as f64 * 0.1;
            let q = critic.q_values(&c, a).unwrap();
            assert!(q.iter().all(|v| v.abs() < 0.1));
            let m = critic.q_min(&c, a).unwrap();
            assert!(m <= q[0] && m <= q[1]);
        }
    }

    #[test]
    fn set_action_matches_full_input() {
        let mut rng = rng_from_seed(6);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|k| {
                (0..CRITIC_INPUTS)
                    .map(|j| (k * j) as f64 * 0.1 + j as f64)
                    .collect()
            })
            .collect();
        let norm = Normalizer::fit(CRITIC_INPUTS, rows.iter().map(|r| r.as_slice()));
        let critic = TwinCritic::new(&[8], false, norm, &mut rng).unwrap();
        let c = CriticObservation {
            actor: obs(),
            remaining_budget: 10.0,
            total_budget: 20.0,
            audience_size: 100.0,
            current_step_density: 2.0,
            step_index: 3,
            recent_win_rate: 0.5,
        };
        let full = critic.input(&c, 1.7);
        let mut row = critic.input(&c, 0.3);
        critic.set_action(&mut row, 1.7, c.actor.last_action);
        assert_eq!(full, row);
    }
}
