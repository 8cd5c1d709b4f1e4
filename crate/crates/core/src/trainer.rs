//! Offline conservative actor-critic training.
//!
//! The critic minimizes a Bellman regression plus a penalty that pushes Q down
//! on actions drawn uniformly from a band around the behavior mean and up on
//! actions drawn from the behavior law itself. The actor is the base policy
//! (mean) plus a relative-spread network, updated through the
//! reparameterized sample `a = F(s) * (1 + r(s) xi)`.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{
    action_features, actor_features, critic_state_features, HybridActor, Normalizer, TwinCritic,
    ACTOR_FEATURES, CRITIC_INPUTS, CRITIC_STATE_FEATURES,
};
use crate::dataset::{Dataset, ReplaySampler};
use crate::error::{Error, Result};
use crate::mdp::{returns_to_go, ActorObservation, CriticObservation, Transition};
use crate::nn::{AdamState, MlpNet};
use crate::policy::{behavior_interval, BasePolicy, BehaviorNoiseSpec, ACTION_FLOOR};
use crate::rng::{derive_seed, rng_from_seed, SimRng};

/// Allowed band for the batch-mean relative spread before training aborts.
pub const REL_STD_GUARD: (f64, f64) = (0.005, 0.6);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total gradient steps, pre-training included.
    pub gradient_steps: u64,
    pub batch_size: usize,
    pub critic_lr: f64,
    /// Step size for the base-policy parameters.
    pub actor_lr: f64,
    /// Step size for the spread network; `None` reuses `actor_lr`.
    pub variance_lr: Option<f64>,
    pub gamma: f64,
    pub cql_alpha: f64,
    /// Actions sampled per state for each penalty term.
    pub penalty_samples: usize,
    pub tau: f64,
    /// Critic-only steps before actor updates begin.
    pub pretrain_steps: u64,
    pub sigma_beta: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Half-width of the uniform penalty band; `None` uses `clip_hi`.
    pub interval_epsilon: Option<f64>,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub critic_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub twin_critic: bool,
    /// Next-state action samples averaged in each Bellman target.
    pub target_action_samples: usize,
    /// Weight on `log pi` in the actor loss (0 disables it).
    pub actor_entropy_weight: f64,
    /// Multiplier on rewards; `None` picks 1 / (mean per-step reward).
    pub reward_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-scale hyper-parameters.
    pub fn paper() -> Self {
        Self {
            gradient_steps: 600_000,
            batch_size: 20_000,
            critic_lr: 3e-4,
            actor_lr: 3e-5,
            variance_lr: None,
            gamma: 0.9998,
            cql_alpha: 0.1,
            penalty_samples: 50,
            tau: 0.01,
            pretrain_steps: 300_000,
            sigma_beta: 0.05,
            clip_lo: -0.5,
            clip_hi: 0.5,
            interval_epsilon: None,
            seed: 0,
            checkpoint_every: 20_000,
            log_every: 1_000,
            critic_hidden: vec![512, 512],
            actor_hidden: vec![512, 512],
            twin_critic: true,
            target_action_samples: 1,
            actor_entropy_weight: 0.0,
            reward_scale: None,
        }
    }

    /// Scaled-down profile that finishes in minutes on one core.
    pub fn desk() -> Self {
        Self {
            gradient_steps: 8_000,
            batch_size: 256,
            critic_lr: 3e-3,
            actor_lr: 2e-3,
            variance_lr: Some(1e-3),
            penalty_samples: 5,
            tau: 0.05,
            pretrain_steps: 4_000,
            checkpoint_every: 250,
            log_every: 50,
            critic_hidden: vec![64, 64],
            actor_hidden: vec![32, 32],
            ..Self::paper()
        }
    }

    pub fn noise(&self) -> BehaviorNoiseSpec {
        BehaviorNoiseSpec {
            sigma_beta: self.sigma_beta,
            clip_lo: self.clip_lo,
            clip_hi: self.clip_hi,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.interval_epsilon.unwrap_or(self.clip_hi)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.gradient_steps == 0 {
            return bad("gradient_steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, v) in [("critic_lr", self.critic_lr), ("actor_lr", self.actor_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if let Some(v) = self.variance_lr {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("variance_lr must be > 0, got {v}"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.cql_alpha.is_finite() && self.cql_alpha >= 0.0) {
            return bad(format!("cql_alpha must be >= 0, got {}", self.cql_alpha));
        }
        if self.cql_alpha > 0.0 && self.penalty_samples < 2 {
            return bad("penalty_samples must be >= 2 when the penalty is on".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.pretrain_steps > self.gradient_steps {
            return bad("pretrain_steps exceeds gradient_steps".into());
        }
        self.noise().validate()?;
        let eps = self.epsilon();
        if !(eps > 0.0 && eps < 1.0) {
            return bad(format!("interval_epsilon must lie in (0, 1), got {eps}"));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be >= 1".into());
        }
        if self
            .critic_hidden
            .iter()
            .chain(&self.actor_hidden)
            .any(|w| *w == 0)
        {
            return bad("hidden widths must be >= 1".into());
        }
        if self.target_action_samples == 0 {
            return bad("target_action_samples must be >= 1".into());
        }
        if !(self.actor_entropy_weight.is_finite() && self.actor_entropy_weight >= 0.0) {
            return bad("actor_entropy_weight must be >= 0".into());
        }
        if let Some(s) = self.reward_scale {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("reward_scale must be > 0, got {s}"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing train config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_toml()?.as_bytes()).into())
    }
}

/// A training batch with rewards already scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub critic_obs: Vec<CriticObservation>,
    pub next_critic_obs: Vec<CriticObservation>,
    pub action: Vec<f64>,
    pub behavior_mean: Vec<f64>,
    pub reward: Vec<f64>,
    pub done: Vec<bool>,
}

impl Batch {
    pub fn from_transitions<'a, I>(transitions: I, reward_scale: f64) -> Self
    where
        I: IntoIterator<Item = &'a Transition>,
    {
        let mut b = Batch {
            critic_obs: vec![],
            next_critic_obs: vec![],
            action: vec![],
            behavior_mean: vec![],
            reward: vec![],
            done: vec![],
        };
        for t in transitions {
            b.critic_obs.push(t.critic_obs);
            b.next_critic_obs.push(t.next_critic_obs);
            b.action.push(t.action);
            b.behavior_mean.push(t.behavior_mean);
            b.reward.push(t.reward * reward_scale);
            b.done.push(t.done);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.action.len()
    }

    pub fn is_empty(&self) -> bool {
        self.action.is_empty()
    }
}

/// Losses and diagnostics for one gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    /// 1 once actor updates are running, 0 during critic pre-training.
    pub actor_active: u8,
    pub bellman_loss: f64,
    pub cql_term1: f64,
    pub cql_term2: f64,
    pub cql_penalty: f64,
    pub actor_loss: f64,
    pub mean_rel_std: f64,
    pub mean_q: f64,
    pub critic_grad_norm: f64,
    pub policy_grad_norm: f64,
    pub variance_grad_norm: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [
            self.bellman_loss,
            self.cql_term1,
            self.cql_term2,
            self.cql_penalty,
            self.actor_loss,
            self.mean_rel_std,
            self.mean_q,
            self.critic_grad_norm,
            self.policy_grad_norm,
            self.variance_grad_norm,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Writes loss reports as CSV, header first.
pub fn write_loss_csv<W: Write>(out: W, reports: &[LossReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<loss csv>", e))?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossReport>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticStats {
    pub bellman_loss: f64,
    pub cql_term1: f64,
    pub cql_term2: f64,
    pub mean_q: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorStats {
    pub loss: f64,
    pub mean_rel_std: f64,
    pub policy_grad_norm: f64,
    pub variance_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticObjective {
    pub loss: f64,
    pub bellman_loss: f64,
    pub cql_term1: f64,
    pub cql_term2: f64,
    pub mean_q: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorObjective {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    pub grad_phi: Vec<f64>,
    pub mean_rel_std: f64,
}

/// Penalized regression loss of `net` and its gradient. `x` holds `n` logged
/// rows followed (when `alpha > 0`) by `n * k` band rows and `n * k`
/// behavior-law rows; `y` holds the `n` regression targets.
pub fn critic_objective(
    net: &MlpNet,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    alpha: f64,
    k: usize,
) -> Result<CriticObjective> {
    let n = y.len();
    let penalty = alpha > 0.0;
    let rows = if penalty { n + 2 * n * k } else { n };
    if n == 0 || x.nrows() != rows {
        return Err(Error::Contract(format!(
            "critic rows: expected {rows}, got {}",
            x.nrows()
        )));
    }
    let (q, cache) = net.forward_batch(x)?;
    let q = q.column(0);
    let inv_n = 1.0 / n as f64;
    let mut cot = Array2::zeros((rows, 1));
    let mut bellman = 0.0;
    let mut mean_q = 0.0;
    for i in 0..n {
        let d = q[i] - y[i];
        bellman += 0.5 * d * d * inv_n;
        cot[[i, 0]] = d * inv_n;
        mean_q += q[i] * inv_n;
    }
    let (mut t1, mut t2) = (0.0, 0.0);
    if penalty {
        for i in 0..n {
            let start = n + i * k;
            let chunk: Vec<f64> = (start..start + k).map(|r| q[r]).collect();
            let (lme, soft) = log_mean_exp(&chunk);
            t1 += lme * inv_n;
            for (j, s) in soft.iter().enumerate() {
                cot[[start + j, 0]] = alpha * s * inv_n;
            }
        }
        let inv_nk = inv_n / k as f64;
        for r in n + n * k..rows {
            t2 += q[r] * inv_nk;
            cot[[r, 0]] = -alpha * inv_nk;
        }
    }
    let (grad, _) = net.backward(&cache, cot.view())?;
    Ok(CriticObjective {
        loss: bellman + alpha * (t1 - t2),
        bellman_loss: bellman,
        cql_term1: t1,
        cql_term2: t2,
        mean_q,
        grad,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn log_mean_exp(q: &[f64]) -> (f64, Vec<f64>) {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (
        m + (s / q.len() as f64).ln(),
        e.iter().map(|x| x / s).collect(),
    )
}

fn batch_actor_features(actor: &HybridActor, obs: &[ActorObservation]) -> Array2<f64> {
    let mut x = Array2::zeros((obs.len(), ACTOR_FEATURES));
    for (i, o) in obs.iter().enumerate() {
        x.row_mut(i)
            .assign(&ArrayView1::from(&actor.normalized_features(o)));
    }
    x
}

/// Clamped relative spreads for a batch of states.
pub fn rel_std_batch(actor: &HybridActor, obs: &[ActorObservation]) -> Result<Vec<f64>> {
    let (raw, _) = actor
        .variance_net
        .forward_batch(batch_actor_features(actor, obs).view())?;
    Ok(raw
        .column(0)
        .iter()
        .map(|r| actor.clamp_raw(*r).0.exp())
        .collect())
}

/// Bellman targets `y = r + gamma (1 - done) q_min_target(s', a')` with `a'`
/// drawn from the current actor (`samples` draws averaged per transition).
pub fn critic_target<R: Rng + ?Sized>(
    batch: &Batch,
    critic: &TwinCritic,
    actor: &HybridActor,
    gamma: f64,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = batch.len();
    let next_actor: Vec<ActorObservation> = batch.next_critic_obs.iter().map(|o| o.actor).collect();
    let rel = rel_std_batch(actor, &next_actor)?;
    let mut x = Array2::zeros((n * samples, CRITIC_INPUTS));
    for i in 0..n {
        let obs = &batch.next_critic_obs[i];
        let mean = actor.act_mean(&obs.actor)?;
        let base = critic.input(obs, mean);
        for k in 0..samples {
            let xi: f64 = rng.sample(StandardNormal);
            let a = (mean * (1.0 + rel[i] * xi)).max(ACTION_FLOOR);
            let mut row = x.row_mut(i * samples + k);
            row.assign(&ArrayView1::from(&base));
            critic.set_action(
                row.as_slice_mut().expect("contiguous row"),
                a,
                obs.actor.last_action,
            );
        }
    }
    let q = critic.target_min_batch(x.view())?;
    Ok((0..n)
        .map(|i| {
            if batch.done[i] {
                batch.reward[i]
            } else {
                let mean_q = q[i * samples..(i + 1) * samples].iter().sum::<f64>() / samples as f64;
                batch.reward[i] + gamma * mean_q
            }
        })
        .collect())
}

/// Rows `(s, a_k)` with `a_k` uniform on the band around the behavior mean.
pub fn term1_inputs<R: Rng + ?Sized>(
    batch: &Batch,
    critic: &TwinCritic,
    k: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((batch.len() * k, CRITIC_INPUTS));
    for i in 0..batch.len() {
        let (lo, hi) = behavior_interval(batch.behavior_mean[i], epsilon)?;
        let obs = &batch.critic_obs[i];
        let base = critic.input(obs, batch.behavior_mean[i]);
        for j in 0..k {
            let a = rng.random_range(lo..=hi);
            let mut row = x.row_mut(i * k + j);
            row.assign(&ArrayView1::from(&base));
            critic.set_action(
                row.as_slice_mut().expect("contiguous row"),
                a,
                obs.actor.last_action,
            );
        }
    }
    Ok(x)
}

/// Rows `(s, a_k)` with `a_k` drawn from the behavior law around the
/// recorded behavior mean.
pub fn term2_inputs<R: Rng + ?Sized>(
    batch: &Batch,
    critic: &TwinCritic,
    k: usize,
    noise: &BehaviorNoiseSpec,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((batch.len() * k, CRITIC_INPUTS));
    for i in 0..batch.len() {
        let m = batch.behavior_mean[i];
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "behavior mean must be > 0, got {m}"
            )));
        }
        let obs = &batch.critic_obs[i];
        let base = critic.input(obs, m);
        for j in 0..k {
            let a = m * (1.0 + noise.sample_factor(rng));
            let mut row = x.row_mut(i * k + j);
            row.assign(&ArrayView1::from(&base));
            critic.set_action(
                row.as_slice_mut().expect("contiguous row"),
                a,
                obs.actor.last_action,
            );
        }
    }
    Ok(x)
}

/// Batch mean of the per-state log-mean-exp of Q over `k` band samples.
pub fn cql_term1<R: Rng + ?Sized>(
    batch: &Batch,
    critic: &TwinCritic,
    head: usize,
    k: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<f64> {
    if k < 2 {
        return Err(Error::Config(
            "term1 needs at least 2 samples per state".into(),
        ));
    }
    let x = term1_inputs(batch, critic, k, epsilon, rng)?;
    let (q, _) = critic.heads[head].forward_batch(x.view())?;
    let q = q.column(0).to_vec();
    Ok(q.chunks(k).map(|c| log_mean_exp(c).0).sum::<f64>() / batch.len() as f64)
}

/// Batch mean of Q averaged over `k` behavior-law samples per state.
pub fn cql_term2<R: Rng + ?Sized>(
    batch: &Batch,
    critic: &TwinCritic,
    head: usize,
    k: usize,
    noise: &BehaviorNoiseSpec,
    rng: &mut R,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config(
            "term2 needs at least 1 sample per state".into(),
        ));
    }
    let x = term2_inputs(batch, critic, k, noise, rng)?;
    let (q, _) = critic.heads[head].forward_batch(x.view())?;
    Ok(q.sum() / (batch.len() * k) as f64)
}

/// Full training state; everything needed to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub actor: HybridActor,
    pub critic: TwinCritic,
    pub default_params: Vec<f64>,
    pub critic_opt: Vec<AdamState>,
    pub policy_opt: AdamState,
    pub variance_opt: AdamState,
    pub step: u64,
    pub reward_scale: f64,
    pub rng: SimRng,
    pub sampler: ReplaySampler,
    pub last_checkpoint: Option<u64>,
}

/// 1 / mean per-step reward, or 1 if that is not positive.
pub fn auto_reward_scale(data: &Dataset) -> f64 {
    let mean = data.transitions.iter().map(|t| t.reward).sum::<f64>() / data.len().max(1) as f64;
    if mean > 0.0 && mean.is_finite() {
        1.0 / mean
    } else {
        1.0
    }
}

/// Mean over all stored transitions of the discounted return-to-go.
pub fn mean_return_to_go(data: &Dataset, gamma: f64) -> Result<f64> {
    let ts = &data.transitions;
    let mut total = 0.0;
    let mut start = 0;
    for i in 0..ts.len() {
        if ts[i].done || i + 1 == ts.len() || ts[i + 1].episode_id != ts[i].episode_id {
            let rewards: Vec<f64> = ts[start..=i].iter().map(|t| t.reward).collect();
            total += returns_to_go(&rewards, gamma)?.iter().sum::<f64>();
            start = i + 1;
        }
    }
    Ok(total / ts.len().max(1) as f64)
}

fn fit_normalizers(data: &Dataset) -> (Normalizer, Normalizer) {
    let actor_rows: Vec<[f64; ACTOR_FEATURES]> = data
        .transitions
        .iter()
        .map(|t| actor_features(&t.actor_obs))
        .collect();
    let critic_rows: Vec<[f64; CRITIC_INPUTS]> = data
        .transitions
        .iter()
        .map(|t| {
            let mut row = [0.0; CRITIC_INPUTS];
            row[..CRITIC_STATE_FEATURES].copy_from_slice(&critic_state_features(&t.critic_obs));
            row[CRITIC_STATE_FEATURES..]
                .copy_from_slice(&action_features(t.action, t.actor_obs.last_action));
            row
        })
        .collect();
    (
        Normalizer::fit(ACTOR_FEATURES, actor_rows.iter().map(|r| &r[..])),
        Normalizer::fit(CRITIC_INPUTS, critic_rows.iter().map(|r| &r[..])),
    )
}

impl Trainer {
    /// Initializes the actor at the dataset's behavior policy with relative
    /// spread `sigma_beta`, and fresh critics.
    pub fn new(data: &Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("dataset has no transitions".into()));
        }
        let (actor_norm, critic_norm) = fit_normalizers(data);
        let reward_scale = config
            .reward_scale
            .unwrap_or_else(|| auto_reward_scale(data));
        let offset = mean_return_to_go(data, config.gamma)? * reward_scale;
        let mut t = Self::from_parts(
            data.header.policy.clone(),
            data.len(),
            actor_norm,
            critic_norm,
            reward_scale,
            config,
        )?;
        t.set_critic_offset(offset);
        Ok(t)
    }

    /// Sets the output bias of every critic head and target.
    pub fn set_critic_offset(&mut self, offset: f64) {
        for h in &mut self.critic.heads {
            *h.params_mut().last_mut().expect("non-empty net") = offset;
        }
        for t in &mut self.critic.targets {
            *t.0.params_mut().last_mut().expect("non-empty net") = offset;
        }
    }

    /// Builds a trainer without fitting anything to data.
    pub fn from_parts(
        base: BasePolicy,
        dataset_len: usize,
        actor_norm: Normalizer,
        critic_norm: Normalizer,
        reward_scale: f64,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        base.params.validate()?;
        let mut init = rng_from_seed(derive_seed(config.seed, 0x1217));
        let default_params = base.params.values.clone();
        let actor = HybridActor::new(
            base,
            &config.actor_hidden,
            config.sigma_beta,
            actor_norm,
            &mut init,
        )?;
        let critic = TwinCritic::new(
            &config.critic_hidden,
            config.twin_critic,
            critic_norm,
            &mut init,
        )?;
        let critic_opt = critic
            .heads
            .iter()
            .map(|h| AdamState::new(h.num_params(), config.critic_lr))
            .collect();
        let policy_opt = AdamState::new(actor.base.num_params(), config.actor_lr);
        let variance_opt = AdamState::new(
            actor.variance_net.num_params(),
            config.variance_lr.unwrap_or(config.actor_lr),
        );
        Ok(Self {
            rng: rng_from_seed(derive_seed(config.seed, 0x7A11)),
            sampler: ReplaySampler::new(dataset_len, config.seed)?,
            config,
            actor,
            critic,
            default_params,
            critic_opt,
            policy_opt,
            variance_opt,
            step: 0,
            reward_scale,
            last_checkpoint: None,
        })
    }

    pub fn actor_active(&self) -> bool {
        self.step >= self.config.pretrain_steps
    }

    pub fn displacement(&self) -> f64 {
        self.actor
            .base
            .params
            .values
            .iter()
            .zip(&self.default_params)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn fault(&self, reason: String) -> Error {
        Error::TrainingFault {
            step: self.step,
            reason,
            last_good_checkpoint: self.last_checkpoint,
        }
    }

    fn with_fault<T>(&self, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::TrainingFault { reason, .. } => self.fault(reason),
            other => other,
        })
    }

    /// Stacks the critic inputs for one update: `n` logged rows, then
    /// `n * k` band rows and `n * k` behavior-law rows when the penalty is on.
    pub fn critic_rows(&mut self, batch: &Batch) -> Result<Array2<f64>> {
        let n = batch.len();
        let k = self.config.penalty_samples;
        let penalty = self.config.cql_alpha > 0.0;
        let rows = if penalty { n + 2 * n * k } else { n };
        let mut x = Array2::zeros((rows, CRITIC_INPUTS));
        for i in 0..n {
            x.row_mut(i).assign(&ArrayView1::from(
                &self.critic.input(&batch.critic_obs[i], batch.action[i]),
            ));
        }
        if penalty {
            let t1 = term1_inputs(batch, &self.critic, k, self.config.epsilon(), &mut self.rng)?;
            let t2 = term2_inputs(batch, &self.critic, k, &self.config.noise(), &mut self.rng)?;
            x.slice_mut(ndarray::s![n..n + n * k, ..]).assign(&t1);
            x.slice_mut(ndarray::s![n + n * k.., ..]).assign(&t2);
        }
        Ok(x)
    }

    /// Critic loss of one head on rows built by [`Trainer::critic_rows`]:
    /// `mean 0.5 (Q - y)^2 + alpha (mean log-mean-exp Q_band - mean Q_behavior)`,
    /// with its parameter gradient.
    pub fn critic_objective(
        &self,
        head: usize,
        x: ArrayView2<'_, f64>,
        y: &[f64],
    ) -> Result<CriticObjective> {
        critic_objective(
            &self.critic.heads[head],
            x,
            y,
            self.config.cql_alpha,
            self.config.penalty_samples,
        )
    }

    /// One penalized regression step on every critic head, then the soft
    /// target update.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<CriticStats> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let cfg = &self.config;
        let y = critic_target(
            batch,
            &self.critic,
            &self.actor,
            cfg.gamma,
            cfg.target_action_samples,
            &mut self.rng,
        )?;
        let x = self.critic_rows(batch)?;
        let heads = self.critic.heads.len() as f64;
        let mut stats = CriticStats {
            bellman_loss: 0.0,
            cql_term1: 0.0,
            cql_term2: 0.0,
            mean_q: 0.0,
            grad_norm: 0.0,
        };
        for h in 0..self.critic.heads.len() {
            let o = self.critic_objective(h, x.view(), &y)?;
            stats.bellman_loss += o.bellman_loss / heads;
            stats.cql_term1 += o.cql_term1 / heads;
            stats.cql_term2 += o.cql_term2 / heads;
            stats.mean_q += o.mean_q / heads;
            stats.grad_norm += norm(&o.grad) / heads;
            let r = self.critic_opt[h].step(self.critic.heads[h].params_mut(), &o.grad);
            self.with_fault(r)?;
        }
        for (t, h) in self.critic.targets.iter_mut().zip(&self.critic.heads) {
            t.soft_update(h, self.config.tau)?;
        }
        Ok(stats)
    }

    /// Actor loss `-mean q_min(s, F_w(s) (1 + r_phi(s) xi))` (plus the
    /// optional entropy term) for fixed noise draws `xi`, with gradients for
    /// the base-policy parameters and the spread network.
    pub fn actor_objective(&self, batch: &Batch, xi: &[f64]) -> Result<ActorObjective> {
        let n = batch.len();
        if n == 0 || xi.len() != n {
            return Err(Error::InvalidArgument(format!(
                "need one noise draw per row ({n} rows, {} draws)",
                xi.len()
            )));
        }
        let obs: Vec<ActorObservation> = batch.critic_obs.iter().map(|o| o.actor).collect();
        let feats = batch_actor_features(&self.actor, &obs);
        let (raw, vcache) = self.actor.variance_net.forward_batch(feats.view())?;
        let w = &self.actor.base.params.values;
        let mut f = vec![0.0; n];
        let mut gf = Vec::with_capacity(n);
        let mut rel = vec![0.0; n];
        let mut raw_clamped = vec![false; n];
        let mut act = vec![0.0; n];
        let mut floored = vec![false; n];
        let mut x = Array2::zeros((n, CRITIC_INPUTS));
        for i in 0..n {
            f[i] = self.actor.base.forward_with(w, &obs[i])?;
            gf.push(self.actor.base.grad_with(w, &obs[i])?);
            let (r, clamped) = self.actor.clamp_raw(raw[[i, 0]]);
            rel[i] = r.exp();
            raw_clamped[i] = clamped;
            let pre = f[i] * (1.0 + rel[i] * xi[i]);
            floored[i] = pre < ACTION_FLOOR;
            act[i] = pre.max(ACTION_FLOOR);
            x.row_mut(i).assign(&ArrayView1::from(
                &self.critic.input(&batch.critic_obs[i], act[i]),
            ));
        }

        let outs: Vec<(Array2<f64>, _)> = self
            .critic
            .heads
            .iter()
            .map(|h| h.forward_batch(x.view()))
            .collect::<Result<_>>()?;
        let mut argmin = vec![0usize; n];
        let mut qmin = vec![f64::INFINITY; n];
        for (h, (q, _)) in outs.iter().enumerate() {
            for i in 0..n {
                if q[[i, 0]] < qmin[i] {
                    qmin[i] = q[[i, 0]];
                    argmin[i] = h;
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        let mut dl_da = vec![0.0; n];
        for (h, (_, cache)) in outs.iter().enumerate() {
            let mut cot = Array2::zeros((n, 1));
            let mut any = false;
            for i in 0..n {
                if argmin[i] == h {
                    cot[[i, 0]] = -inv_n;
                    any = true;
                }
            }
            if !any {
                continue;
            }
            let (_, input_grad) = self.critic.heads[h].backward(cache, cot.view())?;
            for i in 0..n {
                if argmin[i] == h {
                    dl_da[i] += self.critic.action_grad(&input_grad.row(i).to_vec(), act[i]);
                }
            }
        }

        let ent = self.config.actor_entropy_weight;
        let mut loss = -qmin.iter().sum::<f64>() * inv_n;
        let mut gw = vec![0.0; w.len()];
        let mut vcot = Array2::zeros((n, 1));
        for i in 0..n {
            let mut dl_df = if floored[i] {
                0.0
            } else {
                dl_da[i] * (1.0 + rel[i] * xi[i])
            };
            let mut dl_draw = if floored[i] || raw_clamped[i] {
                0.0
            } else {
                dl_da[i] * f[i] * xi[i] * rel[i]
            };
            if ent > 0.0 {
                // log pi of the reparameterized sample is -ln(F r) - xi^2/2 + const.
                loss += ent * inv_n * (-(f[i] * rel[i]).ln());
                dl_df -= ent * inv_n / f[i];
                if !raw_clamped[i] {
                    dl_draw -= ent * inv_n;
                }
            }
            for (g, d) in gw.iter_mut().zip(&gf[i]) {
                *g += dl_df * d;
            }
            vcot[[i, 0]] = dl_draw;
        }
        let (gphi, _) = self.actor.variance_net.backward(&vcache, vcot.view())?;
        Ok(ActorObjective {
            loss,
            grad_w: gw,
            grad_phi: gphi,
            mean_rel_std: rel.iter().sum::<f64>() * inv_n,
        })
    }

    /// One reparameterized step on the base-policy parameters and the spread
    /// network, maximizing the batch mean of `q_min(s, a)`.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<ActorStats> {
        let xi: Vec<f64> = (0..batch.len())
            .map(|_| self.rng.sample(StandardNormal))
            .collect();
        let o = self.actor_objective(batch, &xi)?;
        if !o.loss.is_finite() {
            return Err(self.fault(format!("non-finite actor loss {}", o.loss)));
        }
        let r = self
            .policy_opt
            .step(&mut self.actor.base.params.values, &o.grad_w);
        self.with_fault(r)?;
        self.actor.base.params.project();
        let r = self
            .variance_opt
            .step(self.actor.variance_net.params_mut(), &o.grad_phi);
        self.with_fault(r)?;
        Ok(ActorStats {
            loss: o.loss,
            mean_rel_std: o.mean_rel_std,
            policy_grad_norm: norm(&o.grad_w),
            variance_grad_norm: norm(&o.grad_phi),
        })
    }

    pub fn sample_batch(&mut self, data: &Dataset) -> Result<Batch> {
        let idx = self.sampler.sample_indices(self.config.batch_size)?;
        Ok(Batch::from_transitions(
            idx.iter().map(|i| &data.transitions[*i]),
            self.reward_scale,
        ))
    }

    /// One gradient step: critic always, actor once pre-training is over.
    pub fn train_step(&mut self, data: &Dataset) -> Result<LossReport> {
        let batch = self.sample_batch(data)?;
        let actor_active = self.actor_active();
        let c = self.critic_update(&batch)?;
        let a = if actor_active {
            Some(self.actor_update(&batch)?)
        } else {
            None
        };
        let mean_rel_std = match a {
            Some(a) => a.mean_rel_std,
            None => {
                let obs: Vec<ActorObservation> = batch.critic_obs.iter().map(|o| o.actor).collect();
                let rel = rel_std_batch(&self.actor, &obs)?;
                rel.iter().sum::<f64>() / rel.len() as f64
            }
        };
        self.step += 1;
        let alpha = self.config.cql_alpha;
        let report = LossReport {
            step: self.step,
            actor_active: actor_active as u8,
            bellman_loss: c.bellman_loss,
            cql_term1: c.cql_term1,
            cql_term2: c.cql_term2,
            cql_penalty: alpha * (c.cql_term1 - c.cql_term2),
            actor_loss: a.map_or(0.0, |a| a.loss),
            mean_rel_std,
            mean_q: c.mean_q,
            critic_grad_norm: c.grad_norm,
            policy_grad_norm: a.map_or(0.0, |a| a.policy_grad_norm),
            variance_grad_norm: a.map_or(0.0, |a| a.variance_grad_norm),
        };
        if !report.all_finite() {
            return Err(self.fault(format!("non-finite loss report {report:?}")));
        }
        if !(REL_STD_GUARD.0..=REL_STD_GUARD.1).contains(&mean_rel_std) {
            return Err(self.fault(format!(
                "mean sigma/mu {mean_rel_std} left [{}, {}]",
                REL_STD_GUARD.0, REL_STD_GUARD.1
            )));
        }
        Ok(report)
    }

    /// Critic-only steps until `pretrain_steps` is reached.
    pub fn pretrain_critic(&mut self, data: &Dataset) -> Result<Vec<LossReport>> {
        let mut out = Vec::new();
        while self.step < self.config.pretrain_steps {
            out.push(self.train_step(data)?);
        }
        Ok(out)
    }

    /// Runs to `gradient_steps`. `on_report` sees every `log_every`-th
    /// report; `on_checkpoint` sees the state at step 0 (if starting fresh),
    /// every `checkpoint_every` steps and at the end.
    pub fn run<R, C>(
        &mut self,
        data: &Dataset,
        mut on_report: R,
        mut on_checkpoint: C,
    ) -> Result<()>
    where
        R: FnMut(&LossReport) -> Result<()>,
        C: FnMut(&Trainer) -> Result<()>,
    {
        if self.sampler_len() != data.len() {
            return Err(Error::Contract(
                "trainer was built for a different dataset".into(),
            ));
        }
        if self.step == 0 {
            self.last_checkpoint = Some(0);
            on_checkpoint(self)?;
        }
        while self.step < self.config.gradient_steps {
            let report = self.train_step(data)?;
            if report.step % self.config.log_every == 0 || report.step == self.config.gradient_steps
            {
                on_report(&report)?;
            }
            if self.step.is_multiple_of(self.config.checkpoint_every)
                || self.step == self.config.gradient_steps
            {
                self.last_checkpoint = Some(self.step);
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    fn sampler_len(&self) -> usize {
        self.sampler.len()
    }
}

/// Result of an in-memory training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<Trainer>,
    pub reports: Vec<LossReport>,
}

impl TrainOutcome {
    pub fn final_state(&self) -> &Trainer {
        self.checkpoints
            .last()
            .expect("at least the initial checkpoint")
    }
}

/// Trains from scratch, keeping every checkpoint in memory.
pub fn train(data: &Dataset, config: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(data, config)?;
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    trainer.run(
        data,
        |r| {
            reports.push(*r);
            Ok(())
        },
        |t| {
            checkpoints.push(t.clone());
            Ok(())
        },
    )?;
    Ok(TrainOutcome {
        checkpoints,
        reports,
    })
}
