//! Differentiable heuristic bidding policies and the noised behavior policy
//! used for data collection.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::mdp::ActorObservation;

/// Lowest bid any base policy emits.
pub const ACTION_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasePolicyParams {
    pub values: Vec<f64>,
    pub names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl BasePolicyParams {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.names.len() {
            return Err(Error::Config(format!(
                "{} parameter values but {} names",
                self.values.len(),
                self.names.len()
            )));
        }
        for (v, n) in self.values.iter().zip(&self.names) {
            ensure_finite(n, *v)?;
        }
        if let Some(bounds) = &self.bounds {
            if bounds.len() != self.values.len() {
                return Err(Error::Config(
                    "bounds length differs from parameter count".into(),
                ));
            }
            for ((v, n), (lo, hi)) in self.values.iter().zip(&self.names).zip(bounds) {
                if lo > hi || v < lo || v > hi {
                    return Err(Error::InvalidArgument(format!(
                        "parameter {n} = {v} outside bounds [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Clips every value into its bounds, if any.
    pub fn project(&mut self) {
        if let Some(bounds) = &self.bounds {
            for (v, (lo, hi)) in self.values.iter_mut().zip(bounds) {
                *v = v.clamp(*lo, *hi);
            }
        }
    }

    /// Euclidean distance between two parameter vectors.
    pub fn distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Human-readable `name = value` dump, one parameter per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            // `{:?}` prints the shortest string that round-trips exactly.
            let _ = writeln!(out, "{n} = {v:?}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyForm {
    /// `a_t = a_{t-1} + K_p e_t + K_i sum(e)`.
    Pi,
    /// `a_t = a_{t-1} * exp(sum_j w_{b,j} e_t^j)` where segment `b` is picked
    /// by the pacing error against fixed knots.
    PiecewisePoly { knots: Vec<f64>, degree: usize },
}

/// A parameterized heuristic `F_w` together with its current parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasePolicy {
    pub form: PolicyForm,
    pub params: BasePolicyParams,
}

impl BasePolicy {
    pub fn pi(kp: f64, ki: f64) -> Self {
        Self {
            form: PolicyForm::Pi,
            params: BasePolicyParams {
                values: vec![kp, ki],
                names: vec!["k_p".into(), "k_i".into()],
                bounds: None,
            },
        }
    }

    /// `coefficients` is segment-major: `degree + 1` values per segment.
    pub fn piecewise_poly(knots: Vec<f64>, degree: usize, coefficients: Vec<f64>) -> Result<Self> {
        if knots.windows(2).any(|w| !(w[0] < w[1])) || knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::Config(
                "knots must be finite and strictly increasing".into(),
            ));
        }
        let segments = knots.len() + 1;
        if coefficients.len() != segments * (degree + 1) {
            return Err(Error::Config(format!(
                "expected {} coefficients for {segments} segments of degree {degree}, got {}",
                segments * (degree + 1),
                coefficients.len()
            )));
        }
        let names = (0..segments)
            .flat_map(|b| (0..=degree).map(move |j| format!("w_{b}_{j}")))
            .collect();
        let policy = Self {
            form: PolicyForm::PiecewisePoly { knots, degree },
            params: BasePolicyParams {
                values: coefficients,
                names,
                bounds: None,
            },
        };
        policy.params.validate()?;
        Ok(policy)
    }

    /// The shipped pacing controller: two segments split at zero pacing
    /// error, quadratic exponent, unit proportional gain on both sides.
    pub fn default_pacing() -> Self {
        Self::piecewise_poly(vec![0.0], 2, vec![0.0, -1.0, 0.0, 0.0, -1.0, 0.0])
            .expect("static default is well formed")
    }

    pub fn num_params(&self) -> usize {
        self.params.values.len()
    }

    /// Observation fields this policy reads.
    pub fn feature_selector(&self) -> &'static [&'static str] {
        match self.form {
            PolicyForm::Pi => &["last_action", "pacing_error", "cumulative_pacing_error"],
            PolicyForm::PiecewisePoly { .. } => &["last_action", "pacing_error"],
        }
    }

    pub fn forward(&self, obs: &ActorObservation) -> Result<f64> {
        self.forward_with(&self.params.values, obs)
    }

    pub fn grad(&self, obs: &ActorObservation) -> Result<Vec<f64>> {
        self.grad_with(&self.params.values, obs)
    }

    /// Forward pass with an explicit parameter vector of this policy's shape.
    pub fn forward_with(&self, w: &[f64], obs: &ActorObservation) -> Result<f64> {
        self.check_len(w)?;
        match &self.form {
            PolicyForm::Pi => pi_forward([w[0], w[1]], obs),
            PolicyForm::PiecewisePoly { knots, degree } => {
                piecewise_poly_forward(knots, *degree, w, obs)
            }
        }
    }

    pub fn grad_with(&self, w: &[f64], obs: &ActorObservation) -> Result<Vec<f64>> {
        self.check_len(w)?;
        match &self.form {
            PolicyForm::Pi => pi_grad([w[0], w[1]], obs).map(|g| g.to_vec()),
            PolicyForm::PiecewisePoly { knots, degree } => {
                piecewise_poly_grad(knots, *degree, w, obs)
            }
        }
    }

    fn check_len(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.params.values.len() {
            return Err(Error::Contract(format!(
                "parameter vector has length {}, policy expects {}",
                w.len(),
                self.params.values.len()
            )));
        }
        Ok(())
    }
}

fn check_params(w: &[f64]) -> Result<()> {
    for v in w {
        ensure_finite("policy parameter", *v)?;
    }
    Ok(())
}

fn check_obs(obs: &ActorObservation) -> Result<()> {
    ensure_finite("last_action", obs.last_action)?;
    ensure_finite("pacing_error", obs.pacing_error)?;
    ensure_finite("cumulative_pacing_error", obs.cumulative_pacing_error)?;
    if obs.last_action < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "last_action must be >= 0, got {}",
            obs.last_action
        )));
    }
    Ok(())
}

fn pi_raw(params: [f64; 2], obs: &ActorObservation) -> f64 {
    obs.last_action + params[0] * obs.pacing_error + params[1] * obs.cumulative_pacing_error
}

pub fn pi_forward(params: [f64; 2], obs: &ActorObservation) -> Result<f64> {
    check_params(&params)?;
    check_obs(obs)?;
    Ok(pi_raw(params, obs).max(ACTION_FLOOR))
}

/// `[da/dK_p, da/dK_i]`; zero when the output sits on the floor.
pub fn pi_grad(params: [f64; 2], obs: &ActorObservation) -> Result<[f64; 2]> {
    check_params(&params)?;
    check_obs(obs)?;
    if pi_raw(params, obs) <= ACTION_FLOOR {
        return Ok([0.0, 0.0]);
    }
    Ok([obs.pacing_error, obs.cumulative_pacing_error])
}

/// Index of the segment containing `x`; a value on a knot belongs to the
/// segment on its right.
pub fn segment_index(knots: &[f64], x: f64) -> usize {
    knots.partition_point(|k| *k <= x)
}

fn poly_exponent(w: &[f64], x: f64) -> f64 {
    w.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn piecewise_raw(knots: &[f64], degree: usize, w: &[f64], obs: &ActorObservation) -> (usize, f64) {
    let b = segment_index(knots, obs.pacing_error);
    let coeffs = &w[b * (degree + 1)..(b + 1) * (degree + 1)];
    (
        b,
        obs.last_action * poly_exponent(coeffs, obs.pacing_error).exp(),
    )
}

pub fn piecewise_poly_forward(
    knots: &[f64],
    degree: usize,
    w: &[f64],
    obs: &ActorObservation,
) -> Result<f64> {
    check_params(w)?;
    check_obs(obs)?;
    ensure_finite("fraction_budget_spent", obs.fraction_budget_spent)?;
    Ok(piecewise_raw(knots, degree, w, obs).1.max(ACTION_FLOOR))
}

pub fn piecewise_poly_grad(
    knots: &[f64],
    degree: usize,
    w: &[f64],
    obs: &ActorObservation,
) -> Result<Vec<f64>> {
    check_params(w)?;
    check_obs(obs)?;
    let mut g = vec![0.0; w.len()];
    let (b, out) = piecewise_raw(knots, degree, w, obs);
    if out <= ACTION_FLOOR {
        return Ok(g);
    }
    let mut power = 1.0;
    for j in 0..=degree {
        g[b * (degree + 1) + j] = out * power;
        power *= obs.pacing_error;
    }
    Ok(g)
}

/// Truncated multiplicative Gaussian exploration noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorNoiseSpec {
    pub sigma_beta: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl Default for BehaviorNoiseSpec {
    fn default() -> Self {
        Self {
            sigma_beta: 0.05,
            clip_lo: -0.5,
            clip_hi: 0.5,
        }
    }
}

impl BehaviorNoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_beta.is_finite() && self.sigma_beta > 0.0) {
            return Err(Error::Config(format!(
                "sigma_beta must be > 0, got {}",
                self.sigma_beta
            )));
        }
        if !(self.clip_lo < 0.0 && self.clip_hi > 0.0 && self.clip_lo > -1.0) {
            return Err(Error::Config(format!(
                "clip range ({}, {}) must straddle 0 and stay above -1",
                self.clip_lo, self.clip_hi
            )));
        }
        Ok(())
    }

    /// Draws the clipped relative perturbation `clip(eps, lo, hi)`.
    pub fn sample_factor<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.sigma_beta * z).clamp(self.clip_lo, self.clip_hi)
    }
}

/// One behavior-policy bid: `F_w(obs) * (1 + clip(eps))`.
pub fn behavior_sample<R: Rng + ?Sized>(
    policy: &BasePolicy,
    obs: &ActorObservation,
    noise: &BehaviorNoiseSpec,
    rng: &mut R,
) -> Result<f64> {
    let mean = policy.forward(obs)?;
    Ok(mean * (1.0 + noise.sample_factor(rng)))
}

/// The action interval `[(1-eps) m, (1+eps) m]` around a behavior mean.
pub fn behavior_interval(behavior_mean: f64, epsilon: f64) -> Result<(f64, f64)> {
    if !(behavior_mean.is_finite() && behavior_mean > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "behavior mean must be > 0, got {behavior_mean}"
        )));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!(
            "interval half-width {epsilon} gives a degenerate or non-positive interval"
        )));
    }
    Ok((
        (1.0 - epsilon) * behavior_mean,
        (1.0 + epsilon) * behavior_mean,
    ))
}
