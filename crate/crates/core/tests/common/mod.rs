//! Helpers shared by the integration suites and the acceptance harness.
#![allow(dead_code)]

use bidtune::agent::{Normalizer, ACTOR_FEATURES, CRITIC_INPUTS};
use bidtune::mdp::{ActorObservation, CriticObservation};
use bidtune::nn::MlpNet;
use bidtune::policy::BasePolicy;
use bidtune::rng::{rng_from_seed, SimRng};
use bidtune::trainer::{Batch, TrainConfig, Trainer};
use ndarray::Array2;
use rand::Rng;

/// Tally of a finite-difference sweep.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub cases: usize,
    /// Coordinates skipped because the function has a kink within `h`.
    pub excluded: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn merge(&mut self, o: GradCheck) {
        self.cases += o.cases;
        self.excluded += o.excluded;
        self.failures += o.failures;
        self.max_rel_err = self.max_rel_err.max(o.max_rel_err);
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.failures == 0
            && self.max_rel_err < tol
            && self.excluded * 20 <= self.cases + self.excluded
    }
}

pub const GRAD_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps rounding noise in the
/// numeric estimate from dominating when the true slope is near zero.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central differences of `f` at `x` along each coordinate in `idx`,
/// compared with `analytic`. A coordinate whose one-sided slopes disagree by
/// more than 1% sits next to a kink (ReLU, floor, clamp, knot, argmin switch)
/// and is excluded.
pub fn fd_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    idx: &[usize],
    out: &mut GradCheck,
) {
    let f0 = f(x);
    let mut xp = x.to_vec();
    for &i in idx {
        let h = 1e-5 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        let scale = fwd.abs().max(bwd.abs()).max(1e-6);
        if (fwd - bwd).abs() > 1e-2 * scale {
            out.excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let e = rel_err(analytic[i], numeric, 1e-6 * f0.abs().max(1.0));
        out.cases += 1;
        out.max_rel_err = out.max_rel_err.max(e);
        if e >= GRAD_TOL {
            out.failures += 1;
        }
    }
}

fn random_widths(rng: &mut SimRng) -> Vec<usize> {
    let depth = rng.random_range(1..=3);
    let mut w = vec![rng.random_range(1..=6)];
    for _ in 0..depth {
        w.push(rng.random_range(1..=6));
    }
    w
}

fn random_net(rng: &mut SimRng) -> MlpNet {
    let widths = random_widths(rng);
    let b = rng.random_range(-1.0..1.0);
    MlpNet::new(&widths, 1.0, b, rng).unwrap()
}

fn random_matrix(rng: &mut SimRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

fn contract(net: &MlpNet, x: &Array2<f64>, cot: &Array2<f64>) -> f64 {
    let (y, _) = net.forward_batch(x.view()).unwrap();
    (&y * cot).sum()
}

/// `L = sum(cotangent * net(x))` differentiated in the parameters, over random
/// topologies; stops once `target` coordinates have been compared.
pub fn check_mlp_params(target: usize, seed: u64) -> GradCheck {
    let mut rng = rng_from_seed(seed);
    let mut out = GradCheck::default();
    while out.cases < target {
        let net = random_net(&mut rng);
        let rows = rng.random_range(1..=3);
        let x = random_matrix(&mut rng, rows, net.input_width());
        let cot = random_matrix(&mut rng, rows, net.output_width());
        let (_, cache) = net.forward_batch(x.view()).unwrap();
        let (g, _) = net.backward(&cache, cot.view()).unwrap();
        let widths = net.widths().to_vec();
        let idx: Vec<usize> = (0..net.num_params()).collect();
        let mut f = |p: &[f64]| {
            let n = MlpNet::from_params(widths.clone(), p.to_vec()).unwrap();
            contract(&n, &x, &cot)
        };
        fd_check(&mut f, net.params(), &g, &idx, &mut out);
    }
    out
}

/// Same loss differentiated in the inputs.
pub fn check_mlp_inputs(target: usize, seed: u64) -> GradCheck {
    let mut rng = rng_from_seed(seed);
    let mut out = GradCheck::default();
    while out.cases < target {
        let net = random_net(&mut rng);
        let rows = rng.random_range(1..=3);
        let x = random_matrix(&mut rng, rows, net.input_width());
        let cot = random_matrix(&mut rng, rows, net.output_width());
        let (_, cache) = net.forward_batch(x.view()).unwrap();
        let (_, gx) = net.backward(&cache, cot.view()).unwrap();
        let cols = net.input_width();
        let flat: Vec<f64> = x.iter().copied().collect();
        let g: Vec<f64> = gx.iter().copied().collect();
        let idx: Vec<usize> = (0..flat.len()).collect();
        let mut f = |v: &[f64]| {
            let xv = Array2::from_shape_vec((rows, cols), v.to_vec()).unwrap();
            contract(&net, &xv, &cot)
        };
        fd_check(&mut f, &flat, &g, &idx, &mut out);
    }
    out
}

pub fn random_actor_obs(rng: &mut SimRng) -> ActorObservation {
    let spent = rng.random_range(0.0..1.0);
    let passed = rng.random_range(0.0..1.0);
    let pacing_error = spent - passed;
    ActorObservation {
        fraction_budget_spent: spent,
        fraction_time_elapsed: rng.random_range(0.0..1.0),
        fraction_opportunities_passed: passed,
        avg_past_bid: rng.random_range(0.0..5.0),
        last_action: rng.random_range(0.05..5.0),
        pacing_error,
        cumulative_pacing_error: pacing_error + rng.random_range(-3.0..3.0),
    }
}

pub fn random_critic_obs(rng: &mut SimRng) -> CriticObservation {
    let actor = random_actor_obs(rng);
    let total = rng.random_range(100.0..3000.0);
    CriticObservation {
        actor,
        remaining_budget: total * (1.0 - actor.fraction_budget_spent),
        total_budget: total,
        audience_size: rng.random_range(1e3..1e5),
        current_step_density: rng.random_range(0.0..3000.0),
        step_index: rng.random_range(0..48),
        recent_win_rate: rng.random_range(0.0..1.0),
    }
}

fn random_policy(rng: &mut SimRng) -> BasePolicy {
    if rng.random_bool(0.3) {
        BasePolicy::pi(rng.random_range(-2.0..0.0), rng.random_range(-0.5..0.0))
    } else {
        let knots = if rng.random_bool(0.5) {
            vec![0.0]
        } else {
            vec![-0.2, 0.1]
        };
        let degree = rng.random_range(0..=3);
        let n = (knots.len() + 1) * (degree + 1);
        let w = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        BasePolicy::piecewise_poly(knots, degree, w).unwrap()
    }
}

/// Base-policy output differentiated in its parameters.
pub fn check_base_policy(target: usize, seed: u64) -> GradCheck {
    let mut rng = rng_from_seed(seed);
    let mut out = GradCheck::default();
    while out.cases < target {
        let policy = random_policy(&mut rng);
        let obs = random_actor_obs(&mut rng);
        let w = policy.params.values.clone();
        let g = policy.grad_with(&w, &obs).unwrap();
        let idx: Vec<usize> = (0..w.len()).collect();
        let mut f = |v: &[f64]| policy.forward_with(v, &obs).unwrap();
        fd_check(&mut f, &w, &g, &idx, &mut out);
    }
    out
}

/// A trainer over random normalizers with small networks; nothing is fitted.
pub fn random_trainer(rng: &mut SimRng, alpha: f64, twin: bool) -> Trainer {
    let norm = |rng: &mut SimRng, width: usize| Normalizer {
        mean: (0..width).map(|_| rng.random_range(-0.5..0.5)).collect(),
        inv_std: (0..width).map(|_| rng.random_range(0.5..2.0)).collect(),
    };
    let cfg = TrainConfig {
        critic_hidden: vec![6, 5],
        actor_hidden: vec![4],
        twin_critic: twin,
        cql_alpha: alpha,
        penalty_samples: 3,
        seed: rng.random(),
        actor_entropy_weight: if rng.random_bool(0.5) { 0.0 } else { 0.1 },
        ..TrainConfig::desk()
    };
    let actor_norm = norm(rng, ACTOR_FEATURES);
    let critic_norm = norm(rng, CRITIC_INPUTS);
    let mut t =
        Trainer::from_parts(random_policy(rng), 10, actor_norm, critic_norm, 1.0, cfg).unwrap();
    // Untrained output layers are nearly flat; give them real curvature.
    for h in &mut t.critic.heads {
        for p in h.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
    }
    for p in t.actor.variance_net.params_mut() {
        *p = rng.random_range(-0.3..0.3);
    }
    let last = t.actor.variance_net.params().len() - 1;
    t.actor.variance_net.params_mut()[last] = rng.random_range(-3.5..-1.5);
    t
}

pub fn random_batch(rng: &mut SimRng, n: usize) -> Batch {
    let critic_obs: Vec<CriticObservation> = (0..n).map(|_| random_critic_obs(rng)).collect();
    let behavior_mean: Vec<f64> = critic_obs
        .iter()
        .map(|o| o.actor.last_action * rng.random_range(0.7..1.3))
        .collect();
    Batch {
        next_critic_obs: (0..n).map(|_| random_critic_obs(rng)).collect(),
        action: behavior_mean
            .iter()
            .map(|m| m * rng.random_range(0.9..1.1))
            .collect(),
        behavior_mean,
        reward: (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
        done: (0..n).map(|_| rng.random_bool(0.1)).collect(),
        critic_obs,
    }
}

/// Reparameterized actor loss differentiated in the base-policy parameters
/// and the spread network's parameters, with the noise draws held fixed.
pub fn check_actor_path(target: usize, seed: u64) -> GradCheck {
    let mut rng = rng_from_seed(seed);
    let mut out = GradCheck::default();
    while out.cases < target {
        let twin = rng.random_bool(0.5);
        let t = random_trainer(&mut rng, 0.1, twin);
        let n = rng.random_range(1..=4);
        let batch = random_batch(&mut rng, n);
        let xi: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let o = t.actor_objective(&batch, &xi).unwrap();

        let w = t.actor.base.params.values.clone();
        let idx: Vec<usize> = (0..w.len()).collect();
        let mut tw = t.clone();
        let mut f = |v: &[f64]| {
            tw.actor.base.params.values.copy_from_slice(v);
            tw.actor_objective(&batch, &xi).unwrap().loss
        };
        fd_check(&mut f, &w, &o.grad_w, &idx, &mut out);

        let phi = t.actor.variance_net.params().to_vec();
        let idx: Vec<usize> = (0..phi.len()).collect();
        let mut tp = t.clone();
        let mut f = |v: &[f64]| {
            tp.actor.variance_net.params_mut().copy_from_slice(v);
            tp.actor_objective(&batch, &xi).unwrap().loss
        };
        fd_check(&mut f, &phi, &o.grad_phi, &idx, &mut out);
    }
    out
}

/// Penalized critic loss differentiated in one head's parameters.
pub fn check_critic_objective(target: usize, seed: u64) -> GradCheck {
    let mut rng = rng_from_seed(seed);
    let mut out = GradCheck::default();
    while out.cases < target {
        let alpha = [0.0, 0.1, 1.0, 5.0][rng.random_range(0..4)];
        let mut t = random_trainer(&mut rng, alpha, false);
        let n = rng.random_range(1..=4);
        let batch = random_batch(&mut rng, n);
        let x = t.critic_rows(&batch).unwrap();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let o = t.critic_objective(0, x.view(), &y).unwrap();
        let p = t.critic.heads[0].params().to_vec();
        let idx: Vec<usize> = (0..p.len()).collect();
        let mut f = |v: &[f64]| {
            t.critic.heads[0].params_mut().copy_from_slice(v);
            t.critic_objective(0, x.view(), &y).unwrap().loss
        };
        fd_check(&mut f, &p, &o.grad, &idx, &mut out);
    }
    out
}

/// Three states, two bids, deterministic transitions. State `s` is encoded in
/// the elapsed-time fraction and step index; its `last_action` is the bid the
/// target policy (a zero-gain PI controller, which repeats the last bid)
/// takes there.
pub mod tabular {
    use super::*;
    use bidtune::agent::{action_features, critic_state_features};

    pub const ACTIONS: [f64; 2] = [1.0, 2.0];
    pub const POLICY: [usize; 3] = [1, 0, 1];
    pub const GAMMA: f64 = 0.8;
    /// `(next state, reward)` for each `(state, action index)`.
    pub const MODEL: [[(usize, f64); 2]; 3] = [
        [(1, 1.0), (2, 0.0)],
        [(0, 0.5), (2, 1.5)],
        [(2, 0.2), (0, 1.0)],
    ];

    pub fn state(s: usize) -> CriticObservation {
        CriticObservation {
            actor: ActorObservation {
                fraction_budget_spent: 0.0,
                fraction_time_elapsed: s as f64 / 2.0,
                fraction_opportunities_passed: 0.0,
                avg_past_bid: 1.0,
                last_action: ACTIONS[POLICY[s]],
                pacing_error: 0.0,
                cumulative_pacing_error: 0.0,
            },
            remaining_budget: 100.0,
            total_budget: 100.0,
            audience_size: 1000.0,
            current_step_density: 10.0,
            step_index: s,
            recent_win_rate: 0.5,
        }
    }

    /// Q of the target policy by value iteration.
    pub fn value_iteration() -> [[f64; 2]; 3] {
        let mut q = [[0.0; 2]; 3];
        for _ in 0..2000 {
            let mut next = q;
            for s in 0..3 {
                for a in 0..2 {
                    let (s2, r) = MODEL[s][a];
                    next[s][a] = r + GAMMA * q[s2][POLICY[s2]];
                }
            }
            q = next;
        }
        q
    }

    pub fn batch() -> Batch {
        let mut b = Batch {
            critic_obs: vec![],
            next_critic_obs: vec![],
            action: vec![],
            behavior_mean: vec![],
            reward: vec![],
            done: vec![],
        };
        for s in 0..3 {
            for a in 0..2 {
                let (s2, r) = MODEL[s][a];
                b.critic_obs.push(state(s));
                b.next_critic_obs.push(state(s2));
                b.action.push(ACTIONS[a]);
                b.behavior_mean.push(1.5);
                b.reward.push(r);
                b.done.push(false);
            }
        }
        b
    }

    /// Trains critics with the penalty off on the full six-transition batch;
    /// returns the learned `q_min` table.
    pub fn train(steps: usize, seed: u64) -> [[f64; 2]; 3] {
        let b = batch();
        let rows: Vec<Vec<f64>> = (0..b.len())
            .map(|i| {
                let mut r = critic_state_features(&b.critic_obs[i]).to_vec();
                r.extend(action_features(
                    b.action[i],
                    b.critic_obs[i].actor.last_action,
                ));
                r
            })
            .collect();
        let critic_norm = Normalizer::fit(CRITIC_INPUTS, rows.iter().map(|r| &r[..]));
        let cfg = TrainConfig {
            gamma: GAMMA,
            cql_alpha: 0.0,
            critic_hidden: vec![32, 32],
            actor_hidden: vec![4],
            critic_lr: 1e-3,
            tau: 0.05,
            batch_size: 6,
            gradient_steps: steps as u64,
            pretrain_steps: steps as u64,
            sigma_beta: 0.01,
            seed,
            ..TrainConfig::desk()
        };
        let mut t = Trainer::from_parts(
            bidtune::policy::BasePolicy::pi(0.0, 0.0),
            b.len(),
            Normalizer::identity(ACTOR_FEATURES),
            critic_norm,
            1.0,
            cfg,
        )
        .unwrap();
        // Near-deterministic target policy: relative spread at its floor.
        let last = t.actor.variance_net.num_params() - 1;
        for p in t.actor.variance_net.params_mut() {
            *p = 0.0;
        }
        t.actor.variance_net.params_mut()[last] = 0.01f64.ln();
        for _ in 0..steps {
            t.critic_update(&b).unwrap();
        }
        let mut q = [[0.0; 2]; 3];
        for (s, row) in q.iter_mut().enumerate() {
            for (a, v) in row.iter_mut().enumerate() {
                *v = t.critic.q_min(&state(s), ACTIONS[a]).unwrap();
            }
        }
        q
    }

    pub fn sup_error(a: &[[f64; 2]; 3], b: &[[f64; 2]; 3]) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}
