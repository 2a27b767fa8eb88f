//! Soft actor-critic losses and their analytic gradients.
//!
//! All randomness (reparameterization noise, dropout masks) is passed in
//! explicitly so a loss can be re-evaluated under identical conditions.

use super::nets::{split_heads, squash_log_std, squash_log_std_grad};
use super::nn::{Mlp, Scalar};
use crate::env::ACTION_DIM;
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A minibatch of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    pub obs: Array2<F>,
    pub action: Array2<F>,
    pub reward: Array1<F>,
    pub next_obs: Array2<F>,
    pub done: Array1<F>,
}

impl<F: Scalar> Batch<F> {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<G: Scalar>(&self) -> Batch<G> {
        let c2 = |a: &Array2<F>| a.mapv(|v| G::from_f64_lossy(v.to_f64_lossy()));
        let c1 = |a: &Array1<F>| a.mapv(|v| G::from_f64_lossy(v.to_f64_lossy()));
        Batch {
            obs: c2(&self.obs),
            action: c2(&self.action),
            reward: c1(&self.reward),
            next_obs: c2(&self.next_obs),
            done: c1(&self.done),
        }
    }
}

/// Actor, online critics, target critics and the log temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SacNets<F> {
    pub actor: Mlp<F>,
    pub critics: [Mlp<F>; 2],
    pub targets: [Mlp<F>; 2],
    pub log_alpha: F,
}

impl<F: Scalar> SacNets<F> {
    pub fn cast<G: Scalar>(&self) -> SacNets<G> {
        SacNets {
            actor: self.actor.cast(),
            critics: [self.critics[0].cast(), self.critics[1].cast()],
            targets: [self.targets[0].cast(), self.targets[1].cast()],
            log_alpha: G::from_f64_lossy(self.log_alpha.to_f64_lossy()),
        }
    }
}

/// Reparameterized actor sample with everything needed to backpropagate it.
pub struct ActorSample<F> {
    pub action: Array2<F>,
    pub logp: Array1<F>,
    pub std: Array2<F>,
    pub tanh_raw: Array2<F>,
    pub cache: super::nn::Cache<F>,
}

/// `a = tanh(mean + std·eps)` and its log-density under the squashed Gaussian.
pub fn sample_actions<F: Scalar>(actor: &Mlp<F>, obs: ArrayView2<'_, F>, eps: ArrayView2<'_, F>) -> ActorSample<F> {
    let (out, cache) = actor.forward(obs, None);
    let (mean, raw) = split_heads(&out);
    let tanh_raw = raw.mapv(|v| v.tanh());
    let log_std = raw.mapv(squash_log_std);
    let std = log_std.mapv(|v| v.exp());
    let u = &mean + &(&std * &eps);
    let action = u.mapv(|v| v.tanh());
    let half_log_2pi = F::from_f64_lossy(0.5 * (2.0 * std::f64::consts::PI).ln());
    let ln2 = F::from_f64_lossy(std::f64::consts::LN_2);
    let two = F::from_f64_lossy(2.0);
    let half = F::from_f64_lossy(0.5);
    let n = obs.nrows();
    let logp = Array1::from_shape_fn(n, |b| {
        (0..ACTION_DIM)
            .map(|j| {
                let (e, ls, uu) = (eps[[b, j]], log_std[[b, j]], u[[b, j]]);
                // log(1 - tanh(u)^2) = 2·(ln 2 − u − softplus(−2u))
                let softplus = (-two * uu).max(F::zero()) + (F::one() + (-(two * uu).abs()).exp()).ln();
                let log_jac = two * (ln2 - uu - softplus);
                -half * e * e - ls - half_log_2pi - log_jac
            })
            .sum()
    });
    ActorSample { action, logp, std, tanh_raw, cache }
}

pub(crate) fn joined<F: Scalar>(obs: ArrayView2<'_, F>, action: ArrayView2<'_, F>) -> Array2<F> {
    concatenate(Axis(1), &[obs, action]).expect("matching batch sizes")
}

pub(crate) fn dropout_rng(seed: Option<u64>, tag: u64) -> Option<ChaCha8Rng> {
    seed.map(|s| ChaCha8Rng::seed_from_u64(s ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

pub(crate) const CRITIC_TAG: u64 = 1;
pub(crate) const ACTOR_TAG: u64 = 101;

/// Bellman targets `r + γ(1−done)(min Q_targ(s', a') − α·logp(a'|s'))`.
pub fn td_targets<F: Scalar>(nets: &SacNets<F>, batch: &Batch<F>, gamma: F, eps_next: ArrayView2<'_, F>) -> Array1<F> {
    let next = sample_actions(&nets.actor, batch.next_obs.view(), eps_next);
    let x = joined(batch.next_obs.view(), next.action.view());
    let q0 = nets.targets[0].predict(x.view());
    let q1 = nets.targets[1].predict(x.view());
    let alpha = nets.log_alpha.exp();
    Array1::from_shape_fn(batch.len(), |b| {
        let soft = q0[[b, 0]].min(q1[[b, 0]]) - alpha * next.logp[b];
        batch.reward[b] + gamma * (F::one() - batch.done[b]) * soft
    })
}

/// Sum over both critics of the mean squared TD error against `targets`.
/// Gradients w.r.t. each critic's parameters are added into `grads`.
pub fn critic_loss<F: Scalar>(
    nets: &SacNets<F>,
    batch: &Batch<F>,
    targets: &Array1<F>,
    dropout_seed: Option<u64>,
    mut grads: Option<[&mut [F]; 2]>,
) -> F {
    let x = joined(batch.obs.view(), batch.action.view());
    let n = F::from_usize(batch.len()).unwrap();
    let mut total = F::zero();
    for (i, critic) in nets.critics.iter().enumerate() {
        let mut rng = dropout_rng(dropout_seed, CRITIC_TAG + i as u64);
        let (q, cache) = critic.forward(x.view(), rng.as_mut());
        let err = &q.column(0) - targets;
        total = total + err.mapv(|e| e * e).sum() / n;
        if let Some(g) = grads.as_mut() {
            let two = F::from_f64_lossy(2.0);
            let dout = err.mapv(|e| two * e / n).insert_axis(Axis(1));
            critic.backward(&cache, dout.view(), Some(&mut *g[i]), false);
        }
    }
    total
}

/// Output of [`actor_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorLoss<F> {
    pub loss: F,
    pub mean_logp: F,
}

/// `mean(α·logp(a|s) − ½(Q₁(s,a) + Q₂(s,a)))` with `a` reparameterized by `eps`.
/// The temperature is treated as a constant; gradients go to the actor only.
pub fn actor_loss<F: Scalar>(
    nets: &SacNets<F>,
    obs: ArrayView2<'_, F>,
    eps: ArrayView2<'_, F>,
    dropout_seed: Option<u64>,
    grad: Option<&mut [F]>,
) -> ActorLoss<F> {
    let n = obs.nrows();
    let nf = F::from_usize(n).unwrap();
    let alpha = nets.log_alpha.exp();
    let sample = sample_actions(&nets.actor, obs, eps);
    let x = joined(obs, sample.action.view());
    let half = F::from_f64_lossy(0.5);
    let mut q_mean = Array1::<F>::zeros(n);
    let mut caches = Vec::with_capacity(2);
    for (i, critic) in nets.critics.iter().enumerate() {
        let mut rng = dropout_rng(dropout_seed, ACTOR_TAG + i as u64);
        let (q, cache) = critic.forward(x.view(), rng.as_mut());
        q_mean = q_mean + &(q.column(0).mapv(|v| v * half));
        caches.push(cache);
    }
    let mean_logp = sample.logp.sum() / nf;
    let loss = alpha * mean_logp - q_mean.sum() / nf;
    if let Some(grad) = grad {
        let dq = Array2::from_elem((n, 1), -half / nf);
        let obs_dim = obs.ncols();
        let mut d_action = Array2::<F>::zeros((n, ACTION_DIM));
        for (critic, cache) in nets.critics.iter().zip(&caches) {
            let dx = critic.backward(cache, dq.view(), None, true).unwrap();
            d_action += &dx.slice(s![.., obs_dim..]);
        }
        let two = F::from_f64_lossy(2.0);
        let coef = alpha / nf;
        let mut dout = Array2::<F>::zeros((n, 2 * ACTION_DIM));
        for b in 0..n {
            for j in 0..ACTION_DIM {
                let a = sample.action[[b, j]];
                let sd = sample.std[[b, j]];
                let e = eps[[b, j]];
                let du = d_action[[b, j]] * (F::one() - a * a) + coef * two * a;
                let dls = d_action[[b, j]] * (F::one() - a * a) * sd * e + coef * (two * a * sd * e - F::one());
                dout[[b, j]] = du;
                dout[[b, ACTION_DIM + j]] = dls * squash_log_std_grad(sample.tanh_raw[[b, j]]);
            }
        }
        nets.actor.backward(&sample.cache, dout.view(), Some(grad), false);
    }
    ActorLoss { loss, mean_logp }
}

/// Gradient of `−log α · (logp + target_entropy)` averaged over the batch.
pub fn temperature_grad(mean_logp: f64, target_entropy: f64) -> f64 {
    -(mean_logp + target_entropy)
}
