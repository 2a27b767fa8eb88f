//! Central finite-difference checks of the hand-written backpropagation.

use super::nets::{actor_spec, critic_spec};
use super::nn::{Mlp, MlpSpec};
use super::sac::{actor_loss, critic_loss, dropout_rng, joined, sample_actions, td_targets, Batch, SacNets, ACTOR_TAG, CRITIC_TAG};
use crate::env::{ACTION_DIM, OBS_DIM};
use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameters compared.
    pub checked: usize,
    /// Parameters skipped because a relu changed state inside the stencil.
    pub skipped_kinks: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

const REL_FLOOR: f64 = 1e-8;

/// Compares `analytic[i]` with central differences of `loss` at the given indices.
/// `loss(params)` returns the loss and the relu pattern it passed through.
pub fn check_indices(
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    mut loss: impl FnMut(&[f64]) -> (f64, Vec<bool>),
) -> GradCheckReport {
    let mut p = params.to_vec();
    let (_, base_pattern) = loss(&p);
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped_kinks: 0 };
    for &i in indices {
        let orig = p[i];
        p[i] = orig + h;
        let (plus, pat_plus) = loss(&p);
        p[i] = orig - h;
        let (minus, pat_minus) = loss(&p);
        p[i] = orig;
        if pat_plus != base_pattern || pat_minus != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic[i], numeric, REL_FLOOR));
        report.checked += 1;
    }
    report
}

fn pick_indices(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if count >= n {
        (0..n).collect()
    } else {
        sample(rng, n, count).into_vec()
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// A random batch whose observations look like real ones: continuous joint
/// values followed by sparse binary key segments.
pub fn random_batch(n: usize, rng: &mut ChaCha8Rng) -> Batch<f64> {
    let obs_like = |rng: &mut ChaCha8Rng| {
        Array2::from_shape_fn((n, OBS_DIM), |(_, j)| {
            if j < 13 {
                rng.random_range(-1.0..1.0)
            } else if rng.random::<f64>() < 0.05 {
                1.0
            } else {
                0.0
            }
        })
    };
    let obs = obs_like(rng);
    let next_obs = obs_like(rng);
    Batch {
        obs,
        action: Array2::from_shape_fn((n, ACTION_DIM), |_| rng.random_range(-0.99..0.99)),
        reward: Array1::from_shape_fn(n, |_| rng.random_range(-1.0..3.0)),
        next_obs,
        done: Array1::from_shape_fn(n, |i| if i % 4 == 3 { 1.0 } else { 0.0 }),
    }
}

/// Random networks in f64 with the production shapes (or a narrower hidden width).
pub fn random_nets(hidden: usize, dropout: f64, rng: &mut ChaCha8Rng) -> SacNets<f64> {
    let critics = [Mlp::new(critic_spec(hidden, dropout), rng), Mlp::new(critic_spec(hidden, dropout), rng)];
    SacNets {
        actor: Mlp::new(actor_spec(hidden), rng),
        targets: critics.clone(),
        critics,
        log_alpha: rng.random_range(-3.0..0.0),
    }
}

/// Squared-error loss of a single linear layer.
pub fn linear_check(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::<f64>::new(MlpSpec { sizes: vec![7, 5], layer_norm: false, dropout: 0.0 }, &mut rng);
    let x = gaussian(6, 7, &mut rng);
    let y = gaussian(6, 5, &mut rng);
    let loss_of = |net: &Mlp<f64>, x: ArrayView2<'_, f64>| {
        let (out, cache) = net.forward(x, None);
        let diff = &out - &y;
        (0.5 * diff.mapv(|v| v * v).sum(), diff, cache)
    };
    let (_, diff, cache) = loss_of(&net, x.view());
    let mut grad = vec![0.0; net.num_params()];
    net.backward(&cache, diff.view(), Some(&mut grad), false);
    let all: Vec<usize> = (0..net.num_params()).collect();
    let spec = net.spec.clone();
    check_indices(&net.params, &grad, &all, 1e-5, |p| {
        let n = Mlp::from_params(spec.clone(), p.to_vec()).unwrap();
        let (l, _, c) = loss_of(&n, x.view());
        (l, c.relu_pattern())
    })
}

/// Actor loss gradient w.r.t. actor parameters on a random batch.
pub fn actor_check(seed: u64, hidden: usize, batch_size: usize, samples: usize, h: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nets = random_nets(hidden, 0.01, &mut rng);
    let batch = random_batch(batch_size, &mut rng);
    let eps = gaussian(batch_size, ACTION_DIM, &mut rng);
    let dropout_seed = Some(rng.random());
    let mut grad = vec![0.0; nets.actor.num_params()];
    actor_loss(&nets, batch.obs.view(), eps.view(), dropout_seed, Some(&mut grad));
    let indices = pick_indices(grad.len(), samples, &mut rng);
    let mut probe = nets.clone();
    check_indices(&nets.actor.params, &grad, &indices, h, |p| {
        probe.actor.params.copy_from_slice(p);
        let l = actor_loss(&probe, batch.obs.view(), eps.view(), dropout_seed, None).loss;
        let sample = sample_actions(&probe.actor, batch.obs.view(), eps.view());
        let mut pattern = sample.cache.relu_pattern();
        let x = joined(batch.obs.view(), sample.action.view());
        for (i, critic) in probe.critics.iter().enumerate() {
            let mut rng = dropout_rng(dropout_seed, ACTOR_TAG + i as u64);
            pattern.extend(critic.forward(x.view(), rng.as_mut()).1.relu_pattern());
        }
        (l, pattern)
    })
}

/// Critic loss gradient w.r.t. the first critic's parameters on a random batch.
pub fn critic_check(seed: u64, hidden: usize, batch_size: usize, samples: usize, h: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nets = random_nets(hidden, 0.01, &mut rng);
    let batch = random_batch(batch_size, &mut rng);
    let eps_next = gaussian(batch_size, ACTION_DIM, &mut rng);
    let targets = td_targets(&nets, &batch, 0.99, eps_next.view());
    let dropout_seed = Some(rng.random());
    let n = nets.critics[0].num_params();
    let (mut g0, mut g1) = (vec![0.0; n], vec![0.0; n]);
    critic_loss(&nets, &batch, &targets, dropout_seed, Some([&mut g0, &mut g1]));
    let indices = pick_indices(n, samples, &mut rng);
    let mut probe = nets.clone();
    let x = joined(batch.obs.view(), batch.action.view());
    check_indices(&nets.critics[0].params, &g0, &indices, h, |p| {
        probe.critics[0].params.copy_from_slice(p);
        let l = critic_loss(&probe, &batch, &targets, dropout_seed, None);
        let mut rng = dropout_rng(dropout_seed, CRITIC_TAG);
        let (_, cache) = probe.critics[0].forward(x.view(), rng.as_mut());
        (l, cache.relu_pattern())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_is_exact() {
        let r = linear_check(3);
        assert_eq!(r.skipped_kinks, 0);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn small_actor_and_critic() {
        let a = actor_check(4, 16, 4, 200, 1e-5);
        assert!(a.max_rel_error < 1e-4, "{a:?}");
        let c = critic_check(5, 16, 4, 200, 1e-5);
        assert!(c.max_rel_error < 1e-4, "{c:?}");
    }
}
