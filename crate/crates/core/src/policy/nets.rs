//! The tanh-Gaussian actor and the pair of Q critics.

use super::nn::{Mlp, MlpSpec, Scalar};
use crate::env::{Action, Controller, Observation, ACTION_DIM, OBS_DIM};
use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const HIDDEN: usize = 256;
pub const HIDDEN_LAYERS: usize = 3;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("observation has length {0}, expected {OBS_DIM}")]
    ObservationLength(usize),
    #[error("non-finite network output at component {index}: mean={mean}, log_std={log_std}")]
    NonFinite { index: usize, mean: f64, log_std: f64 },
}

pub fn actor_spec(hidden: usize) -> MlpSpec {
    let mut sizes = vec![OBS_DIM];
    sizes.extend([hidden; HIDDEN_LAYERS]);
    sizes.push(2 * ACTION_DIM);
    MlpSpec { sizes, layer_norm: false, dropout: 0.0 }
}

pub fn critic_spec(hidden: usize, dropout: f64) -> MlpSpec {
    let mut sizes = vec![OBS_DIM + ACTION_DIM];
    sizes.extend([hidden; HIDDEN_LAYERS]);
    sizes.push(1);
    MlpSpec { sizes, layer_norm: true, dropout }
}

/// Maps the raw head output onto `[LOG_STD_MIN, LOG_STD_MAX]`.
pub fn squash_log_std<F: Scalar>(raw: F) -> F {
    let lo = F::from_f64_lossy(LOG_STD_MIN);
    let half = F::from_f64_lossy(0.5 * (LOG_STD_MAX - LOG_STD_MIN));
    lo + half * (raw.tanh() + F::one())
}

/// Derivative of [`squash_log_std`] given `tanh(raw)`.
pub fn squash_log_std_grad<F: Scalar>(tanh_raw: F) -> F {
    F::from_f64_lossy(0.5 * (LOG_STD_MAX - LOG_STD_MIN)) * (F::one() - tanh_raw * tanh_raw)
}

/// Splits actor outputs into means and raw log-std heads.
pub fn split_heads<F: Scalar>(out: &Array2<F>) -> (ArrayView2<'_, F>, ArrayView2<'_, F>) {
    out.view().split_at(Axis(1), ACTION_DIM)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub net: Mlp<f32>,
}

impl PolicyNet {
    pub fn new(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        PolicyNet { net: Mlp::new(actor_spec(hidden), rng) }
    }

    pub fn zeros(hidden: usize) -> Self {
        PolicyNet { net: Mlp::zeros(actor_spec(hidden)) }
    }

    /// Means and log-stds for a single observation.
    pub fn distribution(&self, obs: &[f64]) -> Result<([f64; ACTION_DIM], [f64; ACTION_DIM]), PolicyError> {
        distribution(&self.net, obs)
    }
}

fn distribution(net: &Mlp<f32>, obs: &[f64]) -> Result<([f64; ACTION_DIM], [f64; ACTION_DIM]), PolicyError> {
    if obs.len() != OBS_DIM {
        return Err(PolicyError::ObservationLength(obs.len()));
    }
    let x = Array2::from_shape_fn((1, OBS_DIM), |(_, j)| obs[j] as f32);
    let out = net.predict(x.view());
    let mean: [f64; ACTION_DIM] = std::array::from_fn(|j| out[[0, j]] as f64);
    let log_std: [f64; ACTION_DIM] = std::array::from_fn(|j| squash_log_std(out[[0, ACTION_DIM + j]]) as f64);
    for j in 0..ACTION_DIM {
        if !(mean[j].is_finite() && log_std[j].is_finite()) {
            return Err(PolicyError::NonFinite { index: j, mean: mean[j], log_std: log_std[j] });
        }
    }
    Ok((mean, log_std))
}

/// Deterministic: `tanh(mean)`. Stochastic: `tanh(mean + std·ε)`, `ε ~ N(0, I)` from `rng`.
pub fn act(net: &PolicyNet, obs: &Observation, deterministic: bool, rng: &mut ChaCha8Rng) -> Result<Action, PolicyError> {
    act_with(&net.net, obs, deterministic, rng)
}

/// [`act`] on a bare actor network.
pub fn act_with(net: &Mlp<f32>, obs: &Observation, deterministic: bool, rng: &mut ChaCha8Rng) -> Result<Action, PolicyError> {
    let (mean, log_std) = distribution(net, obs.as_slice())?;
    let a = std::array::from_fn(|j| {
        let u = if deterministic {
            mean[j]
        } else {
            let eps: f64 = StandardNormal.sample(rng);
            mean[j] + log_std[j].exp() * eps
        };
        u.tanh()
    });
    Ok(Action::new(a))
}

/// Drives an episode with a trained actor. The first fault is kept and
/// later steps fall back to the zero action.
#[derive(Debug)]
pub struct PolicyController<'a> {
    net: &'a Mlp<f32>,
    deterministic: bool,
    rng: ChaCha8Rng,
    pub fault: Option<PolicyError>,
}

impl<'a> PolicyController<'a> {
    pub fn new(net: &'a PolicyNet, deterministic: bool, seed: u64) -> Self {
        Self::from_actor(&net.net, deterministic, seed)
    }

    pub fn from_actor(net: &'a Mlp<f32>, deterministic: bool, seed: u64) -> Self {
        PolicyController { net, deterministic, rng: ChaCha8Rng::seed_from_u64(seed), fault: None }
    }
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, obs: &Observation) -> Action {
        if self.fault.is_some() {
            return Action::new([0.0; ACTION_DIM]);
        }
        act_with(self.net, obs, self.deterministic, &mut self.rng).unwrap_or_else(|e| {
            self.fault = Some(e);
            Action::new([0.0; ACTION_DIM])
        })
    }
}

/// Two independent Q networks over `(observation, action)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    pub q: [Mlp<f32>; 2],
}

impl CriticNet {
    pub fn new(hidden: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        let spec = critic_spec(hidden, dropout);
        CriticNet { q: [Mlp::new(spec.clone(), rng), Mlp::new(spec, rng)] }
    }

    /// Both Q-values, dropout off.
    pub fn evaluate(&self, obs: &[f64], action: &Action) -> [f64; 2] {
        let x = Array2::from_shape_fn((1, OBS_DIM + ACTION_DIM), |(_, j)| {
            if j < OBS_DIM {
                obs[j] as f32
            } else {
                action.0[j - OBS_DIM] as f32
            }
        });
        std::array::from_fn(|i| self.q[i].predict(x.view())[[0, 0]] as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::KeySet;
    use crate::song::SongTimeline;
    use rand::{Rng, SeedableRng};

    fn random_obs(rng: &mut ChaCha8Rng) -> Observation {
        let tl = SongTimeline::from_steps("r", 0.05, (0..8).map(|i| KeySet::from_indices([i * 3])).collect());
        let joints: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        Observation::assemble(&joints, rng.random_range(-2.0..2.0), KeySet::from_indices([rng.random_range(0..49)]), &tl, 2)
    }

    #[test]
    fn zero_weights_give_zero_action() {
        let net = PolicyNet::zeros(HIDDEN);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = random_obs(&mut rng);
        assert_eq!(act(&net, &obs, true, &mut rng).unwrap().0, [0.0; ACTION_DIM]);
    }

    #[test]
    fn actions_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = PolicyNet::new(64, &mut rng);
        // inflate weights so outputs saturate
        net.net.params.iter_mut().for_each(|w| *w *= 20.0);
        for i in 0..1000 {
            let obs = random_obs(&mut rng);
            let a = act(&net, &obs, i % 2 == 0, &mut rng).unwrap();
            assert!(a.0.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn stochastic_action_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = PolicyNet::new(32, &mut rng);
        let obs = random_obs(&mut rng);
        let a = act(&net, &obs, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = act(&net, &obs, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_output_is_a_fault() {
        let mut net = PolicyNet::zeros(8);
        net.net.params.iter_mut().for_each(|w| *w = f32::NAN);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = random_obs(&mut rng);
        assert!(matches!(act(&net, &obs, true, &mut rng), Err(PolicyError::NonFinite { .. })));
    }

    #[test]
    fn log_std_squash_range() {
        for raw in [-1e3f64, -1.0, 0.0, 1.0, 1e3] {
            let v = squash_log_std(raw);
            assert!((LOG_STD_MIN..=LOG_STD_MAX).contains(&v));
        }
    }
}
