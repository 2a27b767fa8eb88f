//! Cross-entropy-method search over open-loop action sequences. Used as an
//! independent check that the environment is solvable at all.

use crate::env::{rollout, Action, Observation, PianoEnv, ACTION_DIM};
use crate::metrics::{Aggregation, Scores};
use crate::physics::{PhysicalParams, PlantModel};
use crate::reward::RewardConfig;
use crate::song::SongTimeline;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    /// Control steps each action knot is held for.
    pub hold_steps: usize,
    pub init_std: f64,
    pub min_std: f64,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig { population: 48, elites: 8, iterations: 40, hold_steps: 5, init_std: 0.6, min_std: 0.05, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct CemResult {
    pub actions: Vec<Action>,
    pub best_return: f64,
    pub scores: Scores,
    /// Best return after each iteration.
    pub history: Vec<f64>,
}

fn expand(knots: &[f64], hold: usize, len: usize) -> Vec<Action> {
    (0..len)
        .map(|t| {
            let k = (t / hold).min(knots.len() / ACTION_DIM - 1);
            Action::new(std::array::from_fn(|j| knots[k * ACTION_DIM + j].tanh()))
        })
        .collect()
}

fn play(env: &mut PianoEnv, actions: &[Action], timeline: &Arc<SongTimeline>, params: &PhysicalParams) -> (f64, Scores) {
    let mut t = 0;
    let mut controller = |_: &Observation| {
        let a = actions[t.min(actions.len() - 1)];
        t += 1;
        a
    };
    let ep = rollout(env, &mut controller, timeline.clone(), params.clone(), 0);
    (ep.total_reward, ep.scores(Aggregation::Micro))
}

/// Maximizes episode return over piecewise-constant action sequences.
pub fn optimize(
    timeline: Arc<SongTimeline>,
    model: &PlantModel,
    reward: RewardConfig,
    params: &PhysicalParams,
    cfg: &CemConfig,
) -> CemResult {
    let len = timeline.len();
    let hold = cfg.hold_steps.max(1);
    let dim = len.div_ceil(hold) * ACTION_DIM;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut env = PianoEnv::new(model.clone(), reward);
    let mut mean = vec![0.0; dim];
    let mut std = vec![cfg.init_std; dim];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut history = Vec::with_capacity(cfg.iterations);
    let elites = cfg.elites.clamp(1, cfg.population.max(1));
    for _ in 0..cfg.iterations {
        let mut scored: Vec<(f64, Vec<f64>)> = (0..cfg.population)
            .map(|_| {
                let cand: Vec<f64> = (0..dim)
                    .map(|i| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mean[i] + std[i] * z
                    })
                    .collect();
                let (ret, _) = play(&mut env, &expand(&cand, hold, len), &timeline, params);
                (ret, cand)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        for i in 0..dim {
            let m = scored[..elites].iter().map(|(_, c)| c[i]).sum::<f64>() / elites as f64;
            let v = scored[..elites].iter().map(|(_, c)| (c[i] - m).powi(2)).sum::<f64>() / elites as f64;
            mean[i] = m;
            std[i] = v.sqrt().max(cfg.min_std);
        }
        if best.as_ref().is_none_or(|(r, _)| scored[0].0 > *r) {
            best = Some(scored.swap_remove(0));
        }
        history.push(best.as_ref().unwrap().0);
    }
    let (best_return, knots) = best.unwrap_or((f64::NEG_INFINITY, mean));
    let actions = expand(&knots, hold, len);
    let (_, scores) = play(&mut env, &actions, &timeline, params);
    CemResult { actions, best_return, scores, history }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::song::fixtures;

    #[test]
    fn cem_learns_to_press_one_key() {
        let tl = Arc::new(fixtures::timeline("one_key", fixtures::ONE_KEY));
        let r = optimize(tl, &PlantModel::nominal(), RewardConfig::default(), &PhysicalParams::nominal(), &CemConfig::default());
        assert!(r.history.windows(2).all(|w| w[1] >= w[0]));
        assert!(r.scores.f1 > 0.5, "{:?}", r.scores);
    }
}
