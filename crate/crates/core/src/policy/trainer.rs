//! The soft actor-critic training loop with DroQ-style critics.

use super::checkpoint::Checkpoint;
use super::nets::{act_with, actor_spec, critic_spec, PolicyController, PolicyError, PolicyNet};
use super::nn::{Adam, Mlp};
use super::replay::{ReplayBuffer, Transition};
use super::sac::{actor_loss, critic_loss, td_targets, temperature_grad, SacNets};
use crate::domain_rand::{sample_params, DrConfig, DrError};
use crate::env::{rollout, Action, PianoEnv, ACTION_DIM};
use crate::metrics::{Aggregation, Scores};
use crate::physics::{PhysicalParams, PlantModel};
use crate::reward::RewardConfig;
use crate::song::SongTimeline;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

/// What the training budget counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetUnit {
    #[default]
    Steps,
    Episodes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    /// Critic updates per update round.
    pub utd_ratio: usize,
    /// Environment steps between update rounds.
    pub update_every: usize,
    pub dropout: f64,
    /// Global gradient norm limit per network update.
    pub grad_clip: Option<f64>,
    pub warmup_steps: u64,
    pub eval_interval: u64,
    pub init_temperature: f64,
    /// Defaults to `-ACTION_DIM`.
    pub target_entropy: Option<f64>,
    /// Stop as soon as a deterministic evaluation reaches this F1.
    pub target_eval_f1: Option<f64>,
    pub budget_unit: BudgetUnit,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            hidden: 256,
            batch_size: 256,
            replay_capacity: 1_000_000,
            gamma: 0.99,
            tau: 0.005,
            lr: 3e-4,
            utd_ratio: 20,
            update_every: 1,
            dropout: 0.01,
            grad_clip: None,
            warmup_steps: 5_000,
            eval_interval: 5_000,
            init_temperature: 0.1,
            target_entropy: None,
            target_eval_f1: None,
            budget_unit: BudgetUnit::Steps,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// Reduced compute for single-core desk runs.
    pub fn desk() -> Self {
        TrainerConfig {
            batch_size: 64,
            replay_capacity: 200_000,
            utd_ratio: 1,
            update_every: 1,
            lr: 1e-3,
            grad_clip: Some(10.0),
            tau: 0.01,
            warmup_steps: 1_000,
            eval_interval: 250,
            ..Self::default()
        }
    }
}

/// Hex SHA-256 (first 8 bytes) of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("budget of {budget} steps is below the {warmup} warmup steps")]
    BudgetBelowWarmup { budget: u64, warmup: u64 },
    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: u64, what: &'static str, last_good: Box<Checkpoint> },
    #[error(transparent)]
    Dr(#[from] DrError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("learning curve write failed: {0}")]
    Io(#[from] std::io::Error),
}

/// One learning-curve row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    pub eval_precision: f64,
    pub eval_recall: f64,
    pub eval_f1: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub temperature: f64,
}

pub const CURVE_HEADER: &str = "step,eval_precision,eval_recall,eval_f1,actor_loss,critic_loss,temperature";

impl CurveRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.eval_precision, self.eval_recall, self.eval_f1, self.actor_loss, self.critic_loss, self.temperature
        )
    }
}

/// Everything describing the task being learned.
#[derive(Debug, Clone)]
pub struct TrainTask {
    pub timeline: Arc<SongTimeline>,
    pub model: PlantModel,
    pub reward: RewardConfig,
    pub dr: DrConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_eval: Scores,
    pub last: Checkpoint,
    pub curve: Vec<CurveRow>,
    pub steps: u64,
    pub episodes: u64,
    pub stopped_early: bool,
}

/// Deterministic evaluation episode of `actor` under `params`.
pub fn evaluate(
    actor: &PolicyNet,
    timeline: Arc<SongTimeline>,
    model: &PlantModel,
    reward: RewardConfig,
    params: PhysicalParams,
) -> Result<Scores, PolicyError> {
    let mut env = PianoEnv::new(model.clone(), reward);
    let mut controller = PolicyController::new(actor, true, 0);
    let ep = rollout(&mut env, &mut controller, timeline, params, 0);
    match controller.fault {
        Some(e) => Err(e),
        None => Ok(ep.scores(Aggregation::Micro)),
    }
}

fn snapshot(nets: &SacNets<f32>, step: u64, hash: &str) -> Checkpoint {
    Checkpoint {
        step,
        config_hash: hash.to_string(),
        log_alpha: nets.log_alpha,
        actor: nets.actor.clone(),
        critics: Some(nets.critics.clone()),
    }
}

struct Learner {
    nets: SacNets<f32>,
    actor_opt: Adam<f32>,
    critic_opt: [Adam<f32>; 2],
    alpha_opt: Adam<f32>,
    grads: [Vec<f32>; 3],
    target_entropy: f64,
}

impl Learner {
    fn new(cfg: &TrainerConfig, rng: &mut ChaCha8Rng) -> Self {
        let actor = Mlp::new(actor_spec(cfg.hidden), rng);
        let critics = [Mlp::new(critic_spec(cfg.hidden, cfg.dropout), rng), Mlp::new(critic_spec(cfg.hidden, cfg.dropout), rng)];
        let (na, nc) = (actor.num_params(), critics[0].num_params());
        Learner {
            nets: SacNets { actor, targets: critics.clone(), critics, log_alpha: cfg.init_temperature.ln() as f32 },
            actor_opt: Adam::new(na, cfg.lr),
            critic_opt: [Adam::new(nc, cfg.lr), Adam::new(nc, cfg.lr)],
            alpha_opt: Adam::new(1, cfg.lr),
            grads: [vec![0.0; na], vec![0.0; nc], vec![0.0; nc]],
            target_entropy: cfg.target_entropy.unwrap_or(-(ACTION_DIM as f64)),
        }
    }

    /// One update round; returns (critic loss, actor loss).
    fn update(&mut self, replay: &ReplayBuffer, cfg: &TrainerConfig, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let gauss = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((cfg.batch_size, ACTION_DIM), |_| StandardNormal.sample(rng));
        let mut closs = 0.0;
        let mut batch = None;
        for _ in 0..cfg.utd_ratio.max(1) {
            let b = replay.sample(cfg.batch_size, rng);
            let eps_next: Array2<f32> = gauss(rng);
            let y = td_targets(&self.nets, &b, cfg.gamma as f32, eps_next.view());
            let [_, g0, g1] = &mut self.grads;
            g0.fill(0.0);
            g1.fill(0.0);
            closs = critic_loss(&self.nets, &b, &y, Some(rng.random()), Some([g0.as_mut_slice(), g1.as_mut_slice()])) as f64;
            for i in 0..2 {
                clip_norm(&mut self.grads[i + 1], cfg.grad_clip);
                self.critic_opt[i].step(&mut self.nets.critics[i].params, &self.grads[i + 1]);
                let (online, target) = (&self.nets.critics[i], &mut self.nets.targets[i]);
                target.soft_update_from(online, cfg.tau as f32);
            }
            batch = Some(b);
        }
        let b = batch.expect("at least one critic update");
        let eps: Array2<f32> = gauss(rng);
        self.grads[0].fill(0.0);
        let a = actor_loss(&self.nets, b.obs.view(), eps.view(), Some(rng.random()), Some(&mut self.grads[0]));
        clip_norm(&mut self.grads[0], cfg.grad_clip);
        self.actor_opt.step(&mut self.nets.actor.params, &self.grads[0]);
        let g = temperature_grad(a.mean_logp as f64, self.target_entropy) as f32;
        let mut la = [self.nets.log_alpha];
        self.alpha_opt.step(&mut la, &[g]);
        self.nets.log_alpha = la[0];
        (closs, a.loss as f64)
    }
}

fn clip_norm(grad: &mut [f32], limit: Option<f64>) {
    let Some(limit) = limit else { return };
    let norm = grad.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
    if norm > limit {
        let k = (limit / norm) as f32;
        grad.iter_mut().for_each(|g| *g *= k);
    }
}

/// Trains a policy on `task` for `budget` steps or episodes.
///
/// Evaluation runs every `eval_interval` steps on nominal parameters with the
/// deterministic actor; one curve row is written per evaluation.
pub fn train(
    task: &TrainTask,
    cfg: &TrainerConfig,
    budget: u64,
    mut curve_out: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    task.dr.validate()?;
    let step_budget = match cfg.budget_unit {
        BudgetUnit::Steps => budget,
        BudgetUnit::Episodes => budget.saturating_mul(task.timeline.len() as u64),
    };
    if step_budget < cfg.warmup_steps {
        return Err(TrainError::BudgetBelowWarmup { budget: step_budget, warmup: cfg.warmup_steps });
    }
    let hash = config_hash(&(cfg, &task.dr, &task.reward, &task.timeline.name));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut learner = Learner::new(cfg, &mut rng);
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut env = PianoEnv::new(task.model.clone(), task.reward);
    let mut episodes = 0u64;
    let mut obs = env.reset(task.timeline.clone(), sample_params(&task.dr, &task.model, 0).params, cfg.seed);
    if let Some(w) = curve_out.as_deref_mut() {
        writeln!(w, "{CURVE_HEADER}")?;
    }
    let mut curve = Vec::new();
    let mut best: Option<(Scores, Checkpoint)> = None;
    let mut last_good = snapshot(&learner.nets, 0, &hash);
    let (mut closs, mut aloss) = (f64::NAN, f64::NAN);
    let mut stopped_early = false;
    let mut step = 0u64;
    let mut episode_return = 0.0;
    let mut recent_returns = Vec::new();
    let started = Instant::now();
    let done_training = |step: u64, episodes: u64| match cfg.budget_unit {
        BudgetUnit::Steps => step >= budget,
        BudgetUnit::Episodes => episodes >= budget,
    };
    while !done_training(step, episodes) {
        let action = if step < cfg.warmup_steps {
            Action::new(std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        } else {
            act_with(&learner.nets.actor, &obs, false, &mut rng)?
        };
        let res = env.env_step(&action).expect("environment is reset before stepping");
        replay.push(Transition {
            obs: obs.pack(),
            action: action.0.map(|v| v as f32),
            reward: res.reward.total as f32,
            next_obs: res.observation.pack(),
            done: res.done,
        });
        step += 1;
        episode_return += res.reward.total;
        obs = if res.done {
            episodes += 1;
            recent_returns.push(std::mem::take(&mut episode_return));
            let params = sample_params(&task.dr, &task.model, episodes).params;
            env.reset(task.timeline.clone(), params, cfg.seed.wrapping_add(episodes))
        } else {
            res.observation
        };
        if step > cfg.warmup_steps && step % cfg.update_every.max(1) as u64 == 0 {
            (closs, aloss) = learner.update(&replay, cfg, &mut rng);
            if !closs.is_finite() {
                return Err(TrainError::Diverged { step, what: "critic loss", last_good: Box::new(last_good) });
            }
            if !aloss.is_finite() || !learner.nets.log_alpha.is_finite() {
                return Err(TrainError::Diverged { step, what: "actor loss", last_good: Box::new(last_good) });
            }
        }
        let final_step = done_training(step, episodes);
        if step % cfg.eval_interval.max(1) == 0 || final_step {
            let policy = PolicyNet { net: learner.nets.actor.clone() };
            let scores = evaluate(&policy, task.timeline.clone(), &task.model, task.reward, task.dr.nominal.clone())?;
            let row = CurveRow {
                step,
                eval_precision: scores.precision,
                eval_recall: scores.recall,
                eval_f1: scores.f1,
                actor_loss: aloss,
                critic_loss: closs,
                temperature: (learner.nets.log_alpha as f64).exp(),
            };
            if let Some(w) = curve_out.as_deref_mut() {
                writeln!(w, "{}", row.csv_line())?;
            }
            let mean_return = recent_returns.iter().sum::<f64>() / recent_returns.len().max(1) as f64;
            recent_returns.clear();
            log::info!(
                "step {step} ep {episodes} return {mean_return:.2} eval f1 {:.3} closs {closs:.4} aloss {aloss:.4} alpha {:.4} ({:.0}s)",
                scores.f1,
                row.temperature,
                started.elapsed().as_secs_f64()
            );
            curve.push(row);
            last_good = snapshot(&learner.nets, step, &hash);
            if best.as_ref().is_none_or(|(s, _)| scores.f1 > s.f1) {
                best = Some((scores, last_good.clone()));
            }
            if cfg.target_eval_f1.is_some_and(|t| scores.f1 >= t) {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_eval, best) = best.expect("at least one evaluation runs");
    Ok(TrainOutcome {
        best,
        best_eval,
        last: snapshot(&learner.nets, step, &hash),
        curve,
        steps: step,
        episodes,
        stopped_early,
    })
}
