//! Control-rate environment: observation assembly, zero-order-hold actions
//! over ten physics substeps, reward and per-step key counters.

use crate::keys::{KeySet, NUM_KEYS};
use crate::metrics::{Aggregation, EpisodeCounts, ScoreAccumulator, Scores};
use crate::physics::{PhysicalParams, Plant, PlantModel, NUM_JOINTS, SLIDER};
use crate::reward::{total_reward, HandGeometry, KeySnapshot, RewardBreakdown, RewardConfig, RewardInputs};
use crate::song::{SongTimeline, LOOKAHEAD_STEPS};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;
use thiserror::Error;

/// Physics substeps per control step (0.05 s / 0.005 s).
pub const SUBSTEPS: usize = 10;
pub const FINGER_JOINTS: usize = 12;
pub const OBS_DIM: usize = FINGER_JOINTS + 1 + NUM_KEYS + NUM_KEYS + LOOKAHEAD_STEPS * NUM_KEYS;
pub const ACTION_DIM: usize = NUM_JOINTS;

/// Observation layout: `(name, offset, len)` in vector order.
pub const SEGMENTS: [(&str, usize, usize); 5] = [
    ("joints", 0, FINGER_JOINTS),
    ("slider", FINGER_JOINTS, 1),
    ("pressed", FINGER_JOINTS + 1, NUM_KEYS),
    ("intended", FINGER_JOINTS + 1 + NUM_KEYS, NUM_KEYS),
    ("future", FINGER_JOINTS + 1 + 2 * NUM_KEYS, LOOKAHEAD_STEPS * NUM_KEYS),
];

const PRESSED_AT: usize = SEGMENTS[2].1;
const INTENDED_AT: usize = SEGMENTS[3].1;
const FUTURE_AT: usize = SEGMENTS[4].1;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("env_step called after the episode finished")]
    StepAfterDone,
    #[error("env_step called before reset")]
    NotReset,
}

/// The 356-dim observation: joints, slider, pressed, intended, future.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    values: Vec<f64>,
}

impl Observation {
    /// Assembles an observation from its physical parts and the song cursor.
    /// Steps past the end of the timeline contribute empty target sets.
    pub fn assemble(joints: &[f64], slider: f64, pressed: KeySet, timeline: &SongTimeline, t: usize) -> Self {
        debug_assert_eq!(joints.len(), FINGER_JOINTS);
        let mut values = vec![0.0; OBS_DIM];
        values[..FINGER_JOINTS].copy_from_slice(joints);
        values[FINGER_JOINTS] = slider;
        for k in pressed.iter() {
            values[PRESSED_AT + k] = 1.0;
        }
        for k in timeline.targets(t).iter() {
            values[INTENDED_AT + k] = 1.0;
        }
        for r in 0..LOOKAHEAD_STEPS {
            for k in timeline.targets(t + 1 + r).iter() {
                values[FUTURE_AT + r * NUM_KEYS + k] = 1.0;
            }
        }
        Observation { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> &[f64] {
        let (_, off, len) = SEGMENTS.iter().find(|s| s.0 == name).expect("known segment");
        &self.values[*off..off + len]
    }

    pub fn joints(&self) -> &[f64] {
        &self.values[..FINGER_JOINTS]
    }

    pub fn slider(&self) -> f64 {
        self.values[FINGER_JOINTS]
    }

    fn keyset_at(&self, offset: usize) -> KeySet {
        KeySet::from_indices((0..NUM_KEYS).filter(|k| self.values[offset + k] != 0.0))
    }

    pub fn pressed(&self) -> KeySet {
        self.keyset_at(PRESSED_AT)
    }

    pub fn intended(&self) -> KeySet {
        self.keyset_at(INTENDED_AT)
    }

    pub fn future(&self, row: usize) -> KeySet {
        assert!(row < LOOKAHEAD_STEPS);
        self.keyset_at(FUTURE_AT + row * NUM_KEYS)
    }

    /// Compact form for replay storage: continuous part in f32, key segments as bits.
    pub fn pack(&self) -> PackedObs {
        let mut cont = [0.0f32; FINGER_JOINTS + 1];
        for (c, v) in cont.iter_mut().zip(&self.values) {
            *c = *v as f32;
        }
        let mut bits = [0u64; 6];
        let n_bits = OBS_DIM - PRESSED_AT;
        for i in 0..n_bits {
            if self.values[PRESSED_AT + i] != 0.0 {
                bits[i / 64] |= 1 << (i % 64);
            }
        }
        PackedObs { cont, bits }
    }
}

/// Lossless (at f32 precision) compact observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PackedObs {
    pub cont: [f32; FINGER_JOINTS + 1],
    pub bits: [u64; 6],
}

impl PackedObs {
    /// Writes the dense observation into `out` (length [`OBS_DIM`]).
    pub fn unpack_into<F: From<f32> + Copy>(&self, out: &mut [F]) {
        debug_assert_eq!(out.len(), OBS_DIM);
        for (o, c) in out.iter_mut().zip(&self.cont) {
            *o = F::from(*c);
        }
        let zero = F::from(0.0);
        let one = F::from(1.0);
        for i in 0..OBS_DIM - PRESSED_AT {
            out[PRESSED_AT + i] = if (self.bits[i / 64] >> (i % 64)) & 1 == 1 { one } else { zero };
        }
    }
}

/// Normalized joint targets in `[-1, 1]`, mapped affinely onto joint limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action(pub [f64; ACTION_DIM]);

impl Action {
    pub fn new(mut a: [f64; ACTION_DIM]) -> Self {
        for v in &mut a {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
        Action(a)
    }

    pub fn to_targets(&self, model: &PlantModel) -> [f64; NUM_JOINTS] {
        std::array::from_fn(|j| model.denormalize(j, self.0[j]))
    }

    /// The action whose targets equal the joint positions `q`.
    pub fn holding(model: &PlantModel, q: &[f64; NUM_JOINTS]) -> Self {
        Action::new(std::array::from_fn(|j| model.normalize(j, q[j])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub t: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub pressed: KeySet,
    pub targets: KeySet,
    pub fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: RewardBreakdown,
    pub done: bool,
    pub info: StepInfo,
}

/// Assembles the observation for `plant` at song step `t`.
pub fn build_observation(plant: &Plant, timeline: &SongTimeline, t: usize) -> Observation {
    Observation::assemble(&plant.state.q[..FINGER_JOINTS], plant.state.q[SLIDER], plant.pressed(), timeline, t)
}

/// Reward for the plant's current state against `targets`.
pub fn reward_for(plant: &Plant, targets: KeySet, cfg: &RewardConfig) -> RewardBreakdown {
    let pressed = plant.pressed();
    let geometry = HandGeometry {
        palm_position: [plant.model.palm_x(&plant.state.q), 0.0],
        target_key_positions: targets.iter().map(|k| [plant.model.key_center_x(k), 0.0]).collect(),
        hand_speed: plant.state.qdot[SLIDER].abs(),
    };
    let keys = KeySnapshot { mu: plant.state.mu, pressed, targets };
    total_reward(
        &RewardInputs { tau: &plant.last_torques.tau, qdot: &plant.state.qdot, geometry: &geometry, keys: &keys },
        cfg,
    )
}

/// Single-song episodic environment.
#[derive(Debug, Clone)]
pub struct PianoEnv {
    plant: Plant,
    timeline: Arc<SongTimeline>,
    reward_cfg: RewardConfig,
    cursor: usize,
    done: bool,
    ready: bool,
    seed: u64,
}

impl PianoEnv {
    pub fn new(model: PlantModel, reward_cfg: RewardConfig) -> Self {
        let params = PhysicalParams::nominal();
        let timeline = Arc::new(SongTimeline::from_steps("empty", crate::song::CONTROL_DT, vec![KeySet::EMPTY]));
        PianoEnv { plant: Plant::new(model, params), timeline, reward_cfg, cursor: 0, done: false, ready: false, seed: 0 }
    }

    pub fn reset(&mut self, timeline: Arc<SongTimeline>, params: PhysicalParams, seed: u64) -> Observation {
        self.plant.params = params;
        self.plant.reset();
        self.timeline = timeline;
        self.cursor = 0;
        self.done = false;
        self.ready = true;
        self.seed = seed;
        self.observation()
    }

    pub fn observation(&self) -> Observation {
        build_observation(&self.plant, &self.timeline, self.cursor)
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn timeline(&self) -> &Arc<SongTimeline> {
        &self.timeline
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn env_step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if !self.ready {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        let t = self.cursor;
        let targets_now = self.timeline.targets(t);
        let joint_targets = Action::new(action.0).to_targets(&self.plant.model);
        let mut fault = None;
        for _ in 0..SUBSTEPS {
            if let Err(e) = self.plant.step(&joint_targets) {
                fault = Some(e.to_string());
                break;
            }
        }
        let pressed = self.plant.pressed();
        let counts = EpisodeCounts::of_step(pressed, targets_now);
        let reward = if fault.is_some() {
            RewardBreakdown::default()
        } else {
            reward_for(&self.plant, targets_now, &self.reward_cfg)
        };
        self.cursor += 1;
        self.done = fault.is_some() || self.cursor >= self.timeline.len();
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.done,
            info: StepInfo { t, tp: counts.tp, fp: counts.fp, fn_: counts.fn_, pressed, targets: targets_now, fault },
        })
    }
}

/// Anything that maps observations to actions.
pub trait Controller {
    fn act(&mut self, obs: &Observation) -> Action;
}

impl<F: FnMut(&Observation) -> Action> Controller for F {
    fn act(&mut self, obs: &Observation) -> Action {
        self(obs)
    }
}

/// Hand-written player that reads only the observation: it parks the hand so
/// finger 1 sits over the lowest intended key and presses the fingers above
/// intended keys once the slider has arrived.
#[derive(Debug, Clone)]
pub struct ScriptedPlayer {
    model: PlantModel,
}

impl ScriptedPlayer {
    pub fn new(model: PlantModel) -> Self {
        ScriptedPlayer { model }
    }
}

impl Controller for ScriptedPlayer {
    fn act(&mut self, obs: &Observation) -> Action {
        let w = self.model.key_width;
        let current = obs.slider();
        let mut wanted = obs.intended();
        if wanted.is_empty() {
            wanted = (0..LOOKAHEAD_STEPS).map(|r| obs.future(r)).find(|s| !s.is_empty()).unwrap_or(KeySet::EMPTY);
        }
        let mut a = [0.0; ACTION_DIM];
        let Some(kmin) = wanted.iter().next() else {
            a[SLIDER] = self.model.normalize(SLIDER, current);
            return Action::new(a);
        };
        let kmax = wanted.iter().last().unwrap_or(kmin);
        let start = (kmin as f64 - 1.0).max(kmax as f64 - 3.0).min(kmin as f64);
        let (lo, hi) = self.model.slider_limits;
        let slider = (start * w).clamp(lo, hi);
        a[SLIDER] = self.model.normalize(SLIDER, slider);
        let arrived = (current - slider).abs() < 0.25 * w;
        if arrived && !obs.intended().is_empty() {
            for f in 0..4 {
                let x = slider + (f as f64 + 0.5) * w;
                if self.model.key_at(x).is_some_and(|k| obs.intended().contains(k)) {
                    a[3 * f + 1] = 1.0;
                    a[3 * f + 2] = 1.0;
                }
            }
        }
        Action::new(a)
    }
}

/// One line of the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLogRecord {
    pub t: usize,
    pub action: Vec<f64>,
    pub pressed: KeySet,
    pub targets: KeySet,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub log: Vec<EpisodeLogRecord>,
    pub scores: ScoreAccumulator,
    pub total_reward: f64,
    pub fault: Option<String>,
}

impl Episode {
    pub fn scores(&self, agg: Aggregation) -> Scores {
        self.scores.scores(agg)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in &self.log {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Runs `controller` through a full episode.
pub fn rollout(
    env: &mut PianoEnv,
    controller: &mut dyn Controller,
    timeline: Arc<SongTimeline>,
    params: PhysicalParams,
    seed: u64,
) -> Episode {
    let mut obs = env.reset(timeline, params, seed);
    let mut ep = Episode { log: Vec::new(), scores: ScoreAccumulator::default(), total_reward: 0.0, fault: None };
    loop {
        let action = controller.act(&obs);
        let res = env.env_step(&action).expect("episode not finished");
        ep.scores.push(res.info.pressed, res.info.targets);
        ep.total_reward += res.reward.total;
        ep.log.push(EpisodeLogRecord {
            t: res.info.t,
            action: action.0.to_vec(),
            pressed: res.info.pressed,
            targets: res.info.targets,
            reward: res.reward,
        });
        if res.done {
            ep.fault = res.info.fault;
            break;
        }
        obs = res.observation;
    }
    ep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::song::fixtures;

    fn env() -> PianoEnv {
        PianoEnv::new(PlantModel::nominal(), RewardConfig::default())
    }

    #[test]
    fn segment_offsets() {
        let offs: Vec<usize> = SEGMENTS.iter().map(|s| s.1).collect();
        assert_eq!(offs, vec![0, 12, 13, 62, 111]);
        assert_eq!(OBS_DIM, 356);
        assert_eq!(SEGMENTS[4].1 + SEGMENTS[4].2, OBS_DIM);
    }

    #[test]
    fn reset_is_deterministic() {
        let tl = Arc::new(fixtures::timeline("c", fixtures::C_MAJOR_SCALE));
        let mut e = env();
        let a = e.reset(tl.clone(), PhysicalParams::nominal(), 3);
        let b = e.reset(tl.clone(), PhysicalParams::nominal(), 3);
        assert_eq!(a, b);
        assert!(a.pressed().is_empty());
        assert_eq!(a.intended(), tl.targets(0));
        let rows = tl.lookahead(0, 5).unwrap();
        for (r, row) in rows.iter().enumerate() {
            assert_eq!(a.future(r), *row);
        }
    }

    #[test]
    fn single_step_timeline_finishes_immediately() {
        let tl = Arc::new(SongTimeline::from_steps("s", 0.05, vec![KeySet::EMPTY]));
        let mut e = env();
        e.reset(tl, PhysicalParams::nominal(), 0);
        let q = e.plant().state.q;
        let res = e.env_step(&Action::holding(&e.plant().model, &q)).unwrap();
        assert!(res.done);
        assert_eq!(e.env_step(&Action::new([0.0; 13])).unwrap_err(), EnvError::StepAfterDone);
    }

    #[test]
    fn holding_pose_over_silence() {
        let tl = Arc::new(SongTimeline::from_steps("s", 0.05, vec![KeySet::EMPTY; 4]));
        let mut e = env();
        e.reset(tl, PhysicalParams::nominal(), 0);
        let q = e.plant().state.q;
        let res = e.env_step(&Action::holding(&e.plant().model, &q)).unwrap();
        assert_eq!(res.reward.keypress, 2.0);
        assert!(res.reward.energy.abs() < 1e-9);
        assert_eq!(res.reward.hand_position, 1.0);
        assert_eq!(res.reward.sliding, 0.0);
        assert_eq!(res.observation.len(), 356);
    }

    #[test]
    fn step_before_reset_is_usage_error() {
        assert_eq!(env().env_step(&Action::new([0.0; 13])).unwrap_err(), EnvError::NotReset);
    }

    #[test]
    fn packed_observation_roundtrip() {
        let tl = Arc::new(fixtures::timeline("t", fixtures::TWINKLE));
        let mut e = env();
        let obs = e.reset(tl, PhysicalParams::nominal(), 0);
        let mut dense = vec![0.0f64; OBS_DIM];
        obs.pack().unpack_into(&mut dense);
        for (a, b) in dense.iter().zip(obs.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn scripted_player_plays_scale() {
        let tl = Arc::new(fixtures::timeline("c", fixtures::C_MAJOR_SCALE));
        let mut e = env();
        let mut player = ScriptedPlayer::new(PlantModel::nominal());
        let ep = rollout(&mut e, &mut player, tl.clone(), PhysicalParams::nominal(), 0);
        assert_eq!(ep.log.len(), tl.len());
        let f1 = ep.scores(Aggregation::Micro).f1;
        assert!(f1 > 0.6, "scripted F1 {f1}");
    }
}
