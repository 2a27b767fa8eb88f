//! Per-episode sampling of physical parameters, scaled by a single
//! intensity `c_dr ∈ [0, 1]`.

use crate::physics::{PhysicalParams, PlantModel, NUM_JOINTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DrError {
    #[error("c_dr must lie in [0, 1], got {0}")]
    Intensity(f64),
    #[error("spread for {0} must be finite and non-negative")]
    Spread(&'static str),
}

/// Spread of each parameter at full intensity. Multiplicative spreads are
/// fractions of nominal; `*_range` spreads are absolute offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpreadTable {
    pub joint_damping: f64,
    pub joint_stiffness: f64,
    pub key_spring_stiffness: f64,
    pub finger_key_friction: f64,
    pub key_press_threshold_range: f64,
    pub piano_height_range: f64,
    pub hand_start_range: f64,
}

impl Default for SpreadTable {
    fn default() -> Self {
        SpreadTable {
            joint_damping: 0.5,
            joint_stiffness: 0.3,
            key_spring_stiffness: 0.3,
            finger_key_friction: 0.5,
            key_press_threshold_range: 0.15,
            piano_height_range: 0.01,
            hand_start_range: 0.05,
        }
    }
}

impl SpreadTable {
    fn validate(&self) -> Result<(), DrError> {
        let fields = [
            ("joint_damping", self.joint_damping),
            ("joint_stiffness", self.joint_stiffness),
            ("key_spring_stiffness", self.key_spring_stiffness),
            ("finger_key_friction", self.finger_key_friction),
            ("key_press_threshold_range", self.key_press_threshold_range),
            ("piano_height_range", self.piano_height_range),
            ("hand_start_range", self.hand_start_range),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DrError::Spread(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrConfig {
    pub c_dr: f64,
    pub nominal: PhysicalParams,
    pub spread: SpreadTable,
    pub seed: u64,
}

impl DrConfig {
    pub fn new(c_dr: f64, nominal: PhysicalParams, seed: u64) -> Result<Self, DrError> {
        let cfg = DrConfig { c_dr, nominal, spread: SpreadTable::default(), seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DrError> {
        if !(0.0..=1.0).contains(&self.c_dr) {
            return Err(DrError::Intensity(self.c_dr));
        }
        self.spread.validate()
    }
}

/// Closed interval a parameter is drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Support {
    pub lo: f64,
    pub hi: f64,
}

impl Support {
    fn relative(nominal: f64, fraction: f64, c_dr: f64) -> Self {
        Support { lo: nominal * (1.0 - fraction * c_dr), hi: nominal * (1.0 + fraction * c_dr) }
    }

    fn absolute(nominal: f64, range: f64, c_dr: f64) -> Self {
        Support { lo: nominal - range * c_dr, hi: nominal + range * c_dr }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }
}

/// Named scalar parameters, in sampling order. Joint arrays are expanded
/// as `joint_damping[j]` / `joint_stiffness[j]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    PianoHeight,
    JointDamping(usize),
    JointStiffness(usize),
    KeySpring,
    PressThreshold,
    Friction,
    HandStart,
}

pub fn param_ids() -> Vec<ParamId> {
    let mut ids = vec![ParamId::PianoHeight];
    ids.extend((0..NUM_JOINTS).map(ParamId::JointDamping));
    ids.extend((0..NUM_JOINTS).map(ParamId::JointStiffness));
    ids.extend([ParamId::KeySpring, ParamId::PressThreshold, ParamId::Friction, ParamId::HandStart]);
    ids
}

pub fn get_param(p: &PhysicalParams, id: ParamId) -> f64 {
    match id {
        ParamId::PianoHeight => p.piano_height,
        ParamId::JointDamping(j) => p.joint_damping[j],
        ParamId::JointStiffness(j) => p.joint_stiffness[j],
        ParamId::KeySpring => p.key_spring_stiffness,
        ParamId::PressThreshold => p.key_press_threshold,
        ParamId::Friction => p.finger_key_friction,
        ParamId::HandStart => p.hand_start_slider,
    }
}

fn set_param(p: &mut PhysicalParams, id: ParamId, v: f64) {
    match id {
        ParamId::PianoHeight => p.piano_height = v,
        ParamId::JointDamping(j) => p.joint_damping[j] = v,
        ParamId::JointStiffness(j) => p.joint_stiffness[j] = v,
        ParamId::KeySpring => p.key_spring_stiffness = v,
        ParamId::PressThreshold => p.key_press_threshold = v,
        ParamId::Friction => p.finger_key_friction = v,
        ParamId::HandStart => p.hand_start_slider = v,
    }
}

/// Sampling interval of parameter `id` at intensity `c_dr`.
pub fn support(config: &DrConfig, id: ParamId, c_dr: f64) -> Support {
    let n = get_param(&config.nominal, id);
    let s = &config.spread;
    match id {
        ParamId::PianoHeight => Support::absolute(n, s.piano_height_range, c_dr),
        ParamId::JointDamping(_) => Support::relative(n, s.joint_damping, c_dr),
        ParamId::JointStiffness(_) => Support::relative(n, s.joint_stiffness, c_dr),
        ParamId::KeySpring => Support::relative(n, s.key_spring_stiffness, c_dr),
        ParamId::PressThreshold => Support::absolute(n, s.key_press_threshold_range, c_dr),
        ParamId::Friction => Support::relative(n, s.finger_key_friction, c_dr),
        ParamId::HandStart => Support::absolute(n, s.hand_start_range, c_dr),
    }
}

/// A sampled parameter set plus how many values had to be clamped to validity.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub params: PhysicalParams,
    pub clamped: usize,
}

const MIN_POSITIVE: f64 = 1e-6;
const THRESHOLD_BOUNDS: (f64, f64) = (0.01, 0.99);

/// Draws the parameter set for `episode_index`. Each episode index owns its
/// own ChaCha stream, so draws are reproducible and order-independent.
pub fn sample_params(config: &DrConfig, model: &PlantModel, episode_index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(episode_index);
    let mut params = config.nominal.clone();
    let mut clamped = 0;
    for id in param_ids() {
        let mut v = support(config, id, config.c_dr).draw(&mut rng);
        let limited = match id {
            ParamId::PressThreshold => v.clamp(THRESHOLD_BOUNDS.0, THRESHOLD_BOUNDS.1),
            ParamId::HandStart => v.clamp(model.slider_limits.0, model.slider_limits.1),
            _ => v.max(MIN_POSITIVE),
        };
        if limited != v {
            clamped += 1;
            v = limited;
        }
        set_param(&mut params, id, v);
    }
    if clamped > 0 {
        log::warn!("episode {episode_index}: clamped {clamped} sampled parameters to validity");
    }
    Sample { params, clamped }
}
