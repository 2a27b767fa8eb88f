//! Fixed-timestep planar plant: four 3-joint fingers on a slider above a
//! 49-key spring-hinge keyboard.
//!
//! Coordinates: `x` runs along the keyboard (key `k` spans
//! `[k·w, (k+1)·w)`), `z` is height above the resting key surface. Finger `f`
//! owns joints `3f` (abduction), `3f+1` and `3f+2` (flexion); joint 12 is the
//! slider. Joints are position servos; fingertips below a key surface push
//! the key down through a penalty contact, and the key spring pushes back.

use crate::keys::{KeySet, NUM_KEYS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use thiserror::Error;

pub const NUM_JOINTS: usize = 13;
pub const NUM_FINGERS: usize = 4;
pub const SLIDER: usize = 12;
/// Physics timestep in seconds.
pub const PHYSICS_DT: f64 = 0.005;
/// Version tag expected in the constants file.
pub const CONSTANTS_VERSION: u32 = 1;

const NOMINAL_CONSTANTS: &str = include_str!("../constants/nominal_v1.toml");

#[derive(Debug, Error, PartialEq)]
pub enum PhysicsError {
    #[error("integration fault at t={time:.3}s: {what}")]
    IntegrationFault { time: f64, what: String },
    #[error("invalid physical parameters: {0}")]
    InvalidParams(String),
    #[error("constants file: {0}")]
    Constants(String),
}

/// Every quantity the domain randomizer may perturb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub piano_height: f64,
    pub joint_damping: [f64; NUM_JOINTS],
    pub joint_stiffness: [f64; NUM_JOINTS],
    pub key_spring_stiffness: f64,
    pub key_press_threshold: f64,
    pub finger_key_friction: f64,
    pub hand_start_slider: f64,
}

impl PhysicalParams {
    pub fn nominal() -> Self {
        PlantConstants::nominal().params
    }

    pub fn validate(&self, model: &PlantModel) -> Result<(), PhysicsError> {
        let bad = |m: String| Err(PhysicsError::InvalidParams(m));
        let all = [self.piano_height, self.key_spring_stiffness, self.finger_key_friction]
            .into_iter()
            .chain(self.joint_damping)
            .chain(self.joint_stiffness);
        if all.clone().any(|v| !v.is_finite() || v <= 0.0) {
            return bad("all gains, heights and friction must be finite and positive".into());
        }
        if !(self.key_press_threshold > 0.0 && self.key_press_threshold < 1.0) {
            return bad(format!("key_press_threshold {} not in (0,1)", self.key_press_threshold));
        }
        let (lo, hi) = model.slider_limits;
        if !(lo..=hi).contains(&self.hand_start_slider) {
            return bad(format!("hand_start_slider {} outside [{lo}, {hi}]", self.hand_start_slider));
        }
        Ok(())
    }

    /// Short stable hash of the exact parameter bits, for run logs.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |v: f64| h.update(v.to_bits().to_le_bytes());
        put(self.piano_height);
        self.joint_damping.iter().for_each(|&v| put(v));
        self.joint_stiffness.iter().for_each(|&v| put(v));
        put(self.key_spring_stiffness);
        put(self.key_press_threshold);
        put(self.finger_key_friction);
        put(self.hand_start_slider);
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Fixed geometry and inertia of the plant; not randomized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantModel {
    pub key_width: f64,
    pub key_travel: f64,
    pub key_mass: f64,
    pub key_damping: f64,
    pub contact_stiffness: f64,
    pub hand_base_height: f64,
    pub proximal_length: f64,
    pub distal_length: f64,
    pub abduction_radius: f64,
    pub finger_inertia: f64,
    pub slider_mass: f64,
    pub abduction_limits: (f64, f64),
    pub flexion_limits: (f64, f64),
    pub slider_limits: (f64, f64),
    pub stick_speed: f64,
}

impl PlantModel {
    pub fn nominal() -> Self {
        PlantConstants::nominal().model
    }

    pub fn joint_limits(&self, joint: usize) -> (f64, f64) {
        match joint {
            SLIDER => self.slider_limits,
            j if j % 3 == 0 => self.abduction_limits,
            _ => self.flexion_limits,
        }
    }

    pub fn inertia(&self, joint: usize) -> f64 {
        if joint == SLIDER {
            self.slider_mass
        } else {
            self.finger_inertia
        }
    }

    pub fn key_center_x(&self, key: usize) -> f64 {
        (key as f64 + 0.5) * self.key_width
    }

    /// Key whose footprint contains `x`, if any.
    pub fn key_at(&self, x: f64) -> Option<usize> {
        let k = (x / self.key_width).floor();
        (k >= 0.0 && k < NUM_KEYS as f64).then_some(k as usize)
    }

    /// Palm reference point along the keyboard: the knuckle of finger 1.
    pub fn palm_x(&self, q: &[f64; NUM_JOINTS]) -> f64 {
        q[SLIDER] + 1.5 * self.key_width
    }

    /// Maps a normalized command in `[-1, 1]` onto the joint range.
    pub fn denormalize(&self, joint: usize, a: f64) -> f64 {
        let (lo, hi) = self.joint_limits(joint);
        lo + (a.clamp(-1.0, 1.0) + 1.0) * 0.5 * (hi - lo)
    }

    pub fn normalize(&self, joint: usize, q: f64) -> f64 {
        let (lo, hi) = self.joint_limits(joint);
        2.0 * (q - lo) / (hi - lo) - 1.0
    }
}

/// Parsed constants file: nominal parameters plus the fixed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConstants {
    pub version: u32,
    pub params: PhysicalParams,
    pub model: PlantModel,
}

impl PlantConstants {
    pub fn nominal() -> Self {
        static NOMINAL: OnceLock<PlantConstants> = OnceLock::new();
        NOMINAL.get_or_init(|| Self::from_toml(NOMINAL_CONSTANTS).expect("embedded constants file is valid")).clone()
    }

    pub fn from_toml(text: &str) -> Result<Self, PhysicsError> {
        let c: PlantConstants =
            toml::from_str(text).map_err(|e| PhysicsError::Constants(e.to_string()))?;
        if c.version != CONSTANTS_VERSION {
            return Err(PhysicsError::Constants(format!(
                "unsupported constants version {} (expected {CONSTANTS_VERSION})",
                c.version
            )));
        }
        c.params.validate(&c.model)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, PhysicsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PhysicsError::Constants(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub q: [f64; NUM_JOINTS],
    pub qdot: [f64; NUM_JOINTS],
    pub mu: [f64; NUM_KEYS],
    pub mu_dot: [f64; NUM_KEYS],
    pub sim_time: f64,
}

impl PlantState {
    /// Reference pose: all finger joints at zero, slider at the configured start.
    pub fn reference(params: &PhysicalParams) -> Self {
        let mut q = [0.0; NUM_JOINTS];
        q[SLIDER] = params.hand_start_slider;
        PlantState { q, qdot: [0.0; NUM_JOINTS], mu: [0.0; NUM_KEYS], mu_dot: [0.0; NUM_KEYS], sim_time: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTorques {
    pub tau: [f64; NUM_JOINTS],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FingertipPose {
    pub x: f64,
    pub z: f64,
}

/// Closed-form fingertip poses. `z` is relative to the resting key surface.
pub fn forward_kinematics(
    model: &PlantModel,
    piano_height: f64,
    q: &[f64; NUM_JOINTS],
) -> [FingertipPose; NUM_FINGERS] {
    let rest_z = model.hand_base_height - piano_height;
    std::array::from_fn(|f| {
        let (abd, prox, dist) = (q[3 * f], q[3 * f + 1], q[3 * f + 2]);
        let x = q[SLIDER] + (f as f64 + 0.5) * model.key_width + model.abduction_radius * abd.sin();
        let drop = model.proximal_length * prox.sin() + model.distal_length * (prox + dist).sin();
        FingertipPose { x, z: rest_z - drop }
    })
}

/// Contact forces pushing on each key, and the normal load each finger carries.
fn contact_forces(
    model: &PlantModel,
    piano_height: f64,
    state: &PlantState,
) -> ([f64; NUM_KEYS], [f64; NUM_FINGERS]) {
    let mut key_force = [0.0; NUM_KEYS];
    let mut finger_load = [0.0; NUM_FINGERS];
    for (f, tip) in forward_kinematics(model, piano_height, &state.q).iter().enumerate() {
        if let Some(k) = model.key_at(tip.x) {
            let surface = -state.mu[k] * model.key_travel;
            let penetration = surface - tip.z;
            if penetration > 0.0 {
                let force = model.contact_stiffness * penetration;
                key_force[k] += force;
                finger_load[f] = force;
            }
        }
    }
    (key_force, finger_load)
}

/// Stick-slip velocity update for a joint whose motion drags a fingertip
/// across a key surface. `max_friction` is the friction limit in the joint's
/// own units.
fn frictional_velocity(qdot: f64, tau: f64, max_friction: f64, inertia: f64, stick_speed: f64) -> f64 {
    if qdot.abs() <= stick_speed && tau.abs() <= max_friction {
        return 0.0;
    }
    let dir = if qdot.abs() > stick_speed { qdot.signum() } else { tau.signum() };
    let next = qdot + PHYSICS_DT * (tau - dir * max_friction) / inertia;
    if next * dir < 0.0 {
        0.0
    } else {
        next
    }
}

/// Advances the plant by one physics step toward the joint targets.
///
/// Returns the new state and the servo torques applied during the step.
pub fn step(
    model: &PlantModel,
    state: &PlantState,
    targets: &[f64; NUM_JOINTS],
    params: &PhysicalParams,
) -> Result<(PlantState, JointTorques), PhysicsError> {
    let (key_force, finger_load) = contact_forces(model, params.piano_height, state);
    let total_load: f64 = finger_load.iter().sum();

    let mut next = state.clone();
    let mut tau = [0.0; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        let (lo, hi) = model.joint_limits(j);
        let target = targets[j].clamp(lo, hi);
        let t = params.joint_stiffness[j] * (target - state.q[j]) - params.joint_damping[j] * state.qdot[j];
        tau[j] = t;
        let inertia = model.inertia(j);
        let max_friction = if j == SLIDER {
            params.finger_key_friction * total_load
        } else if j % 3 == 0 {
            params.finger_key_friction * finger_load[j / 3] * model.abduction_radius
        } else {
            0.0
        };
        let qdot = if max_friction > 0.0 {
            frictional_velocity(state.qdot[j], t, max_friction, inertia, model.stick_speed)
        } else {
            state.qdot[j] + PHYSICS_DT * t / inertia
        };
        let mut q = state.q[j] + PHYSICS_DT * qdot;
        let mut qdot = qdot;
        if q < lo {
            q = lo;
            qdot = qdot.max(0.0);
        } else if q > hi {
            q = hi;
            qdot = qdot.min(0.0);
        }
        next.q[j] = q;
        next.qdot[j] = qdot;
    }

    for k in 0..NUM_KEYS {
        let acc = (key_force[k]
            - params.key_spring_stiffness * state.mu[k]
            - model.key_damping * state.mu_dot[k])
            / model.key_mass;
        let mut v = state.mu_dot[k] + PHYSICS_DT * acc;
        let mut mu = state.mu[k] + PHYSICS_DT * v;
        if mu < 0.0 {
            mu = 0.0;
            v = v.max(0.0);
        } else if mu > 1.0 {
            mu = 1.0;
            v = v.min(0.0);
        }
        next.mu[k] = mu;
        next.mu_dot[k] = v;
    }
    next.sim_time = state.sim_time + PHYSICS_DT;

    let finite = next.q.iter().chain(&next.qdot).chain(&next.mu).chain(&next.mu_dot).all(|v| v.is_finite())
        && tau.iter().all(|v| v.is_finite());
    if !finite {
        return Err(PhysicsError::IntegrationFault {
            time: next.sim_time,
            what: "non-finite state after step".into(),
        });
    }
    Ok((next, JointTorques { tau }))
}

/// Keys whose depression has reached the press threshold (closed boundary).
pub fn pressed_keys(state: &PlantState, params: &PhysicalParams) -> KeySet {
    KeySet::from_indices((0..NUM_KEYS).filter(|&k| state.mu[k] >= params.key_press_threshold))
}

/// A single-owner plant instance.
#[derive(Debug, Clone)]
pub struct Plant {
    pub model: PlantModel,
    pub params: PhysicalParams,
    pub state: PlantState,
    pub last_torques: JointTorques,
}

impl Plant {
    pub fn new(model: PlantModel, params: PhysicalParams) -> Self {
        let state = PlantState::reference(&params);
        Plant { model, params, state, last_torques: JointTorques { tau: [0.0; NUM_JOINTS] } }
    }

    pub fn reset(&mut self) {
        self.state = PlantState::reference(&self.params);
        self.last_torques = JointTorques { tau: [0.0; NUM_JOINTS] };
    }

    pub fn step(&mut self, targets: &[f64; NUM_JOINTS]) -> Result<(), PhysicsError> {
        let (s, tau) = step(&self.model, &self.state, targets, &self.params)?;
        self.state = s;
        self.last_torques = tau;
        Ok(())
    }

    pub fn pressed(&self) -> KeySet {
        pressed_keys(&self.state, &self.params)
    }

    pub fn fingertips(&self) -> [FingertipPose; NUM_FINGERS] {
        forward_kinematics(&self.model, self.params.piano_height, &self.state.q)
    }
}

/// Writes a CSV trajectory dump: one row per state with `q`, `qdot` and `mu`.
pub fn write_trajectory_csv<W: Write>(mut out: W, states: &[PlantState]) -> std::io::Result<()> {
    let mut header = vec!["step".to_string(), "time".to_string()];
    header.extend((0..NUM_JOINTS).map(|j| format!("q{j}")));
    header.extend((0..NUM_JOINTS).map(|j| format!("qdot{j}")));
    header.extend((0..NUM_KEYS).map(|k| format!("mu{k}")));
    writeln!(out, "{}", header.join(","))?;
    for (i, s) in states.iter().enumerate() {
        let mut row = vec![i.to_string(), s.sim_time.to_string()];
        row.extend(s.q.iter().chain(&s.qdot).chain(&s.mu).map(|v| v.to_string()));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (PlantModel, PhysicalParams) {
        let c = PlantConstants::nominal();
        (c.model, c.params)
    }

    #[test]
    fn nominal_constants_parse() {
        let (m, p) = setup();
        assert_eq!(p.joint_damping[0], 0.1);
        assert_eq!(p.joint_stiffness[0], 3.0);
        assert!(p.validate(&m).is_ok());
        // 1 N of steady load on the key spring exceeds the press threshold.
        assert!(1.0 / p.key_spring_stiffness > p.key_press_threshold);
    }

    #[test]
    fn constants_version_checked() {
        let text = NOMINAL_CONSTANTS.replace("version = 1", "version = 0");
        assert!(matches!(PlantConstants::from_toml(&text), Err(PhysicsError::Constants(m)) if m.contains("version")));
    }

    #[test]
    fn fk_reference_pose() {
        let (m, p) = setup();
        let mut q = [0.0; NUM_JOINTS];
        let tips = forward_kinematics(&m, p.piano_height, &q);
        for (f, tip) in tips.iter().enumerate() {
            assert_eq!(m.key_at(tip.x), Some(f));
            assert!((tip.x - m.key_center_x(f)).abs() < 1e-12);
            assert!((tip.z - 0.02).abs() < 1e-12);
        }
        q[SLIDER] = 0.023;
        let shifted = forward_kinematics(&m, p.piano_height, &q);
        for (a, b) in tips.iter().zip(&shifted) {
            assert!((b.x - a.x - 0.023).abs() < 1e-15);
            assert_eq!(a.z, b.z);
        }
    }

    #[test]
    fn fk_flexed_limit_below_surface() {
        let (m, p) = setup();
        let mut q = [0.0; NUM_JOINTS];
        q[1] = 0.8;
        q[2] = 0.8;
        // By hand: 0.02 - (0.03 sin 0.8 + 0.025 sin 1.6)
        //        = 0.02 - (0.0215207 + 0.0249894) = -0.0265101
        let z = forward_kinematics(&m, p.piano_height, &q)[0].z;
        assert!((z - (-0.026_510_1)).abs() < 1e-6, "{z}");
    }

    #[test]
    fn setpoint_hold_is_static() {
        let (m, p) = setup();
        let s0 = PlantState::reference(&p);
        let (s1, tau) = step(&m, &s0, &s0.q, &p).unwrap();
        assert_eq!(s1.q, s0.q);
        assert_eq!(s1.qdot, s0.qdot);
        assert_eq!(s1.mu, s0.mu);
        assert!(tau.tau.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn sustained_press_converges_above_threshold() {
        let (m, p) = setup();
        let mut plant = Plant::new(m, p.clone());
        let mut target = plant.state.q;
        target[1] = 0.8;
        target[2] = 0.8;
        let key = plant.model.key_at(plant.fingertips()[0].x).unwrap();
        let mut trace = vec![];
        for _ in 0..100 {
            plant.step(&target).unwrap();
            trace.push(plant.state.mu[key]);
        }
        assert!(*trace.last().unwrap() >= p.key_press_threshold);
        // settled: last 20 steps nearly constant
        let tail = &trace[80..];
        let spread = tail.iter().cloned().fold(f64::MIN, f64::max) - tail.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-3, "{spread}");
        assert!(plant.pressed().contains(key));
    }

    #[test]
    fn adjacent_presses_are_independent() {
        let (m, p) = setup();
        let mut both = Plant::new(m.clone(), p.clone());
        let mut one = Plant::new(m, p);
        let mut t_both = both.state.q;
        for j in [1, 2, 4, 5] {
            t_both[j] = 0.8;
        }
        let mut t_one = one.state.q;
        t_one[1] = 0.8;
        t_one[2] = 0.8;
        for _ in 0..60 {
            both.step(&t_both).unwrap();
            one.step(&t_one).unwrap();
        }
        let k0 = both.model.key_at(both.fingertips()[0].x).unwrap();
        assert!(both.state.mu[k0] > 0.5 && both.state.mu[k0 + 1] > 0.5);
        assert_eq!(both.state.mu[k0], one.state.mu[k0]);
    }

    #[test]
    fn threshold_is_closed() {
        let (_, p) = setup();
        let mut s = PlantState::reference(&p);
        assert!(pressed_keys(&s, &p).is_empty());
        s.mu[10] = p.key_press_threshold;
        assert_eq!(pressed_keys(&s, &p).to_indices(), vec![10]);
    }

    #[test]
    fn released_key_decays_monotonically() {
        let (m, p) = setup();
        let mut s = PlantState::reference(&p);
        s.mu[40] = 0.9;
        let hold = s.q;
        let mut prev = s.mu[40];
        for _ in 0..400 {
            s = step(&m, &s, &hold, &p).unwrap().0;
            assert!(s.mu[40] <= prev);
            prev = s.mu[40];
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn nan_target_faults() {
        let (m, p) = setup();
        let s = PlantState::reference(&p);
        let mut t = s.q;
        t[3] = f64::NAN;
        assert!(matches!(step(&m, &s, &t, &p), Err(PhysicsError::IntegrationFault { .. })));
    }

    #[test]
    fn trajectory_csv_header() {
        let (_, p) = setup();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &[PlantState::reference(&p)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 2 + 13 + 13 + 49);
        assert_eq!(lines[1].split(',').count(), 2 + 13 + 13 + 49);
    }
}
