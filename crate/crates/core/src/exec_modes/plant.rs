//! Plants the deployment loop can drive.

use crate::env::SUBSTEPS;
use crate::keys::KeySet;
use crate::physics::{PhysicalParams, Plant, PlantModel, NUM_JOINTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("protocol error: {msg}: {line:?}")]
    Protocol { line: String, msg: String },
    #[error("plant missed {consecutive} consecutive deadlines")]
    DeadlineExceeded { consecutive: u32 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("plant fault: {0}")]
    Fault(String),
    #[error("real-world mode needs joint telemetry from the plant")]
    MissingTelemetry,
}

/// What the plant reports after a command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantReading {
    pub pressed: KeySet,
    pub joints: Option<[f64; NUM_JOINTS]>,
    /// The reading is stale: the plant did not answer in time.
    pub stale: bool,
}

pub trait PlantBackend {
    /// Homes the plant and returns its initial reading.
    fn reset(&mut self) -> Result<PlantReading, PlantError>;
    /// Sends joint targets for control step `t` (1-based) and returns the new reading.
    fn command(&mut self, t: u64, targets: &[f64; NUM_JOINTS]) -> Result<PlantReading, PlantError>;
}

/// A second simulator instance standing in for hardware.
#[derive(Debug, Clone)]
pub struct InternalPlant {
    pub plant: Plant,
}

impl InternalPlant {
    pub fn new(model: PlantModel, params: PhysicalParams) -> Self {
        InternalPlant { plant: Plant::new(model, params) }
    }

    fn reading(&self) -> PlantReading {
        PlantReading { pressed: self.plant.pressed(), joints: Some(self.plant.state.q), stale: false }
    }
}

impl PlantBackend for InternalPlant {
    fn reset(&mut self) -> Result<PlantReading, PlantError> {
        self.plant.reset();
        Ok(self.reading())
    }

    fn command(&mut self, _t: u64, targets: &[f64; NUM_JOINTS]) -> Result<PlantReading, PlantError> {
        for _ in 0..SUBSTEPS {
            self.plant.step(targets).map_err(|e| PlantError::Fault(e.to_string()))?;
        }
        Ok(self.reading())
    }
}

/// Parameters of the simulated stand-in for hardware: nominal values pushed
/// along a fixed direction by `scale`, plus a small per-run jitter.
pub fn proxy_params(nominal: &PhysicalParams, model: &PlantModel, scale: f64, jitter: f64, seed: u64, run: u64) -> PhysicalParams {
    let mut p = nominal.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    let wiggle = |rng: &mut ChaCha8Rng| 1.0 + jitter * rng.random_range(-1.0..1.0);
    for j in 0..NUM_JOINTS {
        p.joint_damping[j] *= (1.0 + 0.4 * scale) * wiggle(&mut rng);
        p.joint_stiffness[j] *= (1.0 - 0.25 * scale) * wiggle(&mut rng);
    }
    p.key_spring_stiffness *= (1.0 + 0.3 * scale) * wiggle(&mut rng);
    p.finger_key_friction *= (1.0 + 0.5 * scale) * wiggle(&mut rng);
    p.key_press_threshold = (p.key_press_threshold + 0.1 * scale * wiggle(&mut rng)).clamp(0.01, 0.99);
    p.piano_height -= 0.004 * scale * wiggle(&mut rng);
    let (lo, hi) = model.slider_limits;
    p.hand_start_slider = (p.hand_start_slider + 0.002 * scale * wiggle(&mut rng)).clamp(lo, hi);
    p
}
