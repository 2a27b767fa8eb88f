//! Deployment over a shadow simulation and a plant in three modes:
//! joint mirroring, hybrid, and real-world.

pub mod bridge;
pub mod plant;

use crate::env::{build_observation, Action, Controller, Observation, PianoEnv, FINGER_JOINTS};
use crate::keys::KeySet;
use crate::metrics::ScoreAccumulator;
use crate::physics::{PhysicalParams, PlantModel, SLIDER};
use crate::reward::RewardConfig;
use crate::song::SongTimeline;
use plant::{PlantBackend, PlantError, PlantReading};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;

pub use plant::{proxy_params, InternalPlant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "mirror", alias = "joint_mirroring")]
    JointMirroring,
    #[serde(rename = "hybrid")]
    Hybrid,
    #[serde(rename = "real", alias = "real_world")]
    RealWorld,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::JointMirroring, Mode::Hybrid, Mode::RealWorld];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::JointMirroring => "mirror",
            Mode::Hybrid => "hybrid",
            Mode::RealWorld => "real",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mirror" | "mirroring" | "joint_mirroring" => Ok(Mode::JointMirroring),
            "hybrid" => Ok(Mode::Hybrid),
            "real" | "real_world" | "realworld" => Ok(Mode::RealWorld),
            other => Err(format!("unknown mode {other:?} (expected mirror, hybrid or real)")),
        }
    }
}

/// What the shadow simulation forwards to the plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Forward {
    /// The policy's joint targets.
    #[default]
    Targets,
    /// The shadow's joint positions after the step.
    Positions,
}

impl std::str::FromStr for Forward {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "targets" => Ok(Forward::Targets),
            "positions" => Ok(Forward::Positions),
            other => Err(format!("unknown forward mode {other:?}, expected targets or positions")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeConfig {
    pub mode: Mode,
    pub shadow_params: PhysicalParams,
    pub forward: Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Sim,
    Plant,
}

/// Origin of each observation segment, in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub joints: Source,
    pub slider: Source,
    pub pressed: Source,
    pub intended: Source,
    pub future: Source,
}

impl Provenance {
    pub fn for_mode(mode: Mode) -> Self {
        let (s, p) = (Source::Sim, Source::Plant);
        match mode {
            Mode::JointMirroring => Provenance { joints: s, slider: s, pressed: s, intended: s, future: s },
            Mode::Hybrid => Provenance { joints: s, slider: s, pressed: p, intended: s, future: s },
            Mode::RealWorld => Provenance { joints: p, slider: p, pressed: p, intended: p, future: p },
        }
    }

    pub fn segments(&self) -> [Source; 5] {
        [self.joints, self.slider, self.pressed, self.intended, self.future]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedObservation {
    pub obs: Observation,
    pub provenance: Provenance,
}

/// Builds the policy input for `mode` from the shadow and the plant reading.
pub fn fuse(
    mode: Mode,
    shadow: Option<&PianoEnv>,
    reading: &PlantReading,
    timeline: &SongTimeline,
    t: usize,
) -> Result<FusedObservation, PlantError> {
    let provenance = Provenance::for_mode(mode);
    let obs = match mode {
        Mode::JointMirroring => build_observation(shadow.expect("shadow runs in mirroring").plant(), timeline, t),
        Mode::Hybrid => {
            let sp = shadow.expect("shadow runs in hybrid").plant();
            Observation::assemble(&sp.state.q[..FINGER_JOINTS], sp.state.q[SLIDER], reading.pressed, timeline, t)
        }
        Mode::RealWorld => {
            let q = reading.joints.ok_or(PlantError::MissingTelemetry)?;
            Observation::assemble(&q[..FINGER_JOINTS], q[SLIDER], reading.pressed, timeline, t)
        }
    };
    Ok(FusedObservation { obs, provenance })
}

/// One line of a deployment log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeLogRecord {
    pub t: usize,
    pub mode: Mode,
    pub action: Vec<f64>,
    pub targets: KeySet,
    /// Keys pressed on the plant.
    pub pressed: KeySet,
    /// Keys pressed in the shadow simulation, when it runs.
    pub sim_pressed: Option<KeySet>,
    pub provenance: Provenance,
    pub stale: bool,
}

#[derive(Debug, Clone)]
pub struct ModeEpisode {
    pub mode: Mode,
    pub sim: Option<ScoreAccumulator>,
    pub plant: ScoreAccumulator,
    /// Steps where shadow and plant pressed sets differ.
    pub divergence: u64,
    pub log: Vec<ModeLogRecord>,
    /// Set when the plant failed mid-episode; the log is partial.
    pub aborted: Option<PlantError>,
}

impl ModeEpisode {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in &self.log {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// The plant's pressed keys per step.
    pub fn plant_key_log(&self) -> Vec<KeySet> {
        self.log.iter().map(|r| r.pressed).collect()
    }
}

/// Runs `controller` through `timeline` against `plant` in the configured mode.
///
/// The shadow simulation is stepped in mirroring and hybrid modes only; in
/// real-world mode it stays idle and no sim-side scores are produced.
pub fn run_episode(
    controller: &mut dyn Controller,
    timeline: Arc<SongTimeline>,
    model: &PlantModel,
    reward: RewardConfig,
    cfg: &ModeConfig,
    plant: &mut dyn PlantBackend,
) -> ModeEpisode {
    let mode = cfg.mode;
    let shadow_runs = mode != Mode::RealWorld;
    let mut shadow = PianoEnv::new(model.clone(), reward);
    shadow.reset(timeline.clone(), cfg.shadow_params.clone(), 0);
    let mut ep = ModeEpisode {
        mode,
        sim: shadow_runs.then(ScoreAccumulator::default),
        plant: ScoreAccumulator::default(),
        divergence: 0,
        log: Vec::with_capacity(timeline.len()),
        aborted: None,
    };
    let mut reading = match plant.reset() {
        Ok(r) => r,
        Err(e) => {
            ep.aborted = Some(e);
            return ep;
        }
    };
    for t in 0..timeline.len() {
        let fused = match fuse(mode, shadow_runs.then_some(&shadow), &reading, &timeline, t) {
            Ok(f) => f,
            Err(e) => {
                ep.aborted = Some(e);
                break;
            }
        };
        let action = controller.act(&fused.obs);
        let targets = timeline.targets(t);
        let mut sim_pressed = None;
        let mut command = Action::new(action.0).to_targets(model);
        if shadow_runs {
            let res = shadow.env_step(&action).expect("shadow is stepped once per song step");
            sim_pressed = Some(res.info.pressed);
            if let Some(acc) = ep.sim.as_mut() {
                acc.push(res.info.pressed, targets);
            }
            if cfg.forward == Forward::Positions {
                command = shadow.plant().state.q;
            }
        }
        reading = match plant.command(t as u64 + 1, &command) {
            Ok(r) => r,
            Err(e) => {
                ep.aborted = Some(e);
                break;
            }
        };
        ep.plant.push(reading.pressed, targets);
        if sim_pressed.is_some_and(|s| s != reading.pressed) {
            ep.divergence += 1;
        }
        ep.log.push(ModeLogRecord {
            t,
            mode,
            action: action.0.to_vec(),
            targets,
            pressed: reading.pressed,
            sim_pressed,
            provenance: fused.provenance,
            stale: reading.stale,
        });
    }
    ep
}

#[cfg(test)]
mod tests {
    use super::bridge::{BridgePlant, Loopback};
    use super::*;
    use crate::env::ScriptedPlayer;
    use crate::metrics::Aggregation;
    use crate::song::fixtures;

    fn setup() -> (Arc<SongTimeline>, PlantModel, PhysicalParams) {
        (Arc::new(fixtures::by_name("c_major_scale").unwrap()), PlantModel::nominal(), PhysicalParams::nominal())
    }

    fn cfg(mode: Mode, p: &PhysicalParams) -> ModeConfig {
        ModeConfig { mode, shadow_params: p.clone(), forward: Forward::Targets }
    }

    #[test]
    fn identical_plant_makes_modes_equivalent() {
        let (tl, m, p) = setup();
        let runs: Vec<ModeEpisode> = Mode::ALL
            .iter()
            .map(|&mode| {
                let mut plant = InternalPlant::new(m.clone(), p.clone());
                run_episode(&mut ScriptedPlayer::new(m.clone()), tl.clone(), &m, RewardConfig::default(), &cfg(mode, &p), &mut plant)
            })
            .collect();
        for r in &runs {
            assert!(r.aborted.is_none());
            assert_eq!(r.plant_key_log(), runs[0].plant_key_log());
            assert_eq!(r.plant.scores(Aggregation::Micro), runs[0].plant.scores(Aggregation::Micro));
        }
        assert_eq!(runs[0].divergence, 0);
        assert!(runs[2].sim.is_none());
    }

    #[test]
    fn hybrid_provenance_is_pressed_only() {
        let (tl, m, p) = setup();
        let mut plant = InternalPlant::new(m.clone(), proxy_params(&p, &m, 1.0, 0.0, 0, 0));
        let ep = run_episode(&mut ScriptedPlayer::new(m.clone()), tl, &m, RewardConfig::default(), &cfg(Mode::Hybrid, &p), &mut plant);
        for rec in &ep.log {
            let plant_segments: Vec<usize> =
                rec.provenance.segments().iter().enumerate().filter(|(_, s)| **s == Source::Plant).map(|(i, _)| i).collect();
            assert_eq!(plant_segments, vec![2]);
        }
    }

    #[test]
    fn mirroring_never_sees_the_plant() {
        let (tl, m, p) = setup();
        let actions = |plant_params: PhysicalParams| {
            let mut plant = InternalPlant::new(m.clone(), plant_params);
            let mut seen = Vec::new();
            let mut player = ScriptedPlayer::new(m.clone());
            let mut ctl = |o: &Observation| {
                seen.push(o.clone());
                player.act(o)
            };
            run_episode(&mut ctl, tl.clone(), &m, RewardConfig::default(), &cfg(Mode::JointMirroring, &p), &mut plant);
            seen
        };
        assert_eq!(actions(p.clone()), actions(proxy_params(&p, &m, 1.0, 0.05, 9, 9)));
    }

    #[test]
    fn loopback_bridge_matches_internal_plant() {
        let (tl, m, p) = setup();
        let plant_params = proxy_params(&p, &m, 0.5, 0.0, 0, 0);
        for mode in Mode::ALL {
            let mut direct = InternalPlant::new(m.clone(), plant_params.clone());
            let mut bridged = BridgePlant::new(Loopback::new(InternalPlant::new(m.clone(), plant_params.clone())));
            let run = |plant: &mut dyn PlantBackend| {
                run_episode(&mut ScriptedPlayer::new(m.clone()), tl.clone(), &m, RewardConfig::default(), &cfg(mode, &p), plant)
            };
            let a = run(&mut direct);
            let b = run(&mut bridged);
            assert_eq!(a.plant.scores(Aggregation::Micro), b.plant.scores(Aggregation::Micro));
            assert_eq!(a.log, b.log);
        }
    }

    #[test]
    fn plant_failure_flags_partial_log() {
        let (tl, m, p) = setup();
        let mut lb = Loopback::new(InternalPlant::new(m.clone(), p.clone()));
        lb.drop_replies_at = vec![5, 6, 7];
        let mut plant = BridgePlant::new(lb);
        let ep = run_episode(&mut ScriptedPlayer::new(m.clone()), tl, &m, RewardConfig::default(), &cfg(Mode::Hybrid, &p), &mut plant);
        assert_eq!(ep.aborted, Some(PlantError::DeadlineExceeded { consecutive: 3 }));
        assert_eq!(ep.log.len(), 6);
        assert!(ep.log[4].stale && ep.log[5].stale);
    }
}
