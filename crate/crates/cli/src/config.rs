//! Run configuration: built-in defaults, overlaid by an optional TOML file,
//! overlaid by command-line flags.

use crate::error::CliError;
use serde::{Deserialize, Serialize};
use sim2piano::domain_rand::{DrConfig, SpreadTable};
use sim2piano::exec_modes::{Forward, Mode};
use sim2piano::experiments::ExperimentConfig;
use sim2piano::metrics::Aggregation;
use sim2piano::physics::PhysicalParams;
use sim2piano::policy::TrainerConfig;
use sim2piano::reward::RewardConfig;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Reduced budget settings for a single desktop core.
    #[default]
    Desk,
    /// High update-to-data DroQ settings.
    Full,
}

impl Preset {
    pub fn trainer(self) -> TrainerConfig {
        match self {
            Preset::Desk => TrainerConfig::desk(),
            Preset::Full => TrainerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrSection {
    pub c_dr: f64,
    pub spread: SpreadTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    /// Offset of the simulated proxy plant from nominal.
    pub proxy_scale: f64,
    pub proxy_jitter: f64,
    pub proxy_seed: u64,
    /// Host:port of a device speaking the bridge protocol, instead of the proxy.
    pub bridge: Option<String>,
    pub deadline_ms: u64,
    pub forward: Forward,
}

/// Grid and budget of the experiment subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub songs: Vec<String>,
    pub seeds: Vec<u64>,
    pub runs: usize,
    pub train_steps: u64,
    pub mode: Mode,
    pub ablation_modes: Vec<Mode>,
    pub suite_c_dr: f64,
    pub real_world_c_dr: f64,
    pub dr_song: String,
    pub dr_grid: Vec<f64>,
    pub dr_runs: Option<usize>,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub preset: Preset,
    pub trainer: TrainerConfig,
    pub reward: RewardConfig,
    pub dr: DrSection,
    pub plant: PlantSection,
    pub experiment: ExperimentSection,
}

impl RunConfig {
    pub fn defaults(preset: Preset) -> Self {
        let e = ExperimentConfig::default();
        RunConfig {
            seed: 0,
            workers: 0,
            preset,
            trainer: preset.trainer(),
            reward: RewardConfig::default(),
            dr: DrSection { c_dr: 0.0, spread: SpreadTable::default() },
            plant: PlantSection {
                proxy_scale: e.proxy_scale,
                proxy_jitter: e.proxy_jitter,
                proxy_seed: e.proxy_seed,
                bridge: None,
                deadline_ms: 25,
                forward: Forward::Targets,
            },
            experiment: ExperimentSection {
                songs: e.songs,
                seeds: e.seeds,
                runs: e.runs,
                train_steps: e.train_steps,
                mode: e.mode,
                ablation_modes: e.ablation_modes,
                suite_c_dr: e.suite_c_dr,
                real_world_c_dr: e.real_world_c_dr,
                dr_song: e.dr_song,
                dr_grid: e.dr_grid,
                dr_runs: e.dr_runs,
                aggregation: e.aggregation,
            },
        }
    }

    /// Parses `text` on top of the defaults of its `preset` (desk if absent).
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(format!("config: {}", e.message())))?;
        let preset = match user.get("preset") {
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| CliError::Config(format!("config: preset: {}", e.message())))?,
            None => Preset::Desk,
        };
        let mut base = toml::Table::try_from(Self::defaults(preset)).expect("defaults serialize");
        merge(&mut base, user);
        let cfg: RunConfig =
            toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| CliError::Config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::defaults(Preset::Desk)),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dr_config()?;
        self.experiment().validate()?;
        Ok(())
    }

    pub fn dr_config(&self) -> Result<DrConfig, CliError> {
        let cfg = DrConfig { c_dr: self.dr.c_dr, nominal: PhysicalParams::nominal(), spread: self.dr.spread, seed: self.seed };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Experiment settings with the shared worker, trainer and plant sections folded in.
    pub fn experiment(&self) -> ExperimentConfig {
        let e = self.experiment.clone();
        ExperimentConfig {
            songs: e.songs,
            seeds: e.seeds,
            runs: e.runs,
            train_steps: e.train_steps,
            trainer: self.trainer.clone(),
            mode: e.mode,
            ablation_modes: e.ablation_modes,
            suite_c_dr: e.suite_c_dr,
            real_world_c_dr: e.real_world_c_dr,
            dr_song: e.dr_song,
            dr_grid: e.dr_grid,
            dr_runs: e.dr_runs,
            proxy_scale: self.plant.proxy_scale,
            proxy_jitter: self.plant.proxy_jitter,
            proxy_seed: self.plant.proxy_seed,
            aggregation: e.aggregation,
            workers: self.workers,
        }
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_desk_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::defaults(Preset::Desk));
    }

    #[test]
    fn sections_merge_field_by_field() {
        let cfg = RunConfig::from_toml("seed = 4\n[trainer]\nbatch_size = 32\n[dr]\nc_dr = 0.3\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.trainer.batch_size, 32);
        assert_eq!(cfg.trainer.lr, TrainerConfig::desk().lr);
        assert_eq!(cfg.dr.c_dr, 0.3);
        assert_eq!(cfg.dr.spread, SpreadTable::default());
    }

    #[test]
    fn preset_selects_trainer_base() {
        let cfg = RunConfig::from_toml("preset = \"full\"\n").unwrap();
        assert_eq!(cfg.trainer, TrainerConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(RunConfig::from_toml("sede = 1\n"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_toml("[dr]\nc_dr = 2.0\n"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_toml("[trainer\n"), Err(CliError::Config(_))));
    }
}
