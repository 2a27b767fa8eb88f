//! Experiment grids run against the simulated plant proxy: the song suite,
//! the execution-mode ablation and the DR intensity sweep.

pub mod plot;

use crate::domain_rand::{DrConfig, DrError};
use crate::env::{rollout, Controller, PianoEnv};
use crate::exec_modes::plant::{proxy_params, InternalPlant, PlantBackend, PlantError};
use crate::exec_modes::{run_episode, Forward, Mode, ModeConfig, ModeEpisode};
use crate::metrics::{Aggregation, Scores};
use crate::physics::{PhysicalParams, PlantModel};
use crate::policy::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::policy::nets::PolicyController;
use crate::policy::trainer::{config_hash, train, TrainError, TrainTask, TrainerConfig};
use crate::reward::RewardConfig;
use crate::song::{fixtures, load_timeline, SongError, SongTimeline};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

/// `git describe` of the source tree this library was built from.
pub const CODE_VERSION: &str = env!("SIM2PIANO_CODE_VERSION");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("song {name}: {source}")]
    Song { name: String, source: SongError },
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Dr(#[from] DrError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Every budget and grid knob of the experiments, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Fixture names or song file paths.
    pub songs: Vec<String>,
    pub seeds: Vec<u64>,
    /// Plant executions per trained model.
    pub runs: usize,
    pub train_steps: u64,
    pub trainer: TrainerConfig,
    /// Mode used by the song suite.
    pub mode: Mode,
    pub ablation_modes: Vec<Mode>,
    /// DR intensity of the checkpoints used by the suite and non-real-world ablation rows.
    pub suite_c_dr: f64,
    /// DR intensity of the checkpoints used by real-world ablation rows.
    pub real_world_c_dr: f64,
    pub dr_song: String,
    pub dr_grid: Vec<f64>,
    /// Overrides the per-intensity run schedule of the sweep.
    pub dr_runs: Option<usize>,
    /// Strength of the proxy's systematic offset from nominal.
    pub proxy_scale: f64,
    /// Per-run relative jitter of the proxy parameters.
    pub proxy_jitter: f64,
    pub proxy_seed: u64,
    pub aggregation: Aggregation,
    /// Parallel workers; 0 means one per physical core.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            songs: fixtures::SONGS.iter().map(|(n, _)| n.to_string()).collect(),
            seeds: vec![0, 1],
            runs: 3,
            train_steps: 200_000,
            trainer: TrainerConfig::desk(),
            mode: Mode::Hybrid,
            ablation_modes: Mode::ALL.to_vec(),
            suite_c_dr: 0.0,
            real_world_c_dr: 0.5,
            dr_song: "c_major_scale".into(),
            dr_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            dr_runs: None,
            proxy_scale: 1.0,
            proxy_jitter: 0.02,
            proxy_seed: 7,
            aggregation: Aggregation::Micro,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: &str| Err(ExperimentError::Config(msg.to_string()));
        if self.songs.is_empty() {
            return bad("songs must not be empty");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.runs == 0 {
            return bad("runs must be positive");
        }
        if self.dr_grid.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("dr_grid values must lie in [0, 1]");
        }
        for c in [self.suite_c_dr, self.real_world_c_dr] {
            if !(0.0..=1.0).contains(&c) {
                return bad("checkpoint c_dr must lie in [0, 1]");
            }
        }
        if !(self.proxy_scale.is_finite() && self.proxy_jitter.is_finite() && self.proxy_jitter >= 0.0) {
            return bad("proxy scale and jitter must be finite, jitter non-negative");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn workers(&self) -> usize {
        resolve_workers(self.workers)
    }
}

pub fn resolve_workers(requested: usize) -> usize {
    if requested == 0 {
        num_cpus::get_physical().max(1)
    } else {
        requested
    }
}

/// Loads a song by fixture name, falling back to a file path.
pub fn resolve_song(name: &str) -> Result<SongTimeline, ExperimentError> {
    if let Some(tl) = fixtures::by_name(name) {
        return Ok(tl);
    }
    load_timeline(Path::new(name)).map_err(|source| ExperimentError::Song { name: name.to_string(), source })
}

/// Number of runs at each DR intensity: 7 inside [0.3, 0.7], 5 inside
/// [0.2, 0.8], 3 elsewhere.
pub fn runs_for_intensity(c_dr: f64) -> usize {
    const EPS: f64 = 1e-9;
    let within = |lo: f64, hi: f64| c_dr >= lo - EPS && c_dr <= hi + EPS;
    if within(0.3, 0.7) {
        7
    } else if within(0.2, 0.8) {
        5
    } else {
        3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Sim,
    Plant,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Sim => "sim",
            Side::Plant => "plant",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    MissingCheckpoint,
    Failed,
}

/// One line of a results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub song: String,
    pub mode: Mode,
    pub c_dr: f64,
    pub seed: u64,
    pub run: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub side: Side,
    pub aggregation: Aggregation,
    /// Steps where shadow and plant disagreed; only set for plant rows with a running shadow.
    pub divergence: Option<u64>,
    pub status: CellStatus,
    pub config_hash: String,
    pub code_version: String,
    pub dr_params_hash: String,
}

/// Identifies a row before its scores are known.
#[derive(Debug, Clone)]
pub struct Cell {
    pub song: String,
    pub mode: Mode,
    pub c_dr: f64,
    pub seed: u64,
    pub run: usize,
    pub side: Side,
}

impl Cell {
    pub fn row(&self, cfg: &ExperimentConfig, scores: Scores, divergence: Option<u64>, status: CellStatus) -> ResultRow {
        ResultRow {
            song: self.song.clone(),
            mode: self.mode,
            c_dr: self.c_dr,
            seed: self.seed,
            run: self.run,
            precision: scores.precision,
            recall: scores.recall,
            f1: scores.f1,
            side: self.side,
            aggregation: cfg.aggregation,
            divergence,
            status,
            config_hash: cfg.hash(),
            code_version: CODE_VERSION.to_string(),
            dr_params_hash: dr_config(self.c_dr, self.seed).map(|d| config_hash(&d)).unwrap_or_default(),
        }
    }

    pub fn missing(&self, cfg: &ExperimentConfig, status: CellStatus) -> ResultRow {
        self.row(cfg, Scores { precision: f64::NAN, recall: f64::NAN, f1: f64::NAN }, None, status)
    }
}

fn dr_config(c_dr: f64, seed: u64) -> Result<DrConfig, DrError> {
    DrConfig::new(c_dr, PhysicalParams::nominal(), seed)
}

/// Checkpoint files laid out as `<dir>/<song>-cdr<c>-seed<s>.ckpt`.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    pub dir: PathBuf,
}

impl CheckpointStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CheckpointStore { dir: dir.into() }
    }

    pub fn path(&self, song: &str, c_dr: f64, seed: u64) -> PathBuf {
        let stem = Path::new(song).file_stem().and_then(|s| s.to_str()).unwrap_or(song);
        self.dir.join(format!("{stem}-cdr{c_dr:.2}-seed{seed}.ckpt"))
    }
}

/// Runs `job` over `items` on `workers` threads and returns the results in
/// input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, job: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = job(item);
                slots.lock().expect("no worker panicked holding the lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every item ran")).collect()
}

/// Result of one training job in a grid.
#[derive(Debug)]
pub struct TrainedModel {
    pub song: String,
    pub c_dr: f64,
    pub seed: u64,
    pub result: Result<Checkpoint, TrainError>,
}

fn train_one(cfg: &ExperimentConfig, timeline: Arc<SongTimeline>, c_dr: f64, seed: u64) -> Result<Checkpoint, TrainError> {
    let task = TrainTask { timeline, model: PlantModel::nominal(), reward: RewardConfig::default(), dr: dr_config(c_dr, seed)? };
    let trainer = TrainerConfig { seed, ..cfg.trainer.clone() };
    log::info!("training {} c_dr={c_dr:.2} seed={seed}", task.timeline.name);
    train(&task, &trainer, cfg.train_steps, None).map(|o| o.best)
}

/// Trains one model per (song, seed) at `c_dr` and stores the best checkpoints.
pub fn train_checkpoints(cfg: &ExperimentConfig, c_dr: f64, store: &CheckpointStore) -> Result<Vec<TrainedModel>, ExperimentError> {
    cfg.validate()?;
    std::fs::create_dir_all(&store.dir)?;
    let mut jobs = Vec::new();
    for song in &cfg.songs {
        let tl = Arc::new(resolve_song(song)?);
        for &seed in &cfg.seeds {
            jobs.push((song.clone(), tl.clone(), seed));
        }
    }
    let results = parallel_map(&jobs, cfg.workers(), |(song, tl, seed)| TrainedModel {
        song: song.clone(),
        c_dr,
        seed: *seed,
        result: train_one(cfg, tl.clone(), c_dr, *seed),
    });
    for m in &results {
        if let Ok(ckpt) = &m.result {
            save_checkpoint(ckpt, &store.path(&m.song, c_dr, m.seed))?;
        }
    }
    Ok(results)
}

/// Deterministic scores of `actor` on the nominal simulator.
pub fn sim_scores(ckpt: &Checkpoint, timeline: Arc<SongTimeline>, aggregation: Aggregation) -> Option<Scores> {
    let mut env = PianoEnv::new(PlantModel::nominal(), RewardConfig::default());
    let mut controller = PolicyController::from_actor(&ckpt.actor, true, 0);
    let ep = rollout(&mut env, &mut controller, timeline, PhysicalParams::nominal(), 0);
    controller.fault.is_none().then(|| ep.scores(aggregation))
}

/// Plant-side outcome of one execution.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantOutcome {
    pub scores: Scores,
    pub divergence: Option<u64>,
    pub aborted: Option<PlantError>,
}

impl PlantOutcome {
    pub fn status(&self) -> CellStatus {
        if self.aborted.is_none() {
            CellStatus::Ok
        } else {
            CellStatus::Failed
        }
    }
}

/// Parameters of the proxy plant for execution `run` of the model trained with `seed`.
pub fn proxy_for(cfg: &ExperimentConfig, seed: u64, run: usize) -> PhysicalParams {
    let model = PlantModel::nominal();
    let stream = seed.wrapping_mul(1_000).wrapping_add(run as u64);
    proxy_params(&PhysicalParams::nominal(), &model, cfg.proxy_scale, cfg.proxy_jitter, cfg.proxy_seed, stream)
}

/// Executes `controller` once on `plant` in `mode`, with a nominal shadow.
pub fn plant_run_on(
    controller: &mut dyn Controller,
    timeline: Arc<SongTimeline>,
    mode: Mode,
    plant: &mut dyn PlantBackend,
    aggregation: Aggregation,
) -> (PlantOutcome, ModeEpisode) {
    let model = PlantModel::nominal();
    let mode_cfg = ModeConfig { mode, shadow_params: PhysicalParams::nominal(), forward: Forward::Targets };
    let ep = run_episode(controller, timeline, &model, RewardConfig::default(), &mode_cfg, plant);
    let out = PlantOutcome {
        scores: ep.plant.scores(aggregation),
        divergence: ep.sim.is_some().then_some(ep.divergence),
        aborted: ep.aborted.clone(),
    };
    (out, ep)
}

/// Executes `controller` once on a proxy plant with `plant_params`.
pub fn plant_run(
    controller: &mut dyn Controller,
    timeline: Arc<SongTimeline>,
    mode: Mode,
    plant_params: PhysicalParams,
    aggregation: Aggregation,
) -> PlantOutcome {
    let mut plant = InternalPlant::new(PlantModel::nominal(), plant_params);
    plant_run_on(controller, timeline, mode, &mut plant, aggregation).0
}

fn execute(cfg: &ExperimentConfig, ckpt: &Checkpoint, timeline: Arc<SongTimeline>, mode: Mode, seed: u64, run: usize) -> (PlantOutcome, bool) {
    let mut controller = PolicyController::from_actor(&ckpt.actor, true, 0);
    let out = plant_run(&mut controller, timeline, mode, proxy_for(cfg, seed, run), cfg.aggregation);
    let faulted = controller.fault.is_some();
    (out, faulted)
}

/// Rows of an experiment plus the checkpoints it could not find.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub rows: Vec<ResultRow>,
    pub missing: Vec<PathBuf>,
}

/// Evaluates stored checkpoints of `songs × seeds` in `modes`: one sim row per
/// model and `runs` plant rows per model and mode.
fn evaluate_grid(
    cfg: &ExperimentConfig,
    store: &CheckpointStore,
    modes: &[Mode],
    c_dr_for: impl Fn(Mode) -> f64,
) -> Result<Report, ExperimentError> {
    cfg.validate()?;
    let mut report = Report::default();
    let mut jobs = Vec::new();
    for song in &cfg.songs {
        let tl = Arc::new(resolve_song(song)?);
        let mut checkpoints: BTreeMap<(u64, u64), Option<Arc<Checkpoint>>> = BTreeMap::new();
        let mut sim_done = BTreeMap::new();
        for &mode in modes {
            let c_dr = c_dr_for(mode);
            for &seed in &cfg.seeds {
                let path = store.path(song, c_dr, seed);
                let key = (c_dr.to_bits(), seed);
                let ckpt = checkpoints
                    .entry(key)
                    .or_insert_with(|| match load_checkpoint(&path) {
                        Ok(c) => Some(Arc::new(c)),
                        Err(e) => {
                            log::warn!("skipping {}: {e}", path.display());
                            report.missing.push(path.clone());
                            None
                        }
                    })
                    .clone();
                if sim_done.insert(key, ()).is_none() {
                    let cell = Cell { song: song.clone(), mode, c_dr, seed, run: 0, side: Side::Sim };
                    jobs.push((cell, ckpt.clone(), tl.clone()));
                }
                for run in 0..cfg.runs {
                    let cell = Cell { song: song.clone(), mode, c_dr, seed, run, side: Side::Plant };
                    jobs.push((cell, ckpt.clone(), tl.clone()));
                }
            }
        }
    }
    report.rows = parallel_map(&jobs, cfg.workers(), |(cell, ckpt, tl)| {
        let Some(ckpt) = ckpt else { return cell.missing(cfg, CellStatus::MissingCheckpoint) };
        match cell.side {
            Side::Sim => match sim_scores(ckpt, tl.clone(), cfg.aggregation) {
                Some(s) => cell.row(cfg, s, None, CellStatus::Ok),
                None => cell.missing(cfg, CellStatus::Failed),
            },
            Side::Plant => {
                let (out, faulted) = execute(cfg, ckpt, tl.clone(), cell.mode, cell.seed, cell.run);
                let status = if faulted { CellStatus::Failed } else { out.status() };
                cell.row(cfg, out.scores, out.divergence, status)
            }
        }
    });
    Ok(report)
}

/// Song suite: every song and seed executed `runs` times in the configured mode.
pub fn run_song_suite(cfg: &ExperimentConfig, store: &CheckpointStore) -> Result<Report, ExperimentError> {
    evaluate_grid(cfg, store, &[cfg.mode], |_| cfg.suite_c_dr)
}

/// Execution-mode ablation. Real-world rows use the checkpoints trained at
/// `real_world_c_dr`.
pub fn run_mode_ablation(cfg: &ExperimentConfig, store: &CheckpointStore) -> Result<Report, ExperimentError> {
    let modes = cfg.ablation_modes.clone();
    evaluate_grid(cfg, store, &modes, |m| if m == Mode::RealWorld { cfg.real_world_c_dr } else { cfg.suite_c_dr })
}

/// DR sweep: for every intensity, trains the scheduled number of models on
/// `dr_song` and scores each in simulation and once on the proxy plant.
/// A training that fails leaves a failed cell and the sweep continues.
pub fn run_dr_sweep(cfg: &ExperimentConfig, store: Option<&CheckpointStore>) -> Result<Report, ExperimentError> {
    cfg.validate()?;
    let tl = Arc::new(resolve_song(&cfg.dr_song)?);
    if let Some(store) = store {
        std::fs::create_dir_all(&store.dir)?;
    }
    let mut jobs = Vec::new();
    for &c_dr in &cfg.dr_grid {
        for run in 0..cfg.dr_runs.unwrap_or_else(|| runs_for_intensity(c_dr)) {
            jobs.push((c_dr, run));
        }
    }
    let cells = parallel_map(&jobs, cfg.workers(), |&(c_dr, run)| {
        let seed = cfg.seeds[0].wrapping_add(run as u64);
        let cell = |side| Cell { song: tl.name.clone(), mode: cfg.mode, c_dr, seed, run, side };
        match train_one(cfg, tl.clone(), c_dr, seed) {
            Ok(ckpt) => {
                if let Some(store) = store {
                    if let Err(e) = save_checkpoint(&ckpt, &store.path(&tl.name, c_dr, seed)) {
                        log::warn!("could not store checkpoint: {e}");
                    }
                }
                let sim = match sim_scores(&ckpt, tl.clone(), cfg.aggregation) {
                    Some(s) => cell(Side::Sim).row(cfg, s, None, CellStatus::Ok),
                    None => cell(Side::Sim).missing(cfg, CellStatus::Failed),
                };
                let (out, faulted) = execute(cfg, &ckpt, tl.clone(), cfg.mode, seed, run);
                let status = if faulted { CellStatus::Failed } else { out.status() };
                [sim, cell(Side::Plant).row(cfg, out.scores, out.divergence, status)]
            }
            Err(e) => {
                log::warn!("training at c_dr={c_dr:.2} run {run} failed: {e}");
                [cell(Side::Sim).missing(cfg, CellStatus::Failed), cell(Side::Plant).missing(cfg, CellStatus::Failed)]
            }
        }
    });
    Ok(Report { rows: cells.into_iter().flatten().collect(), missing: Vec::new() })
}

/// Mean and sample standard deviation of one group of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub song: String,
    pub mode: Mode,
    pub c_dr: f64,
    pub side: Side,
    pub n: usize,
    pub failed: usize,
    pub precision_mean: f64,
    pub precision_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub divergence_mean: Option<f64>,
}

/// Mean and sample standard deviation (n - 1); a single value has zero spread.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by (song, mode, c_dr, side), skipping rows that are not ok.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<(String, String, u64, Side), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.song.clone(), r.mode.as_str().to_string(), r.c_dr.to_bits(), r.side)).or_default().push(r);
    }
    let mut out: Vec<Summary> = groups
        .into_values()
        .map(|group| {
            let ok: Vec<&ResultRow> = group.iter().copied().filter(|r| r.status == CellStatus::Ok).collect();
            let col = |f: fn(&ResultRow) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (precision_mean, precision_std) = col(|r| r.precision);
            let (recall_mean, recall_std) = col(|r| r.recall);
            let (f1_mean, f1_std) = col(|r| r.f1);
            let divs: Vec<f64> = ok.iter().filter_map(|r| r.divergence.map(|d| d as f64)).collect();
            let first = group[0];
            Summary {
                song: first.song.clone(),
                mode: first.mode,
                c_dr: first.c_dr,
                side: first.side,
                n: ok.len(),
                failed: group.len() - ok.len(),
                precision_mean,
                precision_std,
                recall_mean,
                recall_std,
                f1_mean,
                f1_std,
                divergence_mean: (!divs.is_empty()).then(|| mean_std(&divs).0),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.song.as_str(), a.mode.as_str(), a.side)
            .cmp(&(b.song.as_str(), b.mode.as_str(), b.side))
            .then(a.c_dr.total_cmp(&b.c_dr))
    });
    out
}

pub fn write_rows<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>, ExperimentError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<ResultRow>, _>>()?)
}

pub fn write_summaries<W: std::io::Write>(summaries: &[Summary], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    for s in summaries {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Mirroring divergence of `controller` against proxies pushed `scale` away
/// from nominal, one episode per scale and without jitter.
pub fn divergence_by_scale<C: Controller>(
    mut make_controller: impl FnMut() -> C,
    timeline: Arc<SongTimeline>,
    scales: &[f64],
) -> Vec<(f64, u64)> {
    let model = PlantModel::nominal();
    scales
        .iter()
        .map(|&s| {
            let params = proxy_params(&PhysicalParams::nominal(), &model, s, 0.0, 0, 0);
            let mut c = make_controller();
            let out = plant_run(&mut c, timeline.clone(), Mode::JointMirroring, params, Aggregation::Micro);
            (s, out.divergence.unwrap_or(0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ScriptedPlayer;

    #[test]
    fn run_schedule_matches_grid() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.dr_grid.len(), 11);
        let runs: Vec<usize> = cfg.dr_grid.iter().map(|&c| runs_for_intensity(c)).collect();
        assert_eq!(runs, vec![3, 3, 5, 7, 7, 7, 7, 7, 5, 3, 3]);
    }

    #[test]
    fn mean_std_known_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..57).collect();
        for workers in [1, 2, 5] {
            let out = parallel_map(&items, workers, |x| x * x);
            assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
    }

    #[test]
    fn checkpoint_paths_are_distinct() {
        let store = CheckpointStore::new("/tmp/x");
        assert_ne!(store.path("a", 0.5, 0), store.path("a", 0.5, 1));
        assert_ne!(store.path("a", 0.5, 0), store.path("a", 0.0, 0));
        assert_eq!(store.path("songs/a.txt", 0.5, 0), store.path("a", 0.5, 0));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ExperimentConfig { dr_grid: vec![1.5], ..Default::default() };
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config(_))));
        assert!(ExperimentConfig { runs: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn missing_checkpoints_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { songs: vec!["one_key".into()], workers: 1, ..Default::default() };
        let report = run_song_suite(&cfg, &CheckpointStore::new(dir.path())).unwrap();
        assert_eq!(report.missing.len(), 2);
        assert_eq!(report.rows.len(), 2 * (1 + 3));
        assert!(report.rows.iter().all(|r| r.status == CellStatus::MissingCheckpoint));
        let summary = aggregate(&report.rows);
        assert!(summary.iter().all(|s| s.n == 0 && s.failed > 0));
    }

    #[test]
    fn divergence_vanishes_on_nominal_proxy() {
        let tl = Arc::new(fixtures::by_name("c_major_scale").unwrap());
        let d = divergence_by_scale(|| ScriptedPlayer::new(PlantModel::nominal()), tl, &[0.0, 1.0, 2.0]);
        assert_eq!(d[0], (0.0, 0));
        assert!(d[2].1 > 0, "{d:?}");
    }
}
