use crate::config::RunConfig;
use crate::error::CliError;
use crate::{Command, Common, ConvertArgs, EvalArgs, GridArgs, PlantArgs, RolloutArgs, ScoreArgs, ServeArgs, SweepArgs, TrainArgs};
use serde::Deserialize;
use sim2piano::env::{rollout, Controller, PianoEnv, ScriptedPlayer};
use sim2piano::exec_modes::bridge::{serve_stream, BridgePlant, TcpTransport};
use sim2piano::exec_modes::plant::{InternalPlant, PlantBackend};
use sim2piano::exec_modes::{Mode, ModeEpisode};
use sim2piano::experiments::{
    aggregate, plot, plant_run_on, proxy_for, resolve_song, run_dr_sweep, run_mode_ablation, run_song_suite, sim_scores,
    train_checkpoints, write_rows, write_summaries, Cell, CellStatus, CheckpointStore, ExperimentConfig, Report, Side, Summary,
};
use sim2piano::keys::KeySet;
use sim2piano::metrics::{Aggregation, ScoreAccumulator, Scores};
use sim2piano::physics::{PhysicalParams, PlantModel};
use sim2piano::policy::{load_checkpoint, save_checkpoint, train, Checkpoint, PolicyController, TrainError, TrainTask, TrainerConfig};
use sim2piano::song::{load_events, parse_midi, render_song_text, write_midi, SongTimeline};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Rollout(a) => rollout_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::ConvertSong(a) => convert_cmd(a),
        Command::Suite(a) => grid_cmd(a, false),
        Command::CompareModes(a) => grid_cmd(a, true),
        Command::DrSweep(a) => sweep_cmd(a),
        Command::ServePlant(a) => serve_cmd(a),
    }
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn apply_plant(cfg: &mut RunConfig, args: &PlantArgs) {
    if let Some(v) = args.proxy_scale {
        cfg.plant.proxy_scale = v;
    }
    if let Some(v) = args.proxy_jitter {
        cfg.plant.proxy_jitter = v;
    }
    if let Some(v) = &args.bridge {
        cfg.plant.bridge = Some(v.clone());
    }
    if let Some(v) = args.deadline_ms {
        cfg.plant.deadline_ms = v;
    }
}

fn song(name: &str) -> Result<Arc<SongTimeline>, CliError> {
    Ok(Arc::new(resolve_song(name)?))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = File::create(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

/// The plant for execution `run`: the bridge when configured, else the proxy.
fn plant_for(cfg: &RunConfig, exp: &ExperimentConfig, run: usize) -> Result<Box<dyn PlantBackend>, CliError> {
    match &cfg.plant.bridge {
        Some(addr) => {
            let mut plant = BridgePlant::new(TcpTransport::connect(addr.as_str())?);
            plant.deadline = Duration::from_millis(cfg.plant.deadline_ms);
            Ok(Box::new(plant))
        }
        None => Ok(Box::new(InternalPlant::new(PlantModel::nominal(), proxy_for(exp, cfg.seed, run)))),
    }
}

fn train_cmd(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load(&args.common)?;
    if let Some(c) = args.cdr {
        cfg.dr.c_dr = c;
    }
    cfg.validate()?;
    let steps = args.steps.unwrap_or(cfg.experiment.train_steps);
    let trainer = TrainerConfig { seed: cfg.seed, target_eval_f1: args.target_f1.or(cfg.trainer.target_eval_f1), ..cfg.trainer.clone() };
    let task = TrainTask { timeline: song(&args.song)?, model: PlantModel::nominal(), reward: cfg.reward, dr: cfg.dr_config()? };
    let mut curve = args.curve.as_deref().map(create).transpose()?;
    let result = train(&task, &trainer, steps, curve.as_mut().map(|w| w as &mut dyn Write));
    if let Some(w) = curve.as_mut() {
        w.flush()?;
    }
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::Diverged { step, what, last_good }) => {
            save_checkpoint(&last_good, &args.out)?;
            return Err(TrainError::Diverged { step, what, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&outcome.best, &args.out)?;
    if let Some(p) = &args.last {
        save_checkpoint(&outcome.last, p)?;
    }
    println!(
        "steps={} episodes={} best_step={} best_precision={:?} best_recall={:?} best_f1={:?} stopped_early={} config_hash={}",
        outcome.steps,
        outcome.episodes,
        outcome.best.step,
        outcome.best_eval.precision,
        outcome.best_eval.recall,
        outcome.best_eval.f1,
        outcome.stopped_early,
        outcome.best.config_hash
    );
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = load(&args.common)?;
    apply_plant(&mut cfg, &args.plant);
    if let Some(a) = args.aggregation {
        cfg.experiment.aggregation = a;
    }
    if args.runs == 0 {
        return Err(CliError::Usage("--runs must be positive".into()));
    }
    cfg.validate()?;
    let exp = ExperimentConfig { runs: args.runs, mode: args.mode, ..cfg.experiment() };
    let ckpt = load_checkpoint(&args.ckpt)?;
    let tl = song(&args.song)?;
    let cell = |side, run| Cell { song: tl.name.clone(), mode: args.mode, c_dr: cfg.dr.c_dr, seed: cfg.seed, run, side };
    let mut rows = Vec::new();
    match sim_scores(&ckpt, tl.clone(), exp.aggregation) {
        Some(s) => rows.push(cell(Side::Sim, 0).row(&exp, s, None, CellStatus::Ok)),
        None => return Err(CliError::Numerical("policy produced a non-finite action in simulation".into())),
    }
    for run in 0..args.runs {
        let mut plant = plant_for(&cfg, &exp, run)?;
        let mut controller = PolicyController::from_actor(&ckpt.actor, true, 0);
        let (out, _) = plant_run_on(&mut controller, tl.clone(), args.mode, plant.as_mut(), exp.aggregation);
        if let Some(e) = controller.fault {
            return Err(e.into());
        }
        if let Some(e) = out.aborted.clone() {
            return Err(e.into());
        }
        rows.push(cell(Side::Plant, run).row(&exp, out.scores, out.divergence, out.status()));
    }
    match &args.out {
        Some(p) => write_rows(&rows, create(p)?)?,
        None => write_rows(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn write_mode_log(ep: &ModeEpisode, out: &Path) -> Result<(), CliError> {
    let mut w = create(out)?;
    ep.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn print_scores(s: &Scores, steps: usize) {
    println!("precision={:?} recall={:?} f1={:?} steps={steps}", s.precision, s.recall, s.f1);
}

fn rollout_cmd(args: RolloutArgs) -> Result<(), CliError> {
    let mut cfg = load(&args.common)?;
    apply_plant(&mut cfg, &args.plant);
    cfg.validate()?;
    let tl = song(&args.song)?;
    let ckpt: Option<Checkpoint> = args.ckpt.as_deref().map(load_checkpoint).transpose()?;
    let mut scripted = ScriptedPlayer::new(PlantModel::nominal());
    let mut policy = ckpt.as_ref().map(|c| PolicyController::from_actor(&c.actor, !args.stochastic, cfg.seed));
    let controller: &mut dyn Controller = match policy.as_mut() {
        Some(p) => p,
        None => &mut scripted,
    };
    let agg = cfg.experiment.aggregation;
    match args.mode {
        Some(mode) => {
            let exp = cfg.experiment();
            let mut plant = plant_for(&cfg, &exp, 0)?;
            let (out, ep) = plant_run_on(controller, tl, mode, plant.as_mut(), agg);
            write_mode_log(&ep, &args.out)?;
            if let Some(e) = out.aborted {
                return Err(e.into());
            }
            print_scores(&out.scores, ep.log.len());
        }
        None => {
            let mut env = PianoEnv::new(PlantModel::nominal(), cfg.reward);
            let ep = rollout(&mut env, controller, tl, PhysicalParams::nominal(), cfg.seed);
            let mut w = create(&args.out)?;
            ep.write_jsonl(&mut w)?;
            w.flush()?;
            if let Some(f) = ep.fault {
                return Err(CliError::Numerical(f));
            }
            print_scores(&ep.scores(agg), ep.log.len());
        }
    }
    if let Some(e) = policy.and_then(|p| p.fault) {
        return Err(e.into());
    }
    Ok(())
}

/// The fields of a log line that scoring needs; both log formats carry them.
#[derive(Deserialize)]
struct ScoredStep {
    pressed: KeySet,
    targets: KeySet,
}

/// Scores a JSON-lines episode log.
pub fn score_log<R: BufRead>(input: R, agg: Aggregation) -> Result<(Scores, usize), CliError> {
    let mut acc = ScoreAccumulator::default();
    let mut steps = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let step: ScoredStep = serde_json::from_str(&line).map_err(|e| CliError::Config(format!("log line {}: {e}", i + 1)))?;
        acc.push(step.pressed, step.targets);
        steps += 1;
    }
    Ok((acc.scores(agg), steps))
}

fn score_cmd(args: ScoreArgs) -> Result<(), CliError> {
    let f = File::open(&args.log).map_err(|e| CliError::Config(format!("{}: {e}", args.log.display())))?;
    let (s, steps) = score_log(BufReader::new(f), args.aggregation)?;
    print_scores(&s, steps);
    Ok(())
}

fn is_midi(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

fn convert_cmd(args: ConvertArgs) -> Result<(), CliError> {
    let events = if is_midi(&args.input) {
        let bytes = std::fs::read(&args.input).map_err(|e| CliError::Config(format!("{}: {e}", args.input.display())))?;
        let import = parse_midi(&bytes)?;
        if import.dropped_out_of_range > 0 || import.unmatched_note_ons > 0 {
            log::warn!(
                "{} notes outside the keyboard dropped, {} unterminated notes closed",
                import.dropped_out_of_range,
                import.unmatched_note_ons
            );
        }
        import.events
    } else {
        load_events(&args.input)?
    };
    let mut w = create(&args.output)?;
    if is_midi(&args.output) {
        w.write_all(&write_midi(&events)?)?;
    } else {
        w.write_all(render_song_text(&events)?.as_bytes())?;
    }
    w.flush()?;
    println!("events={}", events.len());
    Ok(())
}

fn apply_grid(cfg: &mut RunConfig, songs: &Option<Vec<String>>, seeds: &Option<Vec<u64>>, runs: Option<usize>, steps: Option<u64>) {
    if let Some(s) = songs {
        cfg.experiment.songs = s.clone();
    }
    if let Some(s) = seeds {
        cfg.experiment.seeds = s.clone();
    }
    if let Some(r) = runs {
        cfg.experiment.runs = r;
    }
    if let Some(s) = steps {
        cfg.experiment.train_steps = s;
    }
}

fn emit(report: &Report, out_dir: &Path, name: &str, svg: impl Fn(&[Summary]) -> String) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)?;
    let summaries = aggregate(&report.rows);
    write_rows(&report.rows, create(&out_dir.join(format!("{name}.csv")))?)?;
    write_summaries(&summaries, create(&out_dir.join(format!("{name}_summary.csv")))?)?;
    std::fs::write(out_dir.join(format!("{name}.svg")), svg(&summaries))?;
    for path in &report.missing {
        eprintln!("missing checkpoint: {}", path.display());
    }
    for s in &summaries {
        println!(
            "song={} mode={} c_dr={:.2} side={} n={} failed={} f1_mean={:.4} f1_std={:.4}",
            s.song, s.mode, s.c_dr, s.side, s.n, s.failed, s.f1_mean, s.f1_std
        );
    }
    Ok(())
}

fn train_grid(exp: &ExperimentConfig, c_drs: &[f64], store: &CheckpointStore) -> Result<(), CliError> {
    for &c in c_drs {
        for m in train_checkpoints(exp, c, store)? {
            if let Err(e) = m.result {
                log::warn!("training {} c_dr={c:.2} seed={} failed: {e}", m.song, m.seed);
            }
        }
    }
    Ok(())
}

fn grid_cmd(args: GridArgs, ablation: bool) -> Result<(), CliError> {
    let mut cfg = load(&args.common)?;
    apply_plant(&mut cfg, &args.plant);
    apply_grid(&mut cfg, &args.songs, &args.seeds, args.runs, args.steps);
    cfg.validate()?;
    let exp = cfg.experiment();
    let store = CheckpointStore::new(&args.ckpt_dir);
    if args.train {
        let mut c_drs = vec![exp.suite_c_dr];
        if ablation && exp.ablation_modes.contains(&Mode::RealWorld) && exp.real_world_c_dr != exp.suite_c_dr {
            c_drs.push(exp.real_world_c_dr);
        }
        train_grid(&exp, &c_drs, &store)?;
    }
    if ablation {
        let report = run_mode_ablation(&exp, &store)?;
        emit(&report, &args.out_dir, "mode_ablation", |s| plot::f1_bars("F1 by execution mode", s))
    } else {
        let report = run_song_suite(&exp, &store)?;
        emit(&report, &args.out_dir, "song_suite", |s| plot::f1_bars("F1 per song", s))
    }
}

fn sweep_cmd(args: SweepArgs) -> Result<(), CliError> {
    let mut cfg = load(&args.common)?;
    apply_plant(&mut cfg, &args.plant);
    if let Some(s) = &args.song {
        cfg.experiment.dr_song = s.clone();
    }
    if let Some(g) = &args.grid {
        cfg.experiment.dr_grid = g.clone();
    }
    if args.runs.is_some() {
        cfg.experiment.dr_runs = args.runs;
    }
    if let Some(s) = args.steps {
        cfg.experiment.train_steps = s;
    }
    cfg.experiment.seeds = vec![cfg.seed];
    cfg.validate()?;
    let exp = cfg.experiment();
    let store = args.ckpt_dir.as_ref().map(CheckpointStore::new);
    let report = run_dr_sweep(&exp, store.as_ref())?;
    emit(&report, &args.out_dir, "dr_sweep", |s| plot::f1_by_intensity("F1 against DR intensity", s))
}

fn serve_cmd(args: ServeArgs) -> Result<(), CliError> {
    let mut cfg = load(&args.common)?;
    apply_plant(&mut cfg, &args.plant);
    cfg.validate()?;
    let exp = cfg.experiment();
    let listener = TcpListener::bind(&args.listen).map_err(|e| CliError::Plant(format!("bind {}: {e}", args.listen)))?;
    eprintln!("listening on {}", listener.local_addr()?);
    for (run, stream) in listener.incoming().enumerate() {
        let stream = stream.map_err(|e| CliError::Plant(e.to_string()))?;
        let mut plant = InternalPlant::new(PlantModel::nominal(), proxy_for(&exp, cfg.seed, run));
        if let Err(e) = serve_stream(&mut plant, stream) {
            log::warn!("connection ended: {e}");
        }
        if args.once {
            break;
        }
    }
    Ok(())
}
