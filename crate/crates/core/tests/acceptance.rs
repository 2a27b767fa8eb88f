//! Acceptance criteria 1–11, one PASS/FAIL line each.
//!
//! Budgets of the training criteria can be reduced through environment
//! variables (see `Budget::from_env`); `SIM2PIANO_ACCEPT_ONLY=1,4,9` runs a
//! subset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sim2piano::domain_rand::{get_param, param_ids, sample_params, support, DrConfig};
use sim2piano::env::{rollout, Controller, PianoEnv, ScriptedPlayer, SEGMENTS};
use sim2piano::exec_modes::bridge::{serve_stream, BridgePlant, Loopback, TcpTransport};
use sim2piano::exec_modes::plant::{InternalPlant, PlantBackend};
use sim2piano::exec_modes::{run_episode, Forward, Mode, ModeConfig, ModeEpisode};
use sim2piano::experiments::{aggregate, plot, run_dr_sweep, ExperimentConfig, Side};
use sim2piano::keys::{KeySet, NUM_KEYS};
use sim2piano::metrics::{Aggregation, ScoreAccumulator, Scores};
use sim2piano::physics::{PhysicalParams, PlantModel};
use sim2piano::policy::gradcheck::{actor_check, critic_check};
use sim2piano::policy::{train, PolicyController, PolicyNet, TrainTask, TrainerConfig};
use sim2piano::reward::{r_keypress, KeySnapshot, RewardConfig};
use sim2piano::song::fixtures;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed <= limit, format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

fn env_or<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn all_songs() -> Vec<Arc<sim2piano::song::SongTimeline>> {
    std::iter::once("one_key")
        .chain(fixtures::SONGS.iter().map(|(n, _)| *n))
        .map(|n| Arc::new(fixtures::by_name(n).unwrap()))
        .collect()
}

fn snapshot(mu: &[(usize, f64)], pressed: &[usize], targets: &[usize]) -> KeySnapshot {
    let mut m = [0.0; NUM_KEYS];
    for &(k, v) in mu {
        m[k] = v;
    }
    KeySnapshot {
        mu: m,
        pressed: KeySet::from_indices(pressed.iter().copied()),
        targets: KeySet::from_indices(targets.iter().copied()),
    }
}

fn reward_cases() -> Outcome {
    let t = Instant::now();
    let cases = [
        ("targets, none pressed", snapshot(&[], &[], &[10]), 0.0),
        ("wrong pressed, target depth 0", snapshot(&[(11, 1.0)], &[11], &[10]), 0.5),
        ("correct only, target depth 1", snapshot(&[(10, 1.0)], &[10], &[10]), 1.5),
        ("silence, worst wrong depth 0.25", snapshot(&[(3, 0.25)], &[3], &[]), 1.5),
    ];
    for (name, snap, want) in &cases {
        let got = r_keypress(snap);
        check((got - want).abs() <= 1e-12, format!("{name}: {got} != {want}"))?;
    }
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("{} cases", cases.len()))
}

fn case_ordering() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let n_targets = rng.random_range(1..=5);
        let mut targets = KeySet::default();
        while targets.len() < n_targets {
            targets.insert(rng.random_range(0..NUM_KEYS));
        }
        let mut mu = [0.0; NUM_KEYS];
        for k in 0..NUM_KEYS {
            mu[k] = rng.random();
        }
        let correct: Vec<usize> = targets.iter().filter(|_| rng.random_bool(0.5)).collect();
        let mut correct = KeySet::from_indices(correct);
        if correct.is_empty() {
            correct.insert(targets.iter().next().unwrap());
        }
        let wrong = loop {
            let k = rng.random_range(0..NUM_KEYS);
            if !targets.contains(k) {
                break k;
            }
        };
        let only_correct = KeySnapshot { mu, pressed: correct, targets };
        let mut with_wrong = only_correct.clone();
        with_wrong.pressed.insert(wrong);
        let (r3, r2) = (r_keypress(&only_correct), r_keypress(&with_wrong));
        check(r2 > 0.0, format!("wrong-key reward {r2} not positive"))?;
        worst = worst.max(((r3 - r2) - 0.5).abs());
    }
    check(worst <= 1e-12, format!("case gap deviates from 0.5 by {worst:e}"))?;
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("max |gap - 0.5| = {worst:e}"))
}

/// Counts over explicit per-key booleans, independent of the bitset.
fn brute_scores(log: &[(KeySet, KeySet)]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (pressed, targets) in log {
        let (p, g) = (pressed.to_bools(), targets.to_bools());
        for k in 0..NUM_KEYS {
            match (p[k], g[k]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    (precision, recall, f1)
}

fn metric_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let random_set = |rng: &mut ChaCha8Rng| {
        let density = rng.random_range(0.0..0.15);
        KeySet::from_indices((0..NUM_KEYS).filter(|_| rng.random_bool(density)))
    };
    let mut worst = 0.0f64;
    for _ in 0..1_000 {
        let len = rng.random_range(1..200);
        let log: Vec<(KeySet, KeySet)> = (0..len).map(|_| (random_set(&mut rng), random_set(&mut rng))).collect();
        let mut acc = ScoreAccumulator::default();
        for (p, g) in &log {
            acc.push(*p, *g);
        }
        let s = acc.scores(Aggregation::Micro);
        let (p, r, f) = brute_scores(&log);
        worst = worst.max((s.precision - p).abs()).max((s.recall - r).abs()).max((s.f1 - f).abs());
    }
    check(worst <= 1e-12, format!("streaming scores deviate by {worst:e}"))?;
    let f1 = Scores::from_counts(3, 1, 2).f1;
    check((f1 - 2.0 / 3.0).abs() <= 1e-12, format!("f1(3,1,2) = {f1}"))?;
    within(t.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1000 logs, max deviation {worst:e}"))
}

fn observation_contract() -> Outcome {
    let t = Instant::now();
    let model = PlantModel::nominal();
    let expected = [("joints", 12), ("slider", 1), ("pressed", 49), ("intended", 49), ("future", 245)];
    let mut steps = 0;
    for tl in all_songs() {
        let mut env = PianoEnv::new(model.clone(), RewardConfig::default());
        let mut player = ScriptedPlayer::new(model.clone());
        let mut obs = env.reset(tl.clone(), PhysicalParams::nominal(), 0);
        loop {
            check(obs.len() == 356, format!("{}: length {} at step {steps}", tl.name, obs.len()))?;
            let mut offset = 0;
            for (i, (name, len)) in expected.iter().enumerate() {
                check(obs.segment(name).len() == *len, format!("{}: segment {name} has {}", tl.name, obs.segment(name).len()))?;
                check(SEGMENTS[i] == (*name, offset, *len), format!("segment table entry {i} is {:?}", SEGMENTS[i]))?;
                offset += len;
            }
            let res = env.env_step(&player.act(&obs)).map_err(|e| e.to_string())?;
            steps += 1;
            if res.done {
                break;
            }
            obs = res.observation;
        }
    }
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("{steps} steps over 5 songs"))
}

fn determinism() -> Outcome {
    let t = Instant::now();
    let model = PlantModel::nominal();
    let tl = Arc::new(fixtures::by_name("twinkle_twinkle").unwrap());
    let dr = DrConfig::new(0.7, PhysicalParams::nominal(), 21).unwrap();
    let episode = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = PolicyNet::new(64, &mut rng);
        let mut controller = PolicyController::new(&net, false, 17);
        let mut env = PianoEnv::new(model.clone(), RewardConfig::default());
        let params = sample_params(&dr, &model, 4).params;
        let ep = rollout(&mut env, &mut controller, tl.clone(), params, 4);
        let mut bytes = Vec::new();
        ep.write_jsonl(&mut bytes).unwrap();
        let mut player = ScriptedPlayer::new(model.clone());
        let mut plant = InternalPlant::new(model.clone(), sample_params(&dr, &model, 5).params);
        let cfg = ModeConfig { mode: Mode::Hybrid, shadow_params: PhysicalParams::nominal(), forward: Forward::Targets };
        run_episode(&mut player, tl.clone(), &model, RewardConfig::default(), &cfg, &mut plant).write_jsonl(&mut bytes).unwrap();
        bytes
    };
    let (a, b) = (episode(), episode());
    check(!a.is_empty(), "empty log")?;
    check(a == b, "episode logs differ")?;
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{} identical bytes", a.len()))
}

fn run_mode(controller: &mut dyn Controller, tl: &Arc<sim2piano::song::SongTimeline>, mode: Mode, params: &PhysicalParams) -> ModeEpisode {
    let model = PlantModel::nominal();
    let cfg = ModeConfig { mode, shadow_params: params.clone(), forward: Forward::Targets };
    let mut plant = InternalPlant::new(model.clone(), params.clone());
    run_episode(controller, tl.clone(), &model, RewardConfig::default(), &cfg, &mut plant)
}

fn mode_equivalence() -> Outcome {
    let t = Instant::now();
    let model = PlantModel::nominal();
    let dr = DrConfig::new(0.5, PhysicalParams::nominal(), 31).unwrap();
    let mut pressed_steps = 0;
    for seed in 0..5u64 {
        let params = sample_params(&dr, &model, seed).params;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = PolicyNet::new(64, &mut rng);
        for tl in all_songs() {
            let logs: Vec<Vec<KeySet>> = Mode::ALL
                .iter()
                .map(|&mode| {
                    let mut scripted = ScriptedPlayer::new(model.clone());
                    let mut policy = PolicyController::new(&net, true, seed);
                    let mut log = run_mode(&mut scripted, &tl, mode, &params).plant_key_log();
                    log.extend(run_mode(&mut policy, &tl, mode, &params).plant_key_log());
                    log
                })
                .collect();
            for (mode, log) in Mode::ALL.iter().zip(&logs).skip(1) {
                check(*log == logs[0], format!("seed {seed} {}: {} differs from {}", tl.name, mode.as_str(), Mode::ALL[0].as_str()))?;
            }
            pressed_steps += logs[0].iter().filter(|k| !k.is_empty()).count();
        }
    }
    check(pressed_steps > 0, "no key was ever pressed")?;
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!("5 seeds x 5 songs x 2 controllers, {pressed_steps} steps with keys down"))
}

fn bridge_round_trip() -> Outcome {
    let t = Instant::now();
    let model = PlantModel::nominal();
    let params = sim2piano::exec_modes::plant::proxy_params(&PhysicalParams::nominal(), &model, 1.0, 0.02, 7, 0);
    let tl = Arc::new(fixtures::by_name("c_major_scale").unwrap());
    let cfg = ModeConfig { mode: Mode::Hybrid, shadow_params: PhysicalParams::nominal(), forward: Forward::Targets };
    let episode = |plant: &mut dyn PlantBackend| {
        let mut player = ScriptedPlayer::new(model.clone());
        let ep = run_episode(&mut player, tl.clone(), &model, RewardConfig::default(), &cfg, plant);
        (ep.plant.scores(Aggregation::Micro), ep.sim.as_ref().map(|s| s.scores(Aggregation::Micro)), ep.plant_key_log(), ep.aborted)
    };
    let direct = episode(&mut InternalPlant::new(model.clone(), params.clone()));
    check(direct.3.is_none(), "direct episode aborted")?;
    let looped = episode(&mut BridgePlant::new(Loopback::new(InternalPlant::new(model.clone(), params.clone()))));
    check(looped == direct, format!("loopback {:?} != direct {:?}", looped.0, direct.0))?;

    let listener = std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let server_params = params.clone();
    let server = std::thread::spawn(move || {
        let (stream, _) = listener.accept().expect("connection");
        serve_stream(&mut InternalPlant::new(PlantModel::nominal(), server_params), stream)
    });
    let mut bridge = BridgePlant::new(TcpTransport::connect(addr).map_err(|e| e.to_string())?);
    bridge.deadline = Duration::from_secs(5);
    let tcp = episode(&mut bridge);
    drop(bridge);
    let _ = server.join();
    check(tcp == direct, format!("tcp {:?} != direct {:?}", tcp.0, direct.0))?;
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!("plant f1 {:.4} over direct, loopback and tcp", direct.0.f1))
}

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..3 {
        for r in [actor_check(seed, 32, 8, 300, 1e-5), critic_check(100 + seed, 32, 8, 300, 1e-5)] {
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
        }
    }
    check(worst <= 1e-4, format!("max relative error {worst:e}"))?;
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok(format!("{checked} parameters, max relative error {worst:e}"))
}

/// Budgets of the training criteria.
struct Budget {
    one_key_steps: u64,
    scale_steps: u64,
    sweep_steps: u64,
    sweep_runs: usize,
    sweep_song: String,
}

impl Budget {
    fn from_env() -> Self {
        let desk = ExperimentConfig::default();
        Budget {
            one_key_steps: env_or("SIM2PIANO_ACCEPT_ONE_KEY_STEPS", 200_000),
            scale_steps: env_or("SIM2PIANO_ACCEPT_SCALE_STEPS", desk.train_steps),
            sweep_steps: env_or("SIM2PIANO_ACCEPT_SWEEP_STEPS", 10_000),
            sweep_runs: env_or("SIM2PIANO_ACCEPT_SWEEP_RUNS", 3),
            sweep_song: std::env::var("SIM2PIANO_ACCEPT_SWEEP_SONG").unwrap_or_else(|_| "one_key".into()),
        }
    }
}

fn out_dir() -> PathBuf {
    let dir = std::env::var("SIM2PIANO_ACCEPT_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    std::fs::create_dir_all(&dir).expect("output directory");
    dir
}

fn train_to(song: &str, steps: u64, target: f64) -> Result<Scores, String> {
    let task = TrainTask {
        timeline: Arc::new(fixtures::by_name(song).unwrap()),
        model: PlantModel::nominal(),
        reward: RewardConfig::default(),
        dr: DrConfig::new(0.0, PhysicalParams::nominal(), 0).unwrap(),
    };
    let cfg = TrainerConfig { target_eval_f1: Some(target), ..TrainerConfig::desk() };
    let mut curve = std::fs::File::create(out_dir().join(format!("{song}_curve.csv"))).map_err(|e| e.to_string())?;
    let out = train(&task, &cfg, steps, Some(&mut curve)).map_err(|e| e.to_string())?;
    eprintln!("  {song}: best f1 {:.3} after {} steps", out.best_eval.f1, out.steps);
    Ok(out.best_eval)
}

fn training_smoke(budget: &Budget) -> Outcome {
    let t = Instant::now();
    let one_key = train_to("one_key", budget.one_key_steps, 0.9)?;
    let scale = train_to("c_major_scale", budget.scale_steps, 0.5)?;
    let summary = format!("one_key f1 {:.3}, c_major_scale f1 {:.3}", one_key.f1, scale.f1);
    check(one_key.f1 >= 0.9, format!("{summary}; one_key below 0.9"))?;
    check(scale.f1 >= 0.5, format!("{summary}; c_major_scale below 0.5"))?;
    within(t.elapsed(), Duration::from_secs(30 * 60)).map_err(|e| format!("{summary}; {e}"))?;
    Ok(summary)
}

fn dr_trend(budget: &Budget) -> Outcome {
    let cfg = ExperimentConfig {
        dr_song: budget.sweep_song.clone(),
        dr_grid: vec![0.0, 1.0],
        dr_runs: Some(budget.sweep_runs),
        train_steps: budget.sweep_steps,
        ..ExperimentConfig::default()
    };
    let report = run_dr_sweep(&cfg, None).map_err(|e| e.to_string())?;
    let summaries = aggregate(&report.rows);
    let dir = out_dir();
    sim2piano::experiments::write_rows(&report.rows, std::fs::File::create(dir.join("dr_sweep.csv")).unwrap()).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("dr_sweep.svg"), plot::f1_by_intensity("F1 by DR intensity", &summaries)).map_err(|e| e.to_string())?;
    let sim_mean = |c: f64| {
        summaries.iter().find(|s| s.side == Side::Sim && s.c_dr == c).map(|s| s.f1_mean).ok_or(format!("no sim rows at c_dr={c}"))
    };
    let (at0, at1) = (sim_mean(0.0)?, sim_mean(1.0)?);
    let plant: Vec<String> =
        summaries.iter().filter(|s| s.side == Side::Plant).map(|s| format!("{:.1}:{:.3}", s.c_dr, s.f1_mean)).collect();
    let summary = format!("sim f1 {at0:.3} at c_dr 0, {at1:.3} at c_dr 1; plant {}", plant.join(" "));
    check(at0 - at1 >= 0.05, format!("{summary}; drop below 0.05"))?;
    Ok(summary)
}

fn dr_sampler() -> Outcome {
    let t = Instant::now();
    let model = PlantModel::nominal();
    let nominal = PhysicalParams::nominal();
    for seed in 0..5 {
        let cfg = DrConfig::new(0.0, nominal.clone(), seed).unwrap();
        for ep in 0..200 {
            check(sample_params(&cfg, &model, ep).params == nominal, format!("c_dr 0 seed {seed} episode {ep} not nominal"))?;
        }
    }
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    for (i, &a) in grid.iter().enumerate() {
        let cfg = DrConfig::new(a, nominal.clone(), 41).unwrap();
        let wider: Vec<_> = param_ids().into_iter().map(|id| grid[i..].iter().map(|&b| support(&cfg, id, b)).collect::<Vec<_>>()).collect();
        for ep in 0..10_000 {
            let p = sample_params(&cfg, &model, ep).params;
            for (id, supports) in param_ids().into_iter().zip(&wider) {
                let v = get_param(&p, id);
                for (s, b) in supports.iter().zip(&grid[i..]) {
                    if !(s.lo <= v && v <= s.hi) {
                        return Err(format!("{id:?} = {v} drawn at {a} outside support at {b}"));
                    }
                }
            }
        }
    }
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{} parameters, 11 x 10^4 samples", param_ids().len()))
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("SIM2PIANO_ACCEPT_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let budget = Budget::from_env();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "reward case table", Box::new(reward_cases)),
        (2, "case ordering", Box::new(case_ordering)),
        (3, "metric oracle", Box::new(metric_oracle)),
        (4, "observation contract", Box::new(observation_contract)),
        (5, "determinism", Box::new(determinism)),
        (6, "mode equivalence", Box::new(mode_equivalence)),
        (7, "bridge round trip", Box::new(bridge_round_trip)),
        (8, "gradient checks", Box::new(gradient_checks)),
        (9, "training smoke", Box::new(|| training_smoke(&budget))),
        (10, "dr trend shape", Box::new(|| dr_trend(&budget))),
        (11, "dr sampler", Box::new(dr_sampler)),
    ];
    let mut failed = 0;
    for (n, name, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}; {secs:.1}s)"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({why}; {secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
