//! Command-line entry point.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{Overrides, RunConfig};
use crate::distill::{fit_ensemble, fuse_targets, DistillConfig, DistillList, FusionConfig, TreeEnsemble};
use crate::featurize::{Corpus, FeaturizedPool, FEATURE_DIM, LIST_FEATURE_DIM};
use crate::feedback::{ingest_events, write_events, EventRecord, Ingested};
use crate::orchestrator::{
    run_experiment, ModelRegistry, ModelVersion, Mode, Orchestrator, TurnData,
};
use crate::policy::PlPolicy;
use crate::ppo::align;
use crate::report::{write_csv, Report};
use crate::scorers::{Arch, RewardModel, ScorerModel};
use crate::seed::{derive_indexed, rng_for};
use crate::simulator::{evaluate, gen_corpus, OracleRanker, Ranker, StaticRanker, World};
use crate::trainers::{sgd_fit, BradleyTerry, ListNet, Pointwise, TrainConfig};

type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

#[derive(Debug, Parser)]
#[command(name = "dma", version, about = "Feedback-driven reranking pipeline", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration; flags win over the file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for relative output paths.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Stage {
    Pointwise,
    Listwise,
    Reward,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Play simulated sessions and write the event stream.
    Simulate {
        #[arg(long)]
        corpus: PathBuf,
        /// Generate the corpus from the config and seed, writing it to --corpus.
        #[arg(long)]
        gen_corpus: bool,
        #[arg(long)]
        sessions: Option<u64>,
        #[arg(long)]
        turns: Option<u64>,
        /// `static`, `oracle` or a path to an ensemble JSON file.
        #[arg(long, default_value = "static")]
        ranker: String,
        #[arg(long)]
        out: PathBuf,
        /// Per-session metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit one teacher on an event stream.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Warm start from this model.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Per-epoch loss CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// PPO-align a list policy against a reward model.
    Align {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        reward: PathBuf,
        #[arg(long)]
        rounds: usize,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-round diagnostics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Distill fused teacher scores into a tree ensemble.
    Distill {
        #[arg(long)]
        pointwise: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        trees: Option<usize>,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-round training loss CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Replay an event stream through the nearline loop into a registry.
    RunNearline {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        /// Per-cycle CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run paired simulation arms and write a JSON report.
    Experiment {
        #[arg(long, value_parser = parse_mode)]
        mode: Mode,
        #[arg(long)]
        sessions: Option<u64>,
        #[arg(long)]
        turns: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Offline metrics of the turns in an event stream.
    Eval {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Satisfaction threshold; defaults to the configured one.
        #[arg(long)]
        threshold: Option<f64>,
        /// Per-session metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Time `score_list` on one candidate list. Timings are not reproducible.
    BenchLatency {
        /// Ensemble to time; without it a synthetic ensemble of --trees trees is used.
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        trees: usize,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value_t = 100)]
        list_size: usize,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn load_config(common: &Common, sessions: Option<u64>, turns: Option<u64>) -> CliResult<RunConfig> {
    let overrides = Overrides {
        seed: common.seed,
        out_dir: common.out_dir.clone(),
        sessions,
        turns_per_session: turns,
    };
    Ok(RunConfig::load(common.config.as_deref(), &overrides)?)
}

fn read_corpus(path: &Path) -> CliResult<Corpus> {
    let f = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Corpus::read_jsonl(BufReader::new(f))?)
}

fn read_events(path: &Path) -> CliResult<Ingested> {
    let f = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let ing = ingest_events(BufReader::new(f))?;
    if ing.skipped > 0 {
        log::warn!("{} malformed event lines skipped", ing.skipped);
    }
    Ok(ing)
}

/// Featurized turns of a stream, in session then turn order.
fn turn_data(ing: &Ingested, corpus: &Corpus, min_confidence: f64) -> CliResult<Vec<TurnData>> {
    let mut out = Vec::new();
    for t in ing.turns() {
        out.push(TurnData::from_ingested(t, ing, corpus, min_confidence)?);
    }
    Ok(out)
}

fn ensure_parent(path: &Path) -> CliResult {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p)?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SessionRow {
    session: u64,
    turns: usize,
    ndcg: f64,
    mean_utility: f64,
    satisfaction: f64,
}

const SESSION_HEADER: [&str; 5] = ["session", "turns", "ndcg", "mean_utility", "satisfaction"];

fn simulate(
    corpus_path: &Path,
    gen: bool,
    ranker: &str,
    out: &Path,
    metrics: Option<&Path>,
    cfg: &RunConfig,
) -> CliResult {
    let corpus_path = cfg.output_path(corpus_path);
    let corpus = if gen {
        let c = gen_corpus(&cfg.corpus, derive_indexed(cfg.seed, "corpus", 0, 0))?;
        ensure_parent(&corpus_path)?;
        let mut w = BufWriter::new(fs::File::create(&corpus_path)?);
        c.write_jsonl(&mut w)?;
        c
    } else {
        read_corpus(&corpus_path)?
    };
    let ranker: Box<dyn Ranker> = match ranker {
        "static" => Box::new(StaticRanker),
        "oracle" => Box::new(OracleRanker),
        path => Box::new(TreeEnsemble::load(Path::new(path))?),
    };
    let world = World::new(corpus, cfg.sim, cfg.seed)?;
    let outcomes = world.run(cfg.sessions, cfg.turns_per_session, ranker.as_ref())?;
    let mut records = Vec::new();
    for o in &outcomes {
        records.push(EventRecord::turn(o.session, &o.turn));
        records.extend(o.docs.iter().map(EventRecord::from));
        records.extend(o.lists.iter().map(EventRecord::from));
        records.push(EventRecord::from(&o.pref));
    }
    let out = cfg.output_path(out);
    ensure_parent(&out)?;
    let mut w = BufWriter::new(fs::File::create(&out)?);
    write_events(&mut w, &records)?;
    if let Some(m) = metrics {
        let mut rows = Vec::new();
        for chunk in outcomes.chunk_by(|a, b| a.session == b.session) {
            let e = evaluate(chunk.iter().map(|o| &o.turn), cfg.sim.served, cfg.sim.satisfaction_threshold);
            rows.push(SessionRow {
                session: chunk[0].session,
                turns: e.turns,
                ndcg: e.ndcg,
                mean_utility: e.mean_utility,
                satisfaction: e.satisfaction,
            });
        }
        write_csv(&cfg.output_path(m), &SESSION_HEADER, &rows)?;
    }
    Ok(())
}

fn train(
    stage: Stage,
    events: &Path,
    corpus: &Path,
    out: &Path,
    init: Option<&Path>,
    metrics: Option<&Path>,
    tc: TrainConfig,
    cfg: &RunConfig,
) -> CliResult {
    let ing = read_events(events)?;
    let data = turn_data(&ing, &read_corpus(corpus)?, cfg.cycle.min_confidence)?;
    let (label, dim) = match stage {
        Stage::Pointwise => ("train-pointwise", FEATURE_DIM),
        Stage::Listwise => ("train-listwise", FEATURE_DIM),
        Stage::Reward => ("train-reward", LIST_FEATURE_DIM),
    };
    let model = match init {
        Some(p) => ScorerModel::load(p)?,
        None => ScorerModel::random(Arch::Linear, dim, &mut rng_for(cfg.seed, label)),
    };
    let fit = match stage {
        Stage::Pointwise => {
            let ex: Vec<_> = data.iter().flat_map(|t| t.docs.iter().cloned()).collect();
            sgd_fit(model, &Pointwise, &ex, &tc)?
        }
        Stage::Listwise => {
            let ex: Vec<_> = data.iter().flat_map(|t| t.lists.iter().cloned()).collect();
            sgd_fit(model, &ListNet, &ex, &tc)?
        }
        Stage::Reward => {
            let ex: Vec<_> = data.iter().flat_map(|t| t.prefs.iter().cloned()).collect();
            sgd_fit(model, &BradleyTerry, &ex, &tc)?
        }
    };
    let out = cfg.output_path(out);
    ensure_parent(&out)?;
    fit.model.save(&out)?;
    if let Some(m) = metrics {
        let rows: Vec<(usize, f64)> = fit.losses.iter().copied().enumerate().collect();
        write_csv(&cfg.output_path(m), &["epoch", "loss"], &rows)?;
    }
    Ok(())
}

fn pools_of(data: &[TurnData]) -> Vec<FeaturizedPool> {
    data.iter().map(|t| t.pool.clone()).collect()
}

fn align_cmd(policy: &Path, reward: &Path, rounds: usize, events: &Path, corpus: &Path, out: &Path, metrics: Option<&Path>, cfg: &RunConfig) -> CliResult {
    let data = turn_data(&read_events(events)?, &read_corpus(corpus)?, cfg.cycle.min_confidence)?;
    let pools = pools_of(&data);
    let pl = PlPolicy::new(ScorerModel::load(policy)?, cfg.sim.served)?;
    let rm = RewardModel::new(ScorerModel::load(reward)?)?;
    let mut rng = rng_for(cfg.seed, "align");
    let (aligned, diags) = align(&pl, &rm, &pools, &cfg.cycle.ppo, rounds, &mut rng)?;
    let out = cfg.output_path(out);
    ensure_parent(&out)?;
    aligned.model.save(&out)?;
    if let Some(m) = metrics {
        let rows: Vec<_> = diags
            .iter()
            .enumerate()
            .map(|(i, d)| (i, d.mean_reward, d.kl, d.clip_fraction, d.mean_ratio))
            .collect();
        write_csv(&cfg.output_path(m), &["round", "mean_reward", "kl", "clip_fraction", "mean_ratio"], &rows)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn distill_cmd(
    pointwise: &Path,
    policy: &Path,
    alpha: f64,
    trees: Option<usize>,
    events: &Path,
    corpus: &Path,
    out: &Path,
    metrics: Option<&Path>,
    cfg: &RunConfig,
) -> CliResult {
    let data = turn_data(&read_events(events)?, &read_corpus(corpus)?, cfg.cycle.min_confidence)?;
    let pw = ScorerModel::load(pointwise)?;
    let lw = ScorerModel::load(policy)?;
    let fc = FusionConfig::new(alpha)?;
    let mut lists = Vec::with_capacity(data.len());
    for t in &data {
        let a = pw.forward_batch(&t.pool.features)?;
        let b = lw.forward_batch(&t.pool.features)?;
        lists.push(DistillList {
            features: t.pool.features.clone(),
            targets: a.iter().zip(&b).map(|(&x, &y)| fuse_targets(x, y, &fc)).collect(),
        });
    }
    let dc = DistillConfig {
        trees: trees.unwrap_or(cfg.cycle.distill.trees),
        ..cfg.cycle.distill
    };
    let fit = fit_ensemble(&lists, &dc)?;
    let out = cfg.output_path(out);
    ensure_parent(&out)?;
    fit.ensemble.save(&out)?;
    if let Some(m) = metrics {
        let rows: Vec<(usize, f64)> = fit.losses.iter().copied().enumerate().collect();
        write_csv(&cfg.output_path(m), &["round", "loss"], &rows)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CycleRow {
    cycle: usize,
    turn: usize,
    fired: usize,
    candidate: Option<u32>,
    promoted: Option<bool>,
    candidate_ndcg: Option<f64>,
    live_ndcg: Option<f64>,
    live_version: u32,
    error: Option<String>,
}

fn run_nearline(events: &Path, corpus: &Path, registry: &Path, metrics: Option<&Path>, cfg: &RunConfig) -> CliResult {
    let data = turn_data(&read_events(events)?, &read_corpus(corpus)?, cfg.cycle.min_confidence)?;
    let reg = ModelRegistry::open(&cfg.output_path(registry), ModelVersion::bootstrap(cfg.seed))?;
    let mut orch = Orchestrator::new(cfg.cycle, reg, cfg.seed)?;
    let mut rows = Vec::new();
    for t in data {
        if let Some(rec) = orch.observe(t)? {
            rows.push(CycleRow {
                cycle: rec.cycle,
                turn: rec.turn,
                fired: rec.fired,
                candidate: rec.candidate,
                promoted: rec.decision.as_ref().map(|d| d.promote),
                candidate_ndcg: rec.decision.as_ref().map(|d| d.candidate_ndcg),
                live_ndcg: rec.decision.as_ref().map(|d| d.live_ndcg),
                live_version: orch.registry.live_version(),
                error: rec.error,
            });
        }
    }
    if let Some(m) = metrics {
        write_csv(
            &cfg.output_path(m),
            &["cycle", "turn", "fired", "candidate", "promoted", "candidate_ndcg", "live_ndcg", "live_version", "error"],
            &rows,
        )?;
    }
    println!("{} cycles, live version v{}", rows.len(), orch.registry.live_version());
    Ok(())
}

fn eval_cmd(events: &Path, out: &Path, threshold: Option<f64>, metrics: Option<&Path>, cfg: &RunConfig) -> CliResult {
    let ing = read_events(events)?;
    let th = threshold.unwrap_or(cfg.sim.satisfaction_threshold);
    let m = cfg.sim.served;
    let overall = evaluate(ing.turns(), m, th);
    let out = cfg.output_path(out);
    Report::new("eval", cfg, &[events], &overall)?.write(&out)?;
    if let Some(p) = metrics {
        let rows: Vec<SessionRow> = ing
            .sessions
            .iter()
            .map(|s| {
                let e = evaluate(&s.turns, m, th);
                SessionRow {
                    session: s.session,
                    turns: e.turns,
                    ndcg: e.ndcg,
                    mean_utility: e.mean_utility,
                    satisfaction: e.satisfaction,
                }
            })
            .collect();
        write_csv(&cfg.output_path(p), &SESSION_HEADER, &rows)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Latency {
    trees: usize,
    max_depth: usize,
    list_size: usize,
    iters: usize,
    median_ms: f64,
    p90_ms: f64,
    mean_ms: f64,
}

fn bench(ensemble: Option<&Path>, trees: usize, depth: usize, list_size: usize, iters: usize, out: Option<&Path>, cfg: &RunConfig) -> CliResult {
    use rand::Rng;
    let mut rng = rng_for(cfg.seed, "bench-latency");
    let e = match ensemble {
        Some(p) => TreeEnsemble::load(p)?,
        None => TreeEnsemble::synthetic(trees, depth, &mut rng),
    };
    let list: Vec<Vec<f64>> = (0..list_size)
        .map(|_| (0..e.n_features).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters.max(1) {
        let t = Instant::now();
        std::hint::black_box(e.score_list(&list)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let r = Latency {
        trees: e.trees.len(),
        max_depth: e.max_depth,
        list_size,
        iters: times.len(),
        median_ms: times[times.len() / 2],
        p90_ms: times[times.len() * 9 / 10],
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
    };
    println!("{}", serde_json::to_string(&r)?);
    if let Some(o) = out {
        let inputs: Vec<&Path> = ensemble.into_iter().collect();
        Report::new("bench-latency", cfg, &inputs, &r)?.write(&cfg.output_path(o))?;
    }
    Ok(())
}

pub fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Simulate { corpus, gen_corpus, sessions, turns, ranker, out, metrics, common } => {
            let cfg = load_config(&common, sessions, turns)?;
            simulate(&corpus, gen_corpus, &ranker, &out, metrics.as_deref(), &cfg)
        }
        Command::Train { stage, events, corpus, out, init, metrics, epochs, lr, batch_size, common } => {
            let cfg = load_config(&common, None, None)?;
            let base = match stage {
                Stage::Pointwise => cfg.cycle.pointwise,
                Stage::Listwise => cfg.cycle.listwise,
                Stage::Reward => cfg.cycle.reward,
            };
            let tc = TrainConfig {
                learning_rate: lr.unwrap_or(base.learning_rate),
                batch_size: batch_size.unwrap_or(base.batch_size),
                epochs: epochs.unwrap_or(base.epochs),
                seed: derive_indexed(cfg.seed, "train", stage as u64, 0),
            };
            train(stage, &events, &corpus, &out, init.as_deref(), metrics.as_deref(), tc, &cfg)
        }
        Command::Align { policy, reward, rounds, events, corpus, out, metrics, common } => {
            let cfg = load_config(&common, None, None)?;
            align_cmd(&policy, &reward, rounds, &events, &corpus, &out, metrics.as_deref(), &cfg)
        }
        Command::Distill { pointwise, policy, alpha, trees, events, corpus, out, metrics, common } => {
            let cfg = load_config(&common, None, None)?;
            distill_cmd(&pointwise, &policy, alpha, trees, &events, &corpus, &out, metrics.as_deref(), &cfg)
        }
        Command::RunNearline { events, corpus, registry, metrics, common } => {
            let cfg = load_config(&common, None, None)?;
            run_nearline(&events, &corpus, &registry, metrics.as_deref(), &cfg)
        }
        Command::Experiment { mode, sessions, turns, out, common } => {
            let cfg = load_config(&common, sessions, turns)?;
            let report = run_experiment(mode, &cfg.experiment(), cfg.seed)?;
            let inputs: Vec<&Path> = common.config.as_deref().into_iter().collect();
            Report::new("experiment", &cfg, &inputs, &report)?.write(&cfg.output_path(&out))?;
            Ok(())
        }
        Command::Eval { events, out, threshold, metrics, common } => {
            let cfg = load_config(&common, None, None)?;
            eval_cmd(&events, &out, threshold, metrics.as_deref(), &cfg)
        }
        Command::BenchLatency { ensemble, trees, depth, list_size, iters, out, common } => {
            let cfg = load_config(&common, None, None)?;
            bench(ensemble.as_deref(), trees, depth, list_size, iters, out.as_deref(), &cfg)
        }
    }
}

/// Parses `std::env::args`, runs the subcommand and returns the exit code.
/// Usage errors exit with 2; runtime failures print one JSON error line to
/// stderr and exit with 1.
pub fn main_exit() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            1
        }
    }
}
