//! `mtfm`: data generation, training, evaluation, inference, benchmarks and
//! verification for the multi-scenario recommendation model.

mod config;

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use mtfm_core::bench::bench;
use mtfm_core::checkpoint;
use mtfm_core::data::{aggregate_users, deserialize_dataset, generate_dataset, serialize_dataset, Dataset, InferenceRequest};
use mtfm_core::engine::Real;
use mtfm_core::heads::EvalReport;
use mtfm_core::inference::{extract_subgraph, infer_request, prune_model};
use mtfm_core::model::Model;
use mtfm_core::train::{evaluate, split_users, train, History};
use mtfm_core::verify;
use serde::Serialize;

use crate::config::{Precision, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "mtfm", version, about = "Multi-scenario recommendation model with hybrid target attention")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (recorded in every report).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Output file (or directory for reports).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the planted-signal multi-scenario dataset.
    GenData {
        #[arg(long)]
        users: Option<usize>,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Dataset file; generated from the `[data]` config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Per-scenario, per-task AUC/GAUC of a checkpoint.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate every user instead of the held-out split.
        #[arg(long)]
        all: bool,
        /// Also evaluate after 2:4 pruning of the attention projections.
        #[arg(long)]
        prune: bool,
    },
    /// Score inference requests (JSON lines) with scenario subgraphs.
    Infer {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        requests: PathBuf,
    },
    /// Attention MACs, throughput and memory across HTA configurations.
    Bench {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        lt: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Run every oracle suite on self-constructed micro instances.
    Verify,
}

/// Usage problems exit with 2, runtime failures with 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage<T>(e: anyhow::Error) -> Outcome<T> {
    Err(Failure::Usage(e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MTFM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            eprintln!("run `mtfm --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn resolve_config(cli: &Cli) -> Outcome<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => return usage(e),
        },
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    match &cli.command {
        Command::GenData { users: Some(u) } => cfg.data.n_users = *u,
        Command::Train { steps, batch_size, lr, .. } => {
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = *b;
            }
            if let Some(l) = lr {
                cfg.train.lr = *l;
            }
        }
        Command::Bench { n, lt, iters } => {
            if let Some(n) = n {
                cfg.bench.n = *n;
            }
            if let Some(lt) = lt {
                cfg.bench.l_t = *lt;
            }
            if let Some(i) = iters {
                cfg.bench.iters = *i;
            }
        }
        _ => {}
    }
    cfg.train.seed = cfg.seed;
    cfg.bench.seed = cfg.seed;
    if let Err(e) = cfg.validate() {
        return usage(e);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome {
    let cfg = resolve_config(&cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        pool = pool.num_threads(t);
    }
    let pool = pool.build().context("cannot start worker threads")?;
    pool.install(|| dispatch(&cli, &cfg))
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Outcome {
    let threads = rayon::current_num_threads();
    match &cli.command {
        Command::GenData { .. } => gen_data(cli, cfg),
        Command::Train { data, .. } => match cfg.precision {
            Precision::F32 => train_cmd::<f32>(cli, cfg, data.as_deref(), threads),
            Precision::F64 => train_cmd::<f64>(cli, cfg, data.as_deref(), threads),
        },
        Command::Eval { model, data, all, prune } => {
            let model_path = required(model.as_deref(), cfg.paths.checkpoint.as_deref(), "--model")?;
            let data_path = required(data.as_deref(), cfg.paths.dataset.as_deref(), "--data")?;
            match checkpoint::peek_precision(&model_path)?.as_str() {
                "f64" => eval_cmd::<f64>(cli, cfg, &model_path, &data_path, *all, *prune, threads),
                _ => eval_cmd::<f32>(cli, cfg, &model_path, &data_path, *all, *prune, threads),
            }
        }
        Command::Infer { model, requests } => {
            let model_path = required(model.as_deref(), cfg.paths.checkpoint.as_deref(), "--model")?;
            match checkpoint::peek_precision(&model_path)?.as_str() {
                "f64" => infer_cmd::<f64>(cli, &model_path, requests),
                _ => infer_cmd::<f32>(cli, &model_path, requests),
            }
        }
        Command::Bench { .. } => bench_cmd(cli, cfg, threads),
        Command::Verify => verify_cmd(cli, cfg, threads),
    }
}

fn required(flag: Option<&Path>, fallback: Option<&Path>, name: &str) -> Outcome<PathBuf> {
    match flag.or(fallback) {
        Some(p) => Ok(p.to_path_buf()),
        None => usage(anyhow!("{name} is required (flag or [paths] entry)")),
    }
}

fn write_out(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read dataset {}", path.display()))?;
    deserialize_dataset(&text).with_context(|| format!("invalid dataset {}", path.display()))
}

fn gen_data(cli: &Cli, cfg: &RunConfig) -> Outcome {
    let dataset = generate_dataset(&cfg.data, cfg.seed)?;
    // round-trip through the raw exposure stream to report the aggregation gain
    let (stream, shared) = dataset.explode();
    let (_, report) = aggregate_users(&dataset.schema, &stream, &shared)?;
    let out = cli.out.clone().or_else(|| cfg.paths.dataset.clone()).unwrap_or_else(|| PathBuf::from("dataset.jsonl"));
    fs::write(&out, serialize_dataset(&dataset)?).with_context(|| format!("cannot write {}", out.display()))?;
    println!("wrote {} users to {}", dataset.samples.len(), out.display());
    println!("{report}");
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    seed: u64,
    threads: usize,
    precision: &'static str,
    train_users: usize,
    eval_users: usize,
    params: usize,
    history: &'a History,
}

fn train_cmd<T: Real>(cli: &Cli, cfg: &RunConfig, data: Option<&Path>, threads: usize) -> Outcome {
    let dataset = match data.or(cfg.paths.dataset.as_deref()) {
        Some(p) => load_dataset(p)?,
        None => generate_dataset(&cfg.data, cfg.seed)?,
    };
    let (train_set, eval_set) = split_users(&dataset.samples, cfg.train.eval_fraction, cfg.seed);
    let mut model = Model::<T>::init(cfg.model.clone(), dataset.schema.clone(), cfg.seed)?;
    log::info!("{} parameters, {} train / {} eval users, {threads} threads", model.param_count(), train_set.len(), eval_set.len());
    let every = (cfg.train.steps / 20).max(1);
    let history = train(&mut model, &train_set, &eval_set, &cfg.train, |r| {
        if r.step % every == 0 {
            log::info!("step {:>6} loss {:.5} grad_norm {:.4}", r.step, r.loss, r.grad_norm);
        }
    })?;
    let out = cli.out.clone().or_else(|| cfg.paths.checkpoint.clone()).unwrap_or_else(|| PathBuf::from("model.ckpt"));
    checkpoint::save_file(&model, &out)?;
    let report = TrainReport {
        seed: cfg.seed,
        threads,
        precision: T::NAME,
        train_users: train_set.len(),
        eval_users: eval_set.len(),
        params: model.param_count(),
        history: &history,
    };
    let hist_path = match &cfg.paths.report_dir {
        Some(dir) => dir.join("history.json"),
        None => PathBuf::from(format!("{}.history.json", out.display())),
    };
    fs::write(&hist_path, serde_json::to_string_pretty(&report)?)?;
    println!("checkpoint {} ({} parameters, {} threads)", out.display(), model.param_count(), threads);
    println!("history {}", hist_path.display());
    if let Some(last) = history.evals.last() {
        println!("held-out evaluation after {} steps:\n{}", last.step, last.report);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    threads: usize,
    users: usize,
    report: EvalReport,
    pruned: Option<PrunedOutput>,
}

#[derive(Serialize)]
struct PrunedOutput {
    zeroed_weights: usize,
    matrices: usize,
    report: EvalReport,
    /// Dense minus pruned AUC per `(scenario, task)`.
    auc_degradation: Vec<(String, String, Option<f64>)>,
}

fn eval_cmd<T: Real>(
    cli: &Cli,
    cfg: &RunConfig,
    model_path: &Path,
    data_path: &Path,
    all: bool,
    prune: bool,
    threads: usize,
) -> Outcome {
    let mut model: Model<T> = checkpoint::load_file(model_path)?;
    let dataset = load_dataset(data_path)?;
    if dataset.schema != model.schema {
        return Err(Failure::Runtime(anyhow!("dataset schema differs from the checkpoint's")));
    }
    let samples = if all { dataset.samples } else { split_users(&dataset.samples, cfg.train.eval_fraction, cfg.seed).1 };
    let report = evaluate(&model, &samples)?;
    println!("{} users, {threads} threads\n{report}", samples.len());
    let pruned = if prune {
        let summary = prune_model(&mut model);
        let after = evaluate(&model, &samples)?;
        let degradation = report
            .rows
            .iter()
            .zip(&after.rows)
            .map(|(a, b)| (a.scenario.clone(), a.task.clone(), a.auc.zip(b.auc).map(|(x, y)| x - y)))
            .collect::<Vec<_>>();
        println!("\nafter 2:4 pruning ({} weights zeroed in {} matrices)\n{after}", summary.zeroed(), summary.matrices.len());
        for (s, t, d) in &degradation {
            println!("auc degradation {s}/{t}: {}", d.map_or("n/a".into(), |v| format!("{v:+.4}")));
        }
        Some(PrunedOutput { zeroed_weights: summary.zeroed(), matrices: summary.matrices.len(), report: after, auc_degradation: degradation })
    } else {
        None
    };
    if let Some(out) = &cli.out {
        let body = EvalOutput { threads, users: samples.len(), report, pruned };
        fs::write(out, serde_json::to_string_pretty(&body)?)?;
    }
    Ok(())
}

fn infer_cmd<T: Real>(cli: &Cli, model_path: &Path, requests: &Path) -> Outcome {
    let model: Model<T> = checkpoint::load_file(model_path)?;
    let file = fs::File::open(requests).with_context(|| format!("cannot read {}", requests.display()))?;
    let mut subgraphs = std::collections::BTreeMap::new();
    let mut lines = String::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: InferenceRequest =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: invalid request", requests.display(), i + 1))?;
        if let std::collections::btree_map::Entry::Vacant(e) = subgraphs.entry(req.scenario_id) {
            e.insert(extract_subgraph(&model, req.scenario_id)?);
        }
        for rec in infer_request(&req, &subgraphs[&req.scenario_id])? {
            lines.push_str(&serde_json::to_string(&rec)?);
            lines.push('\n');
        }
    }
    write_out(cli.out.as_deref(), &lines)?;
    Ok(())
}

fn bench_cmd(cli: &Cli, cfg: &RunConfig, threads: usize) -> Outcome {
    let table = bench(&cfg.bench)?;
    let mut text = format!("# threads={threads} precision=f32\n");
    text.push_str(&table.to_tsv());
    write_out(cli.out.as_deref(), &text)?;
    table.check_monotone(&cfg.bench)?;
    Ok(())
}

fn verify_cmd(cli: &Cli, cfg: &RunConfig, threads: usize) -> Outcome {
    let results = verify::run_all(cfg.seed)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} suites passed (f64, {threads} threads)", results.len() - failed, results.len());
    if let Some(out) = &cli.out {
        fs::write(out, serde_json::to_string_pretty(&results)?)?;
    }
    if failed > 0 {
        return Err(anyhow!("{failed} verification suite(s) failed").into());
    }
    Ok(())
}
