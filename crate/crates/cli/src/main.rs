//! `l2s`: generate synthetic softmax problems, train screening models,
//! benchmark them against the exact top-k and measure hybrid perplexity.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use l2s_core::bench::{cluster_sweep, hybrid_perplexity, run_bench, sweep_csv, BenchConfig};
use l2s_core::synth::{generate_synthetic, sample_contexts, sample_targets, SynthSpec};
use l2s_core::train::{train, TrainConfig, TrainMode};
use l2s_core::{io, Rng, ScreeningModel, SoftmaxLayer};

const SEED_ENV: &str = "L2S_SEED";

/// A mistake in how the tool was invoked; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

#[derive(Parser, Debug)]
#[command(name = "l2s", version, about = "Learned screening for fast top-k softmax")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic layer and contexts with planted cluster structure
    Gen(GenArgs),
    /// Train a screening model
    Train(TrainArgs),
    /// Precision@k and speedup of a model against the exact top-k
    Bench(BenchArgs),
    /// Exact vs hybrid perplexity on held-out contexts and targets
    Ppl(PplArgs),
    /// Screened top-k predictions, one context per line
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Vocabulary size
    #[arg(long = "L", default_value_t = 10_000)]
    vocab: usize,
    /// Context dimension
    #[arg(long = "d", default_value_t = 64)]
    dim: usize,
    /// Training contexts
    #[arg(long = "N", default_value_t = 20_000)]
    contexts: usize,
    /// Planted clusters
    #[arg(long = "r-true", default_value_t = 10)]
    true_clusters: usize,
    /// Labels per planted cluster
    #[arg(long, default_value_t = 50)]
    subset: usize,
    /// Context noise
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Falls back to L2S_SEED, then 0
    #[arg(long)]
    seed: Option<u64>,
    /// Also write this many held-out contexts and sampled targets
    #[arg(long)]
    eval_n: Option<usize>,
    /// Overwrite existing files
    #[arg(long)]
    force: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    L2s,
    Kmeans,
}

/// Training knobs shared by `train` and `bench --sweep-r`.
#[derive(Args, Debug, Default)]
struct TrainKnobs {
    /// File of `key = value` lines; flags win over it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Clusters
    #[arg(long)]
    r: Option<usize>,
    /// Average candidate-set budget
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Outer alternations
    #[arg(long = "T")]
    outer_iters: Option<usize>,
    /// SGD epochs per alternation
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Gumbel-softmax temperature
    #[arg(long)]
    tau: Option<f64>,
    /// Labels per context
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    kmeans_iters: Option<usize>,
    /// Falls back to the config file, then L2S_SEED, then 0
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    layer: PathBuf,
    #[arg(long)]
    contexts: PathBuf,
    /// Model output
    #[arg(long)]
    out: PathBuf,
    /// Training log, tab separated; defaults to `<out>.log.tsv`
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    layer: PathBuf,
    /// Evaluation contexts
    #[arg(long)]
    contexts: PathBuf,
    /// Model file, or `full` for the exact softmax
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    k: Vec<usize>,
    /// Timed passes; 0 skips timing
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Queries per timed pass
    #[arg(long, default_value_t = 2000)]
    timing_queries: usize,
    /// Train and benchmark one model per cluster count
    #[arg(long, value_delimiter = ',')]
    sweep_r: Vec<usize>,
    /// Training contexts for the sweep
    #[arg(long)]
    train_contexts: Option<PathBuf>,
    /// Fixed r + B for the sweep; defaults to r + budget
    #[arg(long)]
    compute: Option<f64>,
    /// Sweep table output
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Report output (also printed)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Args, Debug)]
struct PplArgs {
    /// Model file, or `full`
    #[arg(long)]
    model: String,
    #[arg(long)]
    layer: PathBuf,
    /// Held-out contexts
    #[arg(long)]
    contexts: PathBuf,
    /// Next-token ids aligned with the contexts
    #[arg(long)]
    targets: PathBuf,
    /// `full`, `d/<n>` or a number
    #[arg(long, default_value = "d/4")]
    rank: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Model file, or `full`
    #[arg(long)]
    model: String,
    #[arg(long)]
    layer: PathBuf,
    #[arg(long)]
    contexts: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Ppl(a) => cmd_ppl(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn require_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return usage(format!("input file {} does not exist", p.display()));
        }
    }
    Ok(())
}

fn check_outputs(paths: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return usage(format!("{} exists; pass --force to overwrite", p.display()));
        }
    }
    Ok(())
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => match s.trim().parse() {
            Ok(v) => Ok(Some(v)),
            Err(_) => usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")),
        },
        Err(_) => Ok(None),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    print!("{text}");
    if let Some(p) = out {
        write_text(p, text)?;
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let spec = SynthSpec {
        vocab: a.vocab,
        dim: a.dim,
        contexts: a.contexts,
        true_clusters: a.true_clusters,
        subset_size: a.subset,
        noise_sigma: a.sigma,
        seed,
        ..SynthSpec::default()
    };
    if let Err(e) = spec.validate() {
        return usage(e.to_string());
    }
    if a.eval_n == Some(0) {
        return usage("--eval-n must be at least 1");
    }
    let layer_path = a.out.join("layer.l2s");
    let ctx_path = a.out.join("contexts.l2s");
    let meta_path = a.out.join("meta.txt");
    let heldout_path = a.out.join("heldout.l2s");
    let targets_path = a.out.join("targets.l2s");
    let mut outputs = vec![layer_path.as_path(), ctx_path.as_path(), meta_path.as_path()];
    if a.eval_n.is_some() {
        outputs.extend([heldout_path.as_path(), targets_path.as_path()]);
    }
    check_outputs(&outputs, a.force)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let data = generate_synthetic(&spec)?;
    io::save_layer(&layer_path, &data.layer)?;
    io::save_contexts(&ctx_path, &data.contexts)?;
    let mut meta = format!(
        "vocab\t{}\ndim\t{}\ncontexts\t{}\ntrue_clusters\t{}\nsubset_size\t{}\nnoise_sigma\t{}\nseed\t{}\ntop_k\t{}\ncontainment\t{}\nattempts\t{}\n",
        spec.vocab,
        spec.dim,
        spec.contexts,
        spec.true_clusters,
        spec.subset_size,
        spec.noise_sigma,
        spec.seed,
        spec.top_k,
        data.planted.containment,
        data.planted.attempts,
    );
    if let Some(n) = a.eval_n {
        // held-out draws come from a stream the generator never touches
        let mut rng = Rng::new(seed).fork(99);
        let (heldout, _) = sample_contexts(&data.planted.centroids, n, spec.noise_sigma, &mut rng);
        let targets = sample_targets(&data.layer, &heldout, &mut rng)?;
        io::save_contexts(&heldout_path, &heldout)?;
        io::save_tokens(&targets_path, &targets)?;
        meta.push_str(&format!("heldout\t{n}\n"));
    }
    write_text(&meta_path, &meta)?;
    println!("containment\t{:.6}", data.planted.containment);
    println!("attempts\t{}", data.planted.attempts);
    Ok(())
}

fn parse_config(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return usage(format!("{}:{}: expected `key = value`", path.display(), n + 1));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn config_value<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => match v.parse() {
            Ok(x) => Ok(Some(x)),
            Err(_) => usage(format!("config key {key}: cannot parse {v:?}")),
        },
    }
}

const CONFIG_KEYS: &[&str] = &[
    "mode", "r", "budget", "lambda", "gamma", "T", "epochs", "lr", "batch", "tau", "top_k", "kmeans_iters", "seed",
];

impl TrainKnobs {
    /// Flags, then config file, then defaults; the seed additionally
    /// falls back to the environment before the default.
    fn resolve(&self) -> Result<TrainConfig> {
        let file = match &self.config {
            Some(p) => {
                require_inputs(&[p])?;
                parse_config(p)?
            }
            None => HashMap::new(),
        };
        if let Some(k) = file.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return usage(format!("unknown config key {k:?}"));
        }
        let file_mode = match file.get("mode").map(String::as_str) {
            None => None,
            Some("l2s") => Some(Mode::L2s),
            Some("kmeans") => Some(Mode::Kmeans),
            Some(other) => return usage(format!("config key mode: unknown mode {other:?}")),
        };
        let d = TrainConfig::default();
        let seed = match self.seed {
            Some(s) => s,
            None => match config_value(&file, "seed")? {
                Some(s) => s,
                None => env_seed()?.unwrap_or(d.seed),
            },
        };
        let mode = match self.mode.or(file_mode).unwrap_or(Mode::L2s) {
            Mode::L2s => TrainMode::L2s,
            Mode::Kmeans => TrainMode::Kmeans,
        };
        let config = TrainConfig {
            mode,
            clusters: pick(self.r, &file, "r", d.clusters)?,
            budget: pick(self.budget, &file, "budget", d.budget)?,
            lambda: pick(self.lambda, &file, "lambda", d.lambda)?,
            gamma: pick(self.gamma, &file, "gamma", d.gamma)?,
            outer_iters: pick(self.outer_iters, &file, "T", d.outer_iters)?,
            epochs_per_iter: pick(self.epochs, &file, "epochs", d.epochs_per_iter)?,
            learning_rate: pick(self.lr, &file, "lr", d.learning_rate)?,
            batch_size: pick(self.batch, &file, "batch", d.batch_size)?,
            temperature: pick(self.tau, &file, "tau", d.temperature)?,
            top_k: pick(self.top_k, &file, "top_k", d.top_k)?,
            kmeans_iters: pick(self.kmeans_iters, &file, "kmeans_iters", d.kmeans_iters)?,
            seed,
            ..d
        };
        if let Err(e) = config.validate() {
            return usage(e.to_string());
        }
        Ok(config)
    }
}

fn pick<T: std::str::FromStr>(flag: Option<T>, file: &HashMap<String, String>, key: &str, default: T) -> Result<T> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(config_value(file, key)?.unwrap_or(default)),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = a.knobs.resolve()?;
    require_inputs(&[&a.layer, &a.contexts])?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log.tsv");
        PathBuf::from(s)
    });
    check_outputs(&[&a.out, &log_path], a.force)?;
    let layer = io::load_layer(&a.layer)?;
    let contexts = io::load_contexts(&a.contexts)?;
    if contexts.len() < config.clusters {
        return usage(format!("{} contexts cannot fill r = {} clusters", contexts.len(), config.clusters));
    }
    let trained = train(&layer, &contexts, &config)?;
    io::save_model(&a.out, &trained.model)?;
    write_text(&log_path, &trained.log.to_tsv())?;
    let last = trained.log.rows.last().expect("log always has an init row");
    println!("final_loss\t{}", last.loss);
    println!("mean_candidate_size\t{}", last.mean_size);
    println!("moving_candidate_size\t{}", trained.moving_size);
    println!("probe_precision\t{}", last.probe_precision);
    Ok(())
}

fn load_model_arg(spec: &str, layer: &SoftmaxLayer) -> Result<ScreeningModel> {
    if spec == "full" {
        return Ok(ScreeningModel::full(layer.vocab_size(), layer.dim()));
    }
    let path = Path::new(spec);
    require_inputs(&[path])?;
    Ok(io::load_model(path)?)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    require_inputs(&[&a.layer, &a.contexts])?;
    let bench = BenchConfig {
        ks: a.k.clone(),
        repetitions: a.reps,
        timing_queries: Some(a.timing_queries),
    };
    if !a.sweep_r.is_empty() {
        return run_sweep(&a, &bench);
    }
    let Some(model_arg) = a.model.as_deref() else {
        return usage("bench needs --model (a file or `full`) or --sweep-r");
    };
    if let Some(out) = &a.out {
        check_outputs(&[out], a.force)?;
    }
    let layer = io::load_layer(&a.layer)?;
    let model = load_model_arg(model_arg, &layer)?;
    let contexts = io::load_contexts(&a.contexts)?;
    let report = run_bench(&model, &layer, &contexts, &bench)?;
    emit(&report.to_text(), a.out.as_deref())
}

fn run_sweep(a: &BenchArgs, bench: &BenchConfig) -> Result<()> {
    let Some(train_path) = &a.train_contexts else {
        return usage("--sweep-r needs --train-contexts");
    };
    require_inputs(&[train_path])?;
    let outputs: Vec<&Path> = a.csv.iter().chain(a.out.iter()).map(PathBuf::as_path).collect();
    check_outputs(&outputs, a.force)?;
    let base = a.knobs.resolve()?;
    let compute = a.compute.unwrap_or(base.clusters as f64 + base.budget);
    for &r in &a.sweep_r {
        if r == 0 || compute - (r as f64) < base.top_k as f64 {
            return usage(format!("compute {compute} leaves budget below top-k for r = {r}"));
        }
    }
    let layer = io::load_layer(&a.layer)?;
    let train_ctx = io::load_contexts(train_path)?;
    let eval = io::load_contexts(&a.contexts)?;
    let rows = cluster_sweep(&layer, &train_ctx, &eval, &a.sweep_r, compute, &base, bench)?;
    let csv = sweep_csv(&rows, bench.repetitions > 0);
    if let Some(p) = &a.csv {
        write_text(p, &csv)?;
    }
    emit(&csv, a.out.as_deref())
}

fn parse_rank(spec: &str, layer: &SoftmaxLayer) -> Result<usize> {
    let full = layer.vocab_size().min(layer.dim());
    if spec == "full" {
        return Ok(full);
    }
    if let Some(div) = spec.strip_prefix("d/") {
        return match div.parse::<usize>() {
            Ok(n) if n > 0 => Ok((layer.dim() / n).max(1)),
            _ => usage(format!("--rank {spec:?}: expected d/<positive integer>")),
        };
    }
    match spec.parse() {
        Ok(n) => Ok(n),
        Err(_) => usage(format!("--rank {spec:?}: expected `full`, `d/<n>` or an integer")),
    }
}

fn cmd_ppl(a: PplArgs) -> Result<()> {
    require_inputs(&[&a.layer, &a.contexts, &a.targets])?;
    if let Some(out) = &a.out {
        check_outputs(&[out], a.force)?;
    }
    let layer = io::load_layer(&a.layer)?;
    let rank = parse_rank(&a.rank, &layer)?;
    let model = load_model_arg(&a.model, &layer)?;
    let contexts = io::load_contexts(&a.contexts)?;
    let targets = io::load_tokens(&a.targets)?;
    let report = hybrid_perplexity(&model, &layer, rank, &contexts, &targets)?;
    emit(&report.to_text(), a.out.as_deref())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    require_inputs(&[&a.layer, &a.contexts])?;
    if let Some(out) = &a.out {
        check_outputs(&[out], a.force)?;
    }
    let layer = io::load_layer(&a.layer)?;
    let model = load_model_arg(&a.model, &layer)?;
    let contexts = io::load_contexts(&a.contexts)?;
    let mut text = String::from("#context\tcluster\tfallback\ttop_k\n");
    for (i, h) in contexts.iter().enumerate() {
        let pred = model.screened_topk(&layer, h, a.k)?;
        let ids: Vec<String> = pred.topk.indices.iter().map(|s| s.to_string()).collect();
        text.push_str(&format!("{i}\t{}\t{}\t{}\n", pred.cluster, u8::from(pred.fallback), ids.join(",")));
    }
    emit(&text, a.out.as_deref())
}
