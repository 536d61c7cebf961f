//! `orderhint` command-line driver.
//!
//! Every command is deterministic given its flags and writes a manifest
//! next to its outputs. Failures print one `error[<class>]: <message>` line
//! to stderr and exit with the class's code (2 input, 3 numerical,
//! 4 provenance).

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use orderhint::codec::Vocabulary;
use orderhint::dataset::{self, Corpus, CorpusConfig, Order, Split};
use orderhint::grpo::{self, GrpoConfig, GrpoMetricRow};
use orderhint::nn::{Checkpoint, ModelConfig};
use orderhint::reward::{self, BootstrapConfig, RewardScales};
use orderhint::sft::{self, SftConfig};
use orderhint::util::derive_seed;
use orderhint::{eval, Error, Execution, Result};
use serde::Serialize;

use config::KeyValues;
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "orderhint", version, about = "Sudoku solver-order hints for GRPO post-training")]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/validation/test puzzle corpora.
    GenData(GenData),
    /// Supervised fine-tuning from scratch.
    Sft(SftArgs),
    /// Calibrate frozen reward scales for one mixture.
    BootstrapScales(BootstrapArgs),
    /// GRPO post-training under frozen scales.
    Grpo(GrpoArgs),
    /// Greedy-decoding evaluation on one split.
    Eval(EvalArgs),
    /// Calibrate and post-train once per mixture and tabulate test accuracy.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    /// 4x4 puzzles, or a 4-layer width-128 model.
    Desk,
    /// 9x9 puzzles, or an 8-layer width-512 model.
    Paper,
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum, default_value = "paper")]
    preset: Preset,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    givens_min: Option<usize>,
    #[arg(long)]
    givens_max: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Settings shared by commands that read a config file.
#[derive(Args)]
struct Overrides {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `KEY=VALUE` assignments, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct SftArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_order)]
    order: Order,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_steps: Option<usize>,
    #[command(flatten)]
    over: Overrides,
}

#[derive(Args)]
struct BootstrapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = orderhint::codec::DEFAULT_MAX_NEW_TOKENS)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct GrpoArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scales: PathBuf,
    /// Corpus directory with train and validation splits.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    over: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = orderhint::codec::DEFAULT_MAX_NEW_TOKENS)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// Random-order fine-tuned checkpoint every mixture starts from.
    #[arg(long)]
    ckpt: PathBuf,
    /// Solver-order baseline; trained here with `--sft-config` when absent.
    #[arg(long)]
    solver_ckpt: Option<PathBuf>,
    #[arg(long)]
    sft_config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    alphas: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    over: Overrides,
}

fn parse_order(s: &str) -> std::result::Result<Order, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[input]: {first}");
            return ExitCode::from(2);
        }
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, exec),
        Command::Sft(a) => run_sft(a, exec),
        Command::BootstrapScales(a) => bootstrap(a, exec),
        Command::Grpo(a) => run_grpo(a, exec),
        Command::Eval(a) => run_eval(a, exec),
        Command::Sweep(a) => sweep(a, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", class.as_str());
            ExitCode::from(class.exit_code() as u8)
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let text: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect();
    write_text(path, &text)
}

fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(split.file_name())
}

fn load_corpus(dir: &Path, m: &mut Manifest) -> Result<Corpus> {
    let corpus = Corpus::load_dir(dir)?;
    for split in [Split::Train, Split::Validation, Split::Test] {
        let p = split_path(dir, split);
        if p.exists() {
            m.input(&format!("data/{}", split.as_str()), &p)?;
        }
    }
    Ok(corpus)
}

fn gen_data(a: GenData, exec: Execution) -> Result<()> {
    let mut cfg = match a.preset {
        Preset::Desk => CorpusConfig::small(a.seed),
        Preset::Paper => CorpusConfig {
            seed: a.seed,
            ..CorpusConfig::default()
        },
    };
    if let Some(side) = a.side {
        cfg.side = side;
    }
    cfg.n_train = a.n_train.unwrap_or(cfg.n_train);
    cfg.n_val = a.n_val.unwrap_or(cfg.n_val);
    cfg.n_test = a.n_test.unwrap_or(cfg.n_test);
    cfg.givens_min = a.givens_min.unwrap_or(cfg.givens_min);
    cfg.givens_max = a.givens_max.unwrap_or(cfg.givens_max);

    create_dir(&a.out)?;
    let files = dataset::build_corpus(&cfg, &a.out, exec)?;
    let vocab = Vocabulary::new(cfg.side)?;
    let vocab_path = a.out.join("vocab.tsv");
    write_text(&vocab_path, &vocab.dump())?;

    let mut m = Manifest::new("gen-data", &cfg);
    m.seed("data", cfg.seed);
    for f in files.iter().chain([&vocab_path]) {
        m.output(f)?;
    }
    m.write(&a.out.join("manifest.json"))?;
    println!("wrote {} records to {}", cfg.n_train + cfg.n_val + cfg.n_test, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SftSettings {
    preset: Preset,
    model: ModelConfig,
    sft: SftConfig,
}

fn take_preset(kv: &mut KeyValues) -> Result<Preset> {
    match kv.take_string("preset").as_deref() {
        None | Some("desk") => Ok(Preset::Desk),
        Some("paper") => Ok(Preset::Paper),
        Some(other) => Err(Error::input(format!("unknown preset `{other}`"))),
    }
}

fn resolve_sft(kv: &mut KeyValues, order: Order, vocab: &Vocabulary) -> Result<SftSettings> {
    let preset = take_preset(kv)?;
    let mut cfg = SftConfig::for_order(order);
    match preset {
        // The small model needs far more, noisier updates than the paper
        // schedule gives it to learn digit values at all.
        Preset::Desk => {
            cfg.lr = 1e-3;
            cfg.batch_size = 8;
        }
        Preset::Paper => cfg.batch_size = 128,
    }
    let mut seed = 0u64;
    kv.take("seed", &mut seed)?;
    cfg.seed = seed;
    kv.take("lr", &mut cfg.lr)?;
    kv.take("batch_size", &mut cfg.batch_size)?;
    kv.take("weight_decay", &mut cfg.weight_decay)?;
    kv.take("patience", &mut cfg.patience)?;
    kv.take("max_steps", &mut cfg.max_steps)?;
    kv.take("eval_interval", &mut cfg.eval_interval)?;
    kv.take("eval_records", &mut cfg.eval_records)?;
    kv.take("max_new_tokens", &mut cfg.max_new_tokens)?;
    let init_seed = derive_seed(seed, "init", 0);
    let mut model = match preset {
        Preset::Desk => ModelConfig::desk(vocab.size(), vocab.max_seq_len(), init_seed),
        Preset::Paper => ModelConfig::paper(vocab.size(), vocab.max_seq_len(), init_seed),
    };
    kv.take("n_layers", &mut model.n_layers)?;
    kv.take("n_heads", &mut model.n_heads)?;
    kv.take("d_model", &mut model.d_model)?;
    model.validate()?;
    Ok(SftSettings { preset, model, sft: cfg })
}

fn overrides(over: &Overrides) -> Result<KeyValues> {
    let mut kv = KeyValues::load(over.config.as_deref())?;
    kv.apply_sets(&over.sets)?;
    kv.set_opt("seed", over.seed);
    kv.set_opt("lr", over.lr);
    Ok(kv)
}

fn corpus_vocab(corpus: &Corpus) -> Result<Vocabulary> {
    let side = corpus
        .side()
        .ok_or_else(|| Error::input("corpus has no records"))?;
    Vocabulary::new(side)
}

fn run_sft(a: SftArgs, exec: Execution) -> Result<()> {
    let mut kv = overrides(&a.over)?;
    kv.set_opt("max_steps", a.max_steps);
    let mut m = Manifest::new("sft", ());
    if let Some(c) = &a.over.config {
        m.input("config", c)?;
    }
    let corpus = load_corpus(&a.data, &mut m)?;
    let vocab = corpus_vocab(&corpus)?;
    let settings = resolve_sft(&mut kv, a.order, &vocab)?;
    kv.finish()?;

    let out = sft::train_sft(&corpus, settings.model, &settings.sft, exec)?;
    create_parent(&a.out)?;
    out.best.save(&a.out)?;
    let metrics = with_suffix(&a.out, ".metrics.jsonl");
    write_jsonl(&metrics, &out.metrics)?;

    m.settings = serde_json::to_value(&settings).expect("serializable");
    m.seed("sft", settings.sft.seed).seed("init", settings.model.seed);
    m.output(&a.out)?.output(&metrics)?;
    m.write(&with_suffix(&a.out, ".manifest.json"))?;
    println!(
        "best validation cell accuracy {:.4} at step {} (stopped at {})",
        out.best_val_accuracy, out.best_step, out.last_step
    );
    Ok(())
}

fn bootstrap(a: BootstrapArgs, exec: Execution) -> Result<()> {
    let cfg = BootstrapConfig {
        temperature: 1.0,
        seed: a.seed,
        max_new_tokens: a.max_new_tokens,
    };
    let mut m = Manifest::new("bootstrap-scales", serde_json::json!({ "alpha": a.alpha, "bootstrap": cfg }));
    m.input("ckpt", &a.ckpt)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let corpus = load_corpus(&a.data, &mut m)?;
    eval::check_vocab(&ckpt, corpus_vocab(&corpus)?.side())?;
    let scales = reward::bootstrap_scales(&ckpt, &corpus.validation, a.alpha, &cfg, exec)?;
    create_parent(&a.out)?;
    scales.save(&a.out)?;
    m.seed("bootstrap", cfg.seed);
    m.output(&a.out)?;
    m.write(&with_suffix(&a.out, ".manifest.json"))?;
    println!(
        "mean_cell {:.6} mean_order {:.6} -> cell_scale {:.6} order_scale {:.6}",
        scales.bootstrap_means.mean_cell, scales.bootstrap_means.mean_order, scales.cell_scale, scales.order_scale
    );
    Ok(())
}

fn resolve_grpo(kv: &mut KeyValues) -> Result<GrpoConfig> {
    let mut cfg = GrpoConfig::default();
    if let Preset::Desk = take_preset(kv)? {
        cfg.lr = 5e-5;
    }
    kv.take("seed", &mut cfg.seed)?;
    kv.take("lr", &mut cfg.lr)?;
    kv.take("group_size", &mut cfg.group_size)?;
    kv.take("weight_decay", &mut cfg.weight_decay)?;
    kv.take("kl_beta", &mut cfg.kl_beta)?;
    kv.take("clip_eps", &mut cfg.clip_eps)?;
    kv.take("max_new_tokens", &mut cfg.max_new_tokens)?;
    kv.take("batch_prompts", &mut cfg.batch_prompts)?;
    kv.take("steps", &mut cfg.steps)?;
    kv.take("temperature", &mut cfg.temperature)?;
    kv.take("eval_interval", &mut cfg.eval_interval)?;
    kv.take("eval_records", &mut cfg.eval_records)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_grpo(a: GrpoArgs, exec: Execution) -> Result<()> {
    let mut kv = overrides(&a.over)?;
    kv.set_opt("steps", a.steps);
    let mut cfg = resolve_grpo(&mut kv)?;
    kv.finish()?;

    let mut m = Manifest::new("grpo", ());
    if let Some(c) = &a.over.config {
        m.input("config", c)?;
    }
    m.input("ckpt", &a.ckpt)?.input("scales", &a.scales)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let scales = RewardScales::load(&a.scales)?;
    scales.check_checkpoint(&ckpt.hash())?;
    let corpus = load_corpus(&a.data, &mut m)?;
    cfg.alpha = scales.alpha;

    let out = grpo::run_grpo(&ckpt, &corpus, &scales, &cfg, exec)?;
    create_parent(&a.out)?;
    out.last.save(&a.out)?;
    let best = with_suffix(&a.out, ".best");
    out.best.save(&best)?;
    let metrics = with_suffix(&a.out, ".metrics.jsonl");
    write_jsonl(&metrics, &out.metrics)?;

    m.settings = serde_json::to_value(&cfg).expect("serializable");
    m.seed("rollout", cfg.seed);
    m.output(&a.out)?.output(&best)?.output(&metrics)?;
    m.write(&with_suffix(&a.out, ".manifest.json"))?;
    print_grpo_summary(&out.metrics);
    Ok(())
}

fn print_grpo_summary(rows: &[GrpoMetricRow]) {
    let window = rows.len().min(10);
    if window == 0 {
        println!("no GRPO steps taken");
        return;
    }
    let mean = |rs: &[GrpoMetricRow]| rs.iter().map(|r| r.mean_r_total).sum::<f64>() / rs.len() as f64;
    println!(
        "mean r_total: first {window} steps {:.4}, last {window} steps {:.4}",
        mean(&rows[..window]),
        mean(&rows[rows.len() - window..])
    );
}

fn run_eval(a: EvalArgs, exec: Execution) -> Result<()> {
    let mut m = Manifest::new(
        "eval",
        serde_json::json!({ "split": a.split.as_str(), "max_new_tokens": a.max_new_tokens }),
    );
    m.input("ckpt", &a.ckpt)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let path = split_path(&a.data, a.split);
    m.input(&format!("data/{}", a.split.as_str()), &path)?;
    let records = dataset::load_corpus(&path)?.collect::<Result<Vec<_>>>()?;
    let report = eval::evaluate_checkpoint(&ckpt, &records, a.max_new_tokens, exec)?;
    create_parent(&a.out)?;
    write_json(&a.out, &report)?;
    m.output(&a.out)?;
    m.write(&with_suffix(&a.out, ".manifest.json"))?;
    println!("{report}");
    Ok(())
}

fn sweep(a: SweepArgs, exec: Execution) -> Result<()> {
    if a.alphas.is_empty() {
        return Err(Error::input("--alphas needs at least one value"));
    }
    let mut kv = overrides(&a.over)?;
    kv.set_opt("steps", a.steps);
    let cfg = resolve_grpo(&mut kv)?;
    kv.finish()?;

    let mut m = Manifest::new("sweep", ());
    if let Some(c) = &a.over.config {
        m.input("config", c)?;
    }
    m.input("ckpt", &a.ckpt)?;
    let random = Checkpoint::load(&a.ckpt)?;
    let corpus = load_corpus(&a.data, &mut m)?;
    let vocab = corpus_vocab(&corpus)?;
    eval::check_vocab(&random, vocab.side())?;
    create_dir(&a.out)?;

    let mut sft_settings = None;
    let solver = match &a.solver_ckpt {
        Some(p) => {
            m.input("solver_ckpt", p)?;
            Checkpoint::load(p)?
        }
        None => {
            let mut skv = KeyValues::load(a.sft_config.as_deref())?;
            if let Some(c) = &a.sft_config {
                m.input("sft_config", c)?;
            }
            let mut s = resolve_sft(&mut skv, Order::Solver, &vocab)?;
            skv.finish()?;
            // Same architecture as the random-order model.
            s.model = ModelConfig {
                seed: s.model.seed,
                ..*random.model.config()
            };
            let trained = sft::train_sft(&corpus, s.model, &s.sft, exec)?;
            let p = a.out.join("solver_sft.ckpt");
            trained.best.save(&p)?;
            m.output(&p)?;
            sft_settings = Some(s);
            trained.best
        }
    };

    let (report, runs) = grpo::sweep_alpha(&random, &solver, &corpus, &a.alphas, &cfg, exec)?;
    for (alpha, run) in a.alphas.iter().zip(&runs) {
        let p = a.out.join(format!("metrics-alpha-{alpha}.jsonl"));
        write_jsonl(&p, &run.metrics)?;
        m.output(&p)?;
    }
    let table = a.out.join("table.txt");
    write_text(&table, &report.to_string())?;
    let json = a.out.join("report.json");
    write_json(&json, &report)?;
    m.output(&table)?.output(&json)?;
    m.settings = serde_json::json!({ "alphas": a.alphas, "grpo": cfg, "solver_sft": sft_settings });
    m.seed("rollout", cfg.seed);
    m.write(&a.out.join("manifest.json"))?;
    print!("{report}");
    Ok(())
}
