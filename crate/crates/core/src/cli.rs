//! `dropnet` command line: train, grid, eval, gradcheck and synth.

use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{schema_help, RunConfig};
use crate::data::{
    batchify, encode_examples, load_examples, load_pretrained, CorpusFormat, EncodedExample,
    Example, Vocabulary,
};
use crate::dropout::Mode;
use crate::error::{Error, Result};
use crate::gradcheck::GradReport;
use crate::grid::{grid_search, GridSpec};
use crate::model::{Model, ModelConfig};
use crate::placement::{PlacementSet, NUM_MODELS};
use crate::synth::{generate, write_jsonl, SynthConfig};
use crate::train::{evaluate, train, write_metrics_csv};

/// Relative-error bound of the finite-difference suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "dropnet",
    version,
    about = "BiLSTM attention NLI model with configurable dropout placement"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum CheckSize {
    Small,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model; writes metrics.csv, summary.json and checkpoint.
    Train(ConfigArgs),
    /// Train every (model id, drop rate) cell and write grid.csv.
    Grid {
        #[command(flatten)]
        config: ConfigArgs,
        /// Model ids, e.g. `1..13` or `2,5,9`.
        #[arg(long, default_value = "1..13")]
        models: String,
        /// Drop rates, e.g. `0.1..0.5` (steps of 0.1) or `0.2,0.4`.
        #[arg(long, default_value = "0.1..0.5")]
        rates: String,
        /// Number of cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Corpus format; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        format: Option<CorpusFormat>,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long, value_enum, default_value = "small")]
        size: CheckSize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write a synthetic three-class corpus as JSONL.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        examples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
    },
}

/// Parses `a..b` (inclusive) and comma-separated model ids.
pub fn parse_models(spec: &str) -> Result<Vec<u8>> {
    let bad = || Error::Config(format!("--models: cannot parse {spec:?}"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u8 = a.trim().parse().map_err(|_| bad())?;
            let b: u8 = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if let Some(id) = out.iter().find(|&&id| id == 0 || id > NUM_MODELS) {
        return Err(Error::Config(format!(
            "--models: id {id} out of range 1..={NUM_MODELS}"
        )));
    }
    Ok(out)
}

/// Parses `a..b` (inclusive, steps of 0.1) and comma-separated drop rates.
pub fn parse_rates(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("--rates: cannot parse {spec:?}"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim) {
        if let Some((a, b)) = part.split_once("..") {
            let tenths = |s: &str| -> Result<i64> {
                let v: f64 = s.trim().parse().map_err(|_| bad())?;
                let t = (v * 10.0).round();
                if (t / 10.0 - v).abs() > 1e-9 {
                    return Err(bad());
                }
                Ok(t as i64)
            };
            let (a, b) = (tenths(a)?, tenths(b)?);
            if a > b {
                return Err(bad());
            }
            out.extend((a..=b).map(|t| t as f64 / 10.0));
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if let Some(r) = out.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::Config(format!("--rates: {r} outside [0, 1)")));
    }
    Ok(out)
}

fn load_split(cfg: &RunConfig, key: &str) -> Result<Vec<Example>> {
    let path = cfg.require_path(key)?;
    let corpus = load_examples(&path, cfg.corpus_format(&path), cfg.labels)?;
    if corpus.skipped > 0 {
        eprintln!(
            "{}: skipped {} unlabeled records",
            path.display(),
            corpus.skipped
        );
    }
    if corpus.examples.is_empty() {
        return Err(Error::Input(format!(
            "{} contains no examples",
            path.display()
        )));
    }
    Ok(corpus.examples)
}

struct Prepared {
    vocab: Vocabulary,
    train: Vec<EncodedExample>,
    val: Vec<EncodedExample>,
    test: Option<Vec<EncodedExample>>,
}

fn prepare(cfg: &RunConfig, with_test: bool) -> Result<Prepared> {
    let train = load_split(cfg, "train_path")?;
    let val = load_split(cfg, "val_path")?;
    let test = match (&cfg.test_path, with_test) {
        (Some(_), true) => Some(load_split(cfg, "test_path")?),
        _ => None,
    };
    let vocab = Vocabulary::build(&train, cfg.min_count.max(1));
    Ok(Prepared {
        train: encode_examples(&train, &vocab),
        val: encode_examples(&val, &vocab),
        test: test.map(|t| encode_examples(&t, &vocab)),
        vocab,
    })
}

fn build_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Model> {
    let mc = cfg.model_config();
    match &cfg.embeddings_path {
        Some(path) => {
            let (table, cov) = load_pretrained(path, vocab, mc.embedding_dim, mc.seed)?;
            eprintln!(
                "pretrained vectors: {} found, {} missing",
                cov.found, cov.missing
            );
            Model::with_embeddings(mc, table)
        }
        None => Model::new(mc, vocab.len()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

pub fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let data = prepare(&cfg, true)?;
    let mut model = build_model(&cfg, &data.vocab)?;
    let report = train(&mut model, &data.train, &data.val, &cfg.train)?;

    let batch = cfg.train.batch_size;
    let val = evaluate(&model, &batchify(&data.val, batch, None)?)?;
    let test = match &data.test {
        Some(t) => Some(evaluate(&model, &batchify(t, batch, None)?)?),
        None => None,
    };

    let out = &cfg.output_dir;
    create_dir(out)?;
    write_metrics_csv(&out.join("metrics.csv"), &report.metrics)?;
    let config: serde_json::Map<String, serde_json::Value> = cfg
        .pairs()
        .into_iter()
        .map(|(k, v)| (k, serde_json::Value::String(v)))
        .collect();
    let summary = serde_json::json!({
        "best_epoch": report.best_epoch,
        "epochs_run": report.metrics.len(),
        "stopped_early": report.stopped_early,
        "best_val_acc": report.best_val_acc,
        "val_acc": val.accuracy,
        "val_loss": val.loss,
        "test_acc": test.map(|t| t.accuracy),
        "test_loss": test.map(|t| t.loss),
        "vocab_size": data.vocab.len(),
        "config": config,
    });
    let path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Input(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Checkpoint {
        settings: cfg.pairs(),
        vocab: data.vocab.tokens().to_vec(),
        params: model.params().clone(),
    }
    .save(&out.join("checkpoint"))?;

    println!(
        "val_acc={} test_acc={}",
        val.accuracy,
        fmt_opt(test.map(|t| t.accuracy))
    );
    Ok(())
}

pub fn cmd_grid(args: &ConfigArgs, models: &str, rates: &str, parallel: usize) -> Result<bool> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let spec = GridSpec {
        models: parse_models(models)?,
        rates: parse_rates(rates)?,
        parallel: parallel.max(1),
        metrics_dir: Some(cfg.output_dir.join("cells")),
    };
    let data = prepare(&cfg, false)?;
    if cfg.embeddings_path.is_some() {
        eprintln!("note: grid cells use random embeddings; embeddings_path is ignored");
    }
    let table = grid_search(
        &spec,
        &cfg.model_config(),
        &cfg.train,
        data.vocab.len(),
        &data.train,
        &data.val,
    )?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("grid.csv");
    let csv = table.to_csv();
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    print!("{csv}");
    let failures = table.failures();
    for (id, rate, msg) in &failures {
        eprintln!("cell model {id} rate {rate} failed: {msg}");
    }
    Ok(failures.is_empty())
}

/// Rebuilds the model and vocabulary stored in a checkpoint.
pub fn restore(ckpt: &Checkpoint) -> Result<(RunConfig, Vocabulary, Model)> {
    let mut cfg = RunConfig::default();
    cfg.apply_pairs(&ckpt.settings)?;
    let vocab = Vocabulary::from_tokens(ckpt.vocab.clone())?;
    let model = Model::from_params(cfg.model_config(), ckpt.params.clone())?;
    if model.vocab_size() != vocab.len() {
        return Err(Error::Version(format!(
            "embedding table has {} rows for {} vocabulary entries",
            model.vocab_size(),
            vocab.len()
        )));
    }
    Ok((cfg, vocab, model))
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, format: Option<CorpusFormat>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (cfg, vocab, model) = restore(&ckpt)?;
    let format = format.unwrap_or_else(|| cfg.corpus_format(data));
    let corpus = load_examples(data, format, cfg.labels)?;
    if corpus.examples.is_empty() {
        return Err(Error::Input(format!(
            "{} contains no examples",
            data.display()
        )));
    }
    let enc = encode_examples(&corpus.examples, &vocab);
    let e = evaluate(&model, &batchify(&enc, cfg.train.batch_size, None)?)?;
    println!("accuracy={} loss={}", e.accuracy, e.loss);
    Ok(())
}

/// Gradient reports of the tiny configuration (h = 4, vocabulary 10,
/// sentences of at most 3 tokens, batch 2, every dropout site active) in
/// eval mode and in train mode with a frozen mask.
pub fn tiny_gradient_reports(seed: u64) -> Result<Vec<(&'static str, GradReport)>> {
    let config = ModelConfig {
        embedding_dim: 5,
        hidden_units: 4,
        num_classes: 3,
        placement: PlacementSet::all(),
        drop_rate: 0.3,
        seed,
        ..ModelConfig::default()
    };
    let vocab = 10;
    let model = Model::new(config, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = crate::data::Batch::from_examples(&[
        &random_pair(&mut rng, vocab, 3, 2),
        &random_pair(&mut rng, vocab, 2, 3),
    ])?;
    let mut out = Vec::new();
    for (label, mode) in [("eval", Mode::Eval), ("train (frozen mask)", Mode::Train)] {
        out.push((label, model.gradient_check(&batch, mode, seed)?));
    }
    Ok(out)
}

/// Runs the finite-difference suite on the tiny configuration and returns
/// whether every group is within tolerance.
pub fn cmd_gradcheck(size: CheckSize, seed: u64) -> Result<bool> {
    let CheckSize::Small = size;
    let mut ok = true;
    for (label, report) in tiny_gradient_reports(seed)? {
        println!("mode {label}:");
        for g in &report.groups {
            let err = g.max_rel_err();
            let pass = err < GRADCHECK_TOLERANCE;
            ok &= pass;
            println!(
                "  {:<22} max_rel_err={:.3e} {}",
                g.name,
                err,
                if pass { "ok" } else { "FAIL" }
            );
        }
    }
    println!("gradcheck {}", if ok { "passed" } else { "failed" });
    Ok(ok)
}

fn random_pair(rng: &mut impl rand::Rng, vocab: usize, lp: usize, lh: usize) -> EncodedExample {
    let mut seq = |n: usize| (0..n).map(|_| rng.gen_range(2..vocab)).collect();
    EncodedExample {
        premise: seq(lp),
        hypothesis: seq(lh),
        label: rng.gen_range(0..3),
    }
}

pub fn cmd_synth(out: &Path, examples: usize, seed: u64, label_noise: f64) -> Result<()> {
    let ex = generate(&SynthConfig {
        examples,
        seed,
        label_noise,
    })?;
    write_jsonl(out, &ex, crate::data::LabelScheme::Snli)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

/// Dispatches a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args).map(|_| 0),
        Command::Grid {
            config,
            models,
            rates,
            parallel,
        } => cmd_grid(config, models, rates, *parallel).map(|ok| if ok { 0 } else { 1 }),
        Command::Eval {
            checkpoint,
            data,
            format,
        } => cmd_eval(checkpoint, data, *format).map(|_| 0),
        Command::Gradcheck { size, seed } => {
            cmd_gradcheck(*size, *seed).map(|ok| if ok { 0 } else { 2 })
        }
        Command::Synth {
            out,
            examples,
            seed,
            label_noise,
        } => cmd_synth(out, *examples, *seed, *label_noise).map(|_| 0),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses process arguments, with the configuration schema in the help text.
pub fn main() -> i32 {
    let help = schema_help();
    let cmd = Cli::command()
        .mut_subcommand("train", |c| c.after_help(help.clone()))
        .mut_subcommand("grid", |c| c.after_help(help.clone()));
    let matches = cmd.get_matches();
    match Cli::from_arg_matches(&matches) {
        Ok(cli) => run(cli),
        Err(e) => e.exit(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_ranges() {
        assert_eq!(
            parse_models("1..12").unwrap(),
            (1..=12).collect::<Vec<u8>>()
        );
        assert_eq!(parse_models("2, 5..6").unwrap(), vec![2, 5, 6]);
        assert!(parse_models("0..3").is_err());
        assert!(parse_models("3..1").is_err());
        assert!(parse_models("x").is_err());
        assert!(parse_models("1..14").is_err());
    }

    #[test]
    fn rate_ranges() {
        assert_eq!(
            parse_rates("0.1..0.5").unwrap(),
            vec![0.1, 0.2, 0.3, 0.4, 0.5]
        );
        assert_eq!(parse_rates("0.1").unwrap(), vec![0.1]);
        assert_eq!(parse_rates("0.1,0.2").unwrap(), vec![0.1, 0.2]);
        assert!(parse_rates("0.15..0.3").is_err());
        assert!(parse_rates("1.0").is_err());
    }

    #[test]
    fn help_lists_schema() {
        Cli::command().debug_assert();
        let help = schema_help();
        for k in crate::config::SCHEMA {
            assert!(help.contains(k.name));
        }
    }
}
