//! `phrasetrans` command line.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bleu::{corpus_bleu, SignatureInfo};
use crate::bpe::{learn_bpe, undo_bpe_line_mode, BpeModel, WordMode};
use crate::checkpoint::{average_checkpoint_files, list_checkpoints, Checkpoint};
use crate::config::{load_config_with, RunConfig};
use crate::corpus::{corpus_stats, read_lines, ParallelCorpus, Vocab};
use crate::decoding::{translate, BeamOptions};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenize::Tokenizer;
use crate::train::{train_loop, CheckpointSink};

#[derive(Debug, Parser)]
#[command(name = "phrasetrans", version, about = "Phrase-attention Transformer translation toolkit")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every source of randomness (overrides `train.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration override, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn BPE merges from a text file.
    LearnBpe(LearnBpeArgs),
    /// Segment a text file with learned merges.
    ApplyBpe(ApplyBpeArgs),
    /// Train a model; writes checkpoints and vocabularies to `data.output_dir`.
    Train(TrainArgs),
    /// Translate a segmented source file with a checkpoint.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Score(ScoreArgs),
    /// Average checkpoints parameter-wise.
    Average(AverageArgs),
    /// Corpus statistics of a parallel corpus.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct LearnBpeArgs {
    #[arg(long)]
    src: PathBuf,
    /// Number of merge operations.
    #[arg(long, default_value_t = 4000)]
    ops: usize,
    #[arg(long, default_value = "whitespace")]
    mode: WordMode,
    /// Merge file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ApplyBpeArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    merges: PathBuf,
    #[arg(long, default_value = "whitespace")]
    mode: WordMode,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training source file (overrides `data.train_src`).
    #[arg(long)]
    src: Option<PathBuf>,
    /// Training target file (overrides `data.train_tgt`).
    #[arg(long)]
    tgt: Option<PathBuf>,
    /// Output directory (overrides `data.output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long = "max-len", default_value_t = 200)]
    max_len: usize,
    /// Rank beam hypotheses by total rather than per-token log-probability.
    #[arg(long)]
    no_length_norm: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value = "13a")]
    tok: Tokenizer,
    /// Language pair for the signature, e.g. `vi-zh`.
    #[arg(long)]
    lang: Option<String>,
    /// Version reported in the signature.
    #[arg(long = "signature-version")]
    signature_version: Option<String>,
}

#[derive(Debug, Args)]
struct AverageArgs {
    /// Checkpoint files to average.
    inputs: Vec<PathBuf>,
    /// Average the newest `--last` checkpoints found in this directory instead.
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    last: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long = "src-mode", default_value = "whitespace")]
    src_mode: WordMode,
    #[arg(long = "tgt-mode", default_value = "whitespace")]
    tgt_mode: WordMode,
}

/// Parses `argv` (program name first) and runs the subcommand; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let load = || -> Result<RunConfig> {
        let mut cfg = load_config_with(cli.config.as_deref(), &cli.set)?;
        if let Some(seed) = cli.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    };
    match &cli.command {
        Command::LearnBpe(a) => {
            let lines = read_lines(&a.src)?;
            let model = learn_bpe(&lines, a.ops, a.mode);
            let mut f = io::BufWriter::new(fs::File::create(&a.out)?);
            model.write_merges(&mut f)?;
            f.flush()?;
            log::info!("learned {} merges", model.merges().len());
        }
        Command::ApplyBpe(a) => {
            let model = BpeModel::read_merges(BufReader::new(fs::File::open(&a.merges)?), a.mode)?;
            let lines = read_lines(&a.src)?;
            write_lines(a.out.as_deref(), model.apply_lines(lines.iter().map(String::as_str)))?;
        }
        Command::Train(a) => {
            let mut cfg = load()?;
            if a.src.is_some() {
                cfg.data.train_src = a.src.clone();
            }
            if a.tgt.is_some() {
                cfg.data.train_tgt = a.tgt.clone();
            }
            if a.out.is_some() {
                cfg.data.output_dir = a.out.clone();
            }
            run_train(cfg)?;
        }
        Command::Translate(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let cfg = RunConfig::from_json(&ckpt.config)?;
            let src_vocab = read_vocab(cfg.data.src_vocab.as_deref(), "src_vocab")?;
            let tgt_vocab = read_vocab(cfg.data.tgt_vocab.as_deref(), "tgt_vocab")?;
            let model = Model::from_tensors(cfg.model.clone(), ckpt.tensors)?;
            let opts = BeamOptions { beam_size: a.beam, max_len: a.max_len, length_norm: !a.no_length_norm };
            let limit = model.config().max_len.saturating_sub(1);
            let mut out = Vec::new();
            for line in read_lines(&a.src)? {
                let mut ids = src_vocab.encode(&line);
                ids.truncate(limit);
                let hyp = translate(&model, &ids, BeamOptions { max_len: opts.max_len.min(limit), ..opts })?;
                out.push(undo_bpe_line_mode(&tgt_vocab.decode(&hyp), cfg.data.tgt_mode));
            }
            write_lines(a.out.as_deref(), out)?;
        }
        Command::Score(a) => {
            let hyps = read_lines(&a.hyp)?;
            let refs = read_lines(&a.reference)?;
            let mut info = SignatureInfo { lang: a.lang.clone(), ..SignatureInfo::default() };
            if let Some(v) = &a.signature_version {
                info.version = v.clone();
            }
            println!("{}", corpus_bleu(&hyps, &refs, a.tok, &info)?.report());
        }
        Command::Average(a) => {
            let mut inputs = a.inputs.clone();
            if let Some(dir) = &a.dir {
                let all = list_checkpoints(dir)?;
                inputs.extend(all[all.len().saturating_sub(a.last)..].iter().cloned());
            }
            if inputs.is_empty() {
                return Err(Error::Invalid("no checkpoints to average".into()));
            }
            let avg = average_checkpoint_files(&inputs)?;
            avg.save(&a.out)?;
            log::info!("averaged {} checkpoints into {}", inputs.len(), a.out.display());
        }
        Command::Stats(a) => {
            let corpus = ParallelCorpus::load(&a.src, &a.tgt)?;
            print!("{}", corpus_stats(&corpus, a.src_mode, a.tgt_mode));
        }
    }
    Ok(())
}

fn read_vocab(path: Option<&Path>, key: &str) -> Result<Vocab> {
    let path = path.ok_or_else(|| Error::Config(format!("data.{key} is not set")))?;
    Vocab::read(BufReader::new(fs::File::open(path)?))
}

fn write_lines(path: Option<&Path>, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w: Box<dyn Write> = match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    };
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn vocab_for(
    given: Option<&Path>,
    out_dir: &Path,
    file: &str,
    lines: &mut dyn Iterator<Item = &str>,
) -> Result<(Vocab, PathBuf)> {
    if let Some(p) = given {
        if p.exists() {
            return Ok((Vocab::read(BufReader::new(fs::File::open(p)?))?, p.to_path_buf()));
        }
    }
    let vocab = Vocab::build(lines);
    let path = given.map(Path::to_path_buf).unwrap_or_else(|| out_dir.join(file));
    let mut f = io::BufWriter::new(fs::File::create(&path)?);
    vocab.write(&mut f)?;
    f.flush()?;
    Ok((vocab, path))
}

/// Builds vocabularies, trains, and leaves checkpoints plus the resolved config in the output directory.
pub fn run_train(mut cfg: RunConfig) -> Result<()> {
    let need =
        |p: &Option<PathBuf>, key: &str| p.clone().ok_or_else(|| Error::Config(format!("data.{key} is not set")));
    let out_dir = need(&cfg.data.output_dir, "output_dir")?;
    let train =
        ParallelCorpus::load(&need(&cfg.data.train_src, "train_src")?, &need(&cfg.data.train_tgt, "train_tgt")?)?;
    if train.is_empty() {
        return Err(Error::Invalid("training corpus has no usable pairs".into()));
    }
    fs::create_dir_all(&out_dir)?;
    let (src_vocab, sp) = vocab_for(cfg.data.src_vocab.as_deref(), &out_dir, "vocab.src", &mut train.sources())?;
    let (tgt_vocab, tp) = vocab_for(cfg.data.tgt_vocab.as_deref(), &out_dir, "vocab.tgt", &mut train.targets())?;
    cfg.data.src_vocab = Some(sp);
    cfg.data.tgt_vocab = Some(tp);
    for (name, configured, actual) in [
        ("src_vocab_size", &mut cfg.model.src_vocab_size, src_vocab.len()),
        ("tgt_vocab_size", &mut cfg.model.tgt_vocab_size, tgt_vocab.len()),
    ] {
        if *configured != 0 && *configured != actual {
            return Err(Error::Config(format!("model.{name} is {configured} but the vocabulary has {actual} symbols")));
        }
        *configured = actual;
    }
    let dev = match (&cfg.data.dev_src, &cfg.data.dev_tgt) {
        (Some(s), Some(t)) => ParallelCorpus::load(s, t)?.encode(&src_vocab, &tgt_vocab),
        _ => Vec::new(),
    };
    let pairs = train.encode(&src_vocab, &tgt_vocab);
    let echo = cfg.to_json_line();
    fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    log::info!("model has {} parameters", model.num_parameters());
    let report =
        train_loop(&mut model, &cfg.train, &pairs, &dev, Some(CheckpointSink { dir: &out_dir, config: &echo }))?;
    if let Some(last) = report.epochs.last() {
        println!("trained {} steps over {} epochs; final train loss {:.4}", report.steps, last.epoch, last.train_loss);
    }
    Ok(())
}
