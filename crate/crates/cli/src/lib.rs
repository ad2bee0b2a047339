//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fnetae::app::{
    bench_mixing, export_results, generate, BenchConfig, GenerationRecord, GenerationRequest, Strategy,
};
use fnetae::corpus::{
    build_vocabulary, encode_story, load_corpus, synthetic_stories, EncodedStory, StoryRecord, Vocabulary,
};
use fnetae::model::{count_params, FNetAutoencoder, ModelConfig};
use fnetae::numerics::AdamConfig;
use fnetae::training::{split_validation, Checkpoint, TrainConfig, Trainer};
use fnetae::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fnetae", version, about = "Fourier-mixing text autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a frequency-ranked vocabulary from a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = usize::MAX)]
        limit: usize,
        #[arg(long = "vocab-size", visible_alias = "vocab", default_value_t = 10_000)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus, writing a checkpoint and its vocabulary sidecar.
    Train(TrainArgs),
    /// Report loss and accuracy of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = usize::MAX)]
        limit: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Generate text from seed texts.
    Generate {
        #[command(flatten)]
        gen: GenArgs,
        /// Seed texts; one generation per text.
        #[arg(required = true)]
        seed_text: Vec<String>,
    },
    /// Print the trainable parameter count of a configuration.
    CountParams {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Time Fourier mixing against multi-head self-attention.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![128, 150, 256, 512])]
        seq_lens: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate from every seed text in a corpus file and write a results JSON array.
    ExportResults {
        #[command(flatten)]
        gen: GenArgs,
        /// Seed texts, one story per line (plain text or JSONL).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = usize::MAX)]
        limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a deterministic synthetic news corpus as JSONL.
    SynthCorpus {
        #[arg(long, default_value_t = 1000)]
        limit: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long = "vocab-size", visible_alias = "vocab", default_value_t = 10_000)]
    vocab_size: usize,
    #[arg(long, default_value_t = 150)]
    max_len: usize,
    #[arg(long, default_value_t = 128)]
    embed: usize,
    #[arg(long, default_value_t = 64)]
    latent: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    key_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
}

impl ModelArgs {
    fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_len: self.max_len,
            embed_dim: self.embed,
            latent_dim: self.latent,
            num_heads: self.heads,
            key_dim: self.key_dim,
            dropout: self.dropout,
            ..ModelConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = usize::MAX)]
    limit: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "model.fnae")]
    checkpoint: PathBuf,
    /// Save every N epochs; the last epoch is always saved.
    #[arg(long, default_value_t = 1)]
    checkpoint_every: usize,
    /// Fraction of stories held out for validation.
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    /// Continue from the checkpoint instead of starting fresh.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StrategyArg::Greedy)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to the model's sequence length.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StrategyArg {
    Greedy,
    Topk,
}

impl GenArgs {
    fn strategy(&self) -> Strategy {
        match self.strategy {
            StrategyArg::Greedy => Strategy::Greedy,
            StrategyArg::Topk => Strategy::TopK {
                k: self.k,
                seed: self.seed,
            },
        }
    }
}

/// Path of the vocabulary stored next to `checkpoint`.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut out = std::io::stdout().lock();
    match run(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            2
        }
    }
}

fn write_line(out: &mut impl Write, line: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn run(command: Command, out: &mut impl Write) -> Result<()> {
    match command {
        Command::BuildVocab {
            corpus,
            limit,
            vocab_size,
            out: path,
        } => {
            let loaded = load_corpus(&corpus, limit)?;
            let vocab = build_vocabulary(&loaded.stories, vocab_size)?;
            vocab.save(&path)?;
            write_line(
                out,
                format_args!(
                    "{} tokens from {} stories ({} skipped) -> {}",
                    vocab.len(),
                    loaded.stories.len(),
                    loaded.skipped,
                    path.display()
                ),
            )
        }
        Command::Train(args) => train(args, out),
        Command::Eval {
            corpus,
            checkpoint,
            limit,
            batch,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let vocab = Vocabulary::load(vocab_path(&checkpoint))?;
            let loaded = load_corpus(&corpus, limit)?;
            let encoded = encode_all(&vocab, &loaded.stories, ckpt.config.max_len)?;
            let config = TrainConfig {
                batch_size: batch,
                ..TrainConfig::default()
            };
            let trainer = Trainer::<f32>::from_checkpoint(&ckpt, config)?;
            let m = trainer.evaluate(&encoded)?;
            eprintln!("tokens/sec {:.0}", m.tokens_per_sec);
            write_line(
                out,
                format_args!(
                    "stories={} loss={:.6} acc_all={:.6} acc_masked={:.6}{}",
                    encoded.len(),
                    m.loss,
                    m.acc_all,
                    m.acc_masked,
                    if m.masked_defined { "" } else { " (no non-pad targets)" }
                ),
            )
        }
        Command::Generate { gen, seed_text } => {
            let (model, ckpt, id, vocab) = load_for_generation(&gen)?;
            let store = ckpt.to_store::<f32>();
            for text in seed_text {
                let req = request(&gen, text, model.config().max_len);
                let g = generate(&model, &store, &vocab, &req)?;
                write_line(out, format_args!("{}", g.text))?;
            }
            let _ = id;
            Ok(())
        }
        Command::CountParams { model } => {
            let config = model.config(model.vocab_size);
            config.validate()?;
            write_line(out, format_args!("{}", count_params(&config)))
        }
        Command::Bench {
            seq_lens,
            reps,
            seed,
            out: path,
        } => {
            let config = BenchConfig {
                seed,
                ..BenchConfig::default()
            };
            let report = bench_mixing(&config, &seq_lens, reps)?;
            write!(out, "{report}").map_err(|e| Error::io("<stdout>", e))?;
            if let Some(path) = path {
                let json = serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Command::ExportResults {
            gen,
            corpus,
            limit,
            out: path,
        } => {
            let (model, ckpt, id, vocab) = load_for_generation(&gen)?;
            let store = ckpt.to_store::<f32>();
            let seeds = load_corpus(&corpus, limit)?;
            let mut records = Vec::with_capacity(seeds.stories.len());
            for story in seeds.stories {
                let req = request(&gen, story.text, model.config().max_len);
                let g = generate(&model, &store, &vocab, &req)?;
                records.push(GenerationRecord {
                    seed: req.seed_text,
                    generated: g.text,
                    strategy: req.strategy.to_string(),
                    checkpoint_id: id.clone(),
                });
            }
            export_results(&records, &path)?;
            write_line(out, format_args!("{} results -> {}", records.len(), path.display()))
        }
        Command::SynthCorpus { limit, seed, out: path } => {
            let mut text = String::new();
            for s in synthetic_stories(limit, seed) {
                text.push_str(&serde_json::to_string(&s).map_err(|e| Error::InvalidArgument(e.to_string()))?);
                text.push('\n');
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            write_line(out, format_args!("{limit} stories -> {}", path.display()))
        }
    }
}

fn request(gen: &GenArgs, seed_text: String, max_len: usize) -> GenerationRequest {
    GenerationRequest {
        seed_text,
        max_steps: gen.max_steps.unwrap_or(max_len),
        strategy: gen.strategy(),
    }
}

fn load_for_generation(gen: &GenArgs) -> Result<(FNetAutoencoder<f32>, Checkpoint, String, Vocabulary)> {
    let path = gen
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("checkpoint required (pass --checkpoint PATH)".into()))?;
    let (ckpt, id) = Checkpoint::load_with_id(path)?;
    let vocab = Vocabulary::load(vocab_path(path))?;
    let model = FNetAutoencoder::new(ckpt.config.clone())?;
    Ok((model, ckpt, id, vocab))
}

fn encode_all(vocab: &Vocabulary, stories: &[StoryRecord], max_len: usize) -> Result<Vec<EncodedStory>> {
    stories.iter().map(|s| encode_story(vocab, s, max_len)).collect()
}

fn train(args: TrainArgs, out: &mut impl Write) -> Result<()> {
    let loaded = load_corpus(&args.corpus, args.limit)?;
    let (train_stories, val_stories) = split_validation(&loaded.stories, args.val_frac);
    let config = TrainConfig {
        batch_size: args.batch,
        epochs: args.epochs,
        adam: AdamConfig {
            lr: args.lr,
            ..AdamConfig::default()
        },
        seed: args.seed,
        max_stories: args.limit,
        val_fraction: args.val_frac,
        checkpoint: Some(args.checkpoint.clone()),
        checkpoint_interval: args.checkpoint_every,
    };
    let (mut trainer, vocab) = if args.resume {
        let ckpt = Checkpoint::load(&args.checkpoint)?;
        let vocab = Vocabulary::load(vocab_path(&args.checkpoint))?;
        (Trainer::<f32>::from_checkpoint(&ckpt, config)?, vocab)
    } else {
        let vocab = build_vocabulary(&train_stories, args.model.vocab_size)?;
        vocab.save(vocab_path(&args.checkpoint))?;
        (Trainer::<f32>::new(args.model.config(vocab.len()), config)?, vocab)
    };
    let max_len = trainer.model().config().max_len;
    let train_enc = encode_all(&vocab, &train_stories, max_len)?;
    let val_enc = encode_all(&vocab, &val_stories, max_len)?;
    if train_enc.is_empty() {
        return Err(Error::NoData);
    }
    write_line(
        out,
        format_args!(
            "stories train={} val={} skipped={} vocab={} params={}",
            train_enc.len(),
            val_enc.len(),
            loaded.skipped,
            vocab.len(),
            count_params(trainer.model().config())
        ),
    )?;
    let mut io_err = None;
    trainer.fit(&train_enc, &val_enc, |r| {
        eprintln!("epoch {} tokens/sec {:.0}", r.train.epoch, r.train.tokens_per_sec);
        let mut line = format!(
            "epoch {} loss={:.6} acc_all={:.6} acc_masked={:.6}",
            r.train.epoch, r.train.loss, r.train.acc_all, r.train.acc_masked
        );
        if let Some(v) = &r.val {
            line.push_str(&format!(
                " val_loss={:.6} val_acc_all={:.6} val_acc_masked={:.6}",
                v.loss, v.acc_all, v.acc_masked
            ));
        }
        if let Err(e) = writeln!(out, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io("<stdout>", e));
    }
    write_line(out, format_args!("checkpoint -> {}", args.checkpoint.display()))
}
