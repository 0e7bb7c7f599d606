use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use kdlab::bleu::{corpus_bleu, Smoothing};
use kdlab::corpus::{corpus_paths, generate_task, read_sentences, write_sentences, ParallelCorpus, TaskKind, TaskSpec, Vocab};
use kdlab::decode::{translate_all, BeamConfig, DecodeMode};
use kdlab::distill::GateTrace;
use kdlab::harness::{ExperimentSpec, Lab, Study};
use kdlab::model::{ModelConfig, TransformerModel};
use kdlab::noise::{corrupt, derive_seed, NoiseProfile};
use kdlab::train::{load_checkpoint, save_checkpoint, Checkpoint, Regime, Teacher, TrainConfig, Trainer};
use kdlab::{Error, Result};

#[derive(Parser)]
#[command(name = "kdlab", version, about = "Token-, sentence-level and hybrid distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus (train/dev/test) and its vocabulary.
    GenData {
        #[arg(long, default_value = "lexicon-reorder")]
        task: TaskKind,
        #[arg(long, default_value_t = 512)]
        vocab_size: usize,
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        #[arg(long, default_value_t = 20)]
        max_len: usize,
        #[arg(long, default_value_t = 20_000)]
        train: usize,
        #[arg(long, default_value_t = 1_000)]
        dev: usize,
        #[arg(long, default_value_t = 1_000)]
        test: usize,
        /// Seeds the lexicon.
        #[arg(long, default_value_t = 7)]
        task_seed: u64,
        /// Seeds sentence sampling.
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply source-side noise to a file of sentences.
    Corrupt {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// none, moderate or high.
        #[arg(long, default_value = "moderate")]
        profile: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a model on gold targets.
    TrainTeacher {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        arch: ArchArgs,
    },
    /// Train a student against a teacher checkpoint.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// Overrides the regime of the config file.
        #[arg(long)]
        regime: Option<Regime>,
        /// Precomputed pseudo-targets, one per training pair.
        #[arg(long)]
        pseudo_targets: Option<PathBuf>,
        /// Where to write the per-epoch gate trace (hybrid only).
        #[arg(long)]
        gate_trace: Option<PathBuf>,
    },
    /// Decode a file of source sentences.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "beam")]
        mode: DecodeMode,
        #[arg(long, default_value_t = 4)]
        width: usize,
        #[arg(long, default_value_t = 0.6)]
        alpha: f64,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        /// Gold targets, required by teacher forcing.
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        smooth: bool,
    },
    /// Run a comparison study: size_sweep, noise_sweep, decoding or hybrid_vs_single.
    Experiment {
        study: Study,
        /// Experiment spec (TOML); defaults to the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// quick or desk.
        #[arg(long, default_value = "quick")]
        preset: String,
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the gate trace stored in a CSV file or a checkpoint.
    GateTrace {
        path: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// TOML file whose keys are TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Training split prefix inside the data directory.
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct ArchArgs {
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    ffn: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long)]
    untied: bool,
}

impl ArchArgs {
    fn config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            dropout_p: self.dropout,
            tie_embeddings: !self.untied,
            ..ModelConfig::tiny(vocab, self.d_model, self.heads, self.layers, self.ffn)
        }
    }
}

struct Splits {
    vocab: Vocab,
    train: ParallelCorpus,
    dev: ParallelCorpus,
}

fn load_splits(run: &RunArgs) -> Result<Splits> {
    let vocab = Vocab::load(run.data.join("vocab.txt"))?;
    let read = |name: &str| {
        let (s, t) = corpus_paths(&run.data.join(name));
        ParallelCorpus::read(&vocab, s, t)
    };
    Ok(Splits {
        train: read(&run.split)?,
        dev: read("dev")?,
        vocab,
    })
}

fn train_config(run: &RunArgs) -> Result<TrainConfig> {
    run.config.as_ref().map_or_else(|| Ok(TrainConfig::default()), TrainConfig::load)
}

fn finish(out: kdlab::train::TrainOutcome, vocab: &Vocab, cfg: TrainConfig, dir: &Path) -> Result<()> {
    if let Some(step) = out.diverged {
        eprintln!("warning: training diverged at step {step}; saving the last good checkpoint");
    }
    let mut ck = Checkpoint::from_model(&out.model, Some(vocab));
    ck.train_config = Some(cfg);
    ck.step = out.steps;
    ck.epoch = out.history.len();
    ck.history = out.history.clone();
    ck.step_losses = out.step_losses.clone();
    ck.gate = out.gate.clone();
    save_checkpoint(&ck, dir)?;
    println!(
        "best dev BLEU {:.2} at epoch {} after {} steps; checkpoint in {}",
        out.best_dev_bleu,
        out.best_epoch,
        out.steps,
        dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            task,
            vocab_size,
            min_len,
            max_len,
            train,
            dev,
            test,
            task_seed,
            seed,
            out,
        } => {
            let spec = TaskSpec::new(task, vocab_size, (min_len, max_len), task_seed);
            let mut corpus = generate_task(&spec, train + dev + test, seed)?;
            let mut dev_c = corpus.split_off(train);
            let test_c = dev_c.split_off(dev);
            std::fs::create_dir_all(&out).map_err(|source| Error::Io {
                path: out.display().to_string(),
                source,
            })?;
            let vocab = Vocab::synthetic(vocab_size);
            vocab.save(out.join("vocab.txt"))?;
            corpus.write(&vocab, out.join("train"))?;
            dev_c.write(&vocab, out.join("dev"))?;
            test_c.write(&vocab, out.join("test"))?;
            let task_path = out.join("task.json");
            std::fs::write(&task_path, serde_json::to_string_pretty(&spec).expect("task serializes")).map_err(|source| {
                Error::Io {
                    path: task_path.display().to_string(),
                    source,
                }
            })?;
            println!("wrote {train}/{dev}/{test} pairs to {}", out.display());
        }
        Command::Corrupt {
            vocab,
            input,
            output,
            profile,
            seed,
        } => {
            let vocab = Vocab::load(vocab)?;
            let profile = NoiseProfile::preset(&profile)?;
            let sents = read_sentences(&vocab, &input)?;
            let noisy = sents
                .iter()
                .enumerate()
                .map(|(i, s)| corrupt(s, &profile, vocab.len(), derive_seed(seed, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            write_sentences(&vocab, &output, &noisy)?;
            println!("corrupted {} sentences with profile {}", noisy.len(), profile.name);
        }
        Command::TrainTeacher { run, arch } => {
            let s = load_splits(&run)?;
            let mut cfg = train_config(&run)?;
            cfg.regime = Regime::Teacher;
            let model = TransformerModel::build(arch.config(s.vocab.len()), cfg.seed)?;
            println!("training {} parameters", model.param_count());
            let out = Trainer::new(model, cfg.clone(), &s.train, &s.dev, None)?.run()?;
            finish(out, &s.vocab, cfg, &run.out)?;
        }
        Command::Distill {
            run,
            arch,
            teacher,
            regime,
            pseudo_targets,
            gate_trace,
        } => {
            let s = load_splits(&run)?;
            let mut cfg = train_config(&run)?;
            if let Some(r) = regime {
                cfg.regime = r;
            }
            if cfg.regime == Regime::Teacher {
                return Err(Error::Config("distill needs regime token_kd, sentence_kd or hybrid".into()));
            }
            let tmodel = load_checkpoint(&teacher)?.model()?;
            let mut t = Teacher::new(tmodel);
            if matches!(cfg.regime, Regime::TokenKd | Regime::Hybrid) {
                t.compute_rows(&s.train, cfg.top_k)?;
            }
            if matches!(cfg.regime, Regime::SentenceKd | Regime::Hybrid) {
                match &pseudo_targets {
                    Some(p) => {
                        let pseudo = read_sentences(&s.vocab, p)?;
                        if pseudo.len() != s.train.len() {
                            return Err(Error::Input(format!(
                                "{} pseudo-targets for {} training pairs",
                                pseudo.len(),
                                s.train.len()
                            )));
                        }
                        t = t.with_pseudo_targets(pseudo);
                    }
                    None => t.compute_pseudo_targets(&s.train, &cfg)?,
                }
            }
            let model = TransformerModel::build(arch.config(s.vocab.len()), cfg.seed)?;
            println!("training {} parameters ({})", model.param_count(), cfg.regime.as_str());
            let out = Trainer::new(model, cfg.clone(), &s.train, &s.dev, Some(&t))?.run()?;
            if let (Some(path), Some(trace)) = (gate_trace, out.gate_trace()) {
                trace.write(&path)?;
            }
            finish(out, &s.vocab, cfg, &run.out)?;
        }
        Command::Translate {
            checkpoint,
            input,
            output,
            mode,
            width,
            alpha,
            max_len,
            gold,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let vocab = ck
                .vocab
                .clone()
                .ok_or_else(|| Error::Config("checkpoint has no vocabulary".into()))?;
            let model = ck.model()?;
            let srcs = read_sentences(&vocab, &input)?;
            let golds = gold.map(|g| read_sentences(&vocab, &g)).transpose()?;
            let beam = BeamConfig {
                width,
                length_penalty: alpha,
                max_len,
            };
            let hyps = translate_all(&model, &srcs, golds.as_deref(), mode, &beam, 64)?;
            write_sentences(&vocab, &output, &hyps)?;
            println!("translated {} sentences", hyps.len());
        }
        Command::Score { hyp, reference, smooth } => {
            let read = |p: &Path| -> Result<Vec<Vec<String>>> {
                let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                Ok(text.lines().map(|l| l.split_whitespace().map(String::from).collect()).collect())
            };
            let smoothing = if smooth { Smoothing::Floor } else { Smoothing::None };
            let r = corpus_bleu(&read(&hyp)?, &read(&reference)?, 4, smoothing)?;
            println!("{}", r.to_line());
            print!("{}", r.breakdown());
        }
        Command::Experiment {
            study,
            config,
            preset,
            seeds,
            out,
        } => {
            let mut spec = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|source| Error::Io {
                        path: p.display().to_string(),
                        source,
                    })?;
                    ExperimentSpec::from_toml(&text)?
                }
                None => match preset.as_str() {
                    "quick" => ExperimentSpec::quick(study),
                    "desk" => ExperimentSpec::desk_default(study),
                    other => return Err(Error::Config(format!("unknown preset {other:?}"))),
                },
            };
            spec.study = study;
            if let Some(n) = seeds {
                spec.seeds = (1..=n).collect();
            }
            spec.output_dir = Some(out.clone());
            let mut lab = Lab::new(spec)?;
            let report = lab.run(study)?;
            lab.write_outputs(&report, &out)?;
            print!("{}", report.to_markdown());
        }
        Command::GateTrace { path } => {
            let trace = if path.is_dir() {
                let ck = load_checkpoint(&path)?;
                let mut t = GateTrace::default();
                for r in &ck.history {
                    let g = r
                        .mean_g
                        .ok_or_else(|| Error::Input("checkpoint was not trained with a gate".into()))?;
                    t.record(r.epoch, g, r.train_loss, r.dev_bleu);
                }
                t
            } else {
                GateTrace::read(&path)?
            };
            print!("{}", trace.to_csv());
            if let (Some(a), Some(b)) = (trace.first_mean_g(), trace.last_mean_g()) {
                println!("mean g: {a:.4} -> {b:.4} over {} epochs", trace.rows.len());
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
