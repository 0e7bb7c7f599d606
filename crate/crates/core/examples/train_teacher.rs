//! Train a teacher on a synthetic lexicon-reorder task and report dev BLEU.
//!
//!     cargo run --release --example train_teacher -- [pairs] [epochs]

use std::time::Instant;

use kdlab::corpus::{generate_task, TaskKind, TaskSpec};
use kdlab::decode::{translate_all, BeamConfig, DecodeMode};
use kdlab::model::{ModelConfig, TransformerModel};
use kdlab::train::{token_accuracy, Regime, TrainConfig, Trainer};

fn main() -> kdlab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let pairs: usize = args.next().map_or(2000, |a| a.parse().expect("pairs"));
    let epochs: usize = args.next().map_or(10, |a| a.parse().expect("epochs"));

    let task = TaskSpec::new(TaskKind::LexiconReorder, 40, (4, 10), 7);
    let mut train = generate_task(&task, pairs + 200, 1)?;
    let dev = train.split_off(pairs);

    let model = TransformerModel::build(ModelConfig::tiny(task.vocab_size, 64, 4, 2, 128), 1)?;
    println!("parameters: {}", model.param_count());
    let cfg = TrainConfig {
        regime: Regime::Teacher,
        max_epochs: epochs,
        base_lr: 2e-3,
        warmup_steps: 100,
        accumulation_steps: 1,
        token_budget: 512,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = Trainer::new(model, cfg, &train, &dev, None)?.run()?;
    println!(
        "{} steps in {:.1}s, best dev BLEU {:.2} at epoch {}",
        out.steps,
        start.elapsed().as_secs_f64(),
        out.best_dev_bleu,
        out.best_epoch
    );
    println!("dev token accuracy (teacher forcing): {:.4}", token_accuracy(&out.model, &dev)?);

    let srcs = dev.sources();
    let start = Instant::now();
    let hyps = translate_all(&out.model, &srcs, None, DecodeMode::Beam, &BeamConfig::default(), 64)?;
    let bleu = kdlab::bleu::corpus_bleu(&hyps, &dev.targets(), 4, kdlab::bleu::Smoothing::None)?;
    println!("beam-4 dev {} ({:.1}s)", bleu.to_line(), start.elapsed().as_secs_f64());
    Ok(())
}
