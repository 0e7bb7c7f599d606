//! Train a small model on the reverse task, then compare greedy, beam and
//! teacher-forced decoding of a few held-out sources.
//!
//!     cargo run --release --example beam_decoding

use kdlab::bleu::{corpus_bleu, Smoothing};
use kdlab::corpus::{generate_task, TaskKind, TaskSpec};
use kdlab::decode::{beam_search, translate_all, BeamConfig, DecodeMode};
use kdlab::model::{ModelConfig, TransformerModel};
use kdlab::train::{TrainConfig, Trainer};

fn main() -> kdlab::Result<()> {
    let task = TaskSpec::new(TaskKind::Reverse, 24, (3, 8), 7);
    let mut train = generate_task(&task, 2100, 1)?;
    let test = train.split_off(2000);
    let cfg = TrainConfig {
        base_lr: 2e-3,
        warmup_steps: 100,
        accumulation_steps: 1,
        token_budget: 512,
        max_epochs: 8,
        dev_sentences: 50,
        ..TrainConfig::default()
    };
    let model = TransformerModel::build(ModelConfig::tiny(task.vocab_size, 32, 4, 1, 64), 1)?;
    let out = Trainer::new(model, cfg, &train, &test, None)?.run()?;
    let model = out.model;

    let srcs = test.sources();
    let refs = test.targets();
    let beam = BeamConfig::default();
    for mode in [DecodeMode::Greedy, DecodeMode::Beam, DecodeMode::Tf] {
        let gold = (mode == DecodeMode::Tf).then_some(refs.as_slice());
        let hyps = translate_all(&model, &srcs, gold, mode, &beam, 64)?;
        let bleu = corpus_bleu(&hyps, &refs, 4, Smoothing::None)?.bleu;
        println!("{mode:?}: BLEU {bleu:.2}");
    }
    for src in srcs.iter().take(3) {
        let h = beam_search::<f32>(&model, src, &beam)?;
        println!("{src:?} -> {:?} (log p {:.3}, score {:.3})", h.tokens, h.log_prob, h.score(beam.length_penalty));
    }
    Ok(())
}
