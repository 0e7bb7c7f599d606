//! Save a model with its optimizer state, load it back and show that the
//! outputs agree bit for bit; then corrupt the blob and inspect the error.
//!
//!     cargo run --example checkpoint

use kdlab::corpus::{generate_task, Batch, TaskKind, TaskSpec};
use kdlab::model::{ModelConfig, TransformerModel};
use kdlab::tensor::Graph;
use kdlab::train::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};

fn logits(model: &TransformerModel, batch: &Batch) -> kdlab::Result<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    let mut f = model.forward(&mut g, false);
    let mem = f.encode(batch.src_ids())?;
    let out = f.decode(batch.tgt_ids(), mem, &batch.src_pad)?;
    Ok(g.value(out).data().to_vec())
}

fn main() -> kdlab::Result<()> {
    let task = TaskSpec::new(TaskKind::Copy, 20, (3, 6), 7);
    let data = generate_task(&task, 16, 1)?;
    let pairs: Vec<(&[usize], &[usize])> = data.pairs.iter().map(|p| (p.src.as_slice(), p.tgt.as_slice())).collect();
    let batch = Batch::from_pairs((0..pairs.len()).collect(), &pairs);

    let model = TransformerModel::build(ModelConfig::tiny(task.vocab_size, 16, 2, 1, 32), 1)?;
    let cfg = TrainConfig {
        accumulation_steps: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg, &data, &data, None)?;
    for _ in 0..5 {
        trainer.step(std::slice::from_ref(&batch))?;
    }

    let dir = std::env::temp_dir().join(format!("kdlab-checkpoint-{}", std::process::id()));
    save_checkpoint(&trainer.checkpoint(None), &dir)?;
    let restored = load_checkpoint(&dir)?;
    println!("saved step {} with {} tensors to {}", restored.step, restored.params.len(), dir.display());

    let mut original = trainer.model.clone();
    original.eval();
    let same = logits(&original, &batch)? == logits(&restored.model()?, &batch)?;
    println!("outputs identical after reload: {same}");

    let blob = dir.join("tensors.bin");
    let len = std::fs::metadata(&blob).map_err(|e| kdlab::Error::Input(e.to_string()))?.len();
    std::fs::OpenOptions::new()
        .write(true)
        .open(&blob)
        .and_then(|f| f.set_len(len / 2))
        .map_err(|e| kdlab::Error::Input(e.to_string()))?;
    match load_checkpoint(&dir) {
        Ok(_) => println!("unexpectedly loaded a truncated checkpoint"),
        Err(e) => println!("truncated checkpoint rejected: {e}"),
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
