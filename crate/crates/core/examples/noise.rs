//! Corrupt a few synthetic sources with each noise profile and report the
//! observed deletion and substitution rates.
//!
//!     cargo run --example noise

use kdlab::corpus::{generate_task, TaskKind, TaskSpec};
use kdlab::noise::{corrupt_with_stats, derive_seed, NoiseProfile};

fn main() -> kdlab::Result<()> {
    let task = TaskSpec::new(TaskKind::LexiconReorder, 64, (8, 16), 7);
    let corpus = generate_task(&task, 5000, 1)?;
    let first = &corpus.pairs[0].src;
    for profile in [NoiseProfile::none(), NoiseProfile::moderate(), NoiseProfile::high()] {
        let (mut input, mut deleted, mut kept, mut substituted, mut shuffled) = (0, 0, 0, 0, 0);
        for (i, pair) in corpus.pairs.iter().enumerate() {
            let (out, s) = corrupt_with_stats(&pair.src, &profile, task.vocab_size, derive_seed(9, i as u64))?;
            input += s.input_tokens;
            deleted += s.deleted;
            kept += out.len();
            substituted += s.substituted;
            shuffled += usize::from(s.shuffled);
        }
        let example = corrupt_with_stats(first, &profile, task.vocab_size, derive_seed(9, 0))?.0;
        println!(
            "{:<9} deleted {:.3}  substituted {:.3}  shuffled sentences {:.3}",
            profile.name,
            deleted as f64 / input as f64,
            substituted as f64 / kept.max(1) as f64,
            shuffled as f64 / corpus.len() as f64
        );
        println!("          {first:?} -> {example:?}");
    }
    Ok(())
}
