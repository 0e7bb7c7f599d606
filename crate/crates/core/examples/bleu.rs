//! Score a handful of hypotheses against references with corpus BLEU.
//!
//!     cargo run --example bleu

use kdlab::bleu::{corpus_bleu, sentence_bleu, Smoothing};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn main() -> kdlab::Result<()> {
    let refs: Vec<Vec<String>> = ["the cat sat on the mat", "a quick brown fox jumps", "it is raining again today"]
        .iter()
        .map(|s| toks(s))
        .collect();
    let hyps: Vec<Vec<String>> = ["the cat sat on a mat", "a quick brown fox jumps", "it rains today"]
        .iter()
        .map(|s| toks(s))
        .collect();
    let report = corpus_bleu(&hyps, &refs, 4, Smoothing::None)?;
    print!("{}", report.breakdown());
    println!("{}", report.to_line());
    for (h, r) in hyps.iter().zip(&refs) {
        println!("sentence BLEU (smoothed) {:6.2}  {}", sentence_bleu(h, r), h.join(" "));
    }
    Ok(())
}
