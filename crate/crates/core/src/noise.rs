//! Source-side text noise: token deletion, substitution and local shuffling.
//!
//! Operations run in a fixed order: deletion, then substitution, then the
//! index-jitter shuffle. Every call is a pure function of
//! `(sentence, profile, seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, NUM_SPECIALS};
use crate::{Error, Result};

/// Noise intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub name: String,
    /// Per-token deletion probability.
    pub delete_p: f64,
    /// Per-token substitution probability.
    pub substitute_p: f64,
    /// Per-sentence probability of applying the local shuffle.
    pub swap_sentence_p: f64,
    /// Maximum displacement of the shuffle.
    pub swap_k: usize,
}

impl NoiseProfile {
    pub fn none() -> Self {
        Self::custom("none", 0.0, 0.0, 0.0, 0)
    }

    pub fn moderate() -> Self {
        Self::custom("moderate", 0.10, 0.10, 0.50, 3)
    }

    pub fn high() -> Self {
        Self::custom("high", 0.10, 0.10, 1.00, 3)
    }

    pub fn custom(name: &str, delete_p: f64, substitute_p: f64, swap_sentence_p: f64, swap_k: usize) -> Self {
        Self {
            name: name.to_string(),
            delete_p,
            substitute_p,
            swap_sentence_p,
            swap_k,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::none()),
            "moderate" => Ok(Self::moderate()),
            "high" => Ok(Self::high()),
            other => Err(Error::Config(format!("unknown noise profile {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, p) in [
            ("delete_p", self.delete_p),
            ("substitute_p", self.substitute_p),
            ("swap_sentence_p", self.swap_sentence_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{field} = {p} is not a probability")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.delete_p == 0.0 && self.substitute_p == 0.0 && (self.swap_sentence_p == 0.0 || self.swap_k == 0)
    }
}

/// What one [`corrupt_with_stats`] call did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NoiseStats {
    pub input_tokens: usize,
    pub deleted: usize,
    pub substituted: usize,
    pub shuffled: bool,
}

pub fn corrupt(sentence: &[usize], profile: &NoiseProfile, vocab_size: usize, seed: u64) -> Result<Vec<usize>> {
    corrupt_with_stats(sentence, profile, vocab_size, seed).map(|(s, _)| s)
}

/// Apply `profile` to one sentence. Substitutes are drawn uniformly from
/// the non-special ids other than the replaced token.
pub fn corrupt_with_stats(
    sentence: &[usize],
    profile: &NoiseProfile,
    vocab_size: usize,
    seed: u64,
) -> Result<(Vec<usize>, NoiseStats)> {
    if sentence.is_empty() {
        return Err(Error::Input("cannot corrupt an empty sentence".into()));
    }
    profile.validate()?;
    if profile.substitute_p > 0.0 && vocab_size < NUM_SPECIALS + 2 {
        return Err(Error::Config(format!(
            "substitution needs at least two regular tokens, vocabulary has {vocab_size} ids"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = NoiseStats {
        input_tokens: sentence.len(),
        ..NoiseStats::default()
    };

    let mut out: Vec<usize> = sentence
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() >= profile.delete_p)
        .collect();
    if out.is_empty() {
        out.push(sentence[rng.gen_range(0..sentence.len())]);
    }
    stats.deleted = sentence.len() - out.len();

    for tok in out.iter_mut() {
        if rng.gen::<f64>() < profile.substitute_p {
            let mut r = rng.gen_range(NUM_SPECIALS..vocab_size - 1);
            if r >= *tok && *tok >= NUM_SPECIALS {
                r += 1;
            }
            *tok = r;
            stats.substituted += 1;
        }
    }

    if profile.swap_k > 0 && rng.gen::<f64>() < profile.swap_sentence_p {
        out = jitter_shuffle(&out, profile.swap_k, &mut rng);
        stats.shuffled = true;
    }
    Ok((out, stats))
}

/// Reorder by stable-sorting on `i + U[0, k]`.
fn jitter_shuffle(tokens: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let keys: Vec<f64> = (0..tokens.len())
        .map(|i| i as f64 + rng.gen_range(0.0..=k as f64))
        .collect();
    jitter_permutation(&keys)
        .into_iter()
        .map(|i| tokens[i])
        .collect()
}

/// Source index placed at each output position when sorting by `keys`
/// (stable, so equal keys keep their original order).
pub fn jitter_permutation(keys: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    order
}

/// Per-sentence seed derived from a master seed (SplitMix64 finalizer).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Corrupt the source side of every pair; targets stay untouched.
pub fn corrupt_sources(
    corpus: &ParallelCorpus,
    profile: &NoiseProfile,
    vocab_size: usize,
    master_seed: u64,
) -> Result<ParallelCorpus> {
    let mut out = corpus.clone();
    for (i, pair) in out.pairs.iter_mut().enumerate() {
        pair.src = corrupt(&pair.src, profile, vocab_size, derive_seed(master_seed, i as u64))?;
    }
    Ok(out)
}
