//! Inference: greedy decoding, length-normalized beam search and
//! teacher-forced prediction.
//!
//! Decoding recomputes the decoder over the whole prefix at every step (no
//! incremental state). PAD and BOS are never generated.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, BOS, EOS, PAD};
use crate::model::{Ids, TransformerModel};
use crate::tensor::{log_softmax_row, Graph, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    /// Finished hypotheses are ranked by `log_prob / len^length_penalty`.
    pub length_penalty: f64,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 4,
            length_penalty: 0.6,
            max_len: 64,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.max_len == 0 {
            return Err(Error::Config("beam width and max_len must be at least 1".into()));
        }
        if self.length_penalty < 0.0 || !self.length_penalty.is_finite() {
            return Err(Error::Config(format!("length penalty {} must be non-negative", self.length_penalty)));
        }
        Ok(())
    }
}

/// A (possibly unfinished) decoding hypothesis. `tokens` never include EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of the chosen tokens, EOS included.
    pub log_prob: f64,
    pub finished: bool,
    /// Decoding step at which EOS was emitted.
    pub finish_step: usize,
}

impl Hypothesis {
    /// Scored length: generated tokens, counting EOS when finished.
    pub fn length(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn score(&self, length_penalty: f64) -> f64 {
        length_normalized(self.log_prob, self.length(), length_penalty)
    }
}

pub fn length_normalized(log_prob: f64, len: usize, length_penalty: f64) -> f64 {
    if length_penalty == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(length_penalty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
    /// Teacher forcing: argmax under the gold prefix.
    Tf,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "beam" => Ok(Self::Beam),
            "tf" => Ok(Self::Tf),
            other => Err(Error::Config(format!("unknown decode mode {other:?}"))),
        }
    }
}

/// Encoder output for a batch of sources, kept outside any graph.
struct Memory<T: Scalar> {
    states: Tensor<T>,
    pad: Vec<bool>,
    len: usize,
}

fn encode_sources<T: Scalar>(model: &TransformerModel, srcs: &[&[usize]]) -> Result<Memory<T>> {
    if srcs.iter().any(|s| s.is_empty()) {
        return Err(Error::Input("cannot decode an empty source".into()));
    }
    let pairs: Vec<(&[usize], &[usize])> = srcs.iter().map(|s| (*s, &[][..])).collect();
    let batch = Batch::from_pairs((0..srcs.len()).collect(), &pairs);
    let mut g = Graph::<T>::new();
    let mut f = model.forward(&mut g, false);
    let states = f.encode(batch.src_ids())?;
    Ok(Memory {
        states: g.value(states).clone(),
        pad: batch.src_pad,
        len: batch.src_len,
    })
}

impl<T: Scalar> Memory<T> {
    /// Rows `rows` of the memory, in order (rows may repeat).
    fn select(&self, rows: &[usize]) -> (Tensor<T>, Vec<bool>) {
        let d = self.states.last_dim();
        let stride = self.len * d;
        let mut data = Vec::with_capacity(rows.len() * stride);
        let mut pad = Vec::with_capacity(rows.len() * self.len);
        for &r in rows {
            data.extend_from_slice(&self.states.data()[r * stride..(r + 1) * stride]);
            pad.extend_from_slice(&self.pad[r * self.len..(r + 1) * self.len]);
        }
        let t = Tensor::new(vec![rows.len(), self.len, d], data).expect("consistent sizes");
        (t, pad)
    }
}

/// Log-probabilities of the next token after each prefix (all prefixes must
/// have equal length). `rows[i]` picks the source of prefix `i`.
fn next_log_probs<T: Scalar>(
    model: &TransformerModel,
    memory: &Memory<T>,
    rows: &[usize],
    prefixes: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let len = prefixes[0].len() + 1;
    let mut ids = Vec::with_capacity(prefixes.len() * len);
    for p in prefixes {
        debug_assert_eq!(p.len() + 1, len);
        ids.push(BOS);
        ids.extend_from_slice(p);
    }
    let pad = vec![false; ids.len()];
    let (mem, src_pad) = memory.select(rows);
    let mut g = Graph::<T>::new();
    let mem_var = g.constant(mem)?;
    let mut f = model.forward(&mut g, false);
    let logits = f.decode(
        Ids {
            ids: &ids,
            pad: &pad,
            batch: prefixes.len(),
            len,
        },
        mem_var,
        &src_pad,
    )?;
    let out = g.value(logits);
    Ok((0..prefixes.len())
        .map(|b| {
            let mut lp = log_softmax_row(out.row3(b, len - 1));
            lp[PAD] = f64::NEG_INFINITY;
            lp[BOS] = f64::NEG_INFINITY;
            lp
        })
        .collect())
}

fn best_token(lp: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &x) in lp.iter().enumerate() {
        if x > lp[best] {
            best = i;
        }
    }
    best
}

/// Default cap on generated tokens for a source of `src_len` tokens.
pub fn length_budget(src_len: usize) -> usize {
    2 * src_len + 10
}

fn generation_limit(model: &TransformerModel, max_len: usize) -> usize {
    max_len.min(model.config().max_len)
}

/// Argmax decoding of one source; stops at EOS or after `max_len` tokens.
pub fn greedy_decode<T: Scalar>(model: &TransformerModel, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    Ok(greedy_decode_batch::<T>(model, &[src.to_vec()], max_len)?.remove(0))
}

/// Greedy decoding of several sources at once.
pub fn greedy_decode_batch<T: Scalar>(
    model: &TransformerModel,
    srcs: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
    let memory = encode_sources::<T>(model, &refs)?;
    let rows: Vec<usize> = (0..srcs.len()).collect();
    let mut prefixes = vec![Vec::new(); srcs.len()];
    let mut done = vec![false; srcs.len()];
    for _ in 0..generation_limit(model, max_len) {
        let lps = next_log_probs(model, &memory, &rows, &prefixes)?;
        for (i, lp) in lps.iter().enumerate() {
            let tok = if done[i] { EOS } else { best_token(lp) };
            if tok == EOS {
                done[i] = true;
            }
            prefixes[i].push(tok);
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(prefixes
        .into_iter()
        .map(|p| p.into_iter().take_while(|&t| t != EOS).collect())
        .collect())
}

fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.score(alpha)
        .total_cmp(&a.score(alpha))
        .then(a.finish_step.cmp(&b.finish_step))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over one source.
///
/// Each step expands every live hypothesis by every token and ranks the
/// expansions by cumulative log-probability. EOS expansions among the top
/// `width` are finalized; the best `width` non-EOS expansions survive.
/// Search stops once `width` hypotheses have finished or `max_len` tokens
/// were generated. The winner is the finished hypothesis with the highest
/// length-normalized score (ties: earlier finish, then token order), or the
/// best live one if nothing finished.
pub fn beam_search<T: Scalar>(model: &TransformerModel, src: &[usize], cfg: &BeamConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let memory = encode_sources::<T>(model, &[src])?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        finish_step: 0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..generation_limit(model, cfg.max_len) {
        let rows = vec![0; live.len()];
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let lps = next_log_probs(model, &memory, &rows, &prefixes)?;

        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, lp) in lps.iter().enumerate() {
            for (tok, &x) in lp.iter().enumerate() {
                if x.is_finite() {
                    cands.push((live[b].log_prob + x, b, tok));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then(a.2.cmp(&b.2))
        });

        let mut next = Vec::with_capacity(cfg.width);
        for (r, &(lp, b, tok)) in cands.iter().enumerate() {
            if tok == EOS {
                if r < cfg.width {
                    finished.push(Hypothesis {
                        tokens: live[b].tokens.clone(),
                        log_prob: lp,
                        finished: true,
                        finish_step: step,
                    });
                }
            } else if next.len() < cfg.width {
                let mut tokens = live[b].tokens.clone();
                tokens.push(tok);
                next.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    finished: false,
                    finish_step: 0,
                });
            }
            if r + 1 >= cfg.width && next.len() >= cfg.width {
                break;
            }
        }
        live = next;
        if finished.len() >= cfg.width || live.is_empty() {
            break;
        }
    }

    let pool = if finished.is_empty() { &mut live } else { &mut finished };
    pool.sort_by(|a, b| rank(a, b, cfg.length_penalty));
    pool.first()
        .cloned()
        .ok_or_else(|| Error::Input("beam search produced no hypothesis".into()))
}

/// Argmax at every gold position under the gold prefix; the output has the
/// gold length.
pub fn teacher_forced_predict<T: Scalar>(model: &TransformerModel, src: &[usize], gold: &[usize]) -> Result<Vec<usize>> {
    Ok(teacher_forced_batch::<T>(model, &[src.to_vec()], &[gold.to_vec()])?.remove(0))
}

pub fn teacher_forced_batch<T: Scalar>(
    model: &TransformerModel,
    srcs: &[Vec<usize>],
    golds: &[Vec<usize>],
) -> Result<Vec<Vec<usize>>> {
    if srcs.len() != golds.len() {
        return Err(Error::Input(format!("{} sources but {} gold targets", srcs.len(), golds.len())));
    }
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let pairs: Vec<(&[usize], &[usize])> = srcs.iter().zip(golds).map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    let batch = Batch::from_pairs((0..srcs.len()).collect(), &pairs);
    let mut g = Graph::<T>::new();
    let mut f = model.forward(&mut g, false);
    let mem = f.encode(batch.src_ids())?;
    let logits = f.decode(batch.tgt_ids(), mem, &batch.src_pad)?;
    let out = g.value(logits);
    Ok(golds
        .iter()
        .enumerate()
        .map(|(b, gold)| {
            (0..gold.len())
                .map(|j| {
                    let mut lp = log_softmax_row(out.row3(b, j));
                    lp[PAD] = f64::NEG_INFINITY;
                    lp[BOS] = f64::NEG_INFINITY;
                    best_token(&lp)
                })
                .collect()
        })
        .collect())
}

/// Decode a list of sources in chunks of `batch_size`. `golds` is required
/// for [`DecodeMode::Tf`]. Generation stops at `beam.max_len` or
/// [`length_budget`] of the source, whichever is smaller.
pub fn translate_all(
    model: &TransformerModel,
    srcs: &[Vec<usize>],
    golds: Option<&[Vec<usize>]>,
    mode: DecodeMode,
    beam: &BeamConfig,
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(srcs.len());
    match mode {
        DecodeMode::Greedy => {
            for chunk in srcs.chunks(batch_size.max(1)) {
                let longest = chunk.iter().map(Vec::len).max().unwrap_or(1);
                out.extend(greedy_decode_batch::<f32>(model, chunk, beam.max_len.min(length_budget(longest)))?);
            }
        }
        DecodeMode::Beam => {
            for s in srcs {
                let cfg = BeamConfig {
                    max_len: beam.max_len.min(length_budget(s.len())),
                    ..beam.clone()
                };
                out.push(beam_search::<f32>(model, s, &cfg)?.tokens);
            }
        }
        DecodeMode::Tf => {
            let golds = golds.ok_or_else(|| Error::Input("teacher forcing needs gold targets".into()))?;
            for (cs, cg) in srcs.chunks(batch_size.max(1)).zip(golds.chunks(batch_size.max(1))) {
                out.extend(teacher_forced_batch::<f32>(model, cs, cg)?);
            }
        }
    }
    Ok(out)
}

/// Cumulative log-probability of `tokens` followed by EOS, scored one step
/// at a time.
pub fn sequence_log_prob<T: Scalar>(model: &TransformerModel, src: &[usize], tokens: &[usize], with_eos: bool) -> Result<f64> {
    let memory = encode_sources::<T>(model, &[src])?;
    let mut total = 0.0;
    let steps = tokens.len() + usize::from(with_eos);
    for j in 0..steps {
        let lp = next_log_probs(model, &memory, &[0], &[tokens[..j].to_vec()])?;
        let tok = if j < tokens.len() { tokens[j] } else { EOS };
        total += lp[0][tok];
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(seed: u64) -> TransformerModel {
        TransformerModel::build(ModelConfig::tiny(9, 8, 2, 1, 16), seed).unwrap()
    }

    #[test]
    fn greedy_equals_width_one_beam() {
        for seed in 0..5 {
            let m = model(seed);
            let src = [4, 5, 6, 7];
            let g = greedy_decode::<f64>(&m, &src, 6).unwrap();
            let cfg = BeamConfig {
                width: 1,
                length_penalty: 0.0,
                max_len: 6,
            };
            assert_eq!(beam_search::<f64>(&m, &src, &cfg).unwrap().tokens, g);
            assert_eq!(greedy_decode::<f64>(&m, &src, 6).unwrap(), g);
        }
    }

    #[test]
    fn batched_greedy_matches_single() {
        let m = model(3);
        let srcs = vec![vec![4, 5], vec![6, 7, 8, 4], vec![5]];
        let batched = greedy_decode_batch::<f64>(&m, &srcs, 5).unwrap();
        for (s, b) in srcs.iter().zip(&batched) {
            assert_eq!(&greedy_decode::<f64>(&m, s, 5).unwrap(), b);
        }
    }

    #[test]
    fn hypothesis_score_is_recomputable() {
        let m = model(11);
        let src = [4, 8, 6];
        let cfg = BeamConfig {
            width: 3,
            length_penalty: 0.6,
            max_len: 5,
        };
        let h = beam_search::<f64>(&m, &src, &cfg).unwrap();
        let lp = sequence_log_prob::<f64>(&m, &src, &h.tokens, h.finished).unwrap();
        assert!((lp - h.log_prob).abs() < 1e-6);
        assert!((h.score(0.6) - lp / (h.length() as f64).powf(0.6)).abs() < 1e-6);
    }

    #[test]
    fn teacher_forcing_keeps_gold_length_and_matches_loop() {
        let m = model(5);
        let src = vec![4, 5, 6];
        let gold = vec![7, 8, 4, 5];
        let tf = teacher_forced_predict::<f64>(&m, &src, &gold).unwrap();
        assert_eq!(tf.len(), gold.len());
        let memory = encode_sources::<f64>(&m, &[&src]).unwrap();
        for j in 0..gold.len() {
            let lp = next_log_probs(&m, &memory, &[0], &[gold[..j].to_vec()]).unwrap();
            assert_eq!(best_token(&lp[0]), tf[j], "position {j}");
        }
    }

    #[test]
    fn rejects_bad_config() {
        let m = model(1);
        let cfg = BeamConfig {
            width: 0,
            ..BeamConfig::default()
        };
        assert!(beam_search::<f32>(&m, &[4], &cfg).is_err());
        assert!(greedy_decode::<f32>(&m, &[], 3).is_err());
    }
}
