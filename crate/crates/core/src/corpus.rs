//! Vocabulary, synthetic parallel tasks, batching and plain-text corpus IO.
//!
//! Corpus files are UTF-8, one whitespace-tokenized sentence per line, with
//! parallel `.src` / `.tgt` files of equal line count.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{io_err, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id mapping with fixed special ids 0-3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    token_of: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens.into_iter().skip(NUM_SPECIALS))
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.token_of
    }
}

impl Vocab {
    /// Specials followed by `t4 .. t{size-1}`.
    pub fn synthetic(size: usize) -> Self {
        let tokens = (NUM_SPECIALS..size.max(NUM_SPECIALS)).map(|i| format!("t{i}"));
        Self::from_tokens(tokens)
    }

    /// Specials followed by `tokens` (duplicates and specials skipped).
    pub fn from_tokens(tokens: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut token_of: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        token_of.extend(tokens.into_iter().map(Into::into));
        let mut id_of = HashMap::new();
        let mut unique = Vec::with_capacity(token_of.len());
        for t in token_of {
            if !id_of.contains_key(&t) {
                id_of.insert(t.clone(), unique.len());
                unique.push(t);
            }
        }
        Self {
            token_of: unique,
            id_of,
        }
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.id_of.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.token_of.get(id).map(String::as_str).unwrap_or(SPECIAL_TOKENS[UNK])
    }

    /// Tokens to ids; out-of-vocabulary tokens become [`UNK`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Ids to tokens, skipping a leading BOS and stopping at the first EOS
    /// or PAD.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        strip_specials(ids)
            .iter()
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.token_of.join("\n") + "\n").map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: "vocabulary must start with the four special tokens".into(),
            });
        }
        Ok(Self::from_tokens(tokens[NUM_SPECIALS..].iter().copied()))
    }
}

/// Ids up to (not including) the first EOS/PAD, minus a leading BOS.
pub fn strip_specials(ids: &[usize]) -> &[usize] {
    let ids = ids.strip_prefix(&[BOS]).unwrap_or(ids);
    let end = ids.iter().position(|&i| i == EOS || i == PAD).unwrap_or(ids.len());
    &ids[..end]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    LexiconReorder,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "lexicon-reorder" => Ok(Self::LexiconReorder),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Generation rule for a synthetic task. The lexicon of `lexicon-reorder`
/// is derived from `seed`, so every split drawn from one spec shares it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Model position limit; sentences must leave room for BOS/EOS.
    pub position_limit: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab_size: usize, len_range: (usize, usize), seed: u64) -> Self {
        Self {
            kind,
            vocab_size,
            min_len: len_range.0,
            max_len: len_range.1,
            position_limit: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::Config(format!("vocab_size {} must be at least 8", self.vocab_size)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "length range [{}, {}] is empty or starts at 0",
                self.min_len, self.max_len
            )));
        }
        if self.max_len + 2 > self.position_limit {
            return Err(Error::Config(format!(
                "max length {} leaves no room for BOS/EOS within {} positions",
                self.max_len, self.position_limit
            )));
        }
        Ok(())
    }

    /// Bijective map over non-special ids used by `lexicon-reorder`.
    pub fn lexicon(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x1e71_c0de);
        let mut targets: Vec<usize> = (NUM_SPECIALS..self.vocab_size).collect();
        targets.shuffle(&mut rng);
        let mut map: Vec<usize> = (0..NUM_SPECIALS).collect();
        map.extend(targets);
        map
    }

    /// Gold target for `src`.
    pub fn translate(&self, src: &[usize], lexicon: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::LexiconReorder => lexicon_reorder(src, lexicon),
        }
    }
}

/// Map every token through `lexicon`, then swap each adjacent
/// (even, odd) index pair.
pub fn lexicon_reorder(src: &[usize], lexicon: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = src.iter().map(|&t| lexicon[t]).collect();
    for pair in out.chunks_mut(2) {
        if pair.len() == 2 {
            pair.swap(0, 1);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Source/target id sequences without BOS/EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<Pair>,
    pub task: Option<TaskSpec>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<Pair>) -> Result<Self> {
        if let Some(i) = pairs.iter().position(|p| p.src.is_empty() || p.tgt.is_empty()) {
            return Err(Error::Input(format!("pair {i} has an empty side")));
        }
        Ok(Self { pairs, task: None })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<Vec<usize>> {
        self.pairs.iter().map(|p| p.src.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<usize>> {
        self.pairs.iter().map(|p| p.tgt.clone()).collect()
    }

    /// Split off the pairs from `at` onwards into a second corpus.
    pub fn split_off(&mut self, at: usize) -> ParallelCorpus {
        ParallelCorpus {
            pairs: self.pairs.split_off(at.min(self.pairs.len())),
            task: self.task.clone(),
        }
    }

    pub fn target_tokens(&self) -> usize {
        self.pairs.iter().map(|p| p.tgt.len()).sum()
    }

    /// Write `<prefix>.src` and `<prefix>.tgt`.
    pub fn write(&self, vocab: &Vocab, prefix: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let (src_path, tgt_path) = corpus_paths(prefix.as_ref());
        let render = |side: &dyn Fn(&Pair) -> &Vec<usize>| {
            let mut s = String::new();
            for p in &self.pairs {
                s.push_str(&vocab.decode(side(p)).join(" "));
                s.push('\n');
            }
            s
        };
        fs::write(&src_path, render(&|p| &p.src)).map_err(io_err(&src_path))?;
        fs::write(&tgt_path, render(&|p| &p.tgt)).map_err(io_err(&tgt_path))?;
        Ok((src_path, tgt_path))
    }

    /// Read parallel files; line counts must agree and no line may be empty.
    pub fn read(vocab: &Vocab, src_path: impl AsRef<Path>, tgt_path: impl AsRef<Path>) -> Result<Self> {
        let src = read_sentences(vocab, src_path.as_ref())?;
        let tgt = read_sentences(vocab, tgt_path.as_ref())?;
        if src.len() != tgt.len() {
            return Err(Error::Input(format!(
                "{} has {} lines but {} has {}",
                src_path.as_ref().display(),
                src.len(),
                tgt_path.as_ref().display(),
                tgt.len()
            )));
        }
        Self::new(src.into_iter().zip(tgt).map(|(src, tgt)| Pair { src, tgt }).collect())
    }
}

pub fn corpus_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let base = prefix.display().to_string();
    (PathBuf::from(format!("{base}.src")), PathBuf::from(format!("{base}.tgt")))
}

/// One sentence per line, whitespace tokenized, encoded against `vocab`.
pub fn read_sentences(vocab: &Vocab, path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(|l| vocab.encode(&l.split_whitespace().collect::<Vec<_>>()))
        .collect())
}

pub fn write_sentences(vocab: &Vocab, path: &Path, sentences: &[Vec<usize>]) -> Result<()> {
    let mut s = String::new();
    for ids in sentences {
        s.push_str(&vocab.decode(ids).join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}

/// Draw `n_pairs` sentence pairs for `task`; deterministic in
/// `(task, n_pairs, sample_seed)`.
pub fn generate_task(task: &TaskSpec, n_pairs: usize, sample_seed: u64) -> Result<ParallelCorpus> {
    task.validate()?;
    let lexicon = task.lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let pairs = (0..n_pairs)
        .map(|_| {
            let len = rng.gen_range(task.min_len..=task.max_len);
            let src: Vec<usize> = (0..len)
                .map(|_| rng.gen_range(NUM_SPECIALS..task.vocab_size))
                .collect();
            let tgt = task.translate(&src, &lexicon);
            Pair { src, tgt }
        })
        .collect();
    Ok(ParallelCorpus {
        pairs,
        task: Some(task.clone()),
    })
}

/// Padded training batch. The target appears twice: a BOS-prefixed input
/// view and an EOS-suffixed label view.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Position of each row in the originating corpus.
    pub indices: Vec<usize>,
    pub size: usize,
    pub src: Vec<usize>,
    pub src_pad: Vec<bool>,
    pub src_len: usize,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_pad: Vec<bool>,
    pub tgt_len: usize,
}

impl Batch {
    /// Build from raw (source, target) sequences without BOS/EOS.
    pub fn from_pairs(indices: Vec<usize>, pairs: &[(&[usize], &[usize])]) -> Self {
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0).max(1);
        let tgt_len = pairs.iter().map(|p| p.1.len() + 1).max().unwrap_or(1);
        let mut b = Batch {
            indices,
            size,
            src: vec![PAD; size * src_len],
            src_pad: vec![true; size * src_len],
            src_len,
            tgt_in: vec![PAD; size * tgt_len],
            tgt_out: vec![PAD; size * tgt_len],
            tgt_pad: vec![true; size * tgt_len],
            tgt_len,
        };
        for (r, (s, t)) in pairs.iter().enumerate() {
            for (j, &id) in s.iter().enumerate() {
                b.src[r * src_len + j] = id;
                b.src_pad[r * src_len + j] = false;
            }
            for j in 0..=t.len() {
                let k = r * tgt_len + j;
                b.tgt_in[k] = if j == 0 { BOS } else { t[j - 1] };
                b.tgt_out[k] = if j < t.len() { t[j] } else { EOS };
                b.tgt_pad[k] = false;
            }
        }
        b
    }

    pub fn src_ids(&self) -> crate::model::Ids<'_> {
        crate::model::Ids {
            ids: &self.src,
            pad: &self.src_pad,
            batch: self.size,
            len: self.src_len,
        }
    }

    pub fn tgt_ids(&self) -> crate::model::Ids<'_> {
        crate::model::Ids {
            ids: &self.tgt_in,
            pad: &self.tgt_pad,
            batch: self.size,
            len: self.tgt_len,
        }
    }

    /// Non-pad label positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt_pad.iter().filter(|&&p| !p).count()
    }

    /// Non-pad label positions of each row.
    pub fn row_lengths(&self) -> Vec<usize> {
        self.tgt_pad
            .chunks(self.tgt_len)
            .map(|r| r.iter().filter(|&&p| !p).count())
            .collect()
    }

    /// Padded token cost: rows times the widest row.
    pub fn padded_tokens(&self) -> usize {
        self.size * self.src_len.max(self.tgt_len)
    }
}

fn pair_cost(p: &Pair) -> usize {
    p.src.len().max(p.tgt.len() + 1)
}

/// Token-budget batching. Pairs are shuffled, grouped by length, packed so
/// that `rows * widest row <= max_tokens`, and the batch order is shuffled.
pub fn batchify(corpus: &ParallelCorpus, max_tokens: usize, seed: u64) -> Result<Vec<Batch>> {
    if let Some((i, p)) = corpus.pairs.iter().enumerate().find(|(_, p)| pair_cost(p) > max_tokens) {
        return Err(Error::Input(format!(
            "pair {i} needs {} padded tokens, over the budget of {max_tokens}",
            pair_cost(p)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| pair_cost(&corpus.pairs[i]));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut widest = 0;
    for i in order {
        let c = pair_cost(&corpus.pairs[i]);
        if !current.is_empty() && (current.len() + 1) * widest.max(c) > max_tokens {
            groups.push(std::mem::take(&mut current));
            widest = 0;
        }
        widest = widest.max(c);
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);
    Ok(groups
        .into_iter()
        .map(|idx| {
            let pairs: Vec<(&[usize], &[usize])> = idx
                .iter()
                .map(|&i| (corpus.pairs[i].src.as_slice(), corpus.pairs[i].tgt.as_slice()))
                .collect();
            Batch::from_pairs(idx.clone(), &pairs)
        })
        .collect())
}

/// Fixed-size batches in corpus order (no shuffling).
pub fn sequential_batches(corpus: &ParallelCorpus, batch_size: usize) -> Vec<Batch> {
    (0..corpus.len())
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|idx| {
            let pairs: Vec<(&[usize], &[usize])> = idx
                .iter()
                .map(|&i| (corpus.pairs[i].src.as_slice(), corpus.pairs[i].tgt.as_slice()))
                .collect();
            Batch::from_pairs(idx.to_vec(), &pairs)
        })
        .collect()
}
