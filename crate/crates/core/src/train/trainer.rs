use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::{lr_at, Adam, Regime, TrainConfig};
use crate::bleu::{corpus_bleu, Smoothing};
use crate::corpus::{batchify, Batch, ParallelCorpus};
use crate::decode::{greedy_decode_batch, length_budget, teacher_forced_batch};
use crate::distill::{
    dense_teacher_dists, hybrid_loss, pseudo_targets, sentence_level_loss_per_sequence, teacher_rows,
    token_level_loss_per_sequence, GateMode, GateState, GateTrace, SparseRow,
};
use crate::model::{ParamStore, TransformerModel};
use crate::noise::derive_seed;
use crate::tensor::{Graph, Scalar, Var};
use crate::{Error, Result, TensorError};

const EPOCH_SALT: u64 = 0x5eed_0001;
const DROPOUT_SALT: u64 = 0x5eed_0002;
const DEV_BATCH: usize = 64;

/// A frozen teacher plus the signals students learn from, computed once per
/// training corpus. The teacher runs in inference mode, so caching its
/// outputs gives the same numbers as querying it for every batch.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub model: TransformerModel,
    rows: Option<Vec<Vec<SparseRow>>>,
    pseudo: Option<Vec<Vec<usize>>>,
}

impl Teacher {
    pub fn new(mut model: TransformerModel) -> Self {
        model.eval();
        Self {
            model,
            rows: None,
            pseudo: None,
        }
    }

    /// Compute whatever `regimes` need on `train`.
    pub fn prepare(model: TransformerModel, train: &ParallelCorpus, regimes: &[Regime], cfg: &TrainConfig) -> Result<Self> {
        let mut t = Self::new(model);
        if regimes.iter().any(|r| matches!(r, Regime::TokenKd | Regime::Hybrid)) {
            t.compute_rows(train, cfg.top_k)?;
        }
        if regimes.iter().any(|r| matches!(r, Regime::SentenceKd | Regime::Hybrid)) {
            t.compute_pseudo_targets(train, cfg)?;
        }
        Ok(t)
    }

    pub fn compute_rows(&mut self, train: &ParallelCorpus, top_k: Option<usize>) -> Result<()> {
        let k = top_k.unwrap_or(usize::MAX);
        let mut rows = vec![Vec::new(); train.len()];
        for batch in crate::corpus::sequential_batches(train, DEV_BATCH) {
            for (r, seq) in teacher_rows(&self.model, &batch, k)?.into_iter().enumerate() {
                rows[batch.indices[r]] = seq;
            }
        }
        self.rows = Some(rows);
        Ok(())
    }

    pub fn compute_pseudo_targets(&mut self, train: &ParallelCorpus, cfg: &TrainConfig) -> Result<()> {
        let mut beam = cfg.beam();
        beam.max_len = self.model.config().max_len;
        self.pseudo = Some(pseudo_targets(&self.model, &train.sources(), &beam)?);
        Ok(())
    }

    /// Use externally produced pseudo-targets (EOS excluded), one per pair.
    pub fn with_pseudo_targets(mut self, pseudo: Vec<Vec<usize>>) -> Self {
        self.pseudo = Some(pseudo);
        self
    }

    pub fn pseudo_targets(&self) -> Option<&[Vec<usize>]> {
        self.pseudo.as_deref()
    }

    fn dists<T: Scalar>(&self, batch: &Batch) -> Result<crate::tensor::Tensor<T>> {
        let rows = self
            .rows
            .as_ref()
            .ok_or_else(|| Error::Config("token-level distillation needs teacher distributions".into()))?;
        let refs: Vec<&[SparseRow]> = batch.indices.iter().map(|&i| rows[i].as_slice()).collect();
        Ok(dense_teacher_dists(&refs, batch.tgt_len, self.model.config().vocab_size))
    }

    fn pseudo_batch(&self, batch: &Batch, train: &ParallelCorpus) -> Result<Batch> {
        let pseudo = self
            .pseudo
            .as_ref()
            .ok_or_else(|| Error::Config("sentence-level distillation needs pseudo-targets".into()))?;
        let pairs: Vec<(&[usize], &[usize])> = batch
            .indices
            .iter()
            .map(|&i| (train.pairs[i].src.as_slice(), pseudo[i].as_slice()))
            .collect();
        Ok(Batch::from_pairs(batch.indices.clone(), &pairs))
    }
}

/// Metrics of one finished epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub steps: usize,
    pub train_loss: f64,
    pub dev_bleu: f64,
    pub lr: f64,
    pub mean_g: Option<f64>,
    /// Hybrid only: mean per-sequence token and sentence losses over the
    /// epoch, the two quantities the gate trades off.
    #[serde(default)]
    pub token_loss: Option<f64>,
    #[serde(default)]
    pub sentence_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BestSnapshot {
    pub dev_bleu: f64,
    pub epoch: usize,
    pub params: ParamStore,
    pub gate: Option<ParamStore>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best dev BLEU.
    pub model: TransformerModel,
    pub gate: Option<GateState>,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_dev_bleu: f64,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<usize>,
}

impl TrainOutcome {
    pub fn gate_trace(&self) -> Option<GateTrace> {
        self.gate.as_ref()?;
        let mut t = GateTrace::default();
        for r in &self.history {
            t.record(r.epoch, r.mean_g.unwrap_or(f64::NAN), r.train_loss, r.dev_bleu);
        }
        Some(t)
    }
}

struct GateBatch {
    gates: Vec<f64>,
    token: f64,
    sentence: f64,
}

/// Owns one model and its optimizer state for the duration of a run.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: TransformerModel,
    pub gate: Option<GateState>,
    pub adam: Adam,
    pub gate_adam: Option<Adam>,
    /// Completed optimizer steps.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub(crate) best: Option<BestSnapshot>,
    train: &'a ParallelCorpus,
    dev: &'a ParallelCorpus,
    teacher: Option<&'a Teacher>,
    gate_sum: f64,
    gate_count: usize,
    /// Per-sequence token and sentence losses seen by the gate this epoch.
    part_sums: (f64, f64),
}

impl<'a> Trainer<'a> {
    pub fn new(
        mut model: TransformerModel,
        config: TrainConfig,
        train: &'a ParallelCorpus,
        dev: &'a ParallelCorpus,
        teacher: Option<&'a Teacher>,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Input("empty training corpus".into()));
        }
        if config.regime.needs_teacher() {
            let t = teacher.ok_or_else(|| Error::Config(format!("regime {} needs a teacher", config.regime.as_str())))?;
            let (tv, sv) = (t.model.config().vocab_size, model.config().vocab_size);
            if tv != sv {
                return Err(Error::Config(format!(
                    "teacher vocabulary ({tv}) differs from student vocabulary ({sv})"
                )));
            }
        }
        model.train();
        let gate = (config.regime == Regime::Hybrid)
            .then(|| GateState::with_logit(config.gate_mode, model.config().d_model, config.gate_init));
        let adam = Adam::new(model.params(), config.beta1, config.beta2, config.adam_eps);
        let gate_adam = gate.as_ref().map(|g| Adam::new(&g.params, config.beta1, config.beta2, config.adam_eps));
        Ok(Self {
            config,
            model,
            gate,
            adam,
            gate_adam,
            step: 0,
            epoch: 0,
            history: Vec::new(),
            step_losses: Vec::new(),
            best: None,
            train,
            dev,
            teacher,
            gate_sum: 0.0,
            gate_count: 0,
            part_sums: (0.0, 0.0),
        })
    }

    /// Continue from saved state. The corpora and teacher must be the ones
    /// the checkpoint was trained with.
    pub fn resume(
        ckpt: super::Checkpoint,
        train: &'a ParallelCorpus,
        dev: &'a ParallelCorpus,
        teacher: Option<&'a Teacher>,
    ) -> Result<Self> {
        let config = ckpt
            .train_config
            .clone()
            .ok_or_else(|| Error::Config("checkpoint has no training configuration".into()))?;
        let model = TransformerModel::from_params(ckpt.model_config.clone(), ckpt.params)?;
        let mut t = Self::new(model, config, train, dev, teacher)?;
        if let Some(adam) = ckpt.adam {
            t.adam = adam;
        }
        if let Some(g) = ckpt.gate {
            t.gate = Some(g);
        }
        if let Some(a) = ckpt.gate_adam {
            t.gate_adam = Some(a);
        }
        t.step = ckpt.step;
        t.epoch = ckpt.epoch;
        t.history = ckpt.history;
        t.step_losses = ckpt.step_losses;
        t.best = ckpt.best;
        Ok(t)
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self, vocab: Option<&crate::corpus::Vocab>) -> super::Checkpoint {
        super::Checkpoint {
            model_config: self.model.config().clone(),
            train_config: Some(self.config.clone()),
            vocab: vocab.cloned(),
            step: self.step,
            epoch: self.epoch,
            params: self.model.params().clone(),
            adam: Some(self.adam.clone()),
            gate: self.gate.clone(),
            gate_adam: self.gate_adam.clone(),
            history: self.history.clone(),
            step_losses: self.step_losses.clone(),
            best: self.best.clone(),
        }
    }

    fn steps_exhausted(&self) -> bool {
        matches!(self.config.max_steps, Some(m) if self.step >= m)
    }

    /// Per-sequence losses of one micro-batch, averaged over its rows, and
    /// for the hybrid the gate values and both component losses.
    fn batch_loss<T: Scalar>(&self, g: &mut Graph<T>, batch: &Batch) -> Result<(Var, Option<GateBatch>)> {
        let regime = self.config.regime;
        let teacher = self.teacher;
        let mut f = self.model.forward(g, true);
        let mem = f.encode(batch.src_ids())?;
        let mut gold_lp = None;
        if regime != Regime::SentenceKd {
            let logits = f.decode(batch.tgt_ids(), mem, &batch.src_pad)?;
            gold_lp = Some(f.graph.log_softmax(logits)?);
        }
        let mut pseudo = None;
        if matches!(regime, Regime::SentenceKd | Regime::Hybrid) {
            let pb = teacher.expect("checked in new").pseudo_batch(batch, self.train)?;
            let logits = f.decode(pb.tgt_ids(), mem, &pb.src_pad)?;
            let lp = f.graph.log_softmax(logits)?;
            pseudo = Some((lp, pb));
        }
        let pooled = match (&self.gate, regime) {
            (Some(gs), Regime::Hybrid) if gs.mode == GateMode::PooledLinear => Some(f.mean_pool(mem, &batch.src_pad)?),
            _ => None,
        };
        let g = f.graph;
        let per_seq = |g: &mut Graph<T>, lp: Var| -> Result<Var> {
            sentence_level_loss_per_sequence(g, lp, &batch.tgt_out, &batch.tgt_pad)
        };
        let token = |g: &mut Graph<T>, lp: Var| -> Result<Var> {
            let d = teacher.expect("checked in new").dists::<T>(batch)?;
            token_level_loss_per_sequence(g, lp, &d, &batch.tgt_pad)
        };
        let sentence = |g: &mut Graph<T>, (lp, pb): (Var, Batch)| -> Result<Var> {
            sentence_level_loss_per_sequence(g, lp, &pb.tgt_out, &pb.tgt_pad)
        };
        Ok(match regime {
            Regime::Teacher => {
                let l = per_seq(g, gold_lp.unwrap())?;
                (g.mean(l)?, None)
            }
            Regime::TokenKd => {
                let l = token(g, gold_lp.unwrap())?;
                (g.mean(l)?, None)
            }
            Regime::SentenceKd => {
                let l = sentence(g, pseudo.unwrap())?;
                (g.mean(l)?, None)
            }
            Regime::Hybrid => {
                let lt = token(g, gold_lp.unwrap())?;
                let ls = sentence(g, pseudo.unwrap())?;
                let gs = self.gate.as_ref().expect("hybrid has a gate");
                let gates = gs.values(g, pooled, batch.size, self.model.params().len())?;
                let stats = GateBatch {
                    gates: g.value(gates).to_f64_vec(),
                    token: g.value(lt).to_f64_vec().iter().sum(),
                    sentence: g.value(ls).to_f64_vec().iter().sum(),
                };
                (hybrid_loss(g, gates, lt, ls)?, Some(stats))
            }
        })
    }

    /// One optimizer step over `micro` (f32 arithmetic). Returns the
    /// sequence-weighted mean loss.
    pub fn step(&mut self, micro: &[Batch]) -> Result<f64> {
        self.step_in::<f32>(micro)
    }

    /// One optimizer step with the forward and backward pass in `T`.
    /// Gradients of the micro-batches are averaged with weights
    /// proportional to their row counts, so splitting a batch does not
    /// change the update.
    pub fn step_in<T: Scalar>(&mut self, micro: &[Batch]) -> Result<f64> {
        let total: usize = micro.iter().map(|b| b.size).sum();
        if total == 0 {
            return Err(Error::Input("optimizer step without data".into()));
        }
        let diverged = |step| move |e: Error| match e {
            Error::Tensor(TensorError::NonFinite { .. }) => Error::Diverged { step },
            other => other,
        };
        let next = self.step + 1;
        let offset = self.model.params().len();
        let mut loss = 0.0;
        for (k, batch) in micro.iter().enumerate() {
            let seed = derive_seed(self.config.seed ^ DROPOUT_SALT, (self.step * micro.len() + k) as u64);
            let mut g = Graph::<T>::training(seed);
            let (l, gates) = self.batch_loss(&mut g, batch).map_err(diverged(next))?;
            let lv = g.value(l).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged { step: next });
            }
            g.backward(l)?;
            let w = batch.size as f64 / total as f64;
            self.model.params_mut().accumulate_from(&g, w);
            if let Some(gs) = self.gate.as_mut() {
                gs.params.accumulate_from_offset(&g, w, offset);
            }
            if let Some(s) = gates {
                self.gate_sum += s.gates.iter().sum::<f64>();
                self.gate_count += s.gates.len();
                self.part_sums.0 += s.token;
                self.part_sums.1 += s.sentence;
            }
            loss += w * lv;
        }
        if let Some(c) = self.config.clip_norm {
            let sq = self.model.params().grad_sq_sum() + self.gate.as_ref().map_or(0.0, |g| g.params.grad_sq_sum());
            let norm = sq.sqrt();
            if norm > c {
                self.model.params_mut().scale_grads(c / norm);
                if let Some(gs) = self.gate.as_mut() {
                    gs.params.scale_grads(c / norm);
                }
            }
        }
        let lr = lr_at(next, self.config.base_lr, self.config.warmup_steps)?;
        self.adam.update(self.model.params_mut(), lr).map_err(|_| Error::Diverged { step: next })?;
        if let (Some(gs), Some(ga)) = (self.gate.as_mut(), self.gate_adam.as_mut()) {
            if !self.config.freeze_gate {
                ga.update(&mut gs.params, lr).map_err(|_| Error::Diverged { step: next })?;
            }
            gs.params.zero_grads();
        }
        self.model.params_mut().zero_grads();
        self.step = next;
        self.step_losses.push(loss);
        Ok(loss)
    }

    /// Greedy BLEU on the first `dev_sentences` dev pairs.
    pub fn evaluate_dev(&mut self) -> Result<f64> {
        if self.dev.is_empty() {
            return Ok(0.0);
        }
        let n = self.config.dev_sentences.min(self.dev.len()).max(1);
        let srcs: Vec<Vec<usize>> = self.dev.pairs[..n].iter().map(|p| p.src.clone()).collect();
        let refs: Vec<Vec<usize>> = self.dev.pairs[..n].iter().map(|p| p.tgt.clone()).collect();
        self.model.eval();
        let mut hyps = Vec::with_capacity(n);
        for chunk in srcs.chunks(DEV_BATCH) {
            let limit = length_budget(chunk.iter().map(Vec::len).max().unwrap_or(1));
            hyps.extend(greedy_decode_batch::<f32>(&self.model, chunk, limit)?);
        }
        self.model.train();
        Ok(corpus_bleu(&hyps, &refs, 4, Smoothing::None)?.bleu)
    }

    /// One pass over the training corpus followed by dev evaluation.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let seed = derive_seed(self.config.seed ^ EPOCH_SALT, self.epoch as u64);
        let batches = batchify(self.train, self.config.token_budget, seed)?;
        self.gate_sum = 0.0;
        self.gate_count = 0;
        self.part_sums = (0.0, 0.0);
        let first = self.step_losses.len();
        for group in batches.chunks(self.config.accumulation_steps) {
            if self.steps_exhausted() {
                break;
            }
            self.step(group)?;
        }
        let losses = &self.step_losses[first..];
        let train_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let dev_bleu = self.evaluate_dev()?;
        self.epoch += 1;
        let mean_g = (self.gate_count > 0).then(|| self.gate_sum / self.gate_count as f64);
        if let (Some(gs), Some(m)) = (self.gate.as_mut(), mean_g) {
            gs.last_epoch_mean_g = Some(m);
        }
        let record = EpochRecord {
            epoch: self.epoch,
            steps: self.step,
            train_loss,
            dev_bleu,
            lr: lr_at(self.step.max(1), self.config.base_lr, self.config.warmup_steps)?,
            mean_g,
            token_loss: mean_g.map(|_| self.part_sums.0 / self.gate_count as f64),
            sentence_loss: mean_g.map(|_| self.part_sums.1 / self.gate_count as f64),
        };
        info!(
            "{} epoch {} step {} loss {:.4} dev BLEU {:.2}{}",
            self.config.regime.as_str(),
            record.epoch,
            record.steps,
            record.train_loss,
            record.dev_bleu,
            match (mean_g, record.token_loss, record.sentence_loss) {
                (Some(g), Some(t), Some(s)) => format!(" mean g {g:.4} (token {t:.4}, sentence {s:.4})"),
                _ => String::new(),
            }
        );
        if self.best.as_ref().map_or(true, |b| dev_bleu > b.dev_bleu) {
            self.best = Some(BestSnapshot {
                dev_bleu,
                epoch: self.epoch,
                params: self.model.params().clone(),
                gate: self.gate.as_ref().map(|g| g.params.clone()),
            });
        }
        self.history.push(record.clone());
        Ok(record)
    }

    /// Train until `max_epochs` or `max_steps`, whichever comes first, and
    /// return the best-dev snapshot. A non-finite loss stops training; the
    /// outcome then carries the last good snapshot and the failing step.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let mut diverged = None;
        while self.epoch < self.config.max_epochs && !self.steps_exhausted() {
            match self.run_epoch() {
                Ok(_) => {}
                Err(Error::Diverged { step }) => {
                    debug!("diverged at step {step}");
                    diverged = Some(step);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(self.finish(diverged))
    }

    fn finish(self, diverged: Option<usize>) -> TrainOutcome {
        let Trainer {
            mut model,
            gate,
            history,
            step_losses,
            step,
            best,
            ..
        } = self;
        let (best_epoch, best_dev_bleu, gate) = match best {
            Some(b) => {
                *model.params_mut() = b.params;
                let gate = gate.map(|mut g| {
                    if let Some(p) = b.gate {
                        g.params = p;
                    }
                    g
                });
                (b.epoch, b.dev_bleu, gate)
            }
            None => (0, 0.0, gate),
        };
        model.eval();
        TrainOutcome {
            model,
            gate,
            history,
            step_losses,
            steps: step,
            best_epoch,
            best_dev_bleu,
            diverged,
        }
    }
}

/// Fraction of gold target tokens (EOS included) predicted correctly under
/// teacher forcing.
pub fn token_accuracy(model: &TransformerModel, corpus: &ParallelCorpus) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for chunk in corpus.pairs.chunks(DEV_BATCH) {
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|p| p.src.clone()).collect();
        let golds: Vec<Vec<usize>> = chunk
            .iter()
            .map(|p| {
                let mut t = p.tgt.clone();
                t.push(crate::corpus::EOS);
                t
            })
            .collect();
        let pred = teacher_forced_batch::<f32>(model, &srcs, &golds)?;
        for (p, g) in pred.iter().zip(&golds) {
            right += p.iter().zip(g).filter(|(a, b)| a == b).count();
            total += g.len();
        }
    }
    Ok(right as f64 / total.max(1) as f64)
}
