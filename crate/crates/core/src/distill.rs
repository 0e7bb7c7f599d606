//! Token-level, sentence-level and gated hybrid distillation objectives.
//!
//! * token-level: cross-entropy between the teacher's next-token
//!   distribution and the student's, under the gold prefix;
//! * sentence-level: negative log-likelihood of the teacher's beam output;
//! * hybrid: `g(x) * token + (1 - g(x)) * sentence` with a learnable
//!   sigmoid gate `g(x)`.
//!
//! Both losses are divided by the number of target positions of their
//! sequence before they are mixed, so the gate compares per-token costs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, EOS, PAD};
use crate::decode::{beam_search, BeamConfig};
use crate::model::{ParamStore, TransformerModel};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{io_err, Error, Result};

/// Initial gate logit; `sigmoid(0.9445) ~= 0.72`.
pub const GATE_INIT_LOGIT: f64 = 0.9445;

/// Teacher rows must sum to one within this tolerance.
const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Sparse probability row: `(token id, probability)` sorted by id.
pub type SparseRow = Vec<(usize, f32)>;

/// Teacher outputs for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSignals {
    /// Beam-search output per row, terminated by EOS.
    pub pseudo_targets: Vec<Vec<usize>>,
    /// `[batch, tgt_len, vocab]`, zero rows at padded positions.
    pub teacher_dists: Tensor<f32>,
    /// Non-pad target positions per row.
    pub positions: Vec<usize>,
}

/// Keep the `top_k` largest entries of `probs` and renormalize. Ties at the
/// cut are broken toward lower ids.
pub fn truncate_top_k(probs: &[f64], top_k: usize) -> SparseRow {
    let k = top_k.clamp(1, probs.len());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    if k < probs.len() {
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        order.truncate(k);
        order.sort_unstable();
    }
    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    order.into_iter().map(|i| (i, (probs[i] / mass) as f32)).collect()
}

/// Teacher softmax under the gold prefix for every non-pad target position of
/// `batch`, truncated to `top_k` entries per row.
pub fn teacher_rows(teacher: &TransformerModel, batch: &Batch, top_k: usize) -> Result<Vec<Vec<SparseRow>>> {
    let mut g = Graph::<f32>::new();
    let mut f = teacher.forward(&mut g, false);
    let mem = f.encode(batch.src_ids())?;
    let logits = f.decode(batch.tgt_ids(), mem, &batch.src_pad)?;
    let out = g.value(logits);
    let lens = batch.row_lengths();
    Ok((0..batch.size)
        .map(|b| {
            (0..lens[b])
                .map(|j| {
                    let lp = crate::tensor::log_softmax_row(out.row3(b, j));
                    let probs: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
                    truncate_top_k(&probs, top_k)
                })
                .collect()
        })
        .collect())
}

/// Densify per-row sparse teacher rows into `[batch, tgt_len, vocab]`.
pub fn dense_teacher_dists<T: Scalar>(rows: &[&[SparseRow]], tgt_len: usize, vocab: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); rows.len() * tgt_len * vocab];
    for (b, seq) in rows.iter().enumerate() {
        for (j, row) in seq.iter().enumerate().take(tgt_len) {
            let base = (b * tgt_len + j) * vocab;
            for &(id, p) in row {
                data[base + id] = T::of(p as f64);
            }
        }
    }
    Tensor::new(vec![rows.len(), tgt_len, vocab], data).expect("consistent sizes")
}

/// Teacher beam output for every source (EOS not included).
pub fn pseudo_targets(teacher: &TransformerModel, srcs: &[Vec<usize>], beam: &BeamConfig) -> Result<Vec<Vec<usize>>> {
    srcs.iter()
        .map(|s| {
            let cfg = BeamConfig {
                max_len: beam.max_len.min(crate::decode::length_budget(s.len())),
                ..beam.clone()
            };
            let mut h = beam_search::<f32>(teacher, s, &cfg)?.tokens;
            if h.is_empty() {
                // An immediate EOS leaves nothing to learn from; keep one token.
                h = teacher_first_token(teacher, s)?;
            }
            Ok(h)
        })
        .collect()
}

fn teacher_first_token(teacher: &TransformerModel, src: &[usize]) -> Result<Vec<usize>> {
    let g = crate::decode::greedy_decode::<f32>(teacher, src, 1)?;
    Ok(if g.is_empty() { vec![src[0]] } else { g })
}

/// Pseudo-targets and teacher distributions for one batch.
pub fn extract_teacher_signals(
    teacher: &TransformerModel,
    student_vocab: usize,
    batch: &Batch,
    beam: &BeamConfig,
    top_k: usize,
) -> Result<TeacherSignals> {
    let v = teacher.config().vocab_size;
    if v != student_vocab {
        return Err(Error::Config(format!(
            "teacher vocabulary ({v}) differs from student vocabulary ({student_vocab})"
        )));
    }
    let rows = teacher_rows(teacher, batch, top_k)?;
    let refs: Vec<&[SparseRow]> = rows.iter().map(Vec::as_slice).collect();
    let teacher_dists = dense_teacher_dists(&refs, batch.tgt_len, v);
    let srcs: Vec<Vec<usize>> = (0..batch.size)
        .map(|b| {
            let row = &batch.src[b * batch.src_len..(b + 1) * batch.src_len];
            let pad = &batch.src_pad[b * batch.src_len..(b + 1) * batch.src_len];
            row.iter().zip(pad).filter(|(_, &p)| !p).map(|(&t, _)| t).collect()
        })
        .collect();
    let pseudo_targets = pseudo_targets(teacher, &srcs, beam)?
        .into_iter()
        .map(|mut t| {
            t.push(EOS);
            t
        })
        .collect();
    Ok(TeacherSignals {
        pseudo_targets,
        teacher_dists,
        positions: batch.row_lengths(),
    })
}

/// Per-position weights: `1 / n_b` at the non-pad positions of row `b`.
fn row_weights<T: Scalar>(pad: &[bool], rows: usize, len: usize) -> Vec<T> {
    let mut w = vec![T::zero(); rows * len];
    for b in 0..rows {
        let r = &pad[b * len..(b + 1) * len];
        let n = r.iter().filter(|&&p| !p).count().max(1);
        for j in 0..len {
            if !r[j] {
                w[b * len + j] = T::of(1.0 / n as f64);
            }
        }
    }
    w
}

fn check_teacher_rows<T: Scalar>(dists: &Tensor<T>, pad: &[bool]) -> Result<()> {
    for (i, row) in dists.rows().enumerate() {
        if pad[i] {
            continue;
        }
        let s: f64 = row.iter().map(|x| x.as_f64()).sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Input(format!("teacher row {i} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// `-sum_j sum_v P_t(v) log P_s(v)` per row, divided by the row's non-pad
/// position count. Returns `[batch]`.
pub fn token_level_loss_per_sequence<T: Scalar>(
    g: &mut Graph<T>,
    student_log_probs: Var,
    teacher_dists: &Tensor<T>,
    pad: &[bool],
) -> Result<Var> {
    let shape = g.shape(student_log_probs).to_vec();
    if shape != teacher_dists.shape() || shape.len() != 3 {
        return Err(crate::TensorError::ShapeMismatch {
            op: "token_level_loss",
            lhs: shape,
            rhs: teacher_dists.shape().to_vec(),
        }
        .into());
    }
    let (b, m, v) = (shape[0], shape[1], shape[2]);
    check_teacher_rows(teacher_dists, pad)?;
    let w = row_weights::<T>(pad, b, m);
    let weighted = Tensor::from_fn(vec![b, m, v], |i| {
        let r = i / v;
        if pad[r] {
            T::zero()
        } else {
            -teacher_dists.data()[i] * w[r]
        }
    });
    let wt = g.constant(weighted)?;
    let prod = g.mul(student_log_probs, wt)?;
    let prod = g.reshape(prod, &[b, m * v])?;
    Ok(g.sum_last(prod)?)
}

/// Token-level loss summed over all non-pad positions of the batch and
/// divided by their count.
pub fn token_level_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_log_probs: Var,
    teacher_dists: &Tensor<T>,
    pad: &[bool],
) -> Result<Var> {
    let shape = g.shape(student_log_probs).to_vec();
    if shape != teacher_dists.shape() || shape.len() != 3 {
        return Err(crate::TensorError::ShapeMismatch {
            op: "token_level_loss",
            lhs: shape,
            rhs: teacher_dists.shape().to_vec(),
        }
        .into());
    }
    check_teacher_rows(teacher_dists, pad)?;
    let v = shape[2];
    let count = pad.iter().filter(|&&p| !p).count().max(1);
    let weighted = Tensor::from_fn(shape, |i| {
        if pad[i / v] {
            T::zero()
        } else {
            -teacher_dists.data()[i]
        }
    });
    let wt = g.constant(weighted)?;
    let prod = g.mul(student_log_probs, wt)?;
    let total = g.sum(prod)?;
    Ok(g.scale(total, 1.0 / count as f64)?)
}

fn check_labels(labels: &[usize], pad: &[bool], len: usize) -> Result<()> {
    for (r, (row, prow)) in labels.chunks(len).zip(pad.chunks(len)).enumerate() {
        if row.iter().zip(prow).any(|(&t, &p)| !p && t == PAD) {
            return Err(Error::Input(format!("pseudo-target {r} contains PAD inside the sequence")));
        }
    }
    Ok(())
}

/// `-sum_j log P_s(yhat_j | yhat_<j, x)` per row, divided by the row's
/// position count. Returns `[batch]`.
pub fn sentence_level_loss_per_sequence<T: Scalar>(
    g: &mut Graph<T>,
    student_log_probs: Var,
    labels: &[usize],
    pad: &[bool],
) -> Result<Var> {
    let shape = g.shape(student_log_probs).to_vec();
    let (b, m) = (shape[0], shape[1]);
    check_labels(labels, pad, m)?;
    let picked = g.select_last(student_log_probs, labels)?;
    let w: Vec<T> = row_weights::<T>(pad, b, m).into_iter().map(|x| -x).collect();
    let wt = g.constant(Tensor::new(vec![b, m], w)?)?;
    let prod = g.mul(picked, wt)?;
    Ok(g.sum_last(prod)?)
}

/// Sentence-level loss over the whole batch divided by its position count.
pub fn sentence_level_loss<T: Scalar>(g: &mut Graph<T>, student_log_probs: Var, labels: &[usize], pad: &[bool]) -> Result<Var> {
    let shape = g.shape(student_log_probs).to_vec();
    let (b, m) = (shape[0], shape[1]);
    check_labels(labels, pad, m)?;
    let count = pad.iter().filter(|&&p| !p).count().max(1);
    let picked = g.select_last(student_log_probs, labels)?;
    let w: Vec<T> = pad.iter().map(|&p| if p { T::zero() } else { -T::one() }).collect();
    let wt = g.constant(Tensor::new(vec![b, m], w)?)?;
    let prod = g.mul(picked, wt)?;
    let total = g.sum(prod)?;
    Ok(g.scale(total, 1.0 / count as f64)?)
}

/// Mean over sequences of `g_i * L_tok_i + (1 - g_i) * L_sent_i`.
pub fn hybrid_loss<T: Scalar>(g: &mut Graph<T>, gates: Var, token: Var, sentence: Var) -> Result<Var> {
    let a = g.mul(gates, token)?;
    let neg = g.scale(gates, -1.0)?;
    let rest = g.add_scalar(neg, 1.0)?;
    let b = g.mul(rest, sentence)?;
    let mix = g.add(a, b)?;
    Ok(g.mean(mix)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// One global logit `z0`.
    Scalar,
    /// `z(x) = w . meanpool(encoder(x)) + b`.
    PooledLinear,
}

/// Learnable gate parameters plus the last epoch's mean gate value.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState {
    pub mode: GateMode,
    pub params: ParamStore,
    pub last_epoch_mean_g: Option<f64>,
}

impl GateState {
    pub fn new(mode: GateMode, d_model: usize) -> Self {
        Self::with_logit(mode, d_model, GATE_INIT_LOGIT)
    }

    pub fn with_logit(mode: GateMode, d_model: usize, logit: f64) -> Self {
        let mut params = ParamStore::new();
        match mode {
            GateMode::Scalar => {
                params.insert("gate.z0", Tensor::scalar(logit as f32));
            }
            GateMode::PooledLinear => {
                params.insert("gate.w", Tensor::zeros(vec![d_model, 1]));
                params.insert("gate.b", Tensor::scalar(logit as f32));
            }
        }
        Self {
            mode,
            params,
            last_epoch_mean_g: None,
        }
    }

    /// Gate values `[batch]`. Parameter leaves get ids offset by `id_offset`
    /// so they can share a graph with model parameters.
    pub fn values<T: Scalar>(&self, g: &mut Graph<T>, pooled: Option<Var>, batch: usize, id_offset: usize) -> Result<Var> {
        match self.mode {
            GateMode::Scalar => {
                let z0 = g.param(self.params.value(0).cast(), id_offset)?;
                let z = g.concat(&vec![z0; batch], 0)?;
                Ok(g.sigmoid(z)?)
            }
            GateMode::PooledLinear => {
                let pooled = pooled.ok_or_else(|| Error::Input("pooled-linear gate needs pooled encoder states".into()))?;
                let w = g.param(self.params.value(0).cast(), id_offset)?;
                let b = g.param(self.params.value(1).cast(), id_offset + 1)?;
                let z = g.matmul(pooled, w)?;
                let z = g.add(z, b)?;
                let z = g.reshape(z, &[batch])?;
                Ok(g.sigmoid(z)?)
            }
        }
    }
}

/// Scalar gate trained alone by plain gradient descent against two constant
/// per-token losses. Returns `g` after every step (the first entry is the
/// initial value).
pub fn train_gate_on_constant_losses(token_loss: f64, sentence_loss: f64, steps: usize, lr: f64) -> Result<Vec<f64>> {
    let mut state = GateState::new(GateMode::Scalar, 1);
    let mut z = GATE_INIT_LOGIT;
    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        state.params.set_from_f64(0, &[z]);
        let mut g = Graph::<f64>::new();
        let gate = {
            let z0 = g.param(Tensor::scalar(z), 0)?;
            g.sigmoid(z0)?
        };
        trace.push(g.value(gate).data()[0]);
        let lt = g.constant(Tensor::scalar(token_loss))?;
        let ls = g.constant(Tensor::scalar(sentence_loss))?;
        let loss = hybrid_loss(&mut g, gate, lt, ls)?;
        g.backward(loss)?;
        let grad = g.param_grads().next().map(|(_, t)| t.data()[0]).unwrap_or(0.0);
        z -= lr * grad;
    }
    trace.truncate(steps + 1);
    Ok(trace)
}

/// One gate-trace row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTraceRow {
    pub epoch: usize,
    pub mean_g: f64,
    pub train_loss: f64,
    pub dev_bleu: f64,
}

/// Per-epoch gate diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub rows: Vec<GateTraceRow>,
}

pub const GATE_TRACE_HEADER: &str = "epoch,mean_g,train_loss,dev_bleu";

impl GateTrace {
    pub fn record(&mut self, epoch: usize, mean_g: f64, train_loss: f64, dev_bleu: f64) {
        self.rows.push(GateTraceRow {
            epoch,
            mean_g,
            train_loss,
            dev_bleu,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(GATE_TRACE_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.epoch, r.mean_g, r.train_loss, r.dev_bleu);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(GATE_TRACE_HEADER) {
            return Err(Error::Parse {
                path: "gate trace".into(),
                detail: format!("expected header {GATE_TRACE_HEADER:?}"),
            });
        }
        let parse_err = |l: &str| Error::Parse {
            path: "gate trace".into(),
            detail: format!("bad row {l:?}"),
        };
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 4 {
                    return Err(parse_err(l));
                }
                Ok(GateTraceRow {
                    epoch: f[0].parse().map_err(|_| parse_err(l))?,
                    mean_g: f[1].parse().map_err(|_| parse_err(l))?,
                    train_loss: f[2].parse().map_err(|_| parse_err(l))?,
                    dev_bleu: f[3].parse().map_err(|_| parse_err(l))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_csv(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn first_mean_g(&self) -> Option<f64> {
        self.rows.first().map(|r| r.mean_g)
    }

    pub fn last_mean_g(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mean_g)
    }
}
