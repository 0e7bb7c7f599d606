//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and fails if any criterion fails.
//!
//! Criteria 8-11 train the quick-preset experiments over three seeds and
//! take about an hour on one core.

mod common;

use std::io::Write as _;
use std::time::Instant;

use kdlab::bleu::{corpus_bleu, Smoothing};
use kdlab::corpus::{generate_task, Batch, ParallelCorpus, TaskKind, TaskSpec, EOS};
use kdlab::decode::{beam_search, greedy_decode, length_normalized, sequence_log_prob, BeamConfig};
use kdlab::distill::{hybrid_loss, token_level_loss, token_level_loss_per_sequence, sentence_level_loss_per_sequence, train_gate_on_constant_losses};
use kdlab::harness::{ExperimentReport, ExperimentSpec, Lab, Study};
use kdlab::model::{ModelConfig, TransformerModel};
use kdlab::noise::{corrupt_with_stats, derive_seed, NoiseProfile};
use kdlab::tensor::{Graph, Tensor};
use kdlab::train::{load_checkpoint, save_checkpoint, token_accuracy, CheckpointError, Regime, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Written straight to stderr so the lines survive output capture.
fn announce(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
    let _ = err.flush();
}

struct Ledger {
    failures: Vec<String>,
}

impl Ledger {
    fn check(&mut self, n: usize, name: &str, limit_secs: f64, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        let timely = secs <= limit_secs;
        let pass = o.pass && timely;
        let time_note = if timely {
            String::new()
        } else {
            format!(" (over the {limit_secs:.0}s budget)")
        };
        announce(&format!(
            "criterion {n:>2} {:<4} {name}: {} [{secs:.1}s{time_note}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        ));
        if !pass {
            self.failures.push(format!("{n} {name}"));
        }
    }
}

fn autodiff() -> Outcome {
    let report = common::all_ops();
    let (worst_op, worst) = report
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default();
    let bad: Vec<&str> = report.iter().filter(|(_, e)| *e > common::TOL).map(|(n, _)| n.as_str()).collect();
    outcome(
        bad.is_empty(),
        format!(
            "{} ops x {} instances, worst relative error {worst:.2e} ({worst_op}){}",
            report.len(),
            common::INSTANCES,
            if bad.is_empty() { String::new() } else { format!(", failing: {}", bad.join(", ")) }
        ),
    )
}

fn random_dists(rng: &mut ChaCha8Rng, b: usize, m: usize, v: usize) -> Vec<f64> {
    let mut d: Vec<f64> = (0..b * m * v).map(|_| rng.gen_range(0.01..1.0f64).powi(3)).collect();
    for row in d.chunks_mut(v) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    d
}

fn random_pad(rng: &mut ChaCha8Rng, b: usize, m: usize) -> Vec<bool> {
    (0..b)
        .flat_map(|_| {
            let len = rng.gen_range(1..=m);
            (0..m).map(move |j| j >= len)
        })
        .collect()
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, m, v) = (4, 5, 11);
    let (mut worst_a, mut worst_b) = (0.0f64, 0.0f64);
    let mut exact_c = true;
    let mut bounded_d = true;
    for _ in 0..100 {
        let pt = random_dists(&mut rng, b, m, v);
        let pad = random_pad(&mut rng, b, m);
        let teacher = Tensor::new(vec![b, m, v], pt.clone()).unwrap();
        let positions = pad.iter().filter(|&&p| !p).count() as f64;

        // (a) student equal to teacher: loss is the mean teacher entropy.
        let mut g = Graph::<f64>::new();
        let lp = g.leaf(Tensor::new(vec![b, m, v], pt.iter().map(|p| p.ln()).collect()).unwrap()).unwrap();
        let loss = token_level_loss(&mut g, lp, &teacher, &pad).unwrap();
        let entropy: f64 = pt
            .chunks(v)
            .zip(&pad)
            .filter(|(_, &p)| !p)
            .map(|(row, _)| -row.iter().map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / positions;
        worst_a = worst_a.max((g.value(loss).data()[0] - entropy).abs());

        // (b) arbitrary student against brute-force double summation.
        let logits: Vec<f64> = (0..b * m * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![b, m, v], logits.clone()).unwrap()).unwrap();
        let lp = g.log_softmax(x).unwrap();
        let loss = token_level_loss(&mut g, lp, &teacher, &pad).unwrap();
        let per_seq = token_level_loss_per_sequence(&mut g, lp, &teacher, &pad).unwrap();
        let mut total = 0.0;
        let mut seq_means = Vec::new();
        for i in 0..b {
            let (mut s, mut n) = (0.0, 0.0);
            for j in 0..m {
                if pad[i * m + j] {
                    continue;
                }
                let row = &logits[(i * m + j) * v..(i * m + j + 1) * v];
                let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
                for k in 0..v {
                    s -= pt[(i * m + j) * v + k] * (row[k] - lse);
                }
                n += 1.0;
            }
            total += s;
            seq_means.push(s / n);
        }
        worst_b = worst_b.max((g.value(loss).data()[0] - total / positions).abs());
        for (a, e) in g.value(per_seq).data().iter().zip(&seq_means) {
            worst_b = worst_b.max((a - e).abs());
        }

        // (c) hybrid at the gate boundaries.
        let labels: Vec<usize> = pad.iter().map(|&p| if p { 0 } else { rng.gen_range(4..v) }).collect();
        let sent = sentence_level_loss_per_sequence(&mut g, lp, &labels, &pad).unwrap();
        let tok_mean = g.mean(per_seq).unwrap();
        let sent_mean = g.mean(sent).unwrap();
        let (tm, sm) = (g.value(tok_mean).data()[0], g.value(sent_mean).data()[0]);
        for (gate, expect) in [(1.0, tm), (0.0, sm)] {
            let gv = g.constant(Tensor::full(vec![b], gate)).unwrap();
            let h = hybrid_loss(&mut g, gv, per_seq, sent).unwrap();
            exact_c &= g.value(h).data()[0] == expect;
        }

        // (d) interior gates stay between the two losses.
        for _ in 0..10 {
            let gate = rng.gen_range(0.0..1.0);
            let gv = g.constant(Tensor::full(vec![b], gate)).unwrap();
            let h = hybrid_loss(&mut g, gv, per_seq, sent).unwrap();
            let hv = g.value(h).data()[0];
            let slack = 1e-12 * tm.abs().max(sm.abs());
            bounded_d &= hv >= tm.min(sm) - slack && hv <= tm.max(sm) + slack;
        }
    }
    outcome(
        worst_a <= 1e-6 && worst_b <= 1e-9 && exact_c && bounded_d,
        format!(
            "(a) entropy gap {worst_a:.1e}, (b) brute-force gap {worst_b:.1e}, (c) boundaries exact: {exact_c}, (d) 1000 gates bounded: {bounded_d}"
        ),
    )
}

fn gate_dynamics() -> Outcome {
    let trace = train_gate_on_constant_losses(1.0, 2.0, 100, 1.0).unwrap();
    let monotone = trace.windows(2).all(|w| w[1] > w[0]);
    let last = *trace.last().unwrap();
    outcome(
        monotone && last > 0.95 && trace.len() == 101,
        format!("g {:.4} -> {last:.4} over 100 steps, strictly increasing: {monotone}", trace[0]),
    )
}

fn noise_statistics() -> Outcome {
    let vocab = 512;
    let moderate = NoiseProfile::moderate();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut input, mut deleted, mut kept, mut substituted) = (0usize, 0usize, 0usize, 0usize);
    let mut i = 0u64;
    while input < 100_000 {
        let len = rng.gen_range(5..=20);
        let s: Vec<usize> = (0..len).map(|_| rng.gen_range(4..vocab)).collect();
        let (out, stats) = corrupt_with_stats(&s, &moderate, vocab, derive_seed(4, i)).unwrap();
        assert_eq!(stats.deleted, s.len() - out.len());
        input += stats.input_tokens;
        deleted += stats.deleted;
        kept += out.len();
        substituted += stats.substituted;
        i += 1;
    }
    let del_rate = deleted as f64 / input as f64;
    let sub_rate = substituted as f64 / kept as f64;
    let rates_ok = (del_rate - 0.10).abs() <= 0.005 && (sub_rate - 0.10).abs() <= 0.005;

    let swap = NoiseProfile::custom("swap", 0.0, 0.0, 1.0, 3);
    let mut multiset_ok = true;
    let mut moved = 0;
    for j in 0..2000u64 {
        let len = rng.gen_range(1..=20);
        let s: Vec<usize> = (0..len).map(|_| rng.gen_range(4..vocab)).collect();
        let out = corrupt_with_stats(&s, &swap, vocab, derive_seed(5, j)).unwrap().0;
        moved += usize::from(out != s);
        let (mut a, mut b) = (s.clone(), out);
        a.sort_unstable();
        b.sort_unstable();
        multiset_ok &= a == b;
    }
    outcome(
        rates_ok && multiset_ok && moved > 0,
        format!(
            "deletion {del_rate:.4}, substitution {sub_rate:.4} over {input} tokens; swap-only multiset preserved: {multiset_ok} ({moved}/2000 reordered)"
        ),
    )
}

/// Every finished output of at most `max_len` steps (EOS included).
fn enumerate(tokens: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    let mut all = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 1..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for &t in tokens {
                let mut q: Vec<usize> = p.clone();
                q.push(t);
                next.push(q);
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    all
}

fn beam_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vocab = 5;
    // PAD and BOS are never generated; EOS ends a hypothesis.
    let emit: Vec<usize> = (0..vocab).filter(|&t| t > EOS).collect();
    let (mut agree, mut greedy_agree) = (0, 0);
    let models = 100;
    for i in 0..models {
        let model = TransformerModel::build(ModelConfig::tiny(vocab, 8, 2, 1, 16), 1000 + i).unwrap();
        let src: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(3..vocab)).collect();
        let max_len = rng.gen_range(1..=4);
        let alpha = [0.0, 0.6, 1.0][rng.gen_range(0..3)];
        let cfg = BeamConfig {
            width: 1000,
            length_penalty: alpha,
            max_len,
        };
        let beam = beam_search::<f64>(&model, &src, &cfg).unwrap();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for cand in enumerate(&emit, max_len) {
            let lp = sequence_log_prob::<f64>(&model, &src, &cand, true).unwrap();
            let score = length_normalized(lp, cand.len() + 1, alpha);
            if best.as_ref().map_or(true, |(s, _)| score > *s) {
                best = Some((score, cand));
            }
        }
        agree += usize::from(best.map(|b| b.1) == Some(beam.tokens));

        let greedy = greedy_decode::<f64>(&model, &src, max_len).unwrap();
        let one = beam_search::<f64>(
            &model,
            &src,
            &BeamConfig {
                width: 1,
                ..cfg
            },
        )
        .unwrap();
        greedy_agree += usize::from(greedy == one.tokens);
    }
    outcome(
        agree == models as usize && greedy_agree == models as usize,
        format!("saturating beam = exhaustive argmax on {agree}/{models} models; width 1 = greedy on {greedy_agree}/{models}"),
    )
}

/// Straightforward BLEU-4: n-grams compared by linear scans, no hashing.
fn naive_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    let (mut c, mut r) = (0usize, 0usize);
    let mut prec = [0.0f64; 4];
    for (n, p) in prec.iter_mut().enumerate().map(|(i, p)| (i + 1, p)) {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, rf) in hyps.iter().zip(refs) {
            if h.len() < n {
                continue;
            }
            let grams: Vec<&[u32]> = h.windows(n).collect();
            total += grams.len();
            let mut seen: Vec<&[u32]> = Vec::new();
            for g in &grams {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_hyp = grams.iter().filter(|x| x == &g).count();
                let in_ref = if rf.len() >= n { rf.windows(n).filter(|x| x == g).count() } else { 0 };
                matched += in_hyp.min(in_ref);
            }
        }
        *p = if total == 0 { 0.0 } else { matched as f64 / total as f64 };
    }
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
    }
    if c == 0 || prec.iter().any(|&p| p == 0.0) {
        return 0.0;
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * (prec[0] * prec[1] * prec[2] * prec[3]).powf(0.25)
}

fn bleu_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..8);
        let alphabet = rng.gen_range(2..6);
        let sent = |rng: &mut ChaCha8Rng| -> Vec<u32> { (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0..alphabet)).collect() };
        let refs: Vec<Vec<u32>> = (0..n).map(|_| sent(&mut rng)).collect();
        let hyps: Vec<Vec<u32>> = (0..n).map(|_| sent(&mut rng)).collect();
        let got = corpus_bleu(&hyps, &refs, 4, Smoothing::None).unwrap().bleu;
        let want = naive_bleu(&hyps, &refs);
        nonzero += usize::from(want > 0.0);
        worst = worst.max((got - want).abs());
    }
    let refs: Vec<Vec<u32>> = (0..20).map(|i| (0..10).map(|j| (i * 7 + j) % 13).collect()).collect();
    let identical = corpus_bleu(&refs, &refs, 4, Smoothing::None).unwrap().bleu;
    outcome(
        worst <= 1e-9 && identical == 100.0,
        format!("200 random corpora ({nonzero} with nonzero BLEU), worst gap {worst:.1e}; identical corpus scores {identical}"),
    )
}

fn batch_of(corpus: &ParallelCorpus, rows: std::ops::Range<usize>) -> Batch {
    let pairs: Vec<(&[usize], &[usize])> = corpus.pairs[rows.clone()]
        .iter()
        .map(|p| (p.src.as_slice(), p.tgt.as_slice()))
        .collect();
    Batch::from_pairs(rows.collect(), &pairs)
}

fn training_soundness() -> Outcome {
    let xs = ExperimentSpec::quick(Study::SizeSweep).students[0].config.clone();
    let task = TaskSpec::new(TaskKind::Copy, xs.vocab_size, (4, 10), 7);
    let copy = generate_task(&task, 32, 3).unwrap();
    let batch = batch_of(&copy, 0..32);
    let cfg = TrainConfig {
        base_lr: 3e-3,
        warmup_steps: 50,
        accumulation_steps: 1,
        ..TrainConfig::default()
    };
    let model = TransformerModel::build(xs.clone(), 1).unwrap();
    let mut t = Trainer::new(model, cfg.clone(), &copy, &copy, None).unwrap();
    let (mut acc, mut steps) = (0.0, 0);
    while steps < 500 {
        t.step(std::slice::from_ref(&batch)).unwrap();
        steps += 1;
        if steps % 10 == 0 {
            acc = token_accuracy(&t.model, &copy).unwrap();
            if acc >= 0.99 {
                break;
            }
        }
    }

    // One step on four micro-batches against one step on their union.
    let model = TransformerModel::build(xs, 2).unwrap();
    let micro: Vec<Batch> = (0..4).map(|k| batch_of(&copy, k * 8..(k + 1) * 8)).collect();
    let mut split = Trainer::new(model.clone(), TrainConfig { accumulation_steps: 4, ..cfg.clone() }, &copy, &copy, None).unwrap();
    let mut whole = Trainer::new(model, cfg, &copy, &copy, None).unwrap();
    for _ in 0..3 {
        split.step_in::<f64>(&micro).unwrap();
        whole.step_in::<f64>(std::slice::from_ref(&batch)).unwrap();
    }
    // Over the whole parameter vector: attention key biases have an exactly
    // zero gradient and sit near 1e-13, where Adam's normalization turns
    // rounding noise into full-size steps, so per-tensor ratios are
    // meaningless for them.
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (id, (_, a)) in split.model.params().iter().enumerate() {
        for (x, y) in a.data().iter().zip(whole.model.params().value(id).data()) {
            num += (f64::from(*x) - f64::from(*y)).powi(2);
            den += f64::from(*y).powi(2);
        }
    }
    let worst = num.sqrt() / den.sqrt();
    outcome(
        acc >= 0.99 && worst <= 1e-5,
        format!(
            "XS copy: {:.2}% teacher-forced accuracy after {steps} steps; 4x8 vs 1x32 relative parameter gap {worst:.1e} after 3 steps",
            100.0 * acc
        ),
    )
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::quick(Study::SizeSweep);
    let task = spec.task.clone();
    let data = generate_task(&task, 24, 9).unwrap();
    let cfg = TrainConfig {
        accumulation_steps: 1,
        ..TrainConfig::default()
    };
    let model = TransformerModel::build(spec.students[1].config.clone(), 3).unwrap();
    let mut t = Trainer::new(model, cfg, &data, &data, None).unwrap();
    let batch = batch_of(&data, 0..24);
    for _ in 0..3 {
        t.step(std::slice::from_ref(&batch)).unwrap();
    }
    let ck = t.checkpoint(None);
    save_checkpoint(&ck, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    let restored = back.model().unwrap();

    let logits = |m: &TransformerModel| -> Vec<u32> {
        let mut g = Graph::<f32>::new();
        let mut f = m.forward(&mut g, false);
        let mem = f.encode(batch.src_ids()).unwrap();
        let out = f.decode(batch.tgt_ids(), mem, &batch.src_pad).unwrap();
        g.value(out).data().iter().map(|x| x.to_bits()).collect()
    };
    let mut original = t.model.clone();
    original.eval();
    let bitwise = logits(&original) == logits(&restored);
    let adam_same = back.adam.as_ref().map(|a| (a.step, a.m.clone(), a.v.clone()))
        == ck.adam.as_ref().map(|a| (a.step, a.m.clone(), a.v.clone()));

    let blob = dir.path().join("tensors.bin");
    let len = std::fs::metadata(&blob).unwrap().len();
    let f = std::fs::OpenOptions::new().write(true).open(&blob).unwrap();
    f.set_len(len - 7).unwrap();
    let structured = matches!(
        load_checkpoint(dir.path()),
        Err(kdlab::Error::Checkpoint(CheckpointError::TruncatedBlob { .. }))
    );
    outcome(
        bitwise && adam_same && structured,
        format!("forward outputs bitwise equal: {bitwise}; optimizer state equal: {adam_same}; truncated blob gives a structured error: {structured}"),
    )
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn save(report: &ExperimentReport, lab: &Lab) {
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(report.study.as_str());
    if let Err(e) = lab.write_outputs(report, &dir) {
        announce(&format!("could not write {}: {e}", dir.display()));
    }
    announce(&report.to_markdown());
}

fn size_trend(lab: &mut Lab) -> Outcome {
    let report = lab.run(Study::SizeSweep).unwrap();
    save(&report, lab);
    let names: Vec<String> = lab.spec.students.iter().map(|s| s.name.clone()).collect();
    let delta = |n: &str| report.cell(n, "token_kd", "delta");
    let (first, last) = (&names[0], &names[names.len() - 1]);
    let trend: Vec<String> = names.iter().map(|n| format!("{n} {:+.2}", delta(n).unwrap_or(f64::NAN))).collect();
    let pass = matches!((delta(first), delta(last)), (Some(a), Some(b)) if a < b);
    outcome(pass, format!("mean delta by size: {}", trend.join(", ")))
}

fn noise_trend(lab: &mut Lab) -> Outcome {
    let report = lab.run(Study::NoiseSweep).unwrap();
    save(&report, lab);
    let delta = |p: &str| report.cell(p, "token_kd", "delta");
    let pass = matches!((delta("none"), delta("high")), (Some(a), Some(b)) if b < a);
    let trend: Vec<String> = lab
        .spec
        .noise_profiles
        .iter()
        .map(|p| format!("{} {:+.2}", p.name, delta(&p.name).unwrap_or(f64::NAN)))
        .collect();
    outcome(pass, format!("mean delta by noise: {}", trend.join(", ")))
}

fn decoding_trend(lab: &mut Lab) -> Outcome {
    let report = lab.run(Study::Decoding).unwrap();
    save(&report, lab);
    let rows: Vec<_> = report.rows.iter().filter(|r| r.ok()).collect();
    let col = |name: &str| report.columns().iter().position(|c| *c == name).unwrap();
    let (bs, tf) = (col("delta_bs"), col("delta_tf"));
    let complete = rows.len() == report.rows.len() && rows.iter().all(|r| r.cells[bs].is_some() && r.cells[tf].is_some());
    let mbs = mean(rows.iter().filter_map(|r| r.cells[bs]));
    let mtf = mean(rows.iter().filter_map(|r| r.cells[tf]));
    let per: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {:+.2}/{:+.2}", r.condition, r.cells[tf].unwrap_or(f64::NAN), r.cells[bs].unwrap_or(f64::NAN)))
        .collect();
    outcome(
        complete && mtf > mbs,
        format!("mean delta TF {mtf:+.2} vs beam {mbs:+.2} (TF/beam by size: {})", per.join(", ")),
    )
}

fn hybrid_trend(lab: &mut Lab) -> Outcome {
    let report = lab.run(Study::HybridVsSingle).unwrap();
    save(&report, lab);
    let focus = report.rows[0].condition.clone();
    let bleu = |r: Regime| report.cell(&focus, r.as_str(), "bleu_mean");
    let (tok, sen, hyb) = (bleu(Regime::TokenKd), bleu(Regime::SentenceKd), bleu(Regime::Hybrid));
    let g0 = report.cell(&focus, "hybrid", "initial_mean_g");
    let g1 = report.cell(&focus, "hybrid", "final_mean_g");
    let pass = match (tok, sen, hyb, g0, g1) {
        (Some(t), Some(s), Some(h), Some(a), Some(b)) => h >= t.max(s) - 0.2 && b > a,
        _ => false,
    };
    let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
    let hybrid_runs: Vec<_> = report.runs.iter().filter(|r| r.regime == Regime::Hybrid.as_str()).collect();
    let last_loss = |pick: fn(&kdlab::harness::RunRecord) -> Option<f64>| {
        let v: Vec<f64> = hybrid_runs.iter().filter_map(|r| pick(r)).collect();
        (!v.is_empty()).then(|| mean(v))
    };
    outcome(
        pass,
        format!(
            "{focus}: hybrid {} vs token {} / sentence {}; mean g {} -> {}; last-epoch token loss {} vs sentence loss {}",
            f(hyb),
            f(tok),
            f(sen),
            g0.map_or("-".into(), |v| format!("{v:.3}")),
            g1.map_or("-".into(), |v| format!("{v:.3}")),
            last_loss(|r| r.final_token_loss).map_or("-".into(), |v| format!("{v:.3}")),
            last_loss(|r| r.final_sentence_loss).map_or("-".into(), |v| format!("{v:.3}"))
        ),
    )
}

#[test]
fn acceptance_properties() {
    let mut l = Ledger { failures: Vec::new() };
    l.check(1, "autodiff matches finite differences", 60.0, autodiff);
    l.check(2, "distillation loss identities", 60.0, loss_identities);
    l.check(3, "gate moves toward token-level loss", 10.0, gate_dynamics);
    l.check(4, "noise statistics", 30.0, noise_statistics);
    l.check(5, "beam search matches exhaustive search", 120.0, beam_oracle);
    l.check(6, "BLEU matches naive counting", 60.0, bleu_oracle);
    l.check(7, "training soundness", 300.0, training_soundness);
    l.check(12, "checkpoint persistence", 10.0, persistence);
    assert!(l.failures.is_empty(), "failed criteria: {}", l.failures.join(", "));
}

#[test]
fn acceptance_trends() {
    let mut l = Ledger { failures: Vec::new() };
    let mut lab = Lab::new(ExperimentSpec::quick(Study::SizeSweep)).unwrap();
    l.check(8, "delta grows with student size", 1800.0, || size_trend(&mut lab));
    l.check(10, "teacher forcing favors token-level more than beam search", 600.0, || decoding_trend(&mut lab));
    l.check(11, "hybrid matches the better single regime", 1800.0, || hybrid_trend(&mut lab));
    l.check(9, "delta shrinks under source noise", 1800.0, || noise_trend(&mut lab));

    assert!(l.failures.is_empty(), "failed criteria: {}", l.failures.join(", "));
}
