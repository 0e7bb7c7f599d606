//! Randomized invariants of the data pipeline, noise, BLEU and configs.

use kdlab::bleu::{corpus_bleu, Smoothing};
use kdlab::corpus::{batchify, generate_task, Pair, ParallelCorpus, TaskKind, TaskSpec};
use kdlab::distill::truncate_top_k;
use kdlab::noise::{corrupt, corrupt_with_stats, jitter_permutation, NoiseProfile};
use kdlab::train::{lr_at, Regime, TrainConfig};
use proptest::prelude::*;

fn sentence(max: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(4usize..40, 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bleu_is_bounded_and_perfect_on_copies(
        refs in prop::collection::vec(prop::collection::vec(0u8..6, 0..10), 1..6),
        hyps in prop::collection::vec(prop::collection::vec(0u8..6, 0..10), 1..6),
    ) {
        let n = refs.len().min(hyps.len());
        let r = corpus_bleu(&hyps[..n], &refs[..n], 4, Smoothing::None).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&r.bleu));
        prop_assert!(r.brevity_penalty <= 1.0);
        let same = corpus_bleu(&refs[..n], &refs[..n], 4, Smoothing::None).unwrap();
        if refs[..n].iter().map(|s| s.len().saturating_sub(3)).sum::<usize>() > 0 {
            prop_assert_eq!(same.bleu, 100.0);
        }
    }

    #[test]
    fn identity_noise_is_a_no_op(s in sentence(20), seed in any::<u64>()) {
        prop_assert_eq!(corrupt(&s, &NoiseProfile::none(), 40, seed).unwrap(), s);
    }

    #[test]
    fn noise_is_deterministic_and_keeps_ids_valid(s in sentence(20), seed in any::<u64>()) {
        let p = NoiseProfile::high();
        let (a, stats) = corrupt_with_stats(&s, &p, 40, seed).unwrap();
        prop_assert_eq!(&a, &corrupt(&s, &p, 40, seed).unwrap());
        prop_assert!(!a.is_empty());
        prop_assert!(a.iter().all(|&t| (4..40).contains(&t)));
        prop_assert_eq!(stats.input_tokens, s.len());
        prop_assert!(stats.deleted < s.len());
    }

    #[test]
    fn jitter_moves_tokens_at_most_k(n in 1usize..30, k in 0usize..5, raw in prop::collection::vec(0.0f64..1.0, 30)) {
        let keys: Vec<f64> = (0..n).map(|i| i as f64 + raw[i] * k as f64).collect();
        let perm = jitter_permutation(&keys);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        for (pos, &src) in perm.iter().enumerate() {
            prop_assert!(pos.abs_diff(src) <= k);
        }
    }

    #[test]
    fn top_k_rows_are_normalized(probs in prop::collection::vec(0.001f64..1.0, 1..30), k in 1usize..40) {
        let row = truncate_top_k(&probs, k);
        prop_assert_eq!(row.len(), k.min(probs.len()));
        let mass: f64 = row.iter().map(|&(_, p)| f64::from(p)).sum();
        prop_assert!((mass - 1.0).abs() < 1e-5);
        let kept_min = row.iter().map(|&(i, _)| probs[i]).fold(f64::INFINITY, f64::min);
        let dropped_max = (0..probs.len())
            .filter(|i| !row.iter().any(|&(j, _)| j == *i))
            .map(|i| probs[i])
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(kept_min >= dropped_max);
    }

    #[test]
    fn batchify_covers_every_pair_once_within_budget(
        lens in prop::collection::vec((1usize..12, 1usize..12), 1..60),
        budget in 16usize..128,
        seed in any::<u64>(),
    ) {
        let pairs = lens.iter().map(|&(a, b)| Pair { src: vec![5; a], tgt: vec![6; b] }).collect();
        let corpus = ParallelCorpus::new(pairs).unwrap();
        let batches = batchify(&corpus, budget, seed).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..corpus.len()).collect::<Vec<_>>());
        for b in &batches {
            prop_assert!(b.size * b.src_len.max(b.tgt_len) <= budget);
        }
    }

    #[test]
    fn tasks_are_deterministic_functions_of_the_source(seed in any::<u64>(), n in 1usize..20) {
        for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::LexiconReorder] {
            let spec = TaskSpec::new(kind, 30, (2, 8), 7);
            let a = generate_task(&spec, n, seed).unwrap();
            let b = generate_task(&spec, n, seed).unwrap();
            prop_assert_eq!(&a.pairs, &b.pairs);
            let lex = spec.lexicon();
            for p in &a.pairs {
                prop_assert_eq!(&spec.translate(&p.src, &lex), &p.tgt);
                prop_assert_eq!(p.src.len(), p.tgt.len());
            }
        }
    }

    #[test]
    fn train_config_survives_toml(lr in 1e-5f64..1e-1, warmup in 1usize..1000, acc in 1usize..8, seed in any::<u64>(), clip in prop::option::of(0.1f64..10.0)) {
        let cfg = TrainConfig {
            regime: Regime::Hybrid,
            base_lr: lr,
            warmup_steps: warmup,
            accumulation_steps: acc,
            seed,
            clip_norm: clip,
            ..TrainConfig::default()
        };
        match cfg.to_toml() {
            Ok(text) => prop_assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg),
            Err(_) => prop_assert!(seed > i64::MAX as u64),
        }
    }

    #[test]
    fn schedule_peaks_at_warmup(base in 1e-5f64..1e-1, warmup in 1usize..500, step in 1usize..5000) {
        let lr = lr_at(step, base, warmup).unwrap();
        prop_assert!(lr > 0.0 && lr <= base * (1.0 + 1e-12));
    }
}
