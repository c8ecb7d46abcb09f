use std::rc::Rc;

use proptest::prelude::*;

use phrasetrans::bleu::{corpus_bleu, SignatureInfo};
use phrasetrans::bpe::{learn_bpe, undo_bpe, WordMode};
use phrasetrans::checkpoint::{average_checkpoints, Checkpoint};
use phrasetrans::corpus::Vocab;
use phrasetrans::phrase::ngram_window;
use phrasetrans::tokenize::{tokenize_13a, tokenize_zh, Tokenizer};
use phrasetrans::train::{batch_cost, lr_at_step, make_token_batches, EncodedPair, TrainConfig};
use phrasetrans::{Graph, Tensor};

fn word() -> impl Strategy<Value = String> {
    "[a-eàáâãèéêìíòóôõùúăđơư]{1,7}"
}

fn line() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..8).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in prop::collection::vec(-30.0f64..30.0, 36),
        mask_bits in prop::collection::vec(any::<bool>(), 36),
    ) {
        let data: Vec<f64> = seed[..rows * cols].to_vec();
        let mut mask: Vec<bool> = mask_bits[..rows * cols].to_vec();
        for r in 0..rows {
            mask[r * cols] = true;
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax(x, Some(&Rc::new(mask.clone()))).unwrap();
        let v = g.value(y);
        for r in 0..rows {
            let s: f64 = v.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for c in 0..cols {
                if !mask[r * cols + c] {
                    prop_assert_eq!(v.row(r)[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn bpe_roundtrip(lines in prop::collection::vec(line(), 1..40), ops in 0usize..60) {
        let model = learn_bpe(&lines, ops, WordMode::Whitespace);
        prop_assert!(model.merges().len() <= ops);
        for l in &lines {
            prop_assert_eq!(&undo_bpe(&model.apply(l)), l);
        }
    }

    #[test]
    fn window_is_truncated_suffix(seq_len in 1usize..20, k_frac in 0.0f64..1.0, n in 1usize..6) {
        let k = ((seq_len as f64) * k_frac) as usize;
        let w = ngram_window(seq_len, k, n).unwrap();
        prop_assert_eq!(w.end, k + 1);
        prop_assert_eq!(w.len(), n.min(k + 1));
    }

    #[test]
    fn bleu_of_corpus_with_itself_is_100(lines in prop::collection::vec(line(), 1..10), pad in line()) {
        // at least four tokens so that every n-gram order has a denominator
        let lines: Vec<String> = lines.iter().map(|l| format!("{l} {pad} x y z")).collect();
        let r = corpus_bleu(&lines, &lines, Tokenizer::Mteval13a, &SignatureInfo::default()).unwrap();
        prop_assert_eq!(r.score, 100.0);
    }

    #[test]
    fn bleu_ignores_order_and_identical_appends(
        hyps in prop::collection::vec(line(), 2..8),
        refs in prop::collection::vec(line(), 8),
        extra in prop::collection::vec(line(), 0..4),
        rot in 0usize..8,
    ) {
        let refs = &refs[..hyps.len()];
        let info = SignatureInfo::default();
        let base = corpus_bleu(&hyps, refs, Tokenizer::Mteval13a, &info).unwrap();
        let mut h2: Vec<String> = hyps.clone();
        let mut r2: Vec<String> = refs.to_vec();
        h2.rotate_left(rot % hyps.len());
        r2.rotate_left(rot % hyps.len());
        let rotated = corpus_bleu(&h2, &r2, Tokenizer::Mteval13a, &info).unwrap();
        prop_assert!((rotated.score - base.score).abs() < 1e-9);
        // identical sentences on both sides add matches and lengths alike
        h2.extend(extra.iter().cloned());
        r2.extend(extra.iter().cloned());
        h2.reverse();
        r2.reverse();
        let appended = corpus_bleu(&h2, &r2, Tokenizer::Mteval13a, &info).unwrap();
        prop_assert!(appended.score >= base.score - 1e-9);
        prop_assert!((0.0..=100.0).contains(&appended.score));
    }

    #[test]
    fn zh_equals_13a_on_ascii(s in "[ -~]{0,40}") {
        prop_assert_eq!(tokenize_zh(&s), tokenize_13a(&s));
    }

    #[test]
    fn batches_partition_the_corpus(
        lens in prop::collection::vec((1usize..30, 1usize..30), 1..80),
        cap in 8usize..200,
        seed in any::<u64>(),
    ) {
        let pairs: Vec<EncodedPair> = lens.iter().map(|&(s, t)| (vec![4; s], vec![4; t])).collect();
        let batches = make_token_batches(&pairs, cap, seed);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..pairs.len()).collect::<Vec<_>>());
        for b in &batches {
            prop_assert!(b.len() == 1 || batch_cost(&pairs, b) <= cap);
        }
    }

    #[test]
    fn lr_decreases_after_warmup(warmup in 1u64..10_000, offset in 0u64..100_000) {
        let cfg = TrainConfig { warmup_steps: warmup, ..TrainConfig::default() };
        let s = warmup + offset;
        prop_assert!(lr_at_step(s + 1, &cfg) < lr_at_step(s, &cfg));
        prop_assert!(lr_at_step(s, &cfg) <= cfg.peak_lr);
    }

    #[test]
    fn averaging_is_permutation_invariant(vals in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 6), 1..6)) {
        let ckpts: Vec<Checkpoint> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| {
                // f32-representable values, as a checkpoint file would hold
                let v: Vec<f64> = v.iter().map(|x| *x as f32 as f64).collect();
                Checkpoint::new(i as u64, 1, "{}", vec![("w".into(), Tensor::new(vec![2, 3], v).unwrap())]).unwrap()
            })
            .collect();
        let mut reversed = ckpts.clone();
        reversed.reverse();
        let a = average_checkpoints(&ckpts).unwrap();
        let b = average_checkpoints(&reversed).unwrap();
        prop_assert!(a.tensors[0].1.max_abs_diff(&b.tensors[0].1) < 1e-12);
        prop_assert_eq!(a.step, vals.len() as u64 - 1);
    }

    #[test]
    fn vocab_is_stable(lines in prop::collection::vec(line(), 1..20)) {
        let a = Vocab::build(lines.iter().map(String::as_str));
        let b = Vocab::build(lines.iter().map(String::as_str));
        prop_assert_eq!(&a, &b);
        for l in &lines {
            prop_assert!(a.encode(l).iter().all(|&id| id >= 4));
        }
    }
}
