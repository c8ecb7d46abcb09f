use std::collections::BTreeSet;

use proptest::prelude::*;

use phrasetrans::model::{count_parameters, TokenBatch, TrainingBatch, BOS};
use phrasetrans::{Graph, Model, ModelConfig};

fn tiny(vocab: usize, gram: &str, seed: u64) -> Model {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 12,
        dropout: 0.0,
        label_smoothing: 0.0,
        gram: gram.parse().unwrap(),
        src_vocab_size: vocab,
        tgt_vocab_size: vocab,
        max_len: 32,
        ..ModelConfig::default()
    };
    Model::new(cfg, seed).unwrap()
}

/// Term-by-term count, written without the library's helpers.
fn param_oracle(cfg: &ModelConfig, per_head: &[BTreeSet<usize>]) -> usize {
    let d = cfg.d_model;
    let w = 2 * (d / cfg.heads);
    let lstm = 4 * w * (w + w + 1);
    let pairs: usize = if cfg.share_lstm_across_heads {
        per_head.iter().flatten().collect::<BTreeSet<_>>().len()
    } else {
        per_head.iter().map(BTreeSet::len).sum()
    };
    let attn = 4 * d * d;
    let ffn = 2 * d * cfg.ffn_dim + cfg.ffn_dim + d;
    let enc = attn + ffn + 4 * d + pairs * 2 * lstm;
    let dec = 2 * attn + ffn + 6 * d;
    (cfg.src_vocab_size + cfg.tgt_vocab_size) * d
        + cfg.encoder_layers * enc
        + cfg.decoder_layers * dec
        + (d + 1) * cfg.tgt_vocab_size
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parameter_count_matches_oracle_and_store(
        heads in 1usize..4,
        dh in 1usize..4,
        n_enc in 0usize..3,
        n_dec in 0usize..3,
        ffn in 1usize..20,
        sv in 4usize..30,
        tv in 4usize..30,
        grams in prop::collection::btree_set(1usize..5, 0..3),
        shared in any::<bool>(),
    ) {
        let d = 2 * heads * dh;
        let list: Vec<String> = grams.iter().map(usize::to_string).collect();
        let cfg = ModelConfig {
            d_model: d,
            heads,
            encoder_layers: n_enc,
            decoder_layers: n_dec,
            ffn_dim: ffn,
            src_vocab_size: sv,
            tgt_vocab_size: tv,
            gram: format!("cross_h:[{}]", list.join(",")).parse().unwrap(),
            share_lstm_across_heads: shared,
            ..ModelConfig::default()
        };
        let per_head = vec![grams.clone(); heads];
        let oracle = param_oracle(&cfg, &per_head);
        prop_assert_eq!(count_parameters(&cfg).unwrap(), oracle);
        if n_enc > 0 && n_dec > 0 {
            let m = Model::new(cfg, 3).unwrap();
            prop_assert_eq!(m.num_parameters(), oracle);
            prop_assert_eq!(m.params().numel(), oracle);
        }
    }

    #[test]
    fn losses_do_not_depend_on_batch_padding(
        sents in prop::collection::vec(
            (prop::collection::vec(4usize..14, 1..9), prop::collection::vec(4usize..14, 1..9)),
            2..5,
        ),
        seed in 0u64..50,
    ) {
        let m = tiny(14, "cross_h:[2,3]", seed);
        let pairs: Vec<(&[usize], &[usize])> = sents.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
        let together = m.sentence_losses(&TrainingBatch::from_pairs(&pairs).unwrap(), 0.0).unwrap();
        for (i, p) in pairs.iter().enumerate() {
            let alone = m.sentence_losses(&TrainingBatch::from_pairs(&[*p]).unwrap(), 0.0).unwrap()[0];
            prop_assert!((alone - together[i]).abs() < 1e-6, "sentence {i}: {alone} vs {}", together[i]);
        }
    }
}

#[test]
fn decoder_position_ignores_later_inputs() {
    // tokens 10.. appear only after the probed position
    let m = tiny(16, "cross_h:[2]", 5);
    let prefix = vec![BOS, 4, 5, 6, 10, 11, 12];
    let mut store = m.params().clone();
    for t in 0..4 {
        let mut tail = prefix.clone();
        for (j, tok) in tail.iter_mut().enumerate().skip(t + 1) {
            *tok = 10 + j % 6;
        }
        store.zero_grads();
        let mut g = Graph::new();
        let src = TokenBatch::new(&[vec![4, 7, 8, 3]]).unwrap();
        let tgt = TokenBatch::new(&[tail.clone()]).unwrap();
        let mem = m.encode(&mut g, &src).unwrap();
        let logits = m.decode(&mut g, &tgt, mem, &src.lens).unwrap();
        let flat = g.reshape(logits, &[tail.len(), 16]).unwrap();
        let row = g.gather_rows(flat, &[Some(t)]).unwrap();
        let loss = g.sum(row);
        g.backward(loss, &mut store).unwrap();
        let grad = &store.get(m.tgt_embedding()).grad;
        for &tok in &tail[t + 1..] {
            if tail[..=t].contains(&tok) {
                continue;
            }
            assert!(grad[tok * 8..(tok + 1) * 8].iter().all(|&x| x == 0.0), "position {t} saw token {tok}");
        }
        let seen = tail[t];
        assert!(grad[seen * 8..(seen + 1) * 8].iter().any(|&x| x != 0.0));
    }
}
