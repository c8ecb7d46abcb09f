"""Smoke test for the pyphrasetrans extension module."""

import json
import math
import os
import tempfile

import pyphrasetrans as pt


def main():
    cfg = {
        "d_model": 16,
        "heads": 2,
        "encoder_layers": 1,
        "decoder_layers": 1,
        "ffn_dim": 32,
        "dropout": 0.0,
        "label_smoothing": 0.0,
        "gram": "cross_h:[2]",
        "src_vocab_size": 12,
        "tgt_vocab_size": 12,
        "max_len": 32,
    }
    model = pt.Model(json.dumps(cfg), seed=3)
    assert model.num_parameters == pt.count_parameters(json.dumps(cfg))
    enc = model.encode([4, 5, 6])
    assert len(enc) == 3 and len(enc[0]) == 16

    pairs = [([4 + i % 8, 4 + (i * 3) % 8], [4 + i % 8, 4 + (i * 3) % 8]) for i in range(64)]
    losses = model.train(pairs, json.dumps({"peak_lr": 3e-3, "warmup_steps": 20, "max_epochs": 6, "max_tokens_per_batch": 96}))
    assert losses[-1] < losses[0], losses
    out = model.beam([4, 5], beam_size=3, max_len=5)
    assert out[-1] == 3 or len(out) == 5, out
    assert model.beam([4, 5], beam_size=1, max_len=5) == model.greedy([4, 5], max_len=5)

    with tempfile.TemporaryDirectory() as d:
        a = os.path.join(d, "a.bin")
        model.save_checkpoint(a, 10, 1)
        avg = os.path.join(d, "avg.bin")
        pt.average_checkpoints([a, a], avg)
        again = pt.Model.from_checkpoint(avg)
        assert again.parameter_names() == model.parameter_names()

    bpe = pt.Bpe.learn(["low low low lowest lowest"], 5)
    pieces = bpe.apply("lowish")
    assert pieces == ["low@@", "i@@", "s@@", "h"], pieces
    assert pt.undo_bpe(pieces) == "lowish"

    vocab = pt.Vocab.build(["b a", "c b"])
    assert vocab.symbol(4) == "b" and vocab.encode("zzz") == [1]

    assert pt.tokenize_13a("Hello, world!") == ["Hello", ",", "world", "!"]
    assert pt.tokenize_zh("你好，世界") == ["你", "好", "，", "世", "界"]
    r = pt.corpus_bleu(["a b c d"], ["a b c d e"])
    assert abs(r["score"] - 77.88) < 0.01, r
    r = pt.corpus_bleu(["x"], ["x"], tok="zh", lang="vi-zh", version="1.5.1")
    assert r["signature"] == "BLEU+case.mixed +lang.vi-zh +numrefs.1 +smooth.exp +tok.zh +version.1.5.1"
    assert math.isclose(pt.lr_at_step(3000), 3.5e-4)
    print("pyphrasetrans smoke test passed")


if __name__ == "__main__":
    main()
