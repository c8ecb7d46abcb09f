"""Regenerates the expected tokenizer and BLEU outputs with sacrebleu 1.5.1."""

import json
import sacrebleu
from sacrebleu.tokenizers.tokenizer_13a import Tokenizer13a
from sacrebleu.tokenizers.tokenizer_zh import TokenizerZh

assert sacrebleu.__version__ == "1.5.1"

for name, tok in [("tok_13a", Tokenizer13a()), ("tok_zh", TokenizerZh())]:
    with open(f"{name}.in", encoding="utf-8") as f, open(f"{name}.expected", "w", encoding="utf-8") as out:
        for line in f:
            out.write(tok(line.rstrip("\n")) + "\n")


def read(path):
    with open(path, encoding="utf-8") as f:
        return [l.rstrip("\n") for l in f]


cases = {}
for name, tok in [("bleu_13a", "13a"), ("bleu_zh", "zh")]:
    hyps, refs = read(f"{name}.hyp"), read(f"{name}.ref")
    b = sacrebleu.corpus_bleu(hyps, [refs], tokenize=tok, smooth_method="exp")
    cases[name] = {
        "tok": tok,
        "score": b.score,
        "precisions": b.precisions,
        "bp": b.bp,
        "hyp_len": b.sys_len,
        "ref_len": b.ref_len,
    }
with open("bleu_expected.json", "w") as f:
    json.dump(cases, f, indent=2)
    f.write("\n")
