#!/usr/bin/env python3
"""Regenerate the frozen metric oracle sheet for the committed micro-corpus.

The expected values are produced by the brute-force oracles in tests/oracles.py,
never by the package implementation they later verify."""
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))

import oracles  # noqa: E402


def main():
    pairs = [(h.split(), r.split()) for h, r in oracles.MICRO_CORPUS]
    hyps = [p[0] for p in pairs]
    refs = [p[1] for p in pairs]
    sheet = {
        "pairs": oracles.MICRO_CORPUS,
        "bleu": {str(n): oracles.oracle_bleu(hyps, refs, n) for n in (1, 2, 3, 4)},
        "rouge_l": sum(oracles.oracle_rouge_l(h, r) for h, r in pairs) / len(pairs),
        "meteor": sum(oracles.oracle_meteor(h, r) for h, r in pairs) / len(pairs),
        "cider_d": sum(oracles.oracle_cider_d(h, r, refs) for h, r in pairs) / len(pairs),
        "per_sentence_cider_d": [oracles.oracle_cider_d(h, r, refs) for h, r in pairs],
    }
    out = os.path.join(os.path.dirname(__file__), "..", "tests", "data", "micro_corpus_expected.json")
    with open(out, "w", encoding="utf-8") as f:
        json.dump(sheet, f, indent=2)
    print(json.dumps(sheet, indent=2))


if __name__ == "__main__":
    main()
