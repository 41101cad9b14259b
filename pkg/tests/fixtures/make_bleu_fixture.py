"""Regenerate bleu_fixture.json: 50 noisy candidate/reference pairs scored by nltk and sacrebleu.

Run manually (needs ``pip install nltk sacrebleu``); the test suite only reads
the JSON. Candidates are kept at >= 4 characters because nltk floors each
sentence's n-gram denominator at 1, which disagrees with standard corpus BLEU
on candidates shorter than the n-gram order.
"""

import json
import random
import string
from pathlib import Path

from nltk.translate.bleu_score import corpus_bleu
from sacrebleu.metrics import BLEU


def noisy(ref: str, rnd: random.Random) -> str:
    out = list(ref)
    for _ in range(rnd.randint(0, 2)):
        op = rnd.choice("sub ins del".split())
        k = rnd.randrange(len(out) + (op == "ins"))
        if op == "sub" and out:
            out[k % len(out)] = rnd.choice(string.ascii_lowercase)
        elif op == "ins":
            out.insert(k, rnd.choice(string.ascii_lowercase))
        elif len(out) > 4:
            del out[k % len(out)]
    return "".join(out)


def main() -> None:
    rnd = random.Random(20240611)
    refs = ["".join(rnd.choice(string.ascii_lowercase[:8]) for _ in range(rnd.randint(4, 12))) for _ in range(50)]
    cands = [noisy(r, rnd) for r in refs]
    order = min(4, min(len(r) for r in refs))
    weights = tuple([1.0 / order] * order)
    score = 100 * corpus_bleu([[list(r)] for r in refs], [list(c) for c in cands], weights=weights)
    sacre = BLEU(tokenize="char", smooth_method="none").corpus_score(cands, [refs]).score
    # nltk reports float-min instead of 0 for a zero 4-gram precision; sacrebleu gives exactly 0
    small = BLEU(tokenize="char", smooth_method="none").corpus_score(["abcd"], [["abce"]]).score
    payload = {
        "scorers": {"nltk": "corpus_bleu, uniform weights, no smoothing",
                    "sacrebleu": "BLEU(tokenize='char', smooth_method='none')"},
        "pairs": [[c, r] for c, r in zip(cands, refs)],
        "bleu": {"nltk": score, "sacrebleu": sacre},
        "abcd_vs_abce": small,
    }
    Path(__file__).with_name("bleu_fixture.json").write_text(json.dumps(payload, indent=1) + "\n")
    print(score, sacre, small)


if __name__ == "__main__":
    main()
