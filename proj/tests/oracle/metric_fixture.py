#!/usr/bin/env python3
"""Reference scores for the 20-pair metric fixture in tests/test_metrics.cpp.

BLEU comes from nltk and ROUGE from rouge-score; EM, METEOR and CIDEr are
written out longhand here. Run with `python3 metric_fixture.py` and paste the
printed table into the test.
"""
import math
import string
from collections import Counter

from nltk.translate.bleu_score import sentence_bleu
from rouge_score import rouge_scorer

PAIRS = [
    ("the the the the the the the", "the cat is on the mat"),
    ("the cat sat", "the sat down"),
    ("the cat sat on the mat", "on the mat sat the cat"),
    ("a red circle", "a red circle"),
    ("The Red Circle", "red circle"),
    ("two", "there are two circles"),
    ("", "a blue square"),
    ("a blue square", "a green triangle"),
    ("there is a red circle at row one column two", "there is a red circle at row one column three"),
    ("a green square and a red circle", "a red circle and a green square"),
    ("yes", "yes"),
    ("row two column one", "the red square is at row two column one"),
    ("the blue triangle is at row three column four", "the blue triangle is at row four column three"),
    ("three circles", "there are three circles"),
    ("a yellow circle and a yellow circle", "a yellow circle"),
    ("circle square triangle", "triangle square circle"),
    ("the scene has a red square at row one column one and a blue circle at row two column two",
     "the scene has a red square at row one column one and a blue circle at row four column two"),
    ("blue blue blue", "blue green blue"),
    ("an object", "the object"),
    ("green", "the circle is green"),
]

ROUGE = rouge_scorer.RougeScorer(["rouge1", "rougeL"], use_stemmer=False)


def em(hyp, ref):
    def norm(t):
        out = []
        for w in t.lower().split():
            if w in ("a", "an", "the"):
                continue
            w = "".join(c for c in w if c not in string.punctuation)
            if w:
                out.append(w)
        return " ".join(out)
    return 1 if norm(hyp) == norm(ref) else 0


def bleu(hyp, ref, n):
    h = hyp.lower().split()
    if not h:
        return 0.0
    weights = (1.0,) if n == 1 else (0.5, 0.5)
    score = sentence_bleu([ref.lower().split()], h, weights=weights)
    # nltk reports a zero n-gram precision as ~1e-154 rather than 0.
    return 0.0 if score < 1e-100 else score


def meteor(hyp, ref):
    h, r = hyp.lower().split(), ref.lower().split()
    if not h or not r:
        return 0.0
    taken = set()
    links = []
    last = None
    for w in h:
        choice = None
        if last is not None and last + 1 < len(r) and last + 1 not in taken and r[last + 1] == w:
            choice = last + 1
        else:
            choice = next((j for j, x in enumerate(r) if x == w and j not in taken), None)
        links.append(choice)
        if choice is not None:
            taken.add(choice)
        last = choice
    m = sum(1 for x in links if x is not None)
    if m == 0:
        return 0.0
    chunks = 0
    for i, x in enumerate(links):
        if x is None:
            continue
        if i == 0 or links[i - 1] is None or links[i - 1] + 1 != x:
            chunks += 1
    p, rc = m / len(h), m / len(r)
    f = 10 * p * rc / (rc + 9 * p)
    return f * (1 - 0.5 * (chunks / m) ** 3)


def grams(tokens, n):
    return Counter(" ".join(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def cider(hyp, ref, refs):
    df = Counter()
    for doc in refs:
        seen = set()
        for n in range(1, 5):
            seen |= set(grams(doc.lower().split(), n))
        df.update(seen)
    N = len(refs)

    def vec(tokens, n):
        g = grams(tokens, n)
        tot = sum(g.values())
        return {k: c / tot * math.log(N / max(1, df[k])) for k, c in g.items()}

    total = 0.0
    for n in range(1, 5):
        a, b = vec(hyp.lower().split(), n), vec(ref.lower().split(), n)
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na > 0 and nb > 0:
            total += sum(v * b.get(k, 0.0) for k, v in a.items()) / (na * nb)
    return 10 * total / 4


def main():
    refs = [r for _, r in PAIRS]
    for hyp, ref in PAIRS:
        rs = ROUGE.score(ref, hyp) if hyp.strip() else None
        r1 = rs["rouge1"].fmeasure if rs else 0.0
        rl = rs["rougeL"].fmeasure if rs else 0.0
        vals = [em(hyp, ref), bleu(hyp, ref, 1), bleu(hyp, ref, 2), r1, rl, meteor(hyp, ref), cider(hyp, ref, refs)]
        print("    {\"%s\", \"%s\", %d, %s}," % (hyp, ref, vals[0], ", ".join("%.15g" % v for v in vals[1:])))


if __name__ == "__main__":
    main()
