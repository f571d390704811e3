"""Small separable corpora for smoke runs and tests.

Each review is one or two clauses of the form ``<aspect> <opinion word>``; the
polarity of an aspect is fixed by the opinion word in its own clause.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .corpus import POLARITIES, Corpus, Polarity, write_canonical

ASPECTS = ("قیمت", "کیفیت", "رنگ", "باتری", "صفحه", "دوربین")
OPINIONS = {
    Polarity.POSITIVE: ("عالیه", "خوبه"),
    Polarity.NEGATIVE: ("بده", "ضعیفه"),
    Polarity.NEUTRAL: ("معمولیه", "متوسطه"),
}
JOINER = "ولی"


def make_corpus(n_instances: int = 32, seed: int = 0, max_aspects: int = 2) -> Corpus:
    """Exactly ``n_instances`` aspect instances, polarities cycling through all three classes."""
    rng = np.random.default_rng(seed)
    records = []
    review = 0
    while len(records) < n_instances:
        review += 1
        k = min(int(rng.integers(1, max_aspects + 1)), n_instances - len(records))
        aspects = rng.choice(len(ASPECTS), size=k, replace=False)
        clauses, labels = [], []
        for a in aspects:
            polarity = POLARITIES[len(records) % len(POLARITIES)]
            word = OPINIONS[polarity][int(rng.integers(len(OPINIONS[polarity])))]
            clauses.append(f"{ASPECTS[a]} {word}")
            labels.append((ASPECTS[a], polarity))
            records.append(None)
        text = f" {JOINER} ".join(clauses)
        for aspect, polarity in labels:
            records[records.index(None)] = (f"s{review}", text, aspect, polarity)
    return Corpus.from_records(records, source_name="synthetic")


def main(argv: list[str] | None = None) -> None:
    ap = argparse.ArgumentParser(description="Write a synthetic canonical-JSONL corpus.")
    ap.add_argument("path", type=Path)
    ap.add_argument("-n", "--instances", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    write_canonical(make_corpus(args.instances, args.seed), args.path)


if __name__ == "__main__":
    main()
