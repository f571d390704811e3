"""Aspect-level sentiment corpora: data model, readers, writer, split and stats."""

from __future__ import annotations

import enum
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

CANONICAL = "canonical-jsonl"
PARS_ABSA = "pars-absa-adapter"
FORMATS = (CANONICAL, PARS_ABSA)


class CorpusError(ValueError):
    """A corpus record failed validation; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = f"line {line}: " if line is not None else ""
        what = f"field '{field}': " if field else ""
        super().__init__(f"{where}{what}{message}")


class Polarity(str, enum.Enum):
    """Aspect polarity. Definition order is the canonical ordinal (and tie-break) order."""

    POSITIVE = "positive"
    NEGATIVE = "negative"
    NEUTRAL = "neutral"

    @property
    def index(self) -> int:
        return _POLARITY_INDEX[self]

    @classmethod
    def from_index(cls, i: int) -> "Polarity":
        return POLARITIES[i]

    @classmethod
    def parse(cls, value: str) -> "Polarity":
        try:
            return cls(value.strip().lower())
        except (ValueError, AttributeError):
            raise ValueError(f"unknown polarity {value!r}") from None

    def __str__(self) -> str:
        return self.value


POLARITIES: tuple[Polarity, ...] = tuple(Polarity)
_POLARITY_INDEX = {p: i for i, p in enumerate(POLARITIES)}


@dataclass(frozen=True)
class AspectInstance:
    review_id: str
    text: str
    aspect: str
    polarity: Polarity
    # position among records sharing (review_id, aspect); assigned by Corpus.from_records
    occurrence: int = 0

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise CorpusError("review text is empty", field="text")
        if not self.aspect or not self.aspect.strip():
            raise CorpusError("aspect is empty", field="aspect")
        if not isinstance(self.polarity, Polarity):
            object.__setattr__(self, "polarity", Polarity.parse(self.polarity))

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.review_id, self.aspect, self.occurrence)

    def to_record(self) -> dict[str, str]:
        return {
            "review_id": self.review_id,
            "text": self.text,
            "aspect": self.aspect,
            "polarity": self.polarity.value,
        }


@dataclass(frozen=True)
class Corpus:
    instances: tuple[AspectInstance, ...] = ()
    source_name: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances", tuple(self.instances))
        seen = set()
        for inst in self.instances:
            if inst.key in seen:
                raise CorpusError(f"duplicate instance key {inst.key}")
            seen.add(inst.key)

    @classmethod
    def from_records(
        cls, records: Iterable[tuple[str, str, str, Polarity | str]], source_name: str = ""
    ) -> "Corpus":
        """Build a corpus from (review_id, text, aspect, polarity) tuples, numbering duplicates."""
        counts: Counter[tuple[str, str]] = Counter()
        instances = []
        for review_id, text, aspect, polarity in records:
            occ = counts[(review_id, aspect)]
            counts[(review_id, aspect)] += 1
            instances.append(AspectInstance(review_id, text, aspect, polarity, occ))
        return cls(tuple(instances), source_name)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self) -> Iterator[AspectInstance]:
        return iter(self.instances)

    def __getitem__(self, i: int) -> AspectInstance:
        return self.instances[i]

    def subset(self, indices: Iterable[int], source_name: str | None = None) -> "Corpus":
        return Corpus(
            tuple(self.instances[i] for i in indices),
            self.source_name if source_name is None else source_name,
        )

    @property
    def review_ids(self) -> set[str]:
        return {inst.review_id for inst in self.instances}


@dataclass(frozen=True)
class ClassCounts:
    positive: int = 0
    negative: int = 0
    neutral: int = 0
    total_instances: int = 0
    distinct_reviews: int = 0

    def __post_init__(self) -> None:
        if self.positive + self.negative + self.neutral != self.total_instances:
            raise ValueError("per-class counts must sum to total_instances")

    def __getitem__(self, polarity: Polarity) -> int:
        return getattr(self, polarity.name.lower())

    def as_dict(self) -> dict[str, int]:
        return {
            "positive": self.positive,
            "negative": self.negative,
            "neutral": self.neutral,
            "total": self.total_instances,
            "reviews": self.distinct_reviews,
        }


def corpus_stats(corpus: Corpus) -> ClassCounts:
    counts = Counter(inst.polarity for inst in corpus)
    return ClassCounts(
        positive=counts[Polarity.POSITIVE],
        negative=counts[Polarity.NEGATIVE],
        neutral=counts[Polarity.NEUTRAL],
        total_instances=len(corpus),
        distinct_reviews=len(corpus.review_ids),
    )


# -- reading -----------------------------------------------------------------


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = raw[: exc.start].count(b"\n") + 1
        raise CorpusError("content is not valid UTF-8", line=line) from None
    if text.startswith("\ufeff"):
        text = text[1:]
    return text.split("\n")


def _canonical_records(lines: Sequence[str]) -> Iterator[tuple[str, str, str, Polarity]]:
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"malformed JSON ({exc.msg})", line=lineno) from None
        if not isinstance(obj, dict):
            raise CorpusError("record is not a JSON object", line=lineno)
        values = {}
        for name in ("review_id", "text", "aspect", "polarity"):
            value = obj.get(name)
            if name == "review_id" and isinstance(value, int) and not isinstance(value, bool):
                value = str(value)
            if not isinstance(value, str) or not value.strip():
                raise CorpusError("missing or empty string", line=lineno, field=name)
            values[name] = value
        try:
            polarity = Polarity.parse(values["polarity"])
        except ValueError as exc:
            raise CorpusError(str(exc), line=lineno, field="polarity") from None
        yield values["review_id"], values["text"], values["aspect"], polarity


# Upstream label coding of the three-line-per-aspect layout.
_ADAPTER_LABELS = {"1": Polarity.POSITIVE, "-1": Polarity.NEGATIVE, "0": Polarity.NEUTRAL}
ASPECT_SLOT = "$T$"


def adapter_record(text_line: str, aspect_line: str, label_line: str) -> tuple[str, str, Polarity]:
    """Map one upstream Pars-ABSA block to (review text, aspect, polarity).

    Upstream stores each aspect as three lines: the review with the aspect
    occurrence replaced by ``$T$``, the aspect term, and a label in
    {1, 0, -1}. Any change in upstream layout should only touch this function.
    """
    aspect = aspect_line.strip()
    text = text_line.strip().replace(ASPECT_SLOT, aspect, 1)
    label = label_line.strip()
    if label not in _ADAPTER_LABELS:
        try:
            return text, aspect, Polarity.parse(label)
        except ValueError:
            raise ValueError(f"unknown polarity {label!r}") from None
    return text, aspect, _ADAPTER_LABELS[label]


def _adapter_records(lines: Sequence[str]) -> Iterator[tuple[str, str, str, Polarity]]:
    rows = [(i, line) for i, line in enumerate(lines, start=1) if line.strip()]
    if len(rows) % 3:
        raise CorpusError(
            f"truncated record: {len(rows) % 3} trailing line(s) do not form a text/aspect/label block",
            line=rows[-1][0],
        )
    review_ids: dict[str, str] = {}
    for k in range(0, len(rows), 3):
        (l_text, text_line), (l_aspect, aspect_line), (l_label, label_line) = rows[k : k + 3]
        if not aspect_line.strip():
            raise CorpusError("missing aspect", line=l_aspect, field="aspect")
        try:
            text, aspect, polarity = adapter_record(text_line, aspect_line, label_line)
        except ValueError as exc:
            raise CorpusError(str(exc), line=l_label, field="polarity") from None
        if not text:
            raise CorpusError("missing review text", line=l_text, field="text")
        # identical review texts are the same review
        rid = review_ids.setdefault(text, f"r{len(review_ids) + 1}")
        yield rid, text, aspect, polarity


def load_corpus(path: str | Path, format: str = CANONICAL) -> Corpus:
    """Read a corpus file; every record becomes one AspectInstance, in file order."""
    path = Path(path)
    if format not in FORMATS:
        raise ValueError(f"unknown corpus format {format!r}; expected one of {FORMATS}")
    lines = _read_lines(path)
    reader = _canonical_records if format == CANONICAL else _adapter_records
    return Corpus.from_records(reader(lines), source_name=path.name)


def write_canonical(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for inst in corpus:
            fh.write(json.dumps(inst.to_record(), ensure_ascii=False) + "\n")


# -- splitting ---------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(corpus: Corpus, test_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Per-polarity random split; each class sends round(n * test_fraction) instances to test.

    Classes absent from the corpus are skipped. Both halves keep corpus order.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if len(corpus) == 0:
        raise ValueError("cannot split an empty corpus: every class is empty")
    by_class: dict[Polarity, list[int]] = {p: [] for p in POLARITIES}
    for i, inst in enumerate(corpus):
        by_class[inst.polarity].append(i)
    test_idx: list[int] = []
    for polarity in POLARITIES:
        members = by_class[polarity]
        if not members:
            continue
        rng = np.random.default_rng([seed, polarity.index])
        order = rng.permutation(len(members))
        k = _round_half_up(len(members) * test_fraction)
        test_idx.extend(members[j] for j in order[:k])
    chosen = set(test_idx)
    train = corpus.subset((i for i in range(len(corpus)) if i not in chosen))
    test = corpus.subset(sorted(chosen))
    return train, test
