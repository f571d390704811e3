"""Auxiliary-sentence construction and output decoding.

A (review, aspect) instance becomes one sentence pair per instance in the
multi-class modes (QA-M, NLI-M), or three yes/no pairs, one per candidate
polarity, in the binary modes (QA-B, NLI-B).
"""

from __future__ import annotations

import enum
import json
import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import POLARITIES, AspectInstance, Corpus, Polarity

YES, NO = "yes", "no"
# index in a 2-class head; the yes-probability is column 1
BINARY_LABELS = (NO, YES)


class AuxMode(str, enum.Enum):
    QA_M = "QA-M"
    NLI_M = "NLI-M"
    QA_B = "QA-B"
    NLI_B = "NLI-B"

    @property
    def is_binary(self) -> bool:
        return self in (AuxMode.QA_B, AuxMode.NLI_B)

    @property
    def num_classes(self) -> int:
        return 2 if self.is_binary else 3

    @property
    def group_size(self) -> int:
        return len(POLARITIES) if self.is_binary else 1

    @classmethod
    def parse(cls, value: "str | AuxMode") -> "AuxMode":
        if isinstance(value, AuxMode):
            return value
        try:
            return cls(value.strip().upper())
        except ValueError:
            raise ValueError(
                f"unknown auxiliary mode {value!r}; expected one of qa-m, nli-m, qa-b, nli-b"
            ) from None

    def __str__(self) -> str:
        return self.value


def _placeholder_counts(template: str) -> dict[str, int]:
    counts: dict[str, int] = {}
    for _, name, _, _ in string.Formatter().parse(template):
        if name is not None:
            counts[name] = counts.get(name, 0) + 1
    return counts


@dataclass(frozen=True)
class TemplateSet:
    qa_m_template: str = "What do you think of the {aspect}"
    qa_b_template: str = "The polarity of aspect {aspect} is {polarity}"
    nli_b_separator: str = "-"
    language_tag: str = "en"
    polarity_words: Mapping[str, str] = field(
        default_factory=lambda: {p.value: p.value for p in POLARITIES}
    )

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        required = {
            "qa_m_template": {"aspect"},
            "qa_b_template": {"aspect", "polarity"},
        }
        for name, needed in required.items():
            template = getattr(self, name)
            try:
                counts = _placeholder_counts(template)
            except ValueError as exc:
                raise ValueError(f"{name}: unparsable template {template!r} ({exc})") from None
            if set(counts) != needed or any(c != 1 for c in counts.values()):
                want = ", ".join("{" + n + "}" for n in sorted(needed))
                raise ValueError(f"{name} must contain {want} exactly once each, got {template!r}")
        missing = [p.value for p in POLARITIES if p.value not in self.polarity_words]
        if missing:
            raise ValueError(f"polarity_words lacks entries for {missing}")

    def word(self, polarity: Polarity) -> str:
        return self.polarity_words[polarity.value]

    @classmethod
    def for_language(cls, tag: str) -> "TemplateSet":
        try:
            return DEFAULT_TEMPLATES[tag]
        except KeyError:
            raise ValueError(
                f"no default templates for language {tag!r}; known: {sorted(DEFAULT_TEMPLATES)}"
            ) from None

    def to_dict(self) -> dict:
        return {
            "qa_m_template": self.qa_m_template,
            "qa_b_template": self.qa_b_template,
            "nli_b_separator": self.nli_b_separator,
            "language_tag": self.language_tag,
            "polarity_words": dict(self.polarity_words),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TemplateSet":
        """Start from the defaults of ``language_tag`` and override any given field."""
        base = cls.for_language(data.get("language_tag", "en"))
        overrides = {k: v for k, v in data.items() if k != "language_tag"}
        if "polarity_words" in overrides:
            overrides["polarity_words"] = {**base.polarity_words, **overrides["polarity_words"]}
        unknown = set(overrides) - set(base.to_dict())
        if unknown:
            raise ValueError(f"unknown template keys: {sorted(unknown)}")
        return replace(base, **overrides)


# English strings are the ones printed for the method; the Persian set is our own wording
# ("what is your opinion about X", "the polarity of aspect X is Y"). Swap via config.
DEFAULT_TEMPLATES: dict[str, TemplateSet] = {
    "en": TemplateSet(),
    "fa": TemplateSet(
        qa_m_template="نظر شما در مورد {aspect} چیست",
        qa_b_template="قطبیت جنبه {aspect} {polarity} است",
        nli_b_separator="-",
        language_tag="fa",
        polarity_words={"positive": "مثبت", "negative": "منفی", "neutral": "خنثی"},
    ),
}


def build_auxiliary(
    aspect: str,
    mode: AuxMode | str,
    templates: TemplateSet | None = None,
    candidate: Polarity | None = None,
) -> str:
    """Return the second sentence of the pair for ``aspect``."""
    mode = AuxMode.parse(mode)
    templates = templates or DEFAULT_TEMPLATES["en"]
    if mode.is_binary and candidate is None:
        raise ValueError(f"{mode} needs a candidate polarity")
    if not mode.is_binary and candidate is not None:
        raise ValueError(f"{mode} takes no candidate polarity")
    if mode is AuxMode.NLI_M:
        return aspect
    if mode is AuxMode.QA_M:
        return templates.qa_m_template.format(aspect=aspect)
    word = templates.word(Polarity(candidate))
    if mode is AuxMode.QA_B:
        return templates.qa_b_template.format(aspect=aspect, polarity=word)
    return f"{aspect}{templates.nli_b_separator}{word}"


@dataclass(frozen=True)
class PairExample:
    source: AspectInstance
    instance_index: int
    sentence_a: str
    sentence_b: str
    label: str
    candidate: Polarity | None = None

    @property
    def label_index(self) -> int:
        """Class index for the classifier head."""
        if self.candidate is None:
            return Polarity(self.label).index
        return BINARY_LABELS.index(self.label)

    def to_record(self) -> dict:
        return {
            "instance_index": self.instance_index,
            "review_id": self.source.review_id,
            "aspect": self.source.aspect,
            "occurrence": self.source.occurrence,
            "gold": self.source.polarity.value,
            "candidate": None if self.candidate is None else self.candidate.value,
            "sentence_a": self.sentence_a,
            "sentence_b": self.sentence_b,
            "label": self.label,
        }


@dataclass(frozen=True)
class PairDataset:
    mode: AuxMode
    examples: tuple[PairExample, ...]
    # example indices belonging to each source instance, in corpus order
    groups: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label_index for ex in self.examples], dtype=np.int64)

    def write_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            for ex in self.examples:
                fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


def expand_instance(
    inst: AspectInstance, index: int, mode: AuxMode, templates: TemplateSet
) -> list[PairExample]:
    if not mode.is_binary:
        aux = build_auxiliary(inst.aspect, mode, templates)
        return [PairExample(inst, index, inst.text, aux, inst.polarity.value)]
    return [
        PairExample(
            inst,
            index,
            inst.text,
            build_auxiliary(inst.aspect, mode, templates, candidate),
            YES if candidate is inst.polarity else NO,
            candidate,
        )
        for candidate in POLARITIES
    ]


def expand_corpus(
    corpus: Corpus, mode: AuxMode | str, templates: TemplateSet | None = None
) -> PairDataset:
    mode = AuxMode.parse(mode)
    templates = templates or DEFAULT_TEMPLATES["en"]
    examples: list[PairExample] = []
    groups: list[tuple[int, ...]] = []
    for i, inst in enumerate(corpus):
        start = len(examples)
        examples.extend(expand_instance(inst, i, mode, templates))
        groups.append(tuple(range(start, len(examples))))
    return PairDataset(mode, tuple(examples), tuple(groups))


# -- decoding ----------------------------------------------------------------


def decode_m(class_probabilities: Sequence[float], atol: float = 1e-6) -> Polarity:
    """Most probable polarity; exact ties go to the earlier polarity in canonical order."""
    p = np.asarray(class_probabilities, dtype=np.float64)
    if p.shape != (len(POLARITIES),):
        raise ValueError(f"expected {len(POLARITIES)} class probabilities, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"probabilities must be finite and nonnegative: {p.tolist()}")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    return POLARITIES[int(np.argmax(p))]


def decode_b(yes_probabilities: Mapping[Polarity, float] | Sequence[float]) -> Polarity:
    """Candidate polarity with the highest yes-probability (canonical order breaks ties).

    The three scores come from independent binary sequences and need not sum to 1.
    """
    if isinstance(yes_probabilities, Mapping):
        scores = [yes_probabilities[Polarity(p)] for p in POLARITIES]
    else:
        scores = list(yes_probabilities)
    p = np.asarray(scores, dtype=np.float64)
    if p.shape != (len(POLARITIES),):
        raise ValueError(f"expected {len(POLARITIES)} yes-probabilities, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError(f"yes-probabilities must lie in [0, 1]: {p.tolist()}")
    return POLARITIES[int(np.argmax(p))]


def decode_dataset(dataset: PairDataset, probabilities: np.ndarray) -> list[Polarity]:
    """Turn per-example class probabilities into one polarity per source instance."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if probabilities.shape != (len(dataset), dataset.mode.num_classes):
        raise ValueError(
            f"probabilities of shape {probabilities.shape} do not match "
            f"{len(dataset)} {dataset.mode} examples"
        )
    if not dataset.mode.is_binary:
        return [decode_m(probabilities[g[0]]) for g in dataset.groups]
    yes = BINARY_LABELS.index(YES)
    out = []
    for g in dataset.groups:
        scores = {dataset.examples[k].candidate: probabilities[k, yes] for k in g}
        out.append(decode_b(scores))
    return out
