"""Aspect-level metrics, model evaluation and comparison-table rendering."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Sequence

import numpy as np

from .auxpair import AuxMode, PairDataset, TemplateSet, decode_dataset, expand_corpus
from .corpus import POLARITIES, Corpus, Polarity
from .encoder import ModelParams, predict_proba
from .tokenizer import Vocab, encode_dataset


@dataclass(frozen=True)
class PredictionSet:
    gold: tuple[Polarity, ...]
    predicted: tuple[Polarity, ...]
    mode: AuxMode | None = None
    model_name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "gold", tuple(Polarity(g) for g in self.gold))
        object.__setattr__(self, "predicted", tuple(Polarity(p) for p in self.predicted))
        if len(self.gold) != len(self.predicted):
            raise ValueError(f"{len(self.gold)} gold labels but {len(self.predicted)} predictions")

    def __len__(self) -> int:
        return len(self.gold)


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int = 0


def confusion_matrix(preds: PredictionSet) -> np.ndarray:
    """3x3 counts; rows are gold polarities, columns predictions, both in canonical order."""
    cm = np.zeros((len(POLARITIES), len(POLARITIES)), dtype=np.int64)
    for g, p in zip(preds.gold, preds.predicted):
        cm[g.index, p.index] += 1
    return cm


def _require_nonempty(preds: PredictionSet) -> None:
    if len(preds) == 0:
        raise ValueError("prediction set is empty")


def accuracy(preds: PredictionSet) -> float:
    _require_nonempty(preds)
    cm = confusion_matrix(preds)
    return float(np.trace(cm) / cm.sum())


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def class_f1(preds: PredictionSet, c: Polarity) -> ClassScores:
    """Precision, recall and F1 for one polarity; every 0/0 is taken as 0."""
    _require_nonempty(preds)
    cm = confusion_matrix(preds)
    i = Polarity(c).index
    tp = int(cm[i, i])
    predicted = int(cm[:, i].sum())
    support = int(cm[i, :].sum())
    precision = _ratio(tp, predicted)
    recall = _ratio(tp, support)
    f1 = _ratio(2 * tp, predicted + support)
    return ClassScores(precision, recall, f1, support)


def macro_f1(preds: PredictionSet) -> float:
    return sum(class_f1(preds, c).f1 for c in POLARITIES) / len(POLARITIES)


def weighted_f1(preds: PredictionSet) -> float:
    scores = [class_f1(preds, c) for c in POLARITIES]
    return sum(s.f1 * s.support for s in scores) / len(preds)


@dataclass(frozen=True)
class EvalReport:
    label: str
    accuracy: float
    macro_f1: float
    weighted_f1: float
    per_class: dict[str, ClassScores]
    confusion: np.ndarray = field(compare=False)
    total: int = 0

    @classmethod
    def from_predictions(cls, preds: PredictionSet, label: str) -> "EvalReport":
        return cls(
            label=label,
            accuracy=accuracy(preds),
            macro_f1=macro_f1(preds),
            weighted_f1=weighted_f1(preds),
            per_class={c.value: class_f1(preds, c) for c in POLARITIES},
            confusion=confusion_matrix(preds),
            total=len(preds),
        )

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "total": self.total,
            "per_class": {
                k: {"precision": v.precision, "recall": v.recall, "f1": v.f1, "support": v.support}
                for k, v in self.per_class.items()
            },
            "confusion": self.confusion.tolist(),
            "labels": [p.value for p in POLARITIES],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def report_label(model_name: str, mode: AuxMode | str) -> str:
    return f"{model_name}-{AuxMode.parse(mode).value}"


def predict_corpus(
    params: ModelParams,
    corpus: Corpus,
    mode: AuxMode | str,
    templates: TemplateSet,
    vocab: Vocab,
    max_len: int,
) -> tuple[list[Polarity], PairDataset, np.ndarray]:
    """Expand, encode, run eval-mode forward and decode one polarity per instance.

    Returns (decoded polarities, expanded dataset, per-example class probabilities).
    """
    mode = AuxMode.parse(mode)
    if params.config.num_classes != mode.num_classes:
        raise ValueError(
            f"{mode} needs a {mode.num_classes}-class head, checkpoint has {params.config.num_classes}"
        )
    dataset = expand_corpus(corpus, mode, templates)
    if len(dataset) == 0:
        return [], dataset, np.zeros((0, mode.num_classes))
    probs = predict_proba(params, encode_dataset(dataset, vocab, max_len))
    return decode_dataset(dataset, probs), dataset, probs


def evaluate_model(
    params: ModelParams,
    test: Corpus,
    mode: AuxMode | str,
    templates: TemplateSet,
    vocab: Vocab,
    max_len: int,
    model_name: str = "Tiny-BERT",
) -> EvalReport:
    mode = AuxMode.parse(mode)
    predicted, _, _ = predict_corpus(params, test, mode, templates, vocab, max_len)
    preds = PredictionSet(tuple(i.polarity for i in test), tuple(predicted), mode, model_name)
    return EvalReport.from_predictions(preds, report_label(model_name, mode))


# -- rendering -------------------------------------------------------------------


@dataclass(frozen=True)
class PublishedRow:
    """A table row given as already-formatted percentages, e.g. ("TD-LSTM", "85.54", "84.4")."""

    model: str
    accuracy: str
    f1: str | None = None


def format_percent(value: float | str | Decimal | None) -> str:
    """Ratios render as percentages with one decimal; decimal strings keep extra digits."""
    if value is None or value == "":
        return ""
    if isinstance(value, (str, Decimal)):
        d = Decimal(str(value))
        places = max(1, -d.as_tuple().exponent)
        return f"{d:.{places}f}"
    return f"{100.0 * value:.1f}"


def _row(item: EvalReport | PublishedRow) -> tuple[str, Decimal, str, str]:
    if isinstance(item, EvalReport):
        acc, f1 = format_percent(item.accuracy), format_percent(item.macro_f1)
        return item.label, Decimal(acc), acc, f1
    acc = format_percent(item.accuracy)
    return item.model, Decimal(acc), acc, format_percent(item.f1)


def render_report(reports: Sequence[EvalReport | PublishedRow], format: str = "markdown") -> str:
    """Model / Accuracy / F1 table, highest accuracy first (ties keep input order)."""
    if not reports:
        raise ValueError("need at least one report")
    rows = sorted((_row(r) for r in reports), key=lambda r: -r[1])
    if format == "markdown":
        lines = ["| Model | Accuracy | F1 |", "|:--|--:|--:|"]
        lines += [f"| {name} | {acc} | {f1} |" for name, _, acc, f1 in rows]
        return "\n".join(lines) + "\n"
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["Model", "Accuracy", "F1"])
        writer.writerows((name, acc, f1) for name, _, acc, f1 in rows)
        return buf.getvalue()
    raise ValueError(f"unknown report format {format!r}; expected 'markdown' or 'csv'")


def render_details(report: EvalReport) -> str:
    """Per-class precision/recall/F1, macro and weighted F1, and the confusion matrix."""
    lines = [f"{report.label}  (n={report.total})"]
    lines.append(f"{'class':<10}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}")
    for name, s in report.per_class.items():
        lines.append(f"{name:<10}{s.precision:>10.4f}{s.recall:>10.4f}{s.f1:>10.4f}{s.support:>9d}")
    lines.append(f"accuracy {report.accuracy:.4f}  macro-F1 {report.macro_f1:.4f}  weighted-F1 {report.weighted_f1:.4f}")
    lines.append("confusion (rows gold, cols predicted; positive, negative, neutral):")
    lines += ["  " + " ".join(f"{v:>6d}" for v in row) for row in report.confusion]
    return "\n".join(lines) + "\n"
