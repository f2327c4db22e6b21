"""Multi-label evaluation: exact match, micro and per-class rates, complexity-adjusted accuracy.

Rates whose denominator is zero are reported as ``None`` (``null`` in JSON),
never silently as 0 or 1.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .core import CATEGORIES, LabelSet, PhishIntentError, ThreatCategory, parse_category
from .dataset import DatasetManifest
from .pipeline import read_results

# Minimum number of matched labels for a sample with k true labels to count as correct.
MATCH_THRESHOLDS = {1: 1, 2: 1, 3: 2}

METRIC_NAMES = ("precision", "recall", "f1", "accuracy")


class EmptyInput(PhishIntentError, ValueError):
    pass


class InvalidK(PhishIntentError, ValueError):
    pass


class MissingPredictions(PhishIntentError):
    def __init__(self, ids: list[str]):
        super().__init__("no prediction for sample id(s): " + ", ".join(ids))
        self.ids = ids


class UnknownSampleIds(PhishIntentError):
    def __init__(self, ids: list[str]):
        super().__init__("prediction id(s) absent from the truth manifest: " + ", ".join(ids))
        self.ids = ids


@dataclass(frozen=True)
class LabeledPair:
    sample_id: str
    truth: LabelSet
    prediction: LabelSet


@dataclass(frozen=True)
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass(frozen=True)
class ConfusionTotals:
    per_class: Mapping[ThreatCategory, ClassCounts]
    n_pairs: int

    def __getitem__(self, category: ThreatCategory) -> ClassCounts:
        return self.per_class[category]

    def to_dict(self) -> dict[str, dict[str, int]]:
        return {c.value: self.per_class[c].to_dict() for c in CATEGORIES}


def ratio(numerator: int, denominator: int) -> float | None:
    return numerator / denominator if denominator else None


def harmonic_f1(precision: float | None, recall: float | None) -> float | None:
    if precision is None or recall is None or precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


def confusion_totals(pairs: Iterable[LabeledPair]) -> ConfusionTotals:
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("confusion totals need at least one pair")
    counts = {c: [0, 0, 0, 0] for c in CATEGORIES}
    for pair in pairs:
        for c in CATEGORIES:
            in_truth, in_pred = c in pair.truth, c in pair.prediction
            slot = 0 if in_truth and in_pred else 1 if in_pred else 2 if in_truth else 3
            counts[c][slot] += 1
    return ConfusionTotals({c: ClassCounts(*v) for c, v in counts.items()}, len(pairs))


def rates(tp: int, fp: int, fn: int, tn: int) -> dict[str, float | None]:
    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    # 2TP/(2TP+FP+FN) equals the harmonic mean of P and R but avoids a rounding step
    f1 = None if harmonic_f1(precision, recall) is None else ratio(2 * tp, 2 * tp + fp + fn)
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "accuracy": ratio(tp + tn, tp + tn + fp + fn),
    }


def micro_metrics(totals: ConfusionTotals) -> dict[str, float | None]:
    """Pool counts over all four classes, then compute the rates."""
    tp = sum(k.tp for k in totals.per_class.values())
    fp = sum(k.fp for k in totals.per_class.values())
    fn = sum(k.fn for k in totals.per_class.values())
    tn = sum(k.tn for k in totals.per_class.values())
    return rates(tp, fp, fn, tn)


def per_class_metrics(totals: ConfusionTotals) -> dict[ThreatCategory, dict[str, float | None]]:
    return {c: rates(k.tp, k.fp, k.fn, k.tn) for c, k in totals.per_class.items()}


def match_count(truth: LabelSet, prediction: LabelSet) -> int:
    return len(truth & prediction)


def satisfies_threshold(pair: LabeledPair) -> bool:
    return match_count(pair.truth, pair.prediction) >= MATCH_THRESHOLDS[len(pair.truth)]


def acc_comp(pairs: Iterable[LabeledPair], k: int) -> float | None:
    if k not in MATCH_THRESHOLDS:
        raise InvalidK(f"k must be 1, 2 or 3, got {k!r}")
    stratum = [p for p in pairs if len(p.truth) == k]
    return ratio(sum(satisfies_threshold(p) for p in stratum), len(stratum))


def overall_accuracy_comp(pairs: Iterable[LabeledPair]) -> float:
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("overall accuracy needs at least one pair")
    return sum(satisfies_threshold(p) for p in pairs) / len(pairs)


def exact_match_accuracy(pairs: Iterable[LabeledPair]) -> float:
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("exact-match accuracy needs at least one pair")
    return sum(p.truth == p.prediction for p in pairs) / len(pairs)


@dataclass(frozen=True)
class MetricsReport:
    micro: dict[str, float | None]
    per_class: dict[ThreatCategory, dict[str, float | None]]
    exact_match_accuracy: float
    acc_comp: dict[int, float | None]
    overall_accuracy_comp: float
    counts: ConfusionTotals
    n_pairs: int
    missing_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_pairs": self.n_pairs,
            "exact_match_accuracy": self.exact_match_accuracy,
            "micro": dict(self.micro),
            "per_class": {c.value: dict(self.per_class[c]) for c in CATEGORIES},
            "acc_comp": {str(k): self.acc_comp[k] for k in sorted(self.acc_comp)},
            "overall_accuracy_comp": self.overall_accuracy_comp,
            "counts": self.counts.to_dict(),
            "missing_ids": list(self.missing_ids),
        }

    def per_class_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["category", "tp", "fp", "fn", "tn", *METRIC_NAMES])
        for c in CATEGORIES:
            k = self.counts[c]
            values = ["" if self.per_class[c][m] is None else repr(self.per_class[c][m]) for m in METRIC_NAMES]
            writer.writerow([c.value, k.tp, k.fp, k.fn, k.tn, *values])
        return buf.getvalue()


def compute_report(pairs: Iterable[LabeledPair], missing_ids: Iterable[str] = ()) -> MetricsReport:
    pairs = list(pairs)
    totals = confusion_totals(pairs)
    return MetricsReport(
        micro=micro_metrics(totals),
        per_class=per_class_metrics(totals),
        exact_match_accuracy=exact_match_accuracy(pairs),
        acc_comp={k: acc_comp(pairs, k) for k in MATCH_THRESHOLDS},
        overall_accuracy_comp=overall_accuracy_comp(pairs),
        counts=totals,
        n_pairs=len(pairs),
        missing_ids=tuple(missing_ids),
    )


def predictions_from_results(records: Iterable[Mapping[str, Any]]) -> dict[str, LabelSet | None]:
    """Map sample id to predicted labels; failed samples map to ``None``."""
    out: dict[str, LabelSet | None] = {}
    for record in records:
        sample_id = record["sample_id"]
        if sample_id in out:
            raise ValueError(f"duplicate prediction for sample {sample_id!r}")
        classes = record.get("classifications") or []
        if record.get("error") or not classes:
            out[sample_id] = None
        else:
            out[sample_id] = LabelSet(parse_category(c["category"]) for c in classes)
    return out


def join_pairs(truth: DatasetManifest, predictions: Mapping[str, LabelSet | None],
               allow_missing: bool = False) -> tuple[list[LabeledPair], list[str]]:
    by_id = truth.by_id()
    unknown = sorted(i for i in predictions if i not in by_id)
    if unknown:
        raise UnknownSampleIds(unknown)
    pairs, missing = [], []
    for sample in truth:
        if sample.true_labels is None:
            continue
        predicted = predictions.get(sample.id)
        if predicted is None:
            missing.append(sample.id)
            continue
        pairs.append(LabeledPair(sample.id, sample.true_labels, predicted))
    if missing and not allow_missing:
        raise MissingPredictions(missing)
    return pairs, missing


def evaluate(truth: DatasetManifest, predictions: Iterable[Mapping[str, Any]] | str | Path,
             allow_missing: bool = False) -> MetricsReport:
    """Join predictions to truth by sample id and compute every metric.

    ``predictions`` is a results JSONL path or an iterable of result records.
    Samples whose run failed count as missing predictions.
    """
    if isinstance(predictions, (str, Path)):
        predictions = read_results(predictions)
    pairs, missing = join_pairs(truth, predictions_from_results(predictions), allow_missing)
    return compute_report(pairs, missing)


def write_report(report: MetricsReport, path: str | Path, metadata: Mapping[str, Any] | None = None) -> None:
    data = {"metadata": dict(metadata or {}), **report.to_dict()}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
