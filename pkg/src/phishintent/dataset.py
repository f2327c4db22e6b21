"""Sample manifests (JSONL) and label-distribution summaries."""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from .core import (
    CATEGORIES,
    MAX_LABELS,
    LabelSet,
    PhishIntentError,
    Sample,
    ThreatCategory,
    dumps,
)

log = logging.getLogger(__name__)


class ParseError(PhishIntentError, ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateSampleId(PhishIntentError, ValueError):
    def __init__(self, sample_id: str, line_no: int | None = None):
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"duplicate sample id {sample_id!r}{where}")
        self.sample_id = sample_id


class UnlabeledSamples(PhishIntentError, ValueError):
    def __init__(self, ids: list[str]):
        shown = ", ".join(ids[:10]) + (" ..." if len(ids) > 10 else "")
        super().__init__(f"{len(ids)} sample(s) lack labels: {shown}")
        self.ids = ids


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[Sample, ...]
    source: str = ""
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise DuplicateSampleId(s.id)
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}

    @property
    def labeled(self) -> list[Sample]:
        return [s for s in self.samples if s.true_labels is not None]


def parse_manifest_line(record: Any, line_no: int, base_dir: Path) -> Sample:
    if not isinstance(record, dict):
        raise ParseError(line_no, "each line must be a JSON object")
    sample_id = record.get("id")
    if not isinstance(sample_id, str) or not sample_id:
        raise ParseError(line_no, "'id' must be a nonempty string")

    screenshot = record.get("screenshot")
    if screenshot is not None:
        if not isinstance(screenshot, str) or not screenshot:
            raise ParseError(line_no, "'screenshot' must be a path string or null")
        screenshot = (base_dir / screenshot).resolve()

    sector = record.get("sector")
    if sector is not None and not isinstance(sector, str):
        raise ParseError(line_no, "'sector' must be a string or null")

    labels = record.get("labels")
    true_labels = None
    if labels is not None:
        if not isinstance(labels, list):
            raise ParseError(line_no, "'labels' must be a list or null")
        try:
            true_labels = LabelSet(labels)
        except (ValueError, TypeError) as exc:
            raise ParseError(line_no, str(exc)) from None
    return Sample(id=sample_id, screenshot=screenshot, sector=sector, true_labels=true_labels)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a JSONL manifest.

    Screenshot paths resolve against the manifest's directory. A missing
    screenshot is only a warning here; the pipeline fails on it later.
    """
    path = Path(path)
    base_dir = path.resolve().parent
    samples: list[Sample] = []
    seen: dict[str, int] = {}
    warnings: list[str] = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc.msg}") from None
            sample = parse_manifest_line(record, line_no, base_dir)
            if sample.id in seen:
                raise DuplicateSampleId(sample.id, line_no)
            seen[sample.id] = line_no
            if isinstance(sample.screenshot, Path) and not sample.screenshot.exists():
                msg = f"line {line_no}: screenshot not found for {sample.id!r}: {sample.screenshot}"
                log.warning(msg)
                warnings.append(msg)
            samples.append(sample)
    return DatasetManifest(tuple(samples), source=str(path), warnings=tuple(warnings))


def sample_to_record(sample: Sample, base_dir: Path) -> dict[str, Any]:
    if isinstance(sample.screenshot, bytes):
        raise ValueError(f"sample {sample.id!r} holds raw image bytes and cannot be written to a manifest")
    shot = None
    if sample.screenshot is not None:
        shot = Path(os.path.relpath(Path(sample.screenshot).resolve(), base_dir.resolve())).as_posix()
    return {
        "id": sample.id,
        "screenshot": shot,
        "sector": sample.sector,
        "labels": sample.true_labels.to_json() if sample.true_labels is not None else None,
    }


def dump_manifest(manifest: DatasetManifest | Iterable[Sample], path: str | Path) -> None:
    path = Path(path)
    base_dir = path.resolve().parent
    with path.open("w", encoding="utf-8") as fh:
        for sample in manifest:
            fh.write(dumps(sample_to_record(sample, base_dir)) + "\n")


@dataclass(frozen=True)
class DistributionSummary:
    per_category_counts: dict[ThreatCategory, int]
    per_cardinality_counts: dict[int, int]
    total: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_category_counts": {c.value: self.per_category_counts[c] for c in CATEGORIES},
            "per_cardinality_counts": {str(k): v for k, v in sorted(self.per_cardinality_counts.items())},
            "total": self.total,
        }


def summarize_labels(label_sets: Iterable[LabelSet]) -> DistributionSummary:
    per_category: Counter[ThreatCategory] = Counter()
    per_cardinality: Counter[int] = Counter()
    total = 0
    for labels in label_sets:
        total += 1
        per_cardinality[len(labels)] += 1
        per_category.update(labels)
    return DistributionSummary(
        per_category_counts={c: per_category[c] for c in CATEGORIES},
        per_cardinality_counts={k: per_cardinality[k] for k in range(1, MAX_LABELS + 1)},
        total=total,
    )


def summarize(manifest: DatasetManifest) -> DistributionSummary:
    unlabeled = [s.id for s in manifest if s.true_labels is None]
    if unlabeled:
        raise UnlabeledSamples(unlabeled)
    return summarize_labels(s.true_labels for s in manifest)
