"""Sector by intention frequency tables and multi-intention combination counts."""

from __future__ import annotations

import csv
import io
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

from .core import CATEGORIES, LabelSet, ThreatCategory, normalize_sector, parse_category
from .dataset import DatasetManifest

UNKNOWN_SECTOR = "unknown"
CSV_HEADER = ["sector", *(c.value for c in CATEGORIES), "total"]


@dataclass(frozen=True)
class ProfileRecord:
    sector: str
    labels: LabelSet

    @classmethod
    def of(cls, sector: str | None, labels: Iterable[ThreatCategory | str]) -> ProfileRecord:
        return cls(normalize_sector(sector) or UNKNOWN_SECTOR, LabelSet(labels))


def records_from_manifest(manifest: DatasetManifest) -> list[ProfileRecord]:
    """Truth-label records; unlabeled samples are skipped."""
    return [ProfileRecord.of(s.sector, s.true_labels) for s in manifest if s.true_labels is not None]


def records_from_results(results: Iterable[Mapping[str, Any]],
                         sectors: Mapping[str, str | None] | None = None) -> list[ProfileRecord]:
    """Predicted-label records; failed samples are skipped.

    Result lines carry no sector, so ``sectors`` maps sample id to sector
    (usually taken from the manifest the batch ran on).
    """
    sectors = sectors or {}
    out = []
    for record in results:
        if record.get("error") or not record.get("classifications"):
            continue
        labels = [parse_category(c["category"]) for c in record["classifications"]]
        out.append(ProfileRecord.of(sectors.get(record["sample_id"]), labels))
    return out


@dataclass(frozen=True)
class SectorIntentionMatrix:
    counts: dict[str, dict[ThreatCategory, int]]
    sectors: tuple[str, ...]

    def row_total(self, sector: str) -> int:
        return sum(self.counts[sector].values())

    def column_total(self, category: ThreatCategory) -> int:
        return sum(row[category] for row in self.counts.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for sector in self.sectors:
            row = self.counts[sector]
            writer.writerow([sector, *(row[c] for c in CATEGORIES), self.row_total(sector)])
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return {
            "sectors": list(self.sectors),
            "counts": {s: {c.value: self.counts[s][c] for c in CATEGORIES} for s in self.sectors},
        }


def sector_matrix(records: Iterable[ProfileRecord]) -> SectorIntentionMatrix:
    counts: dict[str, dict[ThreatCategory, int]] = defaultdict(lambda: {c: 0 for c in CATEGORIES})
    for record in records:
        row = counts[record.sector]
        for category in record.labels:
            row[category] += 1
    counts = dict(counts)
    order = sorted(counts, key=lambda s: (-sum(counts[s].values()), s))
    return SectorIntentionMatrix(counts, tuple(order))


@dataclass(frozen=True)
class CombinationFrequency:
    combination: LabelSet
    total: int
    top_sector: tuple[str, int] | None

    def to_dict(self) -> dict[str, Any]:
        top = None
        if self.top_sector is not None:
            top = {"sector": self.top_sector[0], "count": self.top_sector[1]}
        return {
            "combination": self.combination.to_json(),
            "label": " + ".join(c.abbreviation for c in self.combination.ordered()),
            "total": self.total,
            "top_sector": top,
        }


def combination_frequencies(records: Iterable[ProfileRecord]) -> list[CombinationFrequency]:
    """Count each distinct 2- or 3-label set and the sector contributing most to it.

    Sorted by total descending, then by set size, then canonical category order.
    Top-sector ties go to the alphabetically first sector.
    """
    by_combo: dict[LabelSet, Counter[str]] = defaultdict(Counter)
    for record in records:
        if len(record.labels) >= 2:
            by_combo[record.labels][record.sector] += 1
    out = []
    for combo, sectors in by_combo.items():
        sector, count = min(sectors.items(), key=lambda kv: (-kv[1], kv[0]))
        out.append(CombinationFrequency(combo, sum(sectors.values()), (sector, count)))
    out.sort(key=lambda f: (-f.total, len(f.combination), [c.rank for c in f.combination.ordered()]))
    return out
