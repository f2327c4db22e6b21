"""Convert an external label table (CSV or JSON) into a JSONL manifest.

Label columns come in two shapes, both handled:

* one column holding every label, either as a JSON list or as a delimited
  string such as ``"Credential Theft; Personal Information Harvesting"``;
* one column per category holding a truthy flag (``1``, ``true``, ``yes``, ``x``).
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .core import LabelSet, Sample, parse_category
from .dataset import DatasetManifest, dump_manifest

_TRUTHY = {"1", "true", "yes", "y", "x", "1.0"}
_SPLIT = re.compile(r"[;,|/+]")


def read_table(path: str | Path) -> Iterator[dict[str, Any]]:
    path = Path(path)
    if path.suffix.lower() in (".json", ".jsonl"):
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() == ".jsonl":
            yield from (json.loads(line) for line in text.splitlines() if line.strip())
        else:
            data = json.loads(text)
            yield from (data if isinstance(data, list) else data.get("records", []))
        return
    with path.open(newline="", encoding="utf-8-sig") as fh:
        yield from csv.DictReader(fh)


def split_labels(value: Any) -> list[str]:
    if value is None:
        return []
    if isinstance(value, list):
        return [str(v) for v in value]
    text = str(value).strip()
    if text.startswith("["):
        try:
            return [str(v) for v in json.loads(text)]
        except json.JSONDecodeError:
            pass
    return [part.strip() for part in _SPLIT.split(text) if part.strip()]


def _flag_columns(columns: Iterable[str]) -> dict[str, Any]:
    found = {}
    for column in columns:
        try:
            found[column] = parse_category(column)
        except ValueError:
            continue
    return found


def row_labels(row: Mapping[str, Any], labels_column: str | None) -> LabelSet | None:
    if labels_column:
        names = split_labels(row.get(labels_column))
    else:
        names = [
            category.value
            for column, category in _flag_columns(row).items()
            if str(row.get(column, "")).strip().lower() in _TRUTHY
        ]
    return LabelSet(names) if names else None


def import_table(
    path: str | Path,
    out: str | Path,
    *,
    id_column: str = "id",
    screenshot_column: str | None = "screenshot",
    sector_column: str | None = "sector",
    labels_column: str | None = "labels",
    screenshot_root: str | Path | None = None,
) -> DatasetManifest:
    """Write a manifest built from ``path`` to ``out`` and return it.

    Screenshot values are taken relative to ``screenshot_root`` (default: the
    table's directory) and rewritten relative to the manifest.
    """
    path = Path(path)
    root = Path(screenshot_root) if screenshot_root else path.parent
    samples = []
    for row in read_table(path):
        if labels_column and labels_column not in row:
            labels_column_used = None
        else:
            labels_column_used = labels_column
        shot = row.get(screenshot_column) if screenshot_column else None
        samples.append(
            Sample(
                id=str(row[id_column]),
                screenshot=(root / str(shot)).resolve() if shot else None,
                sector=(row.get(sector_column) or None) if sector_column else None,
                true_labels=row_labels(row, labels_column_used),
            )
        )
    manifest = DatasetManifest(tuple(samples), source=str(path))
    dump_manifest(manifest, out)
    return manifest

