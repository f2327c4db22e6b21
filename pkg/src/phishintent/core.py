"""Shared domain vocabulary: intention categories, label sets, evidence and results."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

MAX_LABELS = 3


class PhishIntentError(Exception):
    """Base class for every error raised by this package."""


class UnknownCategory(PhishIntentError, ValueError):
    def __init__(self, name: str):
        super().__init__(f"unknown intention category: {name!r}")
        self.name = name


class EmptyLabelSet(PhishIntentError, ValueError):
    pass


class TooManyLabels(PhishIntentError, ValueError):
    pass


class SchemaError(PhishIntentError, ValueError):
    """A structured input file does not match its expected layout."""

    def __init__(self, location: str, reason: str):
        super().__init__(f"{location}: {reason}")
        self.location = location
        self.reason = reason


class ThreatCategory(str, Enum):
    """The four phishing intentions, declared in canonical order."""

    CREDENTIAL_THEFT = "credential_theft"
    FINANCIAL_FRAUD = "financial_fraud"
    MALWARE_DISTRIBUTION = "malware_distribution"
    PERSONAL_INFO_HARVESTING = "personal_info_harvesting"

    @property
    def rank(self) -> int:
        return _RANK[self]

    @property
    def display_name(self) -> str:
        return _DISPLAY[self]

    @property
    def abbreviation(self) -> str:
        return _ABBREV[self]

    def __str__(self) -> str:
        return self.value


CATEGORIES: tuple[ThreatCategory, ...] = tuple(ThreatCategory)
_RANK = {c: i for i, c in enumerate(CATEGORIES)}
_DISPLAY = {
    ThreatCategory.CREDENTIAL_THEFT: "Credential Theft",
    ThreatCategory.FINANCIAL_FRAUD: "Financial Fraud",
    ThreatCategory.MALWARE_DISTRIBUTION: "Malware Distribution",
    ThreatCategory.PERSONAL_INFO_HARVESTING: "Personal Information Harvesting",
}
_ABBREV = {
    ThreatCategory.CREDENTIAL_THEFT: "CT",
    ThreatCategory.FINANCIAL_FRAUD: "FF",
    ThreatCategory.MALWARE_DISTRIBUTION: "MD",
    ThreatCategory.PERSONAL_INFO_HARVESTING: "PIH",
}


def _norm_key(text: str) -> str:
    return re.sub(r"[\s_\-]+", " ", text.strip().lower())


_LOOKUP: dict[str, ThreatCategory] = {}
for _c in CATEGORIES:
    _LOOKUP[_norm_key(_c.value)] = _c
    _LOOKUP[_norm_key(_c.display_name)] = _c
    _LOOKUP[_norm_key(_c.name)] = _c
_LOOKUP.update(
    {
        "credentials theft": ThreatCategory.CREDENTIAL_THEFT,
        "personal info harvesting": ThreatCategory.PERSONAL_INFO_HARVESTING,
        "personal information harvest": ThreatCategory.PERSONAL_INFO_HARVESTING,
        "credentialtheft": ThreatCategory.CREDENTIAL_THEFT,
        "financialfraud": ThreatCategory.FINANCIAL_FRAUD,
        "malwaredistribution": ThreatCategory.MALWARE_DISTRIBUTION,
        "personalinfoharvesting": ThreatCategory.PERSONAL_INFO_HARVESTING,
    }
)


def parse_category(name: str | ThreatCategory) -> ThreatCategory:
    """Resolve a canonical name, display name or known alias.

    Matching ignores case and collapses whitespace, underscores and hyphens,
    so ``"Credentials  Theft"`` and ``"credential_theft"`` both resolve.
    """
    if isinstance(name, ThreatCategory):
        return name
    if not isinstance(name, str):
        raise UnknownCategory(repr(name))
    try:
        return _LOOKUP[_norm_key(name)]
    except KeyError:
        raise UnknownCategory(name) from None


def category_sort_key(category: ThreatCategory) -> int:
    return category.rank


class LabelSet(frozenset):
    """An immutable set of 1 to 3 distinct intention categories."""

    def __new__(cls, categories: Iterable[ThreatCategory | str] = ()):
        items = frozenset(parse_category(c) for c in categories)
        if not items:
            raise EmptyLabelSet("a label set needs at least one category")
        if len(items) > MAX_LABELS:
            raise TooManyLabels(
                f"a label set holds at most {MAX_LABELS} categories, got {len(items)}"
            )
        return super().__new__(cls, items)

    def ordered(self) -> tuple[ThreatCategory, ...]:
        return tuple(sorted(self, key=category_sort_key))

    def to_json(self) -> list[str]:
        return [c.value for c in self.ordered()]

    def __repr__(self) -> str:
        return "LabelSet({%s})" % ", ".join(c.abbreviation for c in self.ordered())


def make_label_set(categories: Iterable[ThreatCategory | str]) -> LabelSet:
    return LabelSet(categories)


def check_confidence(value: Any) -> float:
    """Validate a confidence score, returning it as a float in [0, 1]."""
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"confidence must be a number, got {value!r}")
    value = float(value)
    if math.isnan(value) or not 0.0 <= value <= 1.0:
        raise ValueError(f"confidence must lie in [0, 1], got {value!r}")
    return value


@dataclass(frozen=True)
class EvidenceItem:
    description: str
    source_agent: str
    kb_refs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.description or not self.description.strip():
            raise ValueError("evidence description must be nonempty")
        object.__setattr__(self, "kb_refs", tuple(self.kb_refs))

    def unresolved_refs(self, known_ids) -> list[str]:
        return [r for r in self.kb_refs if r not in known_ids]

    def to_dict(self) -> dict[str, Any]:
        return {
            "description": self.description,
            "source_agent": self.source_agent,
            "kb_refs": list(self.kb_refs),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EvidenceItem:
        return cls(data["description"], data["source_agent"], tuple(data.get("kb_refs", ())))


@dataclass(frozen=True)
class Classification:
    category: ThreatCategory
    confidence: float
    evidence: tuple[EvidenceItem, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "category", parse_category(self.category))
        object.__setattr__(self, "confidence", check_confidence(self.confidence))
        object.__setattr__(self, "evidence", tuple(self.evidence))

    def to_dict(self) -> dict[str, Any]:
        return {
            "category": self.category.value,
            "confidence": self.confidence,
            "evidence": [e.to_dict() for e in self.evidence],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Classification:
        return cls(
            parse_category(data["category"]),
            data["confidence"],
            tuple(EvidenceItem.from_dict(e) for e in data.get("evidence", ())),
        )


def by_confidence(category: ThreatCategory, confidence: float) -> tuple[float, int]:
    """Sort key: confidence descending, then canonical category order."""
    return (-confidence, category.rank)


def sort_classifications(items: Iterable[Classification]) -> tuple[Classification, ...]:
    return tuple(sorted(items, key=lambda c: by_confidence(c.category, c.confidence)))


@dataclass(frozen=True)
class Sample:
    id: str
    screenshot: Path | bytes | None
    sector: str | None = None
    true_labels: LabelSet | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("sample id must be nonempty")
        if isinstance(self.screenshot, str):
            object.__setattr__(self, "screenshot", Path(self.screenshot))
        if self.sector is not None:
            object.__setattr__(self, "sector", normalize_sector(self.sector))


def normalize_sector(sector: str | None) -> str | None:
    if sector is None:
        return None
    sector = " ".join(sector.strip().lower().split())
    return sector or None


@dataclass
class TraceEntry:
    """One gateway call as seen by the pipeline."""

    stage: str
    agent_role: str
    input_digest: str
    raw_output: str
    parsed_output: Any
    latency_ms: int
    attempt_count: int
    usage: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "agent_role": self.agent_role,
            "input_digest": self.input_digest,
            "raw_output": self.raw_output,
            "parsed_output": self.parsed_output,
            "latency_ms": self.latency_ms,
            "attempt_count": self.attempt_count,
            "usage": dict(self.usage),
        }


@dataclass
class AgentTrace:
    calls: list[TraceEntry] = field(default_factory=list)
    initial_candidates: list[ThreatCategory] = field(default_factory=list)
    specialists_run: list[ThreatCategory] = field(default_factory=list)
    feedback_rounds: list[list[ThreatCategory]] = field(default_factory=list)
    low_confidence: bool = False
    fallback_used: bool = False

    def specialist_calls(self) -> list[TraceEntry]:
        return [c for c in self.calls if c.stage == "specialist"]

    def to_dict(self) -> dict[str, Any]:
        return {
            "calls": [c.to_dict() for c in self.calls],
            "initial_candidates": [c.value for c in self.initial_candidates],
            "specialists_run": [c.value for c in self.specialists_run],
            "feedback_rounds": [[c.value for c in r] for r in self.feedback_rounds],
            "low_confidence": self.low_confidence,
            "fallback_used": self.fallback_used,
        }


@dataclass(frozen=True)
class AssessmentResult:
    sample_id: str
    classifications: tuple[Classification, ...]
    trace: AgentTrace = field(default_factory=AgentTrace, compare=False)

    def __post_init__(self) -> None:
        items = sort_classifications(self.classifications)
        if not 1 <= len(items) <= MAX_LABELS:
            raise ValueError(f"an assessment carries 1 to {MAX_LABELS} classifications")
        if len({c.category for c in items}) != len(items):
            raise ValueError("classification categories must be distinct")
        object.__setattr__(self, "classifications", items)

    @property
    def categories(self) -> LabelSet:
        return LabelSet(c.category for c in self.classifications)

    @property
    def max_confidence(self) -> float:
        return max(c.confidence for c in self.classifications)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "classifications": [c.to_dict() for c in self.classifications],
            "trace": self.trace.to_dict(),
            "error": None,
        }


def dumps(obj: Any) -> str:
    """Canonical JSON used for every line-oriented output."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
