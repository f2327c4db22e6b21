"""Threat-pattern knowledge base: a basic pattern repository plus per-category specialist knowledge.

The on-disk form is one JSON document::

    {"version": ..., "basic": {"common_patterns": [...], "visual_deception": [...],
     "text_patterns": [...]}, "specialist": {"credential_theft": {...}, ...}}

Retrieval is lexical. An entry scores one point per tag found in the query
terms plus one point per indicator phrase found in the space-joined,
sorted query terms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Iterator, Mapping

import jsonschema

from .core import CATEGORIES, PhishIntentError, SchemaError, ThreatCategory

BASIC_SECTIONS = ("common_patterns", "visual_deception", "text_patterns")
SPECIALIST_ENTRY_SECTIONS = ("primary_features", "techniques", "indicators")


class DuplicateId(PhishIntentError):
    def __init__(self, entry_id: str):
        super().__init__(f"duplicate knowledge-base id: {entry_id!r}")
        self.entry_id = entry_id


_ENTRY_SCHEMA = {
    "type": "object",
    "required": ["id", "description", "tags", "indicators"],
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "tags": {"type": "array", "items": {"type": "string"}},
        "indicators": {"type": "array", "items": {"type": "string"}},
    },
}
_ENTRY_LIST = {"type": "array", "items": {"$ref": "#/$defs/entry"}}

KB_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$defs": {
        "entry": _ENTRY_SCHEMA,
        "specialist": {
            "type": "object",
            "required": ["primary_features", "targets", "techniques", "indicators"],
            "properties": {
                "primary_features": _ENTRY_LIST,
                "targets": {"type": "array", "items": {"type": "string"}},
                "techniques": _ENTRY_LIST,
                "indicators": _ENTRY_LIST,
            },
        },
    },
    "type": "object",
    "required": ["version", "basic", "specialist"],
    "properties": {
        "version": {"type": "string"},
        "basic": {
            "type": "object",
            "required": list(BASIC_SECTIONS),
            "properties": {s: _ENTRY_LIST for s in BASIC_SECTIONS},
        },
        "specialist": {
            "type": "object",
            "required": [c.value for c in CATEGORIES],
            "properties": {c.value: {"$ref": "#/$defs/specialist"} for c in CATEGORIES},
            "additionalProperties": False,
        },
    },
}


@dataclass(frozen=True)
class PatternEntry:
    id: str
    description: str
    tags: frozenset[str]
    indicators: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PatternEntry:
        return cls(
            id=data["id"],
            description=data["description"],
            tags=frozenset(data["tags"]),
            indicators=tuple(data["indicators"]),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "description": self.description,
            "tags": sorted(self.tags),
            "indicators": list(self.indicators),
        }


@dataclass(frozen=True)
class BasicThreatRepo:
    common_patterns: tuple[PatternEntry, ...]
    visual_deception: tuple[PatternEntry, ...]
    text_patterns: tuple[PatternEntry, ...]

    def sections(self) -> Iterator[tuple[str, tuple[PatternEntry, ...]]]:
        for name in BASIC_SECTIONS:
            yield name, getattr(self, name)

    def entries(self) -> Iterator[PatternEntry]:
        for _, section in self.sections():
            yield from section


@dataclass(frozen=True)
class SpecialistKnowledge:
    """Specialist knowledge for one category."""

    primary_features: tuple[PatternEntry, ...]
    targets: tuple[str, ...]
    techniques: tuple[PatternEntry, ...]
    indicators: tuple[PatternEntry, ...]

    def entries(self) -> Iterator[PatternEntry]:
        yield from self.primary_features
        yield from self.techniques
        yield from self.indicators


@dataclass(frozen=True)
class KnowledgeBase:
    basic: BasicThreatRepo
    specialist: Mapping[ThreatCategory, SpecialistKnowledge]
    version: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "specialist", MappingProxyType(dict(self.specialist)))
        object.__setattr__(self, "_index", {})
        for entry in self.entries():
            self._index.setdefault(entry.id, entry)

    def entries(self) -> Iterator[PatternEntry]:
        yield from self.basic.entries()
        for category in CATEGORIES:
            if category in self.specialist:
                yield from self.specialist[category].entries()

    @property
    def ids(self) -> frozenset[str]:
        return frozenset(self._index)

    def get(self, entry_id: str) -> PatternEntry | None:
        return self._index.get(entry_id)

    def to_dict(self) -> dict[str, Any]:
        def dump(entries):
            return [e.to_dict() for e in entries]

        return {
            "version": self.version,
            "basic": {name: dump(section) for name, section in self.basic.sections()},
            "specialist": {
                c.value: {
                    "primary_features": dump(k.primary_features),
                    "targets": list(k.targets),
                    "techniques": dump(k.techniques),
                    "indicators": dump(k.indicators),
                }
                for c, k in sorted(self.specialist.items(), key=lambda kv: kv[0].rank)
            },
        }


@dataclass(frozen=True)
class Violation:
    code: str
    subject: str
    message: str

    def __str__(self) -> str:
        return f"{self.code} [{self.subject}]: {self.message}"


@dataclass(frozen=True)
class SpecialistBundle:
    category: ThreatCategory
    primary_features: tuple[PatternEntry, ...]
    targets: tuple[str, ...]
    scored: tuple[PatternEntry, ...]

    def entries(self) -> tuple[PatternEntry, ...]:
        return self.primary_features + self.scored


def parse_kb(data: Any) -> KnowledgeBase:
    """Build a KnowledgeBase from decoded JSON, checking structure only."""
    validator = jsonschema.Draft202012Validator(KB_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: e.json_path)
    if errors:
        err = errors[0]
        raise SchemaError(err.json_path, err.message)

    def entries(items):
        return tuple(PatternEntry.from_dict(item) for item in items)

    basic = BasicThreatRepo(*(entries(data["basic"][s]) for s in BASIC_SECTIONS))
    specialist = {}
    for category in CATEGORIES:
        section = data["specialist"][category.value]
        specialist[category] = SpecialistKnowledge(
            primary_features=entries(section["primary_features"]),
            targets=tuple(section["targets"]),
            techniques=entries(section["techniques"]),
            indicators=entries(section["indicators"]),
        )
    return KnowledgeBase(basic=basic, specialist=specialist, version=data["version"])


def read_kb(path: str | Path) -> KnowledgeBase:
    """Parse a KB file without running :func:`validate_kb`."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from exc
    return parse_kb(data)


def load_kb(path: str | Path) -> KnowledgeBase:
    """Load and fully validate a KB file.

    Raises ``OSError`` when unreadable, :class:`DuplicateId` for a repeated
    entry id and :class:`SchemaError` for any other violation.
    """
    kb = read_kb(path)
    violations = validate_kb(kb)
    for v in violations:
        if v.code == "DuplicateId":
            raise DuplicateId(v.subject)
    if violations:
        raise SchemaError(violations[0].subject, violations[0].message)
    return kb


def starter_kb_path() -> Path:
    return Path(str(resources.files("phishintent") / "data" / "starter_kb.json"))


def load_starter_kb() -> KnowledgeBase:
    return load_kb(starter_kb_path())


def _entry_violations(entry: PatternEntry, where: str) -> list[Violation]:
    out = []
    if not entry.description.strip():
        out.append(Violation("EmptyDescription", entry.id, f"{where}: description is empty"))
    if not entry.tags:
        out.append(Violation("EmptyTags", entry.id, f"{where}: entry has no tags"))
    for tag in sorted(entry.tags):
        if tag != tag.lower() or not tag.strip():
            out.append(Violation("InvalidTag", entry.id, f"{where}: tag {tag!r} is not a lowercase keyword"))
    return out


def validate_kb(kb: KnowledgeBase) -> list[Violation]:
    """Return every invariant violation; an empty list means the KB is valid."""
    violations: list[Violation] = []
    seen: set[str] = set()

    def check_ids(entries: Iterable[PatternEntry]) -> None:
        for entry in entries:
            if entry.id in seen:
                violations.append(Violation("DuplicateId", entry.id, "id is used by more than one entry"))
            seen.add(entry.id)

    for name, section in kb.basic.sections():
        if not section:
            violations.append(Violation("EmptySection", f"basic.{name}", "section has no entries"))
        check_ids(section)
        for entry in section:
            violations.extend(_entry_violations(entry, f"basic.{name}"))

    for category in CATEGORIES:
        knowledge = kb.specialist.get(category)
        if knowledge is None:
            violations.append(Violation("MissingCategory", category.value, "specialist section missing"))
            continue
        if not knowledge.primary_features:
            violations.append(
                Violation("EmptyPrimaryFeatures", category.value, "category has no primary features")
            )
        for name in SPECIALIST_ENTRY_SECTIONS:
            section = getattr(knowledge, name)
            check_ids(section)
            for entry in section:
                violations.extend(_entry_violations(entry, f"specialist.{category.value}.{name}"))
    return violations


def score_entry(entry: PatternEntry, terms: frozenset[str], joined: str) -> int:
    tag_hits = len(entry.tags & terms)
    indicator_hits = sum(1 for ind in entry.indicators if ind and ind.lower() in joined)
    return tag_hits + indicator_hits


def _normalize_terms(query_terms: Iterable[str]) -> tuple[frozenset[str], str]:
    terms = frozenset(t.lower() for t in query_terms if t)
    return terms, " ".join(sorted(terms))


def rank_entries(entries: Iterable[PatternEntry], query_terms: Iterable[str], limit: int) -> list[PatternEntry]:
    if limit < 1:
        raise ValueError("limit must be at least 1")
    terms, joined = _normalize_terms(query_terms)
    scored = []
    for entry in entries:
        score = score_entry(entry, terms, joined)
        if score > 0:
            scored.append((-score, entry.id, entry))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [entry for _, _, entry in scored[:limit]]


def retrieve_basic(kb: KnowledgeBase, query_terms: Iterable[str], limit: int) -> list[PatternEntry]:
    return rank_entries(kb.basic.entries(), query_terms, limit)


def retrieve_specialist(
    kb: KnowledgeBase, category: ThreatCategory, query_terms: Iterable[str], limit: int
) -> SpecialistBundle:
    knowledge = kb.specialist[category]
    scored = rank_entries(knowledge.techniques + knowledge.indicators, query_terms, limit)
    return SpecialistBundle(
        category=category,
        primary_features=knowledge.primary_features,
        targets=knowledge.targets,
        scored=tuple(scored),
    )
