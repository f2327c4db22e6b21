"""Five-stage intention analysis: vision, enrichment, classification, specialists, validation.

A sample flows through the stages in order. Classification picks up to
``top_k_max`` candidate categories and one specialist runs per candidate.
Validation merges the specialist reports. If the best validated confidence
stays below the threshold, every specialist that has not yet run is
activated, the reports are merged, and validation runs again. This repeats
for at most ``feedback_max_rounds`` rounds.
"""

from __future__ import annotations

import io
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from PIL import Image, UnidentifiedImageError

from . import schemas
from .core import (
    CATEGORIES,
    MAX_LABELS,
    AgentTrace,
    AssessmentResult,
    Classification,
    EvidenceItem,
    PhishIntentError,
    Sample,
    ThreatCategory,
    TraceEntry,
    by_confidence,
    dumps,
    parse_category,
)
from .dataset import DatasetManifest
from .gateway import Backend, ImagePayload, VisionRequest, VisionResponse
from .kb import KnowledgeBase, PatternEntry, retrieve_basic, retrieve_specialist
from .prompts import PromptLibrary

log = logging.getLogger(__name__)

VERDICTS = ("confirmed", "rejected", "uncertain")
_MEDIA_TYPES = {"PNG": "image/png", "JPEG": "image/jpeg"}


class ImageDecodeError(PhishIntentError):
    pass


class UnresolvedKbRef(PhishIntentError):
    def __init__(self, role: str, refs: list[str]):
        super().__init__(f"{role}: cites unknown knowledge-base id(s) {', '.join(refs)}")
        self.role = role
        self.refs = refs


class StageError(PhishIntentError):
    """A stage failed for one sample; carries the partial trace."""

    def __init__(self, stage: str, cause: BaseException, trace: AgentTrace):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.trace = trace


@dataclass(frozen=True)
class PipelineConfig:
    top_k_max: int = 3
    confidence_threshold: float = 0.5
    feedback_max_rounds: int = 1
    specialist_parallel: bool = True
    prompt_dir: Path | None = None
    basic_limit: int = 8
    specialist_limit: int = 5
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self) -> None:
        if not 1 <= self.top_k_max <= len(CATEGORIES):
            raise ValueError("top_k_max must be between 1 and 4")
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("confidence_threshold must lie strictly between 0 and 1")
        if self.feedback_max_rounds < 0:
            raise ValueError("feedback_max_rounds must be non-negative")
        if self.basic_limit < 1 or self.specialist_limit < 1:
            raise ValueError("retrieval limits must be positive")


# -- stage outputs ------------------------------------------------------------


@dataclass(frozen=True)
class InterfaceElement:
    kind: str
    label: str
    detail: str = ""


@dataclass(frozen=True)
class VisualExtraction:
    text_content: tuple[str, ...] = ()
    interface_elements: tuple[InterfaceElement, ...] = ()
    layout_summary: str = ""
    domain_info: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "text_content": list(self.text_content),
            "interface_elements": [asdict(e) for e in self.interface_elements],
            "layout_summary": self.layout_summary,
            "domain_info": self.domain_info,
        }


@dataclass(frozen=True)
class TaggedElement:
    element_ref: str
    security_tags: tuple[str, ...]
    kb_refs: tuple[str, ...]


@dataclass(frozen=True)
class Hypothesis:
    category: ThreatCategory
    rationale: str
    element_refs: tuple[str, ...] = ()
    kb_refs: tuple[str, ...] = ()


@dataclass(frozen=True)
class EnrichedContext:
    extraction: VisualExtraction
    tagged_elements: tuple[TaggedElement, ...] = ()
    implications: tuple[str, ...] = ()
    preliminary_hypotheses: tuple[Hypothesis, ...] = ()

    def query_terms(self) -> frozenset[str]:
        terms = set(extraction_terms(self.extraction))
        for element in self.tagged_elements:
            terms.update(t.lower() for t in element.security_tags if t)
        return frozenset(terms)

    def to_dict(self) -> dict[str, Any]:
        return {
            "extraction": self.extraction.to_dict(),
            "tagged_elements": [
                {"element_ref": t.element_ref, "security_tags": list(t.security_tags), "kb_refs": list(t.kb_refs)}
                for t in self.tagged_elements
            ],
            "implications": list(self.implications),
            "preliminary_hypotheses": [
                {
                    "category": h.category.value,
                    "rationale": h.rationale,
                    "element_refs": list(h.element_refs),
                    "kb_refs": list(h.kb_refs),
                }
                for h in self.preliminary_hypotheses
            ],
        }


@dataclass(frozen=True)
class Candidate:
    category: ThreatCategory
    confidence: float
    evidence: tuple[EvidenceItem, ...] = ()


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[Candidate, ...]

    def __post_init__(self) -> None:
        items = tuple(sorted(self.candidates, key=lambda c: by_confidence(c.category, c.confidence)))
        if not 1 <= len(items) <= 3:
            raise ValueError("a candidate set holds 1 to 3 categories")
        if len({c.category for c in items}) != len(items):
            raise ValueError("candidate categories must be distinct")
        object.__setattr__(self, "candidates", items)

    @property
    def categories(self) -> list[ThreatCategory]:
        return [c.category for c in self.candidates]


@dataclass(frozen=True)
class SpecialistReport:
    category: ThreatCategory
    verdict: str
    confidence: float
    evidence: tuple[EvidenceItem, ...] = ()
    notes: str = ""

    def __post_init__(self) -> None:
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if self.verdict == "confirmed" and not self.evidence:
            raise ValueError("a confirmed verdict needs evidence")

    def to_dict(self) -> dict[str, Any]:
        return {
            "category": self.category.value,
            "verdict": self.verdict,
            "confidence": self.confidence,
            "evidence": [e.to_dict() for e in self.evidence],
            "notes": self.notes,
        }


# -- helpers ------------------------------------------------------------------

_WORD = re.compile(r"\w+")


def extraction_terms(extraction: VisualExtraction) -> frozenset[str]:
    """Lowercased word tokens of page text and element labels.

    Whole lowercased lines are included as well, so that multi-word KB
    indicators can match the joined term string.
    """
    terms: set[str] = set()
    for text in list(extraction.text_content) + [e.label for e in extraction.interface_elements]:
        lowered = " ".join(text.lower().split())
        if not lowered:
            continue
        terms.update(_WORD.findall(lowered))
        terms.add(lowered)
    return frozenset(terms)


def load_image(sample: Sample) -> ImagePayload:
    if sample.screenshot is None:
        raise ImageDecodeError(f"sample {sample.id!r} has no screenshot")
    if isinstance(sample.screenshot, bytes):
        data = sample.screenshot
    else:
        try:
            data = Path(sample.screenshot).read_bytes()
        except OSError as exc:
            raise ImageDecodeError(f"cannot read screenshot {sample.screenshot}: {exc.strerror}") from exc
    try:
        with Image.open(io.BytesIO(data)) as img:
            fmt = img.format
            img.verify()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"sample {sample.id!r}: screenshot is not a decodable image") from exc
    if fmt not in _MEDIA_TYPES:
        raise ImageDecodeError(f"sample {sample.id!r}: unsupported image format {fmt}")
    return ImagePayload(data=data, media_type=_MEDIA_TYPES[fmt])


def _entries_json(entries: Iterable[PatternEntry]) -> str:
    return json.dumps(
        [{"id": e.id, "description": e.description, "tags": sorted(e.tags)} for e in entries],
        indent=2,
        sort_keys=True,
    )


class _Caller:
    """Builds requests for one sample and records every call in the trace."""

    def __init__(self, backend: Backend, prompts: PromptLibrary, config: PipelineConfig,
                 sample_id: str | None, trace: AgentTrace | None):
        self.backend = backend
        self.prompts = prompts
        self.config = config
        self.sample_id = sample_id
        self.trace = trace if trace is not None else AgentTrace()

    def call(self, stage: str, role: str, schema: dict, values: dict[str, Any],
             image: ImagePayload | None = None, note: str | None = None) -> VisionResponse:
        pair = self.prompts.render(role, **values)
        user = pair.user if note is None else pair.user + "\n\n" + note
        request = VisionRequest(
            agent_role=role,
            system_prompt=pair.system,
            user_prompt=user,
            response_schema=schema,
            image=image,
            temperature=self.config.temperature,
            max_output_tokens=self.config.max_output_tokens,
            sample_id=self.sample_id,
        )
        response = self.backend.complete(request)
        self.trace.calls.append(
            TraceEntry(
                stage=stage,
                agent_role=role,
                input_digest=request.digest(),
                raw_output=response.raw_text,
                parsed_output=response.parsed_json,
                latency_ms=response.latency_ms,
                attempt_count=response.attempt_count,
                usage=dict(response.usage),
            )
        )
        return response

    def call_resolving(self, stage: str, role: str, schema: dict, values: dict[str, Any],
                       kb: KnowledgeBase, refs_of: Callable[[Any], list[str]]) -> VisionResponse:
        """Call, then re-prompt once if the reply cites ids missing from the KB."""
        response = self.call(stage, role, schema, values)
        missing = _unknown_refs(refs_of(response.parsed_json), kb)
        if not missing:
            return response
        note = (
            "Your previous answer cited knowledge-base ids that do not exist: "
            + ", ".join(missing)
            + ". Cite only ids that appear in the entries above."
        )
        response = self.call(stage, role, schema, values, note=note)
        missing = _unknown_refs(refs_of(response.parsed_json), kb)
        if missing:
            raise UnresolvedKbRef(role, missing)
        return response


def _unknown_refs(refs: Iterable[str], kb: KnowledgeBase) -> list[str]:
    known = kb.ids
    return sorted({r for r in refs if r not in known})


def _caller(backend, prompts, config, sample_id, trace) -> _Caller:
    return _Caller(backend, prompts or PromptLibrary(config.prompt_dir), config, sample_id, trace)


# -- stages -------------------------------------------------------------------


def run_vision(sample: Sample, backend: Backend, *, config: PipelineConfig | None = None,
               prompts: PromptLibrary | None = None, trace: AgentTrace | None = None) -> VisualExtraction:
    config = config or PipelineConfig()
    image = load_image(sample)
    caller = _caller(backend, prompts, config, sample.id, trace)
    data = caller.call("vision", "vision", schemas.VISION, {}, image=image).parsed_json
    domain = data.get("domain_info")
    return VisualExtraction(
        text_content=tuple(data["text_content"]),
        interface_elements=tuple(
            InterfaceElement(e["kind"], e["label"], e.get("detail", "")) for e in data["interface_elements"]
        ),
        layout_summary=data["layout_summary"],
        domain_info=domain if domain else None,
    )


def run_enrichment(extraction: VisualExtraction, kb: KnowledgeBase, backend: Backend, *,
                   config: PipelineConfig | None = None, prompts: PromptLibrary | None = None,
                   trace: AgentTrace | None = None, sample_id: str | None = None) -> EnrichedContext:
    config = config or PipelineConfig()
    caller = _caller(backend, prompts, config, sample_id, trace)
    retrieved = retrieve_basic(kb, extraction_terms(extraction), config.basic_limit)
    values = {
        "extraction_json": json.dumps(extraction.to_dict(), indent=2, sort_keys=True),
        "kb_entries": _entries_json(retrieved),
    }

    def refs_of(data: Any) -> list[str]:
        refs = [r for t in data["tagged_elements"] for r in t["kb_refs"]]
        refs += [r for h in data["hypotheses"] for r in h.get("kb_refs", ())]
        return refs

    data = caller.call_resolving("enrichment", "enrichment", schemas.ENRICHMENT, values, kb, refs_of).parsed_json
    hypotheses: list[Hypothesis] = []
    seen: set[ThreatCategory] = set()
    for h in data["hypotheses"]:
        category = parse_category(h["category"])
        if category in seen:
            continue
        seen.add(category)
        hypotheses.append(
            Hypothesis(category, h["rationale"], tuple(h.get("element_refs", ())), tuple(h.get("kb_refs", ())))
        )
    return EnrichedContext(
        extraction=extraction,
        tagged_elements=tuple(
            TaggedElement(t["element_ref"], tuple(t["security_tags"]), tuple(t["kb_refs"]))
            for t in data["tagged_elements"]
        ),
        implications=tuple(data["implications"]),
        preliminary_hypotheses=tuple(hypotheses),
    )


def select_top_k(confidences: dict[ThreatCategory, float], top_k_max: int) -> list[ThreatCategory]:
    """Keep the strongest categories with positive confidence, never fewer than one.

    A candidate set holds at most three categories, so ``top_k_max=4`` acts as 3.
    """
    ranked = sorted(CATEGORIES, key=lambda c: by_confidence(c, confidences.get(c, 0.0)))
    positive = sum(1 for c in CATEGORIES if confidences.get(c, 0.0) > 0)
    return ranked[: max(1, min(top_k_max, MAX_LABELS, positive))]


def run_classification(context: EnrichedContext, backend: Backend, config: PipelineConfig | None = None, *,
                       prompts: PromptLibrary | None = None, trace: AgentTrace | None = None,
                       sample_id: str | None = None) -> CandidateSet:
    config = config or PipelineConfig()
    caller = _caller(backend, prompts, config, sample_id, trace)
    values = {
        "context_json": json.dumps(context.to_dict(), indent=2, sort_keys=True),
        "top_k_max": config.top_k_max,
    }
    data = caller.call("classification", "classification", schemas.CLASSIFICATION, values).parsed_json
    confidences: dict[ThreatCategory, float] = {}
    evidence: dict[ThreatCategory, tuple[EvidenceItem, ...]] = {}
    for score in data["scores"]:
        category = parse_category(score["category"])
        if category in confidences:
            continue
        confidences[category] = float(score["confidence"])
        evidence[category] = tuple(
            EvidenceItem(text, "classification") for text in score.get("evidence", ()) if text.strip()
        )
    chosen = select_top_k(confidences, config.top_k_max)
    return CandidateSet(
        tuple(Candidate(c, confidences.get(c, 0.0), evidence.get(c, ())) for c in chosen)
    )


def run_specialist(category: ThreatCategory, context: EnrichedContext, kb: KnowledgeBase, backend: Backend, *,
                   config: PipelineConfig | None = None, prompts: PromptLibrary | None = None,
                   trace: AgentTrace | None = None, sample_id: str | None = None) -> SpecialistReport:
    config = config or PipelineConfig()
    caller = _caller(backend, prompts, config, sample_id, trace)
    role = f"specialist:{category.value}"
    bundle = retrieve_specialist(kb, category, context.query_terms(), config.specialist_limit)
    values = {
        "context_json": json.dumps(context.to_dict(), indent=2, sort_keys=True),
        "kb_entries": _entries_json(bundle.entries()),
        "targets": ", ".join(bundle.targets),
    }

    def refs_of(data: Any) -> list[str]:
        return [r for e in data["evidence"] for r in e.get("kb_refs", ())]

    data = caller.call_resolving("specialist", role, schemas.specialist(category), values, kb, refs_of).parsed_json
    return SpecialistReport(
        category=category,
        verdict=data["verdict"],
        confidence=float(data["confidence"]),
        evidence=tuple(
            EvidenceItem(e["description"], role, tuple(e.get("kb_refs", ()))) for e in data["evidence"]
        ),
        notes=data.get("notes", ""),
    )


FALLBACK_NOTE = "Validation accepted no category; kept the highest-confidence specialist finding."


def run_validation(reports: list[SpecialistReport], context: EnrichedContext, backend: Backend, *,
                   config: PipelineConfig | None = None, prompts: PromptLibrary | None = None,
                   trace: AgentTrace | None = None, sample_id: str | None = None) -> AssessmentResult:
    if not reports:
        raise ValueError("validation needs at least one specialist report")
    config = config or PipelineConfig()
    caller = _caller(backend, prompts, config, sample_id, trace)
    values = {
        "context_json": json.dumps(context.to_dict(), indent=2, sort_keys=True),
        "reports_json": json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True),
    }
    data = caller.call("validation", "validation", schemas.VALIDATION, values).parsed_json

    eligible = {r.category: r for r in reports if r.verdict != "rejected"}
    kept: dict[ThreatCategory, Classification] = {}
    for item in data["classifications"]:
        category = parse_category(item["category"])
        if category not in eligible or category in kept:
            continue
        note = EvidenceItem(item["rationale"], "validation")
        kept[category] = Classification(category, item["confidence"], eligible[category].evidence + (note,))
    final = sorted(kept.values(), key=lambda c: by_confidence(c.category, c.confidence))[:3]

    if not final:
        best = min(reports, key=lambda r: by_confidence(r.category, r.confidence))
        final = [Classification(best.category, best.confidence,
                                best.evidence + (EvidenceItem(FALLBACK_NOTE, "validation"),))]
        caller.trace.fallback_used = True
    else:
        caller.trace.fallback_used = False
    return AssessmentResult(sample_id or "", tuple(final), caller.trace)


# -- orchestration ------------------------------------------------------------


class Pipeline:
    """Runs samples end to end against one KB, backend and configuration."""

    def __init__(self, kb: KnowledgeBase, backend: Backend, config: PipelineConfig | None = None,
                 prompts: PromptLibrary | None = None):
        self.kb = kb
        self.backend = backend
        self.config = config or PipelineConfig()
        self.prompts = prompts or PromptLibrary(self.config.prompt_dir)

    def _specialists(self, categories: list[ThreatCategory], context: EnrichedContext,
                     sample_id: str, trace: AgentTrace) -> list[SpecialistReport]:
        def one(category: ThreatCategory) -> tuple[SpecialistReport | None, AgentTrace, Exception | None]:
            local = AgentTrace()
            try:
                report = run_specialist(category, context, self.kb, self.backend, config=self.config,
                                        prompts=self.prompts, trace=local, sample_id=sample_id)
            except Exception as exc:
                return None, local, exc
            return report, local, None

        if self.config.specialist_parallel and len(categories) > 1:
            with ThreadPoolExecutor(max_workers=len(categories)) as pool:
                outcomes = list(pool.map(one, categories))
        else:
            outcomes = []
            for category in categories:
                outcomes.append(one(category))
                if outcomes[-1][2] is not None:
                    break
        # merge in request order so traces do not depend on thread timing
        reports, first_error = [], None
        for report, local, exc in outcomes:
            trace.calls.extend(local.calls)
            if exc is not None:
                first_error = first_error or exc
                continue
            trace.specialists_run.append(report.category)
            reports.append(report)
        if first_error is not None:
            raise first_error
        return reports

    def run(self, sample: Sample) -> AssessmentResult:
        trace = AgentTrace()
        kw = dict(config=self.config, prompts=self.prompts, trace=trace, sample_id=sample.id)
        stage = "vision"
        try:
            extraction = run_vision(sample, self.backend, config=self.config, prompts=self.prompts, trace=trace)
            stage = "enrichment"
            context = run_enrichment(extraction, self.kb, self.backend, **kw)
            stage = "classification"
            candidates = run_classification(context, self.backend, self.config, prompts=self.prompts,
                                            trace=trace, sample_id=sample.id)
            trace.initial_candidates = candidates.categories
            stage = "specialist"
            reports = self._specialists(candidates.categories, context, sample.id, trace)
            stage = "validation"
            result = run_validation(reports, context, self.backend, **kw)

            rounds = 0
            while (result.max_confidence < self.config.confidence_threshold
                   and rounds < self.config.feedback_max_rounds):
                analyzed = {r.category for r in reports}
                remaining = [c for c in CATEGORIES if c not in analyzed]
                if not remaining:
                    break
                rounds += 1
                trace.feedback_rounds.append(remaining)
                log.info("%s: confidence %.3f below threshold, feedback round %d activates %s",
                         sample.id, result.max_confidence, rounds, [c.value for c in remaining])
                stage = "specialist"
                reports = reports + self._specialists(remaining, context, sample.id, trace)
                stage = "validation"
                result = run_validation(reports, context, self.backend, **kw)
        except Exception as exc:
            raise StageError(stage, exc, trace) from exc
        trace.low_confidence = result.max_confidence < self.config.confidence_threshold
        return AssessmentResult(sample.id, result.classifications, trace)


def run_pipeline(sample: Sample, kb: KnowledgeBase, backend: Backend,
                 config: PipelineConfig | None = None, prompts: PromptLibrary | None = None) -> AssessmentResult:
    return Pipeline(kb, backend, config, prompts).run(sample)


# -- batches ------------------------------------------------------------------


@dataclass
class BatchSummary:
    ok: int = 0
    failed: int = 0
    skipped: int = 0
    failed_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "failed": self.failed, "skipped": self.skipped, "failed_ids": self.failed_ids}


def error_record(sample_id: str, exc: BaseException, trace: AgentTrace | None = None) -> dict[str, Any]:
    stage = exc.stage if isinstance(exc, StageError) else "pipeline"
    cause = exc.cause if isinstance(exc, StageError) else exc
    trace = exc.trace if isinstance(exc, StageError) else (trace or AgentTrace())
    return {
        "sample_id": sample_id,
        "classifications": [],
        "trace": trace.to_dict(),
        "error": {"stage": stage, "message": f"{type(cause).__name__}: {cause}"},
    }


def completed_ids(output_path: Path) -> set[str]:
    """Ids already written to a results file; drops a torn final line."""
    if not output_path.exists():
        return set()
    raw = output_path.read_bytes()
    if raw and not raw.endswith(b"\n"):
        cut = raw.rfind(b"\n") + 1
        log.warning("%s: discarding incomplete final line", output_path)
        with output_path.open("r+b") as fh:
            fh.truncate(cut)
        raw = raw[:cut]
    ids = set()
    for line_no, line in enumerate(raw.decode("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            ids.add(json.loads(line)["sample_id"])
        except (json.JSONDecodeError, KeyError, TypeError):
            log.warning("%s:%d: unreadable result line ignored", output_path, line_no)
    return ids


def run_batch(manifest: DatasetManifest, kb: KnowledgeBase, backend: Backend, config: PipelineConfig | None,
              output_path: str | Path, prompts: PromptLibrary | None = None) -> BatchSummary:
    """Process every sample not yet present in ``output_path``.

    Up to ``backend.parallel_limit`` samples run at once. Lines are appended
    in manifest order, so reruns over the same inputs give identical files.
    """
    output_path = Path(output_path)
    pipeline = Pipeline(kb, backend, config, prompts)
    done = completed_ids(output_path)
    todo = [s for s in manifest if s.id not in done]
    summary = BatchSummary(skipped=len(manifest) - len(todo))

    def work(sample: Sample) -> tuple[Sample, dict[str, Any], bool]:
        try:
            return sample, pipeline.run(sample).to_dict(), True
        except Exception as exc:
            log.error("%s: %s", sample.id, exc)
            return sample, error_record(sample.id, exc), False

    output_path.parent.mkdir(parents=True, exist_ok=True)
    with output_path.open("a", encoding="utf-8") as out, \
            ThreadPoolExecutor(max_workers=max(1, backend.parallel_limit)) as pool:
        for sample, record, ok in pool.map(work, todo):
            out.write(dumps(record) + "\n")
            out.flush()
            if ok:
                summary.ok += 1
            else:
                summary.failed += 1
                summary.failed_ids.append(sample.id)
    return summary


def read_results(path: str | Path) -> list[dict[str, Any]]:
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from None
    return records
