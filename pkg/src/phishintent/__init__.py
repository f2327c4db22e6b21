"""Multi-agent phishing intention classification with a knowledge base, evaluation and profiling."""

from __future__ import annotations

__version__ = "0.1.0"

from .core import (
    CATEGORIES,
    AgentTrace,
    AssessmentResult,
    Classification,
    EvidenceItem,
    LabelSet,
    PhishIntentError,
    Sample,
    ThreatCategory,
    TraceEntry,
    parse_category,
)
from .dataset import DatasetManifest, load_manifest, summarize
from .evaluation import MetricsReport, compute_report, evaluate
from .gateway import BackendConfig, MockBackend, RemoteBackend, VisionRequest, VisionResponse
from .kb import KnowledgeBase, load_kb, load_starter_kb, validate_kb
from .pipeline import Pipeline, PipelineConfig, run_batch, run_pipeline
from .profiling import combination_frequencies, sector_matrix

__all__ = [
    "CATEGORIES",
    "AgentTrace",
    "AssessmentResult",
    "BackendConfig",
    "Classification",
    "DatasetManifest",
    "EvidenceItem",
    "KnowledgeBase",
    "LabelSet",
    "MetricsReport",
    "MockBackend",
    "PhishIntentError",
    "Pipeline",
    "PipelineConfig",
    "RemoteBackend",
    "Sample",
    "ThreatCategory",
    "TraceEntry",
    "VisionRequest",
    "VisionResponse",
    "combination_frequencies",
    "compute_report",
    "evaluate",
    "load_kb",
    "load_manifest",
    "load_starter_kb",
    "parse_category",
    "run_batch",
    "run_pipeline",
    "sector_matrix",
    "summarize",
    "validate_kb",
]
