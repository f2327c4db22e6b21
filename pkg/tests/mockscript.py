"""Helpers for building mock-backend scripts and tiny screenshots in tests."""

from __future__ import annotations

import io
import threading
import time
from pathlib import Path
from typing import Iterable

from PIL import Image

from phishintent.core import CATEGORIES, ThreatCategory
from phishintent.gateway import MockBackend

CT, FF, MD, PIH = CATEGORIES


def png_bytes(color: tuple[int, int, int] = (200, 200, 200), size: tuple[int, int] = (4, 4)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", size, color).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: Path, color: tuple[int, int, int] = (200, 200, 200)) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_bytes(color))
    return path


def extraction(text: Iterable[str] = ("Sign in to your account", "Password"),
               elements: Iterable[tuple[str, str]] = (("form", "Login form"),),
               layout: str = "centered card", domain: str | None = None) -> dict:
    return {
        "text_content": list(text),
        "interface_elements": [{"kind": k, "label": label} for k, label in elements],
        "layout_summary": layout,
        "domain_info": domain,
    }


def enrichment(tags: Iterable[tuple[str, list[str], list[str]]] = (("Login form", ["login"], ["pc_login_form"]),),
               hypotheses: Iterable[tuple[ThreatCategory, str, list[str]]] = ((CT, "login form present",
                                                                              ["Login form"]),),
               implications: Iterable[str] = ("asks for credentials",)) -> dict:
    return {
        "tagged_elements": [{"element_ref": r, "security_tags": t, "kb_refs": k} for r, t, k in tags],
        "implications": list(implications),
        "hypotheses": [{"category": c.value, "rationale": why, "element_refs": refs} for c, why, refs in hypotheses],
    }


def scores(confidences: dict[ThreatCategory, float]) -> dict:
    return {"scores": [{"category": c.value, "confidence": v, "evidence": [f"{c.value} cue"]}
                       for c, v in confidences.items()]}


def report(category: ThreatCategory, verdict: str, confidence: float, refs: list[str] | None = None) -> dict:
    evidence = [] if verdict == "rejected" else [{"description": f"{category.value} evidence",
                                                   "kb_refs": refs or []}]
    return {"category": category.value, "verdict": verdict, "confidence": confidence, "evidence": evidence}


def validation(kept: Iterable[tuple[ThreatCategory, float]]) -> dict:
    return {"classifications": [{"category": c.value, "confidence": v, "rationale": f"kept {c.value}"}
                                for c, v in kept],
            "notes": ""}


def entry(role: str, sample_id: str, response) -> dict:
    return {"role": role, "sample_id": sample_id, "response": response}


def sample_entries(sample_id: str, *, confidences: dict[ThreatCategory, float],
                   verdicts: dict[ThreatCategory, tuple[str, float]],
                   validations: list[list[tuple[ThreatCategory, float]]],
                   vision: dict | None = None, enrich: dict | None = None) -> list[dict]:
    """Entries for one full pipeline run of ``sample_id``.

    ``validations`` holds one reply per validation call, so a second item is
    consumed by the feedback round.
    """
    out = [
        entry("vision", sample_id, vision if vision is not None else extraction()),
        entry("enrichment", sample_id, enrich if enrich is not None else enrichment()),
        entry("classification", sample_id, scores(confidences)),
    ]
    for category, (verdict, conf) in verdicts.items():
        out.append(entry(f"specialist:{category.value}", sample_id, report(category, verdict, conf)))
    out += [entry("validation", sample_id, validation(v)) for v in validations]
    return out


class Instrumented(MockBackend):
    """Counts how many sends overlap in time."""

    def __init__(self, *a, hold: float = 0.005, **kw):
        super().__init__(*a, **kw)
        self.hold = hold
        self.in_flight = 0
        self.peak = 0
        self.guard = threading.Lock()

    def _send(self, req, messages):
        with self.guard:
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
        try:
            time.sleep(self.hold)
            return super()._send(req, messages)
        finally:
            with self.guard:
                self.in_flight -= 1
