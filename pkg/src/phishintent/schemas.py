"""JSON Schemas that each agent's reply must satisfy."""

from __future__ import annotations

from .core import CATEGORIES, ThreatCategory

CATEGORY_ENUM = [c.value for c in CATEGORIES]
ELEMENT_KINDS = ["form", "button", "link", "input", "logo", "popup", "other"]

_STRINGS = {"type": "array", "items": {"type": "string"}}
_CONFIDENCE = {"type": "number", "minimum": 0, "maximum": 1}

VISION = {
    "type": "object",
    "required": ["text_content", "interface_elements", "layout_summary", "domain_info"],
    "properties": {
        "text_content": _STRINGS,
        "interface_elements": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind", "label"],
                "properties": {
                    "kind": {"enum": ELEMENT_KINDS},
                    "label": {"type": "string"},
                    "detail": {"type": "string"},
                },
            },
        },
        "layout_summary": {"type": "string"},
        "domain_info": {"type": ["string", "null"]},
    },
}

ENRICHMENT = {
    "type": "object",
    "required": ["tagged_elements", "implications", "hypotheses"],
    "properties": {
        "tagged_elements": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["element_ref", "security_tags", "kb_refs"],
                "properties": {
                    "element_ref": {"type": "string", "minLength": 1},
                    "security_tags": _STRINGS,
                    "kb_refs": _STRINGS,
                },
            },
        },
        "implications": _STRINGS,
        "hypotheses": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["category", "rationale"],
                "properties": {
                    "category": {"enum": CATEGORY_ENUM},
                    "rationale": {"type": "string", "minLength": 1},
                    "element_refs": _STRINGS,
                    "kb_refs": _STRINGS,
                },
                "anyOf": [
                    {"required": ["element_refs"], "properties": {"element_refs": {"minItems": 1}}},
                    {"required": ["kb_refs"], "properties": {"kb_refs": {"minItems": 1}}},
                ],
            },
        },
    },
}

CLASSIFICATION = {
    "type": "object",
    "required": ["scores"],
    "properties": {
        "scores": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["category", "confidence"],
                "properties": {
                    "category": {"enum": CATEGORY_ENUM},
                    "confidence": _CONFIDENCE,
                    "evidence": _STRINGS,
                },
            },
        }
    },
}


def specialist(category: ThreatCategory) -> dict:
    return {
        "type": "object",
        "required": ["category", "verdict", "confidence", "evidence"],
        "properties": {
            "category": {"const": category.value},
            "verdict": {"enum": ["confirmed", "rejected", "uncertain"]},
            "confidence": _CONFIDENCE,
            "evidence": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["description"],
                    "properties": {
                        "description": {"type": "string", "minLength": 1},
                        "kb_refs": _STRINGS,
                    },
                },
            },
            "notes": {"type": "string"},
        },
        "if": {"properties": {"verdict": {"const": "confirmed"}}},
        "then": {"properties": {"evidence": {"minItems": 1}}},
    }


VALIDATION = {
    "type": "object",
    "required": ["classifications"],
    "properties": {
        "classifications": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["category", "confidence", "rationale"],
                "properties": {
                    "category": {"enum": CATEGORY_ENUM},
                    "confidence": _CONFIDENCE,
                    "rationale": {"type": "string", "minLength": 1},
                },
            },
        },
        "notes": {"type": "string"},
    },
}
