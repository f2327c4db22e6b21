"""Prompt templates, one file per agent role.

Each file holds a ``[system]`` section followed by a ``[user]`` section. Both
are jinja2 templates; an unknown placeholder is an error rather than an
empty string.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jinja2

from .core import CATEGORIES, PhishIntentError


class PromptError(PhishIntentError):
    pass


def template_name(role: str) -> str:
    if role.startswith("specialist:"):
        return "specialist_" + role.split(":", 1)[1]
    return role


ROLE_FILES = ("vision", "enrichment", "classification", "validation") + tuple(
    f"specialist_{c.value}" for c in CATEGORIES
)


def default_prompt_dir() -> Path:
    return Path(str(resources.files("phishintent") / "data" / "prompts"))


@dataclass(frozen=True)
class PromptPair:
    system: str
    user: str


class PromptLibrary:
    def __init__(self, prompt_dir: str | Path | None = None):
        self.prompt_dir = Path(prompt_dir) if prompt_dir else default_prompt_dir()
        self._env = jinja2.Environment(
            undefined=jinja2.StrictUndefined,
            keep_trailing_newline=False,
            autoescape=False,
        )
        self._templates: dict[str, tuple[jinja2.Template, jinja2.Template]] = {}
        for name in ROLE_FILES:
            path = self.prompt_dir / f"{name}.txt"
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as exc:
                raise PromptError(f"missing prompt template {path}") from exc
            system, user = _split_sections(text, path)
            self._templates[name] = (self._env.from_string(system), self._env.from_string(user))

    def render(self, role: str, **values: Any) -> PromptPair:
        system, user = self._templates[template_name(role)]
        try:
            return PromptPair(system.render(**values).strip(), user.render(**values).strip())
        except jinja2.UndefinedError as exc:
            raise PromptError(f"{role}: {exc}") from exc


def _split_sections(text: str, path: Path) -> tuple[str, str]:
    marker_sys, marker_user = "[system]", "[user]"
    if marker_sys not in text or marker_user not in text:
        raise PromptError(f"{path}: needs [system] and [user] sections")
    _, rest = text.split(marker_sys, 1)
    system, user = rest.split(marker_user, 1)
    return system.strip(), user.strip()
