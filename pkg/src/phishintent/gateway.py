"""Vision-capable chat completion backends with validated JSON output.

Two backends share one retry loop in :meth:`Backend.complete`:

* :class:`RemoteBackend` speaks the OpenAI-compatible ``/chat/completions``
  protocol over HTTP.
* :class:`MockBackend` replays a JSON script, for deterministic offline runs.

Transport failures and malformed model output draw on the same budget of
``1 + max_retries`` attempts. Malformed output is answered with a repair
message quoting the validation error.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import httpx
import jsonschema

from .core import CATEGORIES, PhishIntentError, SchemaError

log = logging.getLogger(__name__)

ENV_API_KEY = "PHISHLLM_API_KEY"
ENV_API_BASE = "PHISHLLM_API_BASE"
ENV_MODEL = "PHISHLLM_MODEL"

BASE_ROLES = ("vision", "enrichment", "classification", "validation")
SPECIALIST_ROLES = tuple(f"specialist:{c.value}" for c in CATEGORIES)
AGENT_ROLES = BASE_ROLES + SPECIALIST_ROLES

REPAIR_INSTRUCTION = (
    "Your previous reply could not be accepted: {error}\n"
    "Reply again with a single JSON object that satisfies the schema. "
    "Do not add any text outside the JSON."
)


class GatewayError(PhishIntentError):
    pass


class TransportError(GatewayError):
    pass


class AuthError(GatewayError):
    pass


class Timeout(GatewayError, TimeoutError):
    pass


class RequestRejected(GatewayError):
    """Non-retryable HTTP 4xx other than an authentication failure."""


class SchemaViolation(GatewayError):
    def __init__(self, role: str, attempts: int, reason: str, raw_text: str = ""):
        super().__init__(f"{role}: no valid output after {attempts} attempt(s): {reason}")
        self.role = role
        self.attempts = attempts
        self.reason = reason
        self.raw_text = raw_text


class UnscriptedCall(GatewayError):
    def __init__(self, role: str, sample_id: str | None):
        super().__init__(f"no scripted response for role={role!r} sample_id={sample_id!r}")
        self.key = (role, sample_id)


@dataclass(frozen=True)
class ImagePayload:
    data: bytes
    media_type: str

    def data_url(self) -> str:
        return f"data:{self.media_type};base64," + base64.b64encode(self.data).decode("ascii")


@dataclass(frozen=True)
class VisionRequest:
    agent_role: str
    system_prompt: str
    user_prompt: str
    response_schema: Mapping[str, Any]
    image: ImagePayload | None = None
    temperature: float = 0.0
    max_output_tokens: int = 2048
    # Routing metadata for scripted backends; never sent over the wire.
    sample_id: str | None = None

    def __post_init__(self) -> None:
        if self.agent_role not in AGENT_ROLES:
            raise ValueError(f"unknown agent role {self.agent_role!r}")
        if (self.image is not None) != (self.agent_role == "vision"):
            raise ValueError("an image is attached to vision requests and only to them")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    def digest(self) -> str:
        h = hashlib.sha256()
        for part in (self.agent_role, self.system_prompt, self.user_prompt):
            h.update(part.encode("utf-8"))
            h.update(b"\0")
        h.update(json.dumps(self.response_schema, sort_keys=True).encode("utf-8"))
        if self.image is not None:
            h.update(hashlib.sha256(self.image.data).digest())
        return "sha256:" + h.hexdigest()


@dataclass(frozen=True)
class VisionResponse:
    raw_text: str
    parsed_json: Any
    usage: dict[str, int]
    latency_ms: int
    attempt_count: int


@dataclass(frozen=True)
class BackendConfig:
    base_url: str
    model_name: str
    api_key: str = field(default="", repr=False)
    timeout_ms: int = 60_000
    max_retries: int = 2
    parallel_limit: int = 4

    def __post_init__(self) -> None:
        if self.parallel_limit < 1:
            raise ValueError("parallel_limit must be at least 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")

    @classmethod
    def from_env(cls, **overrides: Any) -> BackendConfig:
        values: dict[str, Any] = {
            "base_url": os.environ.get(ENV_API_BASE, "https://api.openai.com/v1"),
            "model_name": os.environ.get(ENV_MODEL, "gpt-4o"),
            "api_key": os.environ.get(ENV_API_KEY, ""),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class RawReply:
    text: str
    usage: dict[str, int] = field(default_factory=dict)
    latency_ms: int = 0


_FENCE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.DOTALL)


def parse_json_output(text: str) -> Any:
    """Decode a model reply, tolerating a surrounding markdown code fence."""
    stripped = text.strip()
    match = _FENCE.match(stripped)
    if match:
        stripped = match.group(1)
    try:
        return json.loads(stripped)
    except json.JSONDecodeError as exc:
        raise ValueError(f"reply is not valid JSON ({exc.msg} at position {exc.pos})") from None


def schema_errors(instance: Any, schema: Mapping[str, Any]) -> list[str]:
    validator = jsonschema.Draft202012Validator(schema)
    return [
        f"{err.json_path}: {err.message}"
        for err in sorted(validator.iter_errors(instance), key=lambda e: e.json_path)
    ]


def build_messages(request: VisionRequest) -> list[dict[str, Any]]:
    system = (
        request.system_prompt.rstrip()
        + "\n\nRespond with one JSON object that conforms to this JSON Schema:\n"
        + json.dumps(request.response_schema, sort_keys=True)
    )
    if request.image is None:
        user: Any = request.user_prompt
    else:
        user = [
            {"type": "text", "text": request.user_prompt},
            {"type": "image_url", "image_url": {"url": request.image.data_url()}},
        ]
    return [{"role": "system", "content": system}, {"role": "user", "content": user}]


class Backend:
    """Common retry, repair and admission-control logic.

    Subclasses implement :meth:`_send`, performing one model round trip.
    """

    def __init__(
        self,
        *,
        max_retries: int = 2,
        parallel_limit: int = 4,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if parallel_limit < 1:
            raise ValueError("parallel_limit must be at least 1")
        if max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        self.max_retries = max_retries
        self.parallel_limit = parallel_limit
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(parallel_limit)

    def _send(self, request: VisionRequest, messages: list[dict[str, Any]]) -> RawReply:
        raise NotImplementedError

    def backoff_delay(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * 2 ** (attempt - 1))

    def complete(self, request: VisionRequest) -> VisionResponse:
        messages = build_messages(request)
        usage = {"input_tokens": 0, "output_tokens": 0}
        latency = 0
        attempts = 0
        while True:
            attempts += 1
            try:
                with self._slots:
                    reply = self._send(request, messages)
            except (TransportError, Timeout) as exc:
                if attempts > self.max_retries:
                    raise
                log.warning("%s: attempt %d failed (%s), retrying", request.agent_role, attempts, exc)
                self._sleep(self.backoff_delay(attempts))
                continue
            latency += reply.latency_ms
            for key in usage:
                usage[key] += int(reply.usage.get(key, 0))

            try:
                parsed = parse_json_output(reply.text)
                problems = schema_errors(parsed, request.response_schema)
                if problems:
                    raise ValueError("; ".join(problems[:5]))
            except ValueError as exc:
                if attempts > self.max_retries:
                    raise SchemaViolation(request.agent_role, attempts, str(exc), reply.text) from None
                log.info("%s: invalid output on attempt %d: %s", request.agent_role, attempts, exc)
                messages = messages + [
                    {"role": "assistant", "content": reply.text},
                    {"role": "user", "content": REPAIR_INSTRUCTION.format(error=exc)},
                ]
                continue
            return VisionResponse(
                raw_text=reply.text,
                parsed_json=parsed,
                usage=usage,
                latency_ms=latency,
                attempt_count=attempts,
            )


class RemoteBackend(Backend):
    """Client for an OpenAI-compatible chat completions endpoint."""

    def __init__(
        self,
        config: BackendConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        backoff_base: float = 0.5,
    ):
        super().__init__(
            max_retries=config.max_retries,
            parallel_limit=config.parallel_limit,
            sleep=sleep,
            backoff_base=backoff_base,
        )
        self.config = config
        headers = {"Content-Type": "application/json"}
        if config.api_key:
            headers["Authorization"] = f"Bearer {config.api_key}"
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/") + "/",
            headers=headers,
            timeout=config.timeout_ms / 1000.0,
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def _send(self, request: VisionRequest, messages: list[dict[str, Any]]) -> RawReply:
        payload = {
            "model": self.config.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        started = time.monotonic()
        try:
            resp = self._client.post("chat/completions", json=payload)
        except httpx.TimeoutException as exc:
            raise Timeout(f"request timed out after {self.config.timeout_ms} ms") from exc
        except httpx.TransportError as exc:
            raise TransportError(f"transport failure: {exc}") from exc
        elapsed = int((time.monotonic() - started) * 1000)

        if resp.status_code in (401, 403):
            raise AuthError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise RequestRejected(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response body: {resp.text[:200]}") from exc
        if isinstance(content, list):
            content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
        raw_usage = body.get("usage") or {}
        usage = {
            "input_tokens": int(raw_usage.get("prompt_tokens", 0) or 0),
            "output_tokens": int(raw_usage.get("completion_tokens", 0) or 0),
        }
        return RawReply(text=content or "", usage=usage, latency_ms=elapsed)


@dataclass(frozen=True)
class ScriptEntry:
    role: str
    sample_id: str
    response: Any
    latency_ms: int = 0

    @property
    def text(self) -> str:
        if isinstance(self.response, str):
            return self.response
        return json.dumps(self.response, sort_keys=True)


class MockBackend(Backend):
    """Replays scripted responses keyed by (agent role, sample id).

    Lookup order for a call is ``(role, id)``, ``(role, "*")``, ``("*", id)``,
    ``("*", "*")``; the first key with any entries wins. Entries under a key
    are consumed in script order and the last one repeats once the others
    are used up. A call with no matching key raises :class:`UnscriptedCall`.
    """

    def __init__(self, entries: list[ScriptEntry] | None = None, *, max_retries: int = 2, parallel_limit: int = 4):
        super().__init__(max_retries=max_retries, parallel_limit=parallel_limit, sleep=lambda _: None)
        self._queues: dict[tuple[str, str], list[ScriptEntry]] = {}
        for entry in entries or ():
            self._queues.setdefault((entry.role, entry.sample_id), []).append(entry)
        self._cursor: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()
        self.calls: list[tuple[str, str | None]] = []

    def _next_entry(self, role: str, sample_id: str | None) -> ScriptEntry:
        sid = sample_id if sample_id is not None else "*"
        with self._lock:
            self.calls.append((role, sample_id))
            for key in ((role, sid), (role, "*"), ("*", sid), ("*", "*")):
                queue = self._queues.get(key)
                if queue:
                    pos = self._cursor.get(key, 0)
                    self._cursor[key] = pos + 1
                    return queue[min(pos, len(queue) - 1)]
        raise UnscriptedCall(role, sample_id)

    def _send(self, request: VisionRequest, messages: list[dict[str, Any]]) -> RawReply:
        entry = self._next_entry(request.agent_role, request.sample_id)
        text = entry.text
        prompt_words = len(request.system_prompt.split()) + len(request.user_prompt.split())
        return RawReply(
            text=text,
            usage={"input_tokens": prompt_words, "output_tokens": len(text.split())},
            latency_ms=entry.latency_ms,
        )


def parse_script(data: Any) -> list[ScriptEntry]:
    if not isinstance(data, list):
        raise SchemaError("$", "a mock script is a JSON array of entries")
    entries = []
    for i, item in enumerate(data):
        where = f"$[{i}]"
        if not isinstance(item, dict):
            raise SchemaError(where, "entry must be an object")
        if "response" not in item:
            raise SchemaError(where, "entry needs a 'response'")
        role = item.get("role", "*")
        sample_id = item.get("sample_id", "*")
        if not isinstance(role, str) or (role != "*" and role not in AGENT_ROLES):
            raise SchemaError(f"{where}.role", f"unknown agent role {role!r}")
        if not isinstance(sample_id, str) or not sample_id:
            raise SchemaError(f"{where}.sample_id", "sample_id must be a nonempty string")
        latency = item.get("latency_ms", 0)
        if not isinstance(latency, int) or latency < 0:
            raise SchemaError(f"{where}.latency_ms", "latency_ms must be a non-negative integer")
        entries.append(ScriptEntry(role, sample_id, item["response"], latency))
    return entries


def load_script(path: str | Path, *, max_retries: int = 2, parallel_limit: int = 4) -> MockBackend:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return MockBackend([], max_retries=max_retries, parallel_limit=parallel_limit)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from exc
    return MockBackend(parse_script(data), max_retries=max_retries, parallel_limit=parallel_limit)
