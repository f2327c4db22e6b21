"""Layered run configuration: defaults, then config file, then environment, then flags."""

from __future__ import annotations

import copy
import os
import stat
from pathlib import Path
from typing import Any, Mapping

import yaml

from .core import PhishIntentError
from .gateway import ENV_API_BASE, ENV_API_KEY, ENV_MODEL, Backend, BackendConfig, RemoteBackend, load_script
from .pipeline import PipelineConfig


class ConfigError(PhishIntentError):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "backend": {
        "kind": "remote",
        "script": None,
        "base_url": "https://api.openai.com/v1",
        "model_name": "gpt-4o",
        "api_key": None,
        "timeout_ms": 60_000,
        "max_retries": 2,
        "parallel_limit": 4,
    },
    "pipeline": {
        "top_k_max": 3,
        "confidence_threshold": 0.5,
        "feedback_max_rounds": 1,
        "specialist_parallel": True,
        "prompt_dir": None,
        "basic_limit": 8,
        "specialist_limit": 5,
        "temperature": 0.0,
        "max_output_tokens": 2048,
    },
    "paths": {
        "input": None,
        "kb": None,
        "out": None,
    },
}

SECRET_KEYS = {("backend", "api_key")}


def load_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for section, values in data.items():
        if section not in DEFAULTS:
            raise ConfigError(f"{path}: unknown section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: section {section!r} must be a mapping")
        for key in values:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
    if data.get("backend", {}).get("api_key"):
        mode = path.stat().st_mode
        if mode & (stat.S_IRWXG | stat.S_IRWXO):
            raise ConfigError(f"{path} holds an API key and must not be readable by group or others (chmod 600)")
    return data


def env_layer(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    backend = {}
    if environ.get(ENV_API_KEY):
        backend["api_key"] = environ[ENV_API_KEY]
    if environ.get(ENV_API_BASE):
        backend["base_url"] = environ[ENV_API_BASE]
    if environ.get(ENV_MODEL):
        backend["model_name"] = environ[ENV_MODEL]
    return {"backend": backend} if backend else {}


def merge_layers(*layers: Mapping[str, Any]) -> dict[str, dict[str, Any]]:
    """Later layers win; ``None`` values in a layer mean "not set"."""
    merged = copy.deepcopy(DEFAULTS)
    for layer in layers:
        for section, values in layer.items():
            for key, value in values.items():
                if value is not None:
                    merged[section][key] = value
    return merged


def resolve(config_path: str | Path | None, flags: Mapping[str, Any],
            environ: Mapping[str, str] | None = None) -> dict[str, dict[str, Any]]:
    file_layer = load_config_file(config_path) if config_path else {}
    return merge_layers(file_layer, env_layer(environ), flags)


def printable(config: Mapping[str, Mapping[str, Any]]) -> dict[str, dict[str, Any]]:
    """The effective config with secrets removed, loadable again via --config."""
    out = copy.deepcopy({s: dict(v) for s, v in config.items()})
    for section, key in SECRET_KEYS:
        out[section].pop(key, None)
    return out


def pipeline_config(config: Mapping[str, Mapping[str, Any]]) -> PipelineConfig:
    values = dict(config["pipeline"])
    if values.get("prompt_dir"):
        values["prompt_dir"] = Path(values["prompt_dir"])
    try:
        return PipelineConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid pipeline settings: {exc}") from exc


def build_backend(config: Mapping[str, Mapping[str, Any]]) -> Backend:
    b = config["backend"]
    if b["kind"] == "mock":
        if not b.get("script"):
            raise ConfigError("the mock backend needs a script (--script)")
        return load_script(b["script"], max_retries=b["max_retries"], parallel_limit=b["parallel_limit"])
    if b["kind"] != "remote":
        raise ConfigError(f"unknown backend kind {b['kind']!r}")
    if not b.get("api_key"):
        raise ConfigError(f"the remote backend needs an API key in ${ENV_API_KEY} or the config file")
    return RemoteBackend(
        BackendConfig(
            base_url=b["base_url"],
            model_name=b["model_name"],
            api_key=b["api_key"],
            timeout_ms=b["timeout_ms"],
            max_retries=b["max_retries"],
            parallel_limit=b["parallel_limit"],
        )
    )
