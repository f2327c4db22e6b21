from __future__ import annotations

import json

import pytest

from phishintent.config import (
    ConfigError,
    build_backend,
    load_config_file,
    merge_layers,
    pipeline_config,
    printable,
    resolve,
)
from phishintent.gateway import MockBackend, RemoteBackend


def write(tmp_path, text, mode=0o600, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    path.chmod(mode)
    return path


def test_defaults():
    cfg = merge_layers()
    assert cfg["pipeline"]["confidence_threshold"] == 0.5
    assert cfg["pipeline"]["top_k_max"] == 3
    assert cfg["backend"]["parallel_limit"] == 4


def test_layer_order_flags_beat_env_beat_file(tmp_path):
    path = write(tmp_path, "backend:\n  model_name: from-file\n  base_url: http://file\n  max_retries: 5\n")
    env = {"PHISHLLM_MODEL": "from-env", "PHISHLLM_API_BASE": "http://env"}
    cfg = resolve(path, {"backend": {"model_name": "from-flag", "base_url": None}}, environ=env)
    assert cfg["backend"]["model_name"] == "from-flag"
    assert cfg["backend"]["base_url"] == "http://env"
    assert cfg["backend"]["max_retries"] == 5


def test_json_config_accepted(tmp_path):
    path = write(tmp_path, json.dumps({"pipeline": {"top_k_max": 2}}), name="cfg.json")
    assert load_config_file(path) == {"pipeline": {"top_k_max": 2}}


@pytest.mark.parametrize("text, fragment", [
    ("nope:\n  a: 1\n", "unknown section"),
    ("pipeline:\n  thresh: 0.2\n", "unknown key"),
    ("- 1\n", "mapping"),
    ("backend: 3\n", "mapping"),
    ("a: [\n", "YAML"),
])
def test_bad_files(tmp_path, text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config_file(write(tmp_path, text))


def test_api_key_file_must_be_private(tmp_path):
    text = "backend:\n  api_key: sk-file\n"
    with pytest.raises(ConfigError, match="chmod 600"):
        load_config_file(write(tmp_path, text, mode=0o644))
    assert load_config_file(write(tmp_path, text, mode=0o600))["backend"]["api_key"] == "sk-file"


def test_world_readable_file_without_key_is_fine(tmp_path):
    assert load_config_file(write(tmp_path, "pipeline:\n  top_k_max: 1\n", mode=0o644))


def test_printable_drops_the_key_and_round_trips(tmp_path):
    cfg = resolve(None, {}, environ={"PHISHLLM_API_KEY": "sk-env"})
    assert cfg["backend"]["api_key"] == "sk-env"
    shown = printable(cfg)
    assert "api_key" not in shown["backend"]
    assert "sk-env" not in json.dumps(shown)
    again = resolve(write(tmp_path, json.dumps(shown), mode=0o644, name="shown.json"), {}, environ={})
    assert printable(again) == shown


def test_pipeline_config_validation():
    cfg = merge_layers({"pipeline": {"confidence_threshold": 1.5}})
    with pytest.raises(ConfigError):
        pipeline_config(cfg)
    assert pipeline_config(merge_layers()).top_k_max == 3


def test_build_backend(tmp_path):
    with pytest.raises(ConfigError, match="script"):
        build_backend(merge_layers({"backend": {"kind": "mock"}}))
    with pytest.raises(ConfigError, match="PHISHLLM_API_KEY"):
        build_backend(merge_layers())
    with pytest.raises(ConfigError, match="unknown backend"):
        build_backend(merge_layers({"backend": {"kind": "carrier-pigeon"}}))
    script = tmp_path / "s.json"
    script.write_text("[]", encoding="utf-8")
    assert isinstance(build_backend(merge_layers({"backend": {"kind": "mock", "script": str(script)}})), MockBackend)
    assert isinstance(build_backend(merge_layers({"backend": {"api_key": "k"}})), RemoteBackend)
