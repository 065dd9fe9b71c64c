"""Run configuration: TOML or JSON files with strict key checking.

Example (TOML)::

    output_dir = "runs"
    seed = 0

    [corpus]
    path = "data/iu_xray.jsonl"
    split_ratio = 0.8
    min_frequency = 3          # 10 for MIMIC-CXR

    [backends.agent]
    kind = "remote"
    base_url = "http://localhost:8000"
    model = "deepseek-chat"

    [backends.vqa]
    kind = "remote"
    base_url = "http://localhost:8001"
    model = "llava-tuned"
    vision = true

    [orchestrator]
    max_questions = 3
    few_shot_k = 5
    few_shot_strategy = "similarity"
    embeddings = "data/clip_embeddings.jsonl"

A ``[sim]`` section replaces the corpus with a synthetic finding world and
lets backends use ``kind = "sim"``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


_BACKEND_KEYS = {
    "kind": str,
    "base_url": str,
    "model": str,
    "vision": bool,
    "script": str,
    "timeout": (int, float),
    "max_attempts": int,
    "backoff": (int, float),
    "max_in_flight": int,
}

SCHEMA: dict[str, Any] = {
    "output_dir": str,
    "seed": int,
    "parallelism": int,
    "corpus": {
        "path": str,
        "format": str,
        "split_ratio": float,
        "min_frequency": int,
        "infer_split": str,
        "curate_split": str,
        "name": str,
    },
    "sim": {
        "n_cases": int,
        "epsilon": float,
        "policy": str,
        "selector_fidelity": float,
        "seed": int,
        "world_seed": int,
        "vocabulary": list,
        "n_findings": list,
        "n_images": list,
    },
    "backends": {role: dict(_BACKEND_KEYS) for role in ("agent", "vqa", "caption", "select")},
    "orchestrator": {
        "max_questions": int,
        "few_shot_k": int,
        "few_shot_strategy": str,
        "embeddings": str,
        "temperature": float,
        "max_tokens": int,
    },
    "prompts": {"question_system": str, "caption_system": str, "select_system": str, "instruction": str},
    "curation": {
        "strategy": str,
        "format": str,
        "max_questions": int,
        "few_shot_k": int,
        "temperature": float,
    },
    "simulate": {
        "ablations": list,
        "n_cases": int,
        "max_questions": int,
        "grids": dict,
    },
}

DEFAULTS: dict[str, Any] = {
    "output_dir": "runs",
    "seed": 0,
    "parallelism": 1,
    "corpus": {"format": "jsonl", "split_ratio": 0.8, "min_frequency": 0, "infer_split": "test", "curate_split": "train"},
    "orchestrator": {"max_questions": 6, "few_shot_k": 5, "few_shot_strategy": "similarity", "temperature": 0.0, "max_tokens": 4096},
    "curation": {"strategy": "agent", "format": "vqa_jsonl", "few_shot_k": 5, "temperature": 0.1},
    "simulate": {},
}

# keys that change how a run executes but not what it produces
RUNTIME_KEYS = ("parallelism", "output_dir")


def _type_ok(value, expected) -> bool:
    if expected is float:
        expected = (int, float)
    types = expected if isinstance(expected, tuple) else (expected,)
    if isinstance(value, bool):
        return bool in types
    return isinstance(value, types)


def _check(data: dict, schema: dict, where: str) -> None:
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        if key not in schema:
            raise ConfigError(f"unknown config key {path!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} must be a table")
            _check(value, expected, path)
        elif not _type_ok(value, expected):
            raise ConfigError(f"{path} has the wrong type ({type(value).__name__})")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(data: dict) -> dict:
    _check(data, SCHEMA, "")
    return _merge(DEFAULTS, data)


def load_config(path: Optional[str]) -> dict:
    """Read, validate and default-fill a config file (``None`` gives defaults)."""
    if path is None:
        return validate({})
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        if p.suffix == ".json":
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    cfg = validate(data)
    base = p.parent
    # resolve relative file paths against the config's directory
    for section, key in (("corpus", "path"), ("orchestrator", "embeddings")):
        val = cfg.get(section, {}).get(key)
        if val and not Path(val).is_absolute():
            cfg[section][key] = str(base / val)
    for role in cfg.get("backends", {}).values():
        if role.get("script") and not Path(role["script"]).is_absolute():
            role["script"] = str(base / role["script"])
    return cfg


def snapshot(cfg: dict) -> dict:
    """Config without runtime-only keys, as recorded in ``run.json``."""
    return {k: v for k, v in cfg.items() if k not in RUNTIME_KEYS}


def config_hash(cfg: dict, *extra) -> str:
    blob = json.dumps([snapshot(cfg), list(extra)], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
