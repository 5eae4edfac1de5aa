"""Run configuration: a YAML key tree with per-profile defaults.

Keys
----
profile                  synthetic | real
seed                     int, drives every RNG of a run
method                   acqg_full | acqg_ac | acqg_ac_qs | cnn_lstm | retrieval
paths.out                output directory (env DISCRIMQ_OUT wins over the file)
paths.corpus             directory holding regions.jsonl / pairs.jsonl (default <out>/data)
paths.word_vectors       optional ``word v1 v2 ...`` file for a fixed attribute embedding
world.*                  synthetic generator settings (see synth.WorldConfig)
corpus.feature_dim       region/image feature length D (null: infer from data)
corpus.min_freq          question vocabulary cutoff
corpus.split_ratios      train/val/test image fractions
corpus.max_question_len  generated tokens per question, end marker included
attributes.*             K, answer_top_n, hidden, epochs, batch_size, lr
vqa.*                    d_emb, hidden, epochs, batch_size, lr
qgen.*, baseline.*       d_emb, d_att, hidden, layers, epochs, batch_size, lr, clip
selector.*               alpha, beta, top_k, mode, normalize, tune, grid, min_gain
beam.*                   width, max_len
retrieval.k              neighbours for the retrieval baseline
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

METHODS = ("retrieval", "cnn_lstm", "acqg_ac", "acqg_ac_qs", "acqg_full")

_QGEN = {"d_emb": 32, "d_att": 64, "hidden": 32, "layers": 2, "epochs": 30,
         "batch_size": 50, "lr": 0.003, "clip": 5.0}

SYNTHETIC_DEFAULTS: dict = {
    "profile": "synthetic",
    "seed": 7,
    "method": "acqg_full",
    "paths": {"out": "runs/synthetic", "corpus": None, "word_vectors": None},
    "world": {
        "noise": 0.05,
        "n_images": 700,
        "n_pairs": 600,
        "max_regions_per_image": 3,
        "questions_per_region": [2, 4],
    },
    "corpus": {"feature_dim": None, "min_freq": 1, "split_ratios": [0.7, 0.15, 0.15],
               "max_question_len": 15},
    "attributes": {"K": 612, "answer_top_n": 1000, "hidden": 64, "epochs": 50,
                   "batch_size": 50, "lr": 0.001},
    "vqa": {"d_emb": 32, "hidden": 32, "epochs": 15, "batch_size": 50, "lr": 0.003},
    "qgen": dict(_QGEN),
    "baseline": dict(_QGEN),
    "selector": {"alpha": 1.0, "beta": 1.0, "top_k": 5, "mode": "exact", "normalize": False,
                 "tune": True, "grid": [0.0, 0.25, 0.5, 1.0, 2.0], "min_gain": 0.005},
    "beam": {"width": 5, "max_len": 15},
    "retrieval": {"k": 100},
}

_REAL_QGEN = {"d_emb": 512, "d_att": 64, "hidden": 512, "layers": 2, "epochs": 30,
              "batch_size": 50, "lr": 0.001, "clip": 5.0}

REAL_OVERRIDES: dict = {
    "profile": "real",
    "paths": {"out": "runs/real"},
    "corpus": {"feature_dim": 2048, "min_freq": 5},
    "attributes": {"hidden": 512, "epochs": 100, "lr": 0.001},
    "vqa": {"d_emb": 300, "hidden": 512, "epochs": 10, "lr": 0.001},
    "qgen": dict(_REAL_QGEN),
    "baseline": dict(_REAL_QGEN),
    "selector": {"tune": False},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, prefix: str = "", strict: bool = True) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if strict and key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base.get(key), dict) and key != "world":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be a mapping")
            out[key] = _merge(base[key], value, path + ".", strict)
        elif isinstance(base.get(key), dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be a mapping")
            out[key] = {**base[key], **value}
        else:
            out[key] = copy.deepcopy(value)
    return out


def defaults(profile: str = "synthetic") -> dict:
    if profile == "synthetic":
        return copy.deepcopy(SYNTHETIC_DEFAULTS)
    if profile == "real":
        return _merge(SYNTHETIC_DEFAULTS, REAL_OVERRIDES)
    raise ConfigError(f"unknown profile {profile!r}")


@dataclass
class RunConfig:
    data: dict

    def get(self, dotted: str):
        node = self.data
        for part in dotted.split("."):
            node = node[part]
        return node

    def section(self, name: str) -> dict:
        return dict(self.data[name])

    @property
    def out_dir(self) -> Path:
        return Path(self.data["paths"]["out"])

    @property
    def corpus_dir(self) -> Path:
        c = self.data["paths"]["corpus"]
        return Path(c) if c else self.out_dir / "data"

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True, default_flow_style=False)

    def echo(self, stage: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"config.{stage}.yaml"
        path.write_text(self.to_yaml(), encoding="utf-8")
        return path


def dotted_update(dotted: str, value) -> dict:
    """``a.b.c`` + value -> {"a": {"b": {"c": value}}}."""
    parts = dotted.split(".")
    update: dict = {}
    node = update
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return update


def load_config(path=None, overrides: dict | None = None, env: dict | None = None) -> RunConfig:
    """File values over profile defaults, then command-line overrides, then DISCRIMQ_OUT."""
    env = os.environ if env is None else env
    file_data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text(encoding="utf-8"))
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        file_data = loaded or {}
    overrides = overrides or {}
    profile = overrides.get("profile", file_data.get("profile", "synthetic"))
    data = _merge(defaults(profile), file_data)
    data = _merge(data, overrides)
    if env.get("DISCRIMQ_OUT"):
        data["paths"]["out"] = env["DISCRIMQ_OUT"]
    validate(data)
    return RunConfig(data)


def validate(data: dict) -> None:
    if data["method"] not in METHODS:
        raise ConfigError(f"unknown method {data['method']!r}; expected one of {', '.join(METHODS)}")
    ratios = data["corpus"]["split_ratios"]
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("corpus.split_ratios must be three fractions summing to 1")
    sel = data["selector"]
    if sel["alpha"] < 0 or sel["beta"] < 0:
        raise ConfigError("selector.alpha and selector.beta must be non-negative")
    if sel["top_k"] < 1:
        raise ConfigError("selector.top_k must be at least 1")
    if sel["mode"] not in ("exact", "pruned"):
        raise ConfigError("selector.mode must be exact or pruned")
    if sel["min_gain"] < 0:
        raise ConfigError("selector.min_gain must be non-negative")
    if data["beam"]["width"] < 1 or data["beam"]["max_len"] < 1:
        raise ConfigError("beam.width and beam.max_len must be at least 1")
    if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
        raise ConfigError("seed must be an integer")
    for key in ("corpus", "word_vectors"):
        p = data["paths"][key]
        if p and (key == "word_vectors" or data["profile"] == "real") and not Path(p).exists():
            raise ConfigError(f"paths.{key} does not exist: {p}")
