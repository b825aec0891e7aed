"""Experiment configuration: strict JSON schema with defaults filled and
unknown keys rejected by their full path."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .data import (DEFAULT_SOURCE_ANGLES, DEFAULT_TARGET_ANGLES, DataError)
from .meta import PHI_SIGN_MODES, TRAIN_LABEL_MODES, TrainConfig
from .ttg import METHODS, TtgConfig


class ConfigError(ValueError):
    """Config file missing, unparseable, or violating the schema."""


@dataclass(frozen=True)
class BlobSpec:
    kind: str = "blobs"
    classes: int = 3
    dim: int = 2
    n_per_class: int = 60
    eval_n_per_class: int = 200
    noise_sigma: float = 0.5
    source_angles: tuple = DEFAULT_SOURCE_ANGLES
    target_angles: tuple = DEFAULT_TARGET_ANGLES


@dataclass(frozen=True)
class IdxSpec:
    kind: str = "idx"
    images: str = ""
    labels: str = ""
    train_per_domain: int = 6000
    eval_per_target: int = 1000
    source_angles: tuple = DEFAULT_SOURCE_ANGLES
    target_angles: tuple = DEFAULT_TARGET_ANGLES


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple = (256, 128)
    phi_hidden: tuple = (128, 128)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: BlobSpec | IdxSpec = field(default_factory=BlobSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    ttg: TtgConfig = field(default_factory=TtgConfig)
    seeds: tuple = (0,)
    out_dir: str | None = None


def _take(raw: dict, path: str, defaults: dict) -> dict:
    """Merge raw keys over defaults, rejecting unknown keys with their path."""
    merged = dict(defaults)
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {path}{key!r}")
        merged[key] = value
    return merged


_TRAIN_DEFAULTS = {
    "lambda1": 1e-4, "lambda2": 5e-5, "lambda3": 1e-4,
    "lr_meta_source": 1e-2, "batch_size": 70, "n_iter": 100, "k_ms": 1,
    "mc_w": 1, "mc_y": 1, "label_mode": "gumbel_st", "gumbel_tau": 1.0,
    "second_order": True, "phi_meta_sign": "descent", "checkpoint_every": 0,
}

_TTG_DEFAULTS = {
    "method": "vnl", "lr": 1e-4, "batch_size": 20, "mc_predict": 1,
    "episodic_reset": False,
}

_BLOB_DEFAULTS = {
    "kind": "blobs", "classes": 3, "dim": 2, "n_per_class": 60,
    "eval_n_per_class": 200, "noise_sigma": 0.5,
    "source_angles": list(DEFAULT_SOURCE_ANGLES),
    "target_angles": list(DEFAULT_TARGET_ANGLES),
}

_IDX_DEFAULTS = {
    "kind": "idx", "images": None, "labels": None,
    "train_per_domain": 6000, "eval_per_target": 1000,
    "source_angles": list(DEFAULT_SOURCE_ANGLES),
    "target_angles": list(DEFAULT_TARGET_ANGLES),
}


def _parse_dataset(raw: dict) -> BlobSpec | IdxSpec:
    kind = raw.get("kind", "blobs")
    if kind == "blobs":
        d = _take(raw, "dataset.", _BLOB_DEFAULTS)
        return BlobSpec(kind, int(d["classes"]), int(d["dim"]),
                        int(d["n_per_class"]), int(d["eval_n_per_class"]),
                        float(d["noise_sigma"]),
                        tuple(float(a) for a in d["source_angles"]),
                        tuple(float(a) for a in d["target_angles"]))
    if kind == "idx":
        d = _take(raw, "dataset.", _IDX_DEFAULTS)
        if not d["images"] or not d["labels"]:
            raise ConfigError("dataset.images and dataset.labels are required"
                              " for kind 'idx'")
        for key in ("images", "labels"):
            if not os.path.exists(d[key]):
                raise DataError(f"dataset.{key}: no such file {d[key]!r}")
        return IdxSpec(kind, d["images"], d["labels"],
                       int(d["train_per_domain"]), int(d["eval_per_target"]),
                       tuple(float(a) for a in d["source_angles"]),
                       tuple(float(a) for a in d["target_angles"]))
    raise ConfigError(f"unknown key dataset.kind value {kind!r}")


def parse_config_dict(raw: dict) -> ExperimentConfig:
    top = _take(raw, "", {"dataset": {}, "model": {}, "train": {}, "ttg": {},
                          "seeds": [0], "out_dir": None})
    dataset = _parse_dataset(dict(top["dataset"]))
    m = _take(dict(top["model"]), "model.",
              {"hidden": [256, 128], "phi_hidden": [128, 128]})
    model = ModelSpec(tuple(int(h) for h in m["hidden"]),
                      tuple(int(h) for h in m["phi_hidden"]))
    t = _take(dict(top["train"]), "train.", _TRAIN_DEFAULTS)
    if t["label_mode"] not in TRAIN_LABEL_MODES:
        raise ConfigError(f"train.label_mode: unknown mode {t['label_mode']!r}")
    if t["phi_meta_sign"] not in PHI_SIGN_MODES:
        raise ConfigError(f"train.phi_meta_sign: unknown mode"
                          f" {t['phi_meta_sign']!r}")
    g = _take(dict(top["ttg"]), "ttg.", _TTG_DEFAULTS)
    if g["method"] not in METHODS:
        raise ConfigError(f"ttg.method: unknown method {g['method']!r}")
    seeds = tuple(int(s) for s in top["seeds"])
    if not seeds:
        raise ConfigError("seeds: must not be empty")
    try:
        train = TrainConfig(
            lambda1=float(t["lambda1"]), lambda2=float(t["lambda2"]),
            lambda3=float(t["lambda3"]),
            lr_meta_source=float(t["lr_meta_source"]),
            batch_size=int(t["batch_size"]), n_iter=int(t["n_iter"]),
            k_ms=int(t["k_ms"]), mc_w=int(t["mc_w"]), mc_y=int(t["mc_y"]),
            label_mode=t["label_mode"], gumbel_tau=float(t["gumbel_tau"]),
            second_order=bool(t["second_order"]),
            phi_meta_sign=t["phi_meta_sign"],
            checkpoint_every=int(t["checkpoint_every"]))
        ttg_cfg = TtgConfig(method=g["method"], lr=float(g["lr"]),
                            batch_size=int(g["batch_size"]),
                            mc_predict=int(g["mc_predict"]),
                            episodic_reset=bool(g["episodic_reset"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(dataset, model, train, ttg_cfg, seeds,
                            top["out_dir"])


def parse_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return parse_config_dict(raw)
