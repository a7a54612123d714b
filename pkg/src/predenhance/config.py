"""Experiment configuration: packaged YAML defaults, user file, ``key=value`` overrides."""

from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path

import yaml

from . import losses as L
from .enhancer import EnhancerConfig
from .predictor import PredictorConfig, ProgressiveSchedule

ENHANCER_KINDS = {
    "deblur_trconv": ("deblur", "transposed_conv"),
    "deblur_upsconv": ("deblur", "nn_upsample_then_conv"),
    "sr": ("super_resolve", "nn_upsample_then_conv"),
}
_RUN_KEYS = ("epochs", "pairs")


def default_config():
    text = resources.files("predenhance").joinpath("default_config.yaml").read_text()
    return yaml.safe_load(text)


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg, assignment):
    """Apply ``a.b.c=value``; the value is parsed as YAML (numbers, lists, null...)."""
    if "=" not in assignment:
        raise ValueError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise KeyError(f"unknown config section {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise KeyError(f"unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)
    return cfg


def load_config(path=None, overrides=(), seed=None):
    cfg = default_config()
    if path is not None:
        user = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(user, dict):
            raise ValueError(f"{path}: top level must be a mapping")
        cfg = deep_merge(cfg, user)
    for a in overrides:
        apply_override(cfg, a)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


# ---------------------------------------------------------------------------
# config sections -> typed objects

def dataset_kwargs(cfg):
    d = cfg["data"]
    return dict(n_clips=d["n_clips"], clip_length=d["clip_length"], source_size=d["source_size"],
                work_size=d["work_size"], n_in=d["n_in"], n_out=d["n_out"], stride=d["stride"],
                ratio=d["ratio"], seed=cfg["seed"], **d.get("shapes", {}))


def predictor_config(cfg):
    p = dict(cfg["predictor"])
    p["loss"] = L.LossConfig(**p.get("loss", {}))
    return PredictorConfig(n_in=cfg["data"]["n_in"], n_out=cfg["data"]["n_out"], seed=cfg["seed"], **p)


def schedule(cfg, pcfg):
    s = cfg["schedule"]
    epochs = s["epochs_per_stage"]
    return ProgressiveSchedule(ladder=pcfg.ladder,
                               epochs_per_stage=tuple(epochs) if isinstance(epochs, list) else epochs,
                               fade_fraction=s["fade_fraction"])


def enhancer_section(cfg, kind):
    if kind not in ENHANCER_KINDS:
        raise ValueError(f"unknown enhancer kind {kind!r}; choose from {sorted(ENHANCER_KINDS)}")
    return cfg["enhancer"]["sr" if kind == "sr" else "deblur"]


def enhancer_config(cfg, kind):
    task, upsampler = ENHANCER_KINDS[kind]
    sec = {k: v for k, v in enhancer_section(cfg, kind).items() if k not in _RUN_KEYS}
    if "loss" in sec:
        sec["loss"] = L.LossConfig(**sec["loss"])
    return EnhancerConfig(task=task, upsampler=upsampler, seed=cfg["seed"], **sec)
