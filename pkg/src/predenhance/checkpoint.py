"""Checkpoint containers, training logs and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path, kind, config, **payload):
    """Write a self-describing checkpoint (torch zip container)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "config_hash": config_hash(config),
        **payload,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, kind=None):
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {blob.get('format_version')!r}")
    if kind is not None and blob.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind!r} checkpoint, found {blob.get('kind')!r}")
    return blob


class CsvLog:
    """Append-only CSV log with a fixed header."""

    def __init__(self, path, fields):
        self.path = Path(path) if path is not None else None
        self.fields = list(fields)
        self.rows = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.fields)

    def write(self, **row):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row.get(k, "")) for k in self.fields])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def software_stamp():
    from . import __version__
    from . import kernels
    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "predenhance": __version__,
        "kernel_backend": kernels.BACKEND,
    }


def write_manifest(out_dir, command, config, seeds, checkpoints=(), started=None, extra=None):
    """Write ``manifest_<command>.json`` next to a command's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    now = time.time()
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "checkpoints": {str(p): file_hash(p) for p in checkpoints if Path(p).exists()},
        "software": software_stamp(),
        "wall_seconds": None if started is None else now - started,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / f"manifest_{command.replace('-', '_')}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def linear_decay(step, total, start=0):
    """Multiplier that is 1 until ``start`` then falls linearly to 0 at ``total``."""
    if total <= start:
        return 1.0
    if step <= start:
        return 1.0
    return max(0.0, 1.0 - (step - start) / (total - start))
