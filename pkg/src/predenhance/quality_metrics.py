"""Full-reference frame metrics (MSE, PSNR, SSIM) and per-step reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .datakit import luma

METRICS = ("mse", "psnr", "ssim")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_value=1.0):
    """PSNR in dB; ``math.inf`` for identical frames."""
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / err)


def psnr_from_mse(err, max_value=1.0):
    return math.inf if err == 0.0 else 10.0 * math.log10(max_value ** 2 / err)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a, b, window=11, k1=0.01, k2=0.03, L=1.0, sigma=1.5):
    """Mean SSIM over all valid Gaussian-weighted windows of the luma images."""
    a, b = _pair(a, b)
    if a.ndim == 3:
        a, b = luma(a), luma(b)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"frame {a.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    filt = kernels.gaussian_filter_valid
    mu_a, mu_b = filt(a, g), filt(b, g)
    var_a = filt(a * a, g) - mu_a ** 2
    var_b = filt(b * b, g) - mu_b ** 2
    cov = filt(a * b, g) - mu_a * mu_b
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def frame_metrics(pred, ref, max_value=1.0):
    err = mse(pred, ref)
    return {"mse": err, "psnr": psnr_from_mse(err, max_value), "ssim": ssim(pred, ref, L=max_value)}


@dataclass
class MetricReport:
    """Per-step means over a test set plus step-averaged (summary-table) values.

    ``psnr_of_mean_mse`` is ``10 log10(1 / mean MSE)`` for each step and for
    the average, reported next to the mean of per-sequence PSNR values.
    """

    label: str
    per_step: dict  # step (1-based) -> {"mse", "psnr", "ssim", "psnr_of_mean_mse"}
    averages: dict
    n_sequences: int
    per_sequence: list = field(default_factory=list, repr=False)

    def rows(self):
        for step in sorted(self.per_step):
            m = self.per_step[step]
            yield {"pipeline": self.label, "step": step, "mse": m["mse"], "psnr": m["psnr"], "ssim": m["ssim"]}

    def to_dict(self):
        return {
            "label": self.label,
            "n_sequences": self.n_sequences,
            "per_step": {str(k): v for k, v in sorted(self.per_step.items())},
            "averages": self.averages,
        }


def _mean(values):
    return float(np.mean(values)) if len(values) else math.nan


def per_frame_report(predicted, reference, label="", max_value=1.0):
    """Evaluate ``(N, T, H, W, C)`` predicted sequences against references.

    Per-step values are means of per-sequence metrics; ``averages`` are means
    over steps of those per-step values.
    """
    predicted = np.asarray(predicted)
    reference = np.asarray(reference)
    if predicted.shape[:2] != reference.shape[:2]:
        raise ValueError(f"sequence count/length mismatch: {predicted.shape[:2]} vs {reference.shape[:2]}")
    if predicted.shape != reference.shape:
        raise ValueError(f"frame shapes differ: {predicted.shape[2:]} vs {reference.shape[2:]}")
    n, t = predicted.shape[:2]
    if n == 0:
        raise ValueError("empty test set")
    per_seq = [[frame_metrics(predicted[i, s], reference[i, s], max_value) for s in range(t)] for i in range(n)]
    return report_from_values(per_seq, label, max_value)


def report_from_values(per_seq, label="", max_value=1.0):
    """Build a report from ``per_seq[i][step-1] = {"mse", "psnr", "ssim"}``."""
    n = len(per_seq)
    t = len(per_seq[0])
    per_step = {}
    for s in range(t):
        vals = {k: [per_seq[i][s][k] for i in range(n)] for k in METRICS}
        entry = {k: _mean(vals[k]) for k in METRICS}
        entry["psnr_of_mean_mse"] = psnr_from_mse(entry["mse"], max_value)
        per_step[s + 1] = entry
    averages = {k: _mean([per_step[s][k] for s in per_step]) for k in METRICS}
    averages["psnr_of_mean_mse"] = psnr_from_mse(averages["mse"], max_value)
    return MetricReport(label, per_step, averages, n, per_seq)


def merge_reports(a, b, label=None):
    """Report over the concatenation of the two underlying test sets."""
    if not a.per_sequence or not b.per_sequence:
        raise ValueError("merging needs per-sequence values")
    return report_from_values(a.per_sequence + b.per_sequence, label or a.label)


def write_metrics_csv(reports, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["pipeline", "step", "mse", "psnr", "ssim"])
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


def write_metrics_json(reports, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {rep.label: rep.to_dict() for rep in reports}
    path.write_text(json.dumps(clean_json(blob), indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def clean_json(obj):
    """Replace non-finite floats with the strings 'inf', '-inf', 'nan'."""
    if isinstance(obj, dict):
        return {k: clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean_json(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def read_metrics_json(path):
    blob = json.loads(Path(path).read_text())
    out = []
    for label, d in blob.items():
        per_step = {int(k): {m: float(x) for m, x in v.items()} for k, v in d["per_step"].items()}
        averages = {m: float(x) for m, x in d["averages"].items()}
        out.append(MetricReport(label, per_step, averages, d["n_sequences"]))
    return out
