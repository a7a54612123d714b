"""Prediction pipelines (predictor, optionally followed by a frame enhancer) and reporting."""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import detection_eval as det
from . import quality_metrics as qm
from .enhancer import EnhancerState, enhance, load_enhancer
from .predictor import PredictorState, load_predictor, predict

log = logging.getLogger(__name__)

PIPELINE_LABELS = ("plain", "deblur_trconv", "deblur_upsconv", "sr")
_EXPECTED = {
    "deblur_trconv": ("deblur", "transposed_conv"),
    "deblur_upsconv": ("deblur", "nn_upsample_then_conv"),
    "sr": ("super_resolve", None),
}


class ConfigurationError(ValueError):
    """Checkpoints or pipeline settings that cannot work together."""


@dataclass
class PipelineSpec:
    label: str
    predictor: object  # checkpoint path or PredictorState
    enhancer: object = None  # checkpoint path or EnhancerState; None for "plain"

    def __post_init__(self):
        if self.label not in PIPELINE_LABELS:
            raise ConfigurationError(f"unknown pipeline label {self.label!r}")
        if (self.label == "plain") != (self.enhancer is None):
            raise ConfigurationError(f"pipeline {self.label!r}: enhancer must be given iff label != 'plain'")


def _load(spec):
    pred = spec.predictor if isinstance(spec.predictor, PredictorState) else load_predictor(spec.predictor)
    enh = spec.enhancer
    if enh is not None and not isinstance(enh, EnhancerState):
        enh = load_enhancer(enh)
    if enh is not None:
        task, up = _EXPECTED[spec.label]
        cfg = enh.config
        if cfg.task != task or (up is not None and cfg.upsampler != up):
            raise ConfigurationError(
                f"pipeline {spec.label!r} needs a {task} enhancer"
                + (f" with {up}" if up else "") + f", checkpoint has {cfg.task}/{cfg.upsampler}")
        if cfg.channels != pred.config.channels:
            raise ConfigurationError(
                f"channel mismatch: predictor {pred.config.channels}, enhancer {cfg.channels}")
    return pred, enh


def resolve(spec):
    """Load checkpoints once; returns a spec holding live states."""
    pred, enh = _load(spec)
    return PipelineSpec(spec.label, pred, enh)


def run_pipeline(spec, inputs):
    """Predict ``(N, n_out, ...)`` frames from ``(N, n_in, R, R, C)`` inputs; enhance frame-wise."""
    pred, enh = _load(spec)
    inputs = np.asarray(inputs, dtype=np.float32)
    single = inputs.ndim == 4
    if single:
        inputs = inputs[None]
    out = predict(pred, inputs)
    if enh is not None:
        n, t = out.shape[:2]
        flat = enhance(enh, out.reshape((n * t,) + out.shape[2:]))
        out = flat.reshape((n, t) + flat.shape[1:])
    return out[0] if single else out


def benchmark_inference(spec, inputs, trials=10, warmup=2, csv_path=None):
    """Wall-clock seconds per 5-frame prediction (one input sequence per call)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    spec = resolve(spec)
    seq = np.asarray(inputs, dtype=np.float32)
    if seq.ndim == 5:
        seq = seq[0]
    for _ in range(warmup):
        run_pipeline(spec, seq)
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        run_pipeline(spec, seq)
        times.append(time.perf_counter() - t0)
    mean = statistics.fmean(times)
    std = statistics.pstdev(times) if len(times) > 1 else 0.0
    result = {"pipeline": spec.label, "mean_seconds": mean, "std_seconds": std,
              "trials": trials, "warmup": warmup}
    if csv_path is not None:
        append_timing_csv(csv_path, result)
    return result


TIMING_FIELDS = ("pipeline", "mean_seconds", "std_seconds", "trials", "warmup")


def append_timing_csv(path, result):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TIMING_FIELDS)
        if new:
            w.writeheader()
        w.writerow({k: result[k] for k in TIMING_FIELDS})
    return path


# ---------------------------------------------------------------------------
# report emission

def _plot(path, title, ylabel, series):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=100)
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel("predicted frame")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def _finite(v):
    return v if math.isfinite(v) else float("nan")


def emit_report(metric_reports, ap_reports, out_dir, headline_class="square"):
    """Write CSV/JSON tables, per-step curve plots and a summary table; returns the paths."""
    if not metric_reports and not ap_reports:
        raise ValueError("nothing to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if metric_reports:
        written.append(qm.write_metrics_csv(metric_reports, out_dir / "metrics.csv"))
        written.append(qm.write_metrics_json(metric_reports, out_dir / "metrics.json"))
        for metric, ylabel in (("mse", "MSE"), ("psnr", "PSNR [dB]"), ("ssim", "SSIM")):
            series = {}
            for rep in metric_reports:
                steps = sorted(rep.per_step)
                series[rep.label] = (steps, [_finite(rep.per_step[s][metric]) for s in steps])
            written.append(_plot(out_dir / f"{metric}_per_step.png", f"{ylabel} per predicted frame",
                                 ylabel, series))
        written.append(_summary_table(metric_reports, out_dir / "summary.md"))
    if ap_reports:
        written.append(det.write_ap_csv(ap_reports, out_dir / "ap.csv"))
        for cls in sorted({r.label for r in ap_reports}):
            series = {}
            for label in dict.fromkeys(r.pipeline for r in ap_reports):
                rows = sorted((r for r in ap_reports if r.pipeline == label and r.label == cls),
                              key=lambda r: r.step)
                series[label] = ([r.step for r in rows], [r.ap for r in rows])
            written.append(_plot(out_dir / f"ap_{cls}_per_step.png", f"AP '{cls}' per predicted frame",
                                 "AP", series))
    else:
        log.warning("no AP reports given; emitting metrics only")
    return written


def _summary_table(reports, path):
    lines = [
        "| pipeline | MSE | PSNR (mean) | PSNR (of mean MSE) | SSIM |",
        "|---|---:|---:|---:|---:|",
    ]
    for rep in reports:
        a = rep.averages
        lines.append(f"| {rep.label} | {a['mse']:.4f} | {a['psnr']:.4f} | "
                     f"{a['psnr_of_mean_mse']:.4f} | {a['ssim']:.4f} |")
    path.write_text("\n".join(lines) + "\n")
    return path
