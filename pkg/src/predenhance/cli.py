"""``predenhance`` command line: data, training, prediction pipelines, evaluation, reports.

Every artifact-producing subcommand writes ``manifest_<command>.json`` next
to its outputs. Default paths all live under ``--out-dir`` (or the
``PREDENHANCE_OUT`` environment variable), so the toy recipe needs no
explicit file arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from . import datakit as dk
from . import detection_eval as det
from . import quality_metrics as qm
from .checkpoint import config_hash, write_manifest
from .enhancer import build_enhancer, enhance, load_enhancer, train_enhancer
from .losses import NumericalFailure
from .pipeline import (PIPELINE_LABELS, ConfigurationError, PipelineSpec, benchmark_inference,
                       emit_report, run_pipeline)
from .predictor import build_predictor, load_predictor, predict, train_predictor

log = logging.getLogger("predenhance")

KNOWN_ERRORS = (ValueError, KeyError, OSError, ConfigurationError, NumericalFailure)


# ---------------------------------------------------------------------------
# layout under --out-dir

class Layout:
    def __init__(self, root):
        self.root = Path(root)

    data = property(lambda s: s.root / "data")
    dataset = property(lambda s: s.root / "data" / "dataset.npz")
    predictor_dir = property(lambda s: s.root / "predictor")
    predictor = property(lambda s: s.root / "predictor" / "predictor.pt")
    predictions = property(lambda s: s.root / "predictions")
    eval = property(lambda s: s.root / "eval")
    report = property(lambda s: s.root / "report")

    def enhancer_dir(self, kind):
        return self.root / "enhancers" / kind

    def enhancer(self, kind):
        return self.enhancer_dir(kind) / "enhancer.pt"


def _load_dataset(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found (run make-data first)")
    return dk.ToyDataset.load(path)


def _save_frames(path, frames, meta):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dk.save_packed(path, frames=np.asarray(frames, np.float32),
                   meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))
    return path


def _load_frames(path):
    d = dk.load_packed(path)
    return d["frames"], json.loads(bytes(d["meta"]).decode())


def _check_resolution(cfg):
    if cfg["predictor"]["final_resolution"] != cfg["data"]["work_size"]:
        raise ConfigurationError("predictor.final_resolution must equal data.work_size "
                                 f"({cfg['predictor']['final_resolution']} != {cfg['data']['work_size']})")


def _flat(frames):
    return frames.reshape((-1,) + frames.shape[2:])


# ---------------------------------------------------------------------------
# subcommands

def cmd_make_data(args, cfg, lay):
    t0 = time.time()
    ds = dk.build_toy_dataset(**C.dataset_kwargs(cfg))
    path = ds.save(lay.dataset)
    # a few held-out windows as PNG clip directories for inspection
    n_export = min(int(cfg["data"].get("export_clips", 0)), len(ds.test_inputs))
    for i in range(n_export):
        frames = np.concatenate([ds.test_inputs[i], ds.test_targets[i]])
        clip_id = f"test{i:05d}_{ds.test_clip_ids[i]}"
        out = dk.save_clip_dir(dk.VideoClip(frames, clip_id=clip_id), lay.data / "clips" / clip_id)
        (out / "provenance.json").write_text(json.dumps(
            {"source": "moving_shapes", "seed": cfg["seed"], "config_hash": config_hash(cfg),
             "split": "test", "window": i}, indent=2, sort_keys=True) + "\n")
    print(f"dataset: {len(ds.train_inputs)} train / {len(ds.test_inputs)} test windows -> {path}")
    write_manifest(lay.data, "make-data", cfg, {"seed": cfg["seed"]}, [path], t0,
                   {"n_train": len(ds.train_inputs), "n_test": len(ds.test_inputs)})


def cmd_train_predictor(args, cfg, lay):
    t0 = time.time()
    _check_resolution(cfg)
    ds = _load_dataset(args.data or lay.dataset)
    pcfg = C.predictor_config(cfg)
    state = build_predictor(pcfg, 0)
    sched = C.schedule(cfg, pcfg)
    state, rows = train_predictor(state, ds.train_inputs, ds.train_targets, sched, out_dir=lay.predictor_dir,
                                  progress=lambda r: log.info("epoch %(epoch)d stage %(stage)d "
                                                              "g=%(g_loss).4f d=%(d_loss).4f", r))
    path = state.save(lay.predictor)
    print(f"predictor: {len(rows)} epochs, final resolution {state.resolution} -> {path}")
    ckpts = sorted(lay.predictor_dir.glob("stage*.pt")) + [path]
    write_manifest(lay.predictor_dir, "train-predictor", cfg, {"seed": cfg["seed"]}, ckpts, t0)


def _enhancer_pairs(kind, pairs, ds, predictor_path, sigma):
    """(degraded, sharp) training frames for one enhancer kind."""
    if pairs == "predictor":
        pred = predict(load_predictor(predictor_path), ds.train_inputs)
        degraded = _flat(pred)
    elif pairs == "blur":
        degraded = _flat(ds.train_targets) if kind == "sr" else _flat(dk.blur_frames(ds.train_targets, sigma))
    else:
        raise ValueError(f"unknown pair source {pairs!r} (predictor | blur)")
    sharp = _flat(ds.train_targets_hr if kind == "sr" else ds.train_targets)
    return degraded.astype(np.float32), sharp.astype(np.float32)


def cmd_train_enhancer(args, cfg, lay):
    t0 = time.time()
    sec = C.enhancer_section(cfg, args.kind)
    pairs = args.pairs or sec.get("pairs", "predictor")
    epochs = args.epochs if args.epochs is not None else int(sec["epochs"])
    ds = _load_dataset(args.data or lay.dataset)
    predictor_path = Path(args.predictor or lay.predictor)
    if pairs == "predictor" and not predictor_path.exists():
        raise FileNotFoundError(f"predictor checkpoint {predictor_path} not found (run train-predictor first)")
    degraded, sharp = _enhancer_pairs(args.kind, pairs, ds, predictor_path, cfg["data"]["blur_sigma"])
    state = build_enhancer(C.enhancer_config(cfg, args.kind))
    out_dir = lay.enhancer_dir(args.kind)
    state, rows = train_enhancer(state, degraded, sharp, epochs, out_dir=out_dir,
                                 progress=lambda r: log.info("epoch %(epoch)d %(phase)s g=%(g_loss).4f", r))
    path = out_dir / "enhancer.pt"
    if not rows:  # zero epochs: still leave a usable checkpoint
        state.save(path)
    print(f"enhancer {args.kind}: {len(rows)} epochs on {len(degraded)} {pairs} pairs -> {path}")
    ckpts = [path] + ([predictor_path] if pairs == "predictor" else [])
    write_manifest(out_dir, "train-enhancer", cfg, {"seed": cfg["seed"]}, ckpts, t0,
                   {"kind": args.kind, "pairs": pairs, "epochs": epochs})


def _spec(label, lay, predictor=None, enhancer=None):
    pred = Path(predictor or lay.predictor)
    enh = None if label == "plain" else Path(enhancer or lay.enhancer(label))
    for p in (pred, enh):
        if p is not None and not p.exists():
            raise FileNotFoundError(f"checkpoint {p} not found")
    return PipelineSpec(label, pred, enh)


def _labels(arg):
    if arg in (None, "all"):
        return list(PIPELINE_LABELS)
    labels = [s.strip() for s in arg.split(",") if s.strip()]
    for s in labels:
        if s not in PIPELINE_LABELS:
            raise ValueError(f"unknown pipeline {s!r}; choose from {', '.join(PIPELINE_LABELS)} or 'all'")
    return labels


def cmd_predict(args, cfg, lay):
    t0 = time.time()
    ds = _load_dataset(args.data or lay.dataset)
    inputs = ds.test_inputs if args.split == "test" else ds.train_inputs
    labels = _labels(args.pipeline)
    written, ckpts = [], []
    for label in labels:
        spec = _spec(label, lay, args.predictor, args.enhancer if len(labels) == 1 else None)
        ckpts += [p for p in (spec.predictor, spec.enhancer) if p is not None]
        frames = run_pipeline(spec, inputs)
        meta = {"pipeline": label, "split": args.split, "dataset": str(args.data or lay.dataset)}
        written.append(_save_frames(lay.predictions / f"{label}.npz", frames, meta))
        print(f"{label}: {frames.shape} -> {written[-1]}")
    write_manifest(lay.predictions, "predict", cfg, {"seed": cfg["seed"]}, written + sorted(set(ckpts)), t0)


def cmd_enhance(args, cfg, lay):
    t0 = time.time()
    frames, meta = _load_frames(args.input)
    state = load_enhancer(args.enhancer)
    n, t = frames.shape[:2]
    out = enhance(state, _flat(frames))
    out = out.reshape((n, t) + out.shape[1:])
    label = args.label or Path(args.enhancer).parent.name
    meta = dict(meta, pipeline=label, enhanced_from=str(args.input))
    path = _save_frames(Path(args.output) if args.output else lay.predictions / f"{label}.npz", out, meta)
    print(f"{label}: {out.shape} -> {path}")
    write_manifest(path.parent, "enhance", cfg, {"seed": cfg["seed"]}, [path, args.enhancer], t0)


def _prediction_files(args, lay):
    if args.predictions:
        return [Path(p) for p in args.predictions]
    files = sorted(lay.predictions.glob("*.npz"), key=lambda p: (
        PIPELINE_LABELS.index(p.stem) if p.stem in PIPELINE_LABELS else len(PIPELINE_LABELS), p.stem))
    if not files:
        raise FileNotFoundError(f"no predictions in {lay.predictions} (run predict first)")
    return files


def _reference(ds, frames, split="test"):
    low = ds.test_targets if split == "test" else ds.train_targets
    high = ds.test_targets_hr if split == "test" else ds.train_targets_hr
    if frames.shape == low.shape:
        return low
    if frames.shape == high.shape:
        return high
    raise ConfigurationError(f"predictions {frames.shape} match neither target size {low.shape[2:4]} "
                             f"nor {high.shape[2:4]}")


def cmd_eval_metrics(args, cfg, lay):
    t0 = time.time()
    ds = _load_dataset(args.data or lay.dataset)
    reports = []
    for path in _prediction_files(args, lay):
        frames, meta = _load_frames(path)
        label = meta.get("pipeline", path.stem)
        rep = qm.per_frame_report(frames, _reference(ds, frames, meta.get("split", "test")), label)
        reports.append(rep)
        a = rep.averages
        print(f"{label}: MSE {a['mse']:.5f}  PSNR {a['psnr']:.3f} dB  SSIM {a['ssim']:.4f}")
    out = [qm.write_metrics_csv(reports, lay.eval / "metrics.csv"),
           qm.write_metrics_json(reports, lay.eval / "metrics.json")]
    write_manifest(lay.eval, "eval-metrics", cfg, {"seed": cfg["seed"]}, out, t0)


def cmd_eval_detection(args, cfg, lay):
    t0 = time.time()
    ds = _load_dataset(args.data or lay.dataset)
    e = cfg["eval"]
    if args.detections:
        detector = det.ExternalDetections.from_file(args.detections)
    else:
        detector = det.ToyBlobDetector(**e["detector"])
    pipelines = {}
    for path in _prediction_files(args, lay):
        frames, meta = _load_frames(path)
        if meta.get("split", "test") != "test":
            raise ConfigurationError(f"{path}: detection evaluation needs test-split predictions")
        pipelines[meta.get("pipeline", path.stem)] = frames
    classes = None if args.detections else sorted(dk.SHAPE_CLASSES)
    reports = det.evaluate_detection(pipelines, ds.test_targets, detector, classes,
                                     iou_thresh=e["iou_thresh"], n_points=e["ap_points"])
    path = det.write_ap_csv(reports, lay.eval / "ap.csv")
    for label in pipelines:
        line = "  ".join(f"{c} {det.mean_ap(reports, label, c):.4f}" for c in sorted({r.label for r in reports}))
        print(f"{label}: mean AP  {line}")
    write_manifest(lay.eval, "eval-detection", cfg, {"seed": cfg["seed"]}, [path], t0,
                   {"detector": detector.backend})


def cmd_benchmark(args, cfg, lay):
    t0 = time.time()
    ds = _load_dataset(args.data or lay.dataset)
    b = cfg["benchmark"]
    trials = args.trials if args.trials is not None else b["trials"]
    csv_path = lay.eval / "timing.csv"
    if csv_path.exists():
        csv_path.unlink()  # one row per pipeline for this run
    ckpts = []
    for label in _labels(args.pipeline):
        spec = _spec(label, lay, args.predictor)
        ckpts += [p for p in (spec.predictor, spec.enhancer) if p is not None]
        r = benchmark_inference(spec, ds.test_inputs[:1], trials=trials, warmup=b["warmup"], csv_path=csv_path)
        print(f"{label}: {r['mean_seconds']:.4f} s ± {r['std_seconds']:.4f} per 5-frame prediction")
    write_manifest(lay.eval, "benchmark", cfg, {"seed": cfg["seed"]}, [csv_path] + sorted(set(ckpts)), t0)


def cmd_report(args, cfg, lay):
    t0 = time.time()
    metrics_path = Path(args.metrics or lay.eval / "metrics.json")
    ap_path = Path(args.ap or lay.eval / "ap.csv")
    metric_reports = qm.read_metrics_json(metrics_path) if metrics_path.exists() else []
    ap_reports = det.read_ap_csv(ap_path) if ap_path.exists() else []
    if not metric_reports and not ap_reports:
        raise FileNotFoundError(f"neither {metrics_path} nor {ap_path} exists (run eval-metrics / eval-detection)")
    files = emit_report(metric_reports, ap_reports, lay.report, cfg["eval"]["headline_class"])
    for f in files:
        print(f)
    write_manifest(lay.report, "report", cfg, {"seed": cfg["seed"]}, files, t0)


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    p = argparse.ArgumentParser(prog="predenhance",
                                description="Video frame prediction with frame enhancement: toy experiment CLI.")
    p.add_argument("--config", help="YAML file merged over the packaged defaults")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", help="output root (default: $PREDENHANCE_OUT or ./runs)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. --set schedule.epochs_per_stage=[1,1,1,2]")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    add("make-data", cmd_make_data, "synthesize, window and split the moving-shapes dataset")
    sp = add("train-predictor", cmd_train_predictor, "progressively train the frame predictor")
    sp.add_argument("--data")
    sp = add("train-enhancer", cmd_train_enhancer, "train a deblurring or super-resolution enhancer")
    sp.add_argument("--kind", required=True, choices=sorted(C.ENHANCER_KINDS))
    sp.add_argument("--pairs", choices=("predictor", "blur"),
                    help="degraded inputs: predictor outputs or synthetically blurred frames")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--data")
    sp.add_argument("--predictor")
    sp = add("predict", cmd_predict, "run prediction pipelines on a dataset split")
    sp.add_argument("--pipeline", default="all", help="label, comma list or 'all'")
    sp.add_argument("--split", choices=("test", "train"), default="test")
    sp.add_argument("--data")
    sp.add_argument("--predictor")
    sp.add_argument("--enhancer", help="enhancer checkpoint (single-pipeline runs)")
    sp = add("enhance", cmd_enhance, "enhance a saved prediction file frame by frame")
    sp.add_argument("--input", required=True)
    sp.add_argument("--enhancer", required=True)
    sp.add_argument("--label")
    sp.add_argument("--output")
    for name, func, help_ in (("eval-metrics", cmd_eval_metrics, "MSE / PSNR / SSIM per prediction step"),
                              ("eval-detection", cmd_eval_detection, "detection AP against pseudo ground truth")):
        sp = add(name, func, help_)
        sp.add_argument("--predictions", nargs="+")
        sp.add_argument("--data")
        if name == "eval-detection":
            sp.add_argument("--detections", help="JSON-lines detections instead of the toy detector")
    sp = add("benchmark", cmd_benchmark, "time end-to-end inference per 5-frame prediction")
    sp.add_argument("--pipeline", default="all")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--data")
    sp.add_argument("--predictor")
    sp = add("report", cmd_report, "tables, per-step plots and summary from evaluation outputs")
    sp.add_argument("--metrics")
    sp.add_argument("--ap")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("predenhance: error: a command is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load_config(args.config, args.overrides, args.seed)
        lay = Layout(args.out_dir or dk.output_root())
        args.func(args, cfg, lay)
    except KNOWN_ERRORS as exc:
        msg = exc.args[0] if type(exc) is KeyError and exc.args else exc
        print(f"predenhance {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
