"""Detection-relative evaluation: pseudo ground truth, IoU matching and AP.

Detections on the real frames serve as reference boxes; detections on the
predicted frames are scored against them per class and per prediction step.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels
from .datakit import CLASS_COLORS


class MissingDetections(KeyError):
    """An external detection file has no entry for a queried frame."""

    def __str__(self):
        return f"no detections recorded for frame {self.args[0]!r}"


@dataclass(frozen=True)
class DetectionBox:
    label: str
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def bbox(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def scaled(self, factor):
        return DetectionBox(self.label, self.x_min * factor, self.y_min * factor,
                            self.x_max * factor, self.y_max * factor, self.confidence)


def _check_bbox(b):
    x0, y0, x1, y1 = b
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"degenerate box {tuple(b)}")


def iou(a, b):
    """Intersection over union of two ``(x_min, y_min, x_max, y_max)`` boxes."""
    a = a.bbox if isinstance(a, DetectionBox) else tuple(a)
    b = b.bbox if isinstance(b, DetectionBox) else tuple(b)
    _check_bbox(a)
    _check_bbox(b)
    return float(kernels.iou_matrix(np.array([a]), np.array([b]))[0, 0])


# ---------------------------------------------------------------------------
# detectors

class ToyBlobDetector:
    """Colour-blob detector for the moving-shapes scenes.

    A pixel votes for a class when the class's dominant colour channel exceeds
    the other two by ``threshold``. Each connected component of voters with at
    least ``min_area`` pixels becomes a box; its confidence is the mean
    channel margin inside the component, clipped to [0, 1].
    """

    backend = "toy_detector"

    def __init__(self, threshold=0.35, min_area=4, colors=None):
        self.threshold = threshold
        self.min_area = min_area
        self.colors = dict(colors or CLASS_COLORS)

    def __call__(self, frame, frame_id=None):
        frame = np.asarray(frame, dtype=np.float64)
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise ValueError("toy detector needs RGB frames")
        out = []
        for label, color in sorted(self.colors.items()):
            ch = int(np.argmax(color))
            others = [c for c in range(3) if c != ch]
            margin = frame[:, :, ch] - np.max(frame[:, :, others], axis=2)
            mask = margin > self.threshold
            comps, n = ndimage.label(mask)
            if n == 0:
                continue
            for k, sl in enumerate(ndimage.find_objects(comps), start=1):
                region = comps[sl] == k
                area = int(region.sum())
                if area < self.min_area:
                    continue
                conf = float(np.clip(margin[sl][region].mean(), 0.0, 1.0))
                ys, xs = sl
                out.append(DetectionBox(label, float(xs.start), float(ys.start),
                                        float(xs.stop), float(ys.stop), conf))
        return out


class ExternalDetections:
    """Detections loaded from a line-delimited JSON file keyed by ``frame_id``."""

    backend = "external_file"

    def __init__(self, records):
        self.by_frame = defaultdict(list)
        self.frames = set()
        for r in records:
            fid = str(r["frame_id"])
            self.frames.add(fid)
            if r.get("class") is None:
                continue  # frame listed with no detections
            self.by_frame[fid].append(DetectionBox(
                str(r["class"]), float(r["x_min"]), float(r["y_min"]),
                float(r["x_max"]), float(r["y_max"]), float(r["confidence"])))

    @classmethod
    def from_file(cls, path):
        return cls(read_detections(path))

    def __call__(self, frame=None, frame_id=None):
        if frame_id is None or str(frame_id) not in self.frames:
            raise MissingDetections(frame_id)
        return list(self.by_frame.get(str(frame_id), []))


def read_detections(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def write_detections(path, detections_by_frame):
    """Write ``{frame_id: [DetectionBox, ...]}`` as JSON lines (empty frames get a null record)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for fid in detections_by_frame:
            boxes = detections_by_frame[fid]
            if not boxes:
                fh.write(json.dumps({"frame_id": fid, "class": None}) + "\n")
            for b in boxes:
                fh.write(json.dumps({"frame_id": fid, "class": b.label, "x_min": b.x_min,
                                     "y_min": b.y_min, "x_max": b.x_max, "y_max": b.y_max,
                                     "confidence": b.confidence}) + "\n")
    return path


def build_pseudo_gt(detector, frames, frame_ids=None):
    """Detector output on real frames, confidences dropped (set to 1)."""
    if frame_ids is None:
        frame_ids = list(range(len(frames)))
    out = {}
    for fid, frame in zip(frame_ids, frames):
        out[fid] = [DetectionBox(b.label, *b.bbox, 1.0) for b in detector(frame, frame_id=fid)]
    return out


# ---------------------------------------------------------------------------
# matching and AP

@dataclass
class MatchResult:
    confidences: np.ndarray  # descending
    is_tp: np.ndarray
    matched_ref: np.ndarray  # ref index per prediction, -1 if FP
    n_refs: int

    @property
    def tp(self):
        return int(self.is_tp.sum())

    @property
    def fp(self):
        return int(len(self.is_tp) - self.is_tp.sum())

    @property
    def fn(self):
        return self.n_refs - self.tp


def match_detections(preds, refs, iou_thresh=0.5):
    """Greedy one-to-one matching in descending prediction confidence."""
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"IoU threshold must be in (0, 1], got {iou_thresh}")
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    preds = [preds[i] for i in order]
    conf = np.array([p.confidence for p in preds], dtype=np.float64)
    if preds and refs:
        ious = kernels.iou_matrix(np.array([p.bbox for p in preds]), np.array([r.bbox for r in refs]))
        matched = kernels.greedy_match(ious, iou_thresh)
    else:
        matched = np.full(len(preds), -1, dtype=np.int64)
    return MatchResult(conf, matched >= 0, matched, len(refs))


def average_precision(matches, n_points=11):
    """AP over a set of per-frame match results (pooled and ranked by confidence).

    ``n_points=11`` is the interpolated PASCAL VOC definition; ``n_points=0``
    selects the all-points area. Returns ``nan`` when there are no reference
    boxes.
    """
    if isinstance(matches, MatchResult):
        matches = [matches]
    n_refs = sum(m.n_refs for m in matches)
    if n_refs == 0:
        return math.nan
    conf = np.concatenate([m.confidences for m in matches]) if matches else np.zeros(0)
    tp = np.concatenate([m.is_tp for m in matches]) if matches else np.zeros(0, bool)
    order = np.argsort(-conf, kind="stable")
    return float(kernels.average_precision_sorted(conf[order], tp[order].astype(np.uint8), n_refs, n_points))


@dataclass
class APReport:
    pipeline: str
    label: str
    step: int
    ap: float
    tp: int
    fp: int
    fn: int
    iou_thresh: float = 0.5

    def row(self):
        return {"pipeline": self.pipeline, "class": self.label, "step": self.step,
                "AP": self.ap, "TP": self.tp, "FP": self.fp, "FN": self.fn}


def _scale_factor(pred_shape, ref_shape):
    return pred_shape[0] / ref_shape[0]


def evaluate_detection(pipelines, real_sequences, detector, classes=None, iou_thresh=0.5,
                       n_points=11, real_frame_ids=None):
    """Per pipeline, class and prediction step AP against detector pseudo ground truth.

    ``pipelines`` maps a label to ``(N, T, H, W, C)`` predicted frames;
    ``real_sequences`` is ``(N, T, h, w, C)``. When the predicted frames are
    larger (super-resolution) they are detected at their own size and the
    reference boxes are scaled by the size ratio.
    """
    real = np.asarray(real_sequences)
    n, t = real.shape[:2]
    if real_frame_ids is None:
        real_frame_ids = {(i, s): f"real/{i:05d}/{s + 1}" for i in range(n) for s in range(t)}
    refs = {}
    for i in range(n):
        for s in range(t):
            fid = real_frame_ids[(i, s)]
            refs[(i, s)] = build_pseudo_gt(detector, [real[i, s]], [fid])[fid]
    if classes is None:
        classes = sorted({b.label for boxes in refs.values() for b in boxes} |
                         set(getattr(detector, "colors", {}) or {}))

    reports = []
    for label, pred in pipelines.items():
        pred = np.asarray(pred)
        if pred.shape[:2] != (n, t):
            raise ValueError(f"pipeline {label!r}: {pred.shape[:2]} sequences/steps, expected {(n, t)}")
        factor = _scale_factor(pred.shape[2:4], real.shape[2:4])
        per_cls_step = defaultdict(list)
        for i in range(n):
            for s in range(t):
                dets = detector(pred[i, s], frame_id=f"{label}/{i:05d}/{s + 1}")
                for cls in classes:
                    p = [d for d in dets if d.label == cls]
                    r = [b.scaled(factor) if factor != 1 else b for b in refs[(i, s)] if b.label == cls]
                    per_cls_step[(cls, s)].append(match_detections(p, r, iou_thresh))
        for cls in classes:
            for s in range(t):
                ms = per_cls_step[(cls, s)]
                reports.append(APReport(
                    pipeline=label, label=cls, step=s + 1,
                    ap=average_precision(ms, n_points),
                    tp=sum(m.tp for m in ms), fp=sum(m.fp for m in ms), fn=sum(m.fn for m in ms),
                    iou_thresh=iou_thresh))
    return reports


def write_ap_csv(reports, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["pipeline", "class", "step", "AP", "TP", "FP", "FN"])
        w.writeheader()
        for r in reports:
            row = r.row()
            row["AP"] = f"{row['AP']:.10g}"
            w.writerow(row)
    return path


def read_ap_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(APReport(row["pipeline"], row["class"], int(row["step"]), float(row["AP"]),
                                int(row["TP"]), int(row["FP"]), int(row["FN"])))
    return out


def mean_ap(reports, pipeline, label):
    vals = [r.ap for r in reports if r.pipeline == pipeline and r.label == label and not math.isnan(r.ap)]
    return float(np.mean(vals)) if vals else math.nan
