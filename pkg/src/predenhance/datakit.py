"""Frame/clip containers, resizing, windowing, splitting and the toy dataset.

Frames are plain ``numpy`` arrays of shape ``(H, W, C)`` with values in
``[0, 1]``; clips stack them along a leading time axis.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from . import kernels

SHAPE_CLASSES = ("square", "disk")
# Per-class fill colour; the toy detector keys on the dominant channel.
CLASS_COLORS = {
    "square": (0.95, 0.15, 0.1),
    "disk": (0.1, 0.2, 0.95),
}


def check_frame(frame, name="frame"):
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] not in (1, 3):
        raise ValueError(f"{name} must be HxWxC with C in (1, 3), got {frame.shape}")
    if frame.shape[0] < 4 or frame.shape[1] < 4:
        raise ValueError(f"{name} must be at least 4x4, got {frame.shape[:2]}")
    return frame


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, C)
    fps: float = 17.0
    clip_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or len(self.frames) < 1:
            raise ValueError("clip frames must be a non-empty (T, H, W, C) array")
        check_frame(self.frames[0])

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames.shape[1:]


@dataclass
class SequenceSample:
    input_frames: np.ndarray  # (n_in, H, W, C)
    target_frames: np.ndarray  # (n_out, H, W, C)
    clip_id: str = ""
    start: int = 0

    def __post_init__(self):
        if self.input_frames.shape[1:] != self.target_frames.shape[1:]:
            raise ValueError("input and target frames differ in size")


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int
    ratio: float = 0.8


@dataclass
class ShapesConfig:
    """Moving-shapes scene generator settings.

    ``velocities`` fixes the per-shape motion in pixels/frame as ``(vx, vy)``;
    when omitted each shape gets a random integer velocity with components in
    ``[-max_speed, max_speed]``. Shapes reflect off the canvas border when
    ``boundary == "bounce"`` and re-enter from the opposite side for ``"wrap"``.
    """

    canvas: int = 128
    n_frames: int = 30
    n_shapes: int = 3
    shape_size: int = 24
    max_speed: int = 4
    velocities: list | None = None
    classes: list | None = None
    square_fraction: float = 0.67
    boundary: str = "bounce"
    background: str = "gradient"
    blur_sigma: float = 0.0
    channels: int = 3
    fps: float = 17.0
    seed: int = 0


def bicubic_resize(frame, target_w, target_h):
    """Resize with an antialiased Catmull-Rom (a=-0.5) kernel; output clamped to [0, 1]."""
    if target_w <= 0 or target_h <= 0:
        raise ValueError(f"target size must be positive, got {target_w}x{target_h}")
    frame = check_frame(frame)
    if frame.shape[0] == target_h and frame.shape[1] == target_w:
        return np.array(frame, dtype=np.float64)
    out = kernels.bicubic_resize(frame, int(target_h), int(target_w))
    return np.clip(out, 0.0, 1.0)


def resize_clip(frames, size):
    return np.stack([bicubic_resize(f, size, size) for f in frames])


def n_windows(length, n_in, n_out, stride):
    span = n_in + n_out
    if length < span:
        return 0
    return (length - span) // stride + 1


def make_sequence_samples(clip, n_in=5, n_out=5, stride=None):
    """Cut a clip into (input, target) windows.

    ``stride`` defaults to ``n_in + n_out`` (non-overlapping windows). A clip
    shorter than one window yields an empty list.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("n_in and n_out must be >= 1")
    if stride is None:
        stride = n_in + n_out
    if stride < 1:
        raise ValueError("stride must be >= 1")
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    clip_id = clip.clip_id if isinstance(clip, VideoClip) else ""
    out = []
    for k in range(n_windows(len(frames), n_in, n_out, stride)):
        s = k * stride
        out.append(SequenceSample(
            input_frames=frames[s:s + n_in],
            target_frames=frames[s + n_in:s + n_in + n_out],
            clip_id=clip_id,
            start=s,
        ))
    return out


def split_dataset(samples, ratio=0.8, seed=0):
    """Deterministic clip-level train/test split.

    Samples sharing a ``clip_id`` move together (samples with an empty id are
    their own group). Groups are shuffled by ``seed`` and assigned to train
    while they fit under ``floor(ratio * N)``; the rest go to test.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    samples = list(samples)
    if not samples:
        raise ValueError("cannot split an empty sample list")

    groups = {}
    order = []
    for i, s in enumerate(samples):
        key = getattr(s, "clip_id", "") or f"__sample_{i}"
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(s)

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(order))
    target = math.floor(ratio * len(samples))
    train, test = [], []
    for idx in perm:
        group = groups[order[idx]]
        if len(train) + len(group) <= target:
            train.extend(group)
        else:
            test.extend(group)
    return DatasetSplit(train=train, test=test, seed=seed, ratio=ratio)


def _background(cfg):
    c = cfg.canvas
    if cfg.background == "black":
        return np.zeros((c, c, 3))
    if cfg.background == "gradient":
        # static grey road-like ramp: brightens towards the bottom, faint lane stripe
        ramp = np.linspace(0.15, 0.45, c)[:, None] * np.ones((1, c))
        stripe = np.zeros((c, c))
        stripe[:, c // 2 - max(1, c // 64):c // 2 + max(1, c // 64)] = 0.2
        grey = np.clip(ramp + stripe, 0.0, 1.0)
        return np.repeat(grey[:, :, None], 3, axis=2)
    raise ValueError(f"unknown background {cfg.background!r}")


def _shape_mask(kind, size):
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    yy, xx = np.mgrid[:size, :size]
    r = size / 2.0
    return (yy + 0.5 - r) ** 2 + (xx + 0.5 - r) ** 2 <= r * r


def _advance(pos, vel, lo, hi, boundary):
    """Move a 1-D coordinate one step inside [lo, hi]; returns (pos, vel)."""
    p = pos + vel
    if boundary == "wrap":
        span = hi - lo + 1
        return lo + (p - lo) % span, vel
    while p < lo or p > hi:
        if p < lo:
            p = 2 * lo - p
        else:
            p = 2 * hi - p
        vel = -vel
    return p, vel


def shape_tracks(cfg):
    """Top-left positions, classes and sizes of every shape in every frame.

    Returns ``(positions, classes)`` with ``positions`` of shape
    ``(n_frames, n_shapes, 2)`` holding integer ``(x, y)``.
    """
    if cfg.shape_size > cfg.canvas:
        raise ValueError(f"shape_size {cfg.shape_size} exceeds canvas {cfg.canvas}")
    if cfg.shape_size < 1 or cfg.n_shapes < 0 or cfg.n_frames < 1:
        raise ValueError("invalid shapes configuration")
    if cfg.boundary not in ("bounce", "wrap"):
        raise ValueError(f"unknown boundary rule {cfg.boundary!r}")
    rng = np.random.default_rng(cfg.seed)
    hi = cfg.canvas - cfg.shape_size
    classes = list(cfg.classes) if cfg.classes is not None else [
        "square" if rng.random() < cfg.square_fraction else "disk" for _ in range(cfg.n_shapes)
    ]
    if len(classes) != cfg.n_shapes:
        raise ValueError("classes must list one entry per shape")
    pos = rng.integers(0, hi + 1, size=(cfg.n_shapes, 2))
    if cfg.velocities is not None:
        vel = np.asarray(cfg.velocities, dtype=np.int64).reshape(cfg.n_shapes, 2)
    else:
        vel = rng.integers(-cfg.max_speed, cfg.max_speed + 1, size=(cfg.n_shapes, 2))
    pos = pos.astype(np.int64)
    vel = vel.astype(np.int64)
    out = np.zeros((cfg.n_frames, cfg.n_shapes, 2), dtype=np.int64)
    for t in range(cfg.n_frames):
        out[t] = pos
        for s in range(cfg.n_shapes):
            for ax in range(2):
                pos[s, ax], vel[s, ax] = _advance(pos[s, ax], vel[s, ax], 0, hi, cfg.boundary)
    return out, classes


def render_shapes(cfg, positions, classes):
    """Rasterise one frame from shape positions; later shapes occlude earlier ones."""
    frame = _background(cfg)
    size = cfg.shape_size
    for (x, y), cls in zip(positions, classes):
        mask = _shape_mask(cls, size)
        region = frame[y:y + size, x:x + size]
        region[mask] = CLASS_COLORS[cls]
    if cfg.channels == 1:
        frame = luma(frame)[:, :, None]
    return frame


def luma(frame):
    """Rec. 601 luma of an RGB frame (single-channel frames pass through)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3 and frame.shape[2] == 1:
        return frame[:, :, 0]
    return 0.299 * frame[..., 0] + 0.587 * frame[..., 1] + 0.114 * frame[..., 2]


def blur_frames(frames, sigma):
    """Gaussian blur over the spatial axes of ``(..., H, W, C)`` frames."""
    frames = np.asarray(frames, dtype=np.float64)
    if sigma <= 0:
        return frames.copy()
    sig = [0.0] * (frames.ndim - 3) + [sigma, sigma, 0.0]
    return np.clip(ndimage.gaussian_filter(frames, sig, mode="nearest"), 0.0, 1.0)


def synth_moving_shapes(cfg):
    """Render a deterministic moving-shapes clip.

    The returned clip is sharp; ``cfg.blur_sigma`` is applied by the callers
    that need a degraded copy (see ``blur_frames``).
    """
    positions, classes = shape_tracks(cfg)
    frames = np.stack([render_shapes(cfg, positions[t], classes) for t in range(cfg.n_frames)])
    return VideoClip(frames=frames, fps=cfg.fps, clip_id=f"shapes-{cfg.seed}")


def shape_boxes(cfg, positions, classes, scale=1.0):
    """Ground-truth boxes ``(cls, x0, y0, x1, y1)`` for one frame of ``shape_tracks``."""
    out = []
    for (x, y), cls in zip(positions, classes):
        mask = _shape_mask(cls, cfg.shape_size)
        ys, xs = np.nonzero(mask)
        out.append((cls, (x + xs.min()) * scale, (y + ys.min()) * scale,
                    (x + xs.max() + 1) * scale, (y + ys.max() + 1) * scale))
    return out


# ---------------------------------------------------------------------------
# storage

def save_clip_dir(clip, path):
    """Write a clip as numbered 16-bit PNGs plus ``meta.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(clip.frames)
    for i, f in enumerate(frames, start=1):
        img = np.round(np.clip(f, 0.0, 1.0) * 65535.0).astype(np.uint16)
        if img.shape[2] == 3:
            img = img[:, :, ::-1]  # OpenCV stores BGR
        cv2.imwrite(str(path / f"frame_{i:06d}.png"), img)
    meta = {
        "fps": clip.fps,
        "clip_id": clip.clip_id,
        "n_frames": int(frames.shape[0]),
        "height": int(frames.shape[1]),
        "width": int(frames.shape[2]),
        "channels": int(frames.shape[3]),
        "bit_depth": 16,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_clip_dir(path):
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    files = sorted(path.glob("frame_*.png"))
    if len(files) != meta["n_frames"]:
        raise ValueError(f"{path}: expected {meta['n_frames']} frames, found {len(files)}")
    frames = []
    for fp in files:
        img = cv2.imread(str(fp), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise OSError(f"cannot read {fp}")
        if img.ndim == 2:
            img = img[:, :, None]
        else:
            img = img[:, :, ::-1]
        frames.append(img.astype(np.float64) / float(np.iinfo(img.dtype).max))
    return VideoClip(frames=np.stack(frames), fps=meta["fps"], clip_id=meta.get("clip_id", ""))


def save_packed(path, **arrays):
    """Single-file container for a synthetic set (uncompressed ``.npz``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_packed(path):
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}


@dataclass
class ToyDataset:
    """Windowed moving-shapes data at the working and 4x resolutions."""

    train_inputs: np.ndarray
    train_targets: np.ndarray
    test_inputs: np.ndarray
    test_targets: np.ndarray
    train_targets_hr: np.ndarray
    test_targets_hr: np.ndarray
    train_clip_ids: np.ndarray
    test_clip_ids: np.ndarray
    meta: dict = field(default_factory=dict)

    def arrays(self):
        return {
            "train_inputs": self.train_inputs,
            "train_targets": self.train_targets,
            "test_inputs": self.test_inputs,
            "test_targets": self.test_targets,
            "train_targets_hr": self.train_targets_hr,
            "test_targets_hr": self.test_targets_hr,
            "train_clip_ids": self.train_clip_ids,
            "test_clip_ids": self.test_clip_ids,
            "meta": np.frombuffer(json.dumps(self.meta, sort_keys=True).encode(), dtype=np.uint8),
        }

    def save(self, path):
        return save_packed(path, **self.arrays())

    @classmethod
    def load(cls, path):
        d = load_packed(path)
        meta = json.loads(bytes(d.pop("meta")).decode())
        return cls(meta=meta, **d)


def build_toy_dataset(n_clips=40, clip_length=30, source_size=128, work_size=32, n_in=5,
                      n_out=5, stride=None, ratio=0.8, seed=0, float_dtype=np.float32,
                      **shape_kwargs):
    """Synthesize clips at ``source_size``, downsample bicubically, window and split.

    Targets are also kept at ``4 * work_size`` (bicubic from the source) for
    super-resolution ground truth.
    """
    hr_size = 4 * work_size
    samples = []
    hr_targets = {}
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n_clips)
    for c in range(n_clips):
        cfg = ShapesConfig(canvas=source_size, n_frames=clip_length, seed=int(seeds[c]), **shape_kwargs)
        clip = synth_moving_shapes(cfg)
        clip.clip_id = f"clip{c:04d}"
        work = VideoClip(resize_clip(clip.frames, work_size), fps=clip.fps, clip_id=clip.clip_id)
        hr = clip.frames if source_size == hr_size else resize_clip(clip.frames, hr_size)
        for s in make_sequence_samples(work, n_in, n_out, stride):
            samples.append(s)
            hr_targets[(s.clip_id, s.start)] = hr[s.start + n_in:s.start + n_in + n_out]
    split = split_dataset(samples, ratio, seed)

    def pack(items):
        if not items:
            shape = (0, n_in, work_size, work_size, 3)
            return (np.zeros(shape, float_dtype), np.zeros(shape, float_dtype),
                    np.zeros((0, n_out, hr_size, hr_size, 3), float_dtype), np.zeros(0, dtype="U16"))
        return (np.stack([s.input_frames for s in items]).astype(float_dtype),
                np.stack([s.target_frames for s in items]).astype(float_dtype),
                np.stack([hr_targets[(s.clip_id, s.start)] for s in items]).astype(float_dtype),
                np.array([s.clip_id for s in items], dtype="U16"))

    tri, trt, trh, trc = pack(split.train)
    tei, tet, teh, tec = pack(split.test)
    meta = {
        "n_clips": n_clips, "clip_length": clip_length, "source_size": source_size,
        "work_size": work_size, "hr_size": hr_size, "n_in": n_in, "n_out": n_out,
        "stride": stride if stride is not None else n_in + n_out, "ratio": ratio, "seed": seed,
        "shapes": {k: v for k, v in shape_kwargs.items()},
    }
    return ToyDataset(tri, trt, tei, tet, trh, teh, trc, tec, meta)


def output_root(default="runs"):
    return Path(os.environ.get("PREDENHANCE_OUT", default))
