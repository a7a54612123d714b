import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from predenhance import datakit as dk
from predenhance import detection_eval as det

from oracles import sweep_ap

B = det.DetectionBox


def test_iou_examples():
    assert det.iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert det.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert det.iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-12)
    with pytest.raises(ValueError):
        det.iou((0, 0, 0, 2), (0, 0, 1, 1))


box = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 10), st.integers(1, 10)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(box, box)
def test_iou_properties(a, b):
    v = det.iou(a, b)
    assert v == det.iou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == (a == b)


def _ref(x0, y0, x1, y1, label="car"):
    return B(label, x0, y0, x1, y1, 1.0)


def test_matching_examples():
    ref = [_ref(0, 0, 10, 10)]
    # IoU 0.6: shifted box (0,0,10,10) vs (2.5,0,12.5,10): inter 75, union 125
    m = det.match_detections([B("car", 2.5, 0, 12.5, 10, 0.9)], ref)
    assert (m.tp, m.fp, m.fn) == (1, 0, 0)
    # IoU 0.4: (0,0,10,10) vs (0,0,10,4) overlap 40 of 100
    m = det.match_detections([B("car", 0, 0, 10, 4, 0.9)], ref)
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)
    m = det.match_detections([B("car", 0, 0, 10, 9, 0.8), B("car", 0, 0, 10, 10, 0.9)], ref)
    assert m.tp == 1 and m.fp == 1
    assert m.confidences.tolist() == [0.9, 0.8] and m.is_tp.tolist() == [True, False]
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            det.match_detections([], ref, bad)


@given(st.lists(st.tuples(box, st.floats(0, 1)), max_size=6), st.lists(box, max_size=6))
def test_matching_is_one_to_one(preds, refs):
    m = det.match_detections([B("c", *b, c) for b, c in preds], [_ref(*b, "c") for b in refs])
    used = m.matched_ref[m.matched_ref >= 0]
    assert len(used) == len(set(used.tolist()))
    assert m.tp + m.fn == len(refs)


def _match_from_flags(flags, confs, n_refs):
    return det.MatchResult(np.array(confs, float), np.array(flags, bool),
                           np.where(np.array(flags, bool), 0, -1), n_refs)


def test_ap_examples():
    assert det.average_precision(_match_from_flags([1], [0.9], 1)) == 1.0
    ap = det.average_precision(_match_from_flags([1, 0, 1], [0.9, 0.8, 0.7], 2))
    assert ap == pytest.approx((6 * 1.0 + 5 * (2 / 3)) / 11, abs=1e-12)
    assert ap == pytest.approx(0.8485, abs=1e-4)
    assert det.average_precision(_match_from_flags([0, 0], [0.9, 0.5], 3)) == 0.0
    assert math.isnan(det.average_precision(_match_from_flags([0], [0.5], 0)))


def random_instance(rng):
    """A few frames with <= 6 boxes total per side, integer coordinates, tied confidences."""
    frames = []
    for _ in range(rng.integers(1, 4)):
        n_ref, n_pred = rng.integers(0, 4), rng.integers(0, 4)
        refs = []
        for _ in range(n_ref):
            x, y = rng.integers(0, 12, 2)
            w, h = rng.integers(2, 7, 2)
            refs.append((int(x), int(y), int(x + w), int(y + h)))
        preds = []
        for _ in range(n_pred):
            if refs and rng.random() < 0.7:
                r = refs[rng.integers(len(refs))]
                dx, dy = rng.integers(-2, 3, 2)
                b = (r[0] + int(dx), r[1] + int(dy), r[2] + int(dx), r[3] + int(dy))
            else:
                x, y = rng.integers(0, 12, 2)
                b = (int(x), int(y), int(x + rng.integers(2, 7)), int(y + rng.integers(2, 7)))
            preds.append((float(rng.integers(1, 6)) / 5.0, b))
        frames.append((preds, refs))
    return frames


def _package_ap(frames, n_points):
    matches = []
    for preds, refs in frames:
        matches.append(det.match_detections([B("c", *b, c) for c, b in preds], [_ref(*r, "c") for r in refs]))
    return det.average_precision(matches, n_points)


@pytest.mark.parametrize("n_points", [11, 0])
def test_ap_equals_bruteforce_oracle(n_points):
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(1000):
        frames = random_instance(rng)
        oracle = sweep_ap(frames, 0.5, n_points)
        got = _package_ap(frames, n_points)
        if oracle is None:
            assert math.isnan(got)
            continue
        assert got == pytest.approx(float(oracle), abs=1e-12)
        checked += 1
    assert checked > 500


def test_ap_monotonicity():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = rng.integers(1, 8)
        confs = sorted(rng.random(n).tolist(), reverse=True)
        flags = (rng.random(n) < 0.5).tolist()
        n_refs = max(1, sum(flags)) + int(rng.integers(0, 3))
        base = det.average_precision(_match_from_flags(flags, confs, n_refs))
        top = det.average_precision(_match_from_flags([1] + flags, [1.0] + confs, n_refs + 1))
        assert top >= base - 1e-12
        # an FP at the bottom cannot add recall: the max recall stays the same
        r_base = sum(flags) / n_refs
        m = _match_from_flags(flags + [0], confs + [0.0], n_refs)
        assert m.tp / n_refs == r_base


# -- detectors and pseudo ground truth ---------------------------------------------------

def test_toy_detector_locates_square():
    cfg = dk.ShapesConfig(canvas=64, n_frames=1, n_shapes=1, shape_size=12, classes=["square"], seed=3)
    pos, cls = dk.shape_tracks(cfg)
    frame = dk.render_shapes(cfg, pos[0], cls)
    boxes = det.ToyBlobDetector()(frame)
    assert len(boxes) == 1 and boxes[0].label == "square"
    _, *gt = dk.shape_boxes(cfg, pos[0], cls)[0]
    np.testing.assert_allclose(boxes[0].bbox, gt, atol=1.0)


def test_toy_detector_empty_and_deterministic():
    d = det.ToyBlobDetector()
    assert det.build_pseudo_gt(d, [np.zeros((16, 16, 3))]) == {0: []}
    cfg = dk.ShapesConfig(canvas=32, n_frames=1, shape_size=8, seed=1)
    frame = dk.synth_moving_shapes(cfg).frames[0]
    assert det.build_pseudo_gt(d, [frame]) == det.build_pseudo_gt(d, [frame])
    assert all(b.confidence == 1.0 for b in det.build_pseudo_gt(d, [frame])[0])


def _real(n=2, seed=0):
    ds = dk.build_toy_dataset(n_clips=n, clip_length=10, source_size=64, work_size=32, seed=seed, shape_size=12)
    return np.concatenate([ds.train_targets, ds.test_targets])


def test_evaluate_detection_self_black_and_rows():
    real = _real()
    d = det.ToyBlobDetector()
    reports = det.evaluate_detection({"self": real, "black": np.zeros_like(real)}, real, d, ["square", "disk"])
    assert len(reports) == 2 * 2 * 5
    for r in reports:
        if math.isnan(r.ap):
            continue
        assert r.ap == (1.0 if r.pipeline == "self" else 0.0)
    with pytest.raises(ValueError):
        det.evaluate_detection({"x": real[:1]}, real, d)


def test_evaluate_detection_scales_refs_for_larger_frames():
    real = _real()
    big = real.repeat(4, axis=2).repeat(4, axis=3)
    reports = det.evaluate_detection({"sr": big}, real, det.ToyBlobDetector(), ["square", "disk"])
    assert all(r.ap == 1.0 for r in reports if not math.isnan(r.ap))


def test_external_detections(tmp_path):
    boxes = {"real/00000/1": [B("car", 0, 0, 4, 4, 0.9)], "pred/00000/1": []}
    path = det.write_detections(tmp_path / "d.jsonl", boxes)
    ext = det.ExternalDetections.from_file(path)
    assert ext(frame_id="real/00000/1") == boxes["real/00000/1"]
    assert ext(frame_id="pred/00000/1") == []
    with pytest.raises(det.MissingDetections, match="pred/00000/2"):
        ext(frame_id="pred/00000/2")


def test_ap_csv_round_trip(tmp_path):
    real = _real()
    reports = det.evaluate_detection({"self": real}, real, det.ToyBlobDetector(), ["square", "disk"])
    det.write_ap_csv(reports, tmp_path / "ap.csv")
    back = det.read_ap_csv(tmp_path / "ap.csv")
    assert [(r.pipeline, r.label, r.step, r.tp) for r in back] == [(r.pipeline, r.label, r.step, r.tp) for r in reports]
