"""Independent reference implementations used as test oracles.

These are written from the textbook definitions with plain Python loops and
exact rational arithmetic where that is cheap; they share no code with the
package.
"""

from fractions import Fraction


def box_iou(a, b):
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def greedy_tp(preds, refs, thresh):
    """Number of true positives for ``preds = [(conf, box)]`` in descending-conf order."""
    used = set()
    tp = 0
    for _, box in preds:
        cands = [(box_iou(box, r), -j, j) for j, r in enumerate(refs) if j not in used]
        if not cands:
            continue
        best_iou, _, j = max(cands)
        if best_iou >= thresh:
            used.add(j)
            tp += 1
    return tp


def sweep_ap(frames, thresh=0.5, n_points=11):
    """AP by exhaustive threshold sweep.

    ``frames`` is a list of ``(preds, refs)`` with ``preds = [(conf, box)]``.
    For every distinct confidence ``t`` the detections with ``conf >= t`` are
    matched from scratch; the resulting (recall, precision) points are
    interpolated at ``n_points`` recall levels (``n_points=0``: area under
    the monotone envelope over all points). Returns a Fraction, or None
    without references.
    """
    n_refs = sum(len(r) for _, r in frames)
    if n_refs == 0:
        return None
    confs = sorted({c for preds, _ in frames for c, _ in preds}, reverse=True)
    points = []
    for t in confs:
        tp = fp = 0
        for preds, refs in frames:
            kept = sorted([p for p in preds if p[0] >= t], key=lambda p: -p[0])
            k = greedy_tp(kept, refs, thresh)
            tp += k
            fp += len(kept) - k
        points.append((Fraction(tp, n_refs), Fraction(tp, tp + fp)))
    if n_points == 0:
        area = Fraction(0)
        prev_r = Fraction(0)
        for r, _ in sorted(points):
            if r > prev_r:
                area += (r - prev_r) * max(p for rr, p in points if rr >= r)
                prev_r = r
        return area
    total = Fraction(0)
    for k in range(n_points):
        level = Fraction(k, n_points - 1)
        ps = [p for r, p in points if r >= level]
        total += max(ps) if ps else 0
    return total / n_points
