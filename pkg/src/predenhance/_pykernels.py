"""Numpy implementations of the numeric kernels.

These mirror ``_ckernels.pyx`` one-for-one and are used whenever the compiled
extension is unavailable (or ``PREDENHANCE_PURE_PYTHON=1`` is set).
"""

import math

import numpy as np

CUBIC_A = -0.5


def cubic_weight(x, a=CUBIC_A):
    x = abs(x)
    if x <= 1.0:
        return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    if x < 2.0:
        return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    return 0.0


def _resize_matrix(in_len, out_len):
    scale = in_len / out_len
    stretch = max(scale, 1.0)
    support = 2.0 * stretch
    mat = np.zeros((out_len, in_len))
    for i in range(out_len):
        center = (i + 0.5) * scale - 0.5
        lo = int(math.ceil(center - support))
        hi = int(math.floor(center + support))
        total = 0.0
        row = mat[i]
        for j in range(lo, hi + 1):
            w = cubic_weight((j - center) / stretch)
            if w == 0.0:
                continue
            row[min(max(j, 0), in_len - 1)] += w
            total += w
        row /= total
    return mat


def bicubic_resize(src, out_h, out_w):
    """Resize an ``(H, W, C)`` float64 array with an antialiased Catmull-Rom kernel."""
    src = np.ascontiguousarray(src, dtype=np.float64)
    rows = _resize_matrix(src.shape[0], out_h)
    cols = _resize_matrix(src.shape[1], out_w)
    tmp = np.einsum("oh,hwc->owc", rows, src)
    return np.einsum("pw,owc->opc", cols, tmp)


def gaussian_filter_valid(img, kernel):
    """Separable correlation of a 2-D image with ``kernel``, 'valid' region only."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    k = len(kernel)
    h, w = img.shape
    if h < k or w < k:
        raise ValueError("image smaller than filter window")
    tmp = np.zeros((h - k + 1, w))
    for t in range(k):
        tmp += kernel[t] * img[t:t + h - k + 1, :]
    out = np.zeros((h - k + 1, w - k + 1))
    for t in range(k):
        out += kernel[t] * tmp[:, t:t + w - k + 1]
    return out


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0.0, None) * np.clip(iy1 - iy0, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def greedy_match(ious, thresh):
    """Match rows (predictions, already in descending confidence) to columns.

    Returns an int array holding the matched column per row, or -1.
    """
    ious = np.asarray(ious, dtype=np.float64)
    n_pred, n_ref = ious.shape
    taken = [False] * n_ref
    out = np.full(n_pred, -1, dtype=np.int64)
    for i in range(n_pred):
        best = -1
        best_iou = -1.0
        for j in range(n_ref):
            if not taken[j] and ious[i, j] > best_iou:
                best = j
                best_iou = ious[i, j]
        if best >= 0 and best_iou >= thresh:
            taken[best] = True
            out[i] = best
    return out


def pr_points(confidences, is_tp, n_refs):
    """Precision/recall at every distinct confidence threshold.

    ``confidences`` must be sorted in descending order; tied confidences form a
    single operating point.
    """
    n = len(confidences)
    recalls = []
    precisions = []
    tp = 0
    fp = 0
    for i in range(n):
        if is_tp[i]:
            tp += 1
        else:
            fp += 1
        if i + 1 < n and confidences[i + 1] == confidences[i]:
            continue
        recalls.append(tp / n_refs)
        precisions.append(tp / (tp + fp))
    return np.array(recalls), np.array(precisions)


def average_precision_sorted(confidences, is_tp, n_refs, n_points=11):
    """AP from a confidence-sorted detection list.

    ``n_points > 1`` gives the interpolated variant over evenly spaced recall
    levels; ``n_points == 0`` gives the all-points area under the precision
    envelope.
    """
    if n_refs <= 0:
        return math.nan
    recalls, precisions = pr_points(confidences, is_tp, n_refs)
    if n_points > 1:
        total = 0.0
        for k in range(n_points):
            level = k / (n_points - 1)
            best = 0.0
            for r, p in zip(recalls, precisions):
                if r >= level and p > best:
                    best = p
            total += best
        return total / n_points
    mrec = np.concatenate([[0.0], recalls, [1.0]])
    mpre = np.concatenate([[0.0], precisions, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    total = 0.0
    for i in range(1, len(mrec)):
        total += (mrec[i] - mrec[i - 1]) * mpre[i]
    return total
