"""Pure-Python (numpy) versions of the compiled kernels in ``_ext.pyx``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "python"


def conv2d(x, w, b, stride):
    kh, kw = w.shape[0], w.shape[1]
    # windows: (oh, ow, cin, kh, kw)
    windows = sliding_window_view(x, (kh, kw), axis=(0, 1))[::stride, ::stride]
    out = np.einsum("ijcab,abco->ijo", windows, w, optimize=True)
    return np.ascontiguousarray(out + b)


def maxpool2d(x, ph, pw):
    oh, ow, ch = x.shape[0] // ph, x.shape[1] // pw, x.shape[2]
    trimmed = x[: oh * ph, : ow * pw]
    return np.ascontiguousarray(trimmed.reshape(oh, ph, ow, pw, ch).max(axis=(1, 3)))


def dense(x, w, b):
    return w @ x + b


def _iou_row(boxes, i, others):
    bx = boxes[others]
    iw = np.minimum(boxes[i, 2], bx[:, 2]) - np.maximum(boxes[i, 0], bx[:, 0])
    ih = np.minimum(boxes[i, 3], bx[:, 3]) - np.maximum(boxes[i, 1], bx[:, 1])
    overlap = (iw > 0.0) & (ih > 0.0)
    inter = np.where(overlap, iw * ih, 0.0)
    area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
    areas = (bx[:, 2] - bx[:, 0]) * (bx[:, 3] - bx[:, 1])
    union = area_i + areas - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(overlap & (union > 0.0), inter / union, 0.0)


def greedy_nms(boxes, class_ids, order, iou_threshold):
    """Indices kept by greedy suppression, visiting candidates in ``order``."""
    remaining = np.asarray(order, dtype=np.int64)
    keep = []
    while remaining.size:
        i = int(remaining[0])
        keep.append(i)
        rest = remaining[1:]
        same = class_ids[rest] == class_ids[i]
        drop = np.zeros(rest.size, dtype=bool)
        if same.any():
            drop[same] = _iou_row(boxes, i, rest[same]) > iou_threshold
        remaining = rest[~drop]
    return keep
