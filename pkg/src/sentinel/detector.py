"""Grid-based single-stage detection post-processing: decode, IoU, NMS."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels


class PredictionError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Corner-form box in normalized image coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (0.0 <= self.x_min <= self.x_max <= 1.0 and 0.0 <= self.y_min <= self.y_max <= 1.0):
            raise ValueError(f"invalid box {self.as_list()}")

    @property
    def area(self):
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    class_name: str
    confidence: float
    score: float

    def to_json(self, frame: int):
        return {
            "frame": frame,
            "class_id": self.class_id,
            "class_name": self.class_name,
            "score": self.score,
            "confidence": self.confidence,
            "bbox": self.bbox.as_list(),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            bbox=BBox(*(float(v) for v in obj["bbox"])),
            class_id=int(obj["class_id"]),
            class_name=str(obj.get("class_name", obj["class_id"])),
            confidence=float(obj["confidence"]),
            score=float(obj["score"]),
        )


@dataclass(frozen=True, eq=False)
class GridPrediction:
    """``S x S`` cells, each with ``B`` boxes ``(x, y, w, h, conf)`` followed
    by ``C`` class probabilities shared by the cell's boxes."""

    S: int
    B: int
    C: int
    values: np.ndarray
    class_names: Optional[tuple] = None

    def __post_init__(self):
        if self.class_names is not None:
            if len(self.class_names) != self.C:
                raise PredictionError(f"{len(self.class_names)} class names for {self.C} classes")
            object.__setattr__(self, "class_names", tuple(str(n) for n in self.class_names))
        if min(self.S, self.B, self.C) < 1:
            raise PredictionError(f"grid dims must be positive, got S={self.S} B={self.B} C={self.C}")
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        want = self.S * self.S * (self.B * 5 + self.C)
        if v.size != want:
            raise PredictionError(
                f"prediction has {v.size} values, S={self.S} B={self.B} C={self.C} needs {want}"
            )
        if not np.all(np.isfinite(v)):
            raise PredictionError("prediction contains non-finite values")
        cells = v.reshape(self.S, self.S, self.B * 5 + self.C)
        conf = cells[:, :, 4:self.B * 5:5]
        probs = cells[:, :, self.B * 5:]
        if conf.min() < 0.0 or conf.max() > 1.0 or probs.min() < 0.0 or probs.max() > 1.0:
            raise PredictionError("confidences and class probabilities must lie in [0, 1]")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def cells(self):
        return self.values.reshape(self.S, self.S, self.B * 5 + self.C)


def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area; 0 when the union is empty."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _clamp(v):
    return min(max(v, 0.0), 1.0)


def decode_grid(pred: GridPrediction, conf_threshold: float = 0.25,
                class_names: Optional[Sequence[str]] = None) -> list[Detection]:
    """Turn a grid prediction into candidate detections, row-major by cell then box.

    Box centres are cell offsets (``(col + x) / S``, ``(row + y) / S``); widths
    and heights are fractions of the whole image.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"conf_threshold must be in [0, 1], got {conf_threshold}")
    S, B = pred.S, pred.B
    if class_names is None:
        class_names = pred.class_names or [str(i) for i in range(pred.C)]
    names = list(class_names)
    if len(names) != pred.C:
        raise PredictionError(f"{len(names)} class names for {pred.C} classes")
    out = []
    cells = pred.cells
    for r in range(S):
        for c in range(S):
            cell = cells[r, c]
            probs = cell[B * 5:]
            cls = int(np.argmax(probs))
            p = float(probs[cls])
            for b in range(B):
                x, y, w, h, conf = (float(v) for v in cell[b * 5:b * 5 + 5])
                if conf < conf_threshold or conf <= 0.0:
                    continue
                cx, cy = (c + x) / S, (r + y) / S
                w, h = max(w, 0.0), max(h, 0.0)
                box = BBox(_clamp(cx - w / 2), _clamp(cy - h / 2),
                           _clamp(cx + w / 2), _clamp(cy + h / 2))
                out.append(Detection(box, cls, names[cls], conf, conf * p))
    return out


def _nms_order(detections):
    # descending score, then lower class_id, then input position
    return sorted(range(len(detections)),
                  key=lambda i: (-detections[i].score, detections[i].class_id, i))


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5, *, backend=None) -> list[Detection]:
    """Greedy per-class suppression; survivors come out best score first."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if not detections:
        return []
    impl = backend or kernels.active
    boxes = np.array([d.bbox.as_list() for d in detections], dtype=np.float64)
    class_ids = np.array([d.class_id for d in detections], dtype=np.int64)
    order = np.array(_nms_order(detections), dtype=np.int64)
    keep = impl.greedy_nms(boxes, class_ids, order, float(iou_threshold))
    return [detections[i] for i in keep]


def load_prediction(text) -> GridPrediction:
    """Parse ``{"S": .., "B": .., "C": .., "values": [...]}``."""
    try:
        doc = json.loads(text)
        return GridPrediction(int(doc["S"]), int(doc["B"]), int(doc["C"]), doc["values"],
                              doc.get("class_names"))
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, PredictionError):
            raise
        raise PredictionError(f"malformed prediction document: {exc}") from None


def dump_prediction(pred: GridPrediction) -> str:
    doc = {"S": pred.S, "B": pred.B, "C": pred.C, "values": pred.values.tolist()}
    if pred.class_names is not None:
        doc["class_names"] = list(pred.class_names)
    return json.dumps(doc)


def detections_to_jsonl(detections, frame: int) -> str:
    return "".join(json.dumps(d.to_json(frame)) + "\n" for d in detections)


def prediction_from_output(values, grid, class_names=None) -> GridPrediction:
    """Wrap raw network outputs as a prediction, clipped into [0, 1]."""
    S, B, C = grid
    v = np.clip(np.asarray(values, dtype=np.float64).reshape(-1), 0.0, 1.0)
    return GridPrediction(S, B, C, v, class_names)
