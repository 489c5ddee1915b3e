"""Model files, the CNN forward pass and per-frame crime/normal verdicts.

A model is a JSON manifest plus a separate blob of little-endian float32
parameters. Each layer's parameters are concatenated in layer order: conv
layers store ``kh x kw x in_channels x out_channels`` weights then
``out_channels`` biases; dense layers store an ``out_dim x in_dim`` matrix
(row-major) then ``out_dim`` biases.
"""

from __future__ import annotations

import json
import zlib
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from .imaging import Frame, to_tensor
from .tensor import Kernel, Tensor, conv2d, dense, flatten, maxpool2d, relu, softmax

DEFAULT_LABELS = ("normal", "crime")
LAYER_KINDS = ("conv", "maxpool", "flatten", "dense", "relu", "softmax")


class ModelError(ValueError):
    """Base class for model load and inference failures."""


class ManifestError(ModelError):
    pass


class UnknownLayerError(ModelError):
    pass


class ShapeChainError(ModelError):
    pass


class WeightCountError(ModelError):
    pass


class ChecksumError(ModelError):
    pass


@dataclass(frozen=True, eq=False)
class Layer:
    kind: str
    config: dict
    in_shape: tuple
    out_shape: tuple
    kernel: Optional[Kernel] = None
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    @property
    def parameter_count(self):
        return _param_count(self.kind, self.config)

    def parameters(self):
        """Flat parameter vector in storage order."""
        if self.kind == "conv":
            return np.concatenate([self.kernel.weights.ravel(), self.kernel.bias])
        if self.kind == "dense":
            return np.concatenate([self.weights.ravel(), self.bias])
        return np.empty(0)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    name: str
    input_shape: tuple
    layers: tuple
    class_labels: tuple = DEFAULT_LABELS
    task: str = "classify"
    grid: Optional[tuple] = None

    @property
    def input_h(self):
        return self.input_shape[0]

    @property
    def input_w(self):
        return self.input_shape[1]

    @property
    def input_c(self):
        return self.input_shape[2]

    @property
    def output_shape(self):
        return self.layers[-1].out_shape if self.layers else self.input_shape

    @property
    def parameter_count(self):
        return sum(layer.parameter_count for layer in self.layers)

    @property
    def crime_index(self):
        """Index of the "crime" label, or the last label if none is named so."""
        labels = list(self.class_labels)
        return labels.index("crime") if "crime" in labels else len(labels) - 1


def _param_count(kind, cfg):
    if kind == "conv":
        return cfg["kh"] * cfg["kw"] * cfg["in_channels"] * cfg["out_channels"] + cfg["out_channels"]
    if kind == "dense":
        return cfg["in_dim"] * cfg["out_dim"] + cfg["out_dim"]
    return 0


def _int_field(desc, key, default=None, minimum=1):
    value = desc.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ManifestError(f"layer {desc.get('kind')!r}: field {key!r} must be an integer >= {minimum}, got {value!r}")
    return value


def _chain(descriptors, input_shape):
    """Validate layer descriptors against the running shape.

    Returns canonical configs with their input and output shapes.
    """
    shape = tuple(input_shape)
    out = []
    for pos, desc in enumerate(descriptors):
        if not isinstance(desc, dict) or "kind" not in desc:
            raise ManifestError(f"layer {pos}: descriptor must be an object with a 'kind'")
        kind = desc["kind"]
        if kind not in LAYER_KINDS:
            raise UnknownLayerError(f"layer {pos}: unknown layer kind {kind!r}")
        where = f"layer {pos} ({kind})"
        if kind in ("conv", "maxpool", "flatten") and len(shape) != 3:
            raise ShapeChainError(f"{where}: needs an HxWxC input, got {shape}")
        if kind in ("dense", "softmax") and len(shape) != 1:
            raise ShapeChainError(f"{where}: needs a flat input, got {shape}")
        if kind == "conv":
            h, w, c = shape
            cfg = {
                "kind": kind,
                "kh": _int_field(desc, "kh"),
                "kw": _int_field(desc, "kw"),
                "in_channels": _int_field(desc, "in_channels", c),
                "out_channels": _int_field(desc, "out_channels"),
                "stride": _int_field(desc, "stride", 1),
            }
            if cfg["in_channels"] != c:
                raise ShapeChainError(f"{where}: declares {cfg['in_channels']} input channels, previous layer gives {c}")
            if cfg["kh"] > h or cfg["kw"] > w:
                raise ShapeChainError(f"{where}: kernel {cfg['kh']}x{cfg['kw']} exceeds input {h}x{w}")
            s = cfg["stride"]
            new = ((h - cfg["kh"]) // s + 1, (w - cfg["kw"]) // s + 1, cfg["out_channels"])
        elif kind == "maxpool":
            h, w, c = shape
            cfg = {"kind": kind, "ph": _int_field(desc, "ph"), "pw": _int_field(desc, "pw")}
            if cfg["ph"] > h or cfg["pw"] > w:
                raise ShapeChainError(f"{where}: window {cfg['ph']}x{cfg['pw']} exceeds input {h}x{w}")
            new = (h // cfg["ph"], w // cfg["pw"], c)
        elif kind == "flatten":
            cfg = {"kind": kind}
            new = (shape[0] * shape[1] * shape[2],)
        elif kind == "dense":
            cfg = {
                "kind": kind,
                "in_dim": _int_field(desc, "in_dim", shape[0]),
                "out_dim": _int_field(desc, "out_dim"),
            }
            if cfg["in_dim"] != shape[0]:
                raise ShapeChainError(f"{where}: declares {cfg['in_dim']} inputs, previous layer gives {shape[0]}")
            new = (cfg["out_dim"],)
        else:
            cfg = {"kind": kind}
            new = shape
        out.append((cfg, shape, new))
        shape = new
    return out


@dataclass(frozen=True)
class Architecture:
    """Validated manifest without weights."""

    name: str
    input_shape: tuple
    layers: tuple  # of (config, in_shape, out_shape)
    class_labels: tuple
    parameter_count: int
    weight_checksum: int
    task: str = "classify"
    grid: Optional[tuple] = None


def read_manifest(manifest: bytes) -> Architecture:
    """Parse and validate a manifest (shape chain, labels, parameter count)."""
    try:
        doc = json.loads(manifest)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    for key in ("name", "input", "layers", "parameter_count", "weight_checksum"):
        if key not in doc:
            raise ManifestError(f"manifest missing field {key!r}")
    name = doc["name"]
    if not isinstance(name, str):
        raise ManifestError("manifest 'name' must be a string")
    shape = doc["input"]
    if (not isinstance(shape, list) or len(shape) != 3
            or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in shape)):
        raise ManifestError(f"manifest 'input' must be [h, w, c] positive integers, got {shape!r}")
    if not isinstance(doc["layers"], list):
        raise ManifestError("manifest 'layers' must be a list")
    labels = doc.get("class_labels", list(DEFAULT_LABELS))
    if not isinstance(labels, list) or not labels or not all(isinstance(v, str) for v in labels):
        raise ManifestError("manifest 'class_labels' must be a non-empty list of strings")
    task = doc.get("task", "classify")
    if task not in ("classify", "detect"):
        raise ManifestError(f"manifest 'task' must be 'classify' or 'detect', got {task!r}")
    declared = doc["parameter_count"]
    checksum = doc["weight_checksum"]
    if isinstance(declared, bool) or not isinstance(declared, int) or declared < 0:
        raise ManifestError("manifest 'parameter_count' must be a non-negative integer")
    if isinstance(checksum, bool) or not isinstance(checksum, int) or not 0 <= checksum < 2**32:
        raise ManifestError("manifest 'weight_checksum' must be a CRC32 integer")

    chain = _chain(doc["layers"], shape)
    out_shape = chain[-1][2] if chain else tuple(shape)
    grid = None
    if task == "classify":
        if len(out_shape) != 1 or out_shape[0] != len(labels):
            raise ShapeChainError(
                f"final output shape {out_shape} does not match {len(labels)} class labels"
            )
    else:
        grid = doc.get("grid")
        if (not isinstance(grid, list) or len(grid) != 3
                or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in grid)):
            raise ManifestError("detector manifest needs 'grid': [S, B, C]")
        s, b, c = grid
        if c != len(labels):
            raise ManifestError(f"grid declares {c} classes but {len(labels)} labels are given")
        want = s * s * (5 * b + c)
        size = int(np.prod(out_shape))
        if size != want:
            raise ShapeChainError(f"detector output has {size} values, grid {grid} needs {want}")
        grid = tuple(grid)
    implied = sum(_param_count(cfg["kind"], cfg) for cfg, _, _ in chain)
    if implied != declared:
        raise WeightCountError(
            f"manifest declares {declared} parameters but its layers imply {implied}"
        )
    return Architecture(name, tuple(shape), tuple(chain), tuple(labels), declared,
                        checksum, task, grid)


def load_model(manifest: bytes, weights: bytes) -> ModelSpec:
    arch = read_manifest(manifest)
    if len(weights) != arch.parameter_count * 4:
        raise WeightCountError(
            f"weight blob holds {len(weights)} bytes, expected {arch.parameter_count} float32 values "
            f"({arch.parameter_count * 4} bytes)"
        )
    crc = zlib.crc32(weights)
    if crc != arch.weight_checksum:
        raise ChecksumError(f"weight checksum {crc:#010x} != manifest {arch.weight_checksum:#010x}")
    values = np.frombuffer(weights, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise ModelError("weight blob contains non-finite values")
    layers = []
    pos = 0
    for cfg, in_shape, out_shape in arch.layers:
        kind = cfg["kind"]
        n = _param_count(kind, cfg)
        block = values[pos:pos + n]
        pos += n
        if kind == "conv":
            split = n - cfg["out_channels"]
            kernel = Kernel.from_flat(cfg["kh"], cfg["kw"], cfg["in_channels"], cfg["out_channels"],
                                      block[:split], block[split:])
            layers.append(Layer(kind, cfg, in_shape, out_shape, kernel=kernel))
        elif kind == "dense":
            split = cfg["in_dim"] * cfg["out_dim"]
            w = block[:split].reshape(cfg["out_dim"], cfg["in_dim"])
            layers.append(Layer(kind, cfg, in_shape, out_shape, weights=w, bias=block[split:].copy()))
        else:
            layers.append(Layer(kind, cfg, in_shape, out_shape))
    return ModelSpec(arch.name, arch.input_shape, tuple(layers), arch.class_labels,
                     arch.task, arch.grid)


def load_model_files(manifest_path, weights_path=None) -> ModelSpec:
    """Load a manifest and its blob; the blob defaults to ``<manifest stem>.bin``."""
    if weights_path is None:
        weights_path = _default_weights_path(manifest_path)
    with open(manifest_path, "rb") as fh:
        manifest = fh.read()
    with open(weights_path, "rb") as fh:
        blob = fh.read()
    return load_model(manifest, blob)


def _default_weights_path(manifest_path):
    path = str(manifest_path)
    return (path[:-5] if path.endswith(".json") else path) + ".bin"


def serialize_model(model: ModelSpec) -> tuple[bytes, bytes]:
    """Return ``(manifest bytes, weight blob)``."""
    params = [layer.parameters() for layer in model.layers]
    flat = np.concatenate(params) if params else np.empty(0)
    blob = flat.astype("<f4").tobytes()
    doc = {
        "name": model.name,
        "input": list(model.input_shape),
        "layers": [dict(layer.config) for layer in model.layers],
        "class_labels": list(model.class_labels),
        "parameter_count": int(flat.size),
        "weight_checksum": zlib.crc32(blob),
    }
    if model.task != "classify":
        doc["task"] = model.task
        doc["grid"] = list(model.grid)
    manifest = (json.dumps(doc, indent=2) + "\n").encode("utf-8")
    return manifest, blob


def build_model(name, input_shape, layer_specs, class_labels=DEFAULT_LABELS,
                task="classify", grid=None) -> ModelSpec:
    """Assemble a model from ``(descriptor, params)`` pairs.

    ``params`` is ``(weights, bias)`` for conv and dense layers and ``None``
    otherwise. Parameters are rounded to float32 as they would be on disk.
    """
    descriptors = [d for d, _ in layer_specs]
    blocks = []
    for (desc, p) in layer_specs:
        if desc.get("kind") in ("conv", "dense"):
            w, b = p
            blocks.append(np.concatenate([np.asarray(w, dtype=np.float64).ravel(),
                                          np.asarray(b, dtype=np.float64).ravel()]))
    blob = (np.concatenate(blocks) if blocks else np.empty(0)).astype("<f4").tobytes()
    doc = {
        "name": name,
        "input": list(input_shape),
        "layers": descriptors,
        "class_labels": list(class_labels),
        "parameter_count": len(blob) // 4,
        "weight_checksum": zlib.crc32(blob),
    }
    if task != "classify":
        doc["task"] = task
        doc["grid"] = list(grid)
    return load_model(json.dumps(doc).encode(), blob)


def forward(model: ModelSpec, input: Tensor) -> np.ndarray:
    if input.shape != tuple(model.input_shape):
        raise ModelError(f"input shape {input.shape} != model input {tuple(model.input_shape)}")
    x = input
    for layer in model.layers:
        kind = layer.kind
        if kind == "conv":
            x = conv2d(x, layer.kernel, layer.config["stride"])
        elif kind == "maxpool":
            x = maxpool2d(x, layer.config["ph"], layer.config["pw"])
        elif kind == "flatten":
            x = flatten(x)
        elif kind == "dense":
            x = dense(x, layer.weights, layer.bias)
        elif kind == "relu":
            x = Tensor(relu(x.array)) if isinstance(x, Tensor) else relu(x)
        elif kind == "softmax":
            x = softmax(x)
    if isinstance(x, Tensor):
        x = flatten(x)
    return x


@dataclass(frozen=True)
class FrameVerdict:
    frame: int
    probabilities: tuple
    predicted_label: str
    crime_probability: float

    def to_json(self):
        return {"frame": self.frame, "probabilities": list(self.probabilities),
                "label": self.predicted_label}


def _match_channels(pixels, channels):
    if pixels.shape[2] == channels:
        return pixels
    if channels == 1:
        return pixels.mean(axis=2, keepdims=True)
    if pixels.shape[2] == 1:
        return np.repeat(pixels, channels, axis=2)
    raise ModelError(f"cannot map {pixels.shape[2]} frame channels onto {channels} model channels")


def frame_input(model: ModelSpec, frame: Frame) -> Tensor:
    """Resize ``frame`` to the model input and match its channel count."""
    t = to_tensor(frame, model.input_h, model.input_w)
    if t.channels != model.input_c:
        t = Tensor(_match_channels(t.array, model.input_c))
    return t


def classify_frame(model: ModelSpec, frame: Frame) -> FrameVerdict:
    probs = forward(model, frame_input(model, frame))
    best = int(np.argmax(probs))  # first maximum: lowest index wins ties
    return FrameVerdict(
        frame=frame.index,
        probabilities=tuple(float(p) for p in probs),
        predicted_label=model.class_labels[best],
        crime_probability=float(probs[model.crime_index]),
    )


@dataclass
class AlarmAggregator:
    """k-of-N vote over the most recent per-frame crime flags."""

    window_size: int = 5
    trigger_count: int = 3
    flags: deque = field(default=None, repr=False)

    def __post_init__(self):
        if not 1 <= self.trigger_count <= self.window_size:
            raise ValueError(
                f"need 1 <= trigger_count <= window_size, got k={self.trigger_count} N={self.window_size}"
            )
        self.flags = deque(maxlen=self.window_size)

    def push(self, flag: bool) -> bool:
        self.flags.append(bool(flag))
        return sum(self.flags) >= self.trigger_count

    def update(self, verdict: FrameVerdict, frame_threshold: float = 0.5) -> bool:
        return aggregate(self, verdict, frame_threshold)


def aggregate(agg: AlarmAggregator, verdict: FrameVerdict, frame_threshold: float = 0.5) -> bool:
    """Advance ``agg`` by one frame; True means the alarm condition holds."""
    if not 0.0 <= frame_threshold <= 1.0:
        raise ValueError(f"frame_threshold must be in [0, 1], got {frame_threshold}")
    return agg.push(verdict.crime_probability >= frame_threshold)


INTENSITY_GAIN = 8.0


def build_intensity_model(size: int = 8) -> ModelSpec:
    """Training-free reference classifier whose crime probability rises with
    mean frame brightness: ``sigmoid(gain * (2 * mean - 1))``.

    Architecture: 2x2 stride-2 averaging conv, relu, flatten, dense to two
    logits, softmax. Every weight is exactly representable in float32.
    """
    if size % 2:
        raise ValueError("size must be even")
    cells = (size // 2) ** 2
    step = INTENSITY_GAIN / cells
    dense_w = np.vstack([np.full(cells, -step), np.full(cells, step)])
    dense_b = np.array([INTENSITY_GAIN / 2, -INTENSITY_GAIN / 2])
    return build_model(
        "intensity-reference",
        (size, size, 1),
        [
            ({"kind": "conv", "kh": 2, "kw": 2, "in_channels": 1, "out_channels": 1, "stride": 2},
             (np.full((2, 2, 1, 1), 0.25), np.zeros(1))),
            ({"kind": "relu"}, None),
            ({"kind": "flatten"}, None),
            ({"kind": "dense", "in_dim": cells, "out_dim": 2}, (dense_w, dense_b)),
            ({"kind": "softmax"}, None),
        ],
    )


def bundled_model_paths():
    """Manifest and blob paths of the packaged intensity model."""
    base = resources.files("sentinel") / "data"
    return str(base / "intensity.json"), str(base / "intensity.bin")


def load_bundled_model() -> ModelSpec:
    return load_model_files(*bundled_model_paths())
