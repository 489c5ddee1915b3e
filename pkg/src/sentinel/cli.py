"""``sentinel`` command line: model-info, classify, detect, heatmap, run.

Exit status is 0 when no alarm fired, 2 when at least one did (classify and
run), and 1 on any operational error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

from . import __version__
from .alerting import AlertDispatcher, AlertLogError, DispatchPolicy, event_for_frame, valid_endpoint
from .classifier import (
    AlarmAggregator,
    ModelError,
    classify_frame,
    forward,
    frame_input,
    load_bundled_model,
    load_model_files,
    read_manifest,
)
from .detector import (
    Detection,
    PredictionError,
    decode_grid,
    detections_to_jsonl,
    load_prediction,
    nms,
    prediction_from_output,
)
from .heatmap import HeatmapGrid, accumulate, dump_json, merge, render_ppm
from .imaging import FrameSourceError, NetpbmError, open_sequence
from .tensor import TensorError, dense_weight_count

log = logging.getLogger("sentinel")

EXIT_OK, EXIT_ERROR, EXIT_ALARM = 0, 1, 2
BUNDLED = "bundled"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    frames_dir: Optional[str] = None
    frame_pattern: str = "*.p[gpn]m"
    classifier_model: str = BUNDLED
    detector_model: Optional[str] = None
    predictions_dir: Optional[str] = None
    fps: float = 10.0
    frame_threshold: float = 0.5
    window: int = 5
    trigger: int = 3
    conf_threshold: float = 0.25
    iou_threshold: float = 0.5
    heatmap_grid: int = 32
    heatmap_cell_px: int = 8
    alert_endpoint: Optional[str] = None
    cooldown_s: float = 60.0
    max_retries: int = 3
    backoff_base_s: float = 1.0
    request_timeout_s: float = 5.0
    event_log: Optional[str] = None
    heatmap_out: Optional[str] = None
    heatmap_json: Optional[str] = None
    verdicts_out: Optional[str] = None
    detections_out: Optional[str] = None
    summary_out: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        for name in ("frame_threshold", "conf_threshold", "iou_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if not 1 <= self.trigger <= self.window:
            raise ConfigError(f"need window >= trigger >= 1, got window={self.window} trigger={self.trigger}")
        if self.fps <= 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")
        if self.heatmap_grid < 1 or self.heatmap_cell_px < 1 or self.workers < 1:
            raise ConfigError("heatmap_grid, heatmap_cell_px and workers must be positive")
        if self.cooldown_s < 0 or self.max_retries < 0 or self.backoff_base_s < 0:
            raise ConfigError("cooldown_s, max_retries and backoff_base_s must be non-negative")
        if self.alert_endpoint is not None and not valid_endpoint(self.alert_endpoint):
            raise ConfigError(f"malformed alert_endpoint {self.alert_endpoint!r}")

    @property
    def policy(self):
        return DispatchPolicy(self.cooldown_s, self.max_retries, self.backoff_base_s,
                              self.request_timeout_s)

    @classmethod
    def load(cls, path=None, **overrides):
        values = {}
        if path:
            try:
                with open(path, encoding="utf-8") as fh:
                    values = json.load(fh)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            if not isinstance(values, dict):
                raise ConfigError(f"config {path} must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _load_classifier(path):
    if path in (None, BUNDLED):
        return load_bundled_model()
    return _load_model(path)


def _load_model(path):
    try:
        return load_model_files(path)
    except OSError as exc:
        raise ModelError(f"{path}: {exc.strerror or exc}") from None
    except ModelError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def _open_frames(cfg: RunConfig):
    if not cfg.frames_dir:
        raise ConfigError("frames_dir is required")
    return open_sequence(cfg.frames_dir, cfg.frame_pattern)


class _Output:
    """File or stdout sink; ``None`` path means discard unless ``stdout``."""

    def __init__(self, path, stdout=False):
        self.fh = None
        self.owned = False
        if path:
            self.fh = open(path, "w", encoding="utf-8")
            self.owned = True
        elif stdout:
            self.fh = sys.stdout

    def write(self, text):
        if self.fh is not None:
            self.fh.write(text)

    def close(self):
        if self.owned:
            self.fh.close()


def _parallel_map(fn, items, workers):
    if workers <= 1:
        return map(fn, items)
    pool = ThreadPoolExecutor(max_workers=workers)
    try:
        # Executor.map yields results in input order
        return list(pool.map(fn, items))
    finally:
        pool.shutdown()


# ---------------------------------------------------------------- model-info

def model_info_report(manifest: bytes) -> str:
    arch = read_manifest(manifest)
    h, w, c = arch.input_shape
    lines = [f"model: {arch.name}", f"input: {h}x{w}x{c}",
             f"classes: {', '.join(arch.class_labels)}"]
    total = 0
    for pos, (cfg, in_shape, out_shape) in enumerate(arch.layers):
        shape_in = "x".join(map(str, in_shape))
        shape_out = "x".join(map(str, out_shape))
        line = f"  [{pos}] {cfg['kind']:<8} {shape_in} -> {shape_out}"
        if cfg["kind"] == "flatten":
            line += f"  flattened inputs: {out_shape[0]}"
        elif cfg["kind"] == "dense":
            n = dense_weight_count(cfg["in_dim"], cfg["out_dim"])
            total += n
            line += f"  dense weights: {n}"
        lines.append(line)
    lines.append(f"total dense weights: {total}")
    lines.append(f"stored parameters: {arch.parameter_count}")
    return "\n".join(lines) + "\n"


def cmd_model_info(args) -> int:
    path = args.model
    if path == BUNDLED:
        from .classifier import bundled_model_paths
        path = bundled_model_paths()[0]
    try:
        with open(path, "rb") as fh:
            manifest = fh.read()
    except OSError as exc:
        raise ModelError(f"{path}: {exc.strerror or exc}") from None
    try:
        report = model_info_report(manifest)
    except ModelError as exc:
        raise type(exc)(f"{path}: {exc}") from None
    sys.stdout.write(report)
    return EXIT_OK


# ---------------------------------------------------------------- classify

def run_classify(cfg: RunConfig, out) -> int:
    model = _load_classifier(cfg.classifier_model)
    frames = list(_open_frames(cfg))
    agg = AlarmAggregator(cfg.window, cfg.trigger)
    alarmed = False
    for verdict in _parallel_map(lambda f: classify_frame(model, f), frames, cfg.workers):
        out.write(json.dumps(verdict.to_json()) + "\n")
        alarmed |= agg.update(verdict, cfg.frame_threshold)
    return EXIT_ALARM if alarmed else EXIT_OK


def cmd_classify(args) -> int:
    cfg = _config_from_args(args)
    out = _Output(cfg.verdicts_out, stdout=True)
    try:
        return run_classify(cfg, out)
    finally:
        out.close()


# ---------------------------------------------------------------- detect

class _DetectionStage:
    """Per-frame decode + NMS from a detector model or prediction files."""

    def __init__(self, cfg: RunConfig, n_frames: Optional[int] = None):
        self.cfg = cfg
        self.model = None
        self.predictions = None
        if cfg.detector_model:
            self.model = _load_model(cfg.detector_model)
            if self.model.task != "detect":
                raise ModelError(f"{cfg.detector_model}: not a detector model (task={self.model.task!r})")
        elif cfg.predictions_dir:
            try:
                names = sorted(n for n in os.listdir(cfg.predictions_dir) if n.endswith(".json"))
            except OSError as exc:
                raise FrameSourceError(f"cannot read predictions dir {cfg.predictions_dir}: {exc.strerror or exc}") from None
            self.predictions = [os.path.join(cfg.predictions_dir, n) for n in names]
            if n_frames is not None and len(self.predictions) != n_frames:
                raise ConfigError(
                    f"{len(self.predictions)} prediction files for {n_frames} frames"
                )

    @property
    def enabled(self):
        return self.model is not None or self.predictions is not None

    def __len__(self):
        return len(self.predictions) if self.predictions is not None else 0

    def prediction(self, index, frame=None):
        if self.model is not None:
            out = forward(self.model, frame_input(self.model, frame))
            return prediction_from_output(out, self.model.grid, self.model.class_labels)
        path = self.predictions[index]
        try:
            with open(path, encoding="utf-8") as fh:
                return load_prediction(fh.read())
        except PredictionError as exc:
            raise PredictionError(f"{os.path.basename(path)}: {exc}") from None

    def detect(self, index, frame=None) -> list[Detection]:
        pred = self.prediction(index, frame)
        return nms(decode_grid(pred, self.cfg.conf_threshold), self.cfg.iou_threshold)


def run_detect(cfg: RunConfig, out) -> int:
    if cfg.detector_model:
        stage = _DetectionStage(cfg)
        frames = list(_open_frames(cfg))
        items = [(f.index, f) for f in frames]
    elif cfg.predictions_dir:
        stage = _DetectionStage(cfg)
        items = [(i, None) for i in range(len(stage))]
    else:
        raise ConfigError("detect needs detector_model (with frames_dir) or predictions_dir")
    results = _parallel_map(lambda it: stage.detect(*it), items, cfg.workers)
    for (index, _), dets in zip(items, results):
        out.write(detections_to_jsonl(dets, index))
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _config_from_args(args)
    out = _Output(cfg.detections_out, stdout=True)
    try:
        return run_detect(cfg, out)
    finally:
        out.close()


# ---------------------------------------------------------------- heatmap

def read_detections_jsonl(path):
    """Detections grouped by frame, in order of first appearance."""
    frames: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                det = Detection.from_json(obj)
                frame = int(obj["frame"])
            except (ValueError, KeyError, TypeError) as exc:
                raise PredictionError(f"{path}: line {lineno}: malformed detection ({exc})") from None
            frames.setdefault(frame, []).append(det)
    return frames


def build_heatmap(paths, G: int) -> HeatmapGrid:
    total = HeatmapGrid.empty(G)
    for path in paths:
        partial = HeatmapGrid.empty(G)
        for dets in read_detections_jsonl(path).values():
            partial = accumulate(partial, dets)
        total = merge(total, partial)
    return total


def _write_heatmap(grid: HeatmapGrid, cfg: RunConfig):
    if cfg.heatmap_out:
        with open(cfg.heatmap_out, "wb") as fh:
            fh.write(render_ppm(grid, cfg.heatmap_cell_px))
    if cfg.heatmap_json:
        with open(cfg.heatmap_json, "w", encoding="utf-8") as fh:
            fh.write(dump_json(grid) + "\n")


def cmd_heatmap(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.heatmap_out:
        raise ConfigError("heatmap needs --heatmap-out")
    try:
        grid = build_heatmap(args.detections, cfg.heatmap_grid)
    except OSError as exc:
        raise FrameSourceError(f"cannot read detections: {exc}") from None
    _write_heatmap(grid, cfg)
    return EXIT_OK


# ---------------------------------------------------------------- run

def run_pipeline(cfg: RunConfig, *, session=None, sleep=None) -> tuple[int, dict]:
    """End-to-end pass. Returns ``(exit status, summary)``."""
    model = _load_classifier(cfg.classifier_model)
    frames = list(_open_frames(cfg))
    stage = _DetectionStage(cfg, n_frames=len(frames) if cfg.predictions_dir else None)
    kwargs = {"session": session}
    if sleep is not None:
        kwargs["sleep"] = sleep
    if cfg.event_log:
        # a run owns its log
        open(cfg.event_log, "w").close()
    dispatcher = AlertDispatcher(cfg.policy, cfg.alert_endpoint, log_path=cfg.event_log, **kwargs)
    agg = AlarmAggregator(cfg.window, cfg.trigger)
    grid = HeatmapGrid.empty(cfg.heatmap_grid)
    verdicts_out = _Output(cfg.verdicts_out)
    detections_out = _Output(cfg.detections_out)

    def infer(frame):
        verdict = classify_frame(model, frame)
        dets = stage.detect(frame.index, frame) if stage.enabled else None
        return verdict, dets

    alarm_frames = detections = 0
    try:
        for frame, (verdict, dets) in zip(frames, _parallel_map(infer, frames, cfg.workers)):
            verdicts_out.write(json.dumps(verdict.to_json()) + "\n")
            if dets is not None:
                detections_out.write(detections_to_jsonl(dets, frame.index))
                detections += len(dets)
                grid = accumulate(grid, dets)
            if agg.update(verdict, cfg.frame_threshold):
                alarm_frames += 1
                result = dispatcher.offer(event_for_frame(frame.index, verdict.crime_probability, cfg.fps))
                if result is not None and result.attempts and not result.delivered:
                    log.warning("alert for frame %d not delivered: %s", frame.index, result.error)
    finally:
        verdicts_out.close()
        detections_out.close()
    _write_heatmap(grid, cfg)
    summary = {
        "frames": len(frames),
        "alarms": alarm_frames,
        "alerts_dispatched": len(dispatcher.sent),
        "alerts_delivered": sum(1 for _, r in dispatcher.sent if r.delivered),
        "detections": detections,
    }
    if cfg.summary_out:
        with open(cfg.summary_out, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(summary) + "\n")
    return (EXIT_ALARM if alarm_frames else EXIT_OK), summary


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    status, summary = run_pipeline(cfg)
    sys.stdout.write(json.dumps(summary) + "\n")
    return status


# ---------------------------------------------------------------- plumbing


def _add_overrides(p):
    p.add_argument("--config", help="JSON run configuration")
    for f in dataclasses.fields(RunConfig):
        kind = {"float": float, "int": int}.get(f.type, str)
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)


def _config_from_args(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in dataclasses.fields(RunConfig)}
    return RunConfig.load(args.config, **overrides)


def build_parser():
    parser = argparse.ArgumentParser(prog="sentinel", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model-info", help="layer shapes and dense weight counts")
    p.add_argument("model", help="manifest path, or 'bundled'")
    p.set_defaults(func=cmd_model_info)

    p = sub.add_parser("classify", help="per-frame verdicts as JSONL")
    _add_overrides(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("detect", help="per-frame detections as JSONL")
    _add_overrides(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("heatmap", help="render detections JSONL as a PPM heatmap")
    p.add_argument("detections", nargs="+", help="detections JSONL file(s)")
    _add_overrides(p)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("run", help="classify, detect, heatmap and alert in one pass")
    _add_overrides(p)
    p.set_defaults(func=cmd_run)
    return parser


_OPERATIONAL_ERRORS = (ConfigError, ModelError, NetpbmError, FrameSourceError, PredictionError,
                       AlertLogError, TensorError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _OPERATIONAL_ERRORS as exc:
        print(f"sentinel {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
