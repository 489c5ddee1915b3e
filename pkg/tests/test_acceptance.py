"""Exit criteria. Each test is one criterion at its stated tolerance and
time budget; the terminal summary prints one PASS/FAIL line per criterion."""

import json
import math
import random
import time
import zlib

import numpy as np
import pytest

from sentinel import kernels
from sentinel.alerting import AlertDispatcher, AlertEvent, DispatchPolicy, dispatch, event_for_frame
from sentinel.cli import RunConfig, main, run_pipeline
from sentinel.detector import BBox, Detection, GridPrediction, decode_grid, dump_prediction, iou, nms
from sentinel.heatmap import HeatmapGrid, accumulate, normalize, render_ppm
from sentinel.imaging import parse_netpbm
from sentinel.tensor import Kernel, Tensor, conv2d, dense, dense_weight_count, flatten, maxpool2d, softmax

from oracles import conv2d_ref, dense_ref, flatten_ref, iou_raster, maxpool_ref, nms_ref

BACKENDS = kernels.available()


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def _write_manifest(path, input_shape, layers):
    count, shape = 0, list(input_shape)
    for layer in layers:
        if layer["kind"] == "flatten":
            shape = [math.prod(shape)]
        elif layer["kind"] == "dense":
            count += shape[0] * layer["out_dim"] + layer["out_dim"]
            shape = [layer["out_dim"]]
    path.write_text(json.dumps({"name": path.stem, "input": list(input_shape), "layers": layers,
                                "class_labels": ["normal", "crime"], "parameter_count": count,
                                "weight_checksum": zlib.crc32(b"")}))
    return str(path)


@pytest.mark.acceptance("C1", "parameter arithmetic: 784 inputs, 2,073,600 inputs, 132,710,400 weights")
def test_c1_parameter_arithmetic(tmp_path, capsys):
    mnist = _write_manifest(tmp_path / "mnist.json", (28, 28, 1),
                            [{"kind": "flatten"}, {"kind": "dense", "out_dim": 2}, {"kind": "softmax"}])
    hd = _write_manifest(tmp_path / "hd.json", (1080, 1920, 1),
                         [{"kind": "flatten"}, {"kind": "dense", "out_dim": 64}, {"kind": "relu"},
                          {"kind": "dense", "out_dim": 2}, {"kind": "softmax"}])
    with Timer() as t:
        assert main(["model-info", mnist]) == 0
        mnist_out = capsys.readouterr().out
        assert main(["model-info", hd]) == 0
        hd_out = capsys.readouterr().out
    assert "flattened inputs: 784\n" in mnist_out
    assert "flattened inputs: 2073600\n" in hd_out
    assert "[1] dense    2073600 -> 64  dense weights: 132710400\n" in hd_out
    assert dense_weight_count(1920 * 1080, 64) == 132_710_400
    assert 28 * 28 == 784 and 1920 * 1080 == 2_073_600
    assert t.elapsed < 1.0


def _lattice_box(rng):
    x0, x1 = sorted(rng.randint(0, 100) for _ in range(2))
    y0, y1 = sorted(rng.randint(0, 100) for _ in range(2))
    return (x0 / 100, y0 / 100, x1 / 100, y1 / 100)


@pytest.mark.acceptance("C2", "IoU vs rasterization oracle, 1000 lattice pairs, tol 1e-9")
def test_c2_iou_oracle():
    rng = random.Random(2024)
    with Timer() as t:
        worst = 0.0
        for _ in range(1000):
            a, b = _lattice_box(rng), _lattice_box(rng)
            ba, bb = BBox(*a), BBox(*b)
            v = iou(ba, bb)
            assert v == iou(bb, ba)
            assert 0.0 <= v <= 1.0
            worst = max(worst, abs(v - iou_raster(a, b)))
            if ba.area > 0:
                assert iou(ba, ba) == 1.0
        assert worst <= 1e-9
        assert iou(BBox(0.1, 0.1, 0.4, 0.5), BBox(0.1, 0.1, 0.4, 0.5)) == 1.0
        assert iou(BBox(0, 0, 0.2, 0.2), BBox(0.3, 0.3, 0.5, 0.5)) == 0.0
    assert t.elapsed < 10.0


@pytest.mark.acceptance("C3", "CNN ops vs brute force (>=100 tensors, tol 1e-9); softmax sum (1000 vectors, tol 1e-12)")
def test_c3_cnn_ops():
    rng = np.random.default_rng(3)
    with Timer() as t:
        for backend in BACKENDS:
            for _ in range(100):
                h, w = (int(v) for v in rng.integers(1, 9, size=2))
                cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
                x = rng.normal(size=(h, w, cin))
                kh, kw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
                stride = int(rng.integers(1, 4))
                wt, b = rng.normal(size=(kh, kw, cin, cout)), rng.normal(size=cout)
                got = conv2d(Tensor(x), Kernel(wt, b), stride, backend=backend).array
                want = conv2d_ref(x.tolist(), wt.tolist(), b.tolist(), stride)
                assert np.max(np.abs(got - np.array(want))) <= 1e-9

                ph, pw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
                got = maxpool2d(Tensor(x), ph, pw, backend=backend).array
                assert np.max(np.abs(got - np.array(maxpool_ref(x.tolist(), ph, pw)))) <= 1e-9

                vec = flatten(Tensor(x))
                assert vec.tolist() == flatten_ref(x.tolist())
                n_out = int(rng.integers(1, 9))
                dw, db = rng.normal(size=(n_out, vec.size)), rng.normal(size=n_out)
                got = dense(vec, dw, db, backend=backend)
                assert np.max(np.abs(got - np.array(dense_ref(vec.tolist(), dw.tolist(), db.tolist())))) <= 1e-9
        for _ in range(1000):
            z = rng.normal(scale=rng.uniform(0.1, 30), size=int(rng.integers(1, 50)))
            p = softmax(z)
            assert abs(math.fsum(p) - 1.0) <= 1e-12
            assert np.max(np.abs(softmax(z + rng.normal(scale=100)) - p)) <= 1e-12
    assert t.elapsed < 10.0


@pytest.mark.acceptance("C4", "greedy NMS identical to O(n^2) reference, 500 instances, <=20 boxes, 3 classes")
def test_c4_nms_equivalence():
    rng = random.Random(4)
    with Timer() as t:
        for backend in BACKENDS:
            for _ in range(500):
                dets = []
                for _ in range(rng.randint(0, 20)):
                    x0, x1 = sorted(rng.random() for _ in range(2))
                    y0, y1 = sorted(rng.random() for _ in range(2))
                    score = rng.random()
                    dets.append(Detection(BBox(x0, y0, x1, y1), rng.randrange(3), "c", score, score))
                thr = rng.random()
                want = nms_ref([(d.bbox.as_list(), d.score, d.class_id) for d in dets], thr)
                assert nms(dets, thr, backend=backend) == [dets[i] for i in want]
    assert t.elapsed < 10.0


@pytest.mark.acceptance("C5", "grid decode: zero grid empty; S=1 case bbox (.25,.25,.75,.75) score .9, tol 1e-12")
def test_c5_decode():
    assert decode_grid(GridPrediction(7, 2, 20, np.zeros(7 * 7 * 30)), 0.25) == []
    (d,) = decode_grid(GridPrediction(1, 1, 1, [0.5, 0.5, 0.5, 0.5, 0.9, 1.0]), 0.25)
    assert max(abs(u - v) for u, v in zip(d.bbox.as_list(), [0.25, 0.25, 0.75, 0.75])) <= 1e-12
    assert abs(d.score - 0.9) <= 1e-12


@pytest.mark.acceptance("C6", "end-to-end: 40 frames, 10-20 bright, one delivered alert, one log entry, valid P6")
def test_c6_end_to_end(incident_frames, tmp_path, receiver):
    rng = np.random.default_rng(6)
    pdir = tmp_path / "pred"
    pdir.mkdir()
    for i in range(40):
        (pdir / f"p{i:03d}.json").write_text(dump_prediction(GridPrediction(3, 1, 2, rng.random(3 * 3 * 7))))
    log, heat = tmp_path / "events.jsonl", tmp_path / "heat.ppm"
    with receiver([200]) as rx, Timer() as t:
        cfg = RunConfig(frames_dir=str(incident_frames), predictions_dir=str(pdir), fps=10, window=5,
                        trigger=3, frame_threshold=0.5, cooldown_s=60, alert_endpoint=rx.url,
                        event_log=str(log), heatmap_out=str(heat))
        code, summary = run_pipeline(cfg)
    assert code == 2
    assert summary["alerts_delivered"] == summary["alerts_dispatched"] == 1
    assert len(rx.requests) == 1
    assert rx.requests[0]["body"]["frame"] == 12
    (entry,) = [json.loads(x) for x in log.read_text().splitlines()]
    assert entry["delivered"] is True and entry["frame"] == 12
    f = parse_netpbm(heat.read_bytes())
    assert heat.read_bytes().startswith(b"P6") and f.channels == 3 and f.width == 32 * 8
    assert t.elapsed < 5.0


@pytest.mark.acceptance("C7", "heatmap conservation, max->1, render/parse dims, byte-identical renders")
def test_c7_heatmap():
    rng = np.random.default_rng(7)
    grid = HeatmapGrid.empty(16)
    total = 0
    for _ in range(50):
        dets = []
        for _ in range(int(rng.integers(0, 8))):
            cx, cy = rng.random(2)
            dets.append(Detection(BBox(cx, cy, cx, cy), 0, "p", 1.0, 1.0))
        total += len(dets)
        grid = accumulate(grid, dets)
    assert grid.total == total
    assert normalize(grid).max() == 1.0
    for cell_px in (1, 3):
        data = render_ppm(grid, cell_px)
        f = parse_netpbm(data)
        assert (f.width, f.height, f.channels) == (16 * cell_px, 16 * cell_px, 3)
        assert render_ppm(grid, cell_px) == data


@pytest.mark.acceptance("C8", "alert policy: one per cooldown (inclusive), 1+max_retries attempts, run continues")
def test_c8_alert_policy(receiver, incident_frames, tmp_path, closed_port_url):
    # cooldown, inclusive boundary
    with receiver([200]) as rx:
        d = AlertDispatcher(DispatchPolicy(cooldown_s=60), rx.url, token="t")
        offered = [d.offer(event_for_frame(f, 0.9, 10.0)) for f in range(0, 1300, 7)]
        times = [e.timestamp for e, _ in d.sent]
    assert all(b - a >= 60 for a, b in zip(times, times[1:]))
    assert len(rx.requests) == len(times) == sum(r is not None for r in offered)
    boundary = AlertDispatcher(DispatchPolicy(cooldown_s=60))
    assert boundary.offer(AlertEvent(0.0, 0, 0.9)) is not None
    assert boundary.offer(AlertEvent(59.9, 599, 0.9)) is None
    assert boundary.offer(AlertEvent(60.0, 600, 0.9)) is not None

    # retries
    for retries in (0, 3):
        slept = []
        with receiver([500]) as rx:
            r = dispatch(AlertEvent(0, 0, 0.9), rx.url, "t", DispatchPolicy(max_retries=retries),
                         sleep=slept.append)
        assert not r.delivered and r.attempts == len(rx.requests) == 1 + retries
        assert slept == [2.0 ** i for i in range(retries)]

    # delivery failure does not stop monitoring
    log = tmp_path / "e.jsonl"
    cfg = RunConfig(frames_dir=str(incident_frames), alert_endpoint=closed_port_url, event_log=str(log),
                    backoff_base_s=0.0, heatmap_out=str(tmp_path / "h.ppm"),
                    verdicts_out=str(tmp_path / "v.jsonl"))
    code, summary = run_pipeline(cfg)
    assert code == 2 and summary["frames"] == 40
    assert len((tmp_path / "v.jsonl").read_text().splitlines()) == 40
    (entry,) = [json.loads(x) for x in log.read_text().splitlines()]
    assert entry["delivered"] is False and entry["attempts"] == 4
