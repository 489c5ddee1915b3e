import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from sentinel import kernels
from sentinel.imaging import Frame, encode_pgm


@pytest.fixture(params=kernels.available(), ids=lambda b: b.NAME)
def backend(request):
    return request.param


class MockReceiver:
    """Local webhook endpoint answering with a scripted status sequence."""

    def __init__(self, statuses=(200,)):
        self.statuses = list(statuses)
        self.requests = []
        receiver = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = self.rfile.read(length)
                n = len(receiver.requests)
                receiver.requests.append(
                    {"headers": dict(self.headers), "body": json.loads(body), "path": self.path}
                )
                status = receiver.statuses[min(n, len(receiver.statuses) - 1)]
                self.send_response(status)
                self.send_header("Content-Length", "0")
                self.end_headers()

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.02}, daemon=True)

    @property
    def url(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}/alerts"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def receiver():
    def make(statuses=(200,)):
        return MockReceiver(statuses)
    return make


@pytest.fixture
def closed_port_url():
    import socket
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return f"http://127.0.0.1:{port}/alerts"


def write_sequence(directory, levels, size=8, prefix="frame"):
    """Write constant grayscale PGM frames, one per brightness level."""
    directory.mkdir(parents=True, exist_ok=True)
    for i, level in enumerate(levels):
        frame = Frame(np.full((size, size, 1), level))
        (directory / f"{prefix}_{i:04d}.pgm").write_bytes(encode_pgm(frame))
    return directory


@pytest.fixture
def incident_frames(tmp_path):
    """40 frames, frames 10..20 white, the rest black."""
    levels = [1.0 if 10 <= i <= 20 else 0.0 for i in range(40)]
    return write_sequence(tmp_path / "frames", levels)


# ---- acceptance report: one line per criterion in the terminal summary

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = dict(report.user_properties).get("acceptance")
    if marker:
        _ACCEPTANCE.append((marker[0], marker[1], report.outcome, report.duration))


def pytest_runtest_setup(item):
    m = item.get_closest_marker("acceptance")
    if m:
        item.user_properties.append(("acceptance", m.args))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, title, outcome, duration in sorted(_ACCEPTANCE):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{cid} {status} {title} ({duration:.2f}s)")
