import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sentinel.alerting import (
    AlertDispatcher,
    AlertEvent,
    AlertLogError,
    DeliveryResult,
    DispatchPolicy,
    append_event,
    dispatch,
    event_for_frame,
    format_message,
    should_dispatch,
)


class TestCooldown:
    def test_first(self):
        assert should_dispatch(None, 0.0, DispatchPolicy())

    def test_inside(self):
        assert not should_dispatch(0.0, 30.0, DispatchPolicy(cooldown_s=60))

    def test_boundary_inclusive(self):
        assert should_dispatch(0.0, 60.0, DispatchPolicy(cooldown_s=60))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 5000), max_size=200), st.integers(0, 300))
    def test_at_most_one_per_window(self, frames, cooldown_frames):
        fps = 10.0
        policy = DispatchPolicy(cooldown_s=cooldown_frames / fps)
        d = AlertDispatcher(policy)
        for f in sorted(set(frames)):
            d.offer(event_for_frame(f, 0.9, fps))
        times = [e.timestamp for e, _ in d.sent]
        assert all(b - a >= policy.cooldown_s for a, b in zip(times, times[1:]))


class TestMessage:
    def test_template(self):
        e = AlertEvent(timestamp=1.2, frame=12, probability=0.91)
        assert format_message(e) == "crime_alert frame=12 p=0.910 t=1.2s"
        assert e.message == format_message(e)

    def test_full_probability(self):
        assert "p=1.000" in format_message(AlertEvent(0.0, 0, 1.0))

    def test_deterministic(self):
        a, b = AlertEvent(3.3, 33, 0.5), AlertEvent(3.3, 33, 0.5)
        assert format_message(a) == format_message(b)
        assert "\n" not in format_message(a)

    def test_synthesized_time(self):
        assert event_for_frame(12, 0.91, 10.0).message == "crime_alert frame=12 p=0.910 t=1.2s"

    def test_probability_range(self):
        with pytest.raises(ValueError):
            AlertEvent(0.0, 0, 1.2)


class TestDispatch:
    def test_delivered_first_try(self, receiver):
        with receiver([200]) as rx:
            r = dispatch(AlertEvent(1.2, 12, 0.91), rx.url, "s3cret", DispatchPolicy())
        assert (r.delivered, r.attempts) == (True, 1)
        (req,) = rx.requests
        assert req["headers"]["Authorization"] == "Bearer s3cret"
        assert req["body"] == {"ts": 1.2, "type": "crime_alert", "frame": 12, "probability": 0.91,
                               "message": "crime_alert frame=12 p=0.910 t=1.2s"}

    def test_persistent_failure(self, receiver):
        delays = []
        with receiver([500]) as rx:
            r = dispatch(AlertEvent(0, 0, 0.9), rx.url, "t", DispatchPolicy(max_retries=3), sleep=delays.append)
        assert (r.delivered, r.attempts) == (False, 4)
        assert len(rx.requests) == 4
        assert delays == r.delays == [1.0, 2.0, 4.0]
        assert r.error == "HTTP 500"

    def test_recovers(self, receiver):
        delays = []
        with receiver([503, 200]) as rx:
            r = dispatch(AlertEvent(0, 0, 0.9), rx.url, "t", DispatchPolicy(backoff_base_s=0.5),
                         sleep=delays.append)
        assert (r.delivered, r.attempts) == (True, 2)
        assert delays == [0.5]

    def test_unreachable_never_raises(self, closed_port_url):
        r = dispatch(AlertEvent(0, 0, 0.9), closed_port_url, None, DispatchPolicy(max_retries=2),
                     sleep=lambda s: None)
        assert (r.delivered, r.attempts) == (False, 3)
        assert "ConnectionError" in r.error

    @pytest.mark.parametrize("retries", [0, 1, 5])
    def test_attempt_bound(self, receiver, retries):
        with receiver([404]) as rx:
            r = dispatch(AlertEvent(0, 0, 0.9), rx.url, "t", DispatchPolicy(max_retries=retries, backoff_base_s=2),
                         sleep=lambda s: None)
        assert r.attempts == 1 + retries
        assert r.delays == [2 * 2 ** i for i in range(retries)]

    def test_malformed_endpoint(self):
        with pytest.raises(ValueError):
            dispatch(AlertEvent(0, 0, 0.9), "not a url", None, DispatchPolicy())


class TestLog:
    def test_lines(self, tmp_path):
        log = tmp_path / "events.jsonl"
        append_event(log, AlertEvent(1.2, 12, 0.91), DeliveryResult(True, 1))
        append_event(log, AlertEvent(9.0, 90, 0.8), DeliveryResult(False, 4))
        rows = [json.loads(line) for line in log.read_text().splitlines()]
        assert [r["frame"] for r in rows] == [12, 90]
        assert set(rows[0]) == {"timestamp", "frame", "kind", "probability", "message", "delivered", "attempts"}
        assert rows[1]["delivered"] is False and rows[1]["attempts"] == 4

    def test_unwritable(self, tmp_path):
        with pytest.raises(AlertLogError):
            append_event(tmp_path / "missing" / "log.jsonl", AlertEvent(0, 0, 0.5), DeliveryResult(True, 1))

    def test_dispatcher_order_enforced(self, tmp_path):
        d = AlertDispatcher(DispatchPolicy(), log_path=tmp_path / "log.jsonl")
        d.offer(event_for_frame(5, 0.9, 10))
        with pytest.raises(ValueError):
            d.offer(event_for_frame(5, 0.9, 10))

    def test_dispatcher_cooldown_and_token(self, receiver, tmp_path, monkeypatch):
        monkeypatch.setenv("SENTINEL_TOKEN", "from-env")
        log = tmp_path / "log.jsonl"
        with receiver([200]) as rx:
            d = AlertDispatcher(DispatchPolicy(cooldown_s=60), rx.url, log_path=log)
            results = [d.offer(event_for_frame(f, 0.9, 10.0)) for f in (0, 1, 600, 601, 1200)]
        assert [r is not None for r in results] == [True, False, True, False, True]
        assert len(rx.requests) == 3
        assert rx.requests[0]["headers"]["Authorization"] == "Bearer from-env"
        assert [json.loads(x)["frame"] for x in log.read_text().splitlines()] == [0, 600, 1200]
