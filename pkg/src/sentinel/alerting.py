"""Crime alerts: cooldown gate, webhook delivery with retries, JSONL audit log."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional
from urllib.parse import urlparse

import requests

logger = logging.getLogger(__name__)

TOKEN_ENV = "SENTINEL_TOKEN"
ALERT_KIND = "crime_alert"


class AlertLogError(RuntimeError):
    pass


@dataclass(frozen=True)
class AlertEvent:
    timestamp: float
    frame: int
    probability: float
    message: str = ""
    kind: str = ALERT_KIND

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")
        if not self.message:
            object.__setattr__(self, "message", format_message(self))

    def payload(self):
        return {"ts": self.timestamp, "type": self.kind, "frame": self.frame,
                "probability": self.probability, "message": self.message}


@dataclass(frozen=True)
class DispatchPolicy:
    cooldown_s: float = 60.0
    max_retries: int = 3
    backoff_base_s: float = 1.0
    timeout_s: float = 5.0

    def __post_init__(self):
        if self.cooldown_s < 0 or self.max_retries < 0 or self.backoff_base_s < 0:
            raise ValueError("cooldown_s, max_retries and backoff_base_s must be non-negative")

    def delay(self, retry: int) -> float:
        """Wait before retry number ``retry`` (0-based)."""
        return self.backoff_base_s * 2 ** retry


@dataclass
class DeliveryResult:
    delivered: bool
    attempts: int
    delays: list = field(default_factory=list)
    error: Optional[str] = None


def event_for_frame(frame: int, probability: float, fps: float) -> AlertEvent:
    """Alert for ``frame``; time is synthesized as ``frame / fps``."""
    return AlertEvent(timestamp=frame / fps, frame=frame, probability=float(probability))


def should_dispatch(last_sent: Optional[float], now: float, policy: DispatchPolicy) -> bool:
    return last_sent is None or now - last_sent >= policy.cooldown_s


def format_message(event: AlertEvent) -> str:
    return f"{event.kind} frame={event.frame} p={event.probability:.3f} t={round(event.timestamp, 3)!r}s"


def valid_endpoint(url: str) -> bool:
    parts = urlparse(url or "")
    return parts.scheme in ("http", "https") and bool(parts.netloc)


def dispatch(event: AlertEvent, endpoint: str, token: Optional[str], policy: DispatchPolicy,
             *, session=None, sleep: Callable[[float], None] = time.sleep) -> DeliveryResult:
    """POST the event, retrying non-2xx and transport errors with doubling delays.

    Never raises for delivery problems; the outcome is in the result.
    """
    if not valid_endpoint(endpoint):
        raise ValueError(f"malformed alert endpoint {endpoint!r}")
    post = (session or requests).post
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = "Bearer " + token
    body = event.payload()
    delays = []
    error = None
    attempts = 0
    for attempt in range(policy.max_retries + 1):
        if attempt:
            delay = policy.delay(attempt - 1)
            delays.append(delay)
            sleep(delay)
        attempts += 1
        try:
            resp = post(endpoint, json=body, headers=headers, timeout=policy.timeout_s)
        except requests.RequestException as exc:
            error = f"{type(exc).__name__}: {exc}"
            logger.warning("alert delivery attempt %d failed: %s", attempts, error)
            continue
        if 200 <= resp.status_code < 300:
            return DeliveryResult(True, attempts, delays)
        error = f"HTTP {resp.status_code}"
        logger.warning("alert delivery attempt %d got %s", attempts, error)
    return DeliveryResult(False, attempts, delays, error)


def append_event(path, event: AlertEvent, result: DeliveryResult) -> None:
    record = asdict(event)
    record.update(delivered=result.delivered, attempts=result.attempts)
    try:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
    except OSError as exc:
        raise AlertLogError(f"cannot write event log {path}: {exc.strerror or exc}") from exc


class AlertDispatcher:
    """Serializes cooldown decisions, delivery and logging for one stream.

    With no endpoint configured, alerts are still logged (``attempts=0``).
    """

    def __init__(self, policy: DispatchPolicy, endpoint: Optional[str] = None,
                 token: Optional[str] = None, log_path=None, *, session=None,
                 sleep: Callable[[float], None] = time.sleep):
        if endpoint is not None and not valid_endpoint(endpoint):
            raise ValueError(f"malformed alert endpoint {endpoint!r}")
        self.policy = policy
        self.endpoint = endpoint
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self.log_path = log_path
        self.session = session
        self.sleep = sleep
        self.last_sent: Optional[float] = None
        self.last_frame: Optional[int] = None
        self.sent: list = []

    def offer(self, event: AlertEvent) -> Optional[DeliveryResult]:
        """Dispatch ``event`` unless the cooldown suppresses it."""
        if self.last_frame is not None and event.frame <= self.last_frame:
            raise ValueError(f"alert for frame {event.frame} arrived after frame {self.last_frame}")
        self.last_frame = event.frame
        if not should_dispatch(self.last_sent, event.timestamp, self.policy):
            return None
        self.last_sent = event.timestamp
        if self.endpoint:
            result = dispatch(event, self.endpoint, self.token, self.policy,
                              session=self.session, sleep=self.sleep)
        else:
            result = DeliveryResult(False, 0, error="no endpoint configured")
        self.sent.append((event, result))
        if self.log_path is not None:
            append_event(self.log_path, event, result)
        return result
