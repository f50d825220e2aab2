"""Detector service: decode feature windows, classify, raise alerts."""
from __future__ import annotations

import asyncio
import json
import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from ..forest import ForestModel
from ..trace import BENIGN
from . import wire

log = logging.getLogger(__name__)


class VocabularyMismatch(wire.ProtocolError):
    pass


@dataclass(frozen=True)
class Alert:
    host: str
    pid: int
    window_start_ms: int
    window_end_ms: int
    predicted: str
    scores: dict[str, float]
    latency_ms: float  # decode to verdict
    detection_delay_ms: float  # window residency plus latency

    def to_json(self) -> dict:
        return asdict(self)

    def identity(self) -> tuple:
        """Everything except the timing fields."""
        return (self.host, self.pid, self.window_start_ms, self.window_end_ms, self.predicted,
                tuple(sorted(self.scores.items())))


class DetectorSession:
    """Per-connection state: a vocabulary announce must come first."""

    def __init__(self, model: ForestModel, benign: str = BENIGN):
        self.model = model
        self.benign = benign
        self.host: str | None = None
        self.windows = 0

    def handle(self, m: wire.WireMessage, received: float | None = None) -> Alert | None:
        t0 = received if received is not None else time.perf_counter()
        if m.type == wire.MSG_VOCAB:
            v = wire.decode_vocab(m.payload)
            if tuple(v.names) != self.model.vocabulary.names:
                raise VocabularyMismatch(
                    f"host {v.host!r} announced {len(v.names)} APIs; model expects "
                    f"{len(self.model.vocabulary)} in a fixed order"
                )
            self.host = v.host
            return None
        if m.type != wire.MSG_WINDOW:
            raise wire.ProtocolError(f"unexpected message type {m.type} from collector")
        if self.host is None:
            raise wire.ProtocolError("feature window before vocabulary announce")
        w = wire.decode_window(m.payload)
        n = self.model.n_features
        vec = np.zeros(n)
        for i, c in w.entries:
            if i >= n:
                raise wire.PayloadError(f"feature index {i} outside vocabulary of {n}")
            vec[i] = c
        scores = self.model.predict_proba(vec[None, :])[0]
        label = self.model.classes[int(np.argmax(scores))]
        self.windows += 1
        if label == self.benign:
            return None
        latency = (time.perf_counter() - t0) * 1000
        return Alert(
            w.host, w.pid, w.window_start_ms, w.window_end_ms, label,
            {c: float(s) for c, s in zip(self.model.classes, scores)},
            latency, (w.window_end_ms - w.window_start_ms) + latency,
        )


def detect_bytes(model: ForestModel, data: bytes) -> list[Alert]:
    """Offline detection over a recorded message stream (one collector)."""
    session = DetectorSession(model)
    alerts = []
    for m in wire.iter_messages(data):
        a = session.handle(m)
        if a is not None:
            alerts.append(a)
    return alerts


class DetectorService:
    """Asyncio TCP server; one :class:`DetectorSession` per connection.

    Alerts go to ``on_alert`` (and are kept in :attr:`alerts`).  A protocol
    error or vocabulary mismatch is answered with an alert-type message
    carrying ``{"error": ...}`` and closes only that connection.
    """

    def __init__(self, model: ForestModel, on_alert: Callable[[Alert], None] | None = None):
        self.model = model
        self.on_alert = on_alert
        self.alerts: list[Alert] = []
        self.errors: list[str] = []
        self.connections = 0
        self._server: asyncio.base_events.Server | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle, host, port)
        addr = self._server.sockets[0].getsockname()
        return addr[0], addr[1]

    async def serve_forever(self) -> None:
        assert self._server is not None
        async with self._server:
            await self._server.serve_forever()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    def _emit(self, a: Alert) -> None:
        self.alerts.append(a)
        if self.on_alert is not None:
            self.on_alert(a)

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self.connections += 1
        session = DetectorSession(self.model)
        peer = writer.get_extra_info("peername")
        try:
            while True:
                try:
                    head = await reader.readexactly(wire.HEADER_SIZE)
                except asyncio.IncompleteReadError as exc:
                    if exc.partial:
                        wire.parse_header(exc.partial)
                    break
                received = time.perf_counter()
                mtype, length = wire.parse_header(head)
                try:
                    payload = await reader.readexactly(length)
                except asyncio.IncompleteReadError as exc:
                    raise wire.TruncatedError(f"payload needs {length} bytes, got {len(exc.partial)}") from None
                a = session.handle(wire.WireMessage(mtype, payload), received)
                if a is not None:
                    self._emit(a)
        except wire.ProtocolError as exc:
            msg = f"{type(exc).__name__}: {exc}"
            log.warning("closing connection from %s: %s", peer, msg)
            self.errors.append(msg)
            try:
                writer.write(wire.alert_message({"error": msg, "kind": type(exc).__name__}))
                await writer.drain()
            except ConnectionError:
                pass
        except ConnectionError as exc:
            log.info("connection from %s lost: %s", peer, exc)
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass


class AlertLog:
    """Append-only JSON Lines alert file."""

    def __init__(self, path):
        self._fh = open(path, "a", encoding="utf-8")

    def __call__(self, a: Alert) -> None:
        self._fh.write(json.dumps(a.to_json(), sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def write_alerts(path, alerts: Iterable[Alert]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in alerts:
            fh.write(json.dumps(a.to_json(), sort_keys=True) + "\n")
