"""Byte-stream sinks for collector output."""
from __future__ import annotations

import logging
import os
import socket
import time
from typing import Protocol

log = logging.getLogger(__name__)


class TransportError(Exception):
    pass


class Sink(Protocol):
    def send(self, data: bytes) -> None: ...
    def close(self) -> None: ...


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit() or not 0 < int(port) < 65536:
        raise ValueError(f"endpoint must look like HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def backoff_delays(retries: int, base: float = 0.05, cap: float = 2.0) -> list[float]:
    return [min(cap, base * 2**i) for i in range(retries)]


class FileSink:
    def __init__(self, path: str | os.PathLike):
        try:
            self._fh = open(path, "wb")
        except OSError as exc:
            raise TransportError(f"cannot open {path}: {exc}") from exc
        self.bytes_sent = 0

    def send(self, data: bytes) -> None:
        try:
            self._fh.write(data)
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        self.bytes_sent += len(data)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class StreamSink:
    """TCP client with bounded exponential backoff.

    The first message sent is remembered and replayed after a reconnect,
    since the detector expects a vocabulary announce on every connection.
    """

    def __init__(self, host: str, port: int, retries: int = 5, base_delay: float = 0.05,
                 max_delay: float = 2.0, timeout: float = 5.0):
        self.address = (host, port)
        self.delays = backoff_delays(retries, base_delay, max_delay)
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._hello: bytes | None = None
        self.bytes_sent = 0
        self.reconnects = 0

    def _connect(self) -> None:
        last: OSError | None = None
        for attempt, delay in enumerate([0.0] + self.delays):
            if delay:
                time.sleep(delay)
            try:
                self._sock = socket.create_connection(self.address, timeout=self.timeout)
                if attempt:
                    log.info("connected to %s:%d after %d retries", *self.address, attempt)
                return
            except OSError as exc:
                last = exc
                log.warning("connect to %s:%d failed: %s", *self.address, exc)
        raise TransportError(f"giving up on {self.address[0]}:{self.address[1]} after "
                             f"{len(self.delays) + 1} attempts: {last}")

    def send(self, data: bytes) -> None:
        if self._hello is None:
            self._hello = data
        for attempt in range(2):
            replay = False
            if self._sock is None:
                self._connect()
                replay = attempt > 0 and self._hello is not data
            try:
                if replay:
                    self._sock.sendall(self._hello)
                self._sock.sendall(data)
                self.bytes_sent += len(data)
                return
            except OSError as exc:
                log.warning("send failed: %s; reconnecting", exc)
                self._drop()
                self.reconnects += 1
        raise TransportError("send failed after reconnect")

    def _drop(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
        self._drop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
