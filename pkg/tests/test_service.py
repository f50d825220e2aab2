import asyncio
import json
import socket
import threading

import pytest

from adaptrace.pipeline import wire
from adaptrace.pipeline.collector import Collector
from adaptrace.pipeline.service import (
    AlertLog, DetectorService, DetectorSession, VocabularyMismatch, detect_bytes)
from adaptrace.pipeline.transport import FileSink, StreamSink, TransportError, backoff_delays, parse_endpoint


def _pids(workload, label):
    return {w.pid for w in workload.labels if w.label == label}


def _stream(trained, workload, label=None, host="h1", vocab=None):
    pids = _pids(workload, label) if label else None
    events = [e for e in workload.events if pids is None or e.pid in pids]
    col = Collector(workload.module_map, trained.report, vocab or trained.model.vocabulary, host=host)
    return b"".join(m for _, m in col.run(events))


def test_keylogger_windows_raise_keylogger_alerts(trained, workload):
    alerts = detect_bytes(trained.model, _stream(trained, workload, "Keylogger"))
    n_windows = sum(1 for w in workload.labels if w.label == "Keylogger")
    hits = [a for a in alerts if a.predicted == "Keylogger"]
    assert len(hits) >= 0.9 * n_windows
    assert all(a.pid in _pids(workload, "Keylogger") for a in alerts)
    a = hits[0]
    assert a.detection_delay_ms >= a.window_end_ms - a.window_start_ms == 6000
    assert a.scores["Keylogger"] == max(a.scores.values())


def test_benign_trace_raises_no_alerts(trained, workload):
    assert detect_bytes(trained.model, _stream(trained, workload, "Benign")) == []


def test_session_requires_vocab_first(trained):
    s = DetectorSession(trained.model)
    msg = wire.decode_message(wire.window_message("h", 1, 0, 6000, []))
    with pytest.raises(wire.ProtocolError):
        s.handle(msg)


def test_session_rejects_foreign_vocabulary(trained):
    s = DetectorSession(trained.model)
    names = list(trained.model.vocabulary.names)
    for bad in (names[::-1], names[:-1], names + ["x.dll:Y"]):
        with pytest.raises(VocabularyMismatch):
            s.handle(wire.decode_message(wire.vocab_message("h", bad)))


def test_session_rejects_out_of_range_index(trained):
    s = DetectorSession(trained.model)
    s.handle(wire.decode_message(wire.vocab_message("h", trained.model.vocabulary.names)))
    n = len(trained.model.vocabulary)
    with pytest.raises(wire.PayloadError):
        s.handle(wire.decode_message(wire.window_message("h", 1, 0, 6000, [(n, 1)])))


async def _client(port: int, data: bytes) -> bytes:
    reader, writer = await asyncio.open_connection("127.0.0.1", port)
    writer.write(data)
    await writer.drain()
    writer.write_eof()
    reply = await reader.read()
    writer.close()
    await writer.wait_closed()
    return reply


def test_concurrent_clients_attributed_by_host(trained, workload):
    a = _stream(trained, workload, "Keylogger", host="alpha")
    b = _stream(trained, workload, "DesktopCapture", host="beta")

    async def run():
        svc = DetectorService(trained.model)
        _, port = await svc.start()
        replies = await asyncio.gather(_client(port, a), _client(port, b))
        await svc.stop()
        return svc, replies

    svc, replies = asyncio.run(run())
    assert replies == [b"", b""] and not svc.errors and svc.connections == 2
    by_host = {}
    for al in svc.alerts:
        by_host.setdefault(al.host, set()).add(al.pid)
    assert by_host["alpha"] <= _pids(workload, "Keylogger")
    assert by_host["beta"] <= _pids(workload, "DesktopCapture")
    # same verdicts as the offline path, regardless of interleaving
    offline = sorted(x.identity() for x in detect_bytes(trained.model, a) + detect_bytes(trained.model, b))
    assert sorted(x.identity() for x in svc.alerts) == offline


def test_bad_connection_does_not_disturb_others(trained, workload):
    good = _stream(trained, workload, "Keylogger", host="good")
    names = list(trained.model.vocabulary.names)
    mismatched = wire.vocab_message("bad", names[1:]) + wire.window_message("bad", 1, 0, 6000, [])
    garbage = b"XXXX" + bytes(20)

    async def run():
        svc = DetectorService(trained.model)
        _, port = await svc.start()
        replies = await asyncio.gather(_client(port, mismatched), _client(port, good), _client(port, garbage))
        await svc.stop()
        return svc, replies

    svc, (r_bad, r_good, r_garbage) = asyncio.run(run())
    assert r_good == b""
    assert wire.decode_alert(wire.decode_message(r_bad).payload)["kind"] == "VocabularyMismatch"
    assert wire.decode_alert(wire.decode_message(r_garbage).payload)["kind"] == "BadMagicError"
    assert len(svc.errors) == 2
    assert {a.host for a in svc.alerts} == {"good"}
    assert len(svc.alerts) == len(detect_bytes(trained.model, good))


def test_stream_sink_delivers_to_service(trained, workload, tmp_path):
    data = _stream(trained, workload, "Keylogger", host="sink")
    log_path = tmp_path / "alerts.jsonl"
    ready = threading.Event()
    box = {}

    async def serve():
        log = AlertLog(log_path)
        svc = DetectorService(trained.model, on_alert=log)
        _, box["port"] = await svc.start()
        box["svc"], box["loop"], box["stop"] = svc, asyncio.get_running_loop(), asyncio.Event()
        ready.set()
        await box["stop"].wait()
        await svc.stop()
        log.close()

    t = threading.Thread(target=asyncio.run, args=(serve(),))
    t.start()
    ready.wait(5)
    with StreamSink("127.0.0.1", box["port"]) as sink:
        for m in wire.iter_messages(data):
            sink.send(wire.encode_message(m))
    # wait for the server to drain the closed connection
    for _ in range(200):
        if len(box["svc"].alerts) == len(detect_bytes(trained.model, data)):
            break
        threading.Event().wait(0.02)
    box["loop"].call_soon_threadsafe(box["stop"].set)
    t.join(5)
    rows = [json.loads(l) for l in log_path.read_text().splitlines()]
    assert len(rows) == len(box["svc"].alerts) > 0
    assert {r["host"] for r in rows} == {"sink"}


def test_stream_sink_gives_up_with_transport_error():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()  # nothing listens there now
    sink = StreamSink("127.0.0.1", port, retries=2, base_delay=0.001)
    with pytest.raises(TransportError):
        sink.send(b"x")


def test_backoff_and_endpoint():
    d = backoff_delays(6, 0.1, 1.0)
    assert d == sorted(d) and d[0] == 0.1 and max(d) == 1.0
    assert parse_endpoint("10.0.0.1:9000") == ("10.0.0.1", 9000)
    for bad in ("nohost", "h:", "h:notaport", "h:70000"):
        with pytest.raises(ValueError):
            parse_endpoint(bad)


def test_file_sink_round_trip(trained, workload, tmp_path):
    data = _stream(trained, workload, "Keylogger")
    with FileSink(tmp_path / "w.bin") as sink:
        for m in wire.iter_messages(data):
            sink.send(wire.encode_message(m))
    assert (tmp_path / "w.bin").read_bytes() == data
