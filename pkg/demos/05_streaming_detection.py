"""
Streaming collection and detection over TCP
===========================================

The collector turns a trace into per-process feature windows and ships them
over the wire protocol; the detector service classifies each window and raises
alerts.  The reduction ledger shows how much data every stage removed.
"""
import asyncio
import threading
import time

from adaptrace.pipeline import PipelineConfig, label_map, train_pipeline
from adaptrace.pipeline.collector import run_collector
from adaptrace.pipeline.ledger import reduction_report
from adaptrace.pipeline.service import DetectorService
from adaptrace.pipeline.transport import StreamSink
from adaptrace.synthgen import default_spec, gen_trace

wl = gen_trace(default_spec(windows_per_class=40, processes_per_class=4, seed=5))
res = train_pipeline(wl.events, wl.module_map, label_map(wl.labels), PipelineConfig(n_trees=50, seed=5))

# Run the detector in a background event loop.
ready, state = threading.Event(), {}


async def serve():
    svc = DetectorService(res.model)
    _, state["port"] = await svc.start("127.0.0.1", 0)
    state.update(svc=svc, loop=asyncio.get_running_loop(), stop=asyncio.Event())
    ready.set()
    await state["stop"].wait()
    await svc.stop()

server = threading.Thread(target=asyncio.run, args=(serve(),))
server.start()
ready.wait()

# One collector per host; the first message announces the vocabulary.
with StreamSink("127.0.0.1", state["port"]) as sink:
    ledger = run_collector(wl.events, wl.module_map, res.report, res.model.vocabulary, sink.send, host="desk-01")
print(reduction_report(ledger))

# Give the server a moment to drain the connection, then stop it.
time.sleep(0.5)
state["loop"].call_soon_threadsafe(state["stop"].set)
server.join()

alerts = state["svc"].alerts
truth = wl.label_map()
right = sum(truth[(a.pid, a.window_start_ms)] == a.predicted for a in alerts)
print(f"{len(alerts)} alerts, {right} name the behavior actually running")
for a in alerts[:5]:
    print(f"  {a.host} pid {a.pid} [{a.window_start_ms}, {a.window_end_ms}) {a.predicted} "
          f"p={a.scores[a.predicted]:.2f} latency {a.latency_ms:.2f}ms")
