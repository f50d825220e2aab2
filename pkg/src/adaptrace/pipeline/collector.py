"""Collector: raw events in, sparse feature-window messages out."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

from ..apisel import SelectionReport
from ..embedding import NS_PER_MS, Vocabulary, count_frames
from ..trace import ModuleMap, RawStackEvent
from . import wire
from .ledger import STAGES, ReductionLedger
from .stages import Frames, StackParser, compress_stacks, drop_irrelevant, line_bytes, restrict

log = logging.getLogger(__name__)

GRAPH, ASSOC, STACK, LOOP, MODEL, FEATURE = STAGES


@dataclass
class ProcessedWindow:
    pid: int
    index: int
    window_start_ms: int
    window_end_ms: int
    stacks: list[Frames]
    vector: np.ndarray

    def entries(self) -> list[tuple[int, int]]:
        idx = np.flatnonzero(self.vector)
        return [(int(i), int(self.vector[i])) for i in idx]


def _tally(counter, stacks: Iterable[Frames]) -> None:
    for s in stacks:
        counter.add(s.nbytes, 1, len(s.names))


class Collector:
    """Applies training-time selection artifacts to a live event stream.

    Events are bucketed into per-pid tumbling windows.  A window is closed
    once its pid has produced an event more than ``lateness`` windows past
    it, or on :meth:`flush`.
    Events arriving for an already-closed window are counted as raw data and
    then discarded.
    """

    def __init__(
        self,
        mm: ModuleMap,
        report: SelectionReport,
        vocab: Vocabulary,
        window_ms: int = 6000,
        host: str = "localhost",
        lateness: int = 1,
        ledger: ReductionLedger | None = None,
    ):
        self.report = report
        self.vocab = vocab
        self.vocab_set = frozenset(vocab.names)
        self.window_ms = window_ms
        self.host = host
        self.lateness = lateness
        self.parser = StackParser(mm, report.mode, report.trivial, report.redundant)
        self.irrelevant = frozenset(report.irrelevant_stacks)
        self.compress = bool(report.params.get("compress_loops", True))
        self.ledger = ledger or ReductionLedger()
        self._pending: dict[tuple[int, int], list[Frames]] = defaultdict(list)
        self._closed_upto: dict[int, int] = {}
        self._newest: dict[int, int] = {}
        self.late_events = 0

    @property
    def width_ns(self) -> int:
        return self.window_ms * NS_PER_MS

    def vocab_message(self) -> bytes:
        msg = wire.vocab_message(self.host, self.vocab.names)
        self.ledger.stage(FEATURE).add(len(msg))
        self.ledger.messages += 1
        return msg

    def feed(self, ev: RawStackEvent) -> list[ProcessedWindow]:
        led = self.ledger
        led.raw.add(line_bytes(ev), 1, len(ev.stack))
        widx = ev.ts // self.width_ns
        if widx <= self._closed_upto.get(ev.pid, -1):
            self.late_events += 1
            return []
        fr = self.parser.parse(ev)
        if fr is not None:
            led.stage(GRAPH).add(fr.nbytes, 1, len(fr.names))
            fr = self.parser.drop_redundant(fr)
            if fr is not None:
                led.stage(ASSOC).add(fr.nbytes, 1, len(fr.names))
        # an event whose frames were all filtered still opens its window
        self._pending[(ev.pid, widx)]
        if fr is not None:
            self._pending[(ev.pid, widx)].append(fr)
        newest = max(widx, self._newest.get(ev.pid, widx))
        self._newest[ev.pid] = newest
        upto = newest - 1 - self.lateness
        if upto > self._closed_upto.get(ev.pid, -1):
            return self._close_pid(ev.pid, upto)
        return []

    def _close_pid(self, pid: int, upto: int) -> list[ProcessedWindow]:
        self._closed_upto[pid] = upto
        keys = sorted(k for k in self._pending if k[0] == pid and k[1] <= upto)
        return [self._close(k) for k in keys]

    def flush(self) -> list[ProcessedWindow]:
        out = [self._close(k) for k in sorted(self._pending)]
        for pid, newest in self._newest.items():
            self._closed_upto[pid] = max(newest, self._closed_upto.get(pid, -1))
        return out

    def _close(self, key: tuple[int, int]) -> ProcessedWindow:
        stacks = self._pending.pop(key)
        led = self.ledger
        stacks = drop_irrelevant(stacks, self.irrelevant)
        _tally(led.stage(STACK), stacks)
        if self.compress:
            stacks = compress_stacks(stacks)
        _tally(led.stage(LOOP), stacks)
        stacks = restrict(stacks, self.vocab_set)
        _tally(led.stage(MODEL), stacks)
        vec = count_frames((s.names for s in stacks), self.vocab)
        pid, widx = key
        led.windows += 1
        return ProcessedWindow(pid, widx, widx * self.window_ms, (widx + 1) * self.window_ms, stacks, vec)

    def encode(self, w: ProcessedWindow) -> bytes:
        msg = wire.window_message(self.host, w.pid, w.window_start_ms, w.window_end_ms, w.entries())
        self.ledger.stage(FEATURE).add(len(msg), 1, int(w.vector.sum()))
        self.ledger.messages += 1
        return msg

    def run(self, events: Iterable[RawStackEvent]) -> Iterator[tuple[ProcessedWindow | None, bytes]]:
        """Yield ``(window, message)``; the first item is the vocabulary announce."""
        yield None, self.vocab_message()
        for ev in events:
            for w in self.feed(ev):
                yield w, self.encode(w)
        for w in self.flush():
            yield w, self.encode(w)


def run_collector(
    events: Iterable[RawStackEvent],
    mm: ModuleMap,
    report: SelectionReport,
    vocab: Vocabulary,
    send: Callable[[bytes], None] | None = None,
    window_ms: int = 6000,
    host: str = "localhost",
) -> ReductionLedger:
    """Stream ``events`` through the collector, handing each message to ``send``."""
    col = Collector(mm, report, vocab, window_ms=window_ms, host=host)
    for _, msg in col.run(events):
        if send is not None:
            send(msg)
    if col.late_events:
        log.warning("%d events arrived after their window closed", col.late_events)
    return col.ledger


def collect_windows(
    events: Iterable[RawStackEvent],
    mm: ModuleMap,
    report: SelectionReport,
    vocab: Vocabulary,
    window_ms: int = 6000,
) -> tuple[list[ProcessedWindow], ReductionLedger]:
    """All processed windows of ``events``, without encoding them."""
    col = Collector(mm, report, vocab, window_ms=window_ms)
    out = []
    for ev in events:
        out.extend(col.feed(ev))
    out.extend(col.flush())
    return out, col.ledger
