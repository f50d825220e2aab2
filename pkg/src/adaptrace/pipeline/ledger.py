"""Per-stage data-volume accounting for the collector."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

STAGES = (
    "Graph-based API Selection",
    "Association-based API Selection",
    "Call Stack Selection",
    "Loop Compression",
    "Model-based API Selection",
    "Feature Extraction(API Frequency)",
)
RAW = "Raw Data"


@dataclass
class StageCounter:
    bytes: int = 0
    stacks: int = 0
    frames: int = 0

    def add(self, nbytes: int, stacks: int = 0, frames: int = 0) -> None:
        self.bytes += nbytes
        self.stacks += stacks
        self.frames += frames


@dataclass
class ReductionLedger:
    """Bytes, stacks and frames remaining after each reduction stage.

    ``raw`` is the trace as read.  Intermediate stages measure what a trace
    line would cost if it kept only the surviving frames; the last stage
    counts encoded wire bytes.  Each stage's input is the previous stage's
    output, so per-stage retentions multiply to the final retention.
    """

    raw: StageCounter = field(default_factory=StageCounter)
    stages: dict[str, StageCounter] = field(default_factory=lambda: {s: StageCounter() for s in STAGES})
    windows: int = 0
    messages: int = 0

    def stage(self, name: str) -> StageCounter:
        return self.stages[name]

    def counters(self) -> list[tuple[str, StageCounter]]:
        return [(RAW, self.raw)] + [(s, self.stages[s]) for s in STAGES]

    def remaining(self) -> list[float]:
        """Percent of raw bytes left after each row."""
        if self.raw.bytes == 0:
            return [100.0] * (len(STAGES) + 1)
        return [100.0 * c.bytes / self.raw.bytes for _, c in self.counters()]

    def stage_retention(self) -> list[float]:
        """Fraction of each stage's input bytes that it passes on."""
        out = []
        prev = self.raw.bytes
        for s in STAGES:
            cur = self.stages[s].bytes
            out.append(cur / prev if prev else 1.0)
            prev = cur
        return out

    @property
    def final_retention(self) -> float:
        return self.stages[STAGES[-1]].bytes / self.raw.bytes if self.raw.bytes else 1.0

    def check(self) -> None:
        prev = self.raw
        for s in STAGES:
            cur = self.stages[s]
            if cur.bytes > prev.bytes and s != STAGES[-1]:
                raise AssertionError(f"stage {s} grew the data")
            prev = cur

    def merge(self, other: "ReductionLedger") -> None:
        for (_, a), (_, b) in zip(self.counters(), other.counters()):
            a.add(b.bytes, b.stacks, b.frames)
        self.windows += other.windows
        self.messages += other.messages

    def to_json(self) -> dict:
        rows = []
        prev = 100.0
        for (name, c), rem in zip(self.counters(), self.remaining()):
            rows.append({
                "stage": name,
                "bytes": c.bytes,
                "stacks": c.stacks,
                "frames": c.frames,
                "remaining_pct": rem,
                "reduce_rate_pct": rem - prev,
            })
            prev = rem
        return {
            "rows": rows,
            "final_retention": self.final_retention,
            "windows": self.windows,
            "messages": self.messages,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ReductionLedger":
        led = cls()
        by_name = {r["stage"]: r for r in doc["rows"]}
        for name, c in led.counters():
            r = by_name[name]
            c.add(int(r["bytes"]), int(r["stacks"]), int(r["frames"]))
        led.windows = int(doc.get("windows", 0))
        led.messages = int(doc.get("messages", 0))
        return led

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ReductionLedger":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def reduction_report(ledger: ReductionLedger) -> str:
    """Text table: one row per stage, remaining share and change in points."""
    doc = ledger.to_json()
    width = max(len(r["stage"]) for r in doc["rows"])
    lines = [f"{'Data Processing Method':<{width}}  {'Remaining':>10}  {'Reduce Rate':>11}"]
    for r in doc["rows"]:
        rate = r["reduce_rate_pct"]
        # a zero change prints as -0.00%, the table's convention for "nothing removed"
        rate_s = "-" if r["stage"] == RAW else f"{'-' if rate <= 0 else '+'}{abs(rate):.2f}%"
        lines.append(f"{r['stage']:<{width}}  {r['remaining_pct']:>9.2f}%  {rate_s:>11}")
    return "\n".join(lines)
