"""Per-process tumbling windows and API-frequency vectors."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .trace import KEY_SEPARATOR, ResolvedCallStack

NS_PER_MS = 1_000_000


class Vocabulary:
    """Ordered API names; position ``i`` is feature dimension ``i``."""

    def __init__(self, names: Iterable[str]):
        self.names: tuple[str, ...] = tuple(names)
        self.index = {n: i for i, n in enumerate(self.names)}
        if len(self.index) != len(self.names):
            raise ValueError("duplicate API in vocabulary")

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names)

    def __contains__(self, name: object) -> bool:
        return name in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.names == other.names

    def __repr__(self) -> str:
        return f"Vocabulary({len(self.names)} APIs)"

    def restrict(self, keep: Iterable[str]) -> "Vocabulary":
        keep = set(keep)
        return Vocabulary(n for n in self.names if n in keep)


@dataclass
class FeatureWindow:
    pid: int
    window_start_ms: int
    window_end_ms: int
    vector: np.ndarray
    label: str | None = None

    def nonzero(self) -> list[tuple[int, int]]:
        idx = np.flatnonzero(self.vector)
        return [(int(i), int(self.vector[i])) for i in idx]


def window_index(ts_ns: int, window_ms: int) -> int:
    return ts_ns // (window_ms * NS_PER_MS)


def assign_windows(
    events: Iterable[ResolvedCallStack], window_ms: int
) -> dict[tuple[int, int], list[ResolvedCallStack]]:
    """Bucket stacks by ``(pid, window index)``, epoch-aligned.

    Buckets keep arrival order; callers sort by key for a stable emission order.
    """
    if window_ms <= 0:
        raise ValueError("window_ms must be positive")
    width = window_ms * NS_PER_MS
    buckets: dict[tuple[int, int], list[ResolvedCallStack]] = defaultdict(list)
    for ev in events:
        buckets[(ev.pid, ev.ts // width)].append(ev)
    return dict(buckets)


def window_bounds(index: int, window_ms: int) -> tuple[int, int]:
    return index * window_ms, (index + 1) * window_ms


def count_frames(stacks: Iterable[Sequence[str] | str], vocab: Vocabulary) -> np.ndarray:
    """Occurrences of each vocabulary API over all frames of ``stacks``.

    A stack is either a frame sequence or a stack key.
    """
    vec = np.zeros(len(vocab), dtype=np.int64)
    index = vocab.index
    for st in stacks:
        frames = st.split(KEY_SEPARATOR) if isinstance(st, str) else st
        for f in frames:
            i = index.get(f)
            if i is not None:
                vec[i] += 1
    return vec


def embed_window(
    stacks: Iterable[Sequence[str] | str],
    vocab: Vocabulary,
    pid: int = 0,
    window_start_ms: int = 0,
    window_end_ms: int = 0,
    label: str | None = None,
    normalize: bool = False,
) -> FeatureWindow:
    vec = count_frames(stacks, vocab)
    if normalize:
        total = vec.sum()
        vec = vec / total if total else vec.astype(float)
    return FeatureWindow(pid, window_start_ms, window_end_ms, vec, label)


def stack_matrix(windows: Sequence[FeatureWindow]) -> np.ndarray:
    if not windows:
        return np.zeros((0, 0))
    return np.vstack([w.vector for w in windows])
