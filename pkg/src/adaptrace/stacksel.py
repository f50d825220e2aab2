"""Call-stack selection: correlation indices and repetition removal.

A call stack is identified by its key (see :func:`adaptrace.trace.stack_key`).
The correlation indices measure how evenly a stack is spread over behavior
classes; stacks that are spread evenly say nothing about any one behavior.
"""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Hashable, Iterable, Mapping, Sequence, TypeVar

from .trace import BENIGN

K = TypeVar("K", bound=Hashable)


def correlation_index(
    samples: Iterable[Iterable[Hashable]], labels: Iterable[str]
) -> dict[Hashable, float]:
    """Entropy-style spread of each stack key over the labelled classes.

    For every class the fraction ``p`` of that class's samples containing the
    key contributes ``-p ln p``; zero fractions contribute nothing.
    """
    class_size: Counter[str] = Counter()
    containing: dict[Hashable, Counter[str]] = defaultdict(Counter)
    for keys, label in zip(samples, labels, strict=True):
        class_size[label] += 1
        for k in set(keys):
            containing[k][label] += 1
    if not class_size:
        raise ValueError("empty corpus")
    out = {}
    for k, per_class in containing.items():
        total = 0.0
        for label, n in per_class.items():
            p = n / class_size[label]
            if p < 1.0:
                total -= p * math.log(p)
        out[k] = total
    return out


def compute_bci(samples: Sequence[Iterable[Hashable]], labels: Sequence[str]) -> dict[Hashable, float]:
    """Spread over all classes, benign included."""
    return correlation_index(samples, labels)


def compute_mbci(
    samples: Sequence[Iterable[Hashable]], labels: Sequence[str], benign: str = BENIGN
) -> dict[Hashable, float]:
    """Spread over the malicious classes only; benign samples are ignored."""
    pairs = [(s, y) for s, y in zip(samples, labels, strict=True) if y != benign]
    if not pairs:
        raise ValueError("no malicious samples")
    return correlation_index([s for s, _ in pairs], [y for _, y in pairs])


def select_irrelevant_stacks(
    bci: Mapping[K, float], mbci: Mapping[K, float], bci_threshold: float, mbci_threshold: float
) -> set[K]:
    """Keys whose BCI or MBCI reaches its threshold."""
    if bci_threshold < 0 or mbci_threshold < 0:
        raise ValueError("thresholds must be non-negative")
    out = {k for k, v in bci.items() if v >= bci_threshold}
    out.update(k for k, v in mbci.items() if v >= mbci_threshold)
    return out


def remove_adjacent_duplicates(seq: Sequence[K]) -> list[K]:
    out: list[K] = []
    for x in seq:
        if not out or out[-1] != x:
            out.append(x)
    return out


def lca_pass(seq: Sequence[K]) -> list[K]:
    """One left-to-right pass of the loop-compression algorithm.

    On reaching a key last seen at ``il``, the block ``seq[il:i]`` is
    compared with ``seq[i:2i-il]``.  A full match skips the repeat; otherwise
    the matching prefix is copied and scanning resumes at the first mismatch.
    Positions past the end of ``seq`` count as mismatches.
    """
    out: list[K] = []
    last: dict[K, int] = {}
    n = len(seq)
    i = 0
    while i < n:
        cs = seq[i]
        il = last.get(cs)
        last[cs] = i
        if il is None:
            out.append(cs)
            i += 1
            continue
        span = i - il
        stop = min(i + span, n)
        k = i
        while k < stop and seq[k] == seq[k - span]:
            k += 1
        if k == i + span:
            i = k
        else:
            out.extend(seq[i:k])
            i = k
    return out


def lca(seq: Sequence[K]) -> list[K]:
    """Loop-compression passes repeated while they shorten the sequence."""
    cur = list(seq)
    while True:
        nxt = lca_pass(cur)
        if len(nxt) >= len(cur):
            return nxt
        cur = nxt


def find_square(seq: Sequence[K]) -> tuple[int, int] | None:
    """Leftmost shortest adjacent repeat ``w w`` as ``(start, len(w))``."""
    n = len(seq)
    for p in range(1, n // 2 + 1):
        run = 0
        for i in range(n - p):
            if seq[i] == seq[i + p]:
                run += 1
                if run == p:
                    return i - p + 1, p
            else:
                run = 0
    return None


def loop_compress(seq: Sequence[K]) -> list[K]:
    """Compress repeated blocks until no block is immediately repeated.

    Runs :func:`lca` to its fixpoint.  Blocks that scan misses (a repeat
    whose first key was already seen earlier with a different gap) are
    then collapsed one at a time, leftmost shortest first, and the scan
    resumes.  The result is a subsequence of ``seq`` containing no ``w w``.
    """
    cur = lca(seq)
    while True:
        sq = find_square(cur)
        if sq is None:
            return cur
        start, p = sq
        del cur[start + p:start + 2 * p]
        cur = lca(cur)


def process_window(keys: Sequence[K], irrelevant: Iterable[K] = (), compress: bool = True) -> list[K]:
    """Stack-selection order for one window: drop irrelevant, dedupe, compress."""
    drop = irrelevant if isinstance(irrelevant, (set, frozenset)) else set(irrelevant)
    kept = [k for k in keys if k not in drop]
    kept = remove_adjacent_duplicates(kept)
    if compress:
        kept = loop_compress(kept)
    return kept
