"""Building blocks shared by training and collection.

A :class:`Frames` value carries the surviving API names of one stack together
with the raw addresses they came from, so every stage can report how many
trace bytes it would still cost.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from ..embedding import NS_PER_MS
from ..resolver import ApiFilter, EMPTY_FILTER, ResolverCaches, parse_frames, resolve_address
from ..stacksel import loop_compress, remove_adjacent_duplicates
from ..trace import KEY_SEPARATOR, ModuleMap, RawStackEvent

# '{"pid":' P ',"tid":' T ',"ts":' S ',"stack":[' ... ']}' '\n'
_LINE_FIXED = len('{"pid":,"tid":,"ts":,"stack":[]}\n')


def frame_bytes(addr: int) -> int:
    # quoted hex literal plus its separating comma
    return len(hex(addr)) + 3


def line_bytes(ev: RawStackEvent) -> int:
    """Length of ``ev``'s trace line, newline included."""
    head = _LINE_FIXED + len(str(ev.pid)) + len(str(ev.tid)) + len(str(ev.ts))
    if not ev.stack:
        return head
    return head - 1 + sum(len(hex(a)) + 3 for a in ev.stack)


@dataclass(frozen=True)
class Frames:
    names: tuple[str, ...]
    addrs: tuple[int, ...]
    head: int  # line bytes of the event with an empty stack

    @property
    def key(self) -> str:
        return KEY_SEPARATOR.join(self.names)

    @property
    def nbytes(self) -> int:
        if not self.names:
            return 0
        return self.head - 1 + sum(frame_bytes(a) for a in self.addrs)

    def drop(self, apis: frozenset[str] | set[str]) -> "Frames":
        """Remove ``apis`` and re-collapse consecutive repeats (first address kept)."""
        names: list[str] = []
        addrs: list[int] = []
        prev = None
        for n, a in zip(self.names, self.addrs):
            if n in apis or n == prev:
                continue
            names.append(n)
            addrs.append(a)
            prev = n
        return Frames(tuple(names), tuple(addrs), self.head)

    def keep_only(self, apis: frozenset[str] | set[str]) -> "Frames":
        """Keep frames in ``apis``; repeats stay, since every one is counted."""
        pairs = [(n, a) for n, a in zip(self.names, self.addrs) if n in apis]
        return Frames(tuple(n for n, _ in pairs), tuple(a for _, a in pairs), self.head)


def event_head(ev: RawStackEvent) -> int:
    return _LINE_FIXED + len(str(ev.pid)) + len(str(ev.tid)) + len(str(ev.ts))


class StackParser:
    """Resolution plus the two API-level filters, in collector order.

    ``full`` mode runs the cached parse with the trivial-API filter and then
    removes redundant APIs; ``top_only`` keeps the first resolvable frame.
    """

    def __init__(
        self,
        mm: ModuleMap,
        mode: str = "full",
        trivial: Iterable[str] = (),
        redundant: Iterable[str] = (),
    ):
        self.module_map = mm
        self.mode = mode
        self.filter = ApiFilter.of(trivial) if trivial else EMPTY_FILTER
        self.redundant = frozenset(redundant)
        self.caches = ResolverCaches()

    def parse(self, ev: RawStackEvent) -> Frames | None:
        """Stage-one output (after resolution and trivial filtering)."""
        if self.mode == "top_only":
            for addr in ev.stack:
                api = resolve_address(addr, self.module_map, self.caches)
                if api is not None:
                    return Frames((api,), (addr,), event_head(ev))
            return None
        names, addrs = parse_frames(ev.stack, self.module_map, self.filter, self.caches, with_addresses=True)
        if not names:
            return None
        return Frames(tuple(names), tuple(addrs), event_head(ev))

    def drop_redundant(self, fr: Frames) -> Frames | None:
        if not self.redundant:
            return fr
        out = fr.drop(self.redundant)
        return out if out.names else None


def window_key(ev_pid: int, ts: int, window_ms: int) -> tuple[int, int]:
    return ev_pid, ts // (window_ms * NS_PER_MS)


def drop_irrelevant(stacks: Sequence[Frames], irrelevant: frozenset[str] | set[str]) -> list[Frames]:
    if not irrelevant:
        return list(stacks)
    return [s for s in stacks if s.key not in irrelevant]


def compress_stacks(stacks: Sequence[Frames]) -> list[Frames]:
    """Duplicate removal then loop compression, keeping the surviving stack objects."""
    if not stacks:
        return []
    keys = [s.key for s in stacks]
    out_keys = loop_compress(remove_adjacent_duplicates(keys))
    # the compressed keys are a subsequence of the input: pick the leftmost embedding
    kept = []
    j = 0
    for k in out_keys:
        while keys[j] != k:
            j += 1
        kept.append(stacks[j])
        j += 1
    return kept


def restrict(stacks: Sequence[Frames], vocab: frozenset[str] | set[str]) -> list[Frames]:
    out = []
    for s in stacks:
        r = s.keep_only(vocab)
        if r.names:
            out.append(r)
    return out
