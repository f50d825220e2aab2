"""Address symbolication and per-stack parsing with use/useless caches."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .trace import ModuleMap, RawStackEvent, ResolvedCallStack


@dataclass
class ResolverCaches:
    """Address caches valid for one ModuleMap and one ApiFilter.

    ``useful`` maps an address to the API it resolves to; ``useless`` holds
    addresses that resolve to nothing or to a filtered API.  The counters
    make cache behaviour observable: ``searches`` counts export searches
    against the map, ``hits`` counts lookups answered from either cache.
    """

    useful: dict[int, str] = field(default_factory=dict)
    useless: set[int] = field(default_factory=set)
    searches: int = 0
    hits: int = 0

    @property
    def lookups(self) -> int:
        return self.searches + self.hits

    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0

    def reset_counters(self) -> None:
        self.searches = 0
        self.hits = 0

    def clear(self) -> None:
        self.useful.clear()
        self.useless.clear()
        self.reset_counters()


@dataclass(frozen=True)
class ApiFilter:
    dropped_apis: frozenset[str] = frozenset()

    def __contains__(self, api: str) -> bool:
        return api in self.dropped_apis

    def __len__(self) -> int:
        return len(self.dropped_apis)

    @classmethod
    def of(cls, *groups: Iterable[str]) -> "ApiFilter":
        return cls(frozenset().union(*map(frozenset, groups)))


EMPTY_FILTER = ApiFilter()


def resolve_address(addr: int, mm: ModuleMap, caches: ResolverCaches) -> str | None:
    """Resolve one address, cache-first.

    An address already in the useless cache is reported unresolved without
    searching the map.
    """
    name = caches.useful.get(addr)
    if name is not None:
        caches.hits += 1
        return name
    if addr in caches.useless:
        caches.hits += 1
        return None
    caches.searches += 1
    name = mm.lookup(addr)
    if name is None:
        caches.useless.add(addr)
    else:
        caches.useful[addr] = name
    return name


def parse_frames(
    stack: Iterable[int],
    mm: ModuleMap,
    filt: ApiFilter,
    caches: ResolverCaches,
    with_addresses: bool = False,
):
    """Resolve and filter one raw stack.

    Returns the kept API names, or ``(names, addresses)`` when
    ``with_addresses`` is set.  Unresolved and filtered addresses are sent to
    the useless cache; an API equal to the previously kept one is dropped
    without touching the caches, since that address is useful elsewhere.
    """
    useful = caches.useful
    useless = caches.useless
    dropped = filt.dropped_apis
    names: list[str] = []
    addrs: list[int] = []
    prev = None
    hits = searches = 0
    for addr in stack:
        if addr in useless:
            hits += 1
            continue
        api = useful.get(addr)
        if api is None:
            searches += 1
            api = mm.lookup(addr)
            if api is None or api in dropped:
                useless.add(addr)
                continue
            useful[addr] = api
        else:
            hits += 1
            if api in dropped:
                # warmed by an unfiltered resolve_address call
                del useful[addr]
                useless.add(addr)
                continue
        if api != prev:
            names.append(api)
            if with_addresses:
                addrs.append(addr)
            prev = api
    caches.hits += hits
    caches.searches += searches
    if with_addresses:
        return names, addrs
    return names


def parse_call_stack(
    ev: RawStackEvent, mm: ModuleMap, filt: ApiFilter, caches: ResolverCaches
) -> ResolvedCallStack | None:
    """Resolved, filtered call stack for ``ev``; None when no frame survives."""
    names = parse_frames(ev.stack, mm, filt, caches)
    if not names:
        return None
    return ResolvedCallStack(ev.pid, ev.tid, ev.ts, tuple(names))


def parse_call_stack_uncached(
    ev: RawStackEvent, mm: ModuleMap, filt: ApiFilter
) -> ResolvedCallStack | None:
    """Same result as :func:`parse_call_stack` with every address searched."""
    names: list[str] = []
    prev = None
    for addr in ev.stack:
        api = mm.lookup(addr)
        if api is None or api in filt.dropped_apis or api == prev:
            continue
        names.append(api)
        prev = api
    if not names:
        return None
    return ResolvedCallStack(ev.pid, ev.tid, ev.ts, tuple(names))


def top_level_api(ev: RawStackEvent, mm: ModuleMap, caches: ResolverCaches) -> str | None:
    """First frame of ``ev`` that resolves inside any module."""
    for addr in ev.stack:
        api = resolve_address(addr, mm, caches)
        if api is not None:
            return api
    return None


class Resolver:
    """A ModuleMap, an ApiFilter and the caches that belong to both.

    Changing either the map or the filter goes through :meth:`rebind`,
    which drops every cached address.
    """

    def __init__(self, mm: ModuleMap, filt: ApiFilter = EMPTY_FILTER):
        self.module_map = mm
        self.filter = filt
        self.caches = ResolverCaches()

    def rebind(self, mm: ModuleMap | None = None, filt: ApiFilter | None = None) -> None:
        if mm is not None:
            self.module_map = mm
        if filt is not None:
            self.filter = filt
        self.caches.clear()

    def parse(self, ev: RawStackEvent) -> ResolvedCallStack | None:
        return parse_call_stack(ev, self.module_map, self.filter, self.caches)

    def parse_many(self, events: Iterable[RawStackEvent]) -> list[ResolvedCallStack]:
        out = []
        for ev in events:
            rs = self.parse(ev)
            if rs is not None:
                out.append(rs)
        return out

    def top_level(self, ev: RawStackEvent) -> str | None:
        # the filter does not apply: top-only mode keeps whatever is on top
        return top_level_api(ev, self.module_map, self.caches)
