"""Learning which APIs the collector may skip.

Three independent signals, applied in this order during training:

* trivial APIs: vertices of the consecutive-call graph whose normalized
  degree is high (they sit in the middle of every calling community);
* redundant APIs: groups of APIs that co-occur in call stacks so reliably
  (mutual high-confidence, high-lift rules) that one member carries all the
  information;
* low-importance APIs: features below a percentile of the forest's Gini
  importances.
"""
from __future__ import annotations

import json
import math
import os
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from .resolver import ApiFilter
from .trace import ResolvedCallStack


def _frames(stack) -> Sequence[str]:
    return stack.frames if isinstance(stack, ResolvedCallStack) else stack


@dataclass(frozen=True)
class ApiGraph:
    vertices: frozenset[str]
    edges: frozenset[frozenset[str]]

    def degree(self) -> dict[str, int]:
        deg = dict.fromkeys(self.vertices, 0)
        for e in self.edges:
            for v in e:
                deg[v] += 1
        return deg

    def neighbors(self, v: str) -> set[str]:
        return {u for e in self.edges if v in e for u in e if u != v}


def build_api_graph(corpus: Iterable) -> ApiGraph:
    """Undirected graph linking APIs called consecutively in some stack."""
    vertices: set[str] = set()
    edges: set[frozenset[str]] = set()
    seen: set[tuple[str, ...]] = set()
    for stack in corpus:
        frames = tuple(_frames(stack))
        if frames in seen:
            continue
        seen.add(frames)
        vertices.update(frames)
        for a, b in zip(frames, frames[1:]):
            if a != b:
                edges.add(frozenset((a, b)))
    if not vertices:
        raise ValueError("cannot build an API graph from an empty corpus")
    return ApiGraph(frozenset(vertices), frozenset(edges))


def graph_importance(g: ApiGraph) -> dict[str, float]:
    """Normalized degree ``deg(v) / (N - 1)``; 0 for a single-vertex graph."""
    n = len(g.vertices)
    deg = g.degree()
    if n < 2:
        return {v: 0.0 for v in deg}
    return {v: d / (n - 1) for v, d in deg.items()}


def select_trivial_apis(scores: Mapping[str, float], threshold: float) -> set[str]:
    return {v for v, s in scores.items() if s >= threshold}


# ---------------------------------------------------------------------------
# association rules


@dataclass(frozen=True)
class AssociationRule:
    antecedent: str
    consequent: str
    support_ab: float
    confidence: float
    lift: float
    support_a: float
    support_b: float

    def to_json(self) -> dict:
        return asdict(self)


def frequent_itemsets(
    transactions: Iterable[Iterable[str]], min_support: float, max_len: int = 2
) -> tuple[dict[frozenset[str], int], int]:
    """Level-wise Apriori.

    Returns ``(counts, T)`` where ``counts`` maps every frequent itemset of
    size <= ``max_len`` to the number of transactions containing it.
    Identical transactions are counted once and weighted.
    """
    if not min_support > 0:
        raise ValueError("min_support must be positive")
    weighted = Counter(frozenset(t) for t in transactions)
    T = sum(weighted.values())
    if T == 0:
        return {}, 0

    def frequent(c: int) -> bool:
        # compare supports, not counts: min_support * T can round past an integer
        return c / T >= min_support

    item_counts: Counter[str] = Counter()
    for t, w in weighted.items():
        for item in t:
            item_counts[item] += w
    level = {frozenset((i,)): c for i, c in item_counts.items() if frequent(c)}
    result = dict(level)
    frequent_items = {next(iter(s)) for s in level}
    # prune transactions down to frequent items once; later levels only need those
    pruned: Counter[tuple[str, ...]] = Counter()
    for t, w in weighted.items():
        kept = tuple(sorted(t & frequent_items))
        if len(kept) >= 2:
            pruned[kept] += w

    k = 2
    while level and k <= max_len:
        prev = sorted(tuple(sorted(s)) for s in level)
        prev_set = set(level)
        candidates: set[frozenset[str]] = set()
        for i, a in enumerate(prev):
            for b in prev[i + 1:]:
                if a[:-1] != b[:-1]:
                    break
                cand = frozenset(a + (b[-1],))
                if all(frozenset(sub) in prev_set for sub in combinations(sorted(cand), k - 1)):
                    candidates.add(cand)
        if not candidates:
            break
        counts: Counter[frozenset[str]] = Counter()
        for t, w in pruned.items():
            if len(t) < k:
                continue
            for sub in combinations(t, k):
                fs = frozenset(sub)
                if fs in candidates:
                    counts[fs] += w
        level = {s: c for s, c in counts.items() if frequent(c)}
        result.update(level)
        k += 1
    return result, T


def mine_associations(corpus: Iterable, min_support: float, max_len: int = 2) -> list[AssociationRule]:
    """All ordered pair rules ``A -> B`` whose joint support reaches ``min_support``.

    Each call stack is one transaction over its distinct APIs.
    """
    counts, T = frequent_itemsets((_frames(s) for s in corpus), min_support, max_len=max(2, max_len))
    rules = []
    for itemset, c_ab in counts.items():
        if len(itemset) != 2:
            continue
        a, b = sorted(itemset)
        s_ab = c_ab / T
        for x, y in ((a, b), (b, a)):
            s_x = counts[frozenset((x,))] / T
            s_y = counts[frozenset((y,))] / T
            rules.append(AssociationRule(x, y, s_ab, s_ab / s_x, s_ab / (s_x * s_y), s_x, s_y))
    rules.sort(key=lambda r: (r.antecedent, r.consequent))
    return rules


def redundant_groups(
    rules: Iterable[AssociationRule], min_lift: float, min_confidence: float
) -> list[list[str]]:
    """Connected groups of the mutual-rule graph, each sorted by name."""
    passing = {
        (r.antecedent, r.consequent)
        for r in rules
        if r.lift >= min_lift and r.confidence >= min_confidence
    }
    parent: dict[str, str] = {}

    def find(x: str) -> str:
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in passing:
        if a < b and (b, a) in passing:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups: dict[str, list[str]] = defaultdict(list)
    for x in parent:
        groups[find(x)].append(x)
    return sorted(sorted(g) for g in groups.values() if len(g) > 1)


def reduce_redundant_apis(
    rules: Iterable[AssociationRule], min_lift: float, min_confidence: float
) -> set[str]:
    """APIs to drop: every member of a redundant group but the smallest name."""
    drop: set[str] = set()
    for g in redundant_groups(rules, min_lift, min_confidence):
        drop.update(g[1:])
    return drop


def nearest_rank_percentile(values: Sequence[float], percentile: float) -> float:
    if not len(values):
        raise ValueError("percentile of an empty sequence")
    if not 0 <= percentile <= 100:
        raise ValueError("percentile must lie in [0, 100]")
    ordered = sorted(values)
    rank = math.ceil(percentile * len(ordered) / 100)
    return ordered[max(rank, 1) - 1]


def model_based_selection(importances: Mapping[str, float], percentile: float) -> set[str]:
    """APIs whose importance reaches the nearest-rank ``percentile``."""
    if not importances:
        raise ValueError("empty importance vector")
    cut = nearest_rank_percentile(list(importances.values()), percentile)
    return {api for api, v in importances.items() if v >= cut}


# ---------------------------------------------------------------------------
# report


@dataclass
class SelectionReport:
    """Everything the collector needs from a training run, plus provenance.

    ``trivial``, ``redundant``, ``model_dropped`` and ``kept`` partition the
    vocabulary observed at training time.
    """

    mode: str = "full"
    trivial: dict[str, float] = field(default_factory=dict)
    redundant: dict[str, dict] = field(default_factory=dict)
    model_dropped: dict[str, float] = field(default_factory=dict)
    kept: list[str] = field(default_factory=list)
    graph_scores: dict[str, float] = field(default_factory=dict)
    rules: list[dict] = field(default_factory=list)
    irrelevant_stacks: list[str] = field(default_factory=list)
    bci: dict[str, float] = field(default_factory=dict)
    mbci: dict[str, float] = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    @property
    def vocabulary(self) -> set[str]:
        return set(self.trivial) | set(self.redundant) | set(self.model_dropped) | set(self.kept)

    def parse_filter(self) -> ApiFilter:
        """APIs skipped while parsing stacks, before stack selection."""
        return ApiFilter.of(self.trivial, self.redundant)

    def api_filter(self) -> ApiFilter:
        return ApiFilter.of(self.trivial, self.redundant, self.model_dropped)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "SelectionReport":
        return cls(**doc)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SelectionReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def rule_for(api: str, group: Sequence[str], rules: Iterable[AssociationRule]) -> AssociationRule | None:
    """Strongest rule linking ``api`` to another member of its group."""
    members = set(group) - {api}
    best = None
    for r in rules:
        if r.consequent == api and r.antecedent in members:
            if best is None or (r.lift, r.confidence) > (best.lift, best.confidence):
                best = r
    return best


def importance_map(names: Sequence[str], values: np.ndarray | Sequence[float]) -> dict[str, float]:
    return {n: float(v) for n, v in zip(names, values)}
