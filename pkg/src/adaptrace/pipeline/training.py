"""Training run: learn the selection artifacts and the classifier from labelled traces.

Stages run in collector order so that the windows the forest is trained on
are exactly what the collector will later produce for the same events:

1. resolve every stack; score APIs on the call graph and drop trivial ones
2. mine association rules on what is left and drop redundant APIs
3. score stacks per window (BCI/MBCI) and drop behavior-irrelevant ones
4. collapse repeated stacks and loops inside each window
5. fit a screening forest on API counts, keep the most important APIs
6. refit on the kept APIs only
"""
from __future__ import annotations

import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from ..apisel import (
    SelectionReport,
    build_api_graph,
    graph_importance,
    mine_associations,
    model_based_selection,
    redundant_groups,
    rule_for,
    select_trivial_apis,
)
from ..embedding import NS_PER_MS, FeatureWindow, Vocabulary, count_frames
from ..forest import EvalReport, ForestModel, evaluate, fit_forest
from ..stacksel import compute_bci, compute_mbci, select_irrelevant_stacks
from ..synthgen import WindowLabel
from ..trace import BENIGN, ModuleMap, RawStackEvent
from .collector import collect_windows
from .config import PipelineConfig
from .stages import Frames, StackParser, compress_stacks, drop_irrelevant

log = logging.getLogger(__name__)

LabelMap = Mapping[tuple[int, int], str]  # (pid, window_start_ms) -> label


@dataclass
class TrainResult:
    report: SelectionReport
    model: ForestModel
    screening_model: ForestModel
    windows: list[FeatureWindow]
    timings: dict[str, float] = field(default_factory=dict)


def label_map(labels: Iterable[WindowLabel]) -> dict[tuple[int, int], str]:
    return {(l.pid, l.window_start_ms): l.label for l in labels}


def split_labels(labels: LabelMap, test_fraction: float = 0.3, seed: int = 0) -> tuple[dict, dict]:
    """Random window-level split into ``(train, test)`` label maps."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    keys = sorted(labels)
    random.Random(seed).shuffle(keys)
    n_test = round(len(keys) * test_fraction)
    test = {k: labels[k] for k in sorted(keys[:n_test])}
    train = {k: labels[k] for k in sorted(keys[n_test:])}
    return train, test


def _bucket(
    events: Iterable[RawStackEvent], parser: StackParser, window_ms: int, wanted: set[tuple[int, int]]
) -> dict[tuple[int, int], list[Frames]]:
    width = window_ms * NS_PER_MS
    buckets: dict[tuple[int, int], list[Frames]] = defaultdict(list)
    for ev in events:
        k = (ev.pid, ev.ts // width)
        if k not in wanted:
            continue
        fr = parser.parse(ev)
        bucket = buckets[k]
        if fr is not None:
            bucket.append(fr)
    return dict(buckets)


def train_pipeline(
    events: Iterable[RawStackEvent],
    mm: ModuleMap,
    labels: LabelMap,
    config: PipelineConfig | None = None,
) -> TrainResult:
    """Learn a :class:`SelectionReport` and a :class:`ForestModel`.

    Only windows present in ``labels`` are used.  In ``top_only`` mode every
    stack is reduced to its top-level API and the selection stages are
    skipped, which gives the top-API frequency baseline.
    """
    import time

    config = config or PipelineConfig()
    full = config.mode == "full"
    timings: dict[str, float] = {}
    t0 = time.perf_counter()

    wanted = {(pid, start // config.window_ms) for pid, start in labels}
    window_label = {(pid, start // config.window_ms): lab for (pid, start), lab in labels.items()}
    buckets = _bucket(events, StackParser(mm, config.mode), config.window_ms, wanted)
    all_stacks = [fr for v in buckets.values() for fr in v]
    if not all_stacks:
        raise ValueError("no resolvable call stacks in the labelled windows")
    observed = {n for fr in all_stacks for n in fr.names}
    timings["resolve"] = time.perf_counter() - t0

    graph_scores: dict[str, float] = {}
    trivial: set[str] = set()
    redundant: dict[str, dict] = {}
    rules = []
    if full:
        t = time.perf_counter()
        graph_scores = graph_importance(build_api_graph(fr.names for fr in all_stacks))
        trivial = select_trivial_apis(graph_scores, config.trivial_api_threshold)
        stage1 = [d.names for fr in all_stacks if (d := fr.drop(trivial)).names]
        timings["graph"] = time.perf_counter() - t
        t = time.perf_counter()
        if stage1:
            rules = mine_associations(stage1, config.min_support)
        for group in redundant_groups(rules, config.min_lift, config.min_confidence):
            for api in group[1:]:
                r = rule_for(api, group, rules)
                redundant[api] = r.to_json() if r is not None else {}
        drop = trivial | set(redundant)
        if drop:
            buckets = {k: [d for fr in v if (d := fr.drop(drop)).names] for k, v in buckets.items()}
        timings["assoc"] = time.perf_counter() - t

    keys = sorted(buckets)
    ys = [window_label[k] for k in keys]
    t = time.perf_counter()
    bci: dict[str, float] = {}
    mbci: dict[str, float] = {}
    irrelevant: set[str] = set()
    if full:
        samples = [{fr.key for fr in buckets[k]} for k in keys]
        bci = compute_bci(samples, ys)
        if any(y != BENIGN for y in ys):
            mbci = compute_mbci(samples, ys)
        irrelevant = select_irrelevant_stacks(bci, mbci, config.bci_threshold, config.mbci_threshold)
    compress = config.compress_loops and full
    processed = {}
    for k in keys:
        st = drop_irrelevant(buckets[k], irrelevant)
        processed[k] = compress_stacks(st) if compress else st
    timings["stacks"] = time.perf_counter() - t

    names = sorted({n for v in processed.values() for fr in v for n in fr.names})
    if not names:
        raise ValueError("every API was filtered out; nothing left to train on")
    vocab_all = Vocabulary(names)
    X = np.vstack([count_frames((fr.names for fr in processed[k]), vocab_all) for k in keys])
    t = time.perf_counter()
    params = config.forest_params
    screening = fit_forest(X, ys, vocab_all, params, config.seed)
    importances = screening.importance_map()
    if full and config.model_importance_percentile > 0:
        kept_set = model_based_selection(importances, config.model_importance_percentile)
    else:
        kept_set = set(names)
    kept = [n for n in names if n in kept_set]
    vocab = Vocabulary(kept)
    if len(kept) == len(names):
        model = screening
    else:
        cols = [vocab_all.index[n] for n in kept]
        X = X[:, cols]
        model = fit_forest(X, ys, vocab, params, config.seed, classes=screening.classes)
    timings["forest"] = time.perf_counter() - t

    model_dropped = {a: importances.get(a, 0.0) for a in sorted(observed - trivial - set(redundant) - kept_set)}
    report = SelectionReport(
        mode=config.mode,
        trivial={a: graph_scores[a] for a in sorted(trivial)},
        redundant=redundant,
        model_dropped=model_dropped,
        kept=kept,
        graph_scores=graph_scores,
        rules=[r.to_json() for r in rules],
        irrelevant_stacks=sorted(irrelevant),
        bci=bci,
        mbci=mbci,
        params={**config.to_json(), "compress_loops": compress},
    )
    windows = [
        FeatureWindow(pid, w * config.window_ms, (w + 1) * config.window_ms, X[i], ys[i])
        for i, (pid, w) in enumerate(keys)
    ]
    log.info(
        "trained on %d windows: %d trivial, %d redundant, %d irrelevant stacks, %d of %d APIs kept",
        len(keys), len(trivial), len(redundant), len(irrelevant), len(kept), len(names),
    )
    return TrainResult(report, model, screening, windows, timings)


def labelled_windows(
    events: Iterable[RawStackEvent],
    mm: ModuleMap,
    report: SelectionReport,
    model: ForestModel,
    labels: LabelMap,
    window_ms: int = 6000,
) -> list[FeatureWindow]:
    """Collector-processed windows that have a label in ``labels``."""
    wanted = {(pid, start // window_ms) for pid, start in labels}
    width = window_ms * NS_PER_MS
    evs = (ev for ev in events if (ev.pid, ev.ts // width) in wanted)
    windows, _ = collect_windows(evs, mm, report, model.vocabulary, window_ms)
    out = []
    for w in windows:
        lab = labels.get((w.pid, w.window_start_ms))
        if lab is not None:
            out.append(FeatureWindow(w.pid, w.window_start_ms, w.window_end_ms, w.vector, lab))
    return out


def evaluate_pipeline(
    events: Iterable[RawStackEvent],
    mm: ModuleMap,
    report: SelectionReport,
    model: ForestModel,
    labels: LabelMap,
    window_ms: int = 6000,
) -> EvalReport:
    test = labelled_windows(events, mm, report, model, labels, window_ms)
    if not test:
        raise ValueError("no labelled windows in the evaluation trace")
    return evaluate(model, test)
