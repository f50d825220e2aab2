"""Deterministic synthetic workloads: module maps, labelled traces, ground truth.

Behaviors are described by a template document (``data/templates.json`` by
default).  Each template lists call stacks as API names, shallowest frame
first, plus optional loop motifs that are replayed back to back.  The
generator turns names into return addresses inside a synthetic module map,
prepends unresolvable user-code frames, interleaves frames from a pool of
trivial APIs, and emits the consequent of every association pair right after
its antecedent.

Template document keys::

    trivial_apis   list of API names used as trivial-frame noise
    assoc_pairs    [[A, B], ...]; B follows A with probability assoc_probability
    noise_stacks   {"probability", "mean_count", "stacks"}: stacks shared by
                   every behavior, each included in a window with the given
                   probability and a Poisson number of copies
    templates      list of {label, emission_rate (stacks/s), stacks,
                   loop_motifs: [{stacks, repeat: [lo, hi], probability}],
                   background_share, signature_apis?, generated?}

A ``generated`` block (used by the benign template) synthesizes a pool of
APIs and random stacks.  The first ``shared_stacks`` of them are common
background: every process draws a profile of ``profile_size`` stacks from
that part, and malicious processes mix it in at ``background_share``.
Benign processes also draw ``app_profile_size`` stacks from the rest of the
pool, standing in for the wide API surface of ordinary applications.
"""
from __future__ import annotations

import json
import math
import os
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding import NS_PER_MS
from .trace import (
    BENIGN,
    DEFAULT_LABELS,
    ExportEntry,
    ModuleImage,
    ModuleMap,
    RawStackEvent,
    write_module_map,
    write_trace,
)

MODULE_BASE = 0x7FF800000000
MODULE_STRIDE = 0x100000
EXPORT_STRIDE = 0x200
EXPORT_SIZE = 0x180
USER_IMAGE_BASE = 0x140000000
CALL_SITES = 3

Stack = tuple[str, ...]


@dataclass(frozen=True)
class LoopMotif:
    stacks: tuple[Stack, ...]
    repeat: tuple[int, int]
    probability: float = 1.0


@dataclass(frozen=True)
class BehaviorTemplate:
    label: str
    signature_apis: tuple[str, ...]
    emission_rate: float
    stacks: tuple[Stack, ...]
    loop_motifs: tuple[LoopMotif, ...] = ()
    background_share: float = 0.0
    stack_share: float = 1.0
    generated: dict | None = None

    def apis(self) -> set[str]:
        out = {a for s in self.stacks for a in s}
        out.update(a for m in self.loop_motifs for s in m.stacks for a in s)
        return out


@dataclass
class TemplateSet:
    templates: dict[str, BehaviorTemplate]
    trivial_apis: tuple[str, ...]
    assoc_pairs: tuple[tuple[str, str], ...] = ()
    noise_stacks: tuple[Stack, ...] = ()
    noise_probability: float = 0.0
    noise_mean_count: float = 0.0

    @classmethod
    def from_json(cls, doc: dict) -> "TemplateSet":
        raw = []
        for t in doc["templates"]:
            motifs = tuple(
                LoopMotif(
                    tuple(tuple(s) for s in m["stacks"]),
                    (int(m["repeat"][0]), int(m["repeat"][1])),
                    float(m.get("probability", 1.0)),
                )
                for m in t.get("loop_motifs", ())
            )
            raw.append(
                dict(
                    label=t["label"],
                    signature_apis=tuple(t.get("signature_apis", ())),
                    emission_rate=float(t.get("emission_rate", 5.0)),
                    stacks=tuple(tuple(s) for s in t.get("stacks", ())),
                    loop_motifs=motifs,
                    background_share=float(t.get("background_share", 0.0)),
                    stack_share=float(t.get("stack_share", 1.0)),
                    generated=t.get("generated"),
                )
            )
        # signatures default to the APIs no other template uses
        usage: dict[str, set[str]] = {}
        for t in raw:
            apis = {a for s in t["stacks"] for a in s}
            apis.update(a for m in t["loop_motifs"] for s in m.stacks for a in s)
            for a in apis:
                usage.setdefault(a, set()).add(t["label"])
        templates = {}
        for t in raw:
            if not t["signature_apis"]:
                own = {a for s in t["stacks"] for a in s if usage[a] == {t["label"]}}
                t["signature_apis"] = tuple(sorted(own))
            templates[t["label"]] = BehaviorTemplate(**t)
        noise = doc.get("noise_stacks", {})
        ts = cls(
            templates=templates,
            trivial_apis=tuple(doc.get("trivial_apis", ())),
            assoc_pairs=tuple((a, b) for a, b in doc.get("assoc_pairs", ())),
            noise_stacks=tuple(tuple(s) for s in noise.get("stacks", ())),
            noise_probability=float(noise.get("probability", 0.0)),
            noise_mean_count=float(noise.get("mean_count", 0.0)),
        )
        ts.validate()
        return ts

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> "TemplateSet":
        if path is None:
            text = resources.files("adaptrace").joinpath("data/templates.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls.from_json(json.loads(text))

    def validate(self) -> None:
        if BENIGN not in self.templates:
            raise ValueError("template set needs a Benign template")
        for t in self.templates.values():
            if t.label != BENIGN and not t.signature_apis:
                raise ValueError(f"template {t.label} has no signature API of its own")
            if t.label != BENIGN and not t.stacks:
                raise ValueError(f"template {t.label} has no stacks")
            if t.emission_rate <= 0:
                raise ValueError(f"template {t.label}: emission_rate must be positive")


@dataclass(frozen=True)
class ProcessSpec:
    pid: int
    schedule: tuple[tuple[str, int], ...]  # (label, number of windows), in order

    @property
    def n_windows(self) -> int:
        return sum(n for _, n in self.schedule)

    def labels(self) -> list[str]:
        return [label for label, n in self.schedule for _ in range(n)]


@dataclass
class GeneratorSpec:
    seed: int = 0
    processes: list[ProcessSpec] = field(default_factory=list)
    window_ms: int = 6000
    trivial_fraction: float = 0.5
    assoc_probability: float = 0.995
    user_frames: tuple[int, int] = (0, 1)
    rate_scale: float = 1.0
    loops: bool = True
    templates: TemplateSet | None = None

    def __post_init__(self):
        if not 0.0 <= self.trivial_fraction <= 1.0:
            raise ValueError("trivial_fraction must lie in [0, 1]")
        if self.templates is None:
            self.templates = TemplateSet.load()
        pids = [p.pid for p in self.processes]
        if len(set(pids)) != len(pids):
            raise ValueError("duplicate pid in generator spec")
        for p in self.processes:
            for label, _ in p.schedule:
                if label not in self.templates.templates:
                    raise ValueError(f"no template for label {label!r}")

    @property
    def duration_s(self) -> float:
        longest = max((p.n_windows for p in self.processes), default=0)
        return longest * self.window_ms / 1000


def default_spec(
    windows_per_class: int = 60,
    processes_per_class: int = 6,
    seed: int = 0,
    labels: Sequence[str] = DEFAULT_LABELS,
    **kwargs,
) -> GeneratorSpec:
    """One process per ``(label, k)``, each running its behavior for its whole life.

    Windows are spread as evenly as possible over the class's processes.
    """
    if windows_per_class < 1 or processes_per_class < 1:
        raise ValueError("windows_per_class and processes_per_class must be positive")
    if not labels:
        raise ValueError("no labels")
    processes = []
    pid = 1000
    for label in labels:
        base, extra = divmod(windows_per_class, processes_per_class)
        for k in range(processes_per_class):
            n = base + (1 if k < extra else 0)
            if n:
                processes.append(ProcessSpec(pid, ((label, n),)))
                pid += 4
    return GeneratorSpec(seed=seed, processes=processes, **kwargs)


# ---------------------------------------------------------------------------
# catalog and module map


@dataclass
class Catalog:
    """Concrete stacks and API names after expanding generated pools."""

    templates: dict[str, BehaviorTemplate]
    pool_stacks: tuple[Stack, ...]
    shared_stacks: int
    trivial_apis: tuple[str, ...]
    assoc: dict[str, str]
    noise_stacks: tuple[Stack, ...]

    def api_names(self) -> list[str]:
        names = set(self.trivial_apis)
        names.update(self.assoc.values())
        for t in self.templates.values():
            names.update(t.apis())
        for s in self.pool_stacks + self.noise_stacks:
            names.update(s)
        return sorted(names)


def build_catalog(ts: TemplateSet, seed: int) -> Catalog:
    rng = random.Random(f"catalog:{seed}")
    pool: list[Stack] = []
    shared = 0
    for t in ts.templates.values():
        g = t.generated
        if not g:
            continue
        apis = [f"{m}:Fn{j:03d}" for m in g["modules"] for j in range(int(g["apis_per_module"]))]
        lo, hi = g.get("depth", [2, 6])
        tops = list(g.get("tops", ()))
        seen: set[Stack] = set()
        while len(pool) < int(g["n_stacks"]):
            depth = rng.randint(lo, hi)
            body = rng.sample(apis, depth)
            if tops and rng.random() < float(g.get("top_share", 0.5)):
                body = [rng.choice(tops)] + body[1:]
            st = tuple(body)
            if st not in seen:
                seen.add(st)
                pool.append(st)
        shared = min(len(pool), int(g.get("shared_stacks", len(pool))))
    return Catalog(
        templates=dict(ts.templates),
        pool_stacks=tuple(pool),
        shared_stacks=shared,
        trivial_apis=ts.trivial_apis,
        assoc=dict(ts.assoc_pairs),
        noise_stacks=ts.noise_stacks,
    )


def module_map_for(api_names: Iterable[str]) -> ModuleMap:
    """Disjoint synthetic images exporting every ``module:Api`` name given."""
    by_module: dict[str, set[str]] = {}
    for q in api_names:
        mod, _, api = q.partition(":")
        if not api:
            raise ValueError(f"API name {q!r} is not module-qualified")
        by_module.setdefault(mod, set()).add(api)
    modules = []
    for i, mod in enumerate(sorted(by_module)):
        names = sorted(by_module[mod])
        if len(names) * EXPORT_STRIDE + 0x2000 > MODULE_STRIDE:
            raise ValueError(f"too many exports for one synthetic module: {mod}")
        exports = tuple(
            ExportEntry(n, 0x1000 + j * EXPORT_STRIDE, 0x1000 + j * EXPORT_STRIDE + EXPORT_SIZE)
            for j, n in enumerate(names)
        )
        size = 0x2000 + len(names) * EXPORT_STRIDE
        modules.append(ModuleImage(mod, MODULE_BASE + i * MODULE_STRIDE, size, exports))
    return ModuleMap(modules)


def gen_module_map(spec: GeneratorSpec) -> ModuleMap:
    return module_map_for(build_catalog(spec.templates, spec.seed).api_names())


def call_sites(mm: ModuleMap) -> dict[str, list[int]]:
    """A few return addresses inside each exported function."""
    sites = {}
    for m in mm.modules:
        for e in m.exports:
            span = e.rva_end - e.rva_start
            sites[f"{m.module_name}:{e.api_name}"] = [
                m.base + e.rva_start + (0x10 + 0x40 * k) % span for k in range(CALL_SITES)
            ]
    return sites


# ---------------------------------------------------------------------------
# trace generation


@dataclass(frozen=True)
class WindowLabel:
    pid: int
    window_start_ms: int
    window_end_ms: int
    label: str


@dataclass
class Workload:
    module_map: ModuleMap
    events: list[RawStackEvent]
    labels: list[WindowLabel]
    catalog: Catalog

    def label_map(self) -> dict[tuple[int, int], str]:
        return {(l.pid, l.window_start_ms): l.label for l in self.labels}


def _stochastic_round(x: float, rng: random.Random) -> int:
    base = math.floor(x)
    return base + (1 if rng.random() < x - base else 0)


class _Emitter:
    def __init__(self, spec: GeneratorSpec, catalog: Catalog, mm: ModuleMap):
        self.spec = spec
        self.catalog = catalog
        self.sites = call_sites(mm)
        self.rng = random.Random(f"trace:{spec.seed}")
        self.np_rng = np.random.default_rng(spec.seed)
        self.trivial_sites = [self.sites[a] for a in catalog.trivial_apis]
        self.assoc = catalog.assoc

    def frames(self, stack: Stack) -> list[str]:
        out = []
        for api in stack:
            out.append(api)
            partner = self.assoc.get(api)
            # templates may already spell the pair out
            if partner is not None and partner not in stack and self.rng.random() < self.spec.assoc_probability:
                out.append(partner)
        return out

    def addresses(self, stack: Stack, user_addrs: Sequence[int]) -> tuple[int, ...]:
        rng = self.rng
        lo, hi = self.spec.user_frames
        n_user = rng.randint(lo, hi)
        raw = [rng.choice(user_addrs) for _ in range(n_user)]
        raw.extend(rng.choice(self.sites[a]) for a in self.frames(stack))
        f = self.spec.trivial_fraction
        if f <= 0 or not self.trivial_sites:
            return tuple(raw)
        if f >= 1:
            return tuple(rng.choice(rng.choice(self.trivial_sites)) for _ in raw)
        n_triv = _stochastic_round(len(raw) * f / (1 - f), rng)
        first = n_user + 1  # keep the top-level API on top
        for _ in range(n_triv):
            pos = rng.randint(min(first, len(raw)), len(raw))
            raw.insert(pos, rng.choice(rng.choice(self.trivial_sites)))
        return tuple(raw)

    def window_stacks(self, template: BehaviorTemplate, profile: Sequence[Stack]) -> list[Stack]:
        rng = self.rng
        window_s = self.spec.window_ms / 1000
        n = int(self.np_rng.poisson(template.emission_rate * window_s * self.spec.rate_scale))
        own = template.stacks
        items: list[Stack] = []
        for _ in range(n):
            if template.label == BENIGN:
                use_own = own and rng.random() < (template.stack_share if template.generated else 1.0)
                items.append(rng.choice(own) if use_own or not profile else rng.choice(profile))
            elif profile and rng.random() < template.background_share:
                items.append(rng.choice(profile))
            else:
                items.append(rng.choice(own))
        for st in self.catalog.noise_stacks:
            if rng.random() < self.spec.templates.noise_probability:
                items.extend([st] * int(self.np_rng.poisson(self.spec.templates.noise_mean_count)))
        rng.shuffle(items)
        if self.spec.loops:
            for motif in template.loop_motifs:
                if rng.random() < motif.probability:
                    reps = rng.randint(*motif.repeat)
                    pos = rng.randint(0, len(items))
                    items[pos:pos] = list(motif.stacks) * reps
        return items


def gen_trace(spec: GeneratorSpec) -> Workload:
    """Events (time-ordered) and per-window ground truth for ``spec``."""
    catalog = build_catalog(spec.templates, spec.seed)
    mm = module_map_for(catalog.api_names())
    em = _Emitter(spec, catalog, mm)
    rng = em.rng
    width_ns = spec.window_ms * NS_PER_MS
    events: list[RawStackEvent] = []
    labels: list[WindowLabel] = []
    shared = catalog.pool_stacks[:catalog.shared_stacks]
    apps = catalog.pool_stacks[catalog.shared_stacks:]
    benign = catalog.templates.get(BENIGN)
    g = (benign.generated if benign else None) or {}
    size, app_size = int(g.get("profile_size", 30)), int(g.get("app_profile_size", 0))
    for proc in spec.processes:
        profile = rng.sample(shared, min(size, len(shared)))
        app_profile = rng.sample(apps, min(app_size, len(apps)))
        user_addrs = [USER_IMAGE_BASE + 0x1000 + 0x40 * k for k in rng.sample(range(256), 8)]
        tids = [proc.pid + k for k in range(rng.randint(1, 3))]
        for w, label in enumerate(proc.labels()):
            labels.append(WindowLabel(proc.pid, w * spec.window_ms, (w + 1) * spec.window_ms, label))
            stacks = em.window_stacks(catalog.templates[label], profile + app_profile if label == BENIGN else profile)
            if not stacks:
                continue
            # distinct microsecond slots keep per-pid order equal to emission order
            slots = sorted(rng.sample(range(width_ns // 1000), len(stacks)))
            base = w * width_ns
            tid = rng.choice(tids)
            prev = None
            for st, slot in zip(stacks, slots):
                if st != prev:  # runs of one stack stay on one thread
                    tid = rng.choice(tids)
                prev = st
                events.append(RawStackEvent(proc.pid, tid, base + slot * 1000, em.addresses(st, user_addrs)))
    events.sort(key=lambda e: (e.ts, e.pid, e.tid))
    return Workload(mm, events, labels, catalog)


def write_labels(path: str | os.PathLike, labels: Iterable[WindowLabel]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for l in labels:
            fh.write(json.dumps(
                {"pid": l.pid, "window_start_ms": l.window_start_ms,
                 "window_end_ms": l.window_end_ms, "label": l.label},
                separators=(",", ":"),
            ) + "\n")


def read_labels(path: str | os.PathLike) -> list[WindowLabel]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(WindowLabel(int(d["pid"]), int(d["window_start_ms"]), int(d["window_end_ms"]), d["label"]))
    return out


def generate(spec: GeneratorSpec, outdir: str | os.PathLike) -> dict[str, Path]:
    """Write ``modules.json``, ``trace.jsonl`` and ``labels.jsonl`` under ``outdir``."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    wl = gen_trace(spec)
    paths = {
        "modules": out / "modules.json",
        "trace": out / "trace.jsonl",
        "labels": out / "labels.jsonl",
    }
    write_module_map(paths["modules"], wl.module_map)
    write_trace(paths["trace"], wl.events)
    write_labels(paths["labels"], wl.labels)
    return paths
