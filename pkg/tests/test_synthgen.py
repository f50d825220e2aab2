import json

import pytest

from adaptrace.apisel import mine_associations
from adaptrace.pipeline.stages import StackParser, compress_stacks
from adaptrace.resolver import Resolver, ResolverCaches, resolve_address
from adaptrace.synthgen import (
    GeneratorSpec,
    ProcessSpec,
    TemplateSet,
    build_catalog,
    default_spec,
    gen_module_map,
    gen_trace,
    generate,
    module_map_for,
    read_labels,
    USER_IMAGE_BASE,
)
from adaptrace.trace import BENIGN, DEFAULT_LABELS


def test_minimal_map():
    mm = module_map_for(["a.dll:F"])
    assert len(mm.modules) == 1 and mm.api_names() == ["a.dll:F"]


def test_map_deterministic_and_closed():
    spec = default_spec(windows_per_class=2, processes_per_class=1, seed=5)
    mm = gen_module_map(spec)
    assert mm == gen_module_map(default_spec(windows_per_class=2, processes_per_class=1, seed=5))
    cat = build_catalog(spec.templates, spec.seed)
    assert set(cat.api_names()) <= set(mm.api_names())


def test_every_api_address_resolves():
    wl = gen_trace(default_spec(windows_per_class=6, processes_per_class=2, seed=2))
    c = ResolverCaches()
    unresolved = {a for e in wl.events for a in e.stack if resolve_address(a, wl.module_map, c) is None}
    # only the planted user-code frames are left unresolved
    assert unresolved and all(USER_IMAGE_BASE <= a < USER_IMAGE_BASE + 0x10000 for a in unresolved)


def test_same_seed_byte_identical(tmp_path):
    spec = lambda: default_spec(windows_per_class=4, processes_per_class=2, seed=9)
    a = generate(spec(), tmp_path / "a")
    b = generate(spec(), tmp_path / "b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()
    c = generate(default_spec(windows_per_class=4, processes_per_class=2, seed=10), tmp_path / "c")
    assert a["trace"].read_bytes() != c["trace"].read_bytes()


def test_benign_only_labels(tmp_path):
    paths = generate(default_spec(windows_per_class=5, processes_per_class=2, labels=(BENIGN,)), tmp_path)
    labels = read_labels(paths["labels"])
    assert len(labels) == 5 and {l.label for l in labels} == {BENIGN}


def test_trivial_fraction_measured():
    spec = default_spec(windows_per_class=40, processes_per_class=4, seed=1, trivial_fraction=0.5)
    wl = gen_trace(spec)
    trivial = set(spec.templates.trivial_apis)
    c = ResolverCaches()
    frames = [resolve_address(a, wl.module_map, c) for e in wl.events for a in e.stack]
    assert len(frames) >= 100_000
    frac = sum(f in trivial for f in frames) / len(frames)
    assert abs(frac - 0.5) <= 0.02


@pytest.mark.parametrize("f", [0.0, 1.0])
def test_trivial_fraction_extremes(f):
    spec = default_spec(windows_per_class=2, processes_per_class=1, seed=1, trivial_fraction=f, labels=("Keylogger",))
    wl = gen_trace(spec)
    trivial = set(spec.templates.trivial_apis)
    c = ResolverCaches()
    names = [resolve_address(a, wl.module_map, c) for e in wl.events for a in e.stack]
    resolved = [n for n in names if n is not None]
    share = sum(n in trivial for n in resolved) / len(resolved)
    assert share == f


def test_bad_spec_rejected():
    with pytest.raises(ValueError):
        default_spec(trivial_fraction=1.5)
    with pytest.raises(ValueError):
        GeneratorSpec(processes=[ProcessSpec(1, (("Nope", 1),))])
    with pytest.raises(ValueError):
        GeneratorSpec(processes=[ProcessSpec(1, ((BENIGN, 1),)), ProcessSpec(1, ((BENIGN, 1),))])


def test_timestamps_monotone_per_thread():
    wl = gen_trace(default_spec(windows_per_class=4, processes_per_class=2, seed=4))
    last = {}
    for e in wl.events:
        assert e.ts >= last.get((e.pid, e.tid), 0)
        last[(e.pid, e.tid)] = e.ts


def test_labels_cover_schedule():
    spec = GeneratorSpec(seed=1, processes=[ProcessSpec(7, ((BENIGN, 2), ("Keylogger", 3)))])
    wl = gen_trace(spec)
    assert [(l.window_start_ms, l.label) for l in wl.labels] == [
        (0, BENIGN), (6000, BENIGN), (12000, "Keylogger"), (18000, "Keylogger"), (24000, "Keylogger")]
    assert spec.duration_s == 30


def test_templates_have_distinct_signatures():
    ts = TemplateSet.load()
    sigs = {t.label: set(t.signature_apis) for t in ts.templates.values() if t.label != BENIGN}
    assert set(sigs) == set(DEFAULT_LABELS) - {BENIGN}
    for a, sa in sigs.items():
        assert sa
        for b, sb in sigs.items():
            if a != b:
                assert sa - sb


def test_template_without_signature_rejected():
    doc = json.loads(json.dumps({"templates": [
        {"label": BENIGN, "stacks": [["a.dll:X"]]},
        {"label": "Dup", "stacks": [["a.dll:X"]]},
    ]}))
    with pytest.raises(ValueError, match="signature"):
        TemplateSet.from_json(doc)


def test_custom_template_document(tmp_path):
    doc = {"trivial_apis": ["t.dll:T"], "templates": [
        {"label": BENIGN, "stacks": [["a.dll:Idle"]]},
        {"label": "Miner", "emission_rate": 2, "stacks": [["c.dll:Hash", "c.dll:Round"]]},
    ]}
    p = tmp_path / "t.json"
    p.write_text(json.dumps(doc))
    ts = TemplateSet.load(p)
    spec = default_spec(windows_per_class=3, processes_per_class=1, labels=(BENIGN, "Miner"), templates=ts)
    wl = gen_trace(spec)
    assert {l.label for l in wl.labels} == {BENIGN, "Miner"}


def test_planted_associations_recovered():
    spec = default_spec(windows_per_class=30, processes_per_class=3, seed=6)
    wl = gen_trace(spec)
    r = Resolver(wl.module_map)
    stacks = r.parse_many(wl.events)
    rules = {(x.antecedent, x.consequent): x for x in mine_associations(stacks, 5e-4)}
    for a, b in spec.templates.assoc_pairs:
        assert rules[(a, b)].confidence >= 0.95


def test_planted_loop_collapses_once():
    motif = (("k.dll:Peek", "k.dll:Pipe"), ("k.dll:Sleep", "k.dll:Delay"))
    doc = {"trivial_apis": ["t.dll:T"], "templates": [
        {"label": BENIGN, "stacks": [["a.dll:Idle"]]},
        {"label": "Shell", "emission_rate": 2, "stacks": [["s.dll:A"], ["s.dll:B"], ["s.dll:C"]],
         "loop_motifs": [{"stacks": [list(s) for s in motif], "repeat": [50, 50], "probability": 1.0}]},
    ]}
    ts = TemplateSet.from_json(doc)
    spec = GeneratorSpec(seed=3, processes=[ProcessSpec(5, (("Shell", 1),))], templates=ts, trivial_fraction=0.3)
    wl = gen_trace(spec)
    parser = StackParser(wl.module_map, trivial={"t.dll:T"})
    stacks = [f for f in (parser.parse(e) for e in wl.events) if f is not None]
    keys = ["\x1f".join(m) for m in motif]
    raw = [s.key for s in stacks]
    assert sum(k == keys[0] for k in raw) >= 50
    out = [s.key for s in compress_stacks(stacks)]
    hits = [i for i in range(len(out) - 1) if out[i:i + 2] == keys]
    assert len(hits) == 1
    assert out.count(keys[0]) == 1 and out.count(keys[1]) == 1
