import json

import pytest
from hypothesis import given, settings, strategies as st

from adaptrace.trace import (
    ExportEntry,
    ModuleImage,
    ModuleMap,
    ModuleMapError,
    RawStackEvent,
    TraceFormatError,
    format_trace_line,
    parse_trace_line,
    read_module_map,
    read_trace,
    stack_key,
    write_module_map,
    write_trace,
)
from adaptrace.synthgen import default_spec, gen_module_map

u32 = st.integers(0, 2**32 - 1)
u64 = st.integers(0, 2**64 - 1)
events = st.builds(RawStackEvent, u32, u32, u64, st.lists(u64, max_size=8).map(tuple))


def test_read_single_line(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"pid":4,"tid":8,"ts":0,"stack":["0x10"]}\n')
    assert read_trace(p) == [RawStackEvent(4, 8, 0, (16,))]


def test_empty_stack_is_kept(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"pid":1,"tid":1,"ts":5,"stack":[]}\n')
    assert read_trace(p) == [RawStackEvent(1, 1, 5, ())]


def test_lenient_skips_malformed(tmp_path):
    p = tmp_path / "t.jsonl"
    good = [format_trace_line(RawStackEvent(1, 2, i, (0x10 + i,))) for i in range(3)]
    p.write_text("\n".join(good[:2] + ['{"pid":1,"tid":2,"ts":9,"stack":["zz"]}'] + good[2:]) + "\n")
    warnings = []
    evs = read_trace(p, lenient=True, warnings=warnings)
    assert len(evs) == 3 and len(warnings) == 1
    assert ":3:" in warnings[0]


@pytest.mark.parametrize("line, needle", [
    ('{"pid":1,"tid":2,"ts":0,"stack":["0xZZ"]}', "0xZZ"),
    ('{"pid":1,"tid":2,"stack":[]}', "ts"),
    ('{"pid":-1,"tid":2,"ts":0,"stack":[]}', "pid"),
    ('not json', "JSON"),
])
def test_strict_reports_location(tmp_path, line, needle):
    p = tmp_path / "t.jsonl"
    p.write_text(format_trace_line(RawStackEvent(1, 1, 0, ())) + "\n" + line + "\n")
    with pytest.raises(TraceFormatError) as ei:
        read_trace(p)
    assert ei.value.lineno == 2
    assert needle in str(ei.value)


@settings(max_examples=60, deadline=None)
@given(st.lists(events, max_size=20))
def test_trace_round_trip(tmp_path_factory, evs):
    p = tmp_path_factory.mktemp("rt") / "t.jsonl"
    n = write_trace(p, evs)
    assert n == p.stat().st_size
    assert read_trace(p) == evs


def test_line_is_compact_json():
    line = format_trace_line(RawStackEvent(4, 8, 0, (16, 255)))
    assert line == '{"pid":4,"tid":8,"ts":0,"stack":["0x10","0xff"]}'
    assert json.loads(line)["stack"] == ["0x10", "0xff"]


def test_minimal_module_map_valid():
    mm = ModuleMap([ModuleImage("a.dll", 0x1000, 0x1000, (ExportEntry("F", 0x200, 0x300),))])
    assert mm.lookup(0x1200) == "a.dll:F"


def test_overlapping_modules_rejected():
    with pytest.raises(ModuleMapError, match="a.dll.*b.dll"):
        ModuleMap([ModuleImage("a.dll", 0x1000, 0x1000), ModuleImage("b.dll", 0x1800, 0x1000)])


def test_overlapping_exports_rejected():
    with pytest.raises(ModuleMapError, match="F and G"):
        ModuleMap([ModuleImage("a.dll", 0, 0x1000, (ExportEntry("F", 0, 0x20), ExportEntry("G", 0x10, 0x30)))])


def test_export_outside_image_rejected():
    with pytest.raises(ModuleMapError, match="outside"):
        ModuleMap([ModuleImage("a.dll", 0, 0x100, (ExportEntry("F", 0x80, 0x200),))])


def test_separator_in_name_rejected():
    with pytest.raises(ModuleMapError, match="separator"):
        ModuleMap([ModuleImage("a.dll", 0, 0x100, (ExportEntry("F\x1fG", 0, 0x10),))])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 200), st.integers(1, 60)), min_size=2, max_size=6))
def test_module_overlap_detection_matches_brute_force(intervals):
    mods = [ModuleImage(f"m{i}.dll", b, s) for i, (b, s) in enumerate(intervals)]
    overlap = any(
        a.base < b.end and b.base < a.end for i, a in enumerate(mods) for b in mods[i + 1:]
    )
    if overlap:
        with pytest.raises(ModuleMapError):
            ModuleMap(mods)
    else:
        ModuleMap(mods)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 100), st.integers(1, 30)), min_size=2, max_size=6))
def test_export_overlap_detection_matches_brute_force(ranges):
    exps = tuple(ExportEntry(f"F{i}", s, s + n) for i, (s, n) in enumerate(ranges))
    overlap = any(
        a.rva_start < b.rva_end and b.rva_start < a.rva_end for i, a in enumerate(exps) for b in exps[i + 1:]
    )
    build = lambda: ModuleMap([ModuleImage("m.dll", 0x1000, 0x1000, exps)])
    if overlap:
        with pytest.raises(ModuleMapError):
            build()
    else:
        build()


def test_generated_map_round_trips(tmp_path):
    mm = gen_module_map(default_spec(windows_per_class=1, processes_per_class=1))
    assert len(mm.modules) >= 3 and len(mm.api_names()) >= 50
    p = tmp_path / "m.json"
    write_module_map(p, mm)
    assert read_module_map(p) == mm
    q = tmp_path / "m2.json"
    write_module_map(q, read_module_map(p))
    assert p.read_bytes() == q.read_bytes()


def test_malformed_map_document(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('[{"module": "a.dll", "size": 10}]')
    with pytest.raises(ModuleMapError):
        read_module_map(p)


def test_stack_key_joins_frames():
    assert stack_key(["a:X", "b:Y"]) == "a:X\x1fb:Y"
    assert parse_trace_line('{"pid":1,"tid":1,"ts":1,"stack":["0x1"]}').stack == (1,)
