"""Core trace types and the on-disk trace / module-map formats.

Trace files are JSON Lines, one audited event per line::

    {"pid": 4, "tid": 8, "ts": 0, "stack": ["0x7ffa00001230", ...]}

``ts`` is nanoseconds since the trace epoch and ``stack[0]`` is the
shallowest (user-most) frame.  Module maps are a single JSON document::

    [{"module": "ntdll.dll", "base": "0x1000", "size": 4096,
      "exports": [{"name": "ZwClose", "rva_start": 512, "rva_end": 768}]}]
"""
from __future__ import annotations

import bisect
import json
import logging
import os
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

BENIGN = "Benign"
PHF_LABELS = (
    "RemoteShell",
    "Keylogger",
    "DesktopCapture",
    "GetClipboard",
    "OpenWebsite",
    "DownloadExecute",
    "AudioCapture",
)
DEFAULT_LABELS = (BENIGN,) + PHF_LABELS

# frames are joined with this to form stack keys, so API names may not contain it
KEY_SEPARATOR = "\x1f"
_U64 = (1 << 64) - 1


class TraceFormatError(ValueError):
    """A trace line could not be parsed."""

    def __init__(self, message: str, path: str | None = None, lineno: int | None = None):
        self.path = path
        self.lineno = lineno
        where = f"{path or '<trace>'}:{lineno}: " if lineno is not None else ""
        super().__init__(where + message)


class ModuleMapError(ValueError):
    """A module map violates its layout invariants."""


@dataclass(frozen=True)
class RawStackEvent:
    pid: int
    tid: int
    ts: int
    stack: tuple[int, ...] = ()


@dataclass(frozen=True)
class ExportEntry:
    api_name: str
    rva_start: int
    rva_end: int


@dataclass(frozen=True)
class ModuleImage:
    module_name: str
    base: int
    size: int
    exports: tuple[ExportEntry, ...] = ()

    @property
    def end(self) -> int:
        return self.base + self.size


@dataclass(frozen=True)
class ResolvedCallStack:
    pid: int
    tid: int
    ts: int
    frames: tuple[str, ...]

    @property
    def key(self) -> str:
        return stack_key(self.frames)


def stack_key(frames: Sequence[str]) -> str:
    """Canonical text key for a frame list."""
    return KEY_SEPARATOR.join(frames)


def qualified_name(module: str, api: str) -> str:
    return f"{module}:{api}"


class ModuleMap:
    """Validated set of loaded module images, searchable by address.

    Lookup is two binary searches: one over module bases, one over the
    export starts of the hit module.
    """

    def __init__(self, modules: Iterable[ModuleImage]):
        mods = sorted(modules, key=lambda m: m.base)
        problems: list[str] = []
        for m in mods:
            if KEY_SEPARATOR in m.module_name:
                problems.append(f"module name {m.module_name!r} contains the key separator")
            if m.size <= 0:
                problems.append(f"{m.module_name}: size must be positive")
            if not 0 <= m.base <= _U64 or m.base + m.size - 1 > _U64:
                problems.append(f"{m.module_name}: address range exceeds 64 bits")
        for a, b in zip(mods, mods[1:]):
            if b.base < a.end:
                problems.append(
                    f"modules overlap: {a.module_name} [{a.base:#x},{a.end:#x}) "
                    f"and {b.module_name} [{b.base:#x},{b.end:#x})"
                )
        self._export_starts: list[list[int]] = []
        self._exports: list[list[ExportEntry]] = []
        for m in mods:
            exps = sorted(m.exports, key=lambda e: e.rva_start)
            for e in exps:
                if KEY_SEPARATOR in e.api_name:
                    problems.append(f"{m.module_name}: export name {e.api_name!r} contains the key separator")
                if not e.rva_start < e.rva_end:
                    problems.append(f"{m.module_name}:{e.api_name}: empty range [{e.rva_start:#x},{e.rva_end:#x})")
                if e.rva_start < 0 or e.rva_end > m.size:
                    problems.append(f"{m.module_name}:{e.api_name}: range outside module image")
            for e, f in zip(exps, exps[1:]):
                if f.rva_start < e.rva_end:
                    problems.append(f"exports overlap in {m.module_name}: {e.api_name} and {f.api_name}")
            self._export_starts.append([e.rva_start for e in exps])
            self._exports.append(exps)
        if problems:
            raise ModuleMapError("; ".join(problems))
        self.modules: tuple[ModuleImage, ...] = tuple(mods)
        self._bases = [m.base for m in mods]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModuleMap):
            return NotImplemented
        return self.modules == other.modules

    def __repr__(self) -> str:
        return f"ModuleMap({len(self.modules)} modules)"

    def find_module(self, addr: int) -> int:
        """Index of the module containing ``addr``, or -1."""
        i = bisect.bisect_right(self._bases, addr) - 1
        if i >= 0 and addr < self.modules[i].end:
            return i
        return -1

    def lookup(self, addr: int) -> str | None:
        """Qualified ``module:Api`` name for ``addr``, or None if unresolved."""
        i = self.find_module(addr)
        if i < 0:
            return None
        mod = self.modules[i]
        rva = addr - mod.base
        j = bisect.bisect_right(self._export_starts[i], rva) - 1
        if j < 0:
            return None
        exp = self._exports[i][j]
        if rva < exp.rva_end:
            return qualified_name(mod.module_name, exp.api_name)
        return None

    def api_names(self) -> list[str]:
        return [qualified_name(m.module_name, e.api_name) for m in self.modules for e in m.exports]

    def to_json(self) -> list[dict]:
        return [
            {
                "module": m.module_name,
                "base": hex(m.base),
                "size": m.size,
                "exports": [
                    {"name": e.api_name, "rva_start": e.rva_start, "rva_end": e.rva_end}
                    for e in m.exports
                ],
            }
            for m in self.modules
        ]

    @classmethod
    def from_json(cls, doc: list[dict]) -> "ModuleMap":
        try:
            modules = [
                ModuleImage(
                    module_name=str(d["module"]),
                    base=_parse_addr(d["base"]),
                    size=int(d["size"]),
                    exports=tuple(
                        ExportEntry(str(e["name"]), int(e["rva_start"]), int(e["rva_end"]))
                        for e in d.get("exports", ())
                    ),
                )
                for d in doc
            ]
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ModuleMapError):
                raise
            raise ModuleMapError(f"malformed module map: {exc!r}") from exc
        return cls(modules)


def _parse_addr(value) -> int:
    if isinstance(value, int) and not isinstance(value, bool):
        addr = value
    elif isinstance(value, str) and value[:2].lower() == "0x":
        addr = int(value, 16)
    else:
        raise ValueError(f"bad address {value!r}")
    if not 0 <= addr <= _U64:
        raise ValueError(f"address {value!r} out of 64-bit range")
    return addr


def _parse_uint(obj: dict, name: str) -> int:
    v = obj[name]
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise ValueError(f"field {name!r} must be a non-negative integer, got {v!r}")
    return v


def parse_trace_line(line: str) -> RawStackEvent:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ValueError("trace line must be a JSON object")
    missing = [k for k in ("pid", "tid", "ts", "stack") if k not in obj]
    if missing:
        raise ValueError(f"missing field(s) {', '.join(missing)}")
    stack = obj["stack"]
    if not isinstance(stack, list):
        raise ValueError("'stack' must be a list")
    return RawStackEvent(
        pid=_parse_uint(obj, "pid"),
        tid=_parse_uint(obj, "tid"),
        ts=_parse_uint(obj, "ts"),
        stack=tuple(_parse_addr(a) for a in stack),
    )


def format_trace_line(ev: RawStackEvent) -> str:
    stack = ",".join(f'"{a:#x}"' for a in ev.stack)
    return f'{{"pid":{ev.pid},"tid":{ev.tid},"ts":{ev.ts},"stack":[{stack}]}}'


def iter_trace(
    path: str | os.PathLike, lenient: bool = False, warnings: list[str] | None = None
) -> Iterator[RawStackEvent]:
    """Stream events from a trace file.

    With ``lenient`` set, malformed lines are logged and appended to
    ``warnings`` instead of raising :class:`TraceFormatError`.
    """
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield parse_trace_line(line)
            except ValueError as exc:
                if not lenient:
                    raise TraceFormatError(str(exc), path, lineno) from None
                msg = f"{path}:{lineno}: {exc}"
                logger.warning("skipping malformed trace line %s", msg)
                if warnings is not None:
                    warnings.append(msg)


def read_trace(
    path: str | os.PathLike, lenient: bool = False, warnings: list[str] | None = None
) -> list[RawStackEvent]:
    return list(iter_trace(path, lenient=lenient, warnings=warnings))


def write_trace(path: str | os.PathLike, events: Iterable[RawStackEvent]) -> int:
    """Write events as JSON Lines; returns the number of bytes written."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            line = format_trace_line(ev) + "\n"
            fh.write(line)
            n += len(line)
    return n


def read_module_map(path: str | os.PathLike) -> ModuleMap:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModuleMapError(f"{os.fspath(path)}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, list):
        raise ModuleMapError("module map must be a JSON array of module objects")
    return ModuleMap.from_json(doc)


def write_module_map(path: str | os.PathLike, mm: ModuleMap) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mm.to_json(), fh, indent=1)
        fh.write("\n")
