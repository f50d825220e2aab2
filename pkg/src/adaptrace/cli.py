"""Command-line entry point: gen, train, collect, detect, eval, stats.

Exit codes: 0 success, 1 usage error, 2 data error, 3 transport error.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from .apisel import SelectionReport
from .forest import ForestModel
from .pipeline.collector import run_collector
from .pipeline.config import PipelineConfig
from .pipeline.ledger import ReductionLedger, reduction_report
from .pipeline.service import AlertLog, DetectorService, detect_bytes
from .pipeline.training import evaluate_pipeline, label_map, split_labels, train_pipeline
from .pipeline.transport import FileSink, StreamSink, TransportError, parse_endpoint
from .synthgen import TemplateSet, default_spec, generate, read_labels
from .trace import DEFAULT_LABELS, iter_trace, read_module_map

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRANSPORT = 0, 1, 2, 3

log = logging.getLogger("adaptrace")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_flags(p: argparse.ArgumentParser) -> None:
    d = PipelineConfig()
    g = p.add_argument_group("pipeline configuration")
    g.add_argument("--window-ms", type=int, default=d.window_ms)
    g.add_argument("--trivial-threshold", type=float, default=d.trivial_api_threshold,
                   help="graph importance at or above which an API is trivial")
    g.add_argument("--min-support", type=float, default=d.min_support)
    g.add_argument("--min-confidence", type=float, default=d.min_confidence)
    g.add_argument("--min-lift", type=float, default=d.min_lift)
    g.add_argument("--bci-threshold", type=float, default=d.bci_threshold)
    g.add_argument("--mbci-threshold", type=float, default=d.mbci_threshold)
    g.add_argument("--percentile", type=float, default=d.model_importance_percentile,
                   help="importance percentile an API must reach to stay in the vocabulary")
    g.add_argument("--mode", choices=["full", "top_only"], default=d.mode)
    g.add_argument("--no-loop-compression", action="store_true")
    g.add_argument("--pass-through", action="store_true", help="disable every reduction stage")
    g.add_argument("--n-trees", type=int, default=d.n_trees)
    g.add_argument("--max-depth", type=int, default=None)
    g.add_argument("--seed", type=int, default=d.seed)


def _config_from(args) -> PipelineConfig:
    kw = dict(
        window_ms=args.window_ms,
        trivial_api_threshold=args.trivial_threshold,
        min_support=args.min_support,
        min_confidence=args.min_confidence,
        min_lift=args.min_lift,
        bci_threshold=args.bci_threshold,
        mbci_threshold=args.mbci_threshold,
        model_importance_percentile=args.percentile,
        mode=args.mode,
        compress_loops=not args.no_loop_compression,
        n_trees=args.n_trees,
        max_depth=args.max_depth,
        seed=args.seed,
    )
    try:
        if args.pass_through:
            keep = {k: kw[k] for k in ("window_ms", "mode", "n_trees", "max_depth", "seed")}
            return PipelineConfig.pass_through(**keep)
        return PipelineConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adaptrace", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic module map, trace and labels")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--windows-per-class", type=int, default=60)
    g.add_argument("--processes-per-class", type=int, default=6)
    g.add_argument("--trivial-fraction", type=float, default=0.5)
    g.add_argument("--labels", default=",".join(DEFAULT_LABELS),
                   help="comma-separated behavior labels to generate")
    g.add_argument("--templates", type=Path, help="template JSON (default: built-in)")
    g.add_argument("--window-ms", type=int, default=6000)
    g.add_argument("--no-loops", action="store_true")

    t = sub.add_parser("train", help="learn selection artifacts and the classifier")
    t.add_argument("--trace", required=True, type=Path)
    t.add_argument("--modules", required=True, type=Path)
    t.add_argument("--labels", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--test-fraction", type=float, default=0.0,
                   help="hold out this share of windows; the split goes to split.json")
    _config_flags(t)

    c = sub.add_parser("collect", help="stream a trace as feature-window messages")
    c.add_argument("--trace", required=True, type=Path)
    c.add_argument("--modules", required=True, type=Path)
    c.add_argument("--selection", required=True, type=Path)
    c.add_argument("--model", required=True, type=Path, help="model file (its vocabulary is announced)")
    dest = c.add_mutually_exclusive_group(required=True)
    dest.add_argument("--out", type=Path, help="file sink")
    dest.add_argument("--connect", metavar="HOST:PORT", help="detector endpoint")
    c.add_argument("--host-id", default="localhost")
    c.add_argument("--ledger", type=Path, help="write the reduction ledger JSON here")
    c.add_argument("--retries", type=int, default=5)
    c.add_argument("--lenient", action="store_true", help="skip malformed trace lines")

    d = sub.add_parser("detect", help="classify feature windows and write alerts")
    d.add_argument("--model", required=True, type=Path)
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--listen", metavar="HOST:PORT")
    src.add_argument("--input", type=Path, help="recorded collector output")
    d.add_argument("--alerts", type=Path, help="append alerts here as JSON Lines (default stdout)")

    e = sub.add_parser("eval", help="accuracy, TPR/FPR and OvR AUC on labelled windows")
    e.add_argument("--trace", required=True, type=Path)
    e.add_argument("--modules", required=True, type=Path)
    e.add_argument("--labels", required=True, type=Path)
    e.add_argument("--selection", required=True, type=Path)
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--split", type=Path, help="split.json from train; evaluates its test part")
    e.add_argument("--json", type=Path, help="also write the report as JSON")

    s = sub.add_parser("stats", help="reduction table or selection summary")
    what = s.add_mutually_exclusive_group(required=True)
    what.add_argument("--ledger", type=Path)
    what.add_argument("--selection", type=Path)
    s.add_argument("--json", action="store_true", help="print JSON instead of a table")
    return p


def cmd_gen(args) -> int:
    labels = tuple(l for l in args.labels.split(",") if l)
    templates = TemplateSet.load(args.templates)
    try:
        spec = default_spec(
            windows_per_class=args.windows_per_class,
            processes_per_class=args.processes_per_class,
            seed=args.seed,
            labels=labels,
            trivial_fraction=args.trivial_fraction,
            window_ms=args.window_ms,
            loops=not args.no_loops,
            templates=templates,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    paths = generate(spec, args.out)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config_from(args)
    mm = read_module_map(args.modules)
    labels = label_map(read_labels(args.labels))
    test = {}
    if args.test_fraction:
        labels, test = split_labels(labels, args.test_fraction, config.seed)
    res = train_pipeline(iter_trace(args.trace), mm, labels, config)
    args.out.mkdir(parents=True, exist_ok=True)
    res.report.save(args.out / "selection.json")
    res.model.save(args.out / "model.json")
    (args.out / "config.json").write_text(json.dumps(config.to_json(), indent=1) + "\n")
    if test:
        split = {"train": sorted(map(list, labels)), "test": sorted(map(list, test))}
        (args.out / "split.json").write_text(json.dumps(split) + "\n")
    r = res.report
    print(f"windows: {len(res.windows)}  classes: {', '.join(res.model.classes)}")
    print(f"trivial APIs: {len(r.trivial)}  redundant APIs: {len(r.redundant)}  "
          f"irrelevant stacks: {len(r.irrelevant_stacks)}  vocabulary: {len(r.kept)}")
    print(f"wrote {args.out / 'selection.json'} and {args.out / 'model.json'}")
    return EXIT_OK


def cmd_collect(args) -> int:
    mm = read_module_map(args.modules)
    report = SelectionReport.load(args.selection)
    model = ForestModel.load(args.model)
    warnings: list[str] = []
    events = iter_trace(args.trace, lenient=args.lenient, warnings=warnings)
    if args.out is not None:
        sink = FileSink(args.out)
    else:
        try:
            host, port = parse_endpoint(args.connect)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        sink = StreamSink(host, port, retries=args.retries)
    try:
        window_ms = int(report.params.get("window_ms", 6000))
        ledger = run_collector(events, mm, report, model.vocabulary, sink.send, window_ms, args.host_id)
    finally:
        sink.close()
    if args.ledger is not None:
        ledger.save(args.ledger)
    if warnings:
        print(f"skipped {len(warnings)} malformed lines", file=sys.stderr)
    print(reduction_report(ledger))
    return EXIT_OK


def cmd_detect(args) -> int:
    model = ForestModel.load(args.model)
    if args.input is not None:
        alerts = detect_bytes(model, args.input.read_bytes())
        out = open(args.alerts, "a", encoding="utf-8") if args.alerts else sys.stdout
        try:
            for a in alerts:
                out.write(json.dumps(a.to_json(), sort_keys=True) + "\n")
        finally:
            if args.alerts:
                out.close()
        print(f"{len(alerts)} alerts", file=sys.stderr)
        return EXIT_OK
    try:
        host, port = parse_endpoint(args.listen)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sink = AlertLog(args.alerts) if args.alerts else (
        lambda a: print(json.dumps(a.to_json(), sort_keys=True), flush=True))

    async def run():
        svc = DetectorService(model, sink)
        h, p = await svc.start(host, port)
        print(f"listening on {h}:{p}", file=sys.stderr, flush=True)
        await svc.serve_forever()

    try:
        asyncio.run(run())
    except KeyboardInterrupt:
        pass
    except OSError as exc:
        raise TransportError(str(exc)) from exc
    return EXIT_OK


def cmd_eval(args) -> int:
    mm = read_module_map(args.modules)
    report = SelectionReport.load(args.selection)
    model = ForestModel.load(args.model)
    labels = label_map(read_labels(args.labels))
    if args.split is not None:
        test = {tuple(k) for k in json.loads(args.split.read_text())["test"]}
        labels = {k: v for k, v in labels.items() if k in test}
    window_ms = int(report.params.get("window_ms", 6000))
    rep = evaluate_pipeline(iter_trace(args.trace), mm, report, model, labels, window_ms)
    print(rep.summary())
    if args.json is not None:
        args.json.write_text(json.dumps(rep.to_json(), indent=1) + "\n")
    return EXIT_OK


def cmd_stats(args) -> int:
    if args.ledger is not None:
        led = ReductionLedger.load(args.ledger)
        print(json.dumps(led.to_json(), indent=1) if args.json else reduction_report(led))
        return EXIT_OK
    r = SelectionReport.load(args.selection)
    summary = {
        "mode": r.mode,
        "trivial": r.trivial,
        "redundant": {a: {k: rule.get(k) for k in ("antecedent", "confidence", "lift")} for a, rule in r.redundant.items()},
        "model_dropped": len(r.model_dropped),
        "kept": r.kept,
        "irrelevant_stacks": len(r.irrelevant_stacks),
    }
    if args.json:
        print(json.dumps(summary, indent=1))
        return EXIT_OK
    print(f"mode: {r.mode}")
    print(f"trivial APIs ({len(r.trivial)}):")
    for a, s in sorted(r.trivial.items(), key=lambda kv: -kv[1]):
        print(f"  {s:6.3f}  {a}")
    print(f"redundant APIs ({len(r.redundant)}):")
    for a, rule in sorted(r.redundant.items()):
        print(f"  {a}  <- {rule.get('antecedent')}  C={rule.get('confidence', 0):.3f} L={rule.get('lift', 0):.2f}")
    print(f"irrelevant call stacks: {len(r.irrelevant_stacks)}")
    print(f"model-dropped APIs: {len(r.model_dropped)}")
    print(f"vocabulary ({len(r.kept)}): {', '.join(r.kept)}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "collect": cmd_collect,
    "detect": cmd_detect, "eval": cmd_eval, "stats": cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"adaptrace {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TransportError, ConnectionError) as exc:
        print(f"adaptrace {args.command}: transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (ValueError, KeyError, OSError) as exc:
        print(f"adaptrace {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
