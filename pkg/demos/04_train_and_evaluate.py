"""
Training and evaluating the detector
====================================

Train the whole selection pipeline plus the random forest on 70% of the
windows and evaluate on the rest through the same code path the collector
uses.  The top-level-API-only baseline runs on identical data.
"""
import time

from adaptrace.pipeline import PipelineConfig, evaluate_pipeline, label_map, split_labels, train_pipeline
from adaptrace.synthgen import default_spec, gen_trace

wl = gen_trace(default_spec(windows_per_class=120, processes_per_class=6, seed=4))
train, test = split_labels(label_map(wl.labels), 0.3, seed=4)

results = {}
for mode in ("full", "top_only"):
    t = time.perf_counter()
    res = results[mode] = train_pipeline(wl.events, wl.module_map, train, PipelineConfig(mode=mode, seed=4))
    rep = evaluate_pipeline(wl.events, wl.module_map, res.report, res.model, test)
    print(f"--- {mode}: {len(res.report.kept)} APIs collected, {time.perf_counter() - t:.1f}s")
    print(rep.summary())

# What the full model looks at.
imp = results["full"].model.importance_map()
for api, v in sorted(imp.items(), key=lambda kv: -kv[1])[:10]:
    print(f"{v:.4f}  {api}")
