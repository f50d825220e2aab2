"""
Learning which APIs to drop
===========================

Graph importance finds APIs that connect to nearly everything (loader and
dispatcher frames).  Association rules find APIs that always travel with a
partner, so one of the pair is enough.  The forest's Gini importance then
keeps only the most useful remainder.
"""
from adaptrace.apisel import (
    build_api_graph,
    graph_importance,
    mine_associations,
    redundant_groups,
    select_trivial_apis,
)
from adaptrace.pipeline.stages import StackParser
from adaptrace.synthgen import default_spec, gen_trace

wl = gen_trace(default_spec(windows_per_class=20, processes_per_class=3, seed=2))
parser = StackParser(wl.module_map)
stacks = [f.names for e in wl.events if (f := parser.parse(e)) is not None]

# Importance of an API = degree / (N - 1) in the co-occurrence graph.
scores = graph_importance(build_api_graph(stacks))
trivial = select_trivial_apis(scores, 0.5)
for api in sorted(trivial, key=lambda a: -scores[a]):
    print(f"trivial  {scores[api]:.3f}  {api}")
print("planted trivial APIs recovered:", trivial == set(wl.catalog.trivial_apis))

# Mine pair rules on the stacks with trivial frames removed.
stage1 = [[n for n in s if n not in trivial] for s in stacks]
stage1 = [s for s in stage1 if s]
rules = mine_associations(stage1, min_support=5e-4)
strong = [r for r in rules if r.confidence >= 0.95 and r.lift >= 10]
print(f"{len(rules)} rules above min support, {len(strong)} strong")
for r in sorted(strong, key=lambda r: -r.support_ab)[:8]:
    print(f"  {r.antecedent} -> {r.consequent}  S={r.support_ab:.4f} C={r.confidence:.3f} L={r.lift:.1f}")

# Mutual strong rules are merged; every group keeps its first member.
groups = redundant_groups(rules, min_lift=10, min_confidence=0.95)
print(f"{len(groups)} redundant groups, e.g. {groups[0] if groups else None}")
