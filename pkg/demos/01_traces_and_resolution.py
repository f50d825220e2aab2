"""
Synthetic traces and address resolution
=======================================

Generate a small labelled workload, look at one raw call stack, and resolve
it against the module map with and without the address caches.
"""
import time

from adaptrace.resolver import ApiFilter, Resolver, parse_call_stack_uncached
from adaptrace.synthgen import default_spec, gen_trace
from adaptrace.trace import format_trace_line

# Eight behaviors (benign plus seven harmful functions), 12 windows each.
wl = gen_trace(default_spec(windows_per_class=12, processes_per_class=2, seed=1))
print(f"{len(wl.events)} raw stacks, {len(wl.labels)} labelled windows, "
      f"{len(wl.module_map.modules)} modules")

# A trace line is JSON: pid, tid, timestamp in ns and return addresses.
ev = wl.events[100]
print(format_trace_line(ev)[:160], "...")

# Frames in user code (the image at 0x140000000) do not resolve and are skipped.
res = Resolver(wl.module_map)
print("resolved:", res.parse(ev).frames)
print("top-level API:", res.top_level(ev))

# Dropping APIs is a filter on the resolver; the caches are rebuilt with it.
res.rebind(filt=ApiFilter(frozenset(wl.catalog.trivial_apis)))
print("without trivial APIs:", res.parse(ev).frames)

# Address caching: the same addresses recur constantly, so after warm-up
# almost every lookup is a dictionary hit instead of a binary search.
t = time.perf_counter()
cold = [parse_call_stack_uncached(e, wl.module_map, res.filter) for e in wl.events]
t_cold = time.perf_counter() - t
res.caches.clear()
t = time.perf_counter()
warm = res.parse_many(wl.events)
t_warm = time.perf_counter() - t
assert [r for r in cold if r is not None] == warm
print(f"uncached {t_cold:.3f}s, cached {t_warm:.3f}s, hit rate {res.caches.hit_rate():.3f}")
