"""
Irrelevant stacks and loop compression
======================================

A stack that shows up in every class tells the classifier nothing.  The
behavior correlation index (an entropy over per-class frequencies) marks such
stacks; then repeated blocks inside a window are collapsed to one copy.
"""
import math

from adaptrace.stacksel import compute_bci, compute_mbci, lca, loop_compress, select_irrelevant_stacks

# Stack "x" appears in half of A's windows and half of B's: BCI = ln 2.
samples = [{"x"}, set(), {"x"}, set(), {"x", "y"}, {"y"}, set(), set()]
labels = ["A"] * 4 + ["B"] * 4
bci = compute_bci(samples, labels)
print(f"BCI(x) = {bci['x']:.4f} (ln 2 = {math.log(2):.4f}), BCI(y) = {bci['y']:.4f}")

# MBCI looks only at the malicious classes.
labels2 = ["Benign"] * 2 + ["Keylogger"] * 3 + ["RemoteShell"] * 3
mbci = compute_mbci(samples, labels2)
print("MBCI:", {k: round(v, 4) for k, v in mbci.items()})
print("irrelevant at 0.5:", select_irrelevant_stacks(bci, mbci, 0.5, 0.5))

# A polling loop: a message pump that keeps peeking a pipe and sleeping.
window = ["open", "peek", "sleep", "peek", "sleep", "peek", "sleep", "send", "close"]
print(loop_compress(window))

# The one-pass scan can miss a repeat when its first key appeared earlier
# with a different gap; the residual collapse finishes the job.
tricky = [0, 1, 2, 1, 0, 1, 0]
print("scan only:", lca(tricky), " full:", loop_compress(tricky))
