import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from adaptrace.stacksel import (
    compute_bci,
    compute_mbci,
    correlation_index,
    find_square,
    lca,
    lca_pass,
    loop_compress,
    process_window,
    remove_adjacent_duplicates,
    select_irrelevant_stacks,
)

seqs = st.lists(st.integers(0, 3), max_size=30)


def has_square(seq):
    n = len(seq)
    return any(seq[i:i + p] == seq[i + p:i + 2 * p] for p in range(1, n // 2 + 1) for i in range(n - 2 * p + 1))


def is_subsequence(small, big):
    it = iter(big)
    return all(x in it for x in small)


def samples_with_fraction(label, n, k, key="sc"):
    return [({key} if i < k else set(), label) for i in range(n)]


def test_bci_class_unique_is_zero():
    data = samples_with_fraction("A", 4, 4) + samples_with_fraction("B", 4, 0)
    bci = compute_bci([s for s, _ in data], [y for _, y in data])
    assert bci["sc"] == 0.0


def test_bci_half_half_is_ln2():
    data = samples_with_fraction("A", 4, 2) + samples_with_fraction("B", 6, 3)
    bci = compute_bci([s for s, _ in data], [y for _, y in data])
    assert abs(bci["sc"] - math.log(2)) < 1e-9


def test_bci_one_and_quarter():
    data = samples_with_fraction("A", 3, 3) + samples_with_fraction("B", 8, 2)
    bci = compute_bci([s for s, _ in data], [y for _, y in data])
    assert abs(bci["sc"] - 0.25 * math.log(4)) < 1e-9
    assert abs(bci["sc"] - 0.3466) < 1e-4


def test_mbci_closed_forms():
    phf = ["RemoteShell", "Keylogger", "DesktopCapture", "GetClipboard", "OpenWebsite", "DownloadExecute", "AudioCapture"]
    data = [x for p in phf for x in samples_with_fraction(p, 2, 1)] + samples_with_fraction("Benign", 5, 5)
    mbci = compute_mbci([s for s, _ in data], [y for _, y in data])
    assert abs(mbci["sc"] - 7 * 0.5 * math.log(2)) < 1e-9
    assert abs(mbci["sc"] - 2.426) < 1e-3
    data2 = [x for p in phf[:2] for x in samples_with_fraction(p, 2, 1)] + [x for p in phf[2:] for x in samples_with_fraction(p, 2, 0)]
    assert abs(compute_mbci([s for s, _ in data2], [y for _, y in data2])["sc"] - math.log(2)) < 1e-9
    only_kl = samples_with_fraction("Keylogger", 3, 3) + samples_with_fraction("RemoteShell", 3, 0)
    assert compute_mbci([s for s, _ in only_kl], [y for _, y in only_kl])["sc"] == 0.0


def test_mbci_ignores_benign():
    data = samples_with_fraction("Benign", 4, 2) + samples_with_fraction("Keylogger", 4, 4)
    assert compute_mbci([s for s, _ in data], [y for _, y in data])["sc"] == 0.0
    with pytest.raises(ValueError):
        compute_mbci([{"x"}], ["Benign"])


def test_empty_corpus():
    with pytest.raises(ValueError):
        compute_bci([], [])


def test_selection_thresholds():
    bci = {"uniq": 0.0, "ln2": math.log(2), "q": 0.25 * math.log(4)}
    mbci = {"uniq": 0.0, "all7": 7 * 0.5 * math.log(2), "q": 0.0}
    assert select_irrelevant_stacks(bci, mbci, math.inf, math.inf) == set()
    assert select_irrelevant_stacks(bci, mbci, 0, math.inf) == set(bci)
    assert select_irrelevant_stacks(bci, mbci, 0.6, 0.6) == {"ln2", "all7"}
    with pytest.raises(ValueError):
        select_irrelevant_stacks(bci, mbci, -1, 0)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.sets(st.sampled_from("abcdef"), max_size=4), st.sampled_from("XYZ")), min_size=1, max_size=30),
       st.permutations("XYZ"))
def test_bci_label_permutation_invariant(data, perm):
    rename = dict(zip("XYZ", perm))
    s = [x for x, _ in data]
    a = correlation_index(s, [y for _, y in data])
    b = correlation_index(s, [rename[y] for _, y in data])
    assert a.keys() == b.keys()
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-12) and a[k] >= 0


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.sets(st.sampled_from("abcd"), max_size=3), st.sampled_from("XY")), min_size=1, max_size=20))
def test_bci_zero_iff_fractions_extreme(data):
    s, y = [x for x, _ in data], [l for _, l in data]
    bci = correlation_index(s, y)
    sizes = {l: y.count(l) for l in set(y)}
    for k, v in bci.items():
        fracs = [sum(k in x for x, l in data if l == c) / sizes[c] for c in sizes]
        extreme = all(f in (0.0, 1.0) for f in fracs)
        assert (v == 0.0) == extreme


def test_remove_adjacent_duplicates_cases():
    assert remove_adjacent_duplicates([]) == []
    assert remove_adjacent_duplicates(list("xxxy")) == list("xy")


@settings(max_examples=200, deadline=None)
@given(seqs)
def test_remove_adjacent_duplicates_oracle(s):
    assert remove_adjacent_duplicates(s) == [x for i, x in enumerate(s) if i == 0 or s[i - 1] != x]


def test_loop_compress_examples():
    assert loop_compress([]) == []
    assert loop_compress(list("ababab")) == list("ab")
    assert loop_compress(list("ssss")) == ["s"]
    assert loop_compress(list("abcabcd")) == list("abcd")


def test_lca_pass_partial_match_copies_prefix():
    # revisit of 'a' at 2 compares [a,b] with [a,c]: 'a' matches, 'c' does not
    assert lca_pass(list("abac")) == list("abac")
    assert lca_pass(list("abab")) == list("ab")
    # out-of-range positions count as mismatches
    assert lca_pass(list("aba")) == list("aba")


def test_scan_alone_can_miss_a_square():
    # the repeat of (1, 0) at the end is consumed by the partial match started at the second 0
    s = [0, 1, 2, 1, 0, 1, 0]
    assert lca(s) == s and has_square(s)
    assert loop_compress(s) == [0, 1, 2, 1, 0]


def test_find_square_leftmost_shortest():
    assert find_square(list("abcbc")) == (1, 2)
    assert find_square(list("abaa")) == (2, 1)
    assert find_square(list("abc")) is None


@settings(max_examples=400, deadline=None)
@given(seqs)
def test_loop_compress_properties(s):
    out = loop_compress(s)
    assert not has_square(out)
    assert loop_compress(out) == out
    assert is_subsequence(out, s)
    assert len(out) <= len(s)
    assert set(out) == set(s)


def test_process_window_order():
    keys = ["noise", "a", "a", "b", "a", "b", "noise", "a", "b", "c"]
    assert process_window(keys, {"noise"}) == ["a", "b", "c"]
    assert process_window(keys, {"noise"}, compress=False) == ["a", "b", "a", "b", "a", "b", "c"]


def test_polling_motif_collapses_once():
    rng = random.Random(4)
    motif = ["peek", "sleep"]
    seq = [rng.choice("xyz") for _ in range(5)] + motif * 50 + [rng.choice("xyz") for _ in range(5)]
    out = loop_compress(seq)
    assert sum(1 for i in range(len(out) - 1) if out[i:i + 2] == motif) == 1
