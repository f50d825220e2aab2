"""Random-forest behavior classifier with Gini importances.

Trees are stored as flat node arrays (``feature == -1`` marks a leaf) so a
model serializes to plain JSON and predicts with vectorized descents.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .embedding import FeatureWindow, Vocabulary
from .trace import BENIGN, DEFAULT_LABELS

MODEL_FORMAT = "adaptrace-forest"


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_split: int = 2
    max_features: str = "sqrt"

    def features_per_split(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, math.ceil(math.sqrt(n_features)))
        if self.max_features == "all":
            return n_features
        raise ValueError(f"unknown max_features rule {self.max_features!r}")


@dataclass
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_classes); rows of internal nodes are unused
    impurity: np.ndarray
    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return node
            x = X[rows, np.where(inner, feat, 0)]
            go_left = x <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(inner, nxt, node)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def feature_importances(self, n_features: int) -> np.ndarray:
        imp = np.zeros(n_features)
        root_n = self.n_samples[0]
        for i in np.flatnonzero(self.feature >= 0):
            l, r = self.left[i], self.right[i]
            gain = (
                self.n_samples[i] * self.impurity[i]
                - self.n_samples[l] * self.impurity[l]
                - self.n_samples[r] * self.impurity[r]
            )
            imp[self.feature[i]] += gain / root_n
        return imp

    def to_json(self) -> dict:
        leaves = self.feature < 0
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": [row.tolist() if leaf else [] for row, leaf in zip(self.value, leaves)],
            "impurity": self.impurity.tolist(),
            "n_samples": self.n_samples.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict, n_classes: int) -> "DecisionTree":
        value = np.zeros((len(d["feature"]), n_classes))
        for i, row in enumerate(d["value"]):
            if row:
                value[i] = row
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=value,
            impurity=np.asarray(d["impurity"], dtype=np.float64),
            n_samples=np.asarray(d["n_samples"], dtype=np.int64),
        )


def gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.dot(p, p))


def _best_split(
    X: np.ndarray, y: np.ndarray, idx: np.ndarray, n_classes: int, m: int, rng: np.random.Generator
) -> tuple[int, float, float] | None:
    """Best ``(feature, threshold, score)`` over ``m`` non-constant random features.

    ``score`` is ``sum(l^2)/n_l + sum(r^2)/n_r``, which grows as the weighted
    Gini impurity of the children shrinks.  Features are drawn in random
    order; constant ones are skipped without counting toward ``m``.  Ties
    between features are broken by column content rather than position, so
    renumbering features cannot change the tree; within a feature the
    smaller threshold wins.
    """
    perm = rng.permutation(X.shape[1])
    rows = idx[:, None]
    chosen = []
    feats = []
    # inspect candidates in draw order, a few at a time, until m vary
    for start in range(0, len(perm), 2 * m):
        cand = perm[start:start + 2 * m]
        block = X[rows, cand]
        varying = block.min(axis=0) < block.max(axis=0)
        for col in np.flatnonzero(varying):
            chosen.append(block[:, col])
            feats.append(int(cand[col]))
            if len(chosen) == m:
                break
        else:
            continue
        break
    if not chosen:
        return None
    n = len(idx)
    Xc = np.vstack(chosen)  # (k, n)
    # any order works within runs of equal values: cuts fall only between them
    order = np.argsort(Xc, axis=1)
    xs = np.take_along_axis(Xc, order, axis=1)
    yi = y[idx]
    total = np.bincount(yi, minlength=n_classes).astype(np.float64)
    left = np.cumsum(np.eye(n_classes)[yi[order]], axis=1)[:, :-1]  # (k, n-1, C)
    right = total - left
    nl = np.arange(1, n, dtype=np.float64)
    score = (
        np.einsum("ijk,ijk->ij", left, left) / nl
        + np.einsum("ijk,ijk->ij", right, right) / (n - nl)
    )
    score[xs[:, :-1] >= xs[:, 1:]] = -np.inf
    score = score.T
    pos = np.argmax(score, axis=0)
    per_feature = score[pos, np.arange(len(feats))]
    tied = np.flatnonzero(per_feature == per_feature.max())
    j = int(tied[0]) if len(tied) == 1 else min(tied.tolist(), key=lambda t: Xc[t].tobytes())
    c = pos[j]
    thr = (float(xs[j, c]) + float(xs[j, c + 1])) / 2.0
    return feats[j], thr, float(per_feature[j])


def build_tree(
    X: np.ndarray, y: np.ndarray, n_classes: int, params: ForestParams, rng: np.random.Generator,
    sample: np.ndarray | None = None,
) -> DecisionTree:
    """Grow one CART tree on the rows ``sample`` (with repeats) of ``X``."""
    if sample is None:
        sample = np.arange(len(X))
    m = params.features_per_split(X.shape[1])
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[np.ndarray] = []
    impurity: list[float] = []
    n_samples: list[int] = []

    def new_node(idx: np.ndarray) -> int:
        counts = np.bincount(y[idx], minlength=n_classes).astype(np.float64)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(counts / counts.sum())
        impurity.append(gini(counts))
        n_samples.append(len(idx))
        return len(feature) - 1

    stack = [(new_node(sample), sample, 0)]
    while stack:
        node, idx, depth = stack.pop()
        if (
            impurity[node] <= 0.0
            or len(idx) < params.min_samples_split
            or (params.max_depth is not None and depth >= params.max_depth)
        ):
            continue
        split = _best_split(X, y, idx, n_classes, m, rng)
        if split is None:
            continue
        f, thr, score = split
        parent_weighted = len(idx) - len(idx) * impurity[node]  # = sum(c^2)/n
        if score <= parent_weighted + 1e-12 * len(idx):
            # no impurity decrease; keep as leaf
            continue
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node] = f
        threshold[node] = thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return DecisionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.vstack(value),
        impurity=np.asarray(impurity, dtype=np.float64),
        n_samples=np.asarray(n_samples, dtype=np.int64),
    )


def tree_rng(seed: int, t: int) -> np.random.Generator:
    """Independent generator for tree ``t``; trees can be grown in any order."""
    return np.random.default_rng(np.random.SeedSequence([seed, t]))


@dataclass
class ForestModel:
    trees: list[DecisionTree]
    vocabulary: Vocabulary
    classes: list[str]
    importances: np.ndarray
    rng_seed: int
    params: ForestParams = field(default_factory=ForestParams)

    @property
    def n_features(self) -> int:
        return len(self.vocabulary)

    def importance_map(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.vocabulary, self.importances)}

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        acc = np.zeros((len(X), len(self.classes)))
        for tree in self.trees:
            acc += tree.predict_proba(X)
        return acc / len(self.trees)

    def predict_labels(self, X: np.ndarray) -> list[str]:
        # argmax returns the first maximum, so ties go to the earlier class
        return [self.classes[i] for i in np.argmax(self.predict_proba(X), axis=1)]

    def to_json(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": 1,
            "params": asdict(self.params),
            "rng_seed": self.rng_seed,
            "classes": list(self.classes),
            "vocabulary": list(self.vocabulary.names),
            "importances": self.importances.tolist(),
            "trees": [t.to_json() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())
            fh.write("\n")

    @classmethod
    def from_json(cls, doc: dict) -> "ForestModel":
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError("not a forest model document")
        classes = list(doc["classes"])
        return cls(
            trees=[DecisionTree.from_json(t, len(classes)) for t in doc["trees"]],
            vocabulary=Vocabulary(doc["vocabulary"]),
            classes=classes,
            importances=np.asarray(doc["importances"], dtype=np.float64),
            rng_seed=int(doc["rng_seed"]),
            params=ForestParams(**doc["params"]),
        )

    @classmethod
    def loads(cls, text: str) -> "ForestModel":
        return cls.from_json(json.loads(text))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ForestModel":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def class_order(labels: Iterable[str]) -> list[str]:
    """Benign first, then the built-in behaviors, then custom labels sorted."""
    present = set(labels) | {BENIGN}
    known = [c for c in DEFAULT_LABELS if c in present]
    return known + sorted(present - set(DEFAULT_LABELS))


def fit_forest(
    X: np.ndarray,
    labels: Sequence[str],
    vocab: Vocabulary,
    params: ForestParams | None = None,
    seed: int = 0,
    classes: Sequence[str] | None = None,
) -> ForestModel:
    params = params or ForestParams()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("need at least 2 training samples")
    if len(labels) != len(X):
        raise ValueError("one label per sample required")
    if X.shape[1] != len(vocab):
        raise ValueError(f"vectors have {X.shape[1]} features, vocabulary has {len(vocab)}")
    classes = list(classes) if classes is not None else class_order(labels)
    cidx = {c: i for i, c in enumerate(classes)}
    try:
        y = np.asarray([cidx[l] for l in labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} not in class list") from None

    n = len(X)
    trees = []
    imp = np.zeros(X.shape[1])
    for t in range(params.n_trees):
        rng = tree_rng(seed, t)
        sample = rng.integers(0, n, n)
        tree = build_tree(X, y, len(classes), params, rng, sample)
        trees.append(tree)
        ti = tree.feature_importances(X.shape[1])
        s = ti.sum()
        if s > 0:
            imp += ti / s
    if imp.sum() > 0:
        imp /= imp.sum()
    return ForestModel(trees, vocab, classes, imp, seed, params)


def train_forest(
    data: Sequence[FeatureWindow],
    vocab: Vocabulary,
    params: ForestParams | None = None,
    seed: int = 0,
    classes: Sequence[str] | None = None,
) -> ForestModel:
    if not data:
        raise ValueError("empty training data")
    lengths = {len(w.vector) for w in data}
    if len(lengths) != 1:
        raise ValueError(f"inconsistent vector lengths {sorted(lengths)}")
    if any(w.label is None for w in data):
        raise ValueError("every training window needs a label")
    X = np.vstack([w.vector for w in data])
    return fit_forest(X, [w.label for w in data], vocab, params, seed, classes)


def predict(model: ForestModel, v: np.ndarray | Sequence[float]) -> tuple[str, np.ndarray]:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or len(v) != model.n_features:
        raise ValueError(f"expected a vector of {model.n_features} features")
    scores = model.predict_proba(v[None, :])[0]
    return model.classes[int(np.argmax(scores))], scores


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    classes: list[str]
    confusion: np.ndarray  # rows: true class, columns: predicted class
    accuracy: float
    tpr: dict[str, float | None]
    fpr: dict[str, float | None]
    auc: dict[str, float | None]
    macro_auc: float | None

    def to_json(self) -> dict:
        return {
            "classes": self.classes,
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "tpr": self.tpr,
            "fpr": self.fpr,
            "auc_ovr": self.auc,
            "macro_auc_ovr": self.macro_auc,
        }

    def summary(self) -> str:
        lines = [f"accuracy  {self.accuracy:.4f}   macro AUC (OvR) {_fmt(self.macro_auc)}"]
        lines.append(f"{'class':<18}{'TPR':>8}{'FPR':>8}{'AUC':>8}{'n':>7}")
        for i, c in enumerate(self.classes):
            lines.append(
                f"{c:<18}{_fmt(self.tpr[c]):>8}{_fmt(self.fpr[c]):>8}{_fmt(self.auc[c]):>8}"
                f"{int(self.confusion[i].sum()):>7}"
            )
        return "\n".join(lines)


def _fmt(x: float | None) -> str:
    return "  -   " if x is None else f"{x:.4f}"


def confusion_matrix(y_true: Sequence[str], y_pred: Sequence[str], classes: Sequence[str]) -> np.ndarray:
    idx = {c: i for i, c in enumerate(classes)}
    m = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y_true, y_pred, strict=True):
        m[idx[t], idx[p]] += 1
    return m


def rates_from_confusion(m: np.ndarray, classes: Sequence[str]):
    """Per-class TPR and FPR; None where the denominator is empty."""
    total = m.sum()
    tpr, fpr = {}, {}
    for i, c in enumerate(classes):
        pos = m[i].sum()
        neg = total - pos
        fp = m[:, i].sum() - m[i, i]
        tpr[c] = float(m[i, i] / pos) if pos else None
        fpr[c] = float(fp / neg) if neg else None
    return tpr, fpr


def auc_mann_whitney(scores: np.ndarray, positive: np.ndarray) -> float | None:
    """Area under the ROC curve; tied scores earn half credit."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate_scores(
    y_true: Sequence[str], scores: np.ndarray, classes: Sequence[str]
) -> EvalReport:
    if len(y_true) == 0:
        raise ValueError("empty test set")
    classes = list(classes)
    y_pred = [classes[i] for i in np.argmax(scores, axis=1)]
    m = confusion_matrix(y_true, y_pred, classes)
    tpr, fpr = rates_from_confusion(m, classes)
    truth = np.asarray(y_true)
    auc = {c: auc_mann_whitney(scores[:, i], truth == c) for i, c in enumerate(classes)}
    present = [v for v in auc.values() if v is not None]
    return EvalReport(
        classes=classes,
        confusion=m,
        accuracy=float(np.trace(m) / m.sum()),
        tpr=tpr,
        fpr=fpr,
        auc=auc,
        macro_auc=float(np.mean(present)) if present else None,
    )


def evaluate(model: ForestModel, test: Sequence[FeatureWindow]) -> EvalReport:
    if not test:
        raise ValueError("empty test set")
    X = np.vstack([w.vector for w in test])
    labels = [w.label for w in test]
    unknown = set(labels) - set(model.classes)
    if unknown:
        raise ValueError(f"test labels not known to the model: {sorted(unknown)}")
    return evaluate_scores(labels, model.predict_proba(X), model.classes)
