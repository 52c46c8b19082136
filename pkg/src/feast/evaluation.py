"""Scoring of flavor embeddings.

Two protocols: the triplet agreement ratio on held-out annotation triplets,
and cross-validated classification of binned wine attributes from the 2D
coordinates (k-NN or a small MLP), with minority oversampling inside the
training folds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from feast.data_model import Embedding2D, FlavorTriplet, WineRecord
from feast.errors import InputError

ATTRIBUTES = ("alcohol", "country", "grape", "price", "rating", "region", "year")
CATEGORICAL = frozenset({"country", "grape", "region"})
CLASSIFIERS = ("knn", "mlp")


# --------------------------------------------------------------------------
# Triplet agreement
# --------------------------------------------------------------------------


def tar_score(e: Embedding2D, triplets: Sequence[FlavorTriplet]) -> tuple[float, int, int]:
    """Fraction of triplets whose near/far order the embedding reproduces.

    Triplets naming a wine absent from ``e`` are skipped and counted. Exact
    distance ties count as disagreement.
    """
    if len(triplets) == 0:
        raise InputError("no triplets to score")
    index = e.index
    rows = [(index[t[0]], index[t[1]], index[t[2]]) for t in triplets
            if t[0] in index and t[1] in index and t[2] in index]
    skipped = len(triplets) - len(rows)
    if not rows:
        raise InputError(f"none of the {len(triplets)} triplets can be evaluated on this embedding")
    idx = np.asarray(rows)
    P = e.points
    d_near = ((P[idx[:, 0]] - P[idx[:, 1]]) ** 2).sum(axis=1)
    d_far = ((P[idx[:, 0]] - P[idx[:, 2]]) ** 2).sum(axis=1)
    agree = int(np.count_nonzero(d_near < d_far))
    return agree / len(idx), len(idx), skipped


# --------------------------------------------------------------------------
# Labels
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabelSet:
    ids: tuple[int, ...]
    labels: np.ndarray
    class_names: tuple[str, ...]
    dropped: int = 0

    def __post_init__(self):
        y = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if y.shape != (len(self.ids),):
            raise ValueError("one label per id is required")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be distinct")
        if y.size and (y.min() < 0 or y.max() >= len(self.class_names)):
            raise ValueError("labels must lie in [0, C)")
        y.setflags(write=False)
        object.__setattr__(self, "labels", y)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.ids)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, ids: Sequence[int]) -> "LabelSet":
        pos = {w: r for r, w in enumerate(self.ids)}
        rows = [pos[w] for w in ids]
        return LabelSet(tuple(ids), self.labels[rows], self.class_names, self.dropped)


@dataclass(frozen=True)
class BinScheme:
    """How an attribute becomes classes.

    ``method`` is ``"category"`` (distinct values, lexicographic order),
    ``"distinct"`` (distinct numeric values, ascending) or ``"quantile"``
    (equal-frequency bins aiming at ``n_classes`` classes).
    """

    method: str
    n_classes: Optional[int] = None

    def __post_init__(self):
        if self.method not in ("category", "distinct", "quantile"):
            raise ValueError(f"unknown binning method {self.method!r}")
        if self.method == "quantile" and (self.n_classes is None or self.n_classes < 1):
            raise ValueError("quantile binning needs a positive class count")


# class counts implied by the published random baselines
DEFAULT_SCHEMES = {
    "alcohol": BinScheme("quantile", 6),
    "country": BinScheme("category"),
    "grape": BinScheme("category"),
    "price": BinScheme("quantile", 10),
    "rating": BinScheme("quantile", 4),
    "region": BinScheme("category"),
    "year": BinScheme("quantile", 12),
}


def attribute_value(record: WineRecord, attribute: str):
    if attribute == "grape":
        return record.grapes[0] if record.grapes else None
    if attribute not in ATTRIBUTES:
        raise ValueError(f"unknown attribute {attribute!r}")
    value = getattr(record, attribute)
    if isinstance(value, float) and np.isnan(value):
        return None
    if isinstance(value, str) and not value.strip():
        return None
    return value


def _record_key(record: WineRecord, key: str):
    return record.vintage_id if key == "vintage_id" else getattr(record, key)


def _quantile_bins(values: np.ndarray, n_classes: int):
    distinct = np.unique(values)
    if len(distinct) <= n_classes:
        labels = np.searchsorted(distinct, values)
        return labels, tuple(f"{v:g}" for v in distinct)
    edges = np.quantile(values, np.linspace(0.0, 1.0, n_classes + 1))
    inner = np.unique(edges[1:-1])
    raw = np.searchsorted(inner, values, side="right")
    present = np.unique(raw)
    labels = np.searchsorted(present, raw)
    bounds = np.concatenate([[values.min()], inner, [values.max()]])
    names = tuple(f"[{bounds[b]:g}, {bounds[b + 1]:g}{']' if b + 1 == len(bounds) - 1 else ')'}"
                  for b in present)
    return labels, names


def bin_attribute(
    records: Iterable[WineRecord],
    attribute: str,
    scheme: Optional[BinScheme] = None,
    key: str = "experiment_id",
) -> LabelSet:
    """Turn one attribute of ``records`` into integer classes.

    Records are keyed by ``key`` (the wine id used by embeddings); records
    without a key or with the attribute missing are dropped and counted in
    ``LabelSet.dropped``. Only the first record per id is used.
    """
    if attribute not in ATTRIBUTES:
        raise ValueError(f"unknown attribute {attribute!r}")
    scheme = scheme or DEFAULT_SCHEMES[attribute]
    ids, values = [], []
    seen = set()
    dropped = 0
    for r in records:
        wid = _record_key(r, key)
        if wid is None or wid in seen:
            dropped += wid is None
            continue
        seen.add(wid)
        v = attribute_value(r, attribute)
        if v is None:
            dropped += 1
            continue
        ids.append(int(wid))
        values.append(v)
    if not values:
        raise InputError(f"no record carries attribute {attribute!r}")

    if scheme.method == "category":
        names = tuple(sorted({str(v) for v in values}))
        lookup = {n: c for c, n in enumerate(names)}
        labels = np.array([lookup[str(v)] for v in values])
    else:
        arr = np.asarray(values, dtype=float)
        if scheme.method == "distinct":
            distinct = np.unique(arr)
            labels = np.searchsorted(distinct, arr)
            names = tuple(f"{v:g}" for v in distinct)
        else:
            labels, names = _quantile_bins(arr, scheme.n_classes)
    return LabelSet(tuple(ids), labels, names, dropped)


def random_baseline(labels: Union[LabelSet, int]) -> float:
    """Chance accuracy ``1 / C``."""
    c = labels if isinstance(labels, (int, np.integer)) else labels.n_classes
    if c < 1:
        raise ValueError("need at least one class")
    return 1.0 / c


# --------------------------------------------------------------------------
# Oversampling
# --------------------------------------------------------------------------


def oversample_indices(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row indices that balance ``y`` to its majority count.

    The original rows come first, in order; each non-majority class gets
    extra rows drawn uniformly with replacement from its own members.
    """
    y = np.asarray(y)
    if y.size == 0:
        raise InputError("cannot oversample an empty sample")
    classes, counts = np.unique(y, return_counts=True)
    target = counts.max()
    extra = [rng.choice(np.flatnonzero(y == c), size=target - n, replace=True)
             for c, n in zip(classes, counts) if n < target]
    return np.concatenate([np.arange(y.size)] + extra).astype(np.int64)


def oversample(features: np.ndarray, labels: LabelSet, seed: int = 0):
    """Random minority oversampling ("not majority"); originals are kept."""
    X = np.asarray(features, dtype=float)
    if len(X) != len(labels):
        raise ValueError("features and labels differ in length")
    idx = oversample_indices(labels.labels, np.random.default_rng(seed))
    ids = tuple(labels.ids[i] for i in idx)
    return X[idx], LabelSet(ids, labels.labels[idx], labels.class_names, labels.dropped)


# --------------------------------------------------------------------------
# Classifiers
# --------------------------------------------------------------------------


def knn_predict(X_train: np.ndarray, y_train: np.ndarray, X_test: np.ndarray, k: int) -> np.ndarray:
    """Majority vote of the ``k`` nearest training rows.

    Equal distances keep training-row order; vote ties go to the tied class
    whose member ranks nearest.
    """
    d2 = ((X_test[:, None, :] - X_train[None, :, :]) ** 2).sum(-1)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    neigh = y_train[order]
    pred = np.empty(len(X_test), dtype=y_train.dtype)
    for r, row in enumerate(neigh):
        vals, counts = np.unique(row, return_counts=True)
        winners = vals[counts == counts.max()]
        pred[r] = row[np.isin(row, winners)][0]
    return pred


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(eq=False)
class MlpModel:
    """One hidden ReLU layer with a softmax output."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    loss_history: list = field(default_factory=list)

    def forward(self, X):
        h = np.maximum(X @ self.W1 + self.b1, 0.0)
        return h, _softmax(h @ self.W2 + self.b2)

    def predict(self, X):
        return np.argmax(self.forward(X)[1], axis=1)

    def loss(self, X, y):
        _, p = self.forward(X)
        return float(-np.mean(np.log(np.maximum(p[np.arange(len(y)), y], 1e-300))))


def train_mlp(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    hidden: int = 100,
    epochs: int = 200,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
) -> MlpModel:
    """Cross-entropy training with mini-batches and Adam updates.

    ``loss_history`` holds the full training-set loss after every epoch.
    """
    if hidden < 1:
        raise ValueError("hidden must be at least 1")
    if epochs < 1 or lr <= 0 or batch_size < 1:
        raise ValueError("epochs, lr and batch_size must be positive")
    rng = np.random.default_rng(seed)
    n, d = X.shape
    model = MlpModel(
        rng.standard_normal((d, hidden)) * np.sqrt(2.0 / d),
        np.zeros(hidden),
        rng.standard_normal((hidden, n_classes)) * np.sqrt(1.0 / hidden),
        np.zeros(n_classes),
    )
    params = [model.W1, model.b1, model.W2, model.b2]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    onehot = np.eye(n_classes)[y]
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            b = perm[start:start + batch_size]
            h, p = model.forward(X[b])
            g_out = (p - onehot[b]) / len(b)
            g_h = (g_out @ model.W2.T) * (h > 0)
            grads = [X[b].T @ g_h, g_h.sum(0), h.T @ g_out, g_out.sum(0)]
            step += 1
            for i, (p_, g) in enumerate(zip(params, grads)):
                m[i] = beta1 * m[i] + (1 - beta1) * g
                v[i] = beta2 * v[i] + (1 - beta2) * g * g
                m_hat = m[i] / (1 - beta1**step)
                v_hat = v[i] / (1 - beta2**step)
                p_ -= lr * m_hat / (np.sqrt(v_hat) + adam_eps)
        model.loss_history.append(model.loss(X, y))
    return model


# --------------------------------------------------------------------------
# Cross-validation
# --------------------------------------------------------------------------


def _features(e: Embedding2D, labels: LabelSet):
    """Rows of ``e`` for the labelled ids it contains, in label order."""
    index = e.index
    keep = [r for r, w in enumerate(labels.ids) if w in index]
    X = e.points[[index[labels.ids[r]] for r in keep]]
    return X, labels.labels[keep]


def fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffled k-fold partition of ``range(n)``."""
    if folds < 2:
        raise ValueError("folds must be at least 2")
    if n < folds:
        raise InputError(f"{n} samples cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def cross_validate(
    X: np.ndarray,
    y: np.ndarray,
    fit_predict: Callable[[np.ndarray, np.ndarray, np.ndarray, np.random.Generator], np.ndarray],
    folds: int = 5,
    seed: int = 0,
    oversample_first: bool = False,
) -> list[float]:
    """Per-fold test accuracies.

    By default oversampling touches only each training portion. With
    ``oversample_first`` the whole sample is balanced before splitting, so
    duplicates can straddle train and test.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    if oversample_first:
        idx = oversample_indices(y, rng)
        X, y = X[idx], y[idx]
    accs = []
    for test in fold_indices(len(y), folds, seed):
        train = np.setdiff1d(np.arange(len(y)), test, assume_unique=True)
        if not oversample_first:
            train = train[oversample_indices(y[train], rng)]
        # shuffle so equal-distance neighbors are not biased toward originals
        train = train[rng.permutation(len(train))]
        pred = fit_predict(X[train], y[train], X[test], rng)
        accs.append(float(np.mean(pred == y[test])))
    return accs


def knn_cv(
    e: Embedding2D,
    labels: LabelSet,
    k: int = 5,
    folds: int = 5,
    seed: int = 0,
    oversample_first: bool = False,
) -> float:
    """Mean k-fold accuracy of a Euclidean k-NN classifier on the 2D points."""
    X, y = _features(e, labels)
    if len(y) == 0:
        raise InputError("no labelled id is present in the embedding")
    smallest_train = len(y) - int(np.ceil(len(y) / folds))
    if k < 1 or k >= smallest_train:
        raise InputError(f"k={k} must be below the training-fold size {smallest_train}")

    def fit_predict(Xtr, ytr, Xte, _rng):
        return knn_predict(Xtr, ytr, Xte, k)

    return float(np.mean(cross_validate(X, y, fit_predict, folds, seed, oversample_first)))


def mlp_cv(
    e: Embedding2D,
    labels: LabelSet,
    hidden: int = 100,
    epochs: int = 200,
    lr: float = 1e-3,
    folds: int = 5,
    seed: int = 0,
    batch_size: int = 32,
    oversample_first: bool = False,
) -> float:
    """Mean k-fold accuracy of a one-hidden-layer MLP.

    Inputs are standardized with the training portion's statistics.
    """
    if hidden < 1:
        raise ValueError("hidden must be at least 1")
    X, y = _features(e, labels)
    if len(y) == 0:
        raise InputError("no labelled id is present in the embedding")
    C = labels.n_classes

    def fit_predict(Xtr, ytr, Xte, rng):
        mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        model = train_mlp((Xtr - mu) / sd, ytr, C, hidden, epochs, lr,
                          int(rng.integers(2**31)), batch_size)
        return model.predict((Xte - mu) / sd)

    return float(np.mean(cross_validate(X, y, fit_predict, folds, seed, oversample_first)))


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    tar: Optional[float] = None
    per_attribute_accuracy: dict = field(default_factory=dict)
    mean_accuracy: float = float("nan")
    baselines: dict = field(default_factory=dict)
    skipped_triplets: int = 0
    evaluated_triplets: int = 0
    class_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tar": self.tar,
            "evaluated_triplets": self.evaluated_triplets,
            "skipped_triplets": self.skipped_triplets,
            "per_attribute_accuracy": dict(self.per_attribute_accuracy),
            "mean_accuracy": self.mean_accuracy,
            "baselines": dict(self.baselines),
            "class_counts": dict(self.class_counts),
        }


def attribute_report(
    e: Embedding2D,
    records: Sequence[WineRecord],
    classifier: str = "knn",
    seed: int = 0,
    *,
    schemes: Optional[dict] = None,
    key: str = "experiment_id",
    attributes: Sequence[str] = ATTRIBUTES,
    k: int = 5,
    folds: int = 5,
    mlp_hidden: int = 100,
    mlp_epochs: int = 200,
    mlp_lr: float = 1e-3,
    oversample_first: bool = False,
    triplets: Optional[Sequence[FlavorTriplet]] = None,
) -> EvalReport:
    """Cross-validated accuracy for each attribute and their mean.

    Attributes no record carries are left out of the mean. When
    ``triplets`` are given the report also carries the TAR.
    """
    if classifier not in CLASSIFIERS:
        raise ValueError(f"classifier must be one of {CLASSIFIERS}")
    record_ids = {_record_key(r, key) for r in records} - {None}
    overlap = record_ids & set(e.ids)
    if len(overlap) < 10:
        raise InputError(f"embedding and records share only {len(overlap)} ids; need at least 10")
    schemes = {**DEFAULT_SCHEMES, **(schemes or {})}
    report = EvalReport()
    for attr in attributes:
        try:
            labels = bin_attribute(records, attr, schemes[attr], key)
        except InputError:
            continue
        present = [w for w in labels.ids if w in e.index]
        if len(present) < folds:
            continue
        labels = labels.subset(present)
        if classifier == "knn":
            acc = knn_cv(e, labels, k, folds, seed, oversample_first)
        else:
            acc = mlp_cv(e, labels, mlp_hidden, mlp_epochs, mlp_lr, folds, seed,
                         oversample_first=oversample_first)
        report.per_attribute_accuracy[attr] = acc
        report.baselines[attr] = random_baseline(labels)
        report.class_counts[attr] = labels.n_classes
    if report.per_attribute_accuracy:
        report.mean_accuracy = float(np.mean(list(report.per_attribute_accuracy.values())))
    if triplets:
        tar, evaluated, skipped = tar_score(e, triplets)
        report.tar, report.evaluated_triplets, report.skipped_triplets = tar, evaluated, skipped
    return report
