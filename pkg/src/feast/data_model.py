"""Domain types, CSV ingestion and the distance/triplet plumbing.

Missing data conventions follow the published dataset: a zero off-diagonal
entry in a distance matrix means the pair was never placed on a common
napping sheet, not that the wines taste identical.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from feast.errors import InputError, ParseError

log = logging.getLogger(__name__)

WineId = int

NAPPING_FIELDS = (
    "session_round_name",
    "event_name",
    "experiment_no",
    "experiment_id",
    "coor1",
    "coor2",
    "color",
)

PARTICIPANT_FIELDS = (
    "session_round_name",
    "event_name",
    "experiment_no",
    "round_id",
    "participant_id",
)

ATTRIBUTE_FIELDS = (
    "vintage_id",
    "experiment_id",
    "year",
    "alcohol",
    "country",
    "region",
    "price",
    "rating",
    "grape",
)


# --------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StickerAnnotation:
    event_name: str
    session_round_name: str
    experiment_no: int
    wine: WineId
    coor1: float
    coor2: float
    color: str

    @property
    def sheet_key(self) -> tuple[str, str, int]:
        return (self.event_name, self.session_round_name, self.experiment_no)


@dataclass(frozen=True)
class Participant:
    session_round_name: str
    event_name: str
    experiment_no: int
    round_id: int
    participant_id: str


@dataclass(frozen=True)
class WineRecord:
    vintage_id: WineId
    experiment_id: Optional[WineId] = None
    year: Optional[int] = None
    country: Optional[str] = None
    region: Optional[str] = None
    price: Optional[float] = None
    rating: Optional[float] = None
    alcohol: Optional[float] = None
    grapes: tuple[str, ...] = ()
    review: Optional[str] = None
    image_ref: Optional[str] = None

    def __post_init__(self):
        if self.price is not None and self.price < 0:
            raise ValueError(f"negative price {self.price}")
        if self.alcohol is not None and not 0 <= self.alcohol <= 100:
            raise ValueError(f"alcohol {self.alcohol} outside [0, 100]")
        object.__setattr__(self, "grapes", tuple(self.grapes))


class FlavorTriplet(NamedTuple):
    """Wine ``anchor`` tastes closer to ``near`` than to ``far``."""

    anchor: WineId
    near: WineId
    far: WineId


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _check_ids(ids) -> tuple[int, ...]:
    ids = tuple(int(i) for i in ids)
    if len(set(ids)) != len(ids):
        raise InputError("duplicate wine ids")
    return ids


class _IndexedMixin:
    ids: tuple[int, ...]

    @property
    def index(self) -> dict[int, int]:
        # cached on first use; instances are immutable
        cached = self.__dict__.get("_index")
        if cached is None:
            cached = {w: i for i, w in enumerate(self.ids)}
            object.__setattr__(self, "_index", cached)
        return cached

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, wine) -> bool:
        return wine in self.index


@dataclass(frozen=True, eq=False)
class DistanceMatrix(_IndexedMixin):
    ids: tuple[int, ...]
    d: np.ndarray
    skipped_sheets: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ids", _check_ids(self.ids))
        d = _frozen_array(self.d, 2, "d")
        n = len(self.ids)
        if d.shape != (n, n):
            raise InputError(f"distance matrix shape {d.shape} does not match {n} ids")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise InputError("distances must be finite and nonnegative")
        if not np.array_equal(d, d.T):
            raise InputError("distance matrix is not symmetric")
        if np.any(np.diag(d) != 0):
            raise InputError("distance matrix diagonal must be zero")
        object.__setattr__(self, "d", d)

    @property
    def observed(self) -> np.ndarray:
        """Boolean mask of co-annotated pairs."""
        return self.d > 0

    def subset(self, wines: Iterable[int]) -> "DistanceMatrix":
        rows = [self.index[w] for w in wines]
        return DistanceMatrix(tuple(self.ids[r] for r in rows), self.d[np.ix_(rows, rows)])


@dataclass(frozen=True, eq=False)
class EmbeddingTable(_IndexedMixin):
    ids: tuple[int, ...]
    vectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", _check_ids(self.ids))
        v = _frozen_array(self.vectors, 2, "vectors")
        if v.shape[0] != len(self.ids):
            raise ValueError("one vector per id required")
        if v.shape[1] < 1:
            raise ValueError("embedding dimension must be >= 1")
        if not np.all(np.isfinite(v)):
            raise InputError("embedding contains non-finite values")
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, wines: Iterable[int]) -> "EmbeddingTable":
        rows = [self.index[w] for w in wines]
        return EmbeddingTable(tuple(self.ids[r] for r in rows), self.vectors[rows])


@dataclass(frozen=True, eq=False)
class Embedding2D(_IndexedMixin):
    ids: tuple[int, ...]
    points: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "ids", _check_ids(self.ids))
        p = _frozen_array(self.points, 2, "points")
        if p.shape != (len(self.ids), 2):
            raise ValueError(f"points must be N x 2, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("embedding contains non-finite values")
        object.__setattr__(self, "points", p)

    def subset(self, wines: Iterable[int]) -> "Embedding2D":
        rows = [self.index[w] for w in wines]
        return Embedding2D(tuple(self.ids[r] for r in rows), self.points[rows], dict(self.meta))

    def point(self, wine: int) -> np.ndarray:
        return self.points[self.index[wine]]


def shared_ids(a: _IndexedMixin, b: _IndexedMixin) -> list[int]:
    """Ids present in both containers, in ascending order."""
    return sorted(set(a.ids) & set(b.ids))


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------


def _open_csv(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    # newline="" lets the csv module accept LF and CRLF alike
    return path.open("r", encoding="utf-8-sig", newline="")


def _read_header(reader, path, required: Sequence[str]) -> dict[str, int]:
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file, header expected", path=path) from None
    columns = {name.strip(): i for i, name in enumerate(header)}
    missing = [name for name in required if name not in columns]
    if missing:
        raise ParseError(f"missing required column(s): {', '.join(missing)}", row=1, path=path)
    return columns


def _cell(row, columns, name) -> str:
    i = columns.get(name)
    if i is None or i >= len(row):
        return ""
    return row[i].strip()


def _parse_float(text, name, row, path, *, optional=False) -> Optional[float]:
    if text == "" and optional:
        return None
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{name}: not a number: {text!r}", row=row, path=path) from None
    if math.isnan(value) and optional:
        return None
    if not math.isfinite(value):
        raise ParseError(f"{name}: non-finite value {text!r}", row=row, path=path)
    return value


def _parse_int(text, name, row, path, *, optional=False) -> Optional[int]:
    value = _parse_float(text, name, row, path, optional=optional)
    if value is None:
        return None
    # pandas exports integers as "12.0"
    if value != int(value):
        raise ParseError(f"{name}: not an integer: {text!r}", row=row, path=path)
    return int(value)


def parse_napping(path) -> list[StickerAnnotation]:
    """Read ``napping.csv`` into sticker annotations, one per data row."""
    out = []
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        columns = _read_header(reader, path, NAPPING_FIELDS)
        for rowno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            get = lambda name: _cell(row, columns, name)  # noqa: E731
            x = _parse_float(get("coor1"), "coor1", rowno, path)
            y = _parse_float(get("coor2"), "coor2", rowno, path)
            if x < 0 or y < 0:
                raise ParseError("negative sheet coordinate", row=rowno, path=path)
            out.append(
                StickerAnnotation(
                    event_name=get("event_name"),
                    session_round_name=get("session_round_name"),
                    experiment_no=_parse_int(get("experiment_no"), "experiment_no", rowno, path),
                    wine=_parse_int(get("experiment_id"), "experiment_id", rowno, path),
                    coor1=x,
                    coor2=y,
                    color=get("color"),
                )
            )
    return out


def write_napping(annotations: Iterable[StickerAnnotation], path) -> None:
    """Write annotations with the ``napping.csv`` header."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(NAPPING_FIELDS)
        for a in annotations:
            writer.writerow(
                [a.session_round_name, a.event_name, a.experiment_no, a.wine,
                 repr(float(a.coor1)), repr(float(a.coor2)), a.color]
            )


def parse_participants(path) -> list[Participant]:
    out = []
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        columns = _read_header(reader, path, PARTICIPANT_FIELDS)
        for rowno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            get = lambda name: _cell(row, columns, name)  # noqa: E731
            out.append(
                Participant(
                    session_round_name=get("session_round_name"),
                    event_name=get("event_name"),
                    experiment_no=_parse_int(get("experiment_no"), "experiment_no", rowno, path),
                    round_id=_parse_int(get("round_id"), "round_id", rowno, path),
                    participant_id=get("participant_id"),
                )
            )
    return out


def split_grapes(cell: str) -> tuple[str, ...]:
    return tuple(g.strip() for g in cell.split(",") if g.strip())


def parse_attributes(path) -> list[WineRecord]:
    """Read ``images_reviews_attributes.csv``.

    Empty cells become ``None``; the grape cell keeps its blend order.
    """
    out = []
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        columns = _read_header(reader, path, ATTRIBUTE_FIELDS)
        for rowno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            get = lambda name: _cell(row, columns, name)  # noqa: E731
            text = lambda name: get(name) or None  # noqa: E731
            try:
                record = WineRecord(
                    vintage_id=_parse_int(get("vintage_id"), "vintage_id", rowno, path),
                    experiment_id=_parse_int(get("experiment_id"), "experiment_id", rowno, path, optional=True),
                    year=_parse_int(get("year"), "year", rowno, path, optional=True),
                    country=text("country"),
                    region=text("region"),
                    price=_parse_float(get("price"), "price", rowno, path, optional=True),
                    rating=_parse_float(get("rating"), "rating", rowno, path, optional=True),
                    alcohol=_parse_float(get("alcohol"), "alcohol", rowno, path, optional=True),
                    grapes=split_grapes(get("grape")),
                    review=text("review"),
                    image_ref=text("image"),
                )
            except ValueError as exc:
                raise ParseError(str(exc), row=rowno, path=path) from None
            out.append(record)
    return out


POOLING_RULES = ("mean", "first", "concatenate")


def _pool(vectors: list[np.ndarray], rule: str, keep: int) -> np.ndarray:
    if rule == "mean":
        return np.mean(vectors, axis=0)
    if rule == "first":
        return vectors[0]
    return np.concatenate(vectors[:keep])


def load_embeddings(path, pool: Optional[str] = None) -> EmbeddingTable:
    """Load an ``id,e0,...,e{D-1}`` table.

    Duplicate ids are an error unless ``pool`` names a rule for merging the
    per-item vectors of one wine (mean, first, or concatenate, which
    concatenates the first ``m`` vectors where ``m`` is the smallest item
    count over all wines).
    """
    if pool is not None and pool not in POOLING_RULES:
        raise InputError(f"unknown pooling rule {pool!r}")
    rows: dict[int, list[np.ndarray]] = {}
    dim = None
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        columns = _read_header(reader, path, ("id",))
        names = [c for c in columns if c != "id"]
        if not names:
            raise ParseError("no embedding columns", row=1, path=path)
        width = len(columns)
        for rowno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            if len(row) != width:
                raise ParseError(f"ragged row: {len(row)} cells, header has {width}", row=rowno, path=path)
            wine = _parse_int(row[columns["id"]].strip(), "id", rowno, path)
            vec = np.empty(len(names))
            for j, name in enumerate(names):
                vec[j] = _parse_float(row[columns[name]].strip(), name, rowno, path)
            dim = len(vec) if dim is None else dim
            if wine in rows and pool is None:
                raise ParseError(f"duplicate id {wine}", row=rowno, path=path)
            rows.setdefault(wine, []).append(vec)
    if not rows:
        return EmbeddingTable((), np.empty((0, dim or len(names))))
    keep = min(len(v) for v in rows.values())
    ids = sorted(rows)
    vectors = np.array([_pool(rows[w], pool or "first", keep) for w in ids])
    return EmbeddingTable(tuple(ids), vectors)


def write_embeddings(table: EmbeddingTable, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id"] + [f"e{j}" for j in range(table.dim)])
        for wine, vec in zip(table.ids, table.vectors):
            writer.writerow([wine] + [repr(float(v)) for v in vec])


def write_embedding2d(e: Embedding2D, path) -> None:
    """Write ``id,x,y`` rows in ascending id order."""
    order = np.argsort(e.ids, kind="stable")
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "x", "y"])
        for r in order:
            x, y = e.points[r]
            writer.writerow([e.ids[r], repr(float(x)), repr(float(y))])


def read_embedding2d(path) -> Embedding2D:
    ids, pts = [], []
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        columns = _read_header(reader, path, ("id", "x", "y"))
        seen = set()
        for rowno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            wine = _parse_int(_cell(row, columns, "id"), "id", rowno, path)
            if wine in seen:
                raise ParseError(f"duplicate id {wine}", row=rowno, path=path)
            seen.add(wine)
            ids.append(wine)
            pts.append((_parse_float(_cell(row, columns, "x"), "x", rowno, path),
                        _parse_float(_cell(row, columns, "y"), "y", rowno, path)))
    return Embedding2D(tuple(ids), np.array(pts, dtype=float).reshape(-1, 2))


def write_distance_matrix(m: DistanceMatrix, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id"] + [str(w) for w in m.ids])
        for wine, row in zip(m.ids, m.d):
            writer.writerow([wine] + [repr(float(v)) for v in row])


def read_distance_matrix(path) -> DistanceMatrix:
    with _open_csv(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path=path) from None
        ids = [_parse_int(h.strip(), "id", 1, path) for h in header[1:]]
        rows = []
        for rowno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            rows.append([_parse_float(c.strip(), "distance", rowno, path) for c in row[1:]])
    try:
        return DistanceMatrix(tuple(ids), np.array(rows, dtype=float).reshape(len(ids), len(ids)))
    except ValueError as exc:
        raise ParseError(str(exc), path=path) from None


# --------------------------------------------------------------------------
# Distances and triplets
# --------------------------------------------------------------------------


def group_sheets(annotations: Iterable[StickerAnnotation]) -> dict[tuple, list[StickerAnnotation]]:
    sheets: dict[tuple, list[StickerAnnotation]] = defaultdict(list)
    for a in annotations:
        sheets[a.sheet_key].append(a)
    return dict(sheets)


def sheet_distances(stickers: Sequence[StickerAnnotation], normalize: bool = False):
    """Pairwise sticker distances of one sheet as ``{(w_a, w_b): d}`` with w_a < w_b."""
    xy = np.array([(s.coor1, s.coor2) for s in stickers], dtype=float)
    diff = xy[:, None, :] - xy[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    if normalize:
        diag = float(np.hypot(*(xy.max(0) - xy.min(0))))
        if diag > 0:
            dist = dist / diag
    out = {}
    for a in range(len(stickers)):
        for b in range(a + 1, len(stickers)):
            wa, wb = stickers[a].wine, stickers[b].wine
            out[(min(wa, wb), max(wa, wb))] = float(dist[a, b])
    return out


def build_distance_matrix(
    annotations: Iterable[StickerAnnotation],
    normalize: bool = False,
    aggregate: str = "mean",
) -> DistanceMatrix:
    """Aggregate per-sheet sticker distances into one wine-by-wine matrix.

    Each pair's entry is the mean (or median) over every sheet that holds
    both wines. Sheets with fewer than two stickers are skipped and counted.
    """
    if aggregate not in ("mean", "median"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    sheets = group_sheets(annotations)
    per_pair: dict[tuple[int, int], list[float]] = defaultdict(list)
    wines: set[int] = set()
    skipped = 0
    for key in sorted(sheets, key=repr):
        stickers = sheets[key]
        seen = [s.wine for s in stickers]
        if len(set(seen)) != len(seen):
            raise InputError(f"sheet {key}: a wine appears more than once")
        if len(stickers) < 2:
            skipped += 1
            continue
        wines.update(seen)
        for pair, dist in sheet_distances(stickers, normalize).items():
            per_pair[pair].append(dist)
    if skipped:
        log.warning("skipped %d sheet(s) with fewer than two stickers", skipped)
    ids = sorted(wines)
    index = {w: i for i, w in enumerate(ids)}
    d = np.zeros((len(ids), len(ids)))
    reduce = np.mean if aggregate == "mean" else np.median
    for (wa, wb), values in sorted(per_pair.items()):
        d[index[wa], index[wb]] = d[index[wb], index[wa]] = float(reduce(values))
    return DistanceMatrix(tuple(ids), d, skipped_sheets=skipped)


def triplets_from_matrix(m: DistanceMatrix) -> list[FlavorTriplet]:
    """Every strict ordering ``d(i,j) < d(i,k)`` between observed pairs.

    Scans anchors in index order, then unordered pairs {j, k} with j < k.
    Ties and missing entries produce nothing.
    """
    out = []
    ids = m.ids
    for i in range(len(ids)):
        row = m.d[i]
        cols = np.flatnonzero(row > 0)
        if len(cols) < 2:
            continue
        a, b = np.triu_indices(len(cols), k=1)
        j, k = cols[a], cols[b]
        dj, dk = row[j], row[k]
        keep = dj != dk
        near = np.where(dj < dk, j, k)[keep]
        far = np.where(dj < dk, k, j)[keep]
        anchor = ids[i]
        out.extend(FlavorTriplet(anchor, ids[n], ids[f]) for n, f in zip(near, far))
    return out


def triplet_wines(triplets: Iterable[FlavorTriplet]) -> set[int]:
    return {w for t in triplets for w in t}


def triplet_index_array(triplets: Sequence[FlavorTriplet], index: dict[int, int]) -> np.ndarray:
    """Map triplets to a (T, 3) int array of row indices."""
    try:
        arr = np.array([[index[t[0]], index[t[1]], index[t[2]]] for t in triplets], dtype=np.intp)
    except KeyError as exc:
        raise InputError(f"triplet references unknown wine id {exc.args[0]}") from None
    return arr.reshape(-1, 3)


class TripletSplit(NamedTuple):
    train: list[FlavorTriplet]
    test: list[FlavorTriplet]
    train_wines: tuple[int, ...]
    test_wines: tuple[int, ...]
    discarded: int


def split_triplets_by_wine(
    triplets: Sequence[FlavorTriplet], test_fraction: float, seed: int
) -> TripletSplit:
    """Partition wines, then keep only triplets lying wholly on one side.

    Triplets that straddle the partition are dropped and counted in
    ``discarded``.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if not triplets:
        raise InputError("no triplets to split")
    universe = np.array(sorted(triplet_wines(triplets)))
    n = len(universe)
    n_test = int(np.floor(test_fraction * n + 0.5))
    n_test = min(max(n_test, 1), n - 1)
    rng = np.random.default_rng(seed)
    test_wines = set(rng.permutation(universe)[:n_test].tolist())
    train, test = [], []
    for t in triplets:
        inside = sum(w in test_wines for w in t)
        if inside == 3:
            test.append(t)
        elif inside == 0:
            train.append(t)
    discarded = len(triplets) - len(train) - len(test)
    train_wines = tuple(sorted(set(universe.tolist()) - test_wines))
    return TripletSplit(train, test, train_wines, tuple(sorted(test_wines)), discarded)


HOLDOUT_MODES = ("wines", "pairs")


def holdout_matrix(m: DistanceMatrix, test_wines: Iterable[int], mode: str = "wines") -> DistanceMatrix:
    """Hide held-out information from a human-kernel input matrix.

    ``wines`` drops the test wines entirely. ``pairs`` keeps every wine but
    zeroes (marks missing) each pair whose two wines are both held out,
    which are exactly the pairs any held-out triplet compares.
    """
    if mode not in HOLDOUT_MODES:
        raise ValueError(f"unknown holdout mode {mode!r}")
    test = set(test_wines)
    if mode == "wines":
        return m.subset([w for w in m.ids if w not in test])
    flag = np.array([w in test for w in m.ids])
    d = m.d.copy()
    d[np.ix_(flag, flag)] = 0.0
    return DistanceMatrix(m.ids, d)


def holdout_triplets(triplets: Iterable[FlavorTriplet], test_wines: Iterable[int], mode: str = "wines"):
    """Triplet counterpart of :func:`holdout_matrix`."""
    test = set(test_wines)
    if mode == "wines":
        return [t for t in triplets if not (set(t) & test)]
    if mode != "pairs":
        raise ValueError(f"unknown holdout mode {mode!r}")
    return [
        t for t in triplets
        if not ((t[0] in test and t[1] in test) or (t[0] in test and t[2] in test))
    ]
