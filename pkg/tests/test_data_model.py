import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feast.data_model import (
    DistanceMatrix,
    EmbeddingTable,
    FlavorTriplet,
    StickerAnnotation,
    build_distance_matrix,
    holdout_matrix,
    holdout_triplets,
    load_embeddings,
    parse_attributes,
    parse_napping,
    read_distance_matrix,
    read_embedding2d,
    split_triplets_by_wine,
    triplet_wines,
    triplets_from_matrix,
    write_distance_matrix,
    write_embedding2d,
    write_napping,
)
from feast.errors import InputError, ParseError

NAPPING_HEADER = "session_round_name,event_name,experiment_no,experiment_id,coor1,coor2,color\n"
ATTR_HEADER = "vintage_id,experiment_id,year,alcohol,country,region,price,rating,grape\n"


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# -- parsing -----------------------------------------------------------------


def test_parse_napping_row(tmp_path):
    p = _write(tmp_path, "n.csv", NAPPING_HEADER + "r1,eventA,3,17,120.5,88.0,red\n")
    (a,) = parse_napping(p)
    assert a == StickerAnnotation("eventA", "r1", 3, 17, 120.5, 88.0, "red")


def test_parse_napping_empty_and_reordered(tmp_path):
    assert parse_napping(_write(tmp_path, "e.csv", NAPPING_HEADER)) == []
    p = _write(tmp_path, "r.csv", "color,coor2,coor1,experiment_id,experiment_no,event_name,session_round_name\r\n"
                                  "blue,2,1,5,0,ev,s\r\n")
    (a,) = parse_napping(p)
    assert (a.wine, a.coor1, a.coor2, a.color) == (5, 1.0, 2.0, "blue")


def test_parse_napping_errors(tmp_path):
    bad = _write(tmp_path, "b.csv", NAPPING_HEADER + "r1,eventA,3,17,abc,88.0,red\n")
    with pytest.raises(ParseError, match="row 2"):
        parse_napping(bad)
    with pytest.raises(ParseError):
        parse_napping(_write(tmp_path, "m.csv", "session_round_name,event_name\nx,y\n"))
    with pytest.raises(InputError):
        parse_napping(tmp_path / "absent.csv")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.floats(0, 2000, allow_nan=False),
                          st.floats(0, 2000, allow_nan=False), st.sampled_from(["red", "blue"])),
                max_size=12))
def test_napping_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("rt") / "napping.csv"
    ann = [StickerAnnotation("ev", "s", i % 3, w, x, y, c) for i, (w, x, y, c) in enumerate(rows)]
    write_napping(ann, path)
    assert parse_napping(path) == ann


def test_parse_attributes(tmp_path):
    p = _write(tmp_path, "a.csv", ATTR_HEADER + '1,7,2015,13.5,Italy,Tuscany,20,,"Sangiovese, Merlot"\n')
    (r,) = parse_attributes(p)
    assert r.grapes == ("Sangiovese", "Merlot")
    assert r.rating is None
    assert r.alcohol == 13.5 and r.year == 2015 and r.experiment_id == 7
    bad = _write(tmp_path, "b.csv", ATTR_HEADER + "1,7,2015,x,Italy,T,20,4,Merlot\n")
    with pytest.raises(ParseError, match="row 2"):
        parse_attributes(bad)


def test_load_embeddings(tmp_path):
    t = load_embeddings(_write(tmp_path, "e.csv", "id,e0,e1\n7,1.0,2.0\n"))
    assert t.ids == (7,) and t.vectors.tolist() == [[1.0, 2.0]]
    with pytest.raises(InputError, match="duplicate"):
        load_embeddings(_write(tmp_path, "d.csv", "id,e0,e1\n7,1,2\n7,3,4\n"))
    with pytest.raises(InputError):
        load_embeddings(_write(tmp_path, "n.csv", "id,e0,e1\n7,NaN,2\n"))
    with pytest.raises(InputError, match="ragged"):
        load_embeddings(_write(tmp_path, "r.csv", "id,e0,e1\n7,1\n"))


def test_load_embeddings_pooling(tmp_path):
    p = _write(tmp_path, "d.csv", "id,e0,e1\n7,1,2\n7,3,4\n8,0,0\n")
    assert load_embeddings(p, pool="mean").vectors.tolist() == [[2, 3], [0, 0]]
    assert load_embeddings(p, pool="first").vectors.tolist() == [[1, 2], [0, 0]]
    # concatenation keeps as many items as the sparsest wine has
    assert load_embeddings(p, pool="concatenate").vectors.tolist() == [[1, 2], [0, 0]]


def test_embedding_and_matrix_csv_round_trip(tmp_path):
    from feast.data_model import Embedding2D

    e = Embedding2D((3, 1, 2), np.array([[0.1, 0.2], [1 / 3, -5.0], [7.0, 1e-9]]))
    write_embedding2d(e, tmp_path / "e.csv")
    back = read_embedding2d(tmp_path / "e.csv")
    assert back.ids == (1, 2, 3)
    np.testing.assert_array_equal(back.subset(e.ids).points, e.points)
    m = DistanceMatrix((4, 9), np.array([[0, 2.5], [2.5, 0]]))
    write_distance_matrix(m, tmp_path / "m.csv")
    np.testing.assert_array_equal(read_distance_matrix(tmp_path / "m.csv").d, m.d)


# -- distance matrix -----------------------------------------------------------


def _sheet(no, placements):
    return [StickerAnnotation("ev", "s", no, w, x, y, "c%d" % i) for i, (w, x, y) in enumerate(placements)]


def test_build_distance_matrix_mean_and_missing():
    ann = _sheet(0, [(1, 0, 0), (2, 3, 4)]) + _sheet(1, [(1, 0, 0), (2, 6, 8), (3, 0, 1)])
    m = build_distance_matrix(ann)
    assert m.ids == (1, 2, 3)
    assert m.d[0, 1] == pytest.approx(7.5)  # mean of 5 and 10
    assert m.d[0, 2] == pytest.approx(1.0)
    med = build_distance_matrix(ann, aggregate="median")
    assert med.d[0, 1] == pytest.approx(7.5)


def test_build_distance_matrix_normalized_and_skipped():
    ann = _sheet(0, [(1, 0, 0), (2, 3, 4)]) + _sheet(1, [(5, 1, 1)])
    m = build_distance_matrix(ann, normalize=True)
    assert m.d[0, 1] == pytest.approx(1.0)
    assert m.skipped_sheets == 1
    assert 5 not in m.ids


def test_duplicate_wine_on_sheet_rejected():
    with pytest.raises(InputError):
        build_distance_matrix(_sheet(0, [(1, 0, 0), (1, 3, 4)]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.tuples(st.integers(0, 8), st.floats(0, 500), st.floats(0, 500)),
                         min_size=1, max_size=5), min_size=1, max_size=8),
       st.booleans())
def test_distance_matrix_symmetric_zero_diagonal(sheets, normalize):
    ann = []
    for no, placements in enumerate(sheets):
        seen = {}
        for w, x, y in placements:
            seen.setdefault(w, (w, x, y))
        ann += _sheet(no, list(seen.values()))
    m = build_distance_matrix(ann, normalize=normalize)
    np.testing.assert_array_equal(m.d, m.d.T)
    assert np.all(np.diag(m.d) == 0) and np.all(m.d >= 0)


def test_distance_matrix_validation():
    with pytest.raises(InputError):
        DistanceMatrix((1, 2), np.array([[0, 1], [2, 0]]))
    with pytest.raises(InputError):
        DistanceMatrix((1, 2), np.array([[1, 1], [1, 0]]))


# -- triplets -------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 9), st.integers(0, 10_000), st.floats(0, 0.6))
def test_triplets_respect_source_order(n, seed, missing):
    rng = np.random.default_rng(seed)
    d = np.round(rng.uniform(0.5, 3, (n, n)), 1)  # rounding creates ties
    d = np.triu(d, 1)
    d[rng.uniform(size=d.shape) < missing] = 0
    d = d + d.T
    m = DistanceMatrix(tuple(range(10, 10 + n)), d)
    trip = triplets_from_matrix(m)
    idx = m.index
    for i, j, k in trip:
        a, b, c = idx[i], idx[j], idx[k]
        assert len({i, j, k}) == 3
        assert 0 < d[a, b] < d[a, c]
    # every strict observed ordering is emitted exactly once
    expected = sum(
        1
        for a in range(n)
        for b in range(n)
        for c in range(b + 1, n)
        if a not in (b, c) and d[a, b] > 0 and d[a, c] > 0 and d[a, b] != d[a, c]
    )
    assert len(trip) == expected == len(set(trip))


def test_split_half_of_four_wines():
    trip = [FlavorTriplet(1, 2, 3), FlavorTriplet(2, 1, 3), FlavorTriplet(3, 1, 2), FlavorTriplet(1, 3, 4)]
    s = split_triplets_by_wine(trip, 0.5, seed=0)
    assert len(s.test_wines) == 2 and len(s.train_wines) == 2
    for t in s.train:
        assert set(t) <= set(s.train_wines)
    for t in s.test:
        assert set(t) <= set(s.test_wines)
    assert s.discarded == len(trip) - len(s.train) - len(s.test)
    assert split_triplets_by_wine(trip, 0.5, seed=0) == s


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        split_triplets_by_wine([FlavorTriplet(1, 2, 3)], 1.0, 0)
    with pytest.raises(InputError):
        split_triplets_by_wine([], 0.5, 0)


def test_split_is_wine_disjoint_for_100_seeds():
    rng = np.random.default_rng(0)
    d = rng.uniform(1, 2, (15, 15))
    d = np.triu(d, 1) + np.triu(d, 1).T
    trip = triplets_from_matrix(DistanceMatrix(tuple(range(15)), d))
    for seed in range(100):
        s = split_triplets_by_wine(trip, 0.2, seed)
        assert not (triplet_wines(s.train) & triplet_wines(s.test))
        assert len(s.test_wines) == 3


def test_holdout_modes():
    d = np.ones((4, 4)) - np.eye(4)
    m = DistanceMatrix((1, 2, 3, 4), d)
    dropped = holdout_matrix(m, [3, 4], "wines")
    assert dropped.ids == (1, 2)
    masked = holdout_matrix(m, [3, 4], "pairs")
    assert masked.d[2, 3] == 0 and masked.d[0, 2] == 1
    trip = [FlavorTriplet(3, 4, 1), FlavorTriplet(3, 1, 2), FlavorTriplet(1, 3, 4)]
    assert holdout_triplets(trip, [3, 4], "pairs") == [FlavorTriplet(3, 1, 2), FlavorTriplet(1, 3, 4)]
    assert holdout_triplets(trip, [3, 4], "wines") == []


def test_embedding_table_rejects_non_finite():
    with pytest.raises(InputError):
        EmbeddingTable((1,), np.array([[np.inf]]))
