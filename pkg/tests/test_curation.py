import datetime
from itertools import combinations, product

import numpy as np
import pytest
import shapely

from floodcast.curation import (
    BasinGeometry,
    CurationConfig,
    PairVerdict,
    Verdict,
    candidate_pairs,
    classify_pair,
    curate,
    evaluate_pairs,
    flatline_ratio,
    overlap_fraction,
    pairwise_kge,
    polygon_area,
    qc_filter,
    resolve_duplicates,
)
from floodcast.errors import ValidationError
from floodcast.hydrodata import DailySeries, StationRecord

atol = 1e-9


def rect(station_id, x0, y0, x1, y1):
    return BasinGeometry(station_id, (((x0, y0), (x1, y0), (x1, y1), (x0, y1)),))


def star(station_id, rng, center, n=12):
    """Random star-shaped (hence simple) and usually concave polygon"""
    angles = (np.arange(n) + rng.uniform(0, 0.9, size=n)) * 2 * np.pi / n
    radii = rng.uniform(0.3, 1.0, size=n)
    ring = tuple((center[0] + r * np.cos(a), center[1] + r * np.sin(a)) for a, r in zip(angles, radii))
    return BasinGeometry(station_id, (ring,))


def record(station_id, values, start="2010-01-01"):
    return StationRecord(station_id, 100.0, DailySeries(start, values))


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ((0, 0, 2, 2), (1, 1, 3, 3), 0.25),
        ((0, 0, 4, 4), (1, 1, 2, 2), 1.0),
        ((0, 0, 2, 1), (1, 0, 5, 1), 0.5),
        ((0, 0, 1, 1), (2, 2, 3, 3), 0.0),
        ((0, 0, 1, 1), (1, 0, 2, 1), 0.0),
        ((0, 0, 10, 10), (9, 9, 12, 12), 1 / 9),
    ],
)
def test_overlap_rectangles(a, b, expected):
    assert overlap_fraction(rect("a", *a), rect("b", *b)) == pytest.approx(expected, abs=atol)
    assert overlap_fraction(rect("b", *b), rect("a", *a)) == pytest.approx(expected, abs=atol)


def test_overlap_triangles():
    lower = BasinGeometry("a", (((0, 0), (1, 0), (0, 1)),))
    upper = BasinGeometry("b", (((1, 1), (1, 0), (0, 1)),))
    assert polygon_area(lower) == pytest.approx(0.5, abs=atol)
    assert overlap_fraction(lower, upper) == pytest.approx(0.0, abs=atol)

    square = rect("s", 0, 0, 1, 1)
    assert overlap_fraction(lower, square) == pytest.approx(1.0, abs=atol)
    # triangle (0,0),(2,0),(0,2) cut by the unit square: area 1 of min(2, 1)
    big = BasinGeometry("t", (((0, 0), (2, 0), (0, 2)),))
    assert overlap_fraction(big, square) == pytest.approx(1.0, abs=atol)
    # triangle (0,0),(2,0),(0,2) and square [0.5,1.5]^2: the square's part
    # below x + y = 2 is 1 - 0.5 * 1 * 1 = 0.5
    shifted = rect("q", 0.5, 0.5, 1.5, 1.5)
    assert overlap_fraction(big, shifted) == pytest.approx(0.5, abs=atol)


def test_overlap_with_hole():
    holed = BasinGeometry("h", (((0, 0), (4, 0), (4, 4), (0, 4)), ((1, 1), (3, 1), (3, 3), (1, 3))))
    assert polygon_area(holed) == pytest.approx(12.0, abs=atol)
    inner = rect("i", 1, 1, 3, 3)
    assert overlap_fraction(holed, inner) == pytest.approx(0.0, abs=atol)


def test_overlap_monte_carlo_concave():
    rng = np.random.default_rng(0)
    n_points = 1_000_000
    for k in range(20):
        a = star("a", rng, (0.0, 0.0))
        b = star("b", rng, rng.uniform(-0.6, 0.6, size=2))
        smaller = a if polygon_area(a) <= polygon_area(b) else b
        x0, y0, x1, y1 = smaller.polygon.bounds
        x = rng.uniform(x0, x1, size=n_points)
        y = rng.uniform(y0, y1, size=n_points)
        in_smaller = shapely.contains_xy(smaller.polygon, x, y)
        in_both = in_smaller & shapely.contains_xy(a.polygon, x, y) & shapely.contains_xy(b.polygon, x, y)
        estimate = in_both.sum() / in_smaller.sum()
        assert overlap_fraction(a, b) == pytest.approx(estimate, abs=0.005), k


def test_invalid_geometry():
    with pytest.raises(ValidationError):
        BasinGeometry("x", (((0, 0), (1, 0)),))
    with pytest.raises(ValidationError, match="self-intersects"):
        BasinGeometry("x", (((0, 0), (1, 1), (1, 0), (0, 1)),))


def test_candidate_pairs_use_bounding_boxes():
    geometries = {
        "a": rect("a", 0, 0, 1, 1),
        "b": rect("b", 0.5, 0.5, 2, 2),
        "c": rect("c", 10, 10, 11, 11),
    }
    assert candidate_pairs(geometries) == [("a", "b")]


@pytest.mark.parametrize("overlap, kge", list(product([0.69, 0.70, 0.71], [0.59, 0.60, 0.94, 0.95, 0.96])))
def test_classify_pair_boundary_grid(overlap, kge):
    verdict = classify_pair(overlap, kge)
    if overlap < 0.7:
        assert verdict == Verdict.DISTINCT
    elif kge >= 0.95:
        assert verdict == Verdict.STRICT_DUPLICATE
    elif kge < 0.6:
        assert verdict == Verdict.DISCARD_BOTH
    else:
        assert verdict == Verdict.RETAIN_BOTH_NESTED


def test_classify_pair_undefined_kge():
    assert classify_pair(0.9, None) == Verdict.DISCARD_BOTH
    assert classify_pair(0.2, None) == Verdict.DISTINCT
    with pytest.raises(ValidationError):
        classify_pair(1.2, 0.9)


def test_pairwise_kge_needs_overlap():
    rng = np.random.default_rng(1)
    values = rng.gamma(2.0, 1.0, size=400)
    a = DailySeries("2010-01-01", values)
    assert pairwise_kge(a, a) == pytest.approx(1.0)
    b = DailySeries("2010-01-11", values[10:])
    assert pairwise_kge(a, b) == pytest.approx(1.0)
    assert pairwise_kge(a, DailySeries("2010-01-01", values[:300])) is None
    assert pairwise_kge(a, DailySeries("2010-01-01", values[:300]), min_overlap_days=300) == pytest.approx(1.0)


def test_constant_gauge_pair_is_discarded():
    flat = DailySeries("2010-01-01", np.full(400, 0.3))
    varying = DailySeries("2010-01-01", np.linspace(0.0, 1.0, 400))
    assert pairwise_kge(flat, varying) is None
    assert pairwise_kge(varying, flat) is None
    assert classify_pair(0.9, pairwise_kge(flat, varying)) == Verdict.DISCARD_BOTH


class UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a, b):
        self.parent[self.find(a)] = self.find(b)


@pytest.mark.parametrize("seed", range(25))
def test_resolve_duplicates_matches_union_find(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 25))
    ids = [f"G{i:02d}" for i in range(n)]
    cutoff = datetime.date(2016, 1, 1)
    records = {}
    for station_id in ids:
        values = np.ones(730)
        values[rng.random(730) < rng.uniform(0, 0.9)] = np.nan
        records[station_id] = record(station_id, values, "2015-01-01")
    pairs = [p for p in combinations(ids, 2) if rng.random() < 2.0 / n]
    verdicts = [PairVerdict(a, b, 0.9, 0.99, Verdict.STRICT_DUPLICATE) for a, b in pairs]

    uf = UnionFind(ids)
    for a, b in pairs:
        uf.union(a, b)
    components = {}
    for station_id in ids:
        components.setdefault(uf.find(station_id), []).append(station_id)

    def recent(s):
        return int(np.count_nonzero(~np.isnan(records[s].discharge.values[365:])))

    expected = sorted(min(members, key=lambda s: (-recent(s), s)) for members in components.values())
    resolution = resolve_duplicates(verdicts, records, cutoff)
    assert resolution.retained == expected
    assert len(resolution.retained) == len(components)
    assert sorted(resolution.retained + resolution.removed_ids) == ids


def test_resolve_duplicates_discard_and_conflict():
    base = np.arange(1.0, 801.0)
    records = {
        "A": record("A", base),
        "B": record("B", np.where(np.arange(800) > 400, np.nan, base)),
        "C": record("C", base),
        "D": record("D", base),
    }
    verdicts = [
        PairVerdict("A", "B", 0.9, 0.99, Verdict.STRICT_DUPLICATE),
        PairVerdict("A", "C", 0.8, 0.1, Verdict.DISCARD_BOTH),
        PairVerdict("C", "D", 0.3, None, Verdict.DISTINCT),
    ]
    resolution = resolve_duplicates(verdicts, records, datetime.date(2011, 1, 1))
    assert resolution.retained == ["A", "D"]
    assert resolution.removed_ids == ["B", "C"]
    assert [(c.station_id, c.related) for c in resolution.conflicts] == [("A", "C")]
    assert resolution.survivors == {"A": ["B"]}


def test_resolve_duplicates_rejects_repeated_pair():
    records = {"A": record("A", [1.0]), "B": record("B", [1.0])}
    verdicts = [
        PairVerdict("A", "B", 0.9, 0.99, Verdict.STRICT_DUPLICATE),
        PairVerdict("B", "A", 0.9, 0.99, Verdict.STRICT_DUPLICATE),
    ]
    with pytest.raises(ValidationError):
        resolve_duplicates(verdicts, records)


def test_flatline_ratio():
    assert flatline_ratio(DailySeries("2020-01-01", [1.0, 1.0, 1.0, 2.0, 2.0])) == pytest.approx(0.75)
    assert flatline_ratio(DailySeries("2020-01-01", [1.0, np.nan, 1.0])) is None
    assert flatline_ratio(DailySeries("2020-01-01", [1.0])) is None


def test_qc_filter():
    rng = np.random.default_rng(2)
    records = [
        record("good", rng.gamma(2.0, 1.0, size=100)),
        record("flat", np.r_[np.full(99, 2.0), 2.5]),
        record("tiny", 1.0 + 1e-6 * rng.random(100)),
        record("short", [1.0]),
    ]
    result = qc_filter(records)
    assert result.retained == ["good"]
    assert [reason for reason, _ in result.rejections["flat"]] == ["flatline"]
    assert "low_variance" in [reason for reason, _ in result.rejections["tiny"]]
    assert result.rejections["short"][0][0] == "insufficient_data"


def test_curate_end_to_end():
    rng = np.random.default_rng(3)
    signal = rng.gamma(2.0, 1.0, size=800)
    records = {
        "S1": record("S1", signal),
        "S1B": record("S1B", signal * (1 + rng.normal(0, 0.005, size=800))),
        "S2": record("S2", rng.gamma(2.0, 1.0, size=800)),
        "FLAT": record("FLAT", np.full(800, 1.25)),
    }
    geometries = {
        "S1": rect("S1", 0, 0, 1, 1),
        "S1B": rect("S1B", 0.02, 0.02, 1.02, 1.02),
        "S2": rect("S2", 5, 5, 6, 6),
        "FLAT": rect("FLAT", 9, 9, 10, 10),
    }
    config = CurationConfig(retention_cutoff="2010-06-01")
    result = curate(records, geometries, config, threads=2)
    assert result.retained == ["S1", "S2"]
    assert len(result.resolution.survivors) == 1
    assert "FLAT" in result.qc.rejections
    assert [v.verdict for v in result.verdicts] == [Verdict.STRICT_DUPLICATE]


def test_evaluate_pairs_skips_kge_below_overlap():
    records = {"a": record("a", np.arange(1.0, 500.0)), "b": record("b", np.arange(500.0, 1.0, -1.0))}
    geometries = {"a": rect("a", 0, 0, 1, 1), "b": rect("b", 0.5, 0, 1.5, 1)}
    (verdict,) = evaluate_pairs(geometries, records)
    assert verdict.overlap_fraction == pytest.approx(0.5)
    assert verdict.kge is None
    assert verdict.verdict == Verdict.DISTINCT


def test_curation_config_from_dict():
    config = CurationConfig.from_dict({"overlap_threshold": 0.8, "retention_cutoff": "2018-01-01"})
    assert config.retention_cutoff == datetime.date(2018, 1, 1)
    with pytest.raises(ValidationError):
        CurationConfig.from_dict({"bogus": 1})
    with pytest.raises(ValidationError):
        CurationConfig(discard_kge=0.99)
