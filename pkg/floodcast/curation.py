"""
Station network curation: deduplication by basin-polygon overlap and
discharge similarity, followed by time-series quality control.

Geometry is handled in planar degree space (EPSG:4326 coordinates taken as
planar). Areas only enter through overlap ratios.
"""

import datetime
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import shapely
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from shapely.geometry import LinearRing, Polygon
from shapely.validation import explain_validity

from floodcast.errors import ValidationError
from floodcast.hydrodata import DailySeries, StationRecord, align
from floodcast.metrics import kge2009

logger = logging.getLogger(__name__)

__all__ = [
    "CurationConfig",
    "BasinGeometry",
    "Verdict",
    "PairVerdict",
    "Resolution",
    "QCResult",
    "polygon_area",
    "overlap_fraction",
    "pairwise_kge",
    "classify_pair",
    "candidate_pairs",
    "evaluate_pairs",
    "resolve_duplicates",
    "flatline_ratio",
    "qc_filter",
    "curate",
]


@dataclass(frozen=True)
class CurationConfig:
    """
    Parameters
    ----------
    overlap_threshold: float
        Pairs with overlap fraction >= this value are inspected.
    duplicate_kge: float
        KGE at or above which an overlapping pair is a strict duplicate.
    discard_kge: float
        KGE below which both stations of an overlapping pair are discarded.
    min_overlap_days: int
        Minimum aligned record length for the pairwise KGE.
    retention_cutoff: datetime.date
        Observations on or after this date decide which duplicate survives.
    flatline_threshold: float
        Stations with flatline ratio >= this value are rejected.
    min_variance: float
        Stations with discharge variance below this value, (mm/d)^2, are rejected.
    """

    overlap_threshold: float = 0.7
    duplicate_kge: float = 0.95
    discard_kge: float = 0.6
    min_overlap_days: int = 365
    retention_cutoff: datetime.date = datetime.date(2016, 1, 1)
    flatline_threshold: float = 0.95
    min_variance: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.overlap_threshold <= 1:
            raise ValidationError("'overlap_threshold' must be in [0, 1].")
        if not self.discard_kge <= self.duplicate_kge:
            raise ValidationError("'discard_kge' must not exceed 'duplicate_kge'.")
        if isinstance(self.retention_cutoff, str):
            object.__setattr__(self, "retention_cutoff", datetime.date.fromisoformat(self.retention_cutoff))

    @classmethod
    def from_dict(cls, data: Mapping) -> "CurationConfig":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValidationError(f"Unknown curation options: {unknown}.")
        return cls(**dict(data))


@dataclass(frozen=True, eq=False)
class BasinGeometry:
    """
    Catchment boundary in lon/lat degrees.

    Parameters
    ----------
    station_id: str
        Station draining the catchment.
    rings: sequence of coordinate rings
        First ring is the exterior, the rest are holes. Unclosed rings are
        closed on construction.
    """

    station_id: str
    rings: Tuple[Tuple[Tuple[float, float], ...], ...]

    def __post_init__(self):
        if not self.rings:
            raise ValidationError(f"Basin '{self.station_id}' has no rings.")
        closed = []
        for ring in self.rings:
            ring = tuple((float(x), float(y)) for x, y in ring)
            if len(set(ring)) < 3:
                raise ValidationError(
                    f"Basin '{self.station_id}' has a degenerate ring (< 3 distinct points)."
                )
            if ring[0] != ring[-1]:
                ring = ring + (ring[0],)
            closed.append(ring)
        if not LinearRing(closed[0]).is_simple:
            raise ValidationError(f"Exterior ring of basin '{self.station_id}' self-intersects.")
        object.__setattr__(self, "rings", tuple(closed))

    @cached_property
    def polygon(self) -> Polygon:
        polygon = Polygon(self.rings[0], self.rings[1:])
        if not polygon.is_valid:
            raise ValidationError(
                f"Invalid geometry for basin '{self.station_id}': {explain_validity(polygon)}"
            )
        if not polygon.area > 0:
            raise ValidationError(f"Basin '{self.station_id}' has zero area.")
        return polygon

    @classmethod
    def from_shapely(cls, station_id: str, polygon: Polygon) -> "BasinGeometry":
        rings = [tuple(polygon.exterior.coords)] + [tuple(r.coords) for r in polygon.interiors]
        return cls(station_id, tuple(rings))

    def to_geojson(self) -> dict:
        return {
            "type": "Feature",
            "properties": {"station_id": self.station_id},
            "geometry": {"type": "Polygon", "coordinates": [[list(p) for p in ring] for ring in self.rings]},
        }


def polygon_area(g: BasinGeometry) -> float:
    """Planar area of the exterior minus holes, in squared degrees"""
    return float(g.polygon.area)


def overlap_fraction(a: BasinGeometry, b: BasinGeometry) -> float:
    """
    Intersection area divided by the smaller of the two basin areas.

    The intersection is an exact polygon overlay, so concave boundaries and
    holes are handled.
    """
    smaller = min(polygon_area(a), polygon_area(b))
    intersection = a.polygon.intersection(b.polygon).area
    return float(min(max(intersection / smaller, 0.0), 1.0))


def pairwise_kge(a: DailySeries, b: DailySeries, min_overlap_days: int = 365) -> Optional[float]:
    """
    KGE (2009 form) of ``b`` against ``a`` over their jointly observed days.
    Undefined if fewer than ``min_overlap_days`` days pair up or either
    aligned series is constant.
    """
    paired = align(a, b)
    if len(paired) < max(min_overlap_days, 2):
        return None
    return kge2009(paired.a, paired.b)


class Verdict(str, Enum):
    DISTINCT = "distinct"
    STRICT_DUPLICATE = "strict_duplicate"
    DISCARD_BOTH = "discard_both"
    RETAIN_BOTH_NESTED = "retain_both_nested"


@dataclass(frozen=True)
class PairVerdict:
    id_a: str
    id_b: str
    overlap_fraction: float
    kge: Optional[float]
    verdict: Verdict

    @property
    def key(self) -> Tuple[str, str]:
        return tuple(sorted((self.id_a, self.id_b)))


def classify_pair(overlap: float, kge: Optional[float], config: CurationConfig = CurationConfig()) -> Verdict:
    """
    Decision table for an inspected pair. An undefined KGE at high overlap
    discards both stations, since neither record can be certified.
    """
    if not 0 <= overlap <= 1:
        raise ValidationError(f"'overlap' must be in [0, 1], got {overlap}.")
    if overlap < config.overlap_threshold:
        return Verdict.DISTINCT
    if kge is None or np.isnan(kge):
        return Verdict.DISCARD_BOTH
    if kge >= config.duplicate_kge:
        return Verdict.STRICT_DUPLICATE
    if kge < config.discard_kge:
        return Verdict.DISCARD_BOTH
    return Verdict.RETAIN_BOTH_NESTED


def candidate_pairs(geometries: Mapping[str, BasinGeometry]) -> List[Tuple[str, str]]:
    """Pairs whose bounding boxes intersect, from an STR-tree index"""
    ids = sorted(geometries)
    if len(ids) < 2:
        return []
    polygons = [geometries[i].polygon for i in ids]
    tree = shapely.STRtree(polygons)
    left, right = tree.query(polygons)
    pairs = {(ids[i], ids[j]) for i, j in zip(left, right) if i < j}
    return sorted(pairs)


def evaluate_pairs(
    geometries: Mapping[str, BasinGeometry],
    records: Mapping[str, StationRecord],
    config: CurationConfig = CurationConfig(),
    threads: int = 1,
) -> List[PairVerdict]:
    """
    Overlap, KGE and verdict for every bounding-box candidate pair whose
    stations both have records. KGE is computed only for pairs at or above
    the overlap threshold.
    """

    def judge(pair):
        id_a, id_b = pair
        overlap = overlap_fraction(geometries[id_a], geometries[id_b])
        kge = None
        if overlap >= config.overlap_threshold:
            kge = pairwise_kge(records[id_a].discharge, records[id_b].discharge, config.min_overlap_days)
        return PairVerdict(id_a, id_b, overlap, kge, classify_pair(overlap, kge, config))

    pairs = [p for p in candidate_pairs(geometries) if p[0] in records and p[1] in records]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            verdicts = list(pool.map(judge, pairs))
    else:
        verdicts = [judge(p) for p in pairs]
    flagged = sum(v.verdict != Verdict.DISTINCT for v in verdicts)
    logger.info("Evaluated %d candidate pairs, %d at or above overlap %.2f", len(verdicts), flagged, config.overlap_threshold)
    return verdicts


@dataclass
class RemovalEntry:
    station_id: str
    reason: str
    related: str = ""


@dataclass
class Resolution:
    retained: List[str]
    removed: List[RemovalEntry]
    conflicts: List[RemovalEntry] = field(default_factory=list)
    survivors: Dict[str, List[str]] = field(default_factory=dict)

    @property
    def removed_ids(self) -> List[str]:
        return sorted({entry.station_id for entry in self.removed})


def _observations_since(series: DailySeries, cutoff: datetime.date) -> int:
    if series.end_date < cutoff:
        return 0
    return series.slice(max(cutoff, series.start_date), series.end_date).n_valid


def resolve_duplicates(
    verdicts: Sequence[PairVerdict],
    records: Mapping[str, StationRecord],
    retention_cutoff: datetime.date = datetime.date(2016, 1, 1),
) -> Resolution:
    """
    Reduce pair verdicts to a retained station set.

    Strict-duplicate pairs are merged into connected components and each
    component keeps one station: the one with most observations on or after
    ``retention_cutoff``, ties going to the smallest station id. Discard-both
    pairs remove both stations, except survivors of a duplicate component,
    which are kept and logged as conflicts.
    """
    seen = set()
    for v in verdicts:
        if v.key in seen:
            raise ValidationError(f"Pair {v.key} is listed twice.")
        seen.add(v.key)

    ids = sorted(records)
    index = {station_id: i for i, station_id in enumerate(ids)}
    duplicates = [v for v in verdicts if v.verdict == Verdict.STRICT_DUPLICATE]
    rows = [index[v.id_a] for v in duplicates]
    cols = [index[v.id_b] for v in duplicates]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
    _, labels = connected_components(graph, directed=False)

    components: Dict[int, List[str]] = {}
    for station_id in ids:
        components.setdefault(labels[index[station_id]], []).append(station_id)

    removed: Dict[str, RemovalEntry] = {}
    survivors: Dict[str, List[str]] = {}
    for members in components.values():
        if len(members) < 2:
            continue
        survivor = min(
            members,
            key=lambda s: (-_observations_since(records[s].discharge, retention_cutoff), s),
        )
        survivors[survivor] = sorted(m for m in members if m != survivor)
        for member in survivors[survivor]:
            removed[member] = RemovalEntry(member, Verdict.STRICT_DUPLICATE.value, survivor)

    conflicts = []
    for v in verdicts:
        if v.verdict != Verdict.DISCARD_BOTH:
            continue
        for station_id, partner in ((v.id_a, v.id_b), (v.id_b, v.id_a)):
            if station_id in survivors:
                conflicts.append(RemovalEntry(station_id, "discard_conflict", partner))
                logger.warning(
                    "Station %s survives a duplicate component but disagrees with %s; kept for manual review",
                    station_id,
                    partner,
                )
            elif station_id not in removed:
                removed[station_id] = RemovalEntry(station_id, Verdict.DISCARD_BOTH.value, partner)

    retained = [s for s in ids if s not in removed]
    logger.info("Deduplication keeps %d of %d stations", len(retained), len(ids))
    return Resolution(
        retained=retained,
        removed=[removed[s] for s in sorted(removed)],
        conflicts=conflicts,
        survivors=survivors,
    )


def flatline_ratio(s: DailySeries) -> Optional[float]:
    """
    Fraction of consecutive-day pairs, both observed, whose values are
    exactly equal. Undefined with fewer than two observed values or no
    observed consecutive pair.
    """
    if s.n_valid < 2:
        return None
    values = s.values
    both = ~(np.isnan(values[1:]) | np.isnan(values[:-1]))
    if not both.any():
        return None
    same = np.diff(values)[both] == 0
    return float(same.mean())


@dataclass
class QCResult:
    retained: List[str]
    rejections: Dict[str, List[Tuple[str, Optional[float]]]]


def qc_filter(records: Iterable[StationRecord], config: CurationConfig = CurationConfig()) -> QCResult:
    """
    Reject stations with a high flatline ratio or near-zero variance.

    Returns
    -------
    QCResult
        Retained ids and, per rejected station, a list of
        ``(reason, value)`` with reason in ``flatline``, ``low_variance``,
        ``insufficient_data``.
    """
    retained, rejections = [], {}
    for record in sorted(records, key=lambda r: r.station_id):
        reasons = []
        ratio = flatline_ratio(record.discharge)
        observed = record.discharge.values[~record.discharge.missing]
        if ratio is None:
            reasons.append(("insufficient_data", float(observed.size)))
        elif ratio >= config.flatline_threshold:
            reasons.append(("flatline", ratio))
        if observed.size >= 2:
            variance = float(observed.var())
            if variance < config.min_variance:
                reasons.append(("low_variance", variance))
        if reasons:
            rejections[record.station_id] = reasons
            logger.info("QC rejects %s: %s", record.station_id, ", ".join(r for r, _ in reasons))
        else:
            retained.append(record.station_id)
    return QCResult(retained, rejections)


@dataclass
class CurationResult:
    retained: List[str]
    verdicts: List[PairVerdict]
    resolution: Resolution
    qc: QCResult


def curate(
    records: Mapping[str, StationRecord],
    geometries: Mapping[str, BasinGeometry],
    config: CurationConfig = CurationConfig(),
    threads: int = 1,
) -> CurationResult:
    """Deduplicate, then quality-control the surviving stations"""
    without_geometry = sorted(set(records) - set(geometries))
    if without_geometry:
        logger.warning("No basin polygon for %d stations; they skip deduplication", len(without_geometry))
    verdicts = evaluate_pairs(geometries, records, config, threads)
    resolution = resolve_duplicates(verdicts, records, config.retention_cutoff)
    qc = qc_filter([records[s] for s in resolution.retained], config)
    return CurationResult(qc.retained, verdicts, resolution, qc)
