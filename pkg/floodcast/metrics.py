"""
Deterministic skill scores and distribution-shift diagnostics.

All statistics use population (1/N) moments. Scores that cannot be computed
(constant observations, zero means, empty samples) are returned as ``None``
rather than as sentinel numbers.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from floodcast.errors import ValidationError
from floodcast.hydrodata import DailySeries, align

logger = logging.getLogger(__name__)

__all__ = [
    "SkillReport",
    "WassersteinReport",
    "Components",
    "nse",
    "decompose",
    "kge2009",
    "kge_prime",
    "skill_report",
    "wet_day_filter",
    "w1_distance",
    "normalized_w1",
    "summarize",
    "ecdf",
]

WET_DAY_THRESHOLD_MM = 1.0
SKILL_METRICS = ("nse", "kge2009", "kge_prime", "r", "alpha", "beta", "gamma")


def _paired(obs, sim) -> Tuple[np.ndarray, np.ndarray]:
    obs = np.asarray(obs, dtype=np.float64).ravel()
    sim = np.asarray(sim, dtype=np.float64).ravel()
    if obs.shape != sim.shape:
        raise ValidationError(f"'obs' and 'sim' must have equal length, got {obs.size} and {sim.size}.")
    keep = ~(np.isnan(obs) | np.isnan(sim))
    return obs[keep], sim[keep]


def _variance(x: np.ndarray) -> float:
    # exactly zero for constant input; the two-pass sum leaves rounding residue
    if np.ptp(x) == 0:
        return 0.0
    return float(np.mean((x - x.mean()) ** 2))


class Components(NamedTuple):
    r: Optional[float]
    alpha: Optional[float]
    beta: Optional[float]
    gamma: Optional[float]


@dataclass(frozen=True)
class SkillReport:
    nse: Optional[float]
    kge2009: Optional[float]
    kge_prime: Optional[float]
    r: Optional[float]
    alpha: Optional[float]
    beta: Optional[float]
    gamma: Optional[float]
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def nse(obs, sim) -> Optional[float]:
    """
    Nash-Sutcliffe efficiency, ``1 - sum((sim-obs)^2) / sum((obs-mean(obs))^2)``.
    Undefined for fewer than two pairs or constant observations.
    """
    obs, sim = _paired(obs, sim)
    if obs.size < 2:
        return None
    if _variance(obs) == 0:
        return None
    denominator = np.sum((obs - obs.mean()) ** 2)
    return float(1.0 - np.sum((sim - obs) ** 2) / denominator)


def decompose(obs, sim) -> Components:
    """
    Correlation, variability ratio (std), bias ratio (mean) and
    variability ratio (coefficient of variation) of ``sim`` against ``obs``.
    Components with a zero denominator are None.
    """
    obs, sim = _paired(obs, sim)
    if obs.size < 2:
        return Components(None, None, None, None)
    mu_obs, mu_sim = obs.mean(), sim.mean()
    var_obs = _variance(obs)
    var_sim = _variance(sim)

    r = None
    if var_obs > 0 and var_sim > 0:
        cov = np.mean((obs - mu_obs) * (sim - mu_sim))
        r = float(np.clip(cov / np.sqrt(var_obs * var_sim), -1.0, 1.0))
    alpha = float(np.sqrt(var_sim / var_obs)) if var_obs > 0 else None
    beta = float(mu_sim / mu_obs) if mu_obs != 0 else None
    gamma = None
    if mu_obs != 0 and mu_sim != 0 and var_obs > 0:
        gamma = float((np.sqrt(var_sim) / mu_sim) / (np.sqrt(var_obs) / mu_obs))
    return Components(r, alpha, beta, gamma)


def _euclidean_score(*components) -> Optional[float]:
    if any(c is None for c in components):
        return None
    return float(1.0 - np.sqrt(sum((c - 1.0) ** 2 for c in components)))


def kge2009(obs, sim) -> Optional[float]:
    """Kling-Gupta efficiency built from r, alpha (std ratio) and beta"""
    r, alpha, beta, _ = decompose(obs, sim)
    return _euclidean_score(r, alpha, beta)


def kge_prime(obs, sim) -> Optional[float]:
    """Modified Kling-Gupta efficiency built from r, beta and gamma (CV ratio)"""
    r, _, beta, gamma = decompose(obs, sim)
    return _euclidean_score(r, beta, gamma)


def skill_report(obs, sim) -> SkillReport:
    obs, sim = _paired(obs, sim)
    r, alpha, beta, gamma = decompose(obs, sim)
    return SkillReport(
        nse=nse(obs, sim),
        kge2009=_euclidean_score(r, alpha, beta),
        kge_prime=_euclidean_score(r, beta, gamma),
        r=r,
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        n=int(obs.size),
    )


def series_skill(obs: DailySeries, sim: DailySeries) -> SkillReport:
    """Skill over the dates where both series are present"""
    paired = align(obs, sim)
    return skill_report(paired.a, paired.b)


def wet_day_filter(p, threshold: float = WET_DAY_THRESHOLD_MM) -> np.ndarray:
    """Keep values strictly above ``threshold`` (mm), dropping missing ones"""
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[~np.isnan(p)]
    if (p < 0).any():
        raise ValidationError("Precipitation must be non-negative.")
    return p[p > threshold]


def w1_distance(a, b) -> Optional[float]:
    """
    Wasserstein-1 distance between two empirical distributions, i.e. the
    integral over u in [0, 1] of the absolute difference of their quantile
    functions. Samples may have different sizes. Undefined if either is empty.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        return None
    if np.isnan(a).any() or np.isnan(b).any():
        raise ValidationError("w1_distance inputs must not contain missing values.")
    return float(stats.wasserstein_distance(a, b))


@dataclass(frozen=True)
class WassersteinReport:
    w1_raw: Optional[float]
    w1_normalized: Optional[float]
    wet_day_counts: Tuple[int, int]
    reference_mean: Optional[float]

    @property
    def defined(self) -> bool:
        return self.w1_normalized is not None

    def to_dict(self) -> dict:
        return {
            "w1_raw": self.w1_raw,
            "w1_normalized": self.w1_normalized,
            "wet_days_reference": self.wet_day_counts[0],
            "wet_days_forecast": self.wet_day_counts[1],
            "reference_mean": self.reference_mean,
        }


def normalized_w1(
    era5_tp: DailySeries,
    ifs_tp: DailySeries,
    paired: bool = False,
    threshold: float = WET_DAY_THRESHOLD_MM,
) -> WassersteinReport:
    """
    Wet-day W1 between reference (reanalysis) and forecast precipitation,
    normalized by the reference wet-day mean.

    Parameters
    ----------
    era5_tp, ifs_tp: DailySeries
        Daily precipitation. Only the common, jointly observed dates are used.
    paired: bool
        False (default): each product keeps its own wet days. True: only days
        wet in both products are kept.
    threshold: float
        Wet-day threshold in mm, exclusive.
    """
    common = align(era5_tp, ifs_tp)
    if paired:
        both = (common.a > threshold) & (common.b > threshold)
        wet_ref, wet_fc = common.a[both], common.b[both]
    else:
        wet_ref = wet_day_filter(common.a, threshold)
        wet_fc = wet_day_filter(common.b, threshold)
    counts = (int(wet_ref.size), int(wet_fc.size))
    if wet_ref.size == 0:
        return WassersteinReport(None, None, counts, None)
    reference_mean = float(wet_ref.mean())
    raw = w1_distance(wet_ref, wet_fc)
    if raw is None:
        return WassersteinReport(None, None, counts, reference_mean)
    return WassersteinReport(raw, raw / reference_mean, counts, reference_mean)


def _defined(values: Iterable[Optional[float]]) -> np.ndarray:
    return np.array([v for v in values if v is not None and not np.isnan(v)], dtype=np.float64)


def summarize(
    values: Iterable[Optional[float]], quantiles: Sequence[float] = (0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95)
) -> Dict[str, Optional[float]]:
    """Median, mean and quantiles of the defined values"""
    values = list(values)
    defined = _defined(values)
    summary = {"count": int(defined.size), "undefined": len(values) - int(defined.size)}
    if defined.size == 0:
        summary.update({"median": None, "mean": None, "min": None, "max": None})
        summary.update({f"q{int(round(q * 100)):02d}": None for q in quantiles})
        return summary
    summary.update(
        {
            "median": float(np.median(defined)),
            "mean": float(defined.mean()),
            "min": float(defined.min()),
            "max": float(defined.max()),
        }
    )
    for q in quantiles:
        summary[f"q{int(round(q * 100)):02d}"] = float(np.quantile(defined, q))
    return summary


def ecdf(values: Iterable[Optional[float]]) -> Tuple[np.ndarray, np.ndarray]:
    """Empirical CDF of the defined values as (sorted values, probabilities)"""
    defined = np.sort(_defined(values))
    return defined, np.arange(1, defined.size + 1) / max(defined.size, 1)
