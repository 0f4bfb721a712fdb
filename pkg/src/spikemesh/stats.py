"""Spike-train statistics and the distribution-comparison protocol.

Single-neuron statistics (rate, interval irregularity) and pairwise
binned-count correlations are reduced to per-population distributions;
two simulations are then compared by the earth mover's distance between
matching distributions, judged against the spread seen between repeat
runs of the reference itself.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import wasserstein_distance

from .core import RngStream
from .dynamics import Raster

STATISTIC_NAMES = ("rate", "cv_isi", "correlation")


def firing_rates(raster: Raster, gids: np.ndarray, t_start_ms: float,
                 t_stop_ms: float) -> np.ndarray:
    """Mean rate in Hz per requested gid over [t_start, t_stop).

    Neurons without spikes count as 0 Hz; the result aligns with ``gids``.
    """
    gids = np.asarray(gids, dtype=np.int64)
    if t_stop_ms <= t_start_ms:
        raise ValueError("need t_stop_ms > t_start_ms")
    ev = _window(raster, t_start_ms, t_stop_ms)
    order = np.argsort(gids, kind="stable")
    sorted_gids = gids[order]
    at = np.searchsorted(sorted_gids, ev[:, 1])
    at[at == len(gids)] = 0
    hit = sorted_gids[at] == ev[:, 1] if len(gids) else np.zeros(len(ev), bool)
    counts = np.bincount(at[hit], minlength=len(gids))
    rates = np.zeros(len(gids), dtype=np.float64)
    rates[order] = counts * 1000.0 / (t_stop_ms - t_start_ms)
    return rates


def cv_isi(raster: Raster, gids: np.ndarray, t_start_ms: float,
           t_stop_ms: float) -> np.ndarray:
    """Coefficient of variation of inter-spike intervals per gid.

    Needs at least three spikes (two intervals); neurons below that come
    back NaN so callers can drop them without losing alignment.
    """
    gids = np.asarray(gids, dtype=np.int64)
    ev = _window(raster, t_start_ms, t_stop_ms)
    out = np.full(len(gids), np.nan, dtype=np.float64)
    by_gid: dict[int, list[int]] = {}
    for step, gid in ev:
        by_gid.setdefault(int(gid), []).append(int(step))
    for i, gid in enumerate(gids):
        steps = by_gid.get(int(gid))
        if steps is None or len(steps) < 3:
            continue
        isi = np.diff(np.asarray(steps, dtype=np.float64))
        mean = isi.mean()
        if mean > 0:
            out[i] = isi.std(ddof=0) / mean
    return out


def binned_counts(raster: Raster, gids: np.ndarray, t_start_ms: float,
                  t_stop_ms: float, bin_ms: float) -> np.ndarray:
    """(len(gids), n_bins) spike-count matrix over the window."""
    gids = np.asarray(gids, dtype=np.int64)
    if bin_ms <= 0:
        raise ValueError("bin_ms must be positive")
    n_bins = int(np.floor((t_stop_ms - t_start_ms) / bin_ms))
    if n_bins < 1:
        raise ValueError("window shorter than one bin")
    ev = _window(raster, t_start_ms, t_start_ms + n_bins * bin_ms)
    counts = np.zeros((len(gids), n_bins), dtype=np.float64)
    gid_to_row = {int(g): i for i, g in enumerate(gids)}
    res = raster.resolution_ms
    for step, gid in ev:
        row = gid_to_row.get(int(gid))
        if row is None:
            continue
        b = int((step * res - t_start_ms) / bin_ms)
        counts[row, min(b, n_bins - 1)] += 1.0
    return counts


def pearson_correlations(raster: Raster, gids: np.ndarray, t_start_ms: float,
                         t_stop_ms: float, bin_ms: float = 2.0,
                         subset: int = 200, seed: int = 0,
                         label: str = "") -> np.ndarray:
    """Pairwise correlation coefficients of binned counts.

    At most ``subset`` neurons take part, drawn reproducibly from ``gids``
    by (seed, label); pairs where either train has zero variance are
    excluded.  Returns the flat upper-triangle values.
    """
    gids = np.asarray(gids, dtype=np.int64)
    if len(gids) > subset:
        stream = RngStream(seed, ("corr_subset", label))
        picked = np.sort(stream.choice_no_replace(len(gids), subset))
        gids = gids[picked]
    counts = binned_counts(raster, gids, t_start_ms, t_stop_ms, bin_ms)
    live = counts.std(axis=1) > 0
    counts = counts[live]
    n = counts.shape[0]
    if n < 2:
        return np.empty(0, dtype=np.float64)
    corr = np.corrcoef(counts)
    iu = np.triu_indices(n, k=1)
    return corr[iu]


def emd(a, b) -> float:
    """Earth mover's distance between two 1-D sample sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("earth mover's distance needs non-empty samples")
    return float(wasserstein_distance(a, b))


def population_statistics(raster: Raster, gids: np.ndarray, t_start_ms: float,
                          t_stop_ms: float, seed: int = 0,
                          label: str = "") -> dict[str, np.ndarray]:
    """The three per-population distributions used by the protocol."""
    cvs = cv_isi(raster, gids, t_start_ms, t_stop_ms)
    return {
        "rate": firing_rates(raster, gids, t_start_ms, t_stop_ms),
        "cv_isi": cvs[~np.isnan(cvs)],
        "correlation": pearson_correlations(
            raster, gids, t_start_ms, t_stop_ms, seed=seed, label=label
        ),
    }


def _window(raster: Raster, t_start_ms: float, t_stop_ms: float) -> np.ndarray:
    steps = raster.events[:, 0] * raster.resolution_ms
    keep = (steps >= t_start_ms) & (steps < t_stop_ms)
    return raster.events[keep]


# ---------------------------------------------------------------------------
# The comparison protocol.
# ---------------------------------------------------------------------------

@dataclass
class StatComparison:
    """One (population, statistic) row of a validation report."""

    population: str
    statistic: str
    within_emds: list
    cross_emds: list
    lower: float
    upper: float
    median_cross: float
    compatible: bool


@dataclass
class ValidationReport:
    comparisons: list
    population_verdicts: dict
    all_compatible: bool

    def to_json(self) -> str:
        payload = {
            "comparisons": [asdict(c) for c in self.comparisons],
            "population_verdicts": self.population_verdicts,
            "all_compatible": self.all_compatible,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def _emd_or_nan(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 or len(b) == 0:
        return float("nan")
    return emd(a, b)


def validate_runs(set_a: list, set_a_prime: list, set_b: list) -> ValidationReport:
    """Judge whether run set B is statistically compatible with set A.

    Every entry is one run's statistics: {population: {statistic: values}}.
    For each (population, statistic), run i contributes one within-pair
    distance (A_i against the repeat A'_i) and one cross distance (A_i
    against B_i).  B passes when the median cross distance falls inside
    the Tukey fence [Q1 - 1.5 IQR, Q3 + 1.5 IQR] of the within distances.
    A single run per set is rejected: the fence needs a spread.
    """
    n = len(set_a)
    if not (len(set_a_prime) == len(set_b) == n):
        raise ValueError("all three run sets must have the same length")
    if n < 2:
        raise ValueError(f"need at least 2 runs per set, got {n}")
    populations = list(set_a[0])
    comparisons: list[StatComparison] = []
    verdicts: dict[str, bool] = {}
    for pop in populations:
        pop_ok = True
        for stat in STATISTIC_NAMES:
            within = [
                _emd_or_nan(set_a[i][pop][stat], set_a_prime[i][pop][stat])
                for i in range(n)
            ]
            cross = [
                _emd_or_nan(set_a[i][pop][stat], set_b[i][pop][stat])
                for i in range(n)
            ]
            w = np.asarray(within, dtype=np.float64)
            c = np.asarray(cross, dtype=np.float64)
            if np.isnan(w).any() or np.isnan(c).any():
                lower = upper = med = float("nan")
                ok = False
            else:
                q1, q3 = np.percentile(w, [25.0, 75.0])
                iqr = q3 - q1
                lower, upper = q1 - 1.5 * iqr, q3 + 1.5 * iqr
                med = float(np.median(c))
                ok = bool(lower <= med <= upper)
            comparisons.append(StatComparison(pop, stat, within, cross,
                                              float(lower), float(upper),
                                              med, ok))
            pop_ok = pop_ok and ok
        verdicts[pop] = pop_ok
    return ValidationReport(comparisons, verdicts,
                            all(verdicts.values()) if verdicts else False)
