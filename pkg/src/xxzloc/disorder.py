"""Reproducible Monte Carlo over disorder realisations.

Each sample ``i`` draws its field from a Philox generator keyed by
``(seed, i)``; the value at a site depends only on ``(seed, i, site)``, so the
draw is unchanged by sharding across workers or by sampling a larger region.
Per-sample results are collected in sample order and reduced with
compensated summation, which makes every estimate independent of the worker
count.
"""
from __future__ import annotations

import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .lattice import INFINITE, PreconditionError, Region, cluster_counts, deform_region, enumerate_configs, rho
from .operators import (DisorderRealization, ModelParams, P_minus, P_plus, Q_le_k, build_decoupled,
                        build_hamiltonian, compress, diagonalize, energy_interval)
from .probes import DecayProfile, SectorSolver, borel_theta, dressed_resolvent_block, fit_decay

__all__ = [
    "DistributionSpec",
    "sample_omega",
    "omega_matrix",
    "MCEstimate",
    "reduce_samples",
    "run_samples",
    "frac_moment_scan",
    "event_probability",
    "single_config_probability",
    "WegnerTable",
    "wegner_scan",
    "dynloc_expectation",
    "MAX_EVENT_CONFIGS",
]

MAX_EVENT_CONFIGS = 10 ** 6
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class DistributionSpec:
    """Single-site law of the random field.

    ``uniform01`` or ``custom_density`` given by a piecewise-linear density on
    knots ``xs`` (from 0 to 1) with values ``ps``; it is normalised here and
    sampled by an exact inverse CDF.
    """

    id: str = "uniform01"
    xs: tuple = ()
    ps: tuple = ()
    _cdf: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.id == "uniform01":
            return
        if self.id != "custom_density":
            raise PreconditionError(f"unknown distribution {self.id!r}")
        xs, ps = np.asarray(self.xs, float), np.asarray(self.ps, float)
        if xs.ndim != 1 or xs.shape != ps.shape or len(xs) < 2:
            raise PreconditionError("density table needs matching knots and values (at least two)")
        if not np.all(np.isfinite(ps)) or np.any(ps < 0):
            raise PreconditionError("density must be finite and non-negative")
        if np.any(np.diff(xs) <= 0):
            raise PreconditionError("density knots must be strictly increasing")
        if xs[0] != 0.0 or xs[-1] != 1.0:
            raise PreconditionError("density knots must span exactly [0, 1] (support inside [0, 1])")
        # 0 and 1 must be in the closed support: the density may not vanish on a whole end segment
        if ps[0] == 0 and ps[1] == 0 or ps[-1] == 0 and ps[-2] == 0:
            raise PreconditionError("support must contain both 0 and 1")
        seg = 0.5 * (ps[1:] + ps[:-1]) * np.diff(xs)
        total = seg.sum()
        if total <= 0:
            raise PreconditionError("density integrates to zero")
        object.__setattr__(self, "xs", tuple(xs.tolist()))
        object.__setattr__(self, "ps", tuple((ps / total).tolist()))
        object.__setattr__(self, "_cdf", np.concatenate([[0.0], np.cumsum(seg / total)]))

    @property
    def mean(self) -> float:
        if self.id == "uniform01":
            return 0.5
        xs, ps = np.asarray(self.xs), np.asarray(self.ps)
        x0, x1, p0, p1 = xs[:-1], xs[1:], ps[:-1], ps[1:]
        h = x1 - x0
        # integral of x * (linear density) over each segment
        return float(np.sum(h * (p0 * (2 * x0 + x1) + p1 * (x0 + 2 * x1)) / 6.0))

    @property
    def max_density(self) -> float:
        return 1.0 if self.id == "uniform01" else float(max(self.ps))

    def ppf(self, u) -> np.ndarray:
        """Inverse CDF applied to uniforms ``u`` in [0, 1)."""
        u = np.asarray(u, dtype=float)
        if self.id == "uniform01":
            return u
        xs, ps, cdf = np.asarray(self.xs), np.asarray(self.ps), self._cdf
        j = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(xs) - 2)
        x0, h = xs[j], xs[j + 1] - xs[j]
        p0, slope = ps[j], (ps[j + 1] - ps[j]) / h
        c = u - cdf[j]
        # solve p0 t + slope t^2 / 2 = c for t in [0, h]
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = np.sqrt(np.maximum(p0 * p0 + 2 * slope * c, 0.0))
            t_quad = 2 * c / (p0 + disc)
            t_lin = np.where(p0 > 0, c / p0, 0.0)
        t = np.where(np.abs(slope) > 0, t_quad, t_lin)
        return np.clip(x0 + np.nan_to_num(t), 0.0, 1.0)

    def cdf(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        if self.id == "uniform01":
            return x
        xs, ps, cdf = np.asarray(self.xs), np.asarray(self.ps), self._cdf
        j = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
        t = x - xs[j]
        slope = (ps[j + 1] - ps[j]) / (xs[j + 1] - xs[j])
        return cdf[j] + ps[j] * t + 0.5 * slope * t * t

    def to_dict(self) -> dict:
        d = {"id": self.id}
        if self.id == "custom_density":
            d.update(xs=list(self.xs), ps=list(self.ps))
        return d


def _zigzag(sites: np.ndarray) -> np.ndarray:
    sites = np.asarray(sites, dtype=np.int64)
    return np.where(sites >= 0, 2 * sites, -2 * sites - 1)


def _uniforms(seed: int, stream: int, positions: np.ndarray) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)))
    top = int(positions.max()) + 1 if positions.size else 0
    return gen.random(top)[positions]


def sample_omega(lam: Region, dist: DistributionSpec | None = None, seed: int = 0,
                 stream_index: int = 0) -> DisorderRealization:
    """i.i.d. field on ``lam``; the value at a site depends only on ``(seed, stream_index, site)``."""
    dist = dist or DistributionSpec()
    pos = _zigzag(np.asarray(lam.sites))
    vals = dist.ppf(_uniforms(int(seed), int(stream_index), pos))
    return DisorderRealization(dict(zip(lam.sites, vals.tolist())), seed=(int(seed), int(stream_index)),
                               distribution_id=dist.id)


def omega_matrix(lam: Region, dist: DistributionSpec | None, seed: int, streams: Sequence[int]) -> np.ndarray:
    """Rows are ``sample_omega(lam, dist, seed, s)`` values in site order for each stream."""
    dist = dist or DistributionSpec()
    pos = _zigzag(np.asarray(lam.sites))
    out = np.empty((len(streams), len(lam)))
    for row, s in enumerate(streams):
        out[row] = _uniforms(int(seed), int(s), pos)
    return dist.ppf(out)


@dataclass(frozen=True)
class MCEstimate:
    """Sample mean with standard error ``std / sqrt(n)`` and the number of flagged samples."""

    mean: float
    standard_error: float
    n_samples: int
    seed: int
    flagged_sample_count: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise PreconditionError("an estimate needs at least one sample")

    def ci(self, z: float = 1.96) -> tuple[float, float]:
        return self.mean - z * self.standard_error, self.mean + z * self.standard_error


def reduce_samples(values: Sequence[float], seed: int, flagged: int = 0) -> MCEstimate:
    """Compensated-sum mean and standard error."""
    vals = [float(v) for v in values]
    n = len(vals)
    if n < 1:
        raise PreconditionError("no samples")
    mean = math.fsum(vals) / n
    var = math.fsum((v - mean) ** 2 for v in vals) / (n - 1) if n > 1 else 0.0
    return MCEstimate(mean, math.sqrt(var / n), n, int(seed), int(flagged))


def run_samples(fn: Callable[[int], object], n_samples: int, workers: int = 1, chunksize: int | None = None) -> list:
    """``[fn(0), ..., fn(n_samples - 1)]``, optionally on a process pool (order preserved)."""
    if workers is None or workers <= 1 or n_samples < 2:
        return [fn(i) for i in range(n_samples)]
    chunksize = chunksize or max(1, n_samples // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, range(n_samples), chunksize=chunksize))


# ---------------------------------------------------------------------------
# fractional moments


def _fracmom_sample(i, lam, params, A, Bs, E, s, dressing, k, sectors, dist, seed):
    om = sample_omega(lam, dist, seed, i)
    H = build_hamiltonian(lam, params, om, "H")
    solver = None
    vals, flags = [], 0
    for B in Bs:
        if B is None:
            vals.append(0.0)
            continue
        if dressing == "plain":
            left, right = (P_minus(A),), (P_plus(B),)
        else:
            left, right = (Q_le_k(k), P_minus(A)), (P_plus(B), Q_le_k(k))
        if solver is None:
            solver = SectorSolver(H, E, sectors)
        blk = dressed_resolvent_block(H, E, left, right, solver=solver, sectors=sectors)
        flags += blk.near_singular
        norm = blk.operator_norm if dressing == "plain" else blk.hs_norm
        vals.append(norm ** s)
    return vals, flags


def frac_moment_scan(lam: Region, params: ModelParams, A, r_list: Sequence[int], n_samples: int, seed: int, *,
                     E: float = 0.4, s: float = 0.3, k: int = 1, dressing: str = "plain", N: int | None = None,
                     dist: DistributionSpec | None = None, workers: int = 1,
                     fit: bool = True) -> tuple[DecayProfile | None, list[MCEstimate]]:
    """MC mean of ``||P_-^A R_E P_+^{[A]_r}||^s`` for each ``r`` (or the ``Q``-dressed HS norm).

    Parameters
    ----------
    dressing : {"plain", "hs_Q"}
        ``plain`` uses the operator norm of ``P_-^A R_E P_+^B``; ``hs_Q`` the
        Hilbert-Schmidt norm of ``Q_{<=k} P_-^A R_E P_+^B Q_{<=k}``.
    N : int, optional
        Restrict to the ``N``-particle sector (a ``chi_N`` dressing).

    Returns
    -------
    (profile, estimates)
        ``profile`` is ``None`` when ``fit`` is false.  Rows whose geometry
        gives ``rho(A, B) = INFINITE`` are exactly 0 and carry no flags.
    """
    if not 0 < s < 1:
        raise PreconditionError("s must lie in (0, 1)")
    if dressing not in ("plain", "hs_Q"):
        raise PreconditionError(f"unknown dressing {dressing!r}")
    A = lam.require_subset(A, "A")
    Bs = []
    for r in r_list:
        B = deform_region(lam, A, r)
        Bs.append(None if rho(lam, A, B) is INFINITE else B)
    sectors = None if N is None else [int(N)]
    fn = functools.partial(_fracmom_sample, lam=lam, params=params, A=A, Bs=Bs, E=float(E), s=float(s),
                           dressing=dressing, k=k, sectors=sectors, dist=dist, seed=seed)
    res = run_samples(fn, n_samples, workers)
    flags = sum(f for _, f in res)
    mat = np.array([v for v, _ in res])
    ests = [reduce_samples(mat[:, j], seed, flags if Bs[j] is not None else 0) for j in range(len(r_list))]
    prof = None
    if fit:
        prof = fit_decay([(r, e.mean) for r, e in zip(r_list, ests)], floor=0.0,
                         stderr=[e.standard_error for e in ests])
    return prof, ests


# ---------------------------------------------------------------------------
# large deviations


def _event_configs(lam: Region, k: int, N: int) -> np.ndarray:
    cfgs = enumerate_configs(lam, N, k)
    masks = np.array([c.mask for c in cfgs], dtype=np.uint64)
    if masks.size:
        masks = masks[cluster_counts(lam, masks) == k]
    if len(masks) > MAX_EVENT_CONFIGS:
        raise PreconditionError(f"{len(masks)} configurations exceed the enumeration guard {MAX_EVENT_CONFIGS}")
    bits = (masks[:, None] >> np.arange(len(lam), dtype=np.uint64)[None, :]) & np.uint64(1)
    return bits.astype(float)


def event_probability(lam: Region, k: int, N: int, params: ModelParams, n_samples: int, seed: int, *,
                      dist: DistributionSpec | None = None, batch: int = 4096) -> MCEstimate:
    """MC probability that some ``N``-site, ``k``-cluster ``M`` has ``lam * omega(M) < k (1 - 1/delta)``."""
    if not 1 <= N <= len(lam):
        raise PreconditionError(f"N must lie in [1, {len(lam)}]")
    if k < 1:
        raise PreconditionError("k must be >= 1")
    occ = _event_configs(lam, k, N)
    thr = k * params.gap
    hits = []
    for start in range(0, n_samples, batch):
        streams = range(start, min(n_samples, start + batch))
        om = omega_matrix(lam, dist, seed, streams)
        if occ.shape[0] == 0:
            hits.extend([0.0] * len(om))
            continue
        sums = occ @ om.T
        hits.extend((params.lam * sums < thr).any(axis=0).astype(float).tolist())
    return reduce_samples(hits, seed)


def single_config_probability(c: float, n: int = 2) -> float:
    """``P(omega_1 + ... + omega_n < c)`` for uniform fields with ``0 <= c <= 1`` (``c^n / n!``)."""
    if not 0 <= c <= 1:
        raise PreconditionError("closed form holds for 0 <= c <= 1")
    return c ** n / math.factorial(n)


# ---------------------------------------------------------------------------
# Wegner scans


@dataclass(frozen=True)
class WegnerTable:
    """Probabilities of spectrum in ``(center - w/2, center + w/2)`` per ``(width, lambda)``."""

    center: float
    widths: tuple
    lambdas: tuple
    estimates: dict
    slopes: dict
    r_squared: dict

    def rows(self) -> list[tuple]:
        return [(w, l, self.estimates[(w, l)].mean, self.estimates[(w, l)].standard_error)
                for l in self.lambdas for w in self.widths]

    @property
    def slope_ratio(self) -> float:
        a, b = self.lambdas[0], self.lambdas[-1]
        if self.slopes[a] == 0:
            return math.nan
        return self.slopes[b] / self.slopes[a]


def _wegner_sample(i, lam, K, delta, lambdas, center, widths, dist, seed):
    om = sample_omega(lam, dist, seed, i)
    out = []
    for l in lambdas:
        p = ModelParams(delta, l)
        if len(K) == len(lam):
            hkk = build_hamiltonian(lam, p, om, "H")
        else:
            hkk, _ = build_decoupled(lam, K, p, om)
        ev = compress(hkk, P_minus(K)).eigenvalues()
        for w in widths:
            lo, hi = center - w / 2, center + w / 2
            out.append(float(np.any((ev > lo) & (ev < hi))) if w > 0 else 0.0)
    return out


def wegner_scan(lam: Region, K, k: int, center: float, widths: Sequence[float], lambdas: Sequence[float],
                n_samples: int, seed: int, *, delta: float = 2.0, dist: DistributionSpec | None = None,
                workers: int = 1) -> WegnerTable:
    """Probability that the ``P_-^K``-compressed decoupled operator has spectrum in each open window.

    The same realisations are reused for every width and ``lambda``, so the
    events are nested in the width and the comparison across ``lambda`` is paired.
    """
    K = lam.require_subset(K, "K")
    if not K:
        raise PreconditionError("K must be non-empty")
    band = energy_interval("I_k", k, delta)
    for w in widths:
        if w < 0:
            raise PreconditionError("widths must be non-negative")
        if w > 0 and not (center - w / 2 >= band.lo and center + w / 2 <= band.hi):
            raise PreconditionError(f"window of width {w} around {center} escapes I_k = [{band.lo}, {band.hi})")
    fn = functools.partial(_wegner_sample, lam=lam, K=K, delta=delta, lambdas=tuple(lambdas), center=center,
                           widths=tuple(widths), dist=dist, seed=seed)
    mat = np.array(run_samples(fn, n_samples, workers)).reshape(n_samples, len(lambdas), len(widths))
    ests, slopes, r2 = {}, {}, {}
    for a, l in enumerate(lambdas):
        means = []
        for b, w in enumerate(widths):
            e = reduce_samples(mat[:, a, b], seed)
            ests[(w, l)] = e
            means.append(e.mean)
        if len(widths) >= 2:
            fit = stats.linregress(widths, means)
            slopes[l], r2[l] = float(fit.slope), float(fit.rvalue ** 2)
    return WegnerTable(float(center), tuple(widths), tuple(lambdas), ests, slopes, r2)


# ---------------------------------------------------------------------------
# eigencorrelator surrogate


def _dynloc_sample(i, lam, params, A, r_list, k, dist, seed):
    om = sample_omega(lam, dist, seed, i)
    H = build_hamiltonian(lam, params, om, "H")
    hi = energy_interval("I_le_k", k, params.delta).hi
    dec = diagonalize(H, window=(-np.inf, np.nextafter(hi, -np.inf)))
    vals = [borel_theta(lam, params, om, k, A, r, decomposition=dec) for r in r_list]
    return vals, dec.spectral_count(energy_interval("I_le_k", k, params.delta))


def dynloc_expectation(lam: Region, params: ModelParams, A, r_list: Sequence[int], n_samples: int, seed: int, *,
                       k: int = 1, dist: DistributionSpec | None = None, workers: int = 1,
                       fit: bool = True) -> tuple[DecayProfile | None, list[MCEstimate], MCEstimate]:
    """MC mean of the Borel surrogate ``Theta(A, r)`` per ``r``, plus the mean eigenvalue count in ``I_<=k``."""
    A = lam.require_subset(A, "A")
    if not A.is_connected():
        raise PreconditionError("A must be connected")
    fn = functools.partial(_dynloc_sample, lam=lam, params=params, A=A, r_list=tuple(r_list), k=k, dist=dist,
                           seed=seed)
    res = run_samples(fn, n_samples, workers)
    mat = np.array([v for v, _ in res])
    ests = [reduce_samples(mat[:, j], seed) for j in range(len(r_list))]
    count = reduce_samples([c for _, c in res], seed)
    prof = None
    if fit:
        prof = fit_decay([(r, e.mean) for r, e in zip(r_list, ests)], floor=0.0,
                         stderr=[e.standard_error for e in ests])
    return prof, ests, count
