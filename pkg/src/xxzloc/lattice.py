"""Region calculus on finite subsets of the integers and spin-configuration bookkeeping.

A :class:`Region` is a finite set of integer sites viewed as an induced subgraph
of the chain: two sites are adjacent iff they differ by one.  Configurations of
down spins ("particles") are machine-word bitmasks over the region's sorted site
list, bit ``p`` standing for ``region.sites[p]``.
"""
from __future__ import annotations

import enum
import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "INFINITE",
    "Region",
    "SpinConfig",
    "Sector",
    "RegionError",
    "PreconditionError",
    "ClusterClassification",
    "graph_distance",
    "set_distance",
    "deform_region",
    "boundary",
    "shell",
    "rho",
    "cluster_count",
    "cluster_counts",
    "enumerate_configs",
    "count_configs_closed_form",
    "classify_and_partition",
    "popcount",
]


class RegionError(ValueError):
    """A site or subset does not belong to the region it is used with."""


class PreconditionError(ValueError):
    """An operation was called outside its admissible parameter range."""


class _Infinite(enum.Enum):
    """Extended-distance value for sites in different connected components."""

    INFINITE = "INFINITE"

    def __repr__(self) -> str:
        return "INFINITE"

    __str__ = __repr__

    # Orders above every integer so that bounds like ``rho >= d - 1`` read naturally.
    def __lt__(self, other):
        return False

    def __le__(self, other):
        return other is self

    def __gt__(self, other):
        return other is not self

    def __ge__(self, other):
        return True


INFINITE = _Infinite.INFINITE


def _as_distance(value: float):
    return INFINITE if math.isinf(value) else int(value)


def popcount(masks: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(masks, dtype=np.uint64)).astype(np.int64)


@dataclass(frozen=True)
class Region:
    """Finite subset of Z with its induced nearest-neighbour graph."""

    sites: tuple[int, ...]

    def __init__(self, sites: Iterable[int] = ()):
        raw = [int(s) for s in sites]
        ordered = tuple(sorted(raw))
        if len(set(ordered)) != len(ordered):
            raise RegionError(f"duplicate sites in {raw}")
        object.__setattr__(self, "sites", ordered)

    @classmethod
    def interval(cls, first: int, last: int) -> "Region":
        """Contiguous region ``{first, ..., last}`` (empty if last < first)."""
        return cls(range(first, last + 1))

    @classmethod
    def chain(cls, length: int, start: int = 0) -> "Region":
        return cls(range(start, start + length))

    def __len__(self) -> int:
        return len(self.sites)

    def __iter__(self) -> Iterator[int]:
        return iter(self.sites)

    def __contains__(self, site) -> bool:
        return site in self._index

    def __bool__(self) -> bool:
        return bool(self.sites)

    def __repr__(self) -> str:
        return f"Region({list(self.sites)})"

    @functools.cached_property
    def _index(self) -> dict[int, int]:
        return {s: p for p, s in enumerate(self.sites)}

    @functools.cached_property
    def adjacency_mask(self) -> int:
        """Bit ``p`` set iff ``sites[p-1]`` and ``sites[p]`` are neighbours."""
        m = 0
        for p in range(1, len(self.sites)):
            if self.sites[p] - self.sites[p - 1] == 1:
                m |= 1 << p
        return m

    @functools.cached_property
    def bonds(self) -> tuple[tuple[int, int], ...]:
        """Bit-position pairs ``(p, p+1)`` of the edges ``{i, i+1}`` inside the region."""
        return tuple((p - 1, p) for p in range(1, len(self.sites)) if self.adjacency_mask >> p & 1)

    @functools.cached_property
    def _component_id(self) -> np.ndarray:
        ids = np.zeros(len(self.sites), dtype=np.int64)
        c = 0
        for p in range(1, len(self.sites)):
            if not self.adjacency_mask >> p & 1:
                c += 1
            ids[p] = c
        return ids

    def position(self, site: int) -> int:
        try:
            return self._index[site]
        except KeyError:
            raise RegionError(f"site {site} not in {self!r}") from None

    def mask_of(self, subset: Iterable[int]) -> int:
        """Bitmask of a subset of sites (raises if a site is outside the region)."""
        m = 0
        for s in subset:
            m |= 1 << self.position(s)
        return m

    def sites_of(self, mask: int) -> tuple[int, ...]:
        return tuple(s for p, s in enumerate(self.sites) if mask >> p & 1)

    @property
    def full_mask(self) -> int:
        return (1 << len(self.sites)) - 1

    def require_subset(self, other: Iterable[int], name: str = "set") -> "Region":
        sub = other if isinstance(other, Region) else Region(other)
        missing = [s for s in sub if s not in self]
        if missing:
            raise RegionError(f"{name} {list(sub.sites)} not contained in {self!r}; offending sites {missing}")
        return sub

    def complement(self, subset: Iterable[int]) -> "Region":
        sub = self.require_subset(subset)
        return Region(s for s in self.sites if s not in sub)

    def components(self) -> list["Region"]:
        """Connected components, ordered left to right."""
        if not self.sites:
            return []
        ids = self._component_id
        return [Region(s for s, c in zip(self.sites, ids) if c == k) for k in range(ids[-1] + 1)]

    def is_connected(self) -> bool:
        return len(self.components()) <= 1 and bool(self.sites)

    def union(self, other: Iterable[int]) -> "Region":
        return Region(set(self.sites) | set(other))

    def intersection(self, other: Iterable[int]) -> "Region":
        o = set(other)
        return Region(s for s in self.sites if s in o)

    def difference(self, other: Iterable[int]) -> "Region":
        o = set(other)
        return Region(s for s in self.sites if s not in o)

    def issubset(self, other: Iterable[int]) -> bool:
        o = set(other)
        return all(s in o for s in self.sites)

    __or__ = union
    __and__ = intersection
    __sub__ = difference

    def to_list(self) -> list[int]:
        return list(self.sites)


def _region(lam: Region, subset, name: str) -> Region:
    return lam.require_subset(subset, name)


def _distances_to(lam: Region, target: Region) -> np.ndarray:
    """Graph distance in ``lam`` from every site of ``lam`` to ``target`` (inf if unreachable)."""
    out = np.full(len(lam), np.inf)
    if not target:
        return out
    sites = np.asarray(lam.sites)
    comp = lam._component_id
    tpos = np.array([lam.position(t) for t in target.sites])
    for c in np.unique(comp[tpos]):
        in_c = comp == c
        tsites = sites[tpos[comp[tpos] == c]]
        d = np.abs(sites[in_c][:, None] - tsites[None, :]).min(axis=1)
        out[in_c] = d
    return out


def graph_distance(lam: Region, i: int, j: int):
    """Length of the shortest path from ``i`` to ``j`` in ``lam``, or INFINITE."""
    pi, pj = lam.position(i), lam.position(j)
    if lam._component_id[pi] != lam._component_id[pj]:
        return INFINITE
    return abs(i - j)


def set_distance(lam: Region, x, y):
    """``min_{a in x, b in y} dist(a, b)``; INFINITE if either set is empty or unreachable."""
    xs, ys = _region(lam, x, "x"), _region(lam, y, "y")
    if not xs or not ys:
        return INFINITE
    d = _distances_to(lam, ys)
    return _as_distance(min(d[lam.position(s)] for s in xs))


def deform_region(lam: Region, m, q) -> Region:
    """Enlarged (``q >= 0``), trimmed (``q < 0``) or component-filled (``q`` INFINITE) set.

    ``q >= 0``: sites within distance ``q`` of ``m``.
    ``q < 0``: sites of ``m`` at distance at least ``1 - q`` from ``lam \\ m``.
    INFINITE: union of the components of ``lam`` that meet ``m``.
    """
    mm = _region(lam, m, "M")
    if q is INFINITE or (isinstance(q, float) and math.isinf(q) and q > 0):
        d = _distances_to(lam, mm)
        return Region(s for s, v in zip(lam.sites, d) if np.isfinite(v))
    q = int(q)
    if q >= 0:
        d = _distances_to(lam, mm)
        return Region(s for s, v in zip(lam.sites, d) if v <= q)
    dc = _distances_to(lam, lam.complement(mm))
    return Region(s for s in mm.sites if dc[lam.position(s)] >= 1 - q)


def boundary(lam: Region, m, kind: str = "full") -> Region:
    """External (``"outer"``), internal (``"inner"``) or full boundary of ``m`` in ``lam``."""
    mm = _region(lam, m, "M")
    outer = deform_region(lam, mm, 1) - mm
    inner = mm - deform_region(lam, mm, -1)
    if kind in ("outer", "ex", "external"):
        return outer
    if kind in ("inner", "in", "internal"):
        return inner
    if kind == "full":
        return outer | inner
    raise ValueError(f"unknown boundary kind {kind!r}")


def shell(lam: Region, m, q: int) -> Region:
    """``[m]_{q+1} \\ [m]_q``."""
    return deform_region(lam, m, q + 1) - deform_region(lam, m, q)


def rho(lam: Region, a, b):
    """Largest ``q >= 0`` with ``[a]_q`` inside ``b``; INFINITE when ``[a]_inf`` lies in ``b``."""
    aa, bb = _region(lam, a, "A"), _region(lam, b, "B")
    if not aa:
        raise PreconditionError("rho requires a non-empty A")
    if not aa.issubset(bb):
        raise PreconditionError(f"rho requires A ⊆ B, got A={aa.to_list()} B={bb.to_list()}")
    d = set_distance(lam, aa, lam.complement(bb))
    if d is INFINITE:
        return INFINITE
    return d - 1


def cluster_counts(lam: Region, masks) -> np.ndarray:
    """Vectorised number of clusters for an array of occupation bitmasks."""
    occ = np.asarray(masks, dtype=np.uint64)
    adj = np.uint64(lam.adjacency_mask)
    continued = (occ << np.uint64(1)) & occ & adj
    return popcount(occ & ~continued)


def cluster_count(lam: Region, config) -> int:
    """Number of connected components of the occupied set."""
    if isinstance(config, SpinConfig):
        if config.region != lam:
            raise RegionError("configuration belongs to a different region")
        mask = config.mask
    elif isinstance(config, (int, np.integer)):
        mask = int(config)
    else:
        mask = lam.mask_of(config)
    continued = (mask << 1) & mask & lam.adjacency_mask
    return (mask & ~continued).bit_count()


@dataclass(frozen=True)
class SpinConfig:
    """Set of occupied (down-spin) sites of a region, stored as a bitmask."""

    region: Region
    mask: int

    def __post_init__(self):
        if self.mask < 0 or self.mask >> len(self.region):
            raise RegionError(f"mask {self.mask:#x} has bits outside {self.region!r}")

    @classmethod
    def from_sites(cls, region: Region, occupied: Iterable[int]) -> "SpinConfig":
        return cls(region, region.mask_of(occupied))

    @property
    def occupied(self) -> tuple[int, ...]:
        return self.region.sites_of(self.mask)

    @property
    def N(self) -> int:
        return int(self.mask).bit_count()

    @property
    def clusters(self) -> int:
        return cluster_count(self.region, self.mask)

    def to_hex(self) -> str:
        return format(self.mask, "x")

    @classmethod
    def from_hex(cls, region: Region, text: str) -> "SpinConfig":
        return cls(region, int(text, 16))

    def __repr__(self) -> str:
        return f"SpinConfig({list(self.occupied)})"


@functools.lru_cache(maxsize=256)
def _sector_masks(length: int, n: int) -> np.ndarray:
    if length > 30:
        raise PreconditionError(f"region of {length} sites is beyond the bitmask basis")
    if length <= 22:
        allm = np.arange(1 << length, dtype=np.uint64)
        out = allm[popcount(allm) == n]
    else:
        out = np.sort(np.array([sum(1 << p for p in c) for c in itertools.combinations(range(length), n)],
                               dtype=np.uint64))
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Sector:
    """Fixed particle-number subspace with its canonical (increasing-bitmask) ordering."""

    region: Region
    N: int
    masks: np.ndarray = field(repr=False, compare=False)

    @classmethod
    @functools.lru_cache(maxsize=512)
    def of(cls, region: Region, n: int) -> "Sector":
        if not 0 <= n <= len(region):
            raise PreconditionError(f"particle number {n} outside [0, {len(region)}]")
        return cls(region, n, _sector_masks(len(region), n))

    @property
    def dim(self) -> int:
        return len(self.masks)

    def index(self, masks) -> np.ndarray:
        """Positions of the given masks inside the sector (masks must belong to it)."""
        m = np.asarray(masks, dtype=np.uint64)
        idx = np.searchsorted(self.masks, m)
        idx_c = np.minimum(idx, self.dim - 1)
        if np.any(self.masks[idx_c] != m):
            raise RegionError("mask not in sector")
        return idx

    def config(self, i: int) -> SpinConfig:
        return SpinConfig(self.region, int(self.masks[i]))

    def __iter__(self) -> Iterator[SpinConfig]:
        return (SpinConfig(self.region, int(m)) for m in self.masks)


def enumerate_configs(lam: Region, n: int, k: int | None = None, a=None) -> list[SpinConfig]:
    """All ``n``-particle configurations with at most ``k`` clusters (all if ``k`` is None).

    When ``a`` is given only configurations meeting ``a`` are kept.  The
    order is increasing bitmask, the same as the sector basis order.
    """
    if not 0 <= n <= len(lam):
        raise PreconditionError(f"N={n} outside [0, {len(lam)}]")
    masks = Sector.of(lam, n).masks
    keep = np.ones(len(masks), dtype=bool)
    if k is not None:
        if k < 1:
            raise PreconditionError("cluster bound k must be >= 1")
        w = cluster_counts(lam, masks)
        keep &= (w >= 1) & (w <= k)
    if a is not None:
        amask = np.uint64(lam.mask_of(_region(lam, a, "A")))
        keep &= (masks & amask) != 0
    return [SpinConfig(lam, int(m)) for m in masks[keep]]


def count_configs_closed_form(length: int, n: int, m: int) -> int:
    """Number of ``n``-subsets of a ``length``-chain with exactly ``m`` clusters."""
    if n == 0:
        return int(m == 0)
    if m < 1:
        return 0
    return math.comb(length - n + 1, m) * math.comb(n - 1, m - 1)


@dataclass(frozen=True)
class ClusterClassification:
    """Outcome of the small/large/intermediate split of a configuration around ``A``."""

    group: int
    gamma: int
    rho: int
    N: int
    k: int
    Z: Region | None = None
    a: int | None = None
    d: int | None = None
    K: Region | None = None
    S: Region | None = None
    M1: Region | None = None
    M2: Region | None = None
    checks: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def _shells(lam: Region, a: Region, d: int, count: int) -> list[Region]:
    return [deform_region(lam, a, j * d) - deform_region(lam, a, (j - 1) * d) for j in range(1, count + 1)]


def _free_pairs(lam: Region, a: Region, m: Region, d: int, k: int) -> list[int]:
    """Shell indices ``j`` in ``1..3k-1`` with ``m`` missing both ``Y_j`` and ``Y_{j+1}``."""
    ys = _shells(lam, a, d, 3 * k)
    ms = set(m.sites)
    out = [j for j in range(1, 3 * k) if not ms & (set(ys[j - 1].sites) | set(ys[j].sites))]
    if not out:
        raise PreconditionError("no pair of consecutive shells avoids M")
    return out


def _punctured(lam: Region, a: Region, j: int, d: int, gamma: int) -> Region:
    return deform_region(lam, a, j * d) | (deform_region(lam, a, gamma + d) - deform_region(lam, a, j * d + 1))


def classify_and_partition(lam: Region, a, b, m, k: int) -> ClusterClassification:
    """Sort ``m`` into the three groups used for decoupling and build the matching partition.

    Group 1 (small spread): returns ``Z = [A]_{6kN}``.
    Group 2 (spread at least half of rho): returns ``K = [A]_{a d}`` with ``d = floor(rho/6k)``.
    Group 3 (intermediate): returns the punctured set ``K`` with ``d = floor(gamma/3k)``.
    The smallest admissible shell index ``a`` is used.  ``checks`` records each
    inclusion and separation property of the partition.
    """
    aa, bb = _region(lam, a, "A"), _region(lam, b, "B")
    mm = m if isinstance(m, Region) else Region(m.occupied if isinstance(m, SpinConfig) else m)
    mm = _region(lam, mm, "M")
    n = len(mm)
    if not mm or not (set(mm.sites) & set(aa.sites)):
        raise PreconditionError("M must be non-empty and intersect A")
    r = rho(lam, aa, bb)
    if r is INFINITE:
        raise PreconditionError("rho(A,B) must be finite")
    if not 8 * k * n < r:
        raise PreconditionError(f"need 8kN < rho(A,B): 8kN={8 * k * n}, rho={r}")
    da = _distances_to(lam, aa)
    gamma = int(max(da[lam.position(x)] for x in mm.sites))
    w = cluster_count(lam, lam.mask_of(mm))
    if w > k:
        raise PreconditionError(f"M has {w} clusters, more than k={k}")
    base = dict(gamma=gamma, rho=r, N=n, k=k)

    if 2 * gamma <= 8 * k * n:
        z = deform_region(lam, aa, 6 * k * n)
        am = aa | mm
        checks = {
            "AuM_in_Zm1": am.issubset(deform_region(lam, z, -1)),
            "Zm1_in_Z": deform_region(lam, z, -1).issubset(z),
            "Z1_in_B": deform_region(lam, z, 1).issubset(bb),
            "rho_AuM_Z": rho(lam, am, z) >= 2 * k * n,
            "rho_Z_B": rho(lam, z, bb) >= 2 * k * n,
        }
        return ClusterClassification(group=1, Z=z, checks=checks, **base)

    if k < 2:
        raise PreconditionError("groups 2 and 3 require k >= 2")

    if r <= 2 * gamma:
        d = r // (6 * k)
        j = _free_pairs(lam, aa, mm, d, k)[0]
        kk = deform_region(lam, aa, j * d)
        dk = boundary(lam, kk, "full")
        s = deform_region(lam, dk, d - 1) if d >= 1 else dk
        m1, m2 = mm & kk, mm - kk
        checks = {
            "distMT": _rho_or_fail(lam, dk, lam - mm) >= d - 1,
            "dist_boundary_M": set_distance(lam, dk, mm) >= d - 1,
            "K_in_B": kk.issubset(bb),
            "M1_nonempty": bool(m1),
            "M2_nonempty": bool(m2),
        }
        return ClusterClassification(group=2, a=j, d=d, K=kk, S=s, M1=m1, M2=m2, checks=checks, **base)

    d = gamma // (3 * k)
    # The puncture sits one site inside the free gap, so the smallest free index can
    # miss the separation bound by one; take the first index that meets it.
    candidates = _free_pairs(lam, aa, mm, d, k)
    j = candidates[0]
    for cand in candidates:
        kc = _punctured(lam, aa, cand, d, gamma)
        if _rho_or_fail(lam, boundary(lam, kc, "full"), lam - mm) >= d - 1:
            j = cand
            break
    kk = _punctured(lam, aa, j, d, gamma)
    dk = boundary(lam, kk, "full")
    s = deform_region(lam, dk, d - 1) if d >= 1 else dk
    m1 = mm & deform_region(lam, aa, j * d)
    m2 = (mm & deform_region(lam, aa, gamma)) - deform_region(lam, aa, j * d + 1)
    checks = {
        "distMT": _rho_or_fail(lam, dk, lam - mm) >= d - 1,
        "dist_boundary_M": set_distance(lam, dk, mm) >= d - 1,
        "M_is_M1_u_M2": (m1 | m2) == mm,
        "M_in_K": mm.issubset(kk),
        "K_in_B": kk.issubset(bb),
        "M1_nonempty": bool(m1),
        "M2_nonempty": bool(m2),
    }
    return ClusterClassification(group=3, a=j, d=d, K=kk, S=s, M1=m1, M2=m2, checks=checks, **base)


def _rho_or_fail(lam: Region, x: Region, y: Region):
    """rho(x, y), or -1 when x is not inside y (boundary touches M)."""
    if not x:
        return INFINITE
    if not x.issubset(y):
        return -1
    return rho(lam, x, y)
