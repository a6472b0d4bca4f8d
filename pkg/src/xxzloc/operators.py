"""Sector-blocked operators of the XXZ chain in the canonical (down-spin bitmask) basis.

Every operator used here conserves the total particle number, so an
:class:`OperatorMatrix` is a map ``N -> block`` with one real block per
particle-number sector.  Blocks are dense ``ndarray`` below
``sparse_threshold`` and CSR matrices above it.

Conventions
-----------
``g = 1 - 1/delta`` is the spectral gap above the vacuum.  The Hamiltonian is

    H = sum_bonds h_{i,i+1} + N_Lambda + lam * sum_i omega_i N_i,
    h_{i,i+1} = -N_i N_{i+1} - (1/(2 delta)) (s+_i s-_{i+1} + s-_i s+_{i+1}).
"""
from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import PreconditionError, Region, RegionError, Sector, cluster_counts, popcount

__all__ = [
    "ParamError",
    "ModelParams",
    "DisorderRealization",
    "OperatorMatrix",
    "Selector",
    "P_plus",
    "P_minus",
    "N_site",
    "N_set",
    "W",
    "Q_m",
    "Q_le_k",
    "Qhat_le_k",
    "chi_N",
    "pi",
    "identity",
    "selector_diagonal",
    "bond_operator",
    "build_hamiltonian",
    "build_projector_family",
    "build_decoupled",
    "crossing_bonds",
    "EnergyInterval",
    "energy_interval",
    "EigenDecomposition",
    "diagonalize",
    "Compression",
    "compress",
    "dump_blocks",
    "load_blocks",
    "SPARSE_THRESHOLD",
]

SPARSE_THRESHOLD = 4096


class ParamError(ValueError):
    """Model parameters outside the admissible range."""


@dataclass(frozen=True)
class ModelParams:
    """Anisotropy ``delta`` and field strength ``lam``, with certificate baselines.

    ``delta0`` and ``lambda0`` default to ``delta`` and ``lam``.  ``lam = 0`` is
    accepted so that the free chain can be built with the same code path.
    """

    delta: float
    lam: float = 1.0
    delta0: float | None = None
    lambda0: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.delta) or self.delta <= 1:
            raise ParamError(f"anisotropy must satisfy delta > 1 (Ising phase), got delta={self.delta}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ParamError(f"field strength must satisfy lambda >= 0, got lambda={self.lam}")
        if self.delta0 is not None and self.delta0 <= 1:
            raise ParamError(f"delta0 must exceed 1, got {self.delta0}")
        if self.lambda0 is not None and self.lambda0 <= 0:
            raise ParamError(f"lambda0 must be positive, got {self.lambda0}")

    @property
    def gap(self) -> float:
        """``1 - 1/delta``."""
        return 1.0 - 1.0 / self.delta

    @property
    def base_delta(self) -> float:
        return self.delta if self.delta0 is None else self.delta0

    @property
    def base_lambda(self) -> float:
        return self.lam if self.lambda0 is None else self.lambda0

    def require_certificate_regime(self) -> None:
        """Raise unless ``delta >= delta0 > 5``, where the resolvent bound decays."""
        d0 = self.base_delta
        if d0 <= 5:
            raise ParamError(f"certificates need delta0 > 5, got delta0={d0}")
        if self.delta < d0:
            raise ParamError(f"certificates need delta >= delta0, got delta={self.delta} < {d0}")


@dataclass(frozen=True)
class DisorderRealization:
    """Random field values ``omega[site]`` in [0, 1] with the token that produced them."""

    omega: Mapping[int, float]
    seed: int | None = None
    distribution_id: str = "uniform01"

    def __post_init__(self):
        vals = np.fromiter(self.omega.values(), dtype=float, count=len(self.omega))
        if vals.size and (np.any(vals < 0) or np.any(vals > 1) or not np.all(np.isfinite(vals))):
            raise ParamError("disorder values must lie in [0, 1]")

    @classmethod
    def from_array(cls, region: Region, values, seed=None, distribution_id="uniform01") -> "DisorderRealization":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(region),):
            raise ParamError(f"expected {len(region)} values, got shape {values.shape}")
        return cls(dict(zip(region.sites, values.tolist())), seed, distribution_id)

    def on(self, region: Region) -> np.ndarray:
        """Values on ``region`` in site order."""
        missing = [s for s in region.sites if s not in self.omega]
        if missing:
            raise ParamError(f"disorder realization lacks sites {missing}")
        return np.array([self.omega[s] for s in region.sites], dtype=float)

    def replaced(self, updates: Mapping[int, float]) -> "DisorderRealization":
        new = dict(self.omega)
        new.update(updates)
        return DisorderRealization(new, self.seed, self.distribution_id)


def _omega_array(lam: Region, omega) -> np.ndarray:
    if omega is None:
        raise ParamError("a disorder realization is required for this operator")
    if isinstance(omega, DisorderRealization):
        return omega.on(lam)
    if isinstance(omega, Mapping):
        return DisorderRealization(dict(omega)).on(lam)
    arr = np.asarray(omega, dtype=float)
    if arr.shape != (len(lam),):
        raise ParamError(f"omega has shape {arr.shape}, region has {len(lam)} sites")
    return arr


# ---------------------------------------------------------------------------
# block container


def _is_sparse(b) -> bool:
    return sp.issparse(b)


def _dense(b) -> np.ndarray:
    return b.toarray() if _is_sparse(b) else np.asarray(b)


def _combine(x, y, op):
    if _is_sparse(x) and _is_sparse(y):
        return sp.csr_matrix(op(x, y))
    if _is_sparse(x) or _is_sparse(y):
        return op(_dense(x), _dense(y))
    return op(x, y)


def _spectral_norm(b) -> float:
    if min(b.shape) == 0:
        return 0.0
    if _is_sparse(b):
        if min(b.shape) < 3:
            return float(np.linalg.norm(b.toarray(), 2))
        s = spla.svds(b, k=1, return_singular_vectors=False, tol=1e-12)
        return float(s[0])
    return float(np.linalg.norm(b, 2))


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Particle-number-conserving operator stored as one block per sector.

    Parameters
    ----------
    region : Region
        The volume the operator acts on.
    blocks : dict
        ``N -> (C(|region|, N), C(|region|, N))`` matrix, every ``N`` present.
    """

    region: Region
    blocks: dict
    conserves_N: bool = True

    def __post_init__(self):
        if not self.conserves_N:
            raise PreconditionError("only particle-number conserving operators are supported")
        L = len(self.region)
        if sorted(self.blocks) != list(range(L + 1)):
            raise PreconditionError(f"blocks must cover N = 0..{L}, got {sorted(self.blocks)}")
        for n, b in self.blocks.items():
            d = Sector.of(self.region, n).dim
            if b.shape != (d, d):
                raise PreconditionError(f"block N={n} has shape {b.shape}, sector dimension is {d}")

    # construction helpers
    @classmethod
    def zeros(cls, region: Region) -> "OperatorMatrix":
        return cls(region, {n: np.zeros((Sector.of(region, n).dim,) * 2) for n in range(len(region) + 1)})

    @classmethod
    def from_diagonal(cls, region: Region, fn: Callable[[np.ndarray], np.ndarray],
                      sparse_threshold: int = SPARSE_THRESHOLD) -> "OperatorMatrix":
        """Diagonal operator whose entry on mask ``m`` is ``fn(masks)[m]``."""
        blocks = {}
        for n in range(len(region) + 1):
            masks = Sector.of(region, n).masks
            d = np.asarray(fn(masks), dtype=float)
            blocks[n] = sp.diags(d, format="csr") if len(d) > sparse_threshold else np.diag(d)
        return cls(region, blocks)

    @classmethod
    def from_full(cls, region: Region, mat: np.ndarray, tol: float = 0.0) -> "OperatorMatrix":
        """Split a ``2^L x 2^L`` matrix in bitmask order into sector blocks.

        Raises if the matrix couples different sectors by more than ``tol``.
        """
        L = len(region)
        mat = np.asarray(mat)
        if mat.shape != (1 << L, 1 << L):
            raise PreconditionError(f"expected a {1 << L}-dimensional matrix, got {mat.shape}")
        n_of = popcount(np.arange(1 << L, dtype=np.uint64))
        leak = np.abs(mat[n_of[:, None] != n_of[None, :]])
        if leak.size and leak.max() > tol:
            raise PreconditionError(f"matrix does not conserve particle number (leak {leak.max():.3g})")
        blocks = {}
        for n in range(L + 1):
            m = Sector.of(region, n).masks.astype(np.int64)
            blocks[n] = np.array(mat[np.ix_(m, m)], dtype=float)
        return cls(region, blocks)

    # structure
    @property
    def dim(self) -> int:
        return 1 << len(self.region)

    def block(self, n: int):
        return self.blocks[n]

    def dense_block(self, n: int) -> np.ndarray:
        return _dense(self.blocks[n])

    def to_dense(self) -> np.ndarray:
        """Full ``2^L x 2^L`` matrix in increasing-bitmask order."""
        out = np.zeros((self.dim, self.dim))
        for n, b in self.blocks.items():
            m = Sector.of(self.region, n).masks.astype(np.int64)
            out[np.ix_(m, m)] = _dense(b)
        return out

    def diagonal(self) -> dict:
        return {n: np.asarray(b.diagonal()).ravel() for n, b in self.blocks.items()}

    def _check(self, other: "OperatorMatrix"):
        if not isinstance(other, OperatorMatrix):
            return NotImplemented
        if other.region != self.region:
            raise RegionError("operators act on different regions")
        return None

    def _map(self, fn) -> "OperatorMatrix":
        return OperatorMatrix(self.region, {n: fn(b) for n, b in self.blocks.items()})

    # arithmetic
    def __add__(self, other):
        if np.isscalar(other):
            return self + other * identity_operator(self.region)
        if self._check(other) is NotImplemented:
            return NotImplemented
        return OperatorMatrix(self.region, {n: _combine(b, other.blocks[n], lambda x, y: x + y)
                                            for n, b in self.blocks.items()})

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return self + (-other)
        if self._check(other) is NotImplemented:
            return NotImplemented
        return OperatorMatrix(self.region, {n: _combine(b, other.blocks[n], lambda x, y: x - y)
                                            for n, b in self.blocks.items()})

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return self._map(lambda b: -b)

    def __mul__(self, c):
        if not np.isscalar(c):
            return NotImplemented
        return self._map(lambda b: b * float(c))

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / float(c))

    def __matmul__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return OperatorMatrix(self.region, {n: _combine(b, other.blocks[n], lambda x, y: x @ y)
                                            for n, b in self.blocks.items()})

    @property
    def T(self) -> "OperatorMatrix":
        return self._map(lambda b: b.T.tocsr() if _is_sparse(b) else b.T)

    def commutator(self, other: "OperatorMatrix") -> "OperatorMatrix":
        return self @ other - other @ self

    # norms
    def norm(self) -> float:
        """Operator (spectral) norm: max over sectors."""
        return max(_spectral_norm(b) for b in self.blocks.values())

    def hs_norm(self) -> float:
        """Hilbert-Schmidt (Frobenius) norm over the full space."""
        tot = math.fsum((sp.linalg.norm(b) if _is_sparse(b) else np.linalg.norm(b)) ** 2
                        for b in self.blocks.values())
        return math.sqrt(tot)

    def max_abs(self) -> float:
        return max((abs(b).max() if b.shape[0] else 0.0) for b in self.blocks.values())

    def trace(self) -> float:
        return math.fsum(float(b.diagonal().sum()) for b in self.blocks.values())

    def hermiticity_defect(self) -> float:
        """``max_N ||B - B^T|| / max(1, ||B||)`` using Frobenius norms."""
        worst = 0.0
        for b in self.blocks.values():
            bd = _dense(b)
            if not bd.size:
                continue
            scale = max(1.0, np.linalg.norm(bd))
            worst = max(worst, np.linalg.norm(bd - bd.T) / scale)
        return worst

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        return self.hermiticity_defect() <= tol

    def min_eigenvalue(self) -> float:
        return min(float(sla.eigvalsh(_dense(b))[0]) for b in self.blocks.values() if b.shape[0])

    def eigenvalues(self) -> np.ndarray:
        """All eigenvalues, sorted ascending (dense solve per sector)."""
        return np.sort(np.concatenate([sla.eigvalsh(_dense(b)) for b in self.blocks.values()]))

    def apply(self, vec: np.ndarray) -> np.ndarray:
        """Action on a full-space vector in bitmask order."""
        vec = np.asarray(vec)
        out = np.zeros_like(vec, dtype=np.result_type(vec, float))
        for n, b in self.blocks.items():
            m = Sector.of(self.region, n).masks.astype(np.int64)
            out[m] = b @ vec[m]
        return out


def identity_operator(region: Region) -> OperatorMatrix:
    return OperatorMatrix.from_diagonal(region, lambda m: np.ones(len(m)))


# ---------------------------------------------------------------------------
# diagonal operators and projections


@dataclass(frozen=True)
class Selector:
    """Name of a diagonal operator in the canonical basis plus its argument."""

    kind: str
    arg: object = None

    def __repr__(self) -> str:
        return f"{self.kind}({self.arg!r})" if self.arg is not None else self.kind


def _sites(x) -> tuple[int, ...]:
    if isinstance(x, Region):
        return x.sites
    if isinstance(x, (int, np.integer)):
        return (int(x),)
    return tuple(sorted(int(s) for s in x))


def P_plus(S) -> Selector:
    """Projection onto states with no particle in ``S``."""
    return Selector("P_plus", _sites(S))


def P_minus(S) -> Selector:
    """Projection onto states with at least one particle in ``S``."""
    return Selector("P_minus", _sites(S))


def N_site(i: int) -> Selector:
    return Selector("N_site", int(i))


def N_set(S) -> Selector:
    return Selector("N_set", _sites(S))


def W(support=None) -> Selector:
    """Cluster-count operator (of the restriction to ``support`` when given)."""
    return Selector("W", None if support is None else _sites(support))


def Q_m(m: int) -> Selector:
    return Selector("Q_m", int(m))


def Q_le_k(k: int) -> Selector:
    return Selector("Q_le_k", int(k))


def Qhat_le_k(k: int) -> Selector:
    if int(k) < 1:
        raise PreconditionError("Qhat_le_k requires k >= 1")
    return Selector("Qhat_le_k", int(k))


def chi_N(n: int) -> Selector:
    return Selector("chi_N", int(n))


def pi(M) -> Selector:
    """Rank-one projection onto the configuration with particles exactly on ``M``."""
    return Selector("pi", _sites(M))


def identity() -> Selector:
    return Selector("identity")


def _support_mask(lam: Region, sites) -> int:
    lam.require_subset(sites, "selector set")
    return lam.mask_of(sites)


def _clusters_within(lam: Region, masks: np.ndarray, smask: int | None) -> np.ndarray:
    if smask is None:
        return cluster_counts(lam, masks)
    occ = np.asarray(masks, dtype=np.uint64) & np.uint64(smask)
    adj = np.uint64(lam.adjacency_mask & smask & (smask << 1))
    cont = (occ << np.uint64(1)) & occ & adj
    return popcount(occ & ~cont)


def selector_diagonal(lam: Region, sel: Selector, masks: np.ndarray) -> np.ndarray:
    """Diagonal entries of the operator named by ``sel`` on the configurations ``masks``."""
    masks = np.asarray(masks, dtype=np.uint64)
    kind, arg = sel.kind, sel.arg
    if kind == "identity":
        return np.ones(len(masks))
    if kind in ("P_plus", "P_minus", "N_set", "pi"):
        smask = np.uint64(_support_mask(lam, arg))
        hit = masks & smask
        if kind == "P_plus":
            return (hit == 0).astype(float)
        if kind == "P_minus":
            return (hit != 0).astype(float)
        if kind == "N_set":
            return popcount(hit).astype(float)
        return (masks == smask).astype(float)
    if kind == "N_site":
        p = lam.position(arg)
        return ((masks >> np.uint64(p)) & np.uint64(1)).astype(float)
    if kind == "chi_N":
        return (popcount(masks) == arg).astype(float)
    if kind == "W":
        smask = None if arg is None else _support_mask(lam, arg)
        return _clusters_within(lam, masks, smask).astype(float)
    w = cluster_counts(lam, masks)
    if kind == "Q_m":
        return (w == arg).astype(float)
    if kind == "Q_le_k":
        return ((w >= 1) & (w <= arg)).astype(float)
    if kind == "Qhat_le_k":
        k = arg
        return ((w >= 1) & (w <= k)).astype(float) + (k + 1) / k * (w == 0)
    raise PreconditionError(f"unknown selector {kind!r}")


def build_projector_family(lam: Region, selector: Selector | Iterable[Selector],
                           sparse_threshold: int = SPARSE_THRESHOLD) -> OperatorMatrix:
    """Diagonal operator of a selector, or the product of a chain of selectors."""
    chain = [selector] if isinstance(selector, Selector) else list(selector)
    for s in chain:
        selector_diagonal(lam, s, np.zeros(0, dtype=np.uint64))  # validates sets eagerly

    def fn(masks):
        d = np.ones(len(masks))
        for s in chain:
            d = d * selector_diagonal(lam, s, masks)
        return d

    return OperatorMatrix.from_diagonal(lam, fn, sparse_threshold)


# ---------------------------------------------------------------------------
# Hamiltonians


def bond_operator(delta: float) -> np.ndarray:
    """Two-site term ``h_{i,i+1}`` in the basis (up-up, up-down, down-up, down-down).

    "down" is an occupied site, so the diagonal is ``-N_i N_{i+1}`` and the flip
    between up-down and down-up carries ``-1/(2 delta)``.
    """
    if not delta > 1:
        raise ParamError(f"anisotropy must satisfy delta > 1, got {delta}")
    t = -1.0 / (2.0 * delta)
    return np.array([[0.0, 0.0, 0.0, 0.0],
                     [0.0, 0.0, t, 0.0],
                     [0.0, t, 0.0, 0.0],
                     [0.0, 0.0, 0.0, -1.0]])


@functools.lru_cache(maxsize=1024)
def _hop_pairs(lam: Region, n: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Sector indices ``(row, col)`` linked by a flip across the bond at bit positions ``(p, p+1)``."""
    sec = Sector.of(lam, n)
    m = sec.masks
    one = np.uint64(1)
    sel = ((m >> np.uint64(p)) ^ (m >> np.uint64(p + 1))) & one
    rows = np.flatnonzero(sel)
    partners = m[rows] ^ np.uint64(3 << p)
    cols = sec.index(partners)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def _bonds_within(lam: Region, smask: int) -> list[int]:
    """Left bit positions of bonds whose two sites lie in the support mask."""
    return [p for p, q in lam.bonds if (smask >> p & 1) and (smask >> q & 1)]


def crossing_bonds(lam: Region, K) -> list[int]:
    """Left bit positions of bonds with exactly one end in ``K``."""
    kmask = _support_mask(lam, _sites(K))
    return [p for p, q in lam.bonds if (kmask >> p & 1) != (kmask >> q & 1)]


def _assemble(lam: Region, diag_fn, bonds: list[int], hop: float, sparse_threshold: int) -> OperatorMatrix:
    blocks = {}
    for n in range(len(lam) + 1):
        sec = Sector.of(lam, n)
        d = np.asarray(diag_fn(sec.masks), dtype=float)
        pairs = [_hop_pairs(lam, n, p) for p in bonds] if hop != 0.0 else []
        if sec.dim > sparse_threshold:
            rows = np.concatenate([np.arange(sec.dim)] + [r for r, _ in pairs])
            cols = np.concatenate([np.arange(sec.dim)] + [c for _, c in pairs])
            vals = np.concatenate([d] + [np.full(len(r), hop) for r, _ in pairs])
            blocks[n] = sp.csr_matrix((vals, (rows, cols)), shape=(sec.dim, sec.dim))
        else:
            b = np.diag(d)
            for r, c in pairs:
                b[r, c] += hop
            blocks[n] = b
    return OperatorMatrix(lam, blocks)


def build_hamiltonian(lam: Region, params: ModelParams | None = None, omega=None, flavor: str = "H",
                      k: int | None = None, support=None,
                      sparse_threshold: int = SPARSE_THRESHOLD) -> OperatorMatrix:
    """Hamiltonian-type operator on ``lam``.

    Parameters
    ----------
    flavor : {"H0", "V", "H", "Hhat", "hopping", "W", "N"}
        ``H0 = sum h + N``, ``V = sum omega_i N_i``, ``H = H0 + lam V``,
        ``Hhat = H + k g Qhat_{<=k}`` (``H + g Q_0`` for ``k = 0``),
        ``hopping`` is the bare flip operator summed over bonds.
    support : optional subset of ``lam``
        Build the operator of the subregion, tensored with the identity on
        the rest (bonds and sites restricted to ``support``).
    """
    sup = lam.sites if support is None else _sites(support)
    smask = _support_mask(lam, sup)
    sreg = Region(sup)
    bonds = _bonds_within(lam, smask)

    if flavor in ("H0", "H", "Hhat", "hopping") and params is None:
        raise ParamError(f"flavor {flavor} needs model parameters")
    hop = -1.0 / (2.0 * params.delta) if params is not None else 0.0

    def cluster_diag(masks):
        return _clusters_within(lam, masks, smask).astype(float)

    if flavor in ("V", "H", "Hhat"):
        om = np.zeros(len(lam))
        # the field term drops out at lam = 0, so no realization is needed there
        if sreg and not (omega is None and flavor != "V" and params.lam == 0):
            pos = [lam.position(s) for s in sreg.sites]
            if isinstance(omega, (DisorderRealization, Mapping)):
                om[pos] = _omega_array(sreg, omega)
            else:
                om[pos] = _omega_array(lam, omega)[pos]
    else:
        om = None

    def field_diag(masks):
        bits = (masks[:, None] >> np.arange(len(lam), dtype=np.uint64)[None, :]) & np.uint64(1)
        return bits.astype(float) @ om

    if flavor == "hopping":
        return _assemble(lam, lambda m: np.zeros(len(m)), bonds, 1.0, sparse_threshold)
    if flavor == "W":
        return _assemble(lam, cluster_diag, [], 0.0, sparse_threshold)
    if flavor == "N":
        return _assemble(lam, lambda m: popcount(m & np.uint64(smask)).astype(float), [], 0.0, sparse_threshold)
    if flavor == "V":
        return _assemble(lam, field_diag, [], 0.0, sparse_threshold)
    if flavor == "H0":
        # sum of -N_i N_{i+1} over bonds plus N equals the cluster count
        return _assemble(lam, cluster_diag, bonds, hop, sparse_threshold)
    if flavor in ("H", "Hhat"):
        lamv = params.lam

        def diag(masks):
            return cluster_diag(masks) + lamv * field_diag(masks)

        if flavor == "Hhat":
            if k is None or k < 0:
                raise ParamError("flavor Hhat needs k >= 0")
            if support is not None:
                raise PreconditionError("Hhat is only defined on the full region")
            g = params.gap
            sel = Q_m(0) if k == 0 else Qhat_le_k(k)
            coef = g if k == 0 else k * g
            base = diag

            def diag(masks):
                return base(masks) + coef * selector_diagonal(lam, sel, masks)

        return _assemble(lam, diag, bonds, hop, sparse_threshold)
    raise ParamError(f"unknown flavor {flavor!r}")


def build_decoupled(lam: Region, K, params: ModelParams, omega,
                    sparse_threshold: int = SPARSE_THRESHOLD) -> tuple[OperatorMatrix, OperatorMatrix]:
    """``(H^K + H^{K^c}, Gamma^K)`` with ``Gamma^K`` the crossing bond terms.

    ``Gamma^K`` is stamped directly from the bonds leaving ``K`` so it is exact;
    ``H - H^{K,K^c} - Gamma^K`` then vanishes up to rounding.
    """
    ks = _sites(K)
    if not ks:
        raise PreconditionError("K must be non-empty")
    lam.require_subset(ks, "K")
    kc = lam.complement(ks)
    hk = build_hamiltonian(lam, params, omega, "H", support=ks, sparse_threshold=sparse_threshold)
    hkc = build_hamiltonian(lam, params, omega, "H", support=kc.sites, sparse_threshold=sparse_threshold)
    cross = crossing_bonds(lam, ks)
    cross_mask = 0
    for p in cross:
        cross_mask |= 1 << p

    def diag(masks):
        # -N_p N_{p+1} for each crossing bond
        both = masks & (masks >> np.uint64(1)) & np.uint64(cross_mask)
        return -popcount(both).astype(float)

    gamma = _assemble(lam, diag, cross, -1.0 / (2.0 * params.delta), sparse_threshold)
    return hk + hkc, gamma


# ---------------------------------------------------------------------------
# energy intervals


@dataclass(frozen=True)
class EnergyInterval:
    """One of the four cluster-band intervals.

    kinds: ``I_le_k = (-inf, (k+3/4) g)``, ``I_k = [g, (k+3/4) g)``,
    ``Ihat_le_k = (-inf, (k+1) g)``, ``Ihat_k = [g, (k+1) g)``.
    """

    kind: str
    k: int
    delta: float

    def __post_init__(self):
        if self.kind not in ("I_le_k", "I_k", "Ihat_le_k", "Ihat_k"):
            raise ParamError(f"unknown interval kind {self.kind!r}")
        if self.k < 0:
            raise ParamError("band index k must be >= 0")
        if not self.delta > 1:
            raise ParamError(f"delta must exceed 1, got {self.delta}")

    @property
    def gap(self) -> float:
        return 1.0 - 1.0 / self.delta

    @property
    def endpoints(self) -> tuple[float, float]:
        g = self.gap
        hi = (self.k + 0.75) * g if self.kind in ("I_le_k", "I_k") else (self.k + 1) * g
        lo = -math.inf if self.kind.endswith("le_k") else g
        return lo, hi

    @property
    def lo(self) -> float:
        return self.endpoints[0]

    @property
    def hi(self) -> float:
        return self.endpoints[1]

    def contains(self, x):
        """Membership (left-closed, right-open; vectorised)."""
        lo, hi = self.endpoints
        x = np.asarray(x, dtype=float)
        out = (x >= lo) & (x < hi)
        return bool(out) if out.ndim == 0 else out

    __contains__ = contains

    def __repr__(self) -> str:
        lo, hi = self.endpoints
        left = "(" if math.isinf(lo) else "["
        return f"{self.kind}[k={self.k}]{left}{lo:.6g}, {hi:.6g})"


def energy_interval(kind: str, k: int, delta: float) -> EnergyInterval:
    return EnergyInterval(kind, int(k), float(delta))


# ---------------------------------------------------------------------------
# diagonalisation


@dataclass(frozen=True, eq=False)
class EigenDecomposition:
    """Per-sector eigenpairs plus global clustering of (near-)degenerate eigenvalues.

    ``clusters`` is a list of ``(energy, [(N, column indices), ...])`` in
    ascending energy; two eigenvalues share a cluster when they differ by at
    most ``tol * max(1, |E|)``.
    """

    region: Region
    values: dict
    vectors: dict
    tol: float
    clusters: list = field(repr=False)

    @property
    def all_values(self) -> np.ndarray:
        return np.sort(np.concatenate(list(self.values.values())))

    def spectral_count(self, interval) -> int:
        """Number of eigenvalues (with multiplicity) in an interval or ``(lo, hi)`` half-open pair."""
        ev = self.all_values
        if isinstance(interval, EnergyInterval):
            return int(np.count_nonzero(interval.contains(ev)))
        lo, hi = interval
        return int(np.count_nonzero((ev >= lo) & (ev < hi)))

    def cluster_projector(self, index: int) -> OperatorMatrix:
        """Spectral projection of the ``index``-th eigenvalue cluster."""
        _, parts = self.clusters[index]
        blocks = {n: np.zeros((len(v),) * 2) for n, v in self.values.items()}
        for n, cols in parts:
            u = self.vectors[n][:, cols]
            blocks[n] = u @ u.T
        return OperatorMatrix(self.region, blocks)

    def cluster_vectors(self, index: int) -> list[tuple[int, np.ndarray]]:
        _, parts = self.clusters[index]
        return [(n, self.vectors[n][:, cols]) for n, cols in parts]

    def function(self, fn, dtype=float) -> dict:
        """Blocks of ``fn(H)`` computed spectrally (``fn`` acts on eigenvalue arrays)."""
        out = {}
        for n, v in self.values.items():
            u = self.vectors[n]
            out[n] = (u * np.asarray(fn(v), dtype=dtype)[None, :]) @ u.T
        return out

    def reconstruction_residual(self, op: OperatorMatrix) -> float:
        """``max_N ||B - U diag U^T|| / max(1, ||B||)``."""
        worst = 0.0
        for n, b in op.blocks.items():
            bd = _dense(b)
            if not bd.size:
                continue
            u, v = self.vectors[n], self.values[n]
            r = np.linalg.norm(bd - (u * v) @ u.T, 2) / max(1.0, np.linalg.norm(bd, 2))
            worst = max(worst, r)
        return worst


def _cluster(values: dict, tol: float) -> list:
    flat = [(float(e), n, i) for n, v in values.items() for i, e in enumerate(v)]
    flat.sort()
    out = []
    for e, n, i in flat:
        if out and e - out[-1][2] <= tol * max(1.0, abs(e)):
            out[-1][1].append((n, i))
            out[-1][2] = e
        else:
            out.append([e, [(n, i)], e])
    clusters = []
    for e0, members, _ in out:
        by_n: dict = {}
        for n, i in members:
            by_n.setdefault(n, []).append(i)
        energies = [values[n][i] for n, i in members]
        clusters.append((float(np.mean(energies)), [(n, np.array(ix)) for n, ix in sorted(by_n.items())]))
    return clusters


def diagonalize(op: OperatorMatrix, tol: float = 1e-9, herm_tol: float = 1e-12,
                window: tuple[float, float] | None = None) -> EigenDecomposition:
    """Dense symmetric eigensolve of every sector block.

    With ``window = (lo, hi)`` only eigenpairs with ``lo < E <= hi`` are computed
    (the reconstruction check then no longer applies).

    Raises
    ------
    PreconditionError
        If a block deviates from symmetry by more than ``herm_tol`` (relative).
    """
    defect = op.hermiticity_defect()
    if defect > herm_tol:
        raise PreconditionError(f"operator is not Hermitian (relative defect {defect:.3g})")
    values, vectors = {}, {}
    for n, b in op.blocks.items():
        bd = _dense(b)
        if bd.size and window is not None:
            w, u = sla.eigh(0.5 * (bd + bd.T), subset_by_value=window, driver="evr")
        elif bd.size:
            w, u = sla.eigh(0.5 * (bd + bd.T))
        else:
            w, u = np.zeros(0), np.zeros((0, 0))
        values[n], vectors[n] = w, u
    return EigenDecomposition(op.region, values, vectors, tol, _cluster(values, tol))


# ---------------------------------------------------------------------------
# compression to the range of a diagonal projection


@dataclass(frozen=True, eq=False)
class Compression:
    """An operator cut down to the range of a diagonal projection.

    ``index[N]`` lists the sector positions kept and ``blocks[N]`` is the
    corresponding principal submatrix.
    """

    region: Region
    index: dict
    blocks: dict

    def eigenvalues(self) -> np.ndarray:
        parts = [sla.eigvalsh(b) for b in self.blocks.values() if b.shape[0]]
        return np.sort(np.concatenate(parts)) if parts else np.zeros(0)

    @property
    def dim(self) -> int:
        return sum(len(ix) for ix in self.index.values())


def compress(op: OperatorMatrix, selector: Selector) -> Compression:
    """Principal submatrices of ``op`` on the states where ``selector`` is 1."""
    index, blocks = {}, {}
    for n, b in op.blocks.items():
        masks = Sector.of(op.region, n).masks
        keep = np.flatnonzero(selector_diagonal(op.region, selector, masks) > 0.5)
        index[n] = keep
        bd = _dense(b)
        blocks[n] = bd[np.ix_(keep, keep)]
    return Compression(op.region, index, blocks)


# ---------------------------------------------------------------------------
# binary dump

_MAGIC = b"XXZB"
_VERSION = 1


def dump_blocks(op: OperatorMatrix, path) -> None:
    """Write sector blocks: little-endian header then row-major float64 data.

    Layout: magic, uint32 version, uint32 n_sites, int64 sites[n_sites],
    uint32 n_blocks, then per block int32 N, uint32 rows, uint32 cols, data.
    """
    sites = op.region.sites
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(sites)))
        fh.write(struct.pack(f"<{len(sites)}q", *sites))
        fh.write(struct.pack("<I", len(op.blocks)))
        for n in sorted(op.blocks):
            b = _dense(op.blocks[n])
            fh.write(struct.pack("<iII", n, *b.shape))
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_blocks(path) -> OperatorMatrix:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError("not an operator dump")
    off = 4
    version, nsites = struct.unpack_from("<II", data, off)
    off += 8
    if version != _VERSION:
        raise ValueError(f"unsupported dump version {version}")
    sites = struct.unpack_from(f"<{nsites}q", data, off)
    off += 8 * nsites
    (nblocks,) = struct.unpack_from("<I", data, off)
    off += 4
    blocks = {}
    for _ in range(nblocks):
        n, r, c = struct.unpack_from("<iII", data, off)
        off += 12
        blocks[n] = np.frombuffer(data, dtype="<f8", count=r * c, offset=off).reshape(r, c).astype(float)
        off += 8 * r * c
    return OperatorMatrix(Region(sites), blocks)
