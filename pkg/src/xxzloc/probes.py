"""Quasi-locality probes: dressed resolvents, certificates, spectral sums and decay fits.

All resolvents are evaluated at real energies by per-sector LU solves.  A
solve whose estimated condition number exceeds ``NEAR_SINGULAR_COND`` is
flagged but still returned: fractional moments are meant to absorb such
samples, so nothing is regularised.
"""
from __future__ import annotations

import functools
import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import stats
from scipy.sparse.csgraph import connected_components

from .lattice import (INFINITE, PreconditionError, Region, Sector, deform_region, rho, set_distance,
                      shell)
from .operators import (Compression, DisorderRealization, EigenDecomposition, ModelParams, OperatorMatrix,
                        Selector, N_site, P_minus, P_plus, Q_le_k, build_decoupled, build_hamiltonian,
                        diagonalize, energy_interval, selector_diagonal, _dense)

__all__ = [
    "NEAR_SINGULAR_COND",
    "ProbeParams",
    "SectorSolver",
    "DressedBlock",
    "dressed_resolvent_block",
    "operator_norm",
    "ct_constants",
    "CTCertificate",
    "ct_certificate",
    "check_locality_hypotheses",
    "FEstimate",
    "f_estimator",
    "F_pq",
    "embed_tensor",
    "EnergyReductionReport",
    "energy_reduction_check",
    "borel_theta",
    "bump",
    "EvolutionReport",
    "evolution_decay_check",
    "Regularity",
    "regularity",
    "InsufficientSamples",
    "DecayProfile",
    "fit_decay",
]

NEAR_SINGULAR_COND = 1e14
SVD_DIM_LIMIT = 2048


@dataclass(frozen=True)
class ProbeParams:
    """Band index ``k``, energy ``E``, fractional exponent ``s`` and tolerance."""

    k: int = 1
    E: float = 0.0
    s: float = 0.3
    tol: float = 1e-12
    flavor: str = "plain_H"

    def __post_init__(self):
        if not math.isfinite(self.E):
            raise PreconditionError("energy must be finite")
        if not 0 < self.s < 1:
            raise PreconditionError(f"fractional exponent must lie in (0, 1), got s={self.s}")
        if self.k < 0:
            raise PreconditionError("band index must be >= 0")
        if self.flavor not in ("plain_H", "Hhat_k"):
            raise PreconditionError(f"unknown flavor {self.flavor!r}")


# ---------------------------------------------------------------------------
# solves and norms


def operator_norm(x, tol: float = 1e-10, maxiter: int = 10_000) -> float:
    """Largest singular value: dense SVD below ``SVD_DIM_LIMIT``, power iteration on X*X above."""
    x = _dense(x)
    if x.size == 0:
        return 0.0
    if max(x.shape) < SVD_DIM_LIMIT:
        return float(sla.svdvals(x)[0])
    rng = np.random.default_rng(0)
    v = rng.standard_normal(x.shape[1])
    v /= np.linalg.norm(v)
    prev = 0.0
    for _ in range(maxiter):
        w = x.conj().T @ (x @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
        if abs(lam - prev) <= tol * lam:
            break
        prev = lam
    return math.sqrt(lam)


def _gecon(lu: np.ndarray, anorm: float) -> float:
    if anorm == 0.0:
        return math.inf
    rcond, info = sla.lapack.dgecon(lu, anorm, norm="1")
    return math.inf if rcond == 0 else 1.0 / rcond


class SectorSolver:
    """LU factorisations of ``H_N - E`` for the requested sectors.

    All factorisations are computed at construction; the object is read-only
    afterwards and may be shared.
    """

    def __init__(self, H: OperatorMatrix, E: float, sectors: Iterable[int] | None = None):
        self.region = H.region
        self.E = float(E)
        self._lu, self.cond = {}, {}
        for n in (H.blocks if sectors is None else sectors):
            b = H.blocks[n]
            if b.shape[0] == 0:
                continue
            if sp.issparse(b):
                a = (b - self.E * sp.identity(b.shape[0], format="csc")).tocsc()
                try:
                    lu = spla.splu(a)
                    inv = spla.LinearOperator(a.shape, matvec=lu.solve, rmatvec=lambda y, lu=lu: lu.solve(y, "T"))
                    self.cond[n] = spla.onenormest(a) * spla.onenormest(inv)
                except RuntimeError:
                    lu, self.cond[n] = None, math.inf
                self._lu[n] = ("sparse", lu)
            else:
                a = b - self.E * np.eye(b.shape[0])
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", sla.LinAlgWarning)
                    lu, piv = sla.lu_factor(a, check_finite=False)
                self.cond[n] = _gecon(lu, float(np.abs(a).sum(axis=0).max()))
                self._lu[n] = ("dense", (lu, piv))

    def solve(self, n: int, rhs: np.ndarray) -> np.ndarray:
        kind, fac = self._lu[n]
        if kind == "sparse":
            if fac is None:
                return np.full(rhs.shape, np.nan)
            return fac.solve(np.asarray(rhs, dtype=float))
        with np.errstate(all="ignore"):
            return sla.lu_solve(fac, rhs, check_finite=False)

    def __contains__(self, n) -> bool:
        return n in self._lu

    @property
    def max_cond(self) -> float:
        return max(self.cond.values(), default=1.0)


def _chain_diag(region: Region, chain: Sequence[Selector], masks: np.ndarray) -> np.ndarray:
    d = np.ones(len(masks))
    for s in chain:
        d = d * selector_diagonal(region, s, masks)
    return d


@dataclass(frozen=True)
class DressedBlock:
    """Norms of ``left * (H - E)^{-1} * right`` for diagonal dressing chains."""

    left: tuple
    right: tuple
    operator_norm: float
    hs_norm: float
    condition_estimate: float
    flag: str = "NONE"
    sector_norms: dict = field(default_factory=dict, repr=False)

    @property
    def near_singular(self) -> bool:
        return self.flag == "NEAR_SINGULAR"


def _as_chain(x) -> tuple:
    if x is None:
        return ()
    if isinstance(x, Selector):
        return (x,)
    return tuple(x)


def dressed_resolvent_block(H: OperatorMatrix, E, left=(), right=(), *, solver: SectorSolver | None = None,
                            sectors: Iterable[int] | None = None) -> DressedBlock:
    """Operator and Hilbert-Schmidt norms of ``L (H - E)^{-1} R``.

    Parameters
    ----------
    H : OperatorMatrix
        Hamiltonian (plain or modified).
    E : float or ProbeParams
        Real energy; no imaginary part is added.
    left, right : Selector or sequence of Selector
        Diagonal dressings; their product is applied on each side.
    solver : SectorSolver, optional
        Reusable factorisation of ``H - E``.
    sectors : iterable of int, optional
        Restrict to these particle numbers (a chi_N dressing without the cost).
    """
    if isinstance(E, ProbeParams):
        E = E.E
    E = float(E)
    left, right = _as_chain(left), _as_chain(right)
    lam = H.region
    work = []
    for n in (H.blocks if sectors is None else sectors):
        masks = Sector.of(lam, n).masks
        dl = _chain_diag(lam, left, masks)
        dr = _chain_diag(lam, right, masks)
        rows, cols = np.flatnonzero(dl), np.flatnonzero(dr)
        if len(rows) and len(cols):
            work.append((n, dl, dr, rows, cols))
    if solver is None:
        solver = SectorSolver(H, E, [w[0] for w in work])
    elif solver.E != E or solver.region != lam:
        raise PreconditionError("solver was built for a different operator or energy")
    op, hs2, cond, per = 0.0, [], 1.0, {}
    for n, dl, dr, rows, cols in work:
        dim = len(dl)
        rhs = np.zeros((dim, len(cols)))
        rhs[cols, np.arange(len(cols))] = dr[cols]
        x = solver.solve(n, rhs)
        y = dl[rows, None] * x[rows]
        nrm = operator_norm(y) if np.all(np.isfinite(y)) else math.inf
        per[n] = nrm
        op = max(op, nrm)
        hs2.append(float(np.sum(y * y)))
        cond = max(cond, solver.cond[n])
    flag = "NEAR_SINGULAR" if cond > NEAR_SINGULAR_COND else "NONE"
    return DressedBlock(left, right, op, math.sqrt(math.fsum(hs2)), cond, flag, per)


# ---------------------------------------------------------------------------
# Combes-Thomas certificate


def ct_constants(delta0: float) -> tuple[float, float]:
    """``(C0, m0) = (4 / (1 - 1/delta0), ln((delta0 - 1)/4))``."""
    return 4.0 / (1.0 - 1.0 / delta0), math.log((delta0 - 1.0) / 4.0)


def _diag_commutator_blocks(T: OperatorMatrix, sel: Selector) -> dict:
    out = {}
    for n, b in T.blocks.items():
        d = selector_diagonal(T.region, sel, Sector.of(T.region, n).masks)
        bc = sp.coo_matrix(b)
        vals = bc.data * (d[bc.row] - d[bc.col])
        keep = vals != 0
        out[n] = sp.csr_matrix((vals[keep], (bc.row[keep], bc.col[keep])), shape=b.shape)
    return out


def _norm_by_components(c: sp.spmatrix) -> float:
    """Exact spectral norm of a sparse matrix by splitting into connected components."""
    if c.nnz == 0:
        return 0.0
    ncomp, labels = connected_components(abs(c) + abs(c.T), directed=False)
    order = np.argsort(labels, kind="stable")
    sizes = np.bincount(labels)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    cd = c.toarray() if c.shape[0] <= 4096 else None
    best = 0.0
    for size in np.unique(sizes):
        if size < 2:
            continue
        comps = np.flatnonzero(sizes == size)
        idx = np.stack([order[starts[j]:starts[j] + size] for j in comps])
        if cd is not None:
            sub = cd[idx[:, :, None], idx[:, None, :]]
        else:
            sub = np.stack([c.tocsr()[ix][:, ix].toarray() for ix in idx])
        best = max(best, float(np.linalg.svd(sub, compute_uv=False).max()))
    return best


def _connected_subsets(lam: Region) -> list[Region]:
    out = []
    for comp in lam.components():
        s = comp.sites
        out.extend(Region(s[a:b + 1]) for a in range(len(s)) for b in range(a, len(s)))
    return out


def check_locality_hypotheses(T: OperatorMatrix, gamma: float, Ks: Iterable[Region] | None = None,
                              n_random: int = 20, seed: int = 0, tol: float = 1e-12) -> dict:
    """Check ``[P_-^K, T] P_+^{[K]_1} = 0`` and ``||[P_-^K, T]|| <= gamma`` (connected ``K``).

    Default ``Ks``: every connected ``K`` plus ``n_random`` random subsets.
    Returns the worst residual of (i), the worst norm in (ii) and pass flags.
    """
    lam = T.region
    if Ks is None:
        rng = np.random.default_rng(seed)
        Ks = _connected_subsets(lam)
        for _ in range(n_random):
            pick = rng.random(len(lam)) < 0.5
            if pick.any():
                Ks.append(Region(np.asarray(lam.sites)[pick]))
    worst_i, worst_ii = 0.0, 0.0
    for K in Ks:
        cb = _diag_commutator_blocks(T, P_minus(K))
        k1 = deform_region(lam, K, 1)
        for n, c in cb.items():
            if c.nnz == 0:
                continue
            keep = selector_diagonal(lam, P_plus(k1), Sector.of(lam, n).masks)
            worst_i = max(worst_i, float(abs(c @ sp.diags(keep)).max()) if c.nnz else 0.0)
            if K.is_connected():
                worst_ii = max(worst_ii, _norm_by_components(c))
    return {"support_residual": worst_i, "commutator_norm": worst_ii, "gamma": gamma,
            "support_pass": worst_i <= tol, "norm_pass": worst_ii <= gamma + tol}


@functools.lru_cache(maxsize=64)
def _cached_hypotheses(lam: Region, delta: float, n_random: int, seed: int) -> dict:
    # a commutator with a diagonal projection only sees the off-diagonal (flip) part
    # of the operator, so one check per (region, delta) covers every omega, k and E
    T = build_hamiltonian(lam, ModelParams(delta, 0.0), flavor="H0")
    return check_locality_hypotheses(T, 1.0 / delta, n_random=n_random, seed=seed)


@dataclass(frozen=True)
class CTCertificate:
    bound: float
    measured: float
    passed: bool
    rho: object
    C0: float
    m0: float
    hypotheses: dict = field(default_factory=dict)
    flag: str = "NONE"


def ct_certificate(lam: Region, params: ModelParams, k: int, E: float, A, B, omega=None, *,
                   hamiltonian: OperatorMatrix | None = None, solver: SectorSolver | None = None,
                   tol: float = 1e-12, check_hypotheses: bool = True, n_random_K: int = 20,
                   seed: int = 0) -> CTCertificate:
    """Deterministic resolvent decay bound for the modified Hamiltonian ``Hhat_k``.

    ``measured = ||P_-^A (Hhat_k - E)^{-1} P_+^B||`` is compared with
    ``C0 exp(-m0 rho(A, B))`` where ``C0, m0`` come from ``delta0``.
    """
    params.require_certificate_regime()
    if not energy_interval("I_le_k", k, params.delta).contains(E):
        raise PreconditionError(f"E={E} lies outside I_<=k for k={k}")
    A = lam.require_subset(A, "A")
    B = lam.require_subset(B, "B")
    if not A.is_connected():
        raise PreconditionError("A must be connected")
    r = rho(lam, A, B)
    C0, m0 = ct_constants(params.base_delta)
    H = hamiltonian if hamiltonian is not None else build_hamiltonian(lam, params, omega, "Hhat", k=k)
    blk = dressed_resolvent_block(H, E, P_minus(A), P_plus(B), solver=solver)
    bound = 0.0 if r is INFINITE else C0 * math.exp(-m0 * r)
    hyp = _cached_hypotheses(lam, float(params.delta), n_random_K, seed) if check_hypotheses else {}
    passed = blk.operator_norm <= bound + tol
    if hyp:
        passed = passed and hyp["support_pass"] and hyp["norm_pass"]
    return CTCertificate(bound, blk.operator_norm, bool(passed), r, C0, m0, hyp, blk.flag)


# ---------------------------------------------------------------------------
# f estimator and F_{p,q}


@dataclass(frozen=True)
class FEstimate:
    value: float
    theta: Region | None
    j: int | None
    n_theta: int
    flagged: int = 0


def _omega_realization(lam: Region, omega) -> DisorderRealization:
    if isinstance(omega, DisorderRealization):
        return omega
    if isinstance(omega, dict):
        return DisorderRealization(omega)
    return DisorderRealization.from_array(lam, omega)


def _thetas(lam: Region, scope: str) -> Iterable[Region]:
    s = lam.sites
    if scope == "subintervals":
        return (Region(s[a:b + 1]) for a in range(len(s)) for b in range(a, len(s)))
    if scope == "exhaustive":
        if len(s) > 10:
            raise PreconditionError("exhaustive scope is limited to |Lambda| <= 10")
        return (Region(c) for n in range(1, len(s) + 1) for c in itertools.combinations(s, n))
    raise PreconditionError(f"unknown scope {scope!r}")


def f_estimator(lam: Region, params: ModelParams, omega, k: int, E: float, r: int,
                scope: str = "subintervals") -> FEstimate:
    """Single-realisation ``max_Theta max_{j in Theta} ||Q N_j R^Theta_E P_+^{[j]_r} Q||_HS``.

    ``scope="subintervals"`` runs over runs of consecutive sites of ``lam``;
    ``"exhaustive"`` over all non-empty subsets (``|lam| <= 10``).
    """
    if r < 0:
        raise PreconditionError("r must be >= 0")
    om = _omega_realization(lam, omega)
    best, arg, count, flagged = 0.0, (None, None), 0, 0
    for theta in _thetas(lam, scope):
        count += 1
        H = build_hamiltonian(theta, params, om, "H")
        solver = None
        for j in theta.sites:
            right = (P_plus(deform_region(theta, [j], r)), Q_le_k(k))
            left = (Q_le_k(k), N_site(j))
            if solver is None:
                solver = SectorSolver(H, E)
            blk = dressed_resolvent_block(H, E, left, right, solver=solver)
            flagged += blk.near_singular
            if blk.hs_norm > best:
                best, arg = blk.hs_norm, (theta, j)
    return FEstimate(best, arg[0], arg[1], count, flagged)


def F_pq(H: OperatorMatrix, E: float, A, p: int, q: int, k: int, *, solver=None, sectors=None) -> DressedBlock:
    """``Q_{<=k} P_+^{[A]_p} P_-^{]A[_p} R_E P_+^{[A]_q} P_-^{]A[_q} Q_{<=k}``."""
    lam = H.region
    A = lam.require_subset(A, "A")

    def dress(x):
        return (P_plus(deform_region(lam, A, x)), P_minus(shell(lam, A, x)))

    left = (Q_le_k(k),) + dress(p)
    right = dress(q) + (Q_le_k(k),)
    return dressed_resolvent_block(H, E, left, right, solver=solver, sectors=sectors)


# ---------------------------------------------------------------------------
# energy reduction


def embed_tensor(lam: Region, K, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full-space matrix of ``a (x) b`` with ``a`` on ``K`` and ``b`` on ``lam \\ K``.

    ``a`` and ``b`` are full-space matrices of the subregions in their own
    bitmask order.
    """
    K = lam.require_subset(K, "K")
    Kc = lam.complement(K)
    L = len(lam)
    full = np.arange(1 << L, dtype=np.int64)
    kpos = [lam.position(s) for s in K.sites]
    cpos = [lam.position(s) for s in Kc.sites]
    ik = sum(((full >> p) & 1) << t for t, p in enumerate(kpos)) if kpos else np.zeros_like(full)
    ic = sum(((full >> p) & 1) << t for t, p in enumerate(cpos)) if cpos else np.zeros_like(full)
    idx = ik * (1 << len(cpos)) + ic
    big = np.kron(a, b)
    return big[np.ix_(idx, idx)]


def _full_diag(lam: Region, sel: Selector) -> np.ndarray:
    return selector_diagonal(lam, sel, np.arange(1 << len(lam), dtype=np.uint64))


@dataclass(frozen=True)
class EnergyReductionReport:
    residual: float
    projected_residual: float
    vacuum_leak: float
    min_nonzero_nu: float
    gap: float
    lowered_in_band: bool | None
    tol: float

    @property
    def passed(self) -> bool:
        ok = (self.residual < self.tol and self.projected_residual < self.tol and self.vacuum_leak < self.tol
              and self.min_nonzero_nu >= self.gap - self.tol)
        return bool(ok and self.lowered_in_band is not False)


def energy_reduction_check(lam: Region, K, params: ModelParams, omega, E: float, *, K1=None, K2=None,
                           k: int | None = None, tol: float = 1e-10) -> EnergyReductionReport:
    """Check ``R^{K,K^c}_E = sum_nu R^K_{E-nu} (x) pi_{kappa_nu}`` and its projected form.

    ``K1 ⊆ K`` and ``K2 ⊆ K^c`` default to ``K`` and ``K^c``.  With ``k`` given
    (and ``E`` in ``I_<=k``) also checks that every lowered energy
    ``E - nu`` with ``nu >= 1 - 1/delta`` lies in ``I_<=k-1``.
    """
    K = lam.require_subset(K, "K")
    if not K or len(K) == len(lam):
        raise PreconditionError("need a non-empty proper subset K")
    Kc = lam.complement(K)
    K1 = K if K1 is None else K.require_subset(K1, "K1")
    K2 = Kc if K2 is None else Kc.require_subset(K2, "K2")
    om = _omega_realization(lam, omega)
    g = params.gap

    hkk, _ = build_decoupled(lam, K, params, om)
    lhs = np.linalg.inv(hkk.to_dense() - E * np.eye(1 << len(lam)))
    hk = build_hamiltonian(K, params, om, "H").to_dense()
    hc = build_hamiltonian(Kc, params, om, "H").to_dense()
    nu, kappa = np.linalg.eigh(hc)
    eye_k = np.eye(hk.shape[0])
    p1 = np.diag(_full_diag(K, P_minus(K1)))
    p2 = np.diag(_full_diag(Kc, P_minus(K2)))
    rhs = np.zeros_like(lhs)
    rhs_proj = np.zeros_like(lhs)
    for v, u in zip(nu, kappa.T):
        rk = np.linalg.inv(hk - (E - v) * eye_k)
        pk = np.outer(u, u)
        term = embed_tensor(lam, K, rk, pk)
        rhs += term
        if v >= g - tol:
            rhs_proj += embed_tensor(lam, K, p1 @ rk, p2 @ pk)
    proj = np.diag(_full_diag(lam, P_minus(K1)) * _full_diag(lam, P_minus(K2)))
    residual = float(np.linalg.norm(lhs - rhs, 2))
    projected = float(np.linalg.norm(proj @ lhs - rhs_proj, 2))
    vac = nu < g / 2
    leak = float(np.linalg.norm(p2 @ kappa[:, vac], 2)) if vac.any() else 0.0
    nz = nu[~vac]
    min_nu = float(nz.min()) if nz.size else math.inf
    lowered = None
    if k is not None and k >= 1 and energy_interval("I_le_k", k, params.delta).contains(E):
        band = energy_interval("I_le_k", k - 1, params.delta)
        lowered = bool(np.all(band.contains(E - nz)))
    return EnergyReductionReport(residual, projected, leak, min_nu, g, lowered, tol)


# ---------------------------------------------------------------------------
# Borel surrogate and evolution


def _cluster_pair_norm(decomp: EigenDecomposition, index: int, dl_fn, dr_fn) -> float:
    best = 0.0
    for n, u in decomp.cluster_vectors(index):
        masks = Sector.of(decomp.region, n).masks
        x = dl_fn(masks)[:, None] * u
        y = dr_fn(masks)[:, None] * u
        if u.shape[1] == 1:
            val = float(np.linalg.norm(x) * np.linalg.norm(y))
        else:
            m = (x.T @ x) @ (y.T @ y)
            val = math.sqrt(max(0.0, float(np.max(np.linalg.eigvals(m).real))))
        best = max(best, val)
    return best


def borel_theta(lam: Region, params: ModelParams, omega, k: int, A, r: int, *,
                decomposition: EigenDecomposition | None = None) -> float:
    """``sum_{E in sigma(H) ∩ I_<=k} ||P_-^A P_{E} P_+^{[A]_r}||`` over eigenvalue clusters."""
    A = lam.require_subset(A, "A")
    B = deform_region(lam, A, r)
    if rho(lam, A, B) is INFINITE:
        return 0.0
    if decomposition is None:
        decomposition = diagonalize(build_hamiltonian(lam, params, omega, "H"))
    band = energy_interval("I_le_k", k, params.delta)
    dl = functools.partial(selector_diagonal, lam, P_minus(A))
    dr = functools.partial(selector_diagonal, lam, P_plus(B))
    terms = [_cluster_pair_norm(decomposition, i, dl, dr)
             for i, (e, _) in enumerate(decomposition.clusters) if band.contains(e)]
    return math.fsum(terms)


def bump(center: float, width: float, n: int = 3) -> Callable[[np.ndarray], np.ndarray]:
    """``(1 - ((x - c)/w)^2)^(n+1)`` on ``|x - c| < w``, zero outside: compactly supported ``C^n``."""
    if width <= 0 or n < 0:
        raise PreconditionError("bump needs width > 0 and n >= 0")

    def f(x):
        y = (np.asarray(x, dtype=float) - center) / width
        return np.where(np.abs(y) < 1, (1 - y * y) ** (n + 1), 0.0)

    f.smoothness = n
    return f


@dataclass(frozen=True)
class EvolutionReport:
    r: object
    rows: list
    f_value: float | None = None
    f_trend: float | None = None

    @property
    def passed(self) -> bool:
        return all(row[3] for row in self.rows)


def evolution_decay_check(lam: Region, params: ModelParams, omega, A, B, t_list: Sequence[float], *,
                          f_spec: Callable | None = None, decomposition: EigenDecomposition | None = None,
                          tol: float = 1e-12) -> EvolutionReport:
    """``||P_-^A e^{itH} P_+^B||`` against ``(|t|/delta)^r / r!`` with ``r = dist(A, B^c)``.

    ``rows`` holds ``(t, measured, bound, passed)``.  With ``f_spec`` the
    norm of ``P_-^A f(H) P_+^B`` is also reported next to ``r^{-n}``.
    """
    A = lam.require_subset(A, "A")
    B = lam.require_subset(B, "B")
    if not A.is_connected():
        raise PreconditionError("A must be connected")
    if not A.issubset(B):
        raise PreconditionError("A must be contained in B")
    r = set_distance(lam, A, lam.complement(B))
    if r is not INFINITE and r < 1:
        raise PreconditionError("A touches the complement of B (r = 0)")
    if decomposition is None:
        decomposition = diagonalize(build_hamiltonian(lam, params, omega, "H"))
    gamma = 1.0 / params.delta

    def sandwich_norm(phase_fn) -> float:
        best = 0.0
        for n, v in decomposition.values.items():
            masks = Sector.of(lam, n).masks
            rows = np.flatnonzero(selector_diagonal(lam, P_minus(A), masks))
            cols = np.flatnonzero(selector_diagonal(lam, P_plus(B), masks))
            if not len(rows) or not len(cols):
                continue
            u = decomposition.vectors[n]
            m = (u[rows] * phase_fn(v)[None, :]) @ u[cols].T
            best = max(best, operator_norm(m))
        return best

    out = []
    for t in t_list:
        measured = sandwich_norm(lambda v, t=t: np.exp(1j * t * v))
        bound = 0.0 if r is INFINITE else (abs(t) * gamma) ** r / math.factorial(r)
        out.append((float(t), measured, bound, measured <= bound + tol))
    fval = trend = None
    if f_spec is not None:
        fval = sandwich_norm(lambda v: np.asarray(f_spec(v), dtype=float))
        n = getattr(f_spec, "smoothness", None)
        if n is not None and r is not INFINITE:
            trend = float(r) ** (-n)
    return EvolutionReport(r, out, fval, trend)


# ---------------------------------------------------------------------------
# regularity


@dataclass(frozen=True)
class Regularity:
    regular: bool
    F: float
    distance: float
    threshold: float
    witness: object


def _blocks_of(h) -> tuple[Region, dict]:
    if isinstance(h, Compression):
        return h.region, {n: (b, ix) for n, (b, ix) in ((n, (h.blocks[n], h.index[n])) for n in h.blocks)}
    return h.region, {n: (_dense(b), np.arange(b.shape[0])) for n, b in h.blocks.items()}


def regularity(h_sharp, K, m: float, E: float, r: int) -> Regularity:
    """``(m, E, r)``-regularity of ``H^K`` or of a compression of ``H^{K,K^c}``.

    Regular iff ``max_{i in K} ||N_i R_E P_+^{[i]_r^K}|| <= e^{-mr}`` and
    ``dist(E, sigma) > e^{-mr}``.  The witness is the worst site when the
    first condition fails, otherwise the nearest eigenvalue when the second fails.
    """
    region, blocks = _blocks_of(h_sharp)
    K = region.require_subset(K, "K")
    thr = math.exp(-m * r)
    eig = np.concatenate([sla.eigvalsh(b) for b, _ in blocks.values() if b.shape[0]] or [np.zeros(0)])
    dist = float(np.min(np.abs(eig - E))) if eig.size else math.inf
    nearest = float(eig[np.argmin(np.abs(eig - E))]) if eig.size else None
    F, worst = 0.0, None
    if dist > 0:
        for i in K.sites:
            ball = deform_region(K, [i], r)
            val = 0.0
            for n, (b, ix) in blocks.items():
                masks = Sector.of(region, n).masks[ix]
                dl = selector_diagonal(region, N_site(i), masks)
                dr = selector_diagonal(region, P_plus(ball), masks)
                rows, cols = np.flatnonzero(dl), np.flatnonzero(dr)
                if not len(rows) or not len(cols):
                    continue
                rhs = np.zeros((len(ix), len(cols)))
                rhs[cols, np.arange(len(cols))] = 1.0
                x = sla.solve(b - E * np.eye(len(ix)), rhs, assume_a="sym")
                val = max(val, operator_norm(x[rows]))
            if val > F:
                F, worst = val, i
    else:
        F = math.inf
    reg = F <= thr and dist > thr
    witness = None
    if not reg:
        witness = ("site", worst) if F > thr and worst is not None else ("eigenvalue", nearest)
    return Regularity(bool(reg), F, dist, thr, witness)


# ---------------------------------------------------------------------------
# decay fits


class InsufficientSamples(ValueError):
    """Fewer than three samples lie above the fit floor."""


@dataclass(frozen=True)
class DecayProfile:
    """``(r, value)`` samples with a fitted ``value ~ prefactor * exp(-rate * r)``."""

    r: np.ndarray
    values: np.ndarray
    stderr: np.ndarray | None
    rate: float
    prefactor: float
    fit_window: tuple
    r_squared: float
    floor: float
    rate_stderr: float
    rate_ci: tuple | None = None
    n_used: int = 0

    def rows(self) -> list[tuple]:
        se = self.stderr if self.stderr is not None else np.zeros_like(self.values)
        return list(zip(self.r.tolist(), self.values.tolist(), se.tolist()))


def fit_decay(samples, floor: float = 0.0, stderr=None) -> DecayProfile:
    """Least-squares fit of ``log(value)`` against ``r`` over samples above ``floor``.

    Without ``stderr`` an ordinary regression is used.  With ``stderr`` the fit
    is weighted by the delta-method error ``stderr / value`` of ``log(value)``
    and ``rate_ci`` is the 95% normal interval ``rate ± 1.96 sd``.
    """
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("samples must be (r, value) pairs")
    r_all, v_all = arr[:, 0], arr[:, 1]
    se_all = None if stderr is None else np.asarray(stderr, dtype=float)
    keep = v_all > floor
    if keep.sum() < 3:
        raise InsufficientSamples(f"need at least 3 samples above floor {floor}, have {int(keep.sum())}")
    r, y = r_all[keep], np.log(v_all[keep])
    window = (float(r.min()), float(r.max()))
    if se_all is None or not np.any(se_all[keep] > 0):
        fit = stats.linregress(r, y)
        slope, icpt, r2 = fit.slope, fit.intercept, fit.rvalue ** 2
        sd = fit.stderr
        ci = None
        if se_all is not None:
            ci = (-slope - 1.96 * sd, -slope + 1.96 * sd)
    else:
        sig = se_all[keep] / v_all[keep]
        pos = sig[sig > 0]
        sig = np.where(sig > 0, sig, pos.min())
        w = 1.0 / sig ** 2
        X = np.column_stack([np.ones_like(r), r])
        xtwx = X.T @ (w[:, None] * X)
        coef = np.linalg.solve(xtwx, X.T @ (w * y))
        icpt, slope = coef
        cov = np.linalg.inv(xtwx)
        sd = math.sqrt(cov[1, 1])
        ybar = np.sum(w * y) / np.sum(w)
        ss_res = np.sum(w * (y - X @ coef) ** 2)
        ss_tot = np.sum(w * (y - ybar) ** 2)
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
        ci = (-slope - 1.96 * sd, -slope + 1.96 * sd)
    return DecayProfile(r_all, v_all, se_all, float(-slope), float(math.exp(icpt)), window, float(r2),
                        float(floor), float(sd), None if ci is None else (float(ci[0]), float(ci[1])),
                        int(keep.sum()))
