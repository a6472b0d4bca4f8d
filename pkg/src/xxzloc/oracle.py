"""Brute-force full-space operators built from Kronecker products.

Independent of the bitmask stamping in :mod:`xxzloc.operators`; used as a
cross-check.  Local basis: index 0 is spin up (empty), 1 is spin down
(occupied).  The full-space index has bit ``p`` equal to the state of
``region.sites[p]``, matching the bitmask ordering.
"""
from __future__ import annotations

from functools import reduce

import numpy as np

from .lattice import Region

__all__ = ["local_op", "full_hamiltonian", "full_number", "full_projector_plus", "SIGMA_MINUS", "SIGMA_PLUS", "NUMBER"]

SIGMA_MINUS = np.array([[0.0, 0.0], [1.0, 0.0]])  # up -> down: creates a particle
SIGMA_PLUS = SIGMA_MINUS.T.copy()
NUMBER = np.array([[0.0, 0.0], [0.0, 1.0]])
EYE = np.eye(2)


def local_op(L: int, factors: dict) -> np.ndarray:
    """``prod_p factors[p]`` on ``L`` qubits, bit ``p`` least significant first."""
    mats = [factors.get(p, EYE) for p in range(L)]
    return reduce(np.kron, mats[::-1])


def full_number(region: Region, sites=None) -> np.ndarray:
    L = len(region)
    sites = region.sites if sites is None else sites
    return sum((local_op(L, {region.position(s): NUMBER}) for s in sites), np.zeros((1 << L, 1 << L)))


def full_projector_plus(region: Region, sites) -> np.ndarray:
    L = len(region)
    return local_op(L, {region.position(s): EYE - NUMBER for s in sites})


def full_hamiltonian(region: Region, delta: float, lam: float = 0.0, omega=None, support=None) -> np.ndarray:
    """``sum h_{i,i+1} + N + lam sum omega_i N_i`` over bonds and sites of ``support``."""
    L = len(region)
    sup = set(region.sites if support is None else support)
    H = np.zeros((1 << L, 1 << L))
    for s in region.sites:
        if s in sup and s + 1 in sup and s + 1 in region:
            p, q = region.position(s), region.position(s + 1)
            H -= local_op(L, {p: NUMBER, q: NUMBER})
            flip = local_op(L, {p: SIGMA_PLUS, q: SIGMA_MINUS}) + local_op(L, {p: SIGMA_MINUS, q: SIGMA_PLUS})
            H -= flip / (2.0 * delta)
    for idx, s in enumerate(region.sites):
        if s not in sup:
            continue
        w = 0.0 if omega is None else float(omega[idx])
        H += (1.0 + lam * w) * local_op(L, {idx: NUMBER})
    return H
