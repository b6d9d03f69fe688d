"""Discrete action functionals for Hamiltonian germs under cyclic symmetry.

The functional on R^{2nkN} is A(z) = sum_i x_i (y_{i+1} - y_i) + S_i(x_i, y_{i+1})
with indices mod kN and the step generating functions S_i repeating with
period N.  The last N slots moving to the front generates the Z_k symmetry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import null_space

from .config import DEFAULT_TRUST_RADIUS, tol
from .errors import (
    AmbiguityError,
    ConfigurationError,
    DegeneracyError,
    ResolutionError,
    TrustRegionError,
    ValidationError,
)
from .errors import DomainError
from .hamflow import (
    FlowMap,
    GeneratingFunction,
    HamiltonianGerm,
    adapted_N,
    eval_S,
    hessian_S_at_zero,
    integrate_flow,
    steps_graph_positive,
)


def minimal_adapted_steps(germ: HamiltonianGerm, limit: int = 64) -> int:
    """Smallest N whose substep family passes both step conditions."""
    for N in range(1, limit + 1):
        if adapted_N(germ, N) and steps_graph_positive(germ, N):
            return N
    raise ResolutionError(f"no adapted N up to {limit}")


@dataclass(frozen=True)
class DiscreteAction:
    """The functional A for a germ, iterate count k, and N steps per period.

    >>> da = DiscreteAction(HamiltonianGerm.zero(1), 1, 3)
    >>> da.dim
    6
    >>> index_of_quadratic_action(da)
    2
    """
    germ: HamiltonianGerm
    k: int
    N: int
    radius: float = DEFAULT_TRUST_RADIUS

    def __post_init__(self):
        if self.k < 1 or self.N < 1:
            raise ConfigurationError("k and N must be positive integers")
        if not adapted_N(self.germ, self.N):
            raise ConfigurationError(f"N = {self.N} fails the sampled step condition")
        if not steps_graph_positive(self.germ, self.N):
            raise ConfigurationError(
                f"N = {self.N}: some substep family crosses the graph-condition "
                "boundary; increase N")

    @property
    def n(self) -> int:
        return self.germ.n

    @property
    def slots(self) -> int:
        return self.k * self.N

    @property
    def dim(self) -> int:
        return 2 * self.n * self.slots

    @cached_property
    def S_list(self):
        return tuple(
            GeneratingFunction(FlowMap(self.germ, i / self.N, (i + 1) / self.N,
                                       radius=self.radius), radius=self.radius)
            for i in range(self.N))

    def step_gf(self, i: int) -> GeneratingFunction:
        return self.S_list[i % self.N]

    def x(self, z: np.ndarray, i: int) -> np.ndarray:
        n = self.n
        base = 2 * n * (i % self.slots)
        return z[base:base + n]

    def y(self, z: np.ndarray, i: int) -> np.ndarray:
        n = self.n
        base = 2 * n * (i % self.slots) + n
        return z[base:base + n]


def shift_matrix(da: DiscreteAction) -> np.ndarray:
    """Permutation moving the last N slots to the front."""
    P = np.zeros((da.dim, da.dim))
    b = 2 * da.n
    for j in range(da.slots):
        src = (j - da.N) % da.slots
        P[b * j:b * (j + 1), b * src:b * (src + 1)] = np.eye(b)
    return P


def eval(da: DiscreteAction, z) -> float:
    z = np.asarray(z, dtype=float).reshape(da.dim)
    total = 0.0
    for i in range(da.slots):
        xi, yi, yi1 = da.x(z, i), da.y(z, i), da.y(z, i + 1)
        S, _, _ = eval_S(da.step_gf(i), xi, yi1)
        total += float(xi @ (yi1 - yi)) + S
    return total


def gradient(da: DiscreteAction, z) -> np.ndarray:
    z = np.asarray(z, dtype=float).reshape(da.dim)
    n = da.n
    g = np.zeros(da.dim)
    for i in range(da.slots):
        xi, yi, yi1 = da.x(z, i), da.y(z, i), da.y(z, i + 1)
        g1, g2 = da.step_gf(i).gradient(xi, yi1)
        bx = 2 * n * i
        by1 = 2 * n * ((i + 1) % da.slots) + n
        g[bx:bx + n] += (yi1 - yi) + g1
        g[bx + n:bx + 2 * n] += -xi
        g[by1:by1 + n] += xi + g2
    return g


def _assemble_hessian(da: DiscreteAction, blocks) -> np.ndarray:
    # blocks[i] = D^2 S_i at the step's own point, acting on (x_i, y_{i+1})
    n, dim = da.n, da.dim
    H = np.zeros((dim, dim))
    for i in range(da.slots):
        bx = 2 * n * i
        byy = bx + n
        by1 = 2 * n * ((i + 1) % da.slots) + n
        B = blocks[i]
        H[bx:bx + n, bx:bx + n] += B[:n, :n]
        H[bx:bx + n, by1:by1 + n] += B[:n, n:] + np.eye(n)
        H[by1:by1 + n, bx:bx + n] += B[n:, :n] + np.eye(n)
        H[by1:by1 + n, by1:by1 + n] += B[n:, n:]
        H[bx:bx + n, byy:byy + n] += -np.eye(n)
        H[byy:byy + n, bx:bx + n] += -np.eye(n)
    return H


def hessian_at_zero(da: DiscreteAction) -> np.ndarray:
    blocks = [hessian_S_at_zero(da.step_gf(i)) for i in range(da.slots)]
    return _assemble_hessian(da, blocks)


def hessian_at(da: DiscreteAction, z) -> np.ndarray:
    z = np.asarray(z, dtype=float).reshape(da.dim)
    blocks = [da.step_gf(i).hessian_at(da.x(z, i), da.y(z, i + 1))
              for i in range(da.slots)]
    return _assemble_hessian(da, blocks)


def _signature_counts(eigs: np.ndarray, strict: bool = True):
    """(negative, zero, positive) with the 1e-8-relative threshold.

    With strict counting, eigenvalues inside the band [thr, 10 thr) are
    refused: the integer invariants must not depend on the cut.
    """
    eigs = np.asarray(eigs, dtype=float)
    scale = np.abs(eigs).max() if eigs.size else 0.0
    if scale == 0.0:
        return 0, eigs.size, 0
    thr = tol("eig_threshold") * scale
    mags = np.abs(eigs)
    if strict and np.any((mags >= thr) & (mags < 10 * thr)):
        raise AmbiguityError(
            "eigenvalue magnitudes fall inside the threshold band; the "
            "signature is not trustworthy at this resolution")
    neg = int(np.sum(eigs <= -thr))
    zero = int(np.sum(mags < thr))
    return neg, zero, eigs.size - neg - zero


def index_of_quadratic_action(da: DiscreteAction) -> int:
    """Morse index of 0; equals the Conley-Zehnder index plus n k N."""
    neg, _, _ = _signature_counts(np.linalg.eigvalsh(hessian_at_zero(da)))
    return neg


def nullity_at_zero(da: DiscreteAction) -> int:
    _, zero, _ = _signature_counts(np.linalg.eigvalsh(hessian_at_zero(da)))
    return zero


def diagonal_split(da: DiscreteAction, m: int = 1):
    """Split the Hessian at 0 along the k-fold diagonal of m-period blocks.

    The action da must cover k*m periods; returns (dim E_-, shift preserves
    orientation on E_-) where E_- is the negative space of the block
    perpendicular to the diagonal.
    """
    if da.k % m:
        raise ConfigurationError("da must cover a multiple of m periods")
    k = da.k // m
    Hm = hessian_at_zero(da)
    block = 2 * da.n * m * da.N
    copies = k
    D = np.zeros((da.dim, block))
    for c in range(copies):
        D[c * block:(c + 1) * block, :] = np.eye(block)
    D /= math.sqrt(copies)
    perp = null_space(D.T)
    if perp.shape[1]:
        off = np.abs(D.T @ Hm @ perp).max()
        if off > tol("offdiag"):
            raise ValidationError(f"diagonal and complement couple: off-block {off:.3g}")
    scale = np.abs(np.linalg.eigvalsh(Hm)).max()
    eig_d, _ = np.linalg.eigh(D.T @ Hm @ D)
    eig_p, vec_p = (np.linalg.eigh(perp.T @ Hm @ perp) if perp.shape[1]
                    else (np.zeros(0), np.zeros((0, 0))))
    thr = tol("eig_threshold") * max(scale, 1e-300)
    if np.any(np.abs(eig_d) < 10 * thr):
        raise DegeneracyError(
            "Hessian degenerate along the diagonal: the base periodic point "
            "is degenerate")
    if eig_p.size and np.any(np.abs(eig_p) < 10 * thr):
        raise DegeneracyError(
            "Hessian degenerate transverse to the diagonal: the iterate is "
            "not admissible")
    d_minus = int(np.sum(eig_p < 0))
    if d_minus == 0:
        return 0, True
    basis = perp @ vec_p[:, eig_p < 0]
    sigma = np.zeros((da.dim, da.dim))
    for c in range(copies):
        src = (c - 1) % copies
        sigma[c * block:(c + 1) * block, src * block:(src + 1) * block] = np.eye(block)
    R = basis.T @ sigma @ basis
    if np.abs(sigma @ basis - basis @ R).max() > 1e-6:
        raise ValidationError("negative space is not invariant under the shift")
    return d_minus, bool(np.linalg.det(R) > 0)


def _auxiliary_shift_orientation(n: int, k: int) -> bool:
    """Shift orientation on the negative space of sum_j xi_j . zeta_j.

    Variables are k blocks of pairs (xi, zeta) in R^{2n} x R^{2n}; the
    negative space of each pairing is {xi = -zeta} and the k-cycle permutes
    whole blocks.
    """
    if k == 1:
        return True
    blk = 4 * n  # (xi, zeta), each in R^{2n}
    dim = blk * k
    basis = np.zeros((dim, 2 * n * k))
    col = 0
    for j in range(k):
        for i in range(2 * n):
            v = np.zeros(dim)
            v[j * blk + i] = 1.0 / math.sqrt(2.0)
            v[j * blk + 2 * n + i] = -1.0 / math.sqrt(2.0)
            basis[:, col] = v
            col += 1
    sigma = np.zeros((dim, dim))
    for j in range(k):
        src = (j - 1) % k
        sigma[j * blk:(j + 1) * blk, src * blk:(src + 1) * blk] = np.eye(blk)
    R = basis.T @ sigma @ basis
    return bool(np.linalg.det(R) > 0)


def inflation_index_shift(germ: HamiltonianGerm, k: int, N: int):
    """(index(N+1) - index(N), index(N+2) - index(N)); contract (nk, 2nk)."""
    actions = [DiscreteAction(germ, k, N + j) for j in range(3)]
    if not _auxiliary_shift_orientation(germ.n, k):
        raise ValidationError("auxiliary pairing shift reversed orientation")
    i0, i1, i2 = (index_of_quadratic_action(a) for a in actions)
    return i1 - i0, i2 - i0


@dataclass
class CriticalPoint:
    z: np.ndarray
    residual: float
    converged: bool
    seeds: list
    message: str = ""
    morse_index: int | None = None
    nullity: int | None = None
    orbit: np.ndarray | None = None


def seed_from_point(da: DiscreteAction, w) -> np.ndarray:
    """Seed vector whose slots chain w through the substep flows."""
    w = np.asarray(w, dtype=float).reshape(2 * da.n)
    z = np.zeros(da.dim)
    cur = w
    for i in range(da.slots):
        z[2 * da.n * i:2 * da.n * (i + 1)] = cur
        cur, _ = integrate_flow(da.germ, i / da.N, (i + 1) / da.N, cur,
                                radius=da.radius)
    return z


def _orbit_of(da: DiscreteAction, z: np.ndarray) -> np.ndarray:
    return z.reshape(da.slots, 2 * da.n).copy()


def find_periodic_points(da: DiscreteAction, seeds):
    """Newton on the gradient from each seed; deduplicated by shift orbit.

    Non-convergence is reported per seed, not raised.  Converged points
    carry the orbit samples and local Morse data.
    """
    results: list[CriticalPoint] = []
    tau = shift_matrix(da)
    for si, seed in enumerate(seeds):
        z = np.asarray(seed, dtype=float).reshape(da.dim).copy()
        status = None
        for _ in range(50):
            try:
                g = gradient(da, z)
            except (DomainError, TrustRegionError) as exc:
                status = CriticalPoint(z, math.inf, False, [si], str(exc))
                break
            res = float(np.linalg.norm(g))
            if res < tol("newton_grad"):
                status = CriticalPoint(z, res, True, [si])
                break
            H = hessian_at(da, z)
            if np.linalg.cond(H) < 1e12:
                step = np.linalg.solve(H, g)
            else:
                step = np.linalg.lstsq(H, g, rcond=None)[0]
            z = z - step
        if status is None:
            status = CriticalPoint(z, float(np.linalg.norm(gradient(da, z))),
                                   False, [si], "no convergence in 50 steps")
        if status.converged:
            merged = False
            for prev in results:
                if not prev.converged:
                    continue
                cand = status.z
                for _ in range(da.k):
                    if np.linalg.norm(cand - prev.z) < tol("dedup"):
                        prev.seeds.append(si)
                        merged = True
                        break
                    cand = tau @ cand
                if merged:
                    break
            if merged:
                continue
            Hc = hessian_at(da, status.z)
            try:
                neg, zero, _ = _signature_counts(np.linalg.eigvalsh(Hc))
                status.morse_index, status.nullity = neg, zero
            except AmbiguityError as exc:
                status.message = str(exc)
            status.orbit = _orbit_of(da, status.z)
        results.append(status)
    return results
