"""Hamiltonian germs, their flows with Jacobians, and generating functions.

Sign convention (see config.SIGN_CONVENTION): X_H = -J0 grad H, so
xdot = dH/dy, ydot = -dH/dx.  Every germ is polynomial with monomials of
total degree >= 2 and 1-periodic time factors, hence 0 is a rest point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.integrate import solve_ivp

from .config import DEFAULT_TRUST_RADIUS, standard_symplectic, symplectic_residual, tol
from .errors import (
    ConfigurationError,
    DomainError,
    ResolutionError,
    StiffnessError,
    TrustRegionError,
    ValidationError,
)

_MODES = ("const", "cos", "sin")


@dataclass(frozen=True)
class Term:
    """One monomial c * z^m * f(t) with f(t) in {1, cos(2 pi freq t), sin(2 pi freq t)}."""
    c: float
    m: tuple
    mode: str = "const"
    freq: int = 1

    def time_factor(self, t: float) -> float:
        if self.mode == "const":
            return 1.0
        w = 2.0 * math.pi * self.freq * t
        return math.cos(w) if self.mode == "cos" else math.sin(w)


def _monomial(z, m) -> float:
    out = 1.0
    for zi, mi in zip(z, m):
        if mi:
            out *= zi**mi
    return out


@dataclass(frozen=True)
class HamiltonianGerm:
    """Polynomial Hamiltonian germ on R^{2n}, 1-periodic in t, dH_t(0) = 0.

    >>> g = HamiltonianGerm.rotation(0.25)
    >>> phi, dphi = integrate_flow(g, 0.0, 1.0, [0.1, 0.0])
    >>> bool(np.allclose(dphi, [[0.0, -1.0], [1.0, 0.0]], atol=1e-9))
    True
    """
    n: int
    terms: tuple

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("half-dimension n must be positive")
        for term in self.terms:
            if len(term.m) != 2 * self.n:
                raise ConfigurationError("monomial exponents must have length 2n")
            if any((not isinstance(e, int)) or e < 0 for e in term.m):
                raise ConfigurationError("monomial exponents must be nonnegative integers")
            if sum(term.m) < 2:
                raise ConfigurationError("every monomial needs total degree >= 2")
            if term.mode not in _MODES:
                raise ConfigurationError(f"unknown time mode {term.mode!r}")
            if term.mode != "const" and not isinstance(term.freq, int):
                raise ConfigurationError("time frequency must be an integer")

    @classmethod
    def make(cls, n, terms):
        """Terms given as (c, exponents) or (c, exponents, mode) or (c, exponents, mode, freq)."""
        built = []
        for t in terms:
            c, m = t[0], tuple(t[1])
            mode = t[2] if len(t) > 2 else "const"
            freq = t[3] if len(t) > 3 else 1
            built.append(Term(float(c), m, mode, freq))
        return cls(n, tuple(built))

    @classmethod
    def rotation(cls, alpha: float):
        """H = -pi alpha |z|^2 on R^2; flow is the rotation by angle 2 pi alpha t."""
        a = -math.pi * alpha
        return cls.make(1, [(a, (2, 0)), (a, (0, 2))])

    @classmethod
    def zero(cls, n=1):
        return cls(n, ())

    def value(self, z, t: float) -> float:
        return sum(term.c * term.time_factor(t) * _monomial(z, term.m) for term in self.terms)

    def grad(self, z, t: float) -> np.ndarray:
        d = 2 * self.n
        g = np.zeros(d)
        for term in self.terms:
            cf = term.c * term.time_factor(t)
            for j in range(d):
                if term.m[j]:
                    m = list(term.m)
                    m[j] -= 1
                    g[j] += cf * term.m[j] * _monomial(z, m)
        return g

    def hess(self, z, t: float) -> np.ndarray:
        d = 2 * self.n
        h = np.zeros((d, d))
        for term in self.terms:
            cf = term.c * term.time_factor(t)
            for j in range(d):
                if not term.m[j]:
                    continue
                for l in range(j, d):
                    mult = term.m[j] * (term.m[l] - (1 if l == j else 0))
                    if not mult:
                        continue
                    m = list(term.m)
                    m[j] -= 1
                    m[l] -= 1
                    v = cf * mult * _monomial(z, m)
                    h[j, l] += v
                    if l != j:
                        h[l, j] += v
        return h

    def to_json(self) -> dict:
        out = []
        for term in self.terms:
            time = {"mode": term.mode}
            if term.mode != "const":
                time["freq"] = term.freq
            out.append({"c": term.c, "m": list(term.m), "time": time})
        return {"n": self.n, "terms": out}

    @classmethod
    def from_json(cls, data: dict):
        try:
            n = int(data["n"])
            terms = []
            for raw in data["terms"]:
                time = raw.get("time", {"mode": "const"})
                terms.append(Term(float(raw["c"]), tuple(int(e) for e in raw["m"]),
                                  time.get("mode", "const"), int(time.get("freq", 1))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed Hamiltonian description: {exc}") from exc
        return cls(n, tuple(terms))


def _flow_rhs(germ: HamiltonianGerm, J: np.ndarray):
    d = 2 * germ.n

    def rhs(t, y):
        z = y[:d]
        Phi = y[d:].reshape(d, d)
        dz = -J @ germ.grad(z, t)
        dPhi = -J @ germ.hess(z, t) @ Phi
        return np.concatenate([dz, dPhi.ravel()])

    return rhs


def integrate_flow(germ: HamiltonianGerm, t0: float, t1: float, z, radius=None):
    """Flow z from time t0 to t1; returns (phi(z), dphi(z)).

    Raises DomainError if z starts or travels outside the trust radius and
    StiffnessError if the integrator underflows its step size.
    """
    radius = DEFAULT_TRUST_RADIUS if radius is None else float(radius)
    d = 2 * germ.n
    z = np.asarray(z, dtype=float).reshape(d)
    if np.linalg.norm(z) > radius * (1 + 1e-12):
        raise DomainError(f"start point has |z| = {np.linalg.norm(z):.3g} > trust radius {radius}")
    if t0 == t1 or not germ.terms:
        return z.copy(), np.eye(d)

    def exit_event(t, y):
        return float(np.linalg.norm(y[:d]) - radius)

    exit_event.terminal = True
    exit_event.direction = 1.0
    y0 = np.concatenate([z, np.eye(d).ravel()])
    sol = solve_ivp(_flow_rhs(germ, standard_symplectic(germ.n)), (t0, t1), y0,
                    method="DOP853", rtol=1e-12, atol=1e-13, events=exit_event)
    if sol.status == 1:
        raise DomainError("flow left the trust region before the final time")
    if not sol.success:
        raise StiffnessError(f"flow integration failed: {sol.message}")
    yf = sol.y[:, -1]
    phi, dphi = yf[:d], yf[d:].reshape(d, d)
    res = symplectic_residual(dphi)
    if res > tol("symplectic_flow"):
        raise ValidationError(f"flow Jacobian symplecticity residual {res:.3g}")
    return phi, dphi


def zero_jacobian_path(germ: HamiltonianGerm, T: float):
    """Dense solution t -> dphi^{0->t}(0) as a callable, t in [0, T].

    0 is a rest point, so the Jacobian obeys the linear variational
    equation dPhi/dt = -J0 D^2H_t(0) Phi on its own.
    """
    d = 2 * germ.n
    J = standard_symplectic(germ.n)

    if not germ.terms:
        return lambda t: np.eye(d)

    def rhs(t, y):
        return (-J @ germ.hess(np.zeros(d), t) @ y.reshape(d, d)).ravel()

    sol = solve_ivp(rhs, (0.0, float(T)), np.eye(d).ravel(), method="DOP853",
                    rtol=1e-12, atol=1e-13, dense_output=True)
    if not sol.success:
        raise StiffnessError(f"variational integration failed: {sol.message}")

    def Phi(t):
        if t == 0.0:
            return np.eye(d)
        return sol.sol(t).reshape(d, d)

    return Phi


@dataclass(frozen=True)
class FlowMap:
    """Flow phi_H^{t0 -> t1} evaluable with Jacobian near 0."""
    germ: HamiltonianGerm
    t0: float
    t1: float
    radius: float = DEFAULT_TRUST_RADIUS

    def __call__(self, z):
        return integrate_flow(self.germ, self.t0, self.t1, z, radius=self.radius)

    @cached_property
    def jacobian_at_zero(self) -> np.ndarray:
        _, dphi = self(np.zeros(2 * self.germ.n))
        return dphi


def _gen1_matrix(M: np.ndarray) -> np.ndarray:
    # columns: basis of R^m x 0, then images of the 0 x R^m basis
    d = M.shape[0]
    m = d // 2
    G = np.zeros((d, d))
    G[:m, :m] = np.eye(m)
    G[:, m:] = M[:, m:]
    return G


def check_gen1(psi) -> bool:
    """Graph condition: R^{2m} splits as (R^m x 0) + dpsi(0)(0 x R^m)."""
    M = psi if isinstance(psi, np.ndarray) else psi.jacobian_at_zero
    return bool(abs(np.linalg.det(_gen1_matrix(M))) > tol("gen1_det"))


def adapted_N(germ: HamiltonianGerm, N: int, gap=None) -> bool:
    """Do all substep flows with t1 - t0 <= gap satisfy the graph condition?

    The default gap is 1/(2N); substeps are sampled on a grid of 4N points
    per unit period.
    """
    if N < 1:
        raise ConfigurationError("N must be a positive integer")
    gap = 1.0 / (2 * N) if gap is None else float(gap)
    grid = 4 * N
    Phi = zero_jacobian_path(germ, 1.0)
    mats = [Phi(j / grid) for j in range(grid + 1)]
    max_span = int(round(gap * grid))
    for i in range(grid + 1):
        inv_i = np.linalg.inv(mats[i])
        for j in range(i + 1, min(i + max_span, grid) + 1):
            if not check_gen1(mats[j] @ inv_i):
                return False
    return True


def steps_graph_positive(germ: HamiltonianGerm, N: int, subres: int = 8) -> bool:
    """Does the graph-condition determinant stay positive along growing gaps?

    Substep Jacobians are sampled for gaps up to a full step 1/N.  The
    determinant equals 1 at gap 0, so a nonpositive sample certifies that
    some intermediate substep violates the graph condition even when the
    endpoints of the family satisfy it.
    """
    if N < 1:
        raise ConfigurationError("N must be a positive integer")
    Phi = zero_jacobian_path(germ, 1.0 + 1.0 / N)
    starts = [i / (4 * N) for i in range(4 * N + 1)]
    for t0 in starts:
        inv0 = np.linalg.inv(Phi(t0))
        for j in range(1, subres + 1):
            M = Phi(t0 + j / (subres * N)) @ inv0
            if np.linalg.det(_gen1_matrix(M)) <= tol("gen1_det"):
                return False
    return True


@dataclass(frozen=True)
class GeneratingFunction:
    """Generating function S of one substep flow psi.

    Conventions: psi(x, y) = (X, Y) with y - Y = grad_1 S(x, Y) and
    X - x = grad_2 S(x, Y); S(0) = 0.
    """
    psi: FlowMap
    radius: float = DEFAULT_TRUST_RADIUS

    def __post_init__(self):
        if not check_gen1(self.psi):
            raise ValidationError("substep flow fails the graph condition")

    @property
    def m(self) -> int:
        return self.psi.germ.n

    def solve_graph(self, x, Y):
        """Solve psi(x, y) = (X, Y) for (y, X) by Newton; returns (y, X, dpsi at (x,y))."""
        m = self.m
        x = np.asarray(x, dtype=float).reshape(m)
        Y = np.asarray(Y, dtype=float).reshape(m)
        y = Y.copy()
        try:
            for _ in range(50):
                phi, dphi = self.psi(np.concatenate([x, y]))
                F = phi[m:] - Y
                if np.linalg.norm(F) < tol("gen2_newton"):
                    return y, phi[:m], dphi
                y = y - np.linalg.solve(dphi[m:, m:], F)
        except DomainError as exc:
            raise TrustRegionError(f"graph solve left the trust region: {exc}") from exc
        raise TrustRegionError("no convergence solving the graph equations")

    def gradient(self, x, Y):
        """(grad_1 S, grad_2 S) at (x, Y)."""
        y, X, _ = self.solve_graph(x, Y)
        return y - np.asarray(Y, dtype=float), X - np.asarray(x, dtype=float)

    def hessian_at(self, x, Y) -> np.ndarray:
        """D^2 S(x, Y) from the blocks of dpsi at the solved point."""
        m = self.m
        _, _, dphi = self.solve_graph(x, Y)
        A, B = dphi[:m, :m], dphi[:m, m:]
        C, D = dphi[m:, :m], dphi[m:, m:]
        Dinv = np.linalg.inv(D)
        H = np.block([[-Dinv @ C, Dinv - np.eye(m)],
                      [A - B @ Dinv @ C - np.eye(m), B @ Dinv]])
        asym = np.abs(H - H.T).max()
        if asym > tol("hessian_sym"):
            raise ValidationError(f"generating-function Hessian asymmetry {asym:.3g}")
        return 0.5 * (H + H.T)


def eval_S(gf: GeneratingFunction, x, Y):
    """(S, grad_1 S, grad_2 S) at (x, Y); S is the radial line integral of dS.

    The integrand s -> <grad S(s x, s Y), (x, Y)> is evaluated with
    Gauss-Legendre rules of doubling order until two answers agree.
    """
    m = gf.m
    x = np.asarray(x, dtype=float).reshape(m)
    Y = np.asarray(Y, dtype=float).reshape(m)
    if np.linalg.norm(np.concatenate([x, Y])) > gf.radius * (1 + 1e-12):
        raise DomainError("(x, Y) outside the trust region")
    g1, g2 = gf.gradient(x, Y)
    if not np.any(x) and not np.any(Y):
        return 0.0, g1, g2

    def integrand(s):
        h1, h2 = gf.gradient(s * x, s * Y)
        return float(h1 @ x + h2 @ Y)

    prev = None
    order = 8
    while order <= 128:
        nodes, weights = np.polynomial.legendre.leggauss(order)
        s_vals = 0.5 * (nodes + 1.0)
        total = 0.5 * sum(w * integrand(s) for w, s in zip(weights, s_vals))
        if prev is not None and abs(total - prev) < tol("quadrature"):
            return total, g1, g2
        prev = total
        order *= 2
    raise ResolutionError("quadrature for S did not settle")


def hessian_S_at_zero(gf: GeneratingFunction) -> np.ndarray:
    """D^2 S(0) = J0 (dpsi(0) - I) dT(0)^{-1} with T(x, y) = (x, Y)."""
    m = gf.m
    M = gf.psi.jacobian_at_zero
    J = standard_symplectic(m)
    dT = np.zeros((2 * m, 2 * m))
    dT[:m, :m] = np.eye(m)
    dT[m:, :] = M[m:, :]
    if abs(np.linalg.det(dT[m:, m:])) <= tol("gen1_det"):
        raise ValidationError("graph condition fails: dT(0) is singular")
    H = J @ (M - np.eye(2 * m)) @ np.linalg.inv(dT)
    asym = np.abs(H - H.T).max()
    if asym > tol("hessian_sym"):
        raise ValidationError(f"generating-function Hessian asymmetry {asym:.3g}")
    return 0.5 * (H + H.T)


def substep_jacobians_at_zero(germ: HamiltonianGerm, N: int):
    """Jacobians dpsi_i(0) of the N substep flows psi_i = phi^{i/N} (phi^{(i-1)/N})^{-1}."""
    Phi = zero_jacobian_path(germ, 1.0)
    grid = [Phi(i / N) for i in range(N + 1)]
    return [grid[i] @ np.linalg.inv(grid[i - 1]) for i in range(1, N + 1)]


def linearized_path(germ: HamiltonianGerm, periods: int = 1, samples_per_period: int = 64):
    """The linearized flow at 0 over [0, periods] as a spindex.SymplecticPath."""
    from .spindex import SymplecticPath

    Phi = zero_jacobian_path(germ, float(periods))
    ts = np.linspace(0.0, float(periods), samples_per_period * periods + 1)
    return SymplecticPath(germ.n, [(t, Phi(t)) for t in ts],
                          source=Phi, germ=germ, periods=int(periods))
