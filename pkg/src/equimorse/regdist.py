"""Whitney cube decompositions and regularized distance functions.

A closed set is described by exact distance primitives (balls, finite point
sets, linear subspaces, unions).  ``whitney_decompose`` covers a box minus
the set by disjoint dyadic cubes whose diameter is comparable to their
distance from the set, and ``RegularizedDistance`` assembles from the cubes
a smooth function comparable to ``dist(., Y | E)`` that agrees with
``dist(., E)`` near the subspace ``E`` away from the obstacle ``Y`` and is
invariant under a finite cyclic symmetry by group averaging.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ResolutionError, ValidationError
from .lochom import CyclicAction


class CoverageWarning(UserWarning):
    """Refinement hit max_depth while cells still border the set."""


_MEMBERSHIP_TOL = 1e-12
_DEFAULT_MAX_DEPTH = {1: 16, 2: 14, 3: 10}
# bump profile: identically 1 up to 1/2, dead from _S_HI on; keeping the
# support strictly inside the 9/8-dilated cube leaves room for the strict
# inclusion supp(phi) in int(Q*)
_S_LO, _S_HI = 0.5, 0.55


def _quintic_step(u):
    # C^2 ramp from 0 to 1 on [0, 1]
    return u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)


def _profile(t: float) -> float:
    a = abs(t)
    if a >= _S_HI:
        return 0.0
    if a <= _S_LO:
        return 1.0
    return _quintic_step((_S_HI - a) / (_S_HI - _S_LO))


def _bump(u) -> float:
    out = 1.0
    for t in u:
        v = _profile(float(t))
        if v == 0.0:
            return 0.0
        out *= v
    return out


class _Ball:
    kind = "ball"

    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=float).reshape(-1)
        self.radius = float(radius)
        if self.radius < 0.0:
            raise ValidationError(f"ball radius must be nonnegative, got {radius}")

    def dist_many(self, pts):
        d = np.linalg.norm(pts - self.center, axis=1) - self.radius
        return np.maximum(d, 0.0)

    def dist_box(self, lo, hi):
        q = np.clip(self.center, lo, hi)
        d = np.linalg.norm(q - self.center, axis=1) - self.radius
        return np.maximum(d, 0.0)

    def contains_box(self, lo, hi):
        far = np.maximum(np.abs(lo - self.center), np.abs(hi - self.center))
        return np.linalg.norm(far, axis=1) <= self.radius

    def to_json(self):
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}


class _Points:
    kind = "points"

    def __init__(self, pts):
        self.pts = np.atleast_2d(np.asarray(pts, dtype=float))

    def dist_many(self, pts):
        diff = pts[:, None, :] - self.pts[None, :, :]
        return np.sqrt((diff ** 2).sum(axis=2)).min(axis=1)

    def dist_box(self, lo, hi):
        q = np.clip(self.pts[None, :, :], lo[:, None, :], hi[:, None, :])
        d = np.sqrt(((q - self.pts[None, :, :]) ** 2).sum(axis=2))
        return d.min(axis=1)

    def contains_box(self, lo, hi):
        return np.zeros(lo.shape[0], dtype=bool)

    def to_json(self):
        return {"kind": "points", "points": self.pts.tolist()}


class _Subspace:
    kind = "subspace"

    def __init__(self, n, vectors):
        n = int(n)
        V = np.asarray(vectors, dtype=float).reshape(-1, n) if len(vectors) else np.zeros((0, n))
        if V.size:
            _, sing, vt = np.linalg.svd(V)
            rank = int((sing > 1e-10 * max(sing[0], 1.0)).sum())
            B = vt[:rank]
        else:
            B = np.zeros((0, n))
        self.n = n
        self.basis = B
        nz = np.abs(B) > 1e-12
        axis = bool(np.all(nz.sum(axis=1) == 1)) and bool(
            np.all(np.abs(np.abs(B[nz]) - 1.0) < 1e-12)
        )
        self.axis_aligned = axis or B.shape[0] == 0
        spanned = set(np.flatnonzero(nz.any(axis=0)).tolist()) if axis else set()
        self.comp = sorted(set(range(n)) - spanned) if self.axis_aligned else None

    @property
    def dim(self):
        return self.basis.shape[0]

    def dist_many(self, pts):
        if self.axis_aligned:
            if not self.comp:
                return np.zeros(len(pts))
            if len(self.comp) == 1:
                return np.abs(pts[:, self.comp[0]])
            return np.sqrt((pts[:, self.comp] ** 2).sum(axis=1))
        perp = pts - (pts @ self.basis.T) @ self.basis
        return np.linalg.norm(perp, axis=1)

    def dist_box(self, lo, hi):
        if self.axis_aligned:
            if not self.comp:
                return np.zeros(lo.shape[0])
            near = np.clip(0.0, lo[:, self.comp], hi[:, self.comp])
            if len(self.comp) == 1:
                return np.abs(near[:, 0])
            return np.sqrt((near ** 2).sum(axis=1))
        return self._dist_box_general(lo, hi)

    def _dist_box_general(self, lo, hi):
        # minimize |x - proj_E x| over each box: enumerate which coordinates
        # sit on a face and solve the free block of the normal equations
        n = self.n
        P = np.eye(n) - self.basis.T @ self.basis
        m = lo.shape[0]
        best = np.full(m, np.inf)
        for pattern in itertools.product((0, 1, 2), repeat=n):
            free = [i for i, p in enumerate(pattern) if p == 2]
            fixed = [i for i, p in enumerate(pattern) if p != 2]
            x = np.zeros((m, n))
            for i in fixed:
                x[:, i] = lo[:, i] if pattern[i] == 0 else hi[:, i]
            ok = np.ones(m, dtype=bool)
            if free:
                pff = P[np.ix_(free, free)]
                pfc = P[np.ix_(free, fixed)] if fixed else np.zeros((len(free), 0))
                rhs = -(x[:, fixed] @ pfc.T) if fixed else np.zeros((m, len(free)))
                sol = rhs @ np.linalg.pinv(pff).T
                x[:, free] = sol
                ok = np.all((sol >= lo[:, free] - 1e-12) & (sol <= hi[:, free] + 1e-12), axis=1)
            val = np.sqrt(np.maximum(((x @ P.T) * x).sum(axis=1), 0.0))
            best = np.where(ok, np.minimum(best, val), best)
        return best

    def contains_box(self, lo, hi):
        full = self.dim == self.n
        return np.full(lo.shape[0], full, dtype=bool)

    def to_json(self):
        return {"kind": "subspace", "n": self.n, "basis": self.basis.tolist()}


class _Tube:
    """Closed radius-r neighborhood of a linear subspace."""

    kind = "tube"

    def __init__(self, n, vectors, radius):
        self.sub = _Subspace(n, vectors)
        self.radius = float(radius)
        if self.radius < 0.0:
            raise ValidationError(f"tube radius must be nonnegative, got {radius}")

    def dist_many(self, pts):
        return np.maximum(self.sub.dist_many(pts) - self.radius, 0.0)

    def dist_box(self, lo, hi):
        return np.maximum(self.sub.dist_box(lo, hi) - self.radius, 0.0)

    def contains_box(self, lo, hi):
        # distance to a subspace is convex, so its maximum over a box sits at
        # a corner
        n = lo.shape[1]
        worst = np.zeros(lo.shape[0])
        for pattern in itertools.product((False, True), repeat=n):
            corner = np.where(np.array(pattern), hi, lo)
            worst = np.maximum(worst, self.sub.dist_many(corner))
        return worst <= self.radius

    def to_json(self):
        return {"kind": "tube", "n": self.sub.n, "basis": self.sub.basis.tolist(),
                "radius": self.radius}


def _primitive_from_json(data):
    kind = data["kind"]
    if kind == "ball":
        return _Ball(data["center"], data["radius"])
    if kind == "points":
        return _Points(data["points"])
    if kind == "subspace":
        return _Subspace(data["n"], data["basis"])
    if kind == "tube":
        return _Tube(data["n"], data["basis"], data["radius"])
    raise ValidationError(f"unknown set primitive kind {kind!r}")


class ClosedSetSpec:
    """Closed subset of R^n with exact point and box distances.

    >>> s = ClosedSetSpec.ball([0.0, 0.0], 1.0).union(
    ...     ClosedSetSpec.points([[3.0, 0.0]]))
    >>> s.dist([2.0, 0.0])
    1.0
    >>> s.contains([0.25, 0.5])
    True
    """

    def __init__(self, n: int, primitives, action=None):
        self.n = int(n)
        if not 1 <= self.n <= 3:
            raise ValidationError(f"dimension must be 1, 2 or 3, got {n}")
        self.primitives = list(primitives)
        self.action = action
        if action is not None:
            if action.d != self.n:
                raise ValidationError("action dimension does not match the set")
            check_invariance(self, action)

    @classmethod
    def ball(cls, center, radius, action=None):
        center = np.asarray(center, dtype=float).reshape(-1)
        return cls(center.size, [_Ball(center, radius)], action=action)

    @classmethod
    def balls(cls, centers, radii, action=None):
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        prims = [_Ball(c, r) for c, r in zip(centers, radii)]
        return cls(centers.shape[1], prims, action=action)

    @classmethod
    def points(cls, pts, action=None):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return cls(pts.shape[1], [_Points(pts)], action=action)

    @classmethod
    def subspace(cls, n, vectors, action=None):
        return cls(n, [_Subspace(n, vectors)], action=action)

    @classmethod
    def tube(cls, n, vectors, radius, action=None):
        return cls(n, [_Tube(n, vectors, radius)], action=action)

    @classmethod
    def empty(cls, n):
        return cls(n, [])

    def union(self, other: "ClosedSetSpec") -> "ClosedSetSpec":
        if other.n != self.n:
            raise ValidationError("cannot union sets of different dimensions")
        return ClosedSetSpec(self.n, self.primitives + other.primitives)

    def dist_many(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if not self.primitives:
            return np.full(pts.shape[0], np.inf)
        return np.min([p.dist_many(pts) for p in self.primitives], axis=0)

    def dist(self, x) -> float:
        return float(self.dist_many(np.asarray(x, dtype=float)[None, :])[0])

    def dist_box(self, lo, hi) -> np.ndarray:
        lo = np.atleast_2d(np.asarray(lo, dtype=float))
        hi = np.atleast_2d(np.asarray(hi, dtype=float))
        if not self.primitives:
            return np.full(lo.shape[0], np.inf)
        return np.min([p.dist_box(lo, hi) for p in self.primitives], axis=0)

    def contains(self, x) -> bool:
        return self.dist(x) <= _MEMBERSHIP_TOL

    def contains_box(self, lo, hi) -> np.ndarray:
        lo = np.atleast_2d(np.asarray(lo, dtype=float))
        hi = np.atleast_2d(np.asarray(hi, dtype=float))
        out = np.zeros(lo.shape[0], dtype=bool)
        for p in self.primitives:
            out |= p.contains_box(lo, hi)
        return out

    def to_json(self) -> dict:
        out = {"n": self.n, "primitives": [p.to_json() for p in self.primitives]}
        if self.action is not None:
            out["action"] = {"matrix": self.action.matrix.tolist(), "k": self.action.k}
        return out

    @classmethod
    def from_json(cls, data: dict) -> "ClosedSetSpec":
        action = None
        if data.get("action"):
            action = CyclicAction(np.array(data["action"]["matrix"]), data["action"]["k"])
        prims = [_primitive_from_json(p) for p in data["primitives"]]
        return cls(data["n"], prims, action=action)


def check_invariance(spec: ClosedSetSpec, action: CyclicAction, samples: int = 64, seed: int = 0):
    """Sampled check that dist(., spec) is invariant under the action."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3.0, 3.0, size=(samples, spec.n))
    base = spec.dist_many(pts)
    moved = spec.dist_many(pts @ action.matrix.T)
    if np.abs(base - moved).max() > 1e-9:
        raise ValidationError("set is not invariant under the action")


def _pack(coords, depth):
    base = (1 << int(depth)) + 2
    out = np.zeros(len(coords), dtype=np.int64)
    for col in coords.T:
        out = out * base + col
    return out


@dataclass
class WhitneyDecomposition:
    """Disjoint dyadic cubes covering a box minus a closed set.

    Cubes are half-open products of intervals; ``coords`` holds the integer
    cell index of each cube at its own depth and ``side0 * 2**-depth`` its
    side length.
    """

    X: ClosedSetSpec
    lo0: np.ndarray
    side0: float
    coords: np.ndarray
    depth: np.ndarray
    truncated: bool
    uncovered_cells: int
    max_depth: int

    def __post_init__(self):
        self.side = self.side0 * np.power(2.0, -self.depth.astype(float))
        self._index = {}
        for i in range(len(self.depth)):
            table = self._index.setdefault(int(self.depth[i]), {})
            table[tuple(int(v) for v in self.coords[i])] = i

    @property
    def n(self) -> int:
        return int(self.lo0.size)

    @property
    def count(self) -> int:
        return int(len(self.depth))

    def corner(self, i: int) -> np.ndarray:
        return self.lo0 + self.coords[i] * self.side[i]

    def lo_corners(self) -> np.ndarray:
        return self.lo0 + self.coords * self.side[:, None]

    def hi_corners(self) -> np.ndarray:
        return self.lo_corners() + self.side[:, None]

    def centers(self) -> np.ndarray:
        return self.lo_corners() + 0.5 * self.side[:, None]

    def diam(self) -> np.ndarray:
        return self.side * math.sqrt(self.n)

    def locate(self, x):
        """Index of the cube whose half-open box contains x, or None."""
        x = np.asarray(x, dtype=float)
        for j, table in self._index.items():
            s = self.side0 * 2.0 ** (-j)
            v = tuple(int(v) for v in np.floor((x - self.lo0) / s))
            i = table.get(v)
            if i is not None:
                return i
        return None

    def star_cubes(self, x):
        """Indices of cubes whose dilated star can carry weight at x."""
        x = np.asarray(x, dtype=float)
        out = []
        for j, table in self._index.items():
            s = self.side0 * 2.0 ** (-j)
            base = np.floor((x - self.lo0) / s).astype(int)
            for off in itertools.product((-1, 0, 1), repeat=self.n):
                i = table.get(tuple(base + np.array(off)))
                if i is None:
                    continue
                center = self.lo0 + (self.coords[i] + 0.5) * s
                if np.max(np.abs(x - center)) < (9.0 / 16.0) * s:
                    out.append(i)
        return out

    def with_extra_cube(self, depth: int, coords) -> "WhitneyDecomposition":
        """Copy with one appended cube; exercises the property checker."""
        c2 = np.vstack([self.coords, np.asarray(coords, dtype=np.int64)[None, :]])
        d2 = np.append(self.depth, int(depth))
        return WhitneyDecomposition(
            X=self.X, lo0=self.lo0, side0=self.side0, coords=c2, depth=d2,
            truncated=self.truncated, uncovered_cells=self.uncovered_cells,
            max_depth=self.max_depth,
        )

    def check(self, samples: int = 0, seed: int = 0) -> dict:
        """Verify disjointness, distance windows and neighbor bounds.

        Raises ValidationError on any violation; returns measured statistics.
        """
        n = self.n
        report = {
            "cubes": self.count,
            "depths": sorted({int(j) for j in self.depth.tolist()}),
            "uncovered_cells": int(self.uncovered_cells),
            "truncated": bool(self.truncated),
            "sample_misses": 0,
        }
        if self.count == 0:
            report.update({
                "dist_diam_ratio": (1.0, 1.0), "neighbor_count_max": 0,
                "neighbor_diam_ratio": (1.0, 1.0), "star_ratio": (1.0, 1.0),
            })
            return report

        # distance-to-diameter window for the cubes themselves
        d = self.X.dist_box(self.lo_corners(), self.hi_corners())
        diam = self.diam()
        if np.any(d < diam * (1.0 - 1e-9)):
            raise ValidationError("a cube is closer to the set than its own diameter")
        if np.any(d > diam * (4.0 + 1e-9)):
            raise ValidationError("a cube sits farther than four diameters from the set")
        ratio = d / diam
        report["dist_diam_ratio"] = (float(ratio.min()), float(ratio.max()))

        # the same window, with wider constants, at the corners of each star
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=n)))
        centers = self.centers()
        star_pts = centers[:, None, :] + (9.0 / 16.0) * self.side[:, None, None] * signs[None, :, :]
        pts = np.concatenate([star_pts.reshape(-1, n), centers])
        per_diam = np.concatenate([np.repeat(diam, 2 ** n), diam])
        sratio = self.X.dist_many(pts) / per_diam
        if sratio.min() < 0.75 - 1e-9 or sratio.max() > 6.0 + 1e-9:
            raise ValidationError("a star point violates the distance-diameter window")
        report["star_ratio"] = (float(sratio.min()), float(sratio.max()))

        # touching scan on the integer grid: disjointness, diameter ratios,
        # neighbor counts; every pair is found from its finer member
        depths = report["depths"]
        by_depth = {j: np.flatnonzero(self.depth == j) for j in depths}
        jmax = depths[-1]
        offsets = np.array(list(itertools.product((-1, 0, 1), repeat=n)), dtype=np.int64)
        zero_off = int(np.flatnonzero(np.all(offsets == 0, axis=1))[0])
        tables = {}
        for j in depths:
            idx = by_depth[j]
            keys = _pack(self.coords[idx] + 1, j)
            order = np.argsort(keys)
            tables[j] = (keys[order], idx[order])
        neighbor_count = np.zeros(self.count, dtype=np.int64)
        gap_max = 0
        for j in depths:
            fine = by_depth[j]
            cf = self.coords[fine]
            scale_f = 1 << (jmax - j)
            lo_f = cf * scale_f
            hi_f = lo_f + scale_f
            for j2 in depths:
                if j2 > j:
                    continue
                base = cf >> (j - j2)
                cand = (base[:, None, :] + offsets[None, :, :]).reshape(-1, n)
                keys = _pack(cand + 1, j2)
                skeys, sidx = tables[j2]
                pos = np.minimum(np.searchsorted(skeys, keys), len(skeys) - 1)
                hit = skeys[pos] == keys
                if not hit.any():
                    continue
                rows = np.repeat(np.arange(len(fine)), len(offsets))[hit]
                offs = np.tile(np.arange(len(offsets)), len(fine))[hit]
                other = sidx[pos[hit]]
                a = fine[rows]
                if j2 < j and np.any(offs == zero_off):
                    raise ValidationError("cubes are not pairwise disjoint")
                if j2 == j:
                    if np.any((offs == zero_off) & (other != a)):
                        raise ValidationError("cubes are not pairwise disjoint")
                    keep = other > a
                else:
                    keep = np.ones(len(a), dtype=bool)
                scale_b = 1 << (jmax - j2)
                lo_b = self.coords[other] * scale_b
                hi_b = lo_b + scale_b
                keep &= np.all((lo_f[rows] <= hi_b) & (lo_b <= hi_f[rows]), axis=1)
                if not keep.any():
                    continue
                if j - j2 > 2:
                    raise ValidationError(
                        "touching cubes differ in diameter by more than a factor of four")
                gap_max = max(gap_max, j - j2)
                np.add.at(neighbor_count, a[keep], 1)
                np.add.at(neighbor_count, other[keep], 1)
        if neighbor_count.max(initial=0) > 12 ** n:
            raise ValidationError("a cube touches more than 12^n others")
        report["neighbor_count_max"] = int(neighbor_count.max(initial=0))
        report["neighbor_diam_ratio"] = (2.0 ** (-gap_max), 2.0 ** gap_max)

        if samples:
            rng = np.random.default_rng(seed)
            pts = rng.uniform(self.lo0, self.lo0 + self.side0, size=(samples, n))
            dists = self.X.dist_many(pts)
            collar = (
                2.0 * math.sqrt(n) * self.side0 * 2.0 ** (-self.max_depth)
                if self.truncated else _MEMBERSHIP_TOL
            )
            misses = 0
            for q, dq in zip(pts, dists):
                if dq <= collar:
                    continue
                if self.locate(q) is None:
                    misses += 1
            report["sample_misses"] = misses
        return report


def whitney_decompose(X: ClosedSetSpec, bbox, min_depth: int = 0, max_depth=None) -> WhitneyDecomposition:
    """Cover bbox minus X by dyadic cubes with diam <= dist(cube, X) <= 4 diam.

    A cell is accepted once its distance to the set reaches its diameter;
    otherwise it splits into 2^n children, down to max_depth.  Leftover
    cells bordering the set at max_depth raise a CoverageWarning: cubes
    accumulate at the set, so truncation there is expected.
    """
    n = X.n
    lo, hi = float(bbox[0]), float(bbox[1])
    if not hi > lo:
        raise ValidationError("bbox upper end must exceed the lower end")
    if max_depth is None:
        max_depth = _DEFAULT_MAX_DEPTH.get(n, 10)
    min_depth, max_depth = int(min_depth), int(max_depth)
    if not 0 <= min_depth <= max_depth:
        raise ValidationError("need 0 <= min_depth <= max_depth")
    side0 = hi - lo
    lo0 = np.full(n, lo)
    children = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)
    cells = np.zeros((1, n), dtype=np.int64)
    acc_coords, acc_depth = [], []
    uncovered = 0
    for j in range(max_depth + 1):
        if len(cells) == 0:
            break
        s = side0 * 2.0 ** (-j)
        clo = lo0 + cells * s
        chi = clo + s
        keepmask = ~X.contains_box(clo, chi)
        cells, clo, chi = cells[keepmask], clo[keepmask], chi[keepmask]
        if len(cells) == 0:
            break
        diam = s * math.sqrt(n)
        if j >= min_depth:
            acc = X.dist_box(clo, chi) >= diam
        else:
            acc = np.zeros(len(cells), dtype=bool)
        if acc.any():
            acc_coords.append(cells[acc])
            acc_depth.extend([j] * int(acc.sum()))
        rest = cells[~acc]
        if j == max_depth:
            uncovered = len(rest)
            break
        cells = (rest[:, None, :] * 2 + children[None, :, :]).reshape(-1, n)
    coords = np.concatenate(acc_coords) if acc_coords else np.zeros((0, n), dtype=np.int64)
    dec = WhitneyDecomposition(
        X=X, lo0=lo0, side0=side0, coords=coords,
        depth=np.asarray(acc_depth, dtype=np.int64),
        truncated=uncovered > 0, uncovered_cells=int(uncovered), max_depth=max_depth,
    )
    dec.check()
    if uncovered:
        warnings.warn(
            f"{uncovered} cells at depth {max_depth} still border the set; "
            "cubes accumulate there", CoverageWarning, stacklevel=2)
    return dec


@dataclass
class RegularizedDistance:
    """Smooth function comparable to dist(., Y | E), exact near E away from Y.

    Cube-wise weights use the dilated-star bump; cubes whose star sits where
    E is strictly closer than Y contribute the exact distance to E, the rest
    contribute their diameter, and the quotient by the partition sum is
    averaged over the group when an action is attached.
    """

    Y: ClosedSetSpec
    E: ClosedSetSpec
    X: ClosedSetSpec
    action: object
    dec: WhitneyDecomposition
    in_u: np.ndarray
    collar: float

    @classmethod
    def build(cls, Y: ClosedSetSpec, E: ClosedSetSpec, action=None,
              bbox=(-2.0, 2.0), min_depth: int = 2, max_depth=None) -> "RegularizedDistance":
        if Y.n != E.n:
            raise ValidationError("Y and E must live in the same dimension")
        if len(E.primitives) != 1 or not isinstance(E.primitives[0], _Subspace):
            raise ValidationError("E must be a single linear subspace")
        if action is not None:
            if action.d != Y.n:
                raise ValidationError("action dimension does not match the sets")
            check_invariance(Y, action)
            check_invariance(E, action)
        X = Y.union(E)
        with warnings.catch_warnings():
            # truncation at the set itself is inherent; evaluation clamps or
            # raises instead
            warnings.simplefilter("ignore", CoverageWarning)
            dec = whitney_decompose(X, bbox, min_depth=min_depth, max_depth=max_depth)
        if dec.count:
            centers = dec.centers()
            rstar = (9.0 / 16.0) * dec.diam()
            in_u = E.dist_many(centers) + rstar < Y.dist_many(centers) - rstar
        else:
            in_u = np.zeros(0, dtype=bool)
        collar = 2.0 * math.sqrt(X.n) * dec.side0 * 2.0 ** (-dec.max_depth)
        return cls(Y=Y, E=E, X=X, action=action, dec=dec, in_u=in_u, collar=collar)

    @property
    def dimension(self) -> int:
        return self.X.n

    def dist(self, x) -> float:
        return self.X.dist(x)

    def partition_sum(self, x) -> float:
        """Sum of cube bumps at x; between 1 and 12^n on covered points."""
        x = self._check_box(x)
        total = 0.0
        for i in self.dec.star_cubes(x):
            total += _bump((x - self.dec.centers()[i]) / self.dec.side[i])
        return total

    def _check_box(self, x):
        x = np.asarray(x, dtype=float)
        lo0, side0 = self.dec.lo0, self.dec.side0
        if np.any(x < lo0) or np.any(x >= lo0 + side0):
            raise ValidationError("query outside the decomposition box")
        return x

    def raw_value(self, x) -> float:
        """The quotient construction before group averaging."""
        x = self._check_box(x)
        if self.X.dist(x) <= _MEMBERSHIP_TOL:
            return 0.0
        if self.dec.locate(x) is None:
            # unresolved collar next to the set: where E is strictly the
            # nearest part we are inside the coincidence region and may
            # return the exact distance
            if self.E.dist(x) < self.Y.dist(x) and self.X.dist(x) <= self.collar:
                return self.E.dist(x)
            raise ResolutionError(
                "query sits in the unresolved collar next to the set; raise max_depth")
        dec = self.dec
        phi_total = 0.0
        phi_u = 0.0
        diam_part = 0.0
        for i in dec.star_cubes(x):
            s = dec.side[i]
            center = dec.lo0 + (dec.coords[i] + 0.5) * s
            phi = _bump((x - center) / s)
            if phi == 0.0:
                continue
            phi_total += phi
            if self.in_u[i]:
                phi_u += phi
            else:
                diam_part += s * math.sqrt(dec.n) * phi
        if diam_part == 0.0:
            # every active cube carries the exact distance to E, so the
            # quotient collapses to it
            return self.E.dist(x)
        return (diam_part + self.E.dist(x) * phi_u) / phi_total

    def value(self, x) -> float:
        if self.action is None or self.action.is_trivial:
            return self.raw_value(x)
        z = np.asarray(x, dtype=float)
        total = 0.0
        for _ in range(self.action.k):
            total += self.raw_value(z)
            z = self.action.matrix @ z
        return total / self.action.k

    def grad(self, x, h: float = 1e-4) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        g = np.zeros(self.dimension)
        for i in range(self.dimension):
            e = np.zeros(self.dimension)
            e[i] = h
            g[i] = (self.value(x + e) - self.value(x - e)) / (2.0 * h)
        return g

    def hess(self, x, h: float = 1e-4) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = self.dimension
        H = np.zeros((n, n))
        v0 = self.value(x)
        for i in range(n):
            ei = np.zeros(n)
            ei[i] = h
            H[i, i] = (self.value(x + ei) - 2.0 * v0 + self.value(x - ei)) / h ** 2
            for j in range(i + 1, n):
                ej = np.zeros(n)
                ej[j] = h
                H[i, j] = H[j, i] = (
                    self.value(x + ei + ej) - self.value(x + ei - ej)
                    - self.value(x - ei + ej) + self.value(x - ei - ej)
                ) / (4.0 * h ** 2)
        return H


@dataclass
class RegdistResult:
    values: np.ndarray
    grads: np.ndarray
    hessians: np.ndarray
    inside: np.ndarray
    func: RegularizedDistance


def regularized_distance(Y: ClosedSetSpec, E: ClosedSetSpec, action=None, queries=(),
                         bbox=(-2.0, 2.0), min_depth: int = 2, max_depth=None) -> RegdistResult:
    """Build the function and evaluate it with finite-difference derivatives.

    Queries on the set itself report value zero with a zero gradient and the
    inside flag set.
    """
    func = RegularizedDistance.build(Y, E, action=action, bbox=bbox,
                                     min_depth=min_depth, max_depth=max_depth)
    queries = [np.asarray(q, dtype=float) for q in queries]
    m, n = len(queries), func.dimension
    values = np.zeros(m)
    grads = np.zeros((m, n))
    hessians = np.zeros((m, n, n))
    inside = np.zeros(m, dtype=bool)
    for i, q in enumerate(queries):
        if func.X.dist(q) <= _MEMBERSHIP_TOL:
            inside[i] = True
            continue
        values[i] = func.value(q)
        grads[i] = func.grad(q)
        hessians[i] = func.hess(q)
    return RegdistResult(values=values, grads=grads, hessians=hessians,
                         inside=inside, func=func)
