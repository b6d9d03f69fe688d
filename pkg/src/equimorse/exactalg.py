"""Exact rational linear algebra, graded chain complexes, cyclic actions, homology."""
from __future__ import annotations

from fractions import Fraction

from .errors import ConfigurationError, ShapeError, ValidationError

Mat = "list[list[Fraction]]"


def parse_rational(s: str) -> Fraction:
    """Parse "p/q" or "p" into a reduced rational."""
    return Fraction(str(s))


def format_rational(q: Fraction) -> str:
    if q.denominator == 1:
        return str(q.numerator)
    return f"{q.numerator}/{q.denominator}"


def zeros(rows: int, cols: int) -> Mat:
    return [[Fraction(0)] * cols for _ in range(rows)]


def identity(m: int) -> Mat:
    out = zeros(m, m)
    for i in range(m):
        out[i][i] = Fraction(1)
    return out


def mat_mul(A: Mat, B: Mat) -> Mat:
    if A and B and len(A[0]) != len(B):
        raise ShapeError(f"cannot multiply {len(A)}x{len(A[0])} by {len(B)}x{len(B[0])}")
    cols = len(B[0]) if B else 0
    out = zeros(len(A), cols)
    for i, row in enumerate(A):
        for k, a in enumerate(row):
            if a:
                Bk = B[k]
                oi = out[i]
                for j in range(cols):
                    if Bk[j]:
                        oi[j] += a * Bk[j]
    return out


def mat_add(A: Mat, B: Mat) -> Mat:
    return [[a + b for a, b in zip(ra, rb)] for ra, rb in zip(A, B)]


def mat_scale(c: Fraction, A: Mat) -> Mat:
    return [[c * a for a in row] for row in A]


def is_zero(A: Mat) -> bool:
    return all(a == 0 for row in A for a in row)


def rref(A: Mat):
    """Reduced row echelon form; returns (R, pivot column list)."""
    R = [row[:] for row in A]
    nrows = len(R)
    ncols = len(R[0]) if nrows else 0
    pivots = []
    r = 0
    for c in range(ncols):
        if r == nrows:
            break
        p = next((i for i in range(r, nrows) if R[i][c] != 0), None)
        if p is None:
            continue
        R[r], R[p] = R[p], R[r]
        inv = R[r][c]
        R[r] = [v / inv for v in R[r]]
        for i in range(nrows):
            if i != r and R[i][c] != 0:
                f = R[i][c]
                R[i] = [a - f * b for a, b in zip(R[i], R[r])]
        pivots.append(c)
        r += 1
    return R, pivots


def rank(A: Mat) -> int:
    return len(rref(A)[1])


def kernel_basis(A: Mat, ncols: int | None = None) -> list[list[Fraction]]:
    """Basis vectors (as columns) of ker A; ncols needed when A has no rows."""
    if ncols is None:
        ncols = len(A[0]) if A else 0
    if not A:
        return [[Fraction(int(i == j)) for i in range(ncols)] for j in range(ncols)]
    R, pivots = rref(A)
    free = [c for c in range(ncols) if c not in pivots]
    basis = []
    for f in free:
        v = [Fraction(0)] * ncols
        v[f] = Fraction(1)
        for i, p in enumerate(pivots):
            v[p] = -R[i][f]
        basis.append(v)
    return basis


def column_space_basis(A: Mat) -> list[list[Fraction]]:
    """Columns of A forming a basis of the column space."""
    _, pivots = rref(A)
    return [[row[c] for row in A] for c in pivots]


def cols_to_mat(cols: list[list[Fraction]], nrows: int) -> Mat:
    return [[col[i] for col in cols] for i in range(nrows)]


def solve_columns(B: Mat, Y: Mat) -> Mat:
    """Solve B X = Y for X, with B of full column rank; exact."""
    nrows = len(B)
    p = len(B[0]) if B else 0
    q = len(Y[0]) if Y else 0
    aug = [B[i] + Y[i] for i in range(nrows)]
    R, pivots = rref(aug)
    if pivots[:p] != list(range(p)) or len(pivots) > p:
        raise ValidationError("system is inconsistent or B is column-rank deficient")
    X = zeros(p, q)
    for i in range(p):
        for j in range(q):
            X[i][j] = R[i][p + j]
    return X


def sparse_rank(columns: list[dict[int, Fraction]]) -> int:
    """Rank over Q of a matrix given as sparse {row: coeff} columns."""
    cols = {j: {r: v for r, v in col.items() if v} for j, col in enumerate(columns)}
    cols = {j: col for j, col in cols.items() if col}
    row_occ: dict[int, set[int]] = {}
    for j, col in cols.items():
        for r in col:
            row_occ.setdefault(r, set()).add(j)
    rk = 0
    while cols:
        # pivot: scan the sparsest column, take its entry with fewest row occupants,
        # preferring +-1 values to limit fraction growth
        pc = min(cols, key=lambda j: len(cols[j]))
        best = None
        for r, v in cols[pc].items():
            key = (0 if abs(v) == 1 else 1, len(row_occ[r]))
            if best is None or key < best[0]:
                best = (key, r)
        pr = best[1]
        pv = cols[pc][pr]
        targets = [j for j in row_occ[pr] if j != pc]
        pcol = cols.pop(pc)
        for r in pcol:
            row_occ[r].discard(pc)
        for j in targets:
            col = cols[j]
            f = col[pr] / pv
            for r, v in pcol.items():
                new = col.get(r, Fraction(0)) - f * v
                if new:
                    if r not in col:
                        row_occ.setdefault(r, set()).add(j)
                    col[r] = new
                elif r in col:
                    del col[r]
                    row_occ[r].discard(j)
            if not col:
                del cols[j]
        rk += 1
    return rk


def _is_signed_permutation(T: Mat) -> bool:
    m = len(T)
    for row in T:
        nz = [a for a in row if a != 0]
        if len(nz) != 1 or abs(nz[0]) != 1:
            return False
    for c in range(m):
        if sum(1 for i in range(m) if T[i][c] != 0) != 1:
            return False
    return True


class GradedChainComplex:
    """Finitely generated chain complex over Q, optionally with a Z_k action.

    Generators are named and ordered per degree; the differential drops degree
    by one.  The action is the matrix of 1 in Z_k and must be a signed
    permutation commuting with the differential.

    >>> cx = GradedChainComplex(
    ...     k=2,
    ...     generators={2: ["x"], 1: ["y", "z"]},
    ...     differential={"x": {"y": 1, "z": -1}},
    ...     action={"x": {"x": -1}, "y": {"y": -1}, "z": {"z": -1}})
    >>> homology_betti(cx)
    {1: 1}
    >>> invariant_homology_betti(cx)
    {}
    """

    def __init__(self, k, generators, differential=None, action=None):
        if k < 1:
            raise ValidationError(f"order k must be positive, got {k}")
        self.k = int(k)
        self.generators = {int(d): list(names) for d, names in generators.items() if names}
        self.degrees = sorted(self.generators)
        self._deg_of = {}
        self._pos = {}
        for d, names in self.generators.items():
            for i, name in enumerate(names):
                if name in self._deg_of:
                    raise ValidationError(f"duplicate generator name {name!r}")
                self._deg_of[name] = d
                self._pos[name] = i
        self.d_mat = {}
        for d in self.degrees:
            self.d_mat[d] = zeros(self.dim(d - 1), self.dim(d))
        for src, targets in (differential or {}).items():
            d = self._require(src)
            for dst, coeff in targets.items():
                if self._require(dst) != d - 1:
                    raise ShapeError(f"differential {src!r}->{dst!r} must drop degree by 1")
                self.d_mat[d][self._pos[dst]][self._pos[src]] = Fraction(coeff)
        self.t_mat = None
        if action is not None:
            self.t_mat = {d: zeros(self.dim(d), self.dim(d)) for d in self.degrees}
            for src, targets in action.items():
                d = self._require(src)
                for dst, coeff in targets.items():
                    if self._require(dst) != d:
                        raise ShapeError(f"action {src!r}->{dst!r} must preserve degree")
                    self.t_mat[d][self._pos[dst]][self._pos[src]] = Fraction(coeff)
        self._validate()

    def _require(self, name):
        if name not in self._deg_of:
            raise ValidationError(f"unknown generator {name!r}")
        return self._deg_of[name]

    def dim(self, d: int) -> int:
        return len(self.generators.get(d, ()))

    def boundary(self, d: int) -> Mat:
        return self.d_mat.get(d, zeros(self.dim(d - 1), self.dim(d)))

    def action_matrix(self, d: int) -> Mat:
        if self.t_mat is None:
            raise ConfigurationError("complex has no action")
        return self.t_mat[d]

    def _validate(self):
        for d in self.degrees:
            if self.dim(d - 1) > 0 and self.dim(d - 2) >= 0:
                sq = mat_mul(self.boundary(d - 1), self.boundary(d))
                if not is_zero(sq):
                    raise ValidationError(f"differential does not square to zero at degree {d}")
        if self.t_mat is None:
            return
        for d in self.degrees:
            T = self.t_mat[d]
            if not _is_signed_permutation(T):
                raise ValidationError(f"action at degree {d} is not a signed permutation")
            P = identity(self.dim(d))
            for _ in range(self.k):
                P = mat_mul(T, P)
            if P != identity(self.dim(d)):
                raise ValidationError(f"action does not have order dividing k={self.k} at degree {d}")
            if self.dim(d - 1):
                lhs = mat_mul(self.t_mat[d - 1], self.boundary(d))
                rhs = mat_mul(self.boundary(d), T)
                if lhs != rhs:
                    raise ValidationError(f"action does not commute with the differential at degree {d}")

    def averaging(self, d: int) -> Mat:
        """A = (1/k) sum of T^i on degree d; idempotent projector onto invariants."""
        T = self.action_matrix(d)
        m = self.dim(d)
        acc = zeros(m, m)
        P = identity(m)
        for _ in range(self.k):
            acc = mat_add(acc, P)
            P = mat_mul(T, P)
        return mat_scale(Fraction(1, self.k), acc)

    def to_json(self) -> dict:
        diff = []
        for d in self.degrees:
            D = self.boundary(d)
            for j, src in enumerate(self.generators[d]):
                for i, dst in enumerate(self.generators.get(d - 1, [])):
                    if D[i][j]:
                        diff.append({"from": src, "to": dst, "coeff": format_rational(D[i][j])})
        doc = {
            "k": self.k,
            "generators": {str(d): list(names) for d, names in self.generators.items()},
            "differential": diff,
        }
        if self.t_mat is not None:
            act = []
            for d in self.degrees:
                T = self.t_mat[d]
                for j, src in enumerate(self.generators[d]):
                    for i, dst in enumerate(self.generators[d]):
                        if T[i][j]:
                            act.append({"from": src, "to": dst, "coeff": format_rational(T[i][j])})
            doc["action"] = act
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "GradedChainComplex":
        generators = {int(d): names for d, names in doc["generators"].items()}
        diff: dict = {}
        for e in doc.get("differential", []):
            diff.setdefault(e["from"], {})[e["to"]] = parse_rational(e["coeff"])
        action = None
        if "action" in doc:
            action = {}
            for e in doc["action"]:
                action.setdefault(e["from"], {})[e["to"]] = parse_rational(e["coeff"])
        return cls(k=doc["k"], generators=generators, differential=diff, action=action)


def homology_betti(cx: GradedChainComplex) -> dict:
    """Betti numbers over Q by degree; zero entries omitted."""
    out = {}
    for d in cx.degrees:
        ker = cx.dim(d) - rank(cx.boundary(d))
        b = ker - rank(cx.boundary(d + 1))
        if b:
            out[d] = b
    return out


def _invariant_subcomplex(cx: GradedChainComplex):
    """Per-degree basis of im A and the differential in that basis."""
    basis = {}
    for d in cx.degrees:
        basis[d] = column_space_basis(cx.averaging(d))
    dmats = {}
    for d in cx.degrees:
        Bd = cols_to_mat(basis[d], cx.dim(d))
        img = mat_mul(cx.boundary(d), Bd)
        prev = basis.get(d - 1, [])
        if not prev:
            if not is_zero(img):
                raise ValidationError("averaged differential leaves the invariant subcomplex")
            dmats[d] = zeros(0, len(basis[d]))
        else:
            Bprev = cols_to_mat(prev, cx.dim(d - 1))
            dmats[d] = solve_columns(Bprev, img)
    return basis, dmats


def invariant_homology_betti(cx: GradedChainComplex) -> dict:
    """Betti numbers of the invariant subcomplex; cross-checked on homology."""
    basis, dmats = _invariant_subcomplex(cx)
    out = {}
    for d in cx.degrees:
        dim_inv = len(basis[d])
        ker = dim_inv - rank(dmats[d])
        b = ker - rank(dmats.get(d + 1, zeros(0, 0)))
        # independent route: rank of the induced averaging operator on H_d
        Z = kernel_basis(cx.boundary(d), cx.dim(d))
        img_cols = [[row[c] for row in cx.boundary(d + 1)] for c in range(cx.dim(d + 1))]
        A = cx.averaging(d)
        AZ = [[sum(A[i][j] * z[j] for j in range(cx.dim(d))) for i in range(cx.dim(d))] for z in Z]
        stacked = cols_to_mat(AZ + img_cols, cx.dim(d))
        b_check = rank(stacked) - rank(cols_to_mat(img_cols, cx.dim(d)))
        if b != b_check:
            raise ValidationError(
                f"invariant subcomplex betti {b} != rank of averaging on homology {b_check} at degree {d}")
        if b:
            out[d] = b
    return out


def euler_characteristic(betti: dict) -> int:
    return sum((-1) ** int(d) * int(b) for d, b in betti.items())


def tensor_with_shift(cx: GradedChainComplex, mu: int, sign_flip: bool) -> GradedChainComplex:
    """Shift degrees by mu (tensor with one nondegenerate generator); optionally negate the action."""
    if sign_flip and cx.t_mat is None:
        raise ConfigurationError("sign_flip requires an action")
    generators = {d + mu: list(names) for d, names in cx.generators.items()}
    diff = {}
    for d in cx.degrees:
        D = cx.boundary(d)
        for j, src in enumerate(cx.generators[d]):
            for i, dst in enumerate(cx.generators.get(d - 1, [])):
                if D[i][j]:
                    diff.setdefault(src, {})[dst] = D[i][j]
    action = None
    if cx.t_mat is not None:
        sign = Fraction(-1) if sign_flip else Fraction(1)
        action = {}
        for d in cx.degrees:
            T = cx.t_mat[d]
            for j, src in enumerate(cx.generators[d]):
                for i, dst in enumerate(cx.generators[d]):
                    if T[i][j]:
                        action.setdefault(src, {})[dst] = sign * T[i][j]
    return GradedChainComplex(k=cx.k, generators=generators, differential=diff, action=action)
