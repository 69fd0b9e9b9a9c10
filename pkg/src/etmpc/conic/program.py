"""Solver-agnostic conic program representation.

A program owns a flat vector of scalar decision variables.  Symmetric matrix
variables are views onto that vector (one scalar per upper-triangle entry).
Constraints are affine in the scalars:

* PSD: an affine symmetric matrix expression required <= 0 (negative
  semidefinite), assembled from block grids of :class:`AffMat` cells.
* SOC: ||v(x)||_2 <= s(x) with v an affine vector and s an affine scalar.
* linear equalities / inequalities on affine scalars.

The objective is a linear functional plus optional coefficient*logdet(M)
terms to be maximized (used by the offline design; reformulated before
solving).
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from ..errors import IllPosedProgram

# Shared relaxation of strict inequalities (tau > 0 becomes tau >= EPS).
EPS = 1e-8


def _aslin(v) -> "LinExpr":
    if isinstance(v, LinExpr):
        return v
    if isinstance(v, ScalarVar):
        return LinExpr({v.index: 1.0}, 0.0)
    if np.isscalar(v):
        return LinExpr({}, float(v))
    raise TypeError(f"cannot interpret {type(v).__name__} as a linear expression")


class LinExpr:
    """Sparse affine scalar expression const + sum_i coeffs[i]*x_i."""

    __slots__ = ("coeffs", "const")

    def __init__(self, coeffs: dict[int, float] | None = None, const: float = 0.0):
        self.coeffs = dict(coeffs) if coeffs else {}
        self.const = float(const)

    def copy(self) -> "LinExpr":
        return LinExpr(self.coeffs, self.const)

    def __add__(self, other):
        other = _aslin(other)
        out = self.copy()
        out.const += other.const
        for i, c in other.coeffs.items():
            out.coeffs[i] = out.coeffs.get(i, 0.0) + c
        return out

    __radd__ = __add__

    def __sub__(self, other):
        return self + (_aslin(other) * -1.0)

    def __rsub__(self, other):
        return _aslin(other) + (self * -1.0)

    def __mul__(self, a):
        a = float(a)
        return LinExpr({i: c * a for i, c in self.coeffs.items()}, self.const * a)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[i] for i, c in self.coeffs.items())

    def variables(self) -> Iterable[int]:
        return self.coeffs.keys()


class ScalarVar:
    """Named scalar decision variable; optional lower bound."""

    __slots__ = ("index", "name", "lb")

    def __init__(self, index: int, name: str, lb: float | None):
        self.index = index
        self.name = name
        self.lb = lb

    @property
    def ex(self) -> LinExpr:
        return LinExpr({self.index: 1.0}, 0.0)

    def __add__(self, other):
        return self.ex + other

    __radd__ = __add__

    def __sub__(self, other):
        return self.ex - other

    def __rsub__(self, other):
        return _aslin(other) - self.ex

    def __mul__(self, a):
        return self.ex * a

    __rmul__ = __mul__

    def __neg__(self):
        return self.ex * -1.0

    def __repr__(self):
        return f"ScalarVar({self.name})"


class MatrixVar:
    """Symmetric n x n matrix variable; entries live in the scalar vector.

    ``indices[i, j]`` is the scalar index of entry (i, j); symmetric pairs
    share the same scalar.
    """

    __slots__ = ("name", "n", "indices")

    def __init__(self, name: str, n: int, first_index: int):
        self.name = name
        self.n = n
        idx = np.empty((n, n), dtype=np.intp)
        k = first_index
        for i in range(n):
            for j in range(i, n):
                idx[i, j] = idx[j, i] = k
                k += 1
        self.indices = idx

    @property
    def n_scalars(self) -> int:
        return self.n * (self.n + 1) // 2

    def entry(self, i: int, j: int) -> LinExpr:
        return LinExpr({int(self.indices[i, j]): 1.0}, 0.0)

    def ex(self) -> "AffMat":
        """Identity affine map: the matrix variable itself as an AffMat."""
        n = self.n
        terms: dict[int, np.ndarray] = {}
        for i in range(n):
            for j in range(i, n):
                C = np.zeros((n, n))
                C[i, j] = 1.0
                C[j, i] = 1.0
                terms[int(self.indices[i, j])] = C
        return AffMat((n, n), np.zeros((n, n)), terms)

    def value(self, x: np.ndarray) -> np.ndarray:
        return x[self.indices]

    def __repr__(self):
        return f"MatrixVar({self.name}, {self.n}x{self.n})"


class AffMat:
    """Affine matrix expression const + sum_i terms[i]*x_i (dense cells).

    Instances are treated as immutable; arithmetic returns new objects, so
    cells may be shared between many constraints without copying.
    """

    __slots__ = ("shape", "const", "terms")

    # make ndarray operators defer to the reflected methods below
    __array_priority__ = 1000.0

    def __init__(self, shape: tuple[int, int], const: np.ndarray | None = None,
                 terms: dict[int, np.ndarray] | None = None):
        self.shape = (int(shape[0]), int(shape[1]))
        self.const = np.zeros(self.shape) if const is None else np.asarray(const, float)
        if self.const.shape != self.shape:
            raise ValueError("const shape mismatch")
        self.terms = terms or {}

    # ---- constructors ----

    @staticmethod
    def constant(arr) -> "AffMat":
        arr = np.atleast_2d(np.asarray(arr, float))
        return AffMat(arr.shape, arr, {})

    @staticmethod
    def zeros(r: int, c: int) -> "AffMat":
        return AffMat((r, c))

    @staticmethod
    def scale_of(lin, C) -> "AffMat":
        """Affine scalar times constant matrix: lin(x) * C."""
        lin = _aslin(lin)
        C = np.atleast_2d(np.asarray(C, float))
        terms = {i: a * C for i, a in lin.coeffs.items() if a != 0.0}
        return AffMat(C.shape, lin.const * C, terms)

    @staticmethod
    def row_of(exprs: Sequence) -> "AffMat":
        """1 x k row whose entries are affine scalars."""
        exprs = [_aslin(e) for e in exprs]
        k = len(exprs)
        const = np.array([[e.const for e in exprs]])
        terms: dict[int, np.ndarray] = {}
        for j, e in enumerate(exprs):
            for i, a in e.coeffs.items():
                if i not in terms:
                    terms[i] = np.zeros((1, k))
                terms[i][0, j] += a
        return AffMat((1, k), const, terms)

    @staticmethod
    def col_of(exprs: Sequence) -> "AffMat":
        return AffMat.row_of(exprs).T

    # ---- algebra ----

    def __add__(self, other):
        if isinstance(other, np.ndarray):
            other = AffMat.constant(other)
        if not isinstance(other, AffMat):
            return NotImplemented
        if other.shape != self.shape:
            raise ValueError("shape mismatch in AffMat addition")
        terms = dict(self.terms)
        for i, C in other.terms.items():
            terms[i] = terms[i] + C if i in terms else C
        return AffMat(self.shape, self.const + other.const, terms)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, np.ndarray):
            other = AffMat.constant(other)
        return self + (other * -1.0)

    def __mul__(self, a):
        a = float(a)
        return AffMat(self.shape, self.const * a,
                      {i: C * a for i, C in self.terms.items()})

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, C):
        """Right-multiply by a constant matrix."""
        C = np.asarray(C, float)
        return AffMat((self.shape[0], C.shape[1]), self.const @ C,
                      {i: T @ C for i, T in self.terms.items()})

    def __rmatmul__(self, C):
        C = np.asarray(C, float)
        return AffMat((C.shape[0], self.shape[1]), C @ self.const,
                      {i: C @ T for i, T in self.terms.items()})

    @property
    def T(self) -> "AffMat":
        return AffMat((self.shape[1], self.shape[0]), self.const.T,
                      {i: C.T for i, C in self.terms.items()})

    # ---- evaluation / checks ----

    def value(self, x: np.ndarray) -> np.ndarray:
        out = self.const.copy()
        for i, C in self.terms.items():
            out += x[i] * C
        return out

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        if self.shape[0] != self.shape[1]:
            return False
        def ok(M):
            s = max(1.0, float(np.max(np.abs(M))) if M.size else 0.0)
            return float(np.max(np.abs(M - M.T))) <= tol * s if M.size else True
        if not ok(self.const):
            return False
        # deterministic weighted sum catches asymmetric terms cheaply
        if self.terms:
            acc = np.zeros(self.shape)
            for i, C in self.terms.items():
                acc += (1.0 + (i % 97)) * C
            if not ok(acc):
                return False
        return True

    def variables(self) -> Iterable[int]:
        return self.terms.keys()


class PsdConstraint:
    """Affine symmetric matrix expression required negative semidefinite.

    Stored as upper-triangle block placements (row offset, col offset, cell);
    off-diagonal placements are implicitly mirrored with their transpose.
    """

    __slots__ = ("n", "placements", "name")

    def __init__(self, n: int, placements: list[tuple[int, int, AffMat]], name: str):
        self.n = n
        self.placements = placements
        self.name = name

    def matrix_value(self, x: np.ndarray) -> np.ndarray:
        M = np.zeros((self.n, self.n))
        for r0, c0, cell in self.placements:
            V = cell.value(x)
            r1, c1 = r0 + V.shape[0], c0 + V.shape[1]
            M[r0:r1, c0:c1] += V
            if r0 != c0:
                M[c0:c1, r0:r1] += V.T
        return M

    def variables(self) -> set[int]:
        out: set[int] = set()
        for _, _, cell in self.placements:
            out.update(cell.terms.keys())
        return out


class SocConstraint:
    """||v(x)||_2 <= s(x)."""

    __slots__ = ("vec", "scal", "name")

    def __init__(self, vec: list[LinExpr], scal: LinExpr, name: str):
        self.vec = vec
        self.scal = scal
        self.name = name

    @property
    def dim(self) -> int:
        return len(self.vec)

    def residual(self, x: np.ndarray) -> float:
        v = np.array([e.value(x) for e in self.vec])
        return float(np.linalg.norm(v) - self.scal.value(x))

    def variables(self) -> set[int]:
        out = set(self.scal.coeffs)
        for e in self.vec:
            out.update(e.coeffs)
        return out


class ConicProgram:
    def __init__(self, name: str = ""):
        self.name = name
        self.n_vars = 0
        self.var_names: list[str] = []
        self.lower_bounds: list[tuple[int, float]] = []
        self.scalar_vars: dict[str, ScalarVar] = {}
        self.matrix_vars: dict[str, MatrixVar] = {}
        self.psd: list[PsdConstraint] = []
        self.soc: list[SocConstraint] = []
        self.lin_ineq: list[tuple[LinExpr, float]] = []   # lin <= rhs
        self.lin_eq: list[tuple[LinExpr, float]] = []     # lin == rhs
        self.objective_lin = LinExpr()
        self.logdet_terms: list[tuple[float, MatrixVar]] = []

    # ---- variables ----

    def _claim(self, name: str, count: int) -> int:
        if name in self.scalar_vars or name in self.matrix_vars:
            raise IllPosedProgram(f"duplicate variable name {name!r}")
        first = self.n_vars
        self.n_vars += count
        return first

    def scalar(self, name: str, lb: float | None = None) -> ScalarVar:
        first = self._claim(name, 1)
        v = ScalarVar(first, name, lb)
        self.scalar_vars[name] = v
        self.var_names.append(name)
        if lb is not None:
            self.lower_bounds.append((first, float(lb)))
        return v

    def scalars(self, name: str, k: int, lb: float | None = None) -> list[ScalarVar]:
        return [self.scalar(f"{name}[{i}]", lb) for i in range(k)]

    def sym_matrix(self, name: str, n: int) -> MatrixVar:
        first = self._claim(name, n * (n + 1) // 2)
        mv = MatrixVar(name, n, first)
        self.matrix_vars[name] = mv
        for i in range(n):
            for j in range(i, n):
                self.var_names.append(f"{name}[{i},{j}]")
        return mv

    # ---- constraints ----

    def add_psd(self, expr, name: str = ""):
        """expr <= 0 in the semidefinite order.

        ``expr`` is an AffMat, or an upper-triangle grid (list of lists;
        entry [i][j] for j >= i, None meaning a zero cell).
        """
        if isinstance(expr, AffMat):
            if expr.shape[0] != expr.shape[1]:
                raise IllPosedProgram("PSD constraint needs a square expression")
            if not expr.is_symmetric():
                raise IllPosedProgram(f"PSD cell not symmetric in {name or 'psd'}")
            con = PsdConstraint(expr.shape[0], [(0, 0, expr)],
                                name or f"psd{len(self.psd)}")
            self.psd.append(con)
            return con
        return self.add_psd_grid(expr, name=name)

    def add_psd_grid(self, grid, name: str = ""):
        nb = len(grid)
        sizes = []
        for i in range(nb):
            cell = grid[i][i]
            if cell is None:
                raise IllPosedProgram("diagonal cells of a PSD grid are required")
            if cell.shape[0] != cell.shape[1]:
                raise IllPosedProgram("diagonal PSD grid cell not square")
            sizes.append(cell.shape[0])
        offs = np.concatenate(([0], np.cumsum(sizes))).astype(int)
        placements = []
        for i in range(nb):
            for j in range(i, nb):
                cell = grid[i][j] if j < len(grid[i]) else None
                if cell is None:
                    continue
                if cell.shape != (sizes[i], sizes[j]):
                    raise IllPosedProgram(
                        f"PSD grid cell ({i},{j}) has shape {cell.shape}, "
                        f"expected {(sizes[i], sizes[j])}")
                if i == j and not cell.is_symmetric():
                    raise IllPosedProgram(f"diagonal cell ({i},{i}) not symmetric")
                if cell.shape[0] == 0 or cell.shape[1] == 0:
                    continue
                placements.append((int(offs[i]), int(offs[j]), cell))
        con = PsdConstraint(int(offs[-1]), placements, name or f"psd{len(self.psd)}")
        if con.n == 0:
            raise IllPosedProgram("empty PSD constraint")
        self.psd.append(con)
        return con

    def add_soc(self, vec: Sequence, scal, name: str = ""):
        con = SocConstraint([_aslin(e) for e in vec], _aslin(scal),
                            name or f"soc{len(self.soc)}")
        self.soc.append(con)
        return con

    def add_le(self, lin, rhs: float = 0.0):
        lin = _aslin(lin)
        self.lin_ineq.append((lin, float(rhs) - 0.0))

    def add_ge(self, lin, rhs: float = 0.0):
        self.add_le(_aslin(lin) * -1.0, -float(rhs))

    def add_eq(self, lin, rhs: float = 0.0):
        self.lin_eq.append((_aslin(lin), float(rhs)))

    # ---- objective ----

    def minimize(self, lin):
        self.objective_lin = _aslin(lin)

    def maximize(self, lin):
        self.objective_lin = _aslin(lin) * -1.0

    def maximize_logdet(self, mvar: MatrixVar, coef: float = 1.0):
        if coef <= 0:
            raise IllPosedProgram("logdet coefficient must be positive")
        self.logdet_terms.append((float(coef), mvar))

    def objective_value(self, x: np.ndarray) -> float:
        val = self.objective_lin.value(x)
        for coef, mv in self.logdet_terms:
            sign, logdet = np.linalg.slogdet(mv.value(x))
            val -= coef * (logdet if sign > 0 else -np.inf)
        return val

    # ---- introspection ----

    def used_variables(self) -> set[int]:
        used: set[int] = set(self.objective_lin.coeffs)
        for _, mv in self.logdet_terms:
            used.update(int(i) for i in np.unique(mv.indices))
        for con in self.psd:
            used.update(con.variables())
        for con in self.soc:
            used.update(con.variables())
        for lin, _ in self.lin_ineq:
            used.update(lin.coeffs)
        for lin, _ in self.lin_eq:
            used.update(lin.coeffs)
        used.update(i for i, _ in self.lower_bounds)
        return used

    def check_well_posed(self):
        used = self.used_variables()
        missing = [self.var_names[i] for i in range(self.n_vars) if i not in used]
        if missing:
            raise IllPosedProgram(
                f"unused variables (not in any constraint or objective): "
                f"{missing[:5]}{'...' if len(missing) > 5 else ''}")
        bad = [i for i in used if not (0 <= i < self.n_vars)]
        if bad:
            raise IllPosedProgram(f"references to undeclared variable indices {bad[:5]}")

    def stats(self) -> dict:
        return {
            "scalar_vars": self.n_vars,
            "psd_blocks": len(self.psd),
            "psd_dims": [c.n for c in self.psd],
            "soc_dims": [c.dim for c in self.soc],
            "lin_ineq": len(self.lin_ineq) + len(self.lower_bounds),
            "lin_eq": len(self.lin_eq),
            "logdet_terms": len(self.logdet_terms),
        }

    # ---- solution inspection ----

    def extract(self, x: np.ndarray) -> dict:
        """Named primal values: scalars as floats, matrix vars as arrays."""
        out: dict[str, object] = {}
        for name, v in self.scalar_vars.items():
            out[name] = float(x[v.index])
        for name, mv in self.matrix_vars.items():
            out[name] = mv.value(x)
        return out

    def max_violations(self, x: np.ndarray) -> tuple[float, float]:
        """(max most-positive PSD eigenvalue, max linear/SOC violation)."""
        psd_v = 0.0
        for con in self.psd:
            M = con.matrix_value(x)
            if M.size:
                w = np.linalg.eigvalsh((M + M.T) / 2.0)
                psd_v = max(psd_v, float(w[-1]))
        lin_v = 0.0
        for lin, rhs in self.lin_ineq:
            lin_v = max(lin_v, lin.value(x) - rhs)
        for i, lb in self.lower_bounds:
            lin_v = max(lin_v, lb - x[i])
        for lin, rhs in self.lin_eq:
            lin_v = max(lin_v, abs(lin.value(x) - rhs))
        for con in self.soc:
            lin_v = max(lin_v, con.residual(x))
        return psd_v, lin_v
