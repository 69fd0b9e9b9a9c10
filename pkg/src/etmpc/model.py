"""Uncertain-system description, validation, and model-file persistence.

The system class is linear and time-invariant with two bounded inputs it
cannot measure: a structured model perturbation entering through a linear
fractional transformation (LFT) channel, and an exogenous disturbance.

    x+ = A x + B u + B_p p + B_w w
    q  = C_q x + D_u u + D_w w
    p  = Delta q

``Delta`` is block diagonal (square blocks sized by ``block_sizes``) and
bounded by ``Delta' P_Delta Delta <= I``; the disturbance is bounded by
``w' P_w w <= 1``.  States and inputs must satisfy ``F x + G u <= 1``
elementwise, a compact polytope containing the origin.

Either uncertainty channel may be absent (``n_delta == 0`` or
``n_w == 0``); downstream design code drops the corresponding blocks
entirely instead of carrying zero-size multipliers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import (BadBlockStructure, DimensionMismatch, NotPositiveDefinite,
                     ParseError, SchemaError, UnboundedConstraintSet)

MODEL_FORMAT = "etmpc-model/1"

# Ingested "symmetric" matrices may carry file-roundtrip or hand-entry noise;
# anything within this relative band is symmetrized, anything beyond is an
# error.
SYM_RTOL = 1e-9


def _sym_or_raise(M: np.ndarray, name: str) -> np.ndarray:
    if M.size == 0:
        return M
    skew = float(np.max(np.abs(M - M.T)))
    if skew > SYM_RTOL * (1.0 + float(np.max(np.abs(M)))):
        raise NotPositiveDefinite(f"{name} (not symmetric, max|M-M'| = {skew:.3g})")
    return (M + M.T) / 2.0


def _spd_or_raise(M: np.ndarray, name: str) -> np.ndarray:
    M = _sym_or_raise(M, name)
    if M.size and float(np.linalg.eigvalsh(M)[0]) <= 0.0:
        raise NotPositiveDefinite(name)
    return M


def _mat(value, name: str, rows: int, cols: int) -> np.ndarray:
    """Coerce to a float matrix of the given shape (handles empty dims)."""
    M = np.asarray(value, dtype=float)
    if M.size == 0 and rows * cols == 0:
        return np.zeros((rows, cols))
    if M.ndim != 2 or M.shape != (rows, cols):
        raise DimensionMismatch(f"{name} must be {rows}x{cols}, got {M.shape}")
    return M.copy()


@dataclass(frozen=True)
class LftSystem:
    """Raw system data; run :func:`validate_system` before using it."""

    A: np.ndarray
    B: np.ndarray
    B_p: np.ndarray
    B_w: np.ndarray
    C_q: np.ndarray
    D_u: np.ndarray
    D_w: np.ndarray
    block_sizes: tuple
    P_Delta: np.ndarray
    P_w: np.ndarray
    F: np.ndarray
    G: np.ndarray
    name: str = ""
    sampling_time: float | None = None

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_delta(self) -> int:
        return self.B_p.shape[1]

    @property
    def n_w(self) -> int:
        return self.B_w.shape[1]

    @property
    def n_c(self) -> int:
        return self.F.shape[0]


@dataclass(frozen=True)
class BlockProjector:
    """Index ranges of the square diagonal blocks of the perturbation.

    ``ranges[j] = (lo, hi)`` selects the rows/columns of block ``j`` in the
    perturbation channel; the ranges partition ``0..n_delta``.
    """

    ranges: tuple

    @staticmethod
    def from_block_sizes(block_sizes) -> "BlockProjector":
        ranges = []
        lo = 0
        for s in block_sizes:
            ranges.append((lo, lo + int(s)))
            lo += int(s)
        return BlockProjector(tuple(ranges))

    def __len__(self) -> int:
        return len(self.ranges)

    def slice(self, j: int) -> slice:
        lo, hi = self.ranges[j]
        return slice(lo, hi)

    def blocks_of(self, M: np.ndarray):
        """Diagonal sub-blocks of a square matrix, one per range."""
        return [M[self.slice(j), self.slice(j)] for j in range(len(self))]


@dataclass(frozen=True)
class CostWeights:
    """Quadratic stage-cost weights on state and input."""

    Q_x: np.ndarray
    Q_u: np.ndarray

    def validated(self, n_x: int, n_u: int) -> "CostWeights":
        Qx = _mat(self.Q_x, "Q_x", n_x, n_x)
        Qu = _mat(self.Q_u, "Q_u", n_u, n_u)
        return CostWeights(_spd_or_raise(Qx, "Q_x"), _spd_or_raise(Qu, "Q_u"))


@dataclass(frozen=True)
class ValidatedSystem:
    """An :class:`LftSystem` that passed validation, plus derived data.

    Immutable (arrays are write-protected) and safe to share across
    workers.  ``L_delta`` and ``L_w`` are lower Cholesky factors of the
    respective bound matrices; ``projector`` partitions the perturbation
    channel into its diagonal blocks.
    """

    sys: LftSystem
    projector: BlockProjector
    L_delta: np.ndarray = field(repr=False)
    L_w: np.ndarray = field(repr=False)

    def __getattr__(self, item):
        if item.startswith("_") or item == "sys":
            raise AttributeError(item)
        return getattr(self.sys, item)


def _freeze(M: np.ndarray) -> np.ndarray:
    M.setflags(write=False)
    return M


def validate_system(sys: LftSystem) -> ValidatedSystem:
    """Check every structural invariant and derive helper quantities.

    Parameters
    ----------
    sys : LftSystem
        Raw system data.

    Returns
    -------
    ValidatedSystem
        The same data, symmetrized where required, write-protected, and
        annotated with the block projector and Cholesky factors.

    Raises
    ------
    DimensionMismatch, NotPositiveDefinite, UnboundedConstraintSet,
    BadBlockStructure
    """
    A = np.asarray(sys.A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"A must be square, got {A.shape}")
    n_x = A.shape[0]
    B = np.asarray(sys.B, dtype=float)
    if B.ndim != 2 or B.shape[0] != n_x:
        raise DimensionMismatch(f"B must have {n_x} rows, got {B.shape}")
    n_u = B.shape[1]

    blocks = tuple(int(s) for s in sys.block_sizes)
    if any(s <= 0 for s in blocks):
        raise BadBlockStructure(f"block sizes must be positive, got {blocks}")
    n_delta = int(sum(blocks))

    B_p = _mat(sys.B_p, "B_p", n_x, n_delta)
    C_q = _mat(sys.C_q, "C_q", n_delta, n_x)
    D_u = _mat(sys.D_u, "D_u", n_delta, n_u)
    P_Delta = _mat(sys.P_Delta, "P_Delta", n_delta, n_delta)

    Pw = np.asarray(sys.P_w, dtype=float)
    if Pw.ndim != 2 or Pw.shape[0] != Pw.shape[1]:
        raise DimensionMismatch(f"P_w must be square, got {Pw.shape}")
    n_w = Pw.shape[0]
    B_w = _mat(sys.B_w, "B_w", n_x, n_w)
    D_w = _mat(sys.D_w, "D_w", n_delta, n_w)

    F = np.asarray(sys.F, dtype=float)
    if F.ndim != 2 or F.shape[1] != n_x:
        raise DimensionMismatch(f"F must have {n_x} columns, got {F.shape}")
    n_c = F.shape[0]
    G = _mat(sys.G, "G", n_c, n_u)

    P_Delta = _spd_or_raise(P_Delta, "P_Delta")
    Pw = _spd_or_raise(Pw, "P_w")

    _check_bounded(F, G)

    clean = LftSystem(
        A=_freeze(A.copy()), B=_freeze(B.copy()), B_p=_freeze(B_p),
        B_w=_freeze(B_w), C_q=_freeze(C_q), D_u=_freeze(D_u),
        D_w=_freeze(D_w), block_sizes=blocks, P_Delta=_freeze(P_Delta),
        P_w=_freeze(Pw), F=_freeze(F.copy()), G=_freeze(G),
        name=sys.name, sampling_time=sys.sampling_time)
    L_delta = (np.linalg.cholesky(P_Delta) if n_delta
               else np.zeros((0, 0)))
    L_w = np.linalg.cholesky(Pw) if n_w else np.zeros((0, 0))
    return ValidatedSystem(sys=clean,
                           projector=BlockProjector.from_block_sizes(blocks),
                           L_delta=_freeze(L_delta), L_w=_freeze(L_w))


def _check_bounded(F: np.ndarray, G: np.ndarray):
    """Boundedness of {(x,u) : Fx + Gu <= 1} by one LP per signed coordinate.

    The polytope contains the origin, so each LP is feasible; an unbounded
    LP in any coordinate direction means the set is unbounded.
    """
    n = F.shape[1] + G.shape[1]
    if n == 0:
        return
    A_ub = np.hstack([F, G])
    b_ub = np.ones(A_ub.shape[0])
    if A_ub.shape[0] == 0:
        raise UnboundedConstraintSet("(no constraint rows)")
    for i in range(n):
        for sign in (1.0, -1.0):
            c = np.zeros(n)
            c[i] = -sign  # linprog minimizes; maximize sign * coord_i
            res = linprog(c, A_ub=A_ub, b_ub=b_ub,
                          bounds=[(None, None)] * n, method="highs")
            if res.status == 3:
                raise UnboundedConstraintSet(
                    f"(direction {'+' if sign > 0 else '-'}e_{i})")
            if not res.success:
                raise UnboundedConstraintSet(
                    f"(LP failed in direction e_{i}: {res.message})")


# --- membership tests -----------------------------------------------------


def delta_in_set(vs: ValidatedSystem, Delta: np.ndarray,
                 tol: float = 1e-12) -> bool:
    """Matrix membership test ``Delta' P_Delta Delta <= I``."""
    nd = vs.n_delta
    D = _mat(Delta, "Delta", nd, nd)
    if nd == 0:
        return True
    M = D.T @ vs.P_Delta @ D - np.eye(nd)
    return float(np.linalg.eigvalsh(M)[-1]) <= tol


def delta_in_set_blockwise(vs: ValidatedSystem, Delta: np.ndarray,
                           tol: float = 1e-12) -> bool:
    """Blockwise membership via the projector inequalities.

    Checks that ``Delta`` is block diagonal with the declared structure and
    that each block ``D_j`` satisfies ``D_j' P_j D_j <= I`` where ``P_j``
    is the matching diagonal sub-block of the bound matrix.
    """
    nd = vs.n_delta
    D = _mat(Delta, "Delta", nd, nd)
    if nd == 0:
        return True
    mask = np.ones((nd, nd), dtype=bool)
    proj = vs.projector
    for j in range(len(proj)):
        sl = proj.slice(j)
        mask[sl, sl] = False
    if np.any(np.abs(D[mask]) > tol):
        return False
    for j in range(len(proj)):
        sl = proj.slice(j)
        Dj = D[sl, sl]
        Pj = vs.P_Delta[sl, sl]
        M = Dj.T @ Pj @ Dj - np.eye(Dj.shape[0])
        if float(np.linalg.eigvalsh(M)[-1]) > tol:
            return False
    return True


def disturbance_in_set(vs: ValidatedSystem, w: np.ndarray,
                       tol: float = 1e-12) -> bool:
    """Membership test ``w' P_w w <= 1``."""
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != vs.n_w:
        raise DimensionMismatch(f"w must have length {vs.n_w}, got {w.shape[0]}")
    if vs.n_w == 0:
        return True
    return float(w @ vs.P_w @ w) <= 1.0 + tol


# --- persistence ----------------------------------------------------------

_MATRIX_KEYS = ("A", "B", "B_p", "B_w", "C_q", "D_u", "D_w",
                "P_Delta", "P_w", "F", "G", "Q_x", "Q_u")
_REQUIRED_KEYS = ("format",) + _MATRIX_KEYS + ("block_sizes",)
_OPTIONAL_KEYS = ("name", "sampling_time")


@dataclass(frozen=True)
class ModelBundle:
    """A system together with its stage-cost weights, as stored on disk."""

    system: LftSystem
    weights: CostWeights


def save_model(bundle: ModelBundle, path):
    """Write a model file (JSON, format tag ``etmpc-model/1``).

    Numbers are serialized with shortest-roundtrip float representation,
    so save-then-load reproduces every finite double bit-for-bit.
    """
    sys, w = bundle.system, bundle.weights
    doc = {"format": MODEL_FORMAT}
    for key in _MATRIX_KEYS:
        M = getattr(sys, key, None)
        if M is None:
            M = getattr(w, key)
        doc[key] = np.asarray(M, dtype=float).tolist()
    doc["block_sizes"] = [int(s) for s in sys.block_sizes]
    if sys.name:
        doc["name"] = sys.name
    if sys.sampling_time is not None:
        doc["sampling_time"] = float(sys.sampling_time)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model_bundle(path) -> ModelBundle:
    """Read and validate a model file.

    Raises
    ------
    ParseError
        The file is not valid JSON (location carries line/column).
    SchemaError
        A required key is missing, an unknown key is present, or the
        format tag is wrong.
    ValidationError
        The parsed system violates a structural invariant.
    """
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}:{e.colno}", e.msg) from None
    if not isinstance(doc, dict):
        raise SchemaError("format", "top level must be an object")
    for key in _REQUIRED_KEYS:
        if key not in doc:
            raise SchemaError(key, "missing")
    for key in doc:
        if key not in _REQUIRED_KEYS and key not in _OPTIONAL_KEYS:
            raise SchemaError(key, "unknown field")
    if doc["format"] != MODEL_FORMAT:
        raise SchemaError("format", f"expected {MODEL_FORMAT!r}, got"
                                    f" {doc['format']!r}")

    def arr(key):
        try:
            return np.asarray(doc[key], dtype=float)
        except (TypeError, ValueError) as e:
            raise SchemaError(key, str(e)) from None

    blocks = doc["block_sizes"]
    if not isinstance(blocks, list) or any(
            not isinstance(s, int) or s <= 0 for s in blocks):
        raise SchemaError("block_sizes", "must be a list of positive integers")
    n_delta = sum(blocks)

    A = arr("A")
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SchemaError("A", f"must be square, got {A.shape}")
    n_x = A.shape[0]
    B = arr("B")
    if B.ndim != 2 or B.shape[0] != n_x:
        raise SchemaError("B", f"must have {n_x} rows")
    n_u = B.shape[1]
    P_w = arr("P_w")
    if P_w.size == 0:
        n_w = 0
    elif P_w.ndim == 2:
        n_w = P_w.shape[0]
    else:
        raise SchemaError("P_w", "must be a square matrix")

    def shaped(key, rows, cols):
        M = arr(key)
        if M.size == 0 and rows * cols == 0:
            return np.zeros((rows, cols))
        if M.ndim != 2 or M.shape != (rows, cols):
            raise SchemaError(key, f"must be {rows}x{cols}")
        return M

    F = arr("F")
    if F.ndim != 2 or F.shape[1] != n_x:
        raise SchemaError("F", f"must have {n_x} columns")

    sys = LftSystem(
        A=A, B=B,
        B_p=shaped("B_p", n_x, n_delta),
        B_w=shaped("B_w", n_x, n_w),
        C_q=shaped("C_q", n_delta, n_x),
        D_u=shaped("D_u", n_delta, n_u),
        D_w=shaped("D_w", n_delta, n_w),
        block_sizes=tuple(blocks),
        P_Delta=shaped("P_Delta", n_delta, n_delta),
        P_w=shaped("P_w", n_w, n_w),
        F=F, G=shaped("G", F.shape[0], n_u),
        name=str(doc.get("name", "")),
        sampling_time=(float(doc["sampling_time"])
                       if "sampling_time" in doc else None))
    weights = CostWeights(shaped("Q_x", n_x, n_x),
                          shaped("Q_u", n_u, n_u)).validated(n_x, n_u)
    validate_system(sys)
    return ModelBundle(system=sys, weights=weights)


def load_model(path) -> LftSystem:
    """Read a model file and return just the validated system."""
    return load_model_bundle(path).system
