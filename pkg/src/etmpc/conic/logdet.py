"""Reformulation of logdet objectives into pure LMI form.

maximize logdet(M) is replaced by maximizing the geometric mean of the
diagonal of a lower-triangular slack Z tied to M through

    [[M, Z], [Z', diag(Z)]]  PSD,

since the achievable product of diag(Z) equals det(M).  The geometric
mean itself is expressed with the usual tower of 2x2 PSD cells
([[a, c], [c, b]] PSD iff c^2 <= a b), padding odd layers with the
root variable, so the result is solvable by any PSD-capable backend.

The transformation preserves variable indices of the input program;
auxiliary variables are appended after them.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import MultipleLogdetTerms, UnsupportedObjective
from .program import AffMat, ConicProgram, LinExpr


_AUX_PREFIX = "_logdet"


def _clone_shell(prog: ConicProgram) -> ConicProgram:
    out = ConicProgram(prog.name + "+logdet" if prog.name else "logdet")
    out.n_vars = prog.n_vars
    out.var_names = list(prog.var_names)
    out.lower_bounds = list(prog.lower_bounds)
    out.scalar_vars = dict(prog.scalar_vars)
    out.matrix_vars = dict(prog.matrix_vars)
    out.psd = list(prog.psd)
    out.soc = list(prog.soc)
    out.lin_ineq = list(prog.lin_ineq)
    out.lin_eq = list(prog.lin_eq)
    return out


def _one_by_one(lin: LinExpr, sign: float = 1.0) -> AffMat:
    return AffMat.scale_of(lin * sign, np.ones((1, 1)))


def _geomean_cell(prog: ConicProgram, a: LinExpr, b: LinExpr, c: LinExpr):
    """c^2 <= a*b (with a, b >= 0) as a 2x2 PSD cell."""
    grid = [[_one_by_one(a, -1.0), _one_by_one(c, -1.0)],
            [None, _one_by_one(b, -1.0)]]
    prog.add_psd_grid(grid, name=f"{_AUX_PREFIX}_gm{len(prog.psd)}")


def logdet_reformulate(prog: ConicProgram) -> ConicProgram:
    """Equivalent logdet-free program sharing the input's variable indices.

    Only pure logdet objectives are supported: a mixed linear + logdet
    objective is not preserved by the geometric-mean substitution (the
    tower maximizes det^(1/n), a monotone but nonlinear transform), so
    mixing raises UnsupportedObjective rather than solving the wrong
    problem.
    """
    if len(prog.logdet_terms) > 1:
        raise MultipleLogdetTerms(
            f"{len(prog.logdet_terms)} logdet terms; only one is supported")
    if not prog.logdet_terms:
        raise UnsupportedObjective("program has no logdet term to reformulate")
    if prog.objective_lin.coeffs:
        raise UnsupportedObjective(
            "mixed linear + logdet objectives are not supported; "
            "split the design into separate solves")
    _, mv = prog.logdet_terms[0]
    n = mv.n

    out = _clone_shell(prog)

    # lower-triangular slack Z (entries z[i,j], i >= j)
    zvar = {}
    for i in range(n):
        for j in range(i + 1):
            zvar[(i, j)] = out.scalar(f"{_AUX_PREFIX}_z[{i},{j}]")

    # [[M, Z], [Z', diag(Z)]] >= 0, written as its negation <= 0
    zmat = AffMat.zeros(n, n)
    dmat = AffMat.zeros(n, n)
    for (i, j), v in zvar.items():
        C = np.zeros((n, n))
        C[i, j] = -1.0
        zmat.terms[v.index] = C
        if i == j:
            D = np.zeros((n, n))
            D[i, i] = -1.0
            dmat.terms[v.index] = D
    out.add_psd_grid([[mv.ex() * -1.0, zmat], [None, dmat]],
                     name=f"{_AUX_PREFIX}_schur")

    leaves = [zvar[(i, i)].ex for i in range(n)]
    if n == 1:
        out.maximize(leaves[0])
        return out

    root = out.scalar(f"{_AUX_PREFIX}_t")
    depth = math.ceil(math.log2(n))
    total = 1 << depth
    leaves = leaves + [root.ex] * (total - n)

    level = leaves
    k = 0
    while len(level) > 2:
        nxt = []
        for a, b in zip(level[0::2], level[1::2]):
            u = out.scalar(f"{_AUX_PREFIX}_g{k}")
            k += 1
            _geomean_cell(out, a, b, u.ex)
            nxt.append(u.ex)
        level = nxt
    _geomean_cell(out, level[0], level[1], root.ex)
    out.maximize(root.ex)
    return out


def restrict_report(prog: ConicProgram, inner):
    """Map a solve report of the reformulated program back to `prog`."""
    from .solver import SolveReport

    if inner.x is None:
        return SolveReport(inner.status, None, {}, float("nan"),
                           float("nan"), float("nan"), inner.iterations,
                           inner.wall_time, inner.diagnostics)
    x = np.asarray(inner.x)[:prog.n_vars]
    pv, lv = prog.max_violations(x)
    return SolveReport(inner.status, x, prog.extract(x),
                       prog.objective_value(x), pv, lv, inner.iterations,
                       inner.wall_time, inner.diagnostics)
