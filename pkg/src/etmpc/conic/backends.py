"""Optional external solver backends over the same program IR.

Currently one alternative: cvxopt's conelp, used in tests to cross-check
the reference interior-point implementation.  The backend consumes the
same compiled form, so both solvers see literally identical data.
"""

from __future__ import annotations

import time

import numpy as np

from ..errors import EtmpcError
from .compiled import compile_program
from .program import ConicProgram


def solve_cvxopt(prog: ConicProgram, opts):
    """Solve via cvxopt.solvers.conelp; mirrors the reference report."""
    from .solver import SolveReport, Status, solve_compiled

    try:
        import cvxopt
        import cvxopt.solvers
    except ImportError as e:
        raise EtmpcError(
            "cvxopt backend requested but cvxopt is not installed; "
            "install the 'cvxopt' extra") from e

    cp = compile_program(prog, normalize=opts.normalize,
                         structure_exploit=False)
    t0 = time.perf_counter()
    if cp.trivially_infeasible:
        return SolveReport(Status.INFEASIBLE, None, {}, float("nan"),
                           float("nan"), float("nan"), 0,
                           time.perf_counter() - t0,
                           {"reason": "constant constraint row is infeasible"})
    m = cp.m
    nl = cp.G_nn.shape[0]
    qdims = [s.dim for s in cp.socs]
    sdims = [b.n for b in cp.blocks]
    if nl + len(qdims) + len(sdims) == 0:
        return solve_compiled(cp, opts)

    nrows = nl + sum(qdims) + sum(int(n * n) for n in sdims)
    G = np.zeros((nrows, m))
    h = np.zeros(nrows)
    G[:nl] = cp.G_nn.toarray()
    h[:nl] = cp.h_nn
    r = nl
    for s in cp.socs:
        G[r:r + s.dim][:, s.touched] = s.G
        h[r:r + s.dim] = s.h
        r += s.dim
    for b in cp.blocks:
        n2 = b.n * b.n
        for local, gvar in enumerate(b.dense_pos):
            G[r:r + n2, gvar] = b.F_dense[local].reshape(-1, order="F")
        for t in range(b.term_var.size):
            F = np.zeros((b.n, b.n))
            a = b.anchors[b.term_slot[t]]
            F[a, :] += b.G_lr[:, t]
            F[:, a] += b.G_lr[:, t]
            G[r:r + n2, b.term_var[t]] += F.reshape(-1, order="F")
        h[r:r + n2] = (-b.F0).reshape(-1, order="F")
        r += n2

    dims = {"l": nl, "q": qdims, "s": sdims}
    solver_opts = {"show_progress": False, "maxiters": int(opts.max_iter),
                   "abstol": float(opts.gap_tol_abs),
                   "reltol": float(opts.gap_tol_rel),
                   "feastol": float(max(opts.feas_tol, 1e-9))}
    args = [cvxopt.matrix(cp.c), cvxopt.matrix(G), cvxopt.matrix(h), dims]
    if cp.A.shape[0]:
        args += [cvxopt.matrix(cp.A), cvxopt.matrix(cp.b)]
    sol = cvxopt.solvers.conelp(*args, options=solver_opts)
    wall = time.perf_counter() - t0

    status_map = {
        "optimal": Status.OPTIMAL,
        "primal infeasible": Status.INFEASIBLE,
        "dual infeasible": Status.UNBOUNDED,
    }
    status = status_map.get(sol["status"], Status.NUMERICAL_FAILURE)
    diag = {"backend": "cvxopt", "backend_status": sol["status"]}

    if status in (Status.OPTIMAL,) and sol["x"] is not None:
        x = np.asarray(sol["x"]).ravel()
        pv, lv = cp.source.max_violations(x)
        return SolveReport(status, x, cp.source.extract(x),
                           cp.source.objective_value(x), pv, lv,
                           int(sol.get("iterations", 0)), wall, diag)
    return SolveReport(status, None, {}, float("nan"), float("nan"),
                       float("nan"), int(sol.get("iterations", 0)), wall, diag)
