"""Offline tube design: feedback gain, tube shape, tightening, terminal cost.

The design pipeline fixes the contraction multiplier on a grid, solves one
determinant-maximization SDP per grid point for the tube shape inverse and
the scaled gain, picks the largest-volume feasible shape, then derives the
per-row constraint tightening constants and a terminal cost matrix from two
further conic solves.  Everything downstream (the per-step controller, the
simulator) consumes the resulting :class:`OfflineDesign`.

Conventions: the tube cross-section is ``{x : x'Px <= alpha^2}`` and the
terminal set is the unit sublevel set ``{x : x'Px <= 1}``; the gain acts on
the deviation from the tube center.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .conic import AffMat, ConicProgram, SolverOptions, Status, solve
from .conic.program import EPS
from .errors import (NoFeasibleDesign, NumericalFailure, ParseError,
                     SchemaError, TerminalCostInfeasible)
from .model import CostWeights, ValidatedSystem

DESIGN_FORMAT = "etmpc-design/1"

# acceptance band for "the stored values satisfy their LMIs"
LMI_CHECK_TOL = 1e-6


def _aff_from_vars(V) -> AffMat:
    """Affine matrix whose (i, j) entry is the scalar variable V[i][j]."""
    r, c = len(V), len(V[0])
    out = AffMat.zeros(r, c)
    for i in range(r):
        for j in range(c):
            E = np.zeros((r, c))
            E[i, j] = 1.0
            out = out + AffMat.scale_of(V[i][j].ex, E)
    return out


def _embed(n: int, sl: slice, M: np.ndarray) -> np.ndarray:
    Z = np.zeros((n, n))
    Z[sl, sl] = M
    return Z


def _row_mask(n_rows: int, sl: slice, M: np.ndarray) -> np.ndarray:
    """Copy of M with all rows outside the slice zeroed."""
    Z = np.zeros((n_rows, M.shape[1]))
    Z[sl, :] = M[sl, :]
    return Z


def build_invariance_program(vs: ValidatedSystem, tau1O: float,
                             det_weight=None) -> ConicProgram:
    """Tube-shape SDP at a fixed contraction multiplier.

    Variables: the shape inverse ``P_inv`` (symmetric PSD), the scaled gain
    ``Y`` (with ``Y = K P_inv``), one positive multiplier per uncertainty
    block, and the disturbance multiplier.  Constraints: the five-block
    robust-invariance LMI in (P_inv, Y) form, the multiplier budget
    ``tau1O + tau3O <= 1``, one two-block membership LMI per constraint row
    keeping the unit sublevel set inside the constraint polytope under the
    tube feedback, and ``P_inv >= eps I``.  Objective: maximize
    ``logdet(P_inv)``, i.e. the cross-section volume.

    Degenerate channels (no uncertainty blocks, no disturbance) drop the
    corresponding LMI rows and multipliers entirely.

    ``det_weight`` is an untested configuration hook: a full-row-rank
    ``k x n_x`` map ``E`` switches the objective to the log-volume of the
    image ``E P_inv E'`` of the section, growing it in the mapped
    directions.  A square ``E`` only shifts the objective by a constant,
    so the hook is meaningful for ``k < n_x``.
    """
    if not 0.0 < tau1O < 1.0:
        raise ValueError(f"contraction multiplier must be in (0,1), got {tau1O}")
    sys = vs.sys
    n_x, n_u = sys.n_x, sys.n_u
    nd, nw, nc = sys.n_delta, sys.n_w, sys.n_c
    proj = vs.projector

    p = ConicProgram(f"invariance[tau1O={tau1O:g}]")
    Pinv = p.sym_matrix("P_inv", n_x)
    Yv = [p.scalars(f"Y[{i}]", n_x) for i in range(n_u)]
    Y = _aff_from_vars(Yv)  # (n_u, n_x)
    t2 = p.scalars("t2O", len(proj)) if nd else []
    tau3 = p.scalar("tau3O") if nw else None
    for t in t2:
        p.add_ge(t.ex, EPS)
    if tau3 is not None:
        p.add_ge(tau3.ex, EPS)
        p.add_le(tau3.ex, 1.0 - tau1O)

    PA = Pinv.ex() @ sys.A.T + Y.T @ sys.B.T         # P_inv A' + Y' B'
    # segment ids: 0 pre-state, 1 perturbation, 2 disturbance, 3 post-state,
    # 4 LFT output; absent channels are omitted from the grid
    cells = {
        (0, 0): Pinv.ex() * (-tau1O),
        (0, 3): PA,
        (3, 3): -Pinv.ex(),
    }
    if nd:
        m_pp = AffMat.zeros(nd, nd)
        m_pq = AffMat.zeros(nd, nd)
        m_px = AffMat.zeros(nd, n_x)
        for j, t in enumerate(t2):
            sl = proj.slice(j)
            m_pp = m_pp + AffMat.scale_of(
                t.ex, -_embed(nd, sl, sys.P_Delta[sl, sl]))
            m_pq = m_pq + AffMat.scale_of(t.ex, -_embed(nd, sl, np.eye(
                sl.stop - sl.start)))
            m_px = m_px + AffMat.scale_of(t.ex, _row_mask(nd, sl, sys.B_p.T))
        cells[(1, 1)] = m_pp
        cells[(1, 3)] = m_px
        cells[(4, 4)] = m_pq
        cells[(0, 4)] = Pinv.ex() @ sys.C_q.T + Y.T @ sys.D_u.T
    if nw:
        cells[(2, 2)] = AffMat.scale_of(tau3.ex, -sys.P_w)
        cells[(2, 3)] = AffMat.constant(sys.B_w.T)
        if nd:
            cells[(2, 4)] = AffMat.constant(sys.D_w.T)

    segs = [0] + ([1] if nd else []) + ([2] if nw else []) + [3] \
        + ([4] if nd else [])
    grid = [[cells.get((si, sj)) for sj in segs] for si in segs]
    # grid rows are upper-triangle only, so strip entries left of the diagonal
    grid = [[grid[i][j] if j >= i else None for j in range(len(segs))]
            for i in range(len(segs))]
    p.add_psd_grid(grid, name="invariance")

    for i in range(nc):
        row = sys.F[i:i + 1] @ Pinv.ex() + sys.G[i:i + 1] @ Y
        p.add_psd_grid([[AffMat.constant([[-1.0]]), row],
                        [None, -Pinv.ex()]], name=f"membership[{i}]")

    p.add_psd(AffMat.constant(EPS * np.eye(n_x)) - Pinv.ex(),
              name="shape_floor")
    if det_weight is None:
        p.maximize_logdet(Pinv)
    else:
        E = np.atleast_2d(np.asarray(det_weight, float))
        if E.shape[1] != n_x or E.shape[0] > n_x:
            raise ValueError("det_weight must be k x n_x with k <= n_x")
        S = p.sym_matrix("weighted_shape", E.shape[0])
        # S is dominated by the mapped section; maximizing logdet(S)
        # drives it to equality
        p.add_psd(S.ex() - (E @ Pinv.ex()) @ E.T, name="weighted_dom")
        p.maximize_logdet(S)
    return p


def compute_tightening(P_inv: np.ndarray, K: np.ndarray, F: np.ndarray,
                       G: np.ndarray) -> np.ndarray:
    """Per-row support values of the unit tube section under the feedback.

    Row i gets ``sqrt([F+GK]_i P_inv [F+GK]_i')``: how much one unit of
    tube radius consumes of constraint row i.
    """
    H = F + G @ K
    vals = np.einsum("ij,jk,ik->i", H, P_inv, H)
    return np.sqrt(np.maximum(vals, 0.0))


@dataclass(frozen=True)
class OfflineDesign:
    """Frozen result of the offline phase.

    ``P`` is the tube/terminal shape, ``L`` its Cholesky factor with
    ``P = L'L``, ``K`` the tube feedback, ``Y = K P_inv`` the scaled gain
    as solved, ``T2O``/``T4O`` the block-scaled multiplier matrices,
    ``f_bar`` the per-row tightening constants, ``P_C`` the terminal cost,
    and ``lambda_c = sqrt(tau1O)`` the tube contraction factor.
    """

    P: np.ndarray
    P_inv: np.ndarray
    L: np.ndarray
    K: np.ndarray
    Y: np.ndarray
    tau1O: float
    tau3O: float
    T2O: np.ndarray
    f_bar: np.ndarray
    P_C: np.ndarray
    T4O: np.ndarray
    lambda_c: float
    provenance: dict = field(default_factory=dict, compare=False)

    def norm_P(self, x: np.ndarray) -> float:
        """Tube norm ``sqrt(x'Px)``."""
        return float(np.sqrt(max(x @ self.P @ x, 0.0)))


def _invariance_residual(vs: ValidatedSystem, P_inv, Y, t2_blocks, tau3O,
                         tau1O) -> float:
    """Most-positive eigenvalue of the invariance LMI at fixed values."""
    sys = vs.sys
    n_x, nd, nw = sys.n_x, sys.n_delta, sys.n_w
    proj = vs.projector
    T2 = np.zeros((nd, nd))
    for j in range(len(proj)):
        sl = proj.slice(j)
        T2[sl, sl] = t2_blocks[j] * np.eye(sl.stop - sl.start)
    segs = [n_x] + ([nd] if nd else []) + ([nw] if nw else []) + [n_x] \
        + ([nd] if nd else [])
    off = np.concatenate(([0], np.cumsum(segs)))
    M = np.zeros((off[-1], off[-1]))

    def put(i, j, val):
        M[off[i]:off[i + 1], off[j]:off[j + 1]] = val
        if i != j:
            M[off[j]:off[j + 1], off[i]:off[i + 1]] = np.asarray(val).T

    k = 1
    idx = {0: 0}
    if nd:
        idx[1] = k; k += 1
    if nw:
        idx[2] = k; k += 1
    idx[3] = k; k += 1
    if nd:
        idx[4] = k

    put(idx[0], idx[0], -tau1O * P_inv)
    put(idx[0], idx[3], P_inv @ sys.A.T + Y.T @ sys.B.T)
    put(idx[3], idx[3], -P_inv)
    if nd:
        Pd_blocks = np.zeros((nd, nd))
        for j in range(len(proj)):
            sl = proj.slice(j)
            Pd_blocks[sl, sl] = sys.P_Delta[sl, sl]
        put(idx[1], idx[1], -T2 @ Pd_blocks)
        put(idx[1], idx[3], T2 @ sys.B_p.T)
        put(idx[4], idx[4], -T2)
        put(idx[0], idx[4], P_inv @ sys.C_q.T + Y.T @ sys.D_u.T)
    if nw:
        put(idx[2], idx[2], -tau3O * sys.P_w)
        put(idx[2], idx[3], sys.B_w.T)
        if nd:
            put(idx[2], idx[4], sys.D_w.T)
    return float(np.linalg.eigvalsh(M)[-1])


def _membership_residual(sys, P_inv, Y) -> float:
    worst = -np.inf
    for i in range(sys.n_c):
        row = (sys.F[i:i + 1] @ P_inv + sys.G[i:i + 1] @ Y).ravel()
        M = np.block([[np.array([[-1.0]]), row[None, :]],
                      [row[:, None], -P_inv]])
        worst = max(worst, float(np.linalg.eigvalsh(M)[-1]))
    return worst


def reverify_gain(vs: ValidatedSystem, P: np.ndarray, K: np.ndarray,
                  tau1O: float, options: SolverOptions | None = None):
    """Re-certify invariance at the recovered gain.

    The shape SDP optimizes over the inverse parameterization; recovering
    ``K = Y P`` passes through a matrix inversion.  This check re-poses the
    invariance condition in the fixed-(P, K) quadratic form, affine in the
    multipliers only, and solves the small feasibility SDP.  Raises
    NumericalFailure when no multipliers certify the recovered gain.
    """
    sys = vs.sys
    nd, nw = sys.n_delta, sys.n_w
    proj = vs.projector
    Acl = sys.A + sys.B @ K
    Ccl = sys.C_q + sys.D_u @ K
    G = np.hstack([Acl, sys.B_p, sys.B_w])      # maps (x, p, w) to x+
    H = np.hstack([Ccl, np.zeros((nd, nd)), sys.D_w])
    n = G.shape[1]
    base = G.T @ P @ G
    sx = slice(0, sys.n_x)
    sp = slice(sys.n_x, sys.n_x + nd)
    sw = slice(sys.n_x + nd, n)
    base[sx, sx] -= tau1O * P

    if nd == 0 and nw == 0:
        top = float(np.linalg.eigvalsh((base + base.T) / 2.0)[-1])
        if top > LMI_CHECK_TOL:
            raise NumericalFailure(
                f"recovered gain fails invariance by {top:.3g}")
        return

    p = ConicProgram("gain_reverify")
    t2 = p.scalars("t2", len(proj), lb=EPS) if nd else []
    tau3 = p.scalar("tau3", lb=EPS) if nw else None
    M = AffMat.constant(base)
    for j, t in enumerate(t2):
        sl = proj.slice(j)
        Ej = np.zeros((nd, nd))
        Ej[sl, sl] = np.eye(sl.stop - sl.start)
        # multiplier on the block constraint p_j' Pd_j p_j <= q_j' q_j;
        # this is the blockwise inverse of the multiplier in the
        # inverse-parameterized LMI
        C = H.T @ Ej @ H
        C[sp, sp] -= _embed(nd, sl, sys.P_Delta[sl, sl])
        M = M + AffMat.scale_of(t.ex, (C + C.T) / 2.0)
    if nw:
        C = np.zeros((n, n))
        C[sw, sw] = -sys.P_w
        M = M + AffMat.scale_of(tau3.ex, C)
        p.add_le(tau3.ex, 1.0 - tau1O)
    p.add_psd(M, name="fixed_gain_invariance")
    mults = [t.ex for t in t2] + ([tau3.ex] if nw else [])
    cost = mults[0]
    for m in mults[1:]:
        cost = cost + m
    p.minimize(cost)
    r = solve(p, options or SolverOptions())
    if r.status != Status.OPTIMAL:
        raise NumericalFailure(
            f"gain re-verification SDP ended {r.status}")


def check_design(vs: ValidatedSystem, d: OfflineDesign):
    """Assert every stored-design invariant; raises NumericalFailure."""
    n_x = vs.n_x
    if np.max(np.abs(d.L.T @ d.L - d.P)) > 1e-10 * (1 + np.max(np.abs(d.P))):
        raise NumericalFailure("Cholesky factor does not reproduce the shape")
    if np.max(np.abs(d.P @ d.P_inv - np.eye(n_x))) > 1e-8:
        raise NumericalFailure("shape inverse pair drifted apart")
    if not (d.tau1O + d.tau3O <= 1.0 + 1e-12):
        raise NumericalFailure("multiplier budget violated")
    if not (0.0 < d.lambda_c < 1.0 and
            abs(d.lambda_c - np.sqrt(d.tau1O)) < 1e-12):
        raise NumericalFailure("contraction factor inconsistent")
    if np.any(d.f_bar < 0.0):
        raise NumericalFailure("negative tightening constant")
    proj = vs.projector
    t2_blocks = [float(d.T2O[proj.slice(j), proj.slice(j)][0, 0])
                 for j in range(len(proj))]
    r_inv = _invariance_residual(vs, d.P_inv, d.Y, t2_blocks, d.tau3O,
                                 d.tau1O)
    if r_inv > LMI_CHECK_TOL:
        raise NumericalFailure(f"invariance LMI residual {r_inv:.3g}")
    r_mem = _membership_residual(vs.sys, d.P_inv, d.Y)
    if r_mem > LMI_CHECK_TOL:
        raise NumericalFailure(f"membership LMI residual {r_mem:.3g}")


def _solve_grid_point(vs: ValidatedSystem, tau: float, options):
    prog = build_invariance_program(vs, tau)
    return solve(prog, options)


def design(vs: ValidatedSystem, weights: CostWeights, grid_step: float = 0.1,
           options: SolverOptions | None = None) -> OfflineDesign:
    """Full offline pipeline over the contraction-multiplier grid.

    Solves one shape SDP per grid point (concurrently), keeps the feasible
    solution with the largest cross-section volume (ties go to the smaller
    multiplier, i.e. faster contraction), recovers the gain, re-verifies
    the invariance LMI at the recovered values, then computes tightening
    constants and the terminal cost.

    Raises
    ------
    NoFeasibleDesign
        No grid point admits a tube; carries the per-point statuses.
    """
    if not 0.0 < grid_step <= 0.5:
        raise ValueError(f"grid step must be in (0, 0.5], got {grid_step}")
    opts = options or SolverOptions()
    taus = [round(float(t), 12) for t in
            np.arange(grid_step, 1.0 - 1e-12, grid_step)]
    with ThreadPoolExecutor(max_workers=min(4, len(taus))) as ex:
        results = list(ex.map(
            lambda t: _solve_grid_point(vs, t, opts), taus))

    statuses = [(t, r.status) for t, r in zip(taus, results)]
    feasible = [(t, r) for t, r in zip(taus, results)
                if r.status == Status.OPTIMAL]
    if not feasible:
        raise NoFeasibleDesign(statuses)
    # r.objective is the minimized -logdet(P_inv): smaller = larger volume;
    # ties within solver noise go to the smaller multiplier (faster tube)
    lo = min(r.objective for _, r in feasible)
    tie = 1e-6 * max(1.0, abs(lo))
    best_t, best = min(feasible,
                       key=lambda tr: (tr[1].objective > lo + tie, tr[0]))

    sys = vs.sys
    proj = vs.projector
    P_inv = np.asarray(best.primal["P_inv"])
    P_inv = (P_inv + P_inv.T) / 2.0
    Y = np.array([[best.primal[f"Y[{i}][{j}]"] for j in range(sys.n_x)]
                  for i in range(sys.n_u)], dtype=float)
    P = np.linalg.inv(P_inv)
    P = (P + P.T) / 2.0
    K = Y @ P
    t2_blocks = [float(best.primal[f"t2O[{j}]"]) for j in range(len(proj))] \
        if sys.n_delta else []
    tau3 = float(best.primal["tau3O"]) if sys.n_w else 0.0

    T2O = np.zeros((sys.n_delta, sys.n_delta))
    for j in range(len(proj)):
        sl = proj.slice(j)
        T2O[sl, sl] = t2_blocks[j] * np.eye(sl.stop - sl.start)

    reverify_gain(vs, P, K, float(best_t), options=opts)
    f_bar = compute_tightening(P_inv, K, sys.F, sys.G)
    P_C, T4O = design_terminal_cost(vs, K, weights.Q_x, weights.Q_u,
                                    options=opts)
    L = np.linalg.cholesky(P).T

    d = OfflineDesign(
        P=P, P_inv=P_inv, L=L, K=K, Y=Y, tau1O=float(best_t),
        tau3O=tau3, T2O=T2O, f_bar=f_bar, P_C=P_C, T4O=T4O,
        lambda_c=float(np.sqrt(best_t)),
        provenance={
            "grid": taus,
            "statuses": [[t, s] for t, s in statuses],
            "objectives": {f"{t:g}": (r.objective if r.optimal else None)
                           for t, r in zip(taus, results)},
            "feas_tol": opts.feas_tol,
            "gap_tol_abs": opts.gap_tol_abs,
            "gap_tol_rel": opts.gap_tol_rel,
        })
    check_design(vs, d)
    return d


def design_terminal_cost(vs: ValidatedSystem, K: np.ndarray,
                         Q_x: np.ndarray, Q_u: np.ndarray,
                         options: SolverOptions | None = None):
    """Minimum-trace terminal cost certifying the disturbance-free
    cost-to-go bound under the tube feedback.

    Solves ``min tr(P_C)`` subject to the two-block dissipation LMI tying
    the closed loop, the stage cost, and per-block multipliers for the
    structured perturbation; returns ``(P_C, T4O)``.

    Raises
    ------
    TerminalCostInfeasible
        The LMI admits no solution: the gain cannot absorb the modeled
        uncertainty level for any quadratic certificate.
    """
    sys = vs.sys
    n_x, nd = sys.n_x, sys.n_delta
    proj = vs.projector
    Acl = sys.A + sys.B @ K
    Ccl = sys.C_q + sys.D_u @ K
    Q_x = np.asarray(Q_x, float)
    Q_u = np.asarray(Q_u, float)
    Qbar = Q_x + K.T @ Q_u @ K

    p = ConicProgram("terminal_cost")
    Pc = p.sym_matrix("P_C", n_x)
    t4 = p.scalars("t4O", len(proj)) if nd else []
    for t in t4:
        p.add_ge(t.ex, 0.0)

    topleft = (Acl.T @ Pc.ex()) @ Acl - Pc.ex() + AffMat.constant(Qbar)
    for j, t in enumerate(t4):
        sl = proj.slice(j)
        Ej = np.zeros((nd, nd))
        Ej[sl, sl] = np.eye(sl.stop - sl.start)
        topleft = topleft + AffMat.scale_of(t.ex, Ccl.T @ Ej @ Ccl)
    if nd:
        offdiag = (Acl.T @ Pc.ex()) @ sys.B_p
        lower = (sys.B_p.T @ Pc.ex()) @ sys.B_p
        for j, t in enumerate(t4):
            sl = proj.slice(j)
            lower = lower + AffMat.scale_of(
                t.ex, -_embed(nd, sl, sys.P_Delta[sl, sl]))
        p.add_psd_grid([[topleft, offdiag], [None, lower]],
                       name="cost_dissipation")
    else:
        p.add_psd(topleft, name="cost_dissipation")
    p.add_psd(AffMat.constant(EPS * np.eye(n_x)) - Pc.ex(), name="cost_floor")
    tr = sum((Pc.entry(i, i) for i in range(1, n_x)), Pc.entry(0, 0))
    p.minimize(tr)

    r = solve(p, options or SolverOptions())
    if r.status != Status.OPTIMAL:
        raise TerminalCostInfeasible(
            f"terminal cost solve ended {r.status}: the gain cannot absorb "
            f"the uncertainty level")
    P_C = np.asarray(r.primal["P_C"])
    P_C = (P_C + P_C.T) / 2.0
    T4O = np.zeros((nd, nd))
    for j in range(len(proj)):
        sl = proj.slice(j)
        T4O[sl, sl] = float(r.primal[f"t4O[{j}]"]) * np.eye(sl.stop - sl.start)
    return P_C, T4O


# --- sampled verification ---------------------------------------------------


@dataclass(frozen=True)
class VerificationReport:
    """Sampled checks of the design's set claims (see :func:`verify_design`)."""

    max_next_norm: float
    max_contraction: float
    max_constraint_gap: float
    invariance_ok: bool
    contraction_ok: bool
    membership_ok: bool
    n_samples: int

    @property
    def all_ok(self) -> bool:
        return self.invariance_ok and self.contraction_ok and self.membership_ok


def _sample_boundary(L: np.ndarray, rng) -> np.ndarray:
    """Uniform direction mapped to the unit shell of ``x'Px = 1``."""
    u = rng.normal(size=L.shape[0])
    u /= np.linalg.norm(u)
    return np.linalg.solve(L, u)


def _sample_delta(vs: ValidatedSystem, rng, boundary: bool = True):
    nd = vs.n_delta
    D = np.zeros((nd, nd))
    proj = vs.projector
    for j in range(len(proj)):
        sl = proj.slice(j)
        s = sl.stop - sl.start
        Dj = rng.normal(size=(s, s))
        M = Dj.T @ vs.P_Delta[sl, sl] @ Dj
        top = float(np.linalg.eigvalsh(M)[-1])
        if top > 0.0:
            scale = 1.0 if boundary else float(rng.uniform(0.0, 1.0))
            Dj = Dj * (scale / np.sqrt(top))
        D[sl, sl] = Dj
    return D


def verify_design(vs: ValidatedSystem, d: OfflineDesign,
                  n_samples: int = 500, seed: int = 0) -> VerificationReport:
    """Monte-Carlo audit of the three set-theoretic claims of the design.

    (a) one-step image of the terminal shell stays in the terminal set,
    (b) with zero disturbance the tube norm contracts by ``lambda_c``,
    (c) the terminal set obeys the constraints under the tube feedback.
    """
    rng = np.random.default_rng(seed)
    sys = vs.sys
    Acl = sys.A + sys.B @ d.K
    Ccl = sys.C_q + sys.D_u @ d.K
    H = sys.F + sys.G @ d.K
    Lw = vs.L_w

    max_next = 0.0
    max_contr = 0.0
    max_gap = -np.inf
    for _ in range(n_samples):
        x = _sample_boundary(d.L, rng)
        D = _sample_delta(vs, rng) if sys.n_delta else np.zeros((0, 0))
        if sys.n_w:
            u = rng.normal(size=sys.n_w)
            w = np.linalg.solve(Lw.T, u / np.linalg.norm(u))
        else:
            w = np.zeros(0)

        q = Ccl @ x + sys.D_w @ w
        xp = Acl @ x + sys.B_p @ (D @ q) + sys.B_w @ w
        max_next = max(max_next, d.norm_P(xp))

        q0 = Ccl @ x
        xp0 = Acl @ x + sys.B_p @ (D @ q0)
        max_contr = max(max_contr, d.norm_P(xp0) / d.norm_P(x))

        xin = x * rng.uniform(0.0, 1.0)
        max_gap = max(max_gap, float(np.max(H @ xin - 1.0)))

    return VerificationReport(
        max_next_norm=max_next, max_contraction=max_contr,
        max_constraint_gap=max_gap,
        invariance_ok=max_next <= 1.0 + 1e-6,
        contraction_ok=max_contr <= d.lambda_c + 1e-6,
        membership_ok=max_gap <= 1e-8,
        n_samples=n_samples)


# --- persistence ------------------------------------------------------------

_DESIGN_MATS = ("P", "P_inv", "L", "K", "Y", "T2O", "P_C", "T4O")


def save_design(d: OfflineDesign, path):
    """Write a design file (JSON, format tag ``etmpc-design/1``)."""
    doc = {"format": DESIGN_FORMAT}
    for key in _DESIGN_MATS:
        doc[key] = np.asarray(getattr(d, key), dtype=float).tolist()
    doc["f_bar"] = np.asarray(d.f_bar, dtype=float).tolist()
    doc["tau1O"] = d.tau1O
    doc["tau3O"] = d.tau3O
    doc["lambda_c"] = d.lambda_c
    doc["provenance"] = d.provenance
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_design(path) -> OfflineDesign:
    """Read a design file; raises ParseError/SchemaError on bad input."""
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}:{e.colno}", e.msg) from None
    if not isinstance(doc, dict) or doc.get("format") != DESIGN_FORMAT:
        raise SchemaError("format", f"expected {DESIGN_FORMAT!r}")
    need = set(_DESIGN_MATS) | {"f_bar", "tau1O", "tau3O", "lambda_c"}
    for key in need:
        if key not in doc:
            raise SchemaError(key, "missing")
    mats = {k: np.asarray(doc[k], dtype=float) for k in _DESIGN_MATS}
    nd = len(doc["T2O"])
    for k in ("T2O", "T4O"):
        if mats[k].size == 0:
            mats[k] = np.zeros((nd, nd))
    return OfflineDesign(
        f_bar=np.asarray(doc["f_bar"], dtype=float),
        tau1O=float(doc["tau1O"]), tau3O=float(doc["tau3O"]),
        lambda_c=float(doc["lambda_c"]),
        provenance=doc.get("provenance", {}), **mats)
