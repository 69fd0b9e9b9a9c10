"""Per-step tube controller: one conic solve per measurement.

Each step plans a sequence of ellipsoidal cross-sections (center, radius)
around a nominal trajectory, together with affine input corrections and
the S-procedure multipliers that certify, stage by stage, that every
realization of the structured uncertainty and the disturbance keeps the
true state inside the next cross-section.  The applied input combines the
offline feedback on the deviation from the first center with the first
correction term.

Two cost modes exist: the default bounds the worst stage cost over each
cross-section through per-stage epigraph matrix inequalities; the nominal
mode penalizes only the center trajectory through quadratic epigraphs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .conic import AffMat, ConicProgram, SolverOptions, Status, solve
from .conic.program import EPS, LinExpr
from .errors import (HorizonTooShort, InfeasibleAtState, NumericalFailure)
from .model import CostWeights, ValidatedSystem
from .offline import OfflineDesign, _embed, _row_mask

WORST_CASE = "worst-case"
NOMINAL = "nominal"
CANDIDATE = "Candidate"  # status of a shifted plan (not solver-produced)

_BOUND_SLACK = 1e-7  # solver feasibility tolerance on simple bounds


@dataclass(frozen=True)
class TubeSolution:
    """One step's tube plan plus its certificates.

    ``z``/``alpha`` hold the N+1 cross-sections, ``v`` the N input
    corrections.  ``tau1``, ``T2`` (per uncertainty block), ``tau3`` are
    the per-stage inclusion multipliers; ``tau4``/``gamma`` the stage cost
    multiplier/bound pairs; ``tau1T`` certifies the terminal membership
    and ``tau2T``/``gammaT`` the terminal cost bound.  In nominal cost
    mode the multiplier arrays for the cost are empty and ``gamma`` holds
    the center-cost epigraph values.
    """

    z: np.ndarray
    alpha: np.ndarray
    v: np.ndarray
    tau1: np.ndarray
    T2: np.ndarray
    tau3: np.ndarray
    tau4: np.ndarray
    gamma: np.ndarray
    tau1T: float
    tau2T: float
    gammaT: float
    objective: float
    status: str
    cost_mode: str = WORST_CASE
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def horizon(self) -> int:
        return len(self.v)

    @property
    def optimal(self) -> bool:
        return self.status == Status.OPTIMAL


def _lin(x) -> LinExpr:
    if isinstance(x, LinExpr):
        return x
    return LinExpr({}, float(x))


def _dot(coefs, exprs) -> LinExpr:
    """Affine scalar sum_i coefs[i] * exprs[i]; entries may be floats."""
    out = LinExpr({}, 0.0)
    for c, e in zip(coefs, exprs):
        if c != 0.0:
            out = out + _lin(e) * float(c)
    return out


def _inclusion_cells(design: OfflineDesign, vs: ValidatedSystem,
                     z_l, v_l, z_n, alpha_l, alpha_n, tau1, t2, tau3):
    """Upper-triangle grid asserting one tube-propagation step.

    All tube quantities may be scalar variables or fixed floats; the grid
    is affine in whichever of them are variables, so the same assembly
    serves the per-step program and the candidate-completion solves.
    Returns the grid; absent channels are dropped.
    """
    sys = vs.sys
    n_x, nd, nw = sys.n_x, sys.n_delta, sys.n_w
    proj = vs.projector
    Acl = sys.A + sys.B @ design.K
    Ccl = sys.C_q + sys.D_u @ design.K
    alpha_l = _lin(alpha_l)
    alpha_n = _lin(alpha_n)
    tau1 = _lin(tau1)

    d_row = [_dot(sys.A[j], z_l) + _dot(sys.B[j], v_l) - _lin(z_n[j])
             for j in range(n_x)]
    cells = {
        (0, 0): AffMat.scale_of(tau1, -design.P),
        (0, 4): AffMat.scale_of(alpha_l, Acl.T),
        (3, 3): AffMat.scale_of(tau1 + _lin(tau3) - alpha_n
                                if nw else tau1 - alpha_n, [[1.0]]),
        (3, 4): AffMat.row_of(d_row),
        (4, 4): AffMat.scale_of(alpha_n, -design.P_inv),
    }
    if nd:
        cells[(0, 5)] = AffMat.scale_of(alpha_l, Ccl.T)
        m_pp = AffMat.zeros(nd, nd)
        m_px = AffMat.zeros(nd, n_x)
        m_qq = AffMat.zeros(nd, nd)
        for j in range(len(proj)):
            sl = proj.slice(j)
            tj = _lin(t2[j])
            m_pp = m_pp + AffMat.scale_of(
                tj, -_embed(nd, sl, sys.P_Delta[sl, sl]))
            m_px = m_px + AffMat.scale_of(tj, _row_mask(nd, sl, sys.B_p.T))
            m_qq = m_qq + AffMat.scale_of(
                tj, -_embed(nd, sl, np.eye(sl.stop - sl.start)))
        cells[(1, 1)] = m_pp
        cells[(1, 4)] = m_px
        cells[(5, 5)] = m_qq
        cells[(3, 5)] = AffMat.row_of(
            [_dot(sys.C_q[j], z_l) + _dot(sys.D_u[j], v_l)
             for j in range(nd)])
    if nw:
        cells[(2, 2)] = AffMat.scale_of(_lin(tau3), -sys.P_w)
        cells[(2, 4)] = AffMat.constant(sys.B_w.T)
        if nd:
            cells[(2, 5)] = AffMat.constant(sys.D_w.T)

    segs = [0] + ([1] if nd else []) + ([2] if nw else []) + [3, 4] \
        + ([5] if nd else [])
    return [[cells.get((si, sj)) if sj >= si else None for sj in segs]
            for si in segs]


def _terminal_cells(design: OfflineDesign, z_N, alpha_N, tau1T):
    """Grid asserting the last cross-section sits inside the terminal set."""
    n_x = design.P.shape[0]
    tau1T = _lin(tau1T)
    return [
        [AffMat.scale_of(tau1T, -design.P), None, None,
         AffMat.scale_of(tau1T, np.eye(n_x))],
        [None, AffMat.constant([[-1.0]]),
         AffMat.scale_of(_lin(alpha_N), [[1.0]]),
         AffMat.row_of([_lin(e) for e in z_N])],
        [None, None, AffMat.scale_of(tau1T, [[-1.0]]), None],
        [None, None, None, AffMat.constant(-design.P_inv)],
    ]


def _stage_cost_cells(design: OfflineDesign, Qx_inv, Qu_inv,
                      z_l, v_l, alpha_l, tau4, gamma):
    """Grid bounding the worst stage cost over one cross-section."""
    n_x = design.P.shape[0]
    tau4 = _lin(tau4)
    return [
        [AffMat.scale_of(tau4, -design.P), None,
         AffMat.scale_of(tau4, np.eye(n_x)),
         AffMat.scale_of(tau4, design.K.T), None],
        [None, AffMat.scale_of(_lin(gamma), [[-1.0]]),
         AffMat.row_of([_lin(e) for e in z_l]),
         AffMat.row_of([_lin(e) for e in v_l]),
         AffMat.scale_of(_lin(alpha_l), [[1.0]])],
        [None, None, AffMat.constant(-Qx_inv), None, None],
        [None, None, None, AffMat.constant(-Qu_inv), None],
        [None, None, None, None, AffMat.scale_of(tau4, [[-1.0]])],
    ]


def _terminal_cost_cells(design: OfflineDesign, Pc_inv,
                         z_N, alpha_N, tau2T, gammaT):
    """Grid bounding the worst terminal cost over the last cross-section."""
    n_x = design.P.shape[0]
    tau2T = _lin(tau2T)
    return [
        [AffMat.scale_of(tau2T, -design.P), None,
         AffMat.scale_of(tau2T, -np.eye(n_x)), None],
        [None, AffMat.scale_of(_lin(gammaT), [[-1.0]]),
         AffMat.row_of([_lin(e) for e in z_N]),
         AffMat.scale_of(_lin(alpha_N), [[1.0]])],
        [None, None, AffMat.constant(-Pc_inv), None],
        [None, None, None, AffMat.scale_of(tau2T, [[-1.0]])],
    ]


def _sym_inv(M: np.ndarray) -> np.ndarray:
    out = np.linalg.inv(M)
    return (out + out.T) / 2.0


def build_online_program(design: OfflineDesign, vs: ValidatedSystem,
                         x_hat: np.ndarray, N: int,
                         weights: CostWeights,
                         cost_mode: str = WORST_CASE) -> ConicProgram:
    """Assemble the per-step conic program.

    Structure (worst-case mode): one SOC row anchoring the measured state
    in the first cross-section; N tube-propagation grids; n_c tightened
    linear rows per stage; one terminal-membership grid; N stage-cost
    grids and one terminal-cost grid; lower bounds keeping radii and
    multipliers positive.  The objective is the sum of the cost bounds.

    Nominal mode replaces the cost grids with quadratic epigraphs on the
    center trajectory (one SOC per stage plus one terminal SOC).
    """
    if N < 1:
        raise HorizonTooShort(N)
    if cost_mode not in (WORST_CASE, NOMINAL):
        raise ValueError(f"unknown cost mode {cost_mode!r}")
    sys = vs.sys
    n_x, n_u, nd, nw = sys.n_x, sys.n_u, sys.n_delta, sys.n_w
    delta = len(vs.projector) if nd else 0
    x_hat = np.asarray(x_hat, float).reshape(n_x)

    p = ConicProgram(f"tube_step[N={N},{cost_mode}]")
    z = [p.scalars(f"z[{l}]", n_x) for l in range(N + 1)]
    alpha = [p.scalar(f"alpha[{l}]", lb=EPS) for l in range(N + 1)]
    v = [p.scalars(f"v[{l}]", n_u) for l in range(N)]
    tau1 = [p.scalar(f"tau1[{l}]", lb=EPS) for l in range(N)]
    t2 = [p.scalars(f"T2[{l}]", delta, lb=EPS) for l in range(N)]
    tau3 = [p.scalar(f"tau3[{l}]", lb=EPS) for l in range(N)] if nw else None
    tau1T = p.scalar("tau1T", lb=EPS)

    def zx(l):
        return [s.ex for s in z[l]]

    def vx(l):
        return [s.ex for s in v[l]]

    # initial cross-section must cover the measurement
    resid = [_dot(-design.L[i], zx(0)) + float(design.L[i] @ x_hat)
             for i in range(n_x)]
    p.add_soc(resid, alpha[0].ex, name="initial_state")

    for l in range(N):
        p.add_psd(_inclusion_cells(
            design, vs, zx(l), vx(l), zx(l + 1), alpha[l].ex,
            alpha[l + 1].ex, tau1[l].ex,
            [s.ex for s in t2[l]], tau3[l].ex if nw else 0.0),
            name=f"inclusion[{l}]")
        for i in range(sys.n_c):
            row = _dot(sys.F[i], zx(l)) + _dot(sys.G[i], vx(l)) \
                + alpha[l].ex * float(design.f_bar[i])
            p.add_le(row, 1.0)

    p.add_psd(_terminal_cells(design, zx(N), alpha[N].ex, tau1T.ex),
              name="terminal_set")

    if cost_mode == WORST_CASE:
        Qx_inv = _sym_inv(weights.Q_x)
        Qu_inv = _sym_inv(weights.Q_u)
        Pc_inv = _sym_inv(design.P_C)
        tau4 = [p.scalar(f"tau4[{l}]", lb=EPS) for l in range(N)]
        gamma = [p.scalar(f"gamma[{l}]", lb=0.0) for l in range(N)]
        tau2T = p.scalar("tau2T", lb=EPS)
        gammaT = p.scalar("gammaT", lb=0.0)
        for l in range(N):
            p.add_psd(_stage_cost_cells(
                design, Qx_inv, Qu_inv, zx(l), vx(l), alpha[l].ex,
                tau4[l].ex, gamma[l].ex), name=f"stage_cost[{l}]")
        p.add_psd(_terminal_cost_cells(
            design, Pc_inv, zx(N), alpha[N].ex, tau2T.ex, gammaT.ex),
            name="terminal_cost")
        cost = gammaT.ex
        for g in gamma:
            cost = cost + g.ex
    else:
        Wx = np.linalg.cholesky(weights.Q_x).T
        Wu = np.linalg.cholesky(weights.Q_u).T
        Wc = np.linalg.cholesky(design.P_C).T
        gamma = [p.scalar(f"gamma[{l}]", lb=0.0) for l in range(N)]
        gammaT = p.scalar("gammaT", lb=0.0)
        for l in range(N):
            vec = [_dot(Wx[i], zx(l)) for i in range(n_x)] \
                + [_dot(Wu[i], vx(l)) for i in range(n_u)] \
                + [gamma[l].ex * 0.5 - 0.5]
            p.add_soc(vec, gamma[l].ex * 0.5 + 0.5,
                      name=f"center_cost[{l}]")
        vec = [_dot(Wc[i], zx(N)) for i in range(n_x)] \
            + [gammaT.ex * 0.5 - 0.5]
        p.add_soc(vec, gammaT.ex * 0.5 + 0.5, name="center_cost_T")
        cost = gammaT.ex
        for g in gamma:
            cost = cost + g.ex
    p.minimize(cost)
    return p


def _extract_solution(r, N: int, vs: ValidatedSystem,
                      cost_mode: str) -> TubeSolution:
    sys = vs.sys
    delta = len(vs.projector) if sys.n_delta else 0
    pr = r.primal
    z = np.array([[pr[f"z[{l}][{j}]"] for j in range(sys.n_x)]
                  for l in range(N + 1)])
    alpha = np.array([pr[f"alpha[{l}]"] for l in range(N + 1)])
    v = np.array([[pr[f"v[{l}][{j}]"] for j in range(sys.n_u)]
                  for l in range(N)])
    tau1 = np.array([pr[f"tau1[{l}]"] for l in range(N)])
    T2 = np.array([[pr[f"T2[{l}][{j}]"] for j in range(delta)]
                   for l in range(N)]).reshape(N, delta)
    tau3 = (np.array([pr[f"tau3[{l}]"] for l in range(N)])
            if sys.n_w else np.zeros(0))
    gamma = np.array([pr[f"gamma[{l}]"] for l in range(N)])
    if cost_mode == WORST_CASE:
        tau4 = np.array([pr[f"tau4[{l}]"] for l in range(N)])
        tau2T = float(pr["tau2T"])
    else:
        tau4 = np.zeros(0)
        tau2T = float("nan")
    diag = dict(r.diagnostics)
    diag["psd_violation"] = r.psd_violation
    diag["lin_violation"] = r.lin_violation
    diag["iterations"] = r.iterations
    diag["wall_time"] = r.wall_time
    return TubeSolution(
        z=z, alpha=alpha, v=v, tau1=tau1, T2=T2, tau3=tau3, tau4=tau4,
        gamma=gamma, tau1T=float(pr["tau1T"]), tau2T=tau2T,
        gammaT=float(pr["gammaT"]), objective=r.objective,
        status=r.status, cost_mode=cost_mode, diagnostics=diag)


def check_solution(sol: TubeSolution, design: OfflineDesign,
                   vs: ValidatedSystem, x_hat: np.ndarray):
    """Assert the stored-plan invariants; raises NumericalFailure."""
    sys = vs.sys
    x_hat = np.asarray(x_hat, float).reshape(sys.n_x)
    if np.any(sol.alpha < EPS - _BOUND_SLACK):
        raise NumericalFailure("cross-section radius below floor")
    for arr in (sol.tau1, sol.T2.ravel(), sol.tau3, sol.tau4):
        if arr.size and np.min(arr) < EPS - _BOUND_SLACK:
            raise NumericalFailure("certificate multiplier below floor")
    if np.any(sol.gamma < -_BOUND_SLACK) or sol.gammaT < -_BOUND_SLACK:
        raise NumericalFailure("negative cost bound")
    r0 = np.linalg.norm(design.L @ (x_hat - sol.z[0]))
    if r0 > sol.alpha[0] + 1e-8:
        raise NumericalFailure(
            f"measured state escapes the first cross-section by "
            f"{r0 - sol.alpha[0]:.3g}")
    for l in range(sol.horizon):
        rows = sys.F @ sol.z[l] + sys.G @ sol.v[l] \
            + sol.alpha[l] * design.f_bar
        worst = float(np.max(rows - 1.0))
        if worst > 1e-8:
            raise NumericalFailure(
                f"tightened constraint row violated at stage {l} by "
                f"{worst:.3g}")


def mpc_step(design: OfflineDesign, vs: ValidatedSystem,
             x_hat: np.ndarray, N: int, weights: CostWeights,
             warm: TubeSolution | None = None,
             cost_mode: str = WORST_CASE,
             options: SolverOptions | None = None):
    """Solve one step and return ``(u, sol)``.

    ``u = K (x_hat - z[0]) + v[0]``.  ``warm`` is accepted for interface
    stability and recorded in the diagnostics; the bundled interior-point
    backend is self-initializing and does not consume it.

    Raises
    ------
    InfeasibleAtState
        The program is infeasible at this state; carries the state and
        solver diagnostics so the caller can decide on a fallback.
    NumericalFailure
        The solver failed without an infeasibility certificate.
    """
    prog = build_online_program(design, vs, x_hat, N, weights, cost_mode)
    r = solve(prog, options or SolverOptions())
    if r.status == Status.INFEASIBLE:
        raise InfeasibleAtState(np.asarray(x_hat, float), r.diagnostics)
    if r.status != Status.OPTIMAL:
        raise NumericalFailure(f"per-step solve ended {r.status}")
    sol = _extract_solution(r, N, vs, cost_mode)
    if warm is not None:
        sol.diagnostics["warm_start"] = "ignored by backend"
    check_solution(sol, design, vs, x_hat)
    u = design.K @ (np.asarray(x_hat, float) - sol.z[0]) + sol.v[0]
    return u, sol


def fallback_input(design: OfflineDesign, x_hat: np.ndarray,
                   candidate: TubeSolution) -> np.ndarray:
    """Input from a stored shifted candidate when the step cannot solve."""
    return design.K @ (np.asarray(x_hat, float) - candidate.z[0]) \
        + candidate.v[0]


# --- shifted candidate ------------------------------------------------------


def _relax(grid, slack: LinExpr):
    """Subtract slack from the diagonal, turning M <= 0 into M <= slack*I."""
    out = [list(row) for row in grid]
    for i in range(len(out)):
        cell = out[i][i]
        out[i][i] = cell + AffMat.scale_of(slack * -1.0,
                                           np.eye(cell.shape[0]))
    return out


def _complete_inclusion(design, vs, z_l, v_l, z_n, alpha_l, alpha_n,
                        options) -> tuple:
    """Multipliers for one propagation step at fixed tube values.

    The recursion that justifies the shifted plan proves invariance of the
    full terminal set, not of the smaller last cross-section the shift
    reuses, so the required certificate can miss by a margin that shrinks
    geometrically with the horizon.  A minimal-slack solve therefore
    replaces a hard feasibility solve: it always returns multipliers plus
    the signed infeasibility ``resid`` (negative means strictly feasible).
    """
    sys = vs.sys
    nd, nw = sys.n_delta, sys.n_w
    delta = len(vs.projector) if nd else 0

    def build(relaxed: bool):
        p = ConicProgram("complete_inclusion")
        tau1 = p.scalar("tau1", lb=EPS)
        t2 = p.scalars("t2", delta, lb=EPS)
        tau3 = p.scalar("tau3", lb=EPS) if nw else None
        grid = _inclusion_cells(
            design, vs, list(z_l), list(v_l), list(z_n), float(alpha_l),
            float(alpha_n), tau1.ex, [t.ex for t in t2],
            tau3.ex if nw else 0.0)
        if relaxed:
            s = p.scalar("slack")
            p.add_psd(_relax(grid, s.ex), name="inclusion")
            p.minimize(s.ex)
        else:
            p.add_psd(grid, name="inclusion")
            cost = tau1.ex
            for t in t2:
                cost = cost + t.ex
            if nw:
                cost = cost + tau3.ex
            p.minimize(cost)
        return p

    r = solve(build(relaxed=True), options)
    if r.status != Status.OPTIMAL:
        raise NumericalFailure(
            f"candidate inclusion completion failed ({r.status})")
    resid = float(r.primal["slack"])
    if resid <= 0.0:
        r2 = solve(build(relaxed=False), options)
        if r2.status == Status.OPTIMAL:
            r = r2
    return (float(r.primal["tau1"]),
            np.array([r.primal[f"t2[{j}]"] for j in range(delta)]),
            float(r.primal["tau3"]) if nw else 0.0,
            resid)


def _complete_terminal(design, z_N, alpha_N, options) -> tuple:
    """Terminal-membership multiplier, via the same minimal-slack route."""

    def build(relaxed: bool):
        p = ConicProgram("complete_terminal")
        tau1T = p.scalar("tau1T", lb=EPS)
        grid = _terminal_cells(design, list(z_N), float(alpha_N), tau1T.ex)
        if relaxed:
            s = p.scalar("slack")
            p.add_psd(_relax(grid, s.ex), name="terminal_set")
            p.minimize(s.ex)
        else:
            p.add_psd(grid, name="terminal_set")
            p.minimize(tau1T.ex)
        return p

    r = solve(build(relaxed=True), options)
    if r.status != Status.OPTIMAL:
        raise NumericalFailure(
            f"candidate terminal completion failed ({r.status})")
    resid = float(r.primal["slack"])
    if resid <= 0.0:
        r2 = solve(build(relaxed=False), options)
        if r2.status == Status.OPTIMAL:
            r = r2
    return float(r.primal["tau1T"]), resid


def _complete_stage_cost(design, weights, z_l, v_l, alpha_l, options):
    p = ConicProgram("complete_stage_cost")
    tau4 = p.scalar("tau4", lb=EPS)
    gamma = p.scalar("gamma", lb=0.0)
    p.add_psd(_stage_cost_cells(
        design, _sym_inv(weights.Q_x), _sym_inv(weights.Q_u),
        list(z_l), list(v_l), float(alpha_l), tau4.ex, gamma.ex),
        name="stage_cost")
    p.minimize(gamma.ex)
    r = solve(p, options)
    if r.status != Status.OPTIMAL:
        raise NumericalFailure(
            f"candidate stage-cost bound not found ({r.status})")
    return float(r.primal["tau4"]), float(r.primal["gamma"])


def _complete_terminal_cost(design, z_N, alpha_N, options):
    p = ConicProgram("complete_terminal_cost")
    tau2T = p.scalar("tau2T", lb=EPS)
    gammaT = p.scalar("gammaT", lb=0.0)
    p.add_psd(_terminal_cost_cells(
        design, _sym_inv(design.P_C), list(z_N), float(alpha_N),
        tau2T.ex, gammaT.ex), name="terminal_cost")
    p.minimize(gammaT.ex)
    r = solve(p, options)
    if r.status != Status.OPTIMAL:
        raise NumericalFailure(
            f"candidate terminal-cost bound not found ({r.status})")
    return float(r.primal["tau2T"]), float(r.primal["gammaT"])


def shift_candidate(sol: TubeSolution, design: OfflineDesign,
                    vs: ValidatedSystem, weights: CostWeights,
                    complete: bool = True,
                    options: SolverOptions | None = None) -> TubeSolution:
    """Next-step feasible candidate built from an optimal plan.

    Centers, radii and corrections shift forward one stage; the vacated
    last stage propagates the old last center through the nominal closed
    loop, keeps its radius, and applies the offline feedback at the old
    last center.  Shifted stages keep their multipliers (their constraints
    are unchanged); the new last stage and the two terminal certificates
    are recomputed by small completion solves unless ``complete`` is
    False, in which case they are NaN and the candidate serves only as a
    warm start or fallback input source.

    The completion solves minimize the infeasibility of each new block,
    never fail, and record the signed residuals (negative when strictly
    feasible) in ``diagnostics['completion_residuals']``.
    """
    if sol.status not in (Status.OPTIMAL, CANDIDATE):
        raise ValueError(f"cannot shift a plan with status {sol.status!r}")
    sys = vs.sys
    N = sol.horizon
    opts = options or SolverOptions()
    Acl = sys.A + sys.B @ design.K

    z = np.vstack([sol.z[1:], (Acl @ sol.z[N])[None, :]])
    alpha = np.concatenate([sol.alpha[1:], [sol.alpha[N]]])
    v = np.vstack([sol.v[1:], (design.K @ sol.z[N])[None, :]])

    nan = float("nan")
    tau1 = np.concatenate([sol.tau1[1:], [nan]])
    T2 = np.vstack([sol.T2[1:], np.full((1, sol.T2.shape[1]), nan)]) \
        if sol.T2.size else sol.T2
    tau3 = (np.concatenate([sol.tau3[1:], [nan]])
            if sol.tau3.size else sol.tau3)
    if sol.cost_mode == WORST_CASE:
        tau4 = np.concatenate([sol.tau4[1:], [nan]])
        gamma = np.concatenate([sol.gamma[1:], [nan]])
        tau2T, gammaT = nan, nan
    else:
        tau4 = sol.tau4
        wz = z[N - 1] @ weights.Q_x @ z[N - 1] + v[N - 1] @ weights.Q_u \
            @ v[N - 1]
        gamma = np.concatenate([sol.gamma[1:], [wz]])
        tau2T, gammaT = nan, float(z[N] @ design.P_C @ z[N])
    tau1T = nan

    resids = {}
    if complete:
        tau1_N, t2_N, tau3_N, r_inc = _complete_inclusion(
            design, vs, z[N - 1], v[N - 1], z[N], alpha[N - 1], alpha[N],
            opts)
        tau1[N - 1] = tau1_N
        if T2.size:
            T2[N - 1] = t2_N
        if tau3.size:
            tau3[N - 1] = tau3_N
        tau1T, r_term = _complete_terminal(design, z[N], alpha[N], opts)
        resids = {"inclusion": r_inc, "terminal": r_term}
        if sol.cost_mode == WORST_CASE:
            tau4[N - 1], gamma[N - 1] = _complete_stage_cost(
                design, weights, z[N - 1], v[N - 1], alpha[N - 1], opts)
            tau2T, gammaT = _complete_terminal_cost(
                design, z[N], alpha[N], opts)

    return TubeSolution(
        z=z, alpha=alpha, v=v, tau1=tau1, T2=T2, tau3=tau3, tau4=tau4,
        gamma=gamma, tau1T=tau1T, tau2T=tau2T, gammaT=gammaT,
        objective=float(np.sum(gamma) + gammaT),
        status=CANDIDATE, cost_mode=sol.cost_mode,
        diagnostics={"shifted_from_objective": sol.objective,
                     "completion_residuals": resids})


def candidate_as_vector(cand: TubeSolution, prog: ConicProgram) -> np.ndarray:
    """Dense variable vector of a candidate in a program's ordering.

    Used to audit a shifted candidate against the next step's program via
    ``prog.max_violations``.
    """
    sys_nx = cand.z.shape[1]
    n_u = cand.v.shape[1]
    N = cand.horizon
    x = np.zeros(prog.n_vars)

    def put(name, val):
        x[prog.scalar_vars[name].index] = val

    for l in range(N + 1):
        for j in range(sys_nx):
            put(f"z[{l}][{j}]", cand.z[l, j])
        put(f"alpha[{l}]", cand.alpha[l])
    for l in range(N):
        for j in range(n_u):
            put(f"v[{l}][{j}]", cand.v[l, j])
        put(f"tau1[{l}]", cand.tau1[l])
        for j in range(cand.T2.shape[1]):
            put(f"T2[{l}][{j}]", cand.T2[l, j])
        if cand.tau3.size:
            put(f"tau3[{l}]", cand.tau3[l])
        if cand.tau4.size:
            put(f"tau4[{l}]", cand.tau4[l])
        put(f"gamma[{l}]", cand.gamma[l])
    put("tau1T", cand.tau1T)
    put("gammaT", cand.gammaT)
    if not np.isnan(cand.tau2T):
        put("tau2T", cand.tau2T)
    return x


# --- sampled audits ---------------------------------------------------------


@dataclass(frozen=True)
class AuditReport:
    """Sampled worst-case cost check per stage and for the terminal set."""

    stage_max: np.ndarray
    stage_bound: np.ndarray
    terminal_max: float
    terminal_bound: float
    n_samples: int

    @property
    def stage_ok(self) -> bool:
        return bool(np.all(self.stage_max <= self.stage_bound + 1e-6))

    @property
    def terminal_ok(self) -> bool:
        return self.terminal_max <= self.terminal_bound + 1e-6

    @property
    def all_ok(self) -> bool:
        return self.stage_ok and self.terminal_ok


def worst_case_cost_audit(sol: TubeSolution, design: OfflineDesign,
                          vs: ValidatedSystem, weights: CostWeights,
                          n_samples: int = 1000, seed: int = 0) -> AuditReport:
    """Sample each cross-section boundary and compare stage costs with the
    certified bounds (worst-case mode plans only)."""
    if sol.cost_mode != WORST_CASE:
        raise ValueError("cost audit applies to worst-case plans")
    rng = np.random.default_rng(seed)
    n_x = design.P.shape[0]
    N = sol.horizon
    U = rng.normal(size=(n_samples, n_x))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    shell = np.linalg.solve(design.L, U.T).T  # unit boundary points

    stage_max = np.zeros(N)
    for l in range(N):
        X = sol.z[l] + sol.alpha[l] * shell
        Uu = (X - sol.z[l]) @ design.K.T + sol.v[l]
        costs = np.einsum("ij,jk,ik->i", X, weights.Q_x, X) \
            + np.einsum("ij,jk,ik->i", Uu, weights.Q_u, Uu)
        stage_max[l] = float(np.max(costs))
    XT = sol.z[N] + sol.alpha[N] * shell
    term_max = float(np.max(np.einsum("ij,jk,ik->i", XT, design.P_C, XT)))
    return AuditReport(
        stage_max=stage_max, stage_bound=sol.gamma.copy(),
        terminal_max=term_max, terminal_bound=sol.gammaT,
        n_samples=n_samples)
