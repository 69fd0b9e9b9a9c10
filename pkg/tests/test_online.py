"""Per-step controller tests: structure, oracles, and sampled certificates."""

import dataclasses

import numpy as np
import pytest

from etmpc import online
from etmpc.conic import SolverOptions
from etmpc.conic.program import EPS
from etmpc.conic.sdpa import export_sdpa
from etmpc.errors import HorizonTooShort, InfeasibleAtState, NumericalFailure
from etmpc.model import CostWeights, LftSystem, validate_system
from etmpc.offline import (OfflineDesign, _sample_boundary, _sample_delta,
                           design)
from etmpc.online import (NOMINAL, WORST_CASE, TubeSolution,
                          build_online_program, candidate_as_vector,
                          check_solution, fallback_input, mpc_step,
                          shift_candidate, worst_case_cost_audit)

from test_offline import lft_system, scalar_system

_cache = {}


def scalar_setup():
    if "scalar" not in _cache:
        vs = scalar_system()
        w = CostWeights(Q_x=[[1.0]], Q_u=[[0.1]]).validated(1, 1)
        _cache["scalar"] = (vs, design(vs, w), w)
    return _cache["scalar"]


def lft_setup():
    if "lft" not in _cache:
        vs = lft_system()
        w = CostWeights(Q_x=np.eye(2), Q_u=[[0.5]]).validated(2, 1)
        _cache["lft"] = (vs, design(vs, w), w)
    return _cache["lft"]


def _truth_step(vs, x, u, Delta, w):
    sys = vs.sys
    q = sys.C_q @ x + sys.D_u @ u + sys.D_w @ w
    return sys.A @ x + sys.B @ u + sys.B_p @ (Delta @ q) + sys.B_w @ w


def _sample_w(vs, rng, boundary=False):
    sys = vs.sys
    if sys.n_w == 0:
        return np.zeros(0)
    u = rng.normal(size=sys.n_w)
    u /= np.linalg.norm(u)
    r = 1.0 if boundary else rng.uniform() ** (1.0 / sys.n_w)
    return np.linalg.solve(np.linalg.cholesky(sys.P_w).T, u) * r


# --- program structure -------------------------------------------------


def test_variable_count_formula_large_instance():
    # six states, three inputs, four scalar uncertainty blocks, horizon 8:
    # (n_x+1)(N+1) + (n_u + blocks + 4)N + 3 = 63 + 88 + 3 = 154
    n_x, n_u, nd, nw, N = 6, 3, 4, 3, 8
    rng = np.random.default_rng(0)
    vs = validate_system(LftSystem(
        A=np.eye(n_x) * 0.5, B=rng.normal(size=(n_x, n_u)) * 0.1,
        B_p=rng.normal(size=(n_x, nd)) * 0.01,
        B_w=rng.normal(size=(n_x, nw)) * 0.01,
        C_q=rng.normal(size=(nd, n_x)) * 0.1, D_u=np.zeros((nd, n_u)),
        D_w=np.zeros((nd, nw)), block_sizes=(1, 1, 1, 1),
        P_Delta=np.eye(nd), P_w=np.eye(nw),
        F=np.vstack([np.eye(n_x), -np.eye(n_x), np.zeros((2 * n_u, n_x))]),
        G=np.vstack([np.zeros((2 * n_x, n_u)), np.eye(n_u), -np.eye(n_u)])))
    d = OfflineDesign(
        P=np.eye(n_x), P_inv=np.eye(n_x), L=np.eye(n_x),
        K=np.zeros((n_u, n_x)), Y=np.zeros((n_u, n_x)), tau1O=0.5,
        tau3O=0.1, T2O=np.eye(nd), f_bar=np.full(vs.sys.n_c, 0.1),
        P_C=np.eye(n_x), T4O=np.eye(nd), lambda_c=np.sqrt(0.5),
        provenance={})
    w = CostWeights(Q_x=np.eye(n_x), Q_u=np.eye(n_u)).validated(n_x, n_u)
    prog = build_online_program(d, vs, np.zeros(n_x), N, w)
    st = prog.stats()
    assert st["scalar_vars"] == 154
    # block sizes: inclusion (2 n_x + 2 n_delta + n_w + 1), terminal
    # (2 n_x + 2), stage cost (2 n_x + n_u + 2), terminal cost (2 n_x + 2)
    assert st["psd_dims"] == [24] * N + [14] + [17] * N + [14]
    assert st["soc_dims"] == [n_x]


def test_structure_counts_lft():
    vs, d, w = lft_setup()
    N = 6
    prog = build_online_program(d, vs, np.array([0.1, 0.0]), N, w)
    prog.check_well_posed()
    st = prog.stats()
    assert st["scalar_vars"] == (2 + 1) * (N + 1) + (1 + 1 + 4) * N + 3
    assert st["psd_dims"] == [8] * N + [6] + [7] * N + [6]
    assert st["soc_dims"] == [2]
    assert st["lin_eq"] == 0
    # n_c rows per stage plus one lower bound per alpha, per stage
    # multiplier (tau1, T2, tau3, tau4) and gamma, and the three terminal
    # scalars
    n_lb = (N + 1) + N * 5 + 3
    assert st["lin_ineq"] == vs.sys.n_c * N + n_lb


def test_horizon_too_short():
    vs, d, w = scalar_setup()
    with pytest.raises(HorizonTooShort):
        build_online_program(d, vs, np.zeros(1), 0, w)


def test_unknown_cost_mode_rejected():
    vs, d, w = scalar_setup()
    with pytest.raises(ValueError):
        build_online_program(d, vs, np.zeros(1), 2, w, cost_mode="cheap")


# --- mpc_step ----------------------------------------------------------


def test_origin_gives_zero_input():
    vs, d, w = scalar_setup()
    u, sol = mpc_step(d, vs, np.array([0.0]), 5, w)
    assert abs(u[0]) <= 1e-5
    assert sol.optimal
    assert np.all(np.abs(sol.z) <= 1e-5)


def test_input_formula_and_constraint_satisfaction():
    vs, d, w = lft_setup()
    for x_hat in ([0.5, -0.3], [1.2, 0.4], [-0.8, -0.9]):
        x_hat = np.array(x_hat)
        u, sol = mpc_step(d, vs, x_hat, 6, w)
        assert np.allclose(u, d.K @ (x_hat - sol.z[0]) + sol.v[0])
        rows = vs.sys.F @ x_hat + vs.sys.G @ u
        assert np.max(rows) <= 1.0 + 1e-7


def test_terminal_boundary_state_feasible():
    # states on the terminal-set boundary admit the terminal-controller
    # tube, so the step must solve there (small slack keeps the tightened
    # rows strictly satisfiable for the interior-point method)
    vs, d, w = lft_setup()
    rng = np.random.default_rng(3)
    for _ in range(3):
        x_b = _sample_boundary(d.L, rng) * (1.0 - 1e-6)
        u, sol = mpc_step(d, vs, x_b, 4, w)
        assert sol.optimal


def test_infeasible_state_raises():
    vs, d, w = lft_setup()
    with pytest.raises(InfeasibleAtState) as ei:
        mpc_step(d, vs, np.array([50.0, 0.0]), 4, w)
    assert ei.value.x_hat[0] == 50.0
    assert ei.value.diagnostics is not None


def test_warm_start_accepted_and_recorded():
    vs, d, w = scalar_setup()
    _, sol = mpc_step(d, vs, np.array([0.3]), 4, w)
    cand = shift_candidate(sol, d, vs, w, complete=False)
    _, sol2 = mpc_step(d, vs, np.array([0.25]), 4, w, warm=cand)
    assert sol2.optimal
    assert "warm_start" in sol2.diagnostics


def test_check_solution_catches_corruption():
    vs, d, w = scalar_setup()
    x_hat = np.array([0.4])
    _, sol = mpc_step(d, vs, x_hat, 4, w)
    bad = dataclasses.replace(sol, z=sol.z + 10.0)
    with pytest.raises(NumericalFailure):
        check_solution(bad, d, vs, x_hat)
    bad = dataclasses.replace(sol, alpha=sol.alpha * 0.0)
    with pytest.raises(NumericalFailure):
        check_solution(bad, d, vs, x_hat)


# --- sampled tube certificates ------------------------------------------


def test_tube_containment_sampled():
    # every sampled (state in section, uncertainty, disturbance) must land
    # in the next section: 6 stages x 180 draws > 1e3 samples
    vs, d, w = lft_setup()
    x_hat = np.array([1.2, 0.4])
    u0, sol = mpc_step(d, vs, x_hat, 6, w)
    rng = np.random.default_rng(7)
    worst = -np.inf
    for l in range(sol.horizon):
        for _ in range(180):
            r = rng.uniform() ** 0.5
            x = sol.z[l] + sol.alpha[l] * _sample_boundary(d.L, rng) * r
            u = d.K @ (x - sol.z[l]) + sol.v[l]
            Delta = _sample_delta(vs, rng, boundary=rng.uniform() < 0.5)
            wd = _sample_w(vs, rng, boundary=rng.uniform() < 0.5)
            x_next = _truth_step(vs, x, u, Delta, wd)
            gap = np.linalg.norm(d.L @ (x_next - sol.z[l + 1])) \
                - sol.alpha[l + 1]
            worst = max(worst, gap)
    assert worst <= 1e-7


def test_terminal_membership_sampled():
    vs, d, w = lft_setup()
    _, sol = mpc_step(d, vs, np.array([1.2, 0.4]), 6, w)
    rng = np.random.default_rng(11)
    N = sol.horizon
    for _ in range(500):
        x = sol.z[N] + sol.alpha[N] * _sample_boundary(d.L, rng)
        assert x @ d.P @ x <= 1.0 + 1e-7


# --- shifted candidate ---------------------------------------------------


def test_shift_formula_symbolic():
    # horizon 2: (z0, z1, z2; v0, v1) -> (z1, z2, Acl z2; v1, K z2)
    vs, d, w = lft_setup()
    sys = vs.sys
    Acl = sys.A + sys.B @ d.K
    _, sol = mpc_step(d, vs, np.array([0.9, -0.2]), 2, w)
    cand = shift_candidate(sol, d, vs, w, complete=False)
    assert np.array_equal(cand.z[0], sol.z[1])
    assert np.array_equal(cand.z[1], sol.z[2])
    assert np.allclose(cand.z[2], Acl @ sol.z[2])
    assert np.array_equal(cand.v[0], sol.v[1])
    assert np.allclose(cand.v[1], d.K @ sol.z[2])
    assert np.array_equal(cand.alpha, np.r_[sol.alpha[1:], sol.alpha[2]])
    assert np.array_equal(cand.tau1[:1], sol.tau1[1:])
    assert np.array_equal(cand.gamma[:1], sol.gamma[1:])
    assert np.isnan(cand.tau1[1]) and np.isnan(cand.tau1T)


def test_double_shift_consistency():
    vs, d, w = lft_setup()
    _, sol = mpc_step(d, vs, np.array([0.9, -0.2]), 5, w)
    once = shift_candidate(sol, d, vs, w, complete=False)
    twice = shift_candidate(once, d, vs, w, complete=False)
    N = sol.horizon
    assert np.array_equal(twice.z[:N - 1], sol.z[2:])
    assert np.array_equal(twice.alpha[:N - 1], sol.alpha[2:])
    assert np.array_equal(twice.v[:N - 2], sol.v[2:])
    sys = vs.sys
    Acl = sys.A + sys.B @ d.K
    assert np.allclose(twice.z[N], Acl @ once.z[N])


def test_candidate_initial_soc_monte_carlo():
    # the first shifted section must cover the true successor state for
    # every admissible realization
    vs, d, w = lft_setup()
    x_hat = np.array([1.2, 0.4])
    u, sol = mpc_step(d, vs, x_hat, 6, w)
    cand = shift_candidate(sol, d, vs, w, complete=False)
    rng = np.random.default_rng(23)
    worst = -np.inf
    for _ in range(1000):
        Delta = _sample_delta(vs, rng, boundary=rng.uniform() < 0.5)
        wd = _sample_w(vs, rng, boundary=rng.uniform() < 0.5)
        x_next = _truth_step(vs, x_hat, u, Delta, wd)
        gap = np.linalg.norm(d.L @ (x_next - cand.z[0])) - cand.alpha[0]
        worst = max(worst, gap)
    assert worst <= 1e-8


def test_candidate_feasible_in_next_program():
    # recursive-feasibility witness: the completed candidate satisfies the
    # next step's constraints within 1e-6 for sampled realizations
    vs, d, w = lft_setup()
    x_hat = np.array([1.2, 0.4])
    u, sol = mpc_step(d, vs, x_hat, 6, w)
    cand = shift_candidate(sol, d, vs, w)
    res = cand.diagnostics["completion_residuals"]
    assert res["inclusion"] <= 1e-6 and res["terminal"] <= 1e-6
    rng = np.random.default_rng(29)
    for _ in range(5):
        Delta = _sample_delta(vs, rng, boundary=True)
        wd = _sample_w(vs, rng, boundary=rng.uniform() < 0.5)
        x_next = _truth_step(vs, x_hat, u, Delta, wd)
        prog = build_online_program(d, vs, x_next, 6, w)
        psd_v, lin_v = prog.max_violations(candidate_as_vector(cand, prog))
        assert psd_v <= 1e-6
        assert lin_v <= 1e-6


def test_candidate_objective_not_less_than_next_optimum():
    # the next solve can only improve on the candidate it could have used
    vs, d, w = scalar_setup()
    x_hat = np.array([0.6])
    u, sol = mpc_step(d, vs, x_hat, 5, w)
    cand = shift_candidate(sol, d, vs, w)
    x_next = _truth_step(vs, x_hat, u, np.zeros((0, 0)),
                         np.array([0.7]))
    _, sol2 = mpc_step(d, vs, x_next, 5, w)
    assert sol2.objective <= cand.objective + 1e-6


def test_shift_requires_solved_or_shifted_plan():
    vs, d, w = scalar_setup()
    _, sol = mpc_step(d, vs, np.array([0.3]), 4, w)
    bad = dataclasses.replace(sol, status="Infeasible")
    with pytest.raises(ValueError):
        shift_candidate(bad, d, vs, w)


def test_fallback_input_formula():
    vs, d, w = scalar_setup()
    _, sol = mpc_step(d, vs, np.array([0.3]), 4, w)
    cand = shift_candidate(sol, d, vs, w, complete=False)
    x = np.array([0.21])
    assert np.allclose(fallback_input(d, x, cand),
                       d.K @ (x - cand.z[0]) + cand.v[0])


# --- cost bounds ----------------------------------------------------------


def test_cost_audit_degenerate_tube():
    # a point tube at the origin with zero input has zero worst cost
    vs, d, w = scalar_setup()
    N = 3
    sol = TubeSolution(
        z=np.zeros((N + 1, 1)), alpha=np.full(N + 1, EPS),
        v=np.zeros((N, 1)), tau1=np.full(N, EPS),
        T2=np.zeros((N, 0)), tau3=np.full(N, EPS),
        tau4=np.full(N, EPS), gamma=np.zeros(N), tau1T=EPS, tau2T=EPS,
        gammaT=0.0, objective=0.0, status="Optimal")
    rep = worst_case_cost_audit(sol, d, vs, w, n_samples=200, seed=5)
    assert rep.all_ok
    assert np.max(rep.stage_max) <= 1e-14


def test_cost_bound_matches_interval_endpoint_oracle():
    # in one dimension the worst stage cost over [z - a, z + a] under
    # u = K(x - z) + v is attained at an endpoint
    vs, d, w = scalar_setup()
    _, sol = mpc_step(d, vs, np.array([0.8]), 5, w)
    K = d.K[0, 0]
    qx, qu = w.Q_x[0, 0], w.Q_u[0, 0]
    for l in range(sol.horizon):
        z, a, v = sol.z[l, 0], sol.alpha[l], sol.v[l, 0]
        ends = [qx * (z + s) ** 2 + qu * (v + K * s) ** 2
                for s in (-a, a)]
        assert sol.gamma[l] >= max(ends) - 1e-7
        assert sol.gamma[l] <= max(ends) + 1e-5
    zN, aN = sol.z[-1, 0], sol.alpha[-1]
    pc = d.P_C[0, 0]
    assert abs(sol.gammaT - pc * (abs(zN) + aN) ** 2) <= 1e-5


def test_cost_audit_solved_plan():
    vs, d, w = lft_setup()
    _, sol = mpc_step(d, vs, np.array([1.2, 0.4]), 6, w)
    rep = worst_case_cost_audit(sol, d, vs, w, n_samples=400, seed=13)
    assert rep.all_ok
    assert rep.n_samples == 400


def test_cost_audit_rejects_nominal_plans():
    vs, d, w = scalar_setup()
    _, sol = mpc_step(d, vs, np.array([0.3]), 3, w, cost_mode=NOMINAL)
    with pytest.raises(ValueError):
        worst_case_cost_audit(sol, d, vs, w)


# --- nominal cost mode -----------------------------------------------------


def test_nominal_mode_structure_and_objective():
    vs, d, w = lft_setup()
    N = 5
    prog = build_online_program(d, vs, np.array([1.2, 0.4]), N, w,
                                cost_mode=NOMINAL)
    st = prog.stats()
    # no cost matrix inequalities, one epigraph cone per stage plus the
    # terminal one and the initial-state cone
    assert st["psd_dims"] == [8] * N + [6]
    assert len(st["soc_dims"]) == N + 2
    u, sol = mpc_step(d, vs, np.array([1.2, 0.4]), N, w,
                      cost_mode=NOMINAL)
    assert sol.cost_mode == NOMINAL
    recomputed = sum(
        sol.z[l] @ w.Q_x @ sol.z[l] + sol.v[l] @ w.Q_u @ sol.v[l]
        for l in range(N)) + sol.z[N] @ d.P_C @ sol.z[N]
    assert abs(sol.objective - recomputed) <= 1e-6 * (1 + abs(recomputed))
    # tube certificates still hold in nominal mode
    check_solution(sol, d, vs, np.array([1.2, 0.4]))


def test_nominal_candidate_shifts_closed_form_costs():
    vs, d, w = lft_setup()
    _, sol = mpc_step(d, vs, np.array([1.2, 0.4]), 5, w,
                      cost_mode=NOMINAL)
    cand = shift_candidate(sol, d, vs, w)
    N = sol.horizon
    want = cand.z[N - 1] @ w.Q_x @ cand.z[N - 1] \
        + cand.v[N - 1] @ w.Q_u @ cand.v[N - 1]
    assert abs(cand.gamma[N - 1] - want) <= 1e-12
    assert abs(cand.gammaT - cand.z[N] @ d.P_C @ cand.z[N]) <= 1e-12
    prog = build_online_program(d, vs, sol.z[1], 5, w, cost_mode=NOMINAL)
    psd_v, lin_v = prog.max_violations(candidate_as_vector(cand, prog))
    assert psd_v <= 1e-6 and lin_v <= 1e-6


# --- export ----------------------------------------------------------------


def test_online_program_exports_sdpa(tmp_path):
    vs, d, w = scalar_setup()
    prog = build_online_program(d, vs, np.array([0.4]), 1, w)
    out = tmp_path / "step.dat-s"
    export_sdpa(prog, out)
    lines = [ln for ln in out.read_text().splitlines()
             if not ln.startswith("*")]
    assert int(lines[0].split()[0]) == prog.n_vars
