"""Offline design tests against hand-derived and closed-form oracles."""

import dataclasses
import json

import numpy as np
import pytest
import scipy.linalg

from etmpc import offline
from etmpc.conic import SolverOptions, solve
from etmpc.errors import (NoFeasibleDesign, NumericalFailure, ParseError,
                          SchemaError)
from etmpc.model import CostWeights, LftSystem, validate_system
from etmpc.offline import (build_invariance_program, check_design,
                           compute_tightening, design, design_terminal_cost,
                           load_design, reverify_gain, save_design,
                           verify_design)


def scalar_system():
    """x+ = 0.5 x + u + 0.1 w with |x| <= 1, |u| <= 1, no LFT channel."""
    return validate_system(LftSystem(
        A=[[0.5]], B=[[1.0]], B_p=np.zeros((1, 0)), B_w=[[0.1]],
        C_q=np.zeros((0, 1)), D_u=np.zeros((0, 1)), D_w=np.zeros((0, 1)),
        block_sizes=(), P_Delta=np.zeros((0, 0)), P_w=[[1.0]],
        F=[[1.0], [-1.0], [0.0], [0.0]], G=[[0.0], [0.0], [1.0], [-1.0]]))


def lft_system():
    """Two states, one scalar uncertainty block, one disturbance."""
    F = np.vstack([np.eye(2) / 2.0, -np.eye(2) / 2.0, np.zeros((2, 2))])
    G = np.vstack([np.zeros((4, 1)), [[1 / 3.0]], [[-1 / 3.0]]])
    return validate_system(LftSystem(
        A=[[1.0, 0.1], [-0.2, 0.9]], B=[[0.0], [0.1]],
        B_p=[[0.0], [0.1]], B_w=[[0.01], [0.0]],
        C_q=[[0.5, 0.0]], D_u=[[0.0]], D_w=[[0.0]],
        block_sizes=(1,), P_Delta=[[1.0]], P_w=[[1.0]], F=F, G=G))


def unstable_system():
    """x+ = 2x with an input that has no effect: nothing can be invariant."""
    return validate_system(LftSystem(
        A=[[2.0]], B=[[0.0]], B_p=np.zeros((1, 0)), B_w=np.zeros((1, 0)),
        C_q=np.zeros((0, 1)), D_u=np.zeros((0, 1)), D_w=np.zeros((0, 0)),
        block_sizes=(), P_Delta=np.zeros((0, 0)), P_w=np.zeros((0, 0)),
        F=[[1.0], [-1.0], [0.0], [0.0]], G=[[0.0], [0.0], [1.0], [-1.0]]))


UNIT_WEIGHTS = CostWeights(Q_x=[[1.0]], Q_u=[[1.0]])

_designs = {}


def lft_design():
    if "lft" not in _designs:
        vs = lft_system()
        w = CostWeights(Q_x=np.eye(2), Q_u=[[1.0]]).validated(2, 1)
        _designs["lft"] = (vs, design(vs, w, grid_step=0.1))
    return _designs["lft"]


# --- shape program ----------------------------------------------------------


def test_scalar_program_reaches_full_interval():
    # the largest invariant ellipse inside |x| <= 1 under |u| <= 1 is the
    # interval itself, so the optimal shape inverse is exactly 1
    vs = scalar_system()
    prog = build_invariance_program(vs, 0.3)
    prog.check_well_posed()
    r = solve(prog, SolverOptions())
    assert r.optimal
    assert abs(r.primal["P_inv"][0, 0] - 1.0) < 1e-6


def test_scalar_hand_certificate_admissible():
    # hand S-procedure at P = 1, K = 0, tau1O = 0.3: the disturbance row
    # needs tau3O >= 0.06 (determinant of [[-0.05, 0.05], [0.05, 0.01-t]])
    vs = scalar_system()
    cert = np.array([[-0.05, 0.05], [0.05, -0.05]])
    assert np.linalg.eigvalsh(cert)[-1] <= 1e-15
    res = offline._invariance_residual(
        vs, np.array([[1.0]]), np.array([[0.0]]), [], 0.06, 0.3)
    assert res <= 1e-12
    # and nothing smaller works
    res_bad = offline._invariance_residual(
        vs, np.array([[1.0]]), np.array([[0.0]]), [], 0.05, 0.3)
    assert res_bad > 0.0
    assert 0.3 + 0.06 <= 1.0


def test_scalar_design_pipeline():
    vs = scalar_system()
    d = design(vs, UNIT_WEIGHTS.validated(1, 1), grid_step=0.1)
    assert abs(d.P[0, 0] - 1.0) < 1e-6
    # every grid point reaches the same full-interval shape, so the
    # tie-break picks the fastest contraction
    assert d.tau1O == pytest.approx(0.1)
    assert d.lambda_c == pytest.approx(np.sqrt(d.tau1O))
    assert abs(d.K[0, 0]) <= 1.0 + 1e-8
    check_design(vs, d)
    rep = verify_design(vs, d, n_samples=300, seed=11)
    assert rep.all_ok, rep


def test_infeasible_system_raises():
    with pytest.raises(NoFeasibleDesign) as ei:
        design(unstable_system(), UNIT_WEIGHTS.validated(1, 1))
    statuses = ei.value.statuses
    assert len(statuses) == 9
    assert all(s != "Optimal" for _, s in statuses)


def test_lft_design_verifies():
    vs, d = lft_design()
    check_design(vs, d)
    assert 0.0 < d.lambda_c < 1.0
    assert d.T2O[0, 0] > 0.0
    rep = verify_design(vs, d, n_samples=400, seed=5)
    assert rep.all_ok, rep
    assert rep.max_next_norm <= 1.0 + 1e-6
    assert rep.max_contraction <= d.lambda_c + 1e-6


def test_nominal_design_matches_lyapunov_oracle():
    # without perturbation or disturbance channels the contraction claim
    # reduces to the closed-loop P-norm, and the minimum-trace terminal
    # cost solves the discrete Lyapunov equation
    vs = validate_system(LftSystem(
        A=[[0.9, 0.2], [0.0, 0.7]], B=[[0.0], [1.0]],
        B_p=np.zeros((2, 0)), B_w=np.zeros((2, 0)),
        C_q=np.zeros((0, 2)), D_u=np.zeros((0, 1)), D_w=np.zeros((0, 0)),
        block_sizes=(), P_Delta=np.zeros((0, 0)), P_w=np.zeros((0, 0)),
        F=np.vstack([np.eye(2), -np.eye(2), np.zeros((2, 2))]),
        G=np.vstack([np.zeros((4, 1)), [[1.0]], [[-1.0]]])))
    w = CostWeights(Q_x=np.eye(2), Q_u=[[1.0]]).validated(2, 1)
    d = design(vs, w, grid_step=0.1)
    Acl = vs.A + vs.B @ d.K
    # P-norm contraction of the nominal loop
    M = np.linalg.cholesky(d.P).T
    rho = np.linalg.norm(M @ Acl @ np.linalg.inv(M), 2)
    assert rho <= d.lambda_c + 1e-6
    Qbar = w.Q_x + d.K.T @ w.Q_u @ d.K
    P_lyap = scipy.linalg.solve_discrete_lyapunov(Acl.T, Qbar)
    assert np.allclose(d.P_C, P_lyap, rtol=1e-5, atol=1e-7)


# --- tightening -------------------------------------------------------------


def test_tightening_closed_forms():
    f = compute_tightening(np.eye(2), np.zeros((0, 2)),
                           np.array([[1.0, 0.0], [0.0, 2.0]]),
                           np.zeros((2, 0)))
    assert np.allclose(f, [1.0, 2.0])
    f = compute_tightening(np.diag([0.25, 1.0]), np.zeros((0, 2)),
                           np.array([[1.0, 0.0]]), np.zeros((1, 0)))
    assert f[0] == pytest.approx(0.5)
    f = compute_tightening(np.diag([0.25, 1.0]), np.zeros((0, 2)),
                           np.zeros((1, 2)), np.zeros((1, 0)))
    assert f[0] == 0.0


def test_tightening_is_support_function():
    # f_bar[i] must upper-bound row_i @ x over the unit tube section, with
    # equality attained: cross-check on many sampled boundary points
    rng = np.random.default_rng(0)
    P_inv = np.diag([0.25, 1.0])
    L = np.linalg.cholesky(np.linalg.inv(P_inv)).T
    row = np.array([[1.0, 0.0]])
    f = compute_tightening(P_inv, np.zeros((0, 2)), row, np.zeros((1, 0)))
    U = rng.normal(size=(100000, 2))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    X = np.linalg.solve(L, U.T).T
    vals = X @ row.ravel()
    assert vals.max() <= f[0] + 1e-9
    assert vals.max() >= f[0] - 1e-3


# --- terminal cost ----------------------------------------------------------


def test_terminal_cost_scalar_oracle():
    # x+ = 0.5x, K = 0, unit weights: 0.25 Pc - Pc + 1 <= 0 tight at 4/3,
    # which also equals the geometric series sum 1/(1 - 0.25)
    vs = scalar_system()
    P_C, T4O = design_terminal_cost(vs, np.zeros((1, 1)), [[1.0]], [[1.0]])
    assert P_C[0, 0] == pytest.approx(4.0 / 3.0, abs=1e-6)
    assert T4O.shape == (0, 0)


def test_terminal_cost_zero_weights():
    # zero stage cost: the dissipation constraint reduces to closed-loop
    # contraction and the floor takes over
    vs = scalar_system()
    P_C, _ = design_terminal_cost(vs, np.zeros((1, 1)),
                                  np.zeros((1, 1)), np.zeros((1, 1)))
    assert P_C[0, 0] <= 1e-6


def test_terminal_cost_bounds_sampled_rollouts():
    # accumulate the stage cost under u = Kx, w = 0, freshly sampled
    # admissible perturbations each step; the terminal cost must dominate
    vs, d = lft_design()
    Q_x, Q_u = np.eye(2), np.array([[1.0]])
    rng = np.random.default_rng(42)
    worst = -np.inf
    for _ in range(100):
        x = offline._sample_boundary(d.L, rng) * rng.uniform(0.2, 1.0)
        bound = x @ d.P_C @ x
        total = 0.0
        for _ in range(120):
            u = d.K @ x
            total += x @ Q_x @ x + u @ Q_u @ u
            D = offline._sample_delta(vs, rng)
            q = (vs.C_q + vs.D_u @ d.K) @ x
            x = (vs.A + vs.B @ d.K) @ x + vs.B_p @ (D @ q)
        worst = max(worst, total - bound)
    assert worst <= 1e-8, f"cost bound violated by {worst}"


# --- sampled verification ---------------------------------------------------


def test_verify_catches_corrupted_design():
    vs, d = lft_design()
    bad = dataclasses.replace(d, K=10.0 * d.K)
    rep = verify_design(vs, bad, n_samples=300, seed=7)
    assert not rep.membership_ok


def test_reverify_rejects_corrupted_gain():
    vs, d = lft_design()
    with pytest.raises(NumericalFailure):
        reverify_gain(vs, d.P, 10.0 * d.K, d.tau1O)


def test_tube_map_containment_from_interior():
    # any sub-ellipsoid of the terminal set maps into the terminal set in
    # one step under the tube feedback
    vs, d = lft_design()
    rng = np.random.default_rng(3)
    Acl = vs.A + vs.B @ d.K
    Ccl = vs.C_q + vs.D_u @ d.K
    for _ in range(300):
        z = offline._sample_boundary(d.L, rng) * rng.uniform(0.0, 1.0)
        alpha = (1.0 - d.norm_P(z)) * rng.uniform(0.0, 1.0)
        x = z + alpha * offline._sample_boundary(d.L, rng)
        D = offline._sample_delta(vs, rng)
        u = rng.normal(size=1)
        w = np.linalg.solve(vs.L_w.T, u / np.linalg.norm(u))
        q = Ccl @ x + vs.D_w @ w
        xp = Acl @ x + vs.B_p @ (D @ q) + vs.B_w @ w
        assert d.norm_P(xp) <= 1.0 + 1e-6


def test_volume_trend_over_grid():
    # larger contraction multipliers relax the invariance constraint, so
    # the achieved volume should not shrink; deviations beyond solver
    # noise are reported but are not failures (empirical trend, not a
    # theorem)
    vs, d = lft_design()
    obj = d.provenance["objectives"]
    taus = sorted(float(t) for t, v in obj.items() if v is not None)
    vols = [-obj[f"{t:g}"] for t in taus]
    assert len(taus) >= 2
    deviations = [(taus[i], vols[i] - vols[i + 1])
                  for i in range(len(vols) - 1)
                  if vols[i] > vols[i + 1] + 1e-4]
    if deviations:
        print(f"volume trend deviations: {deviations}")
    # the selected design must be the largest-volume feasible point
    assert max(vols) - (-obj[f"{d.tau1O:g}"]) <= 1e-6


def test_det_weight_hook_grows_requested_direction():
    vs = lft_system()
    r0 = solve(build_invariance_program(vs, 0.5), SolverOptions())
    r1 = solve(build_invariance_program(vs, 0.5, det_weight=[[1.0, 0.0]]),
               SolverOptions())
    assert r0.optimal and r1.optimal
    assert r1.primal["P_inv"][0, 0] >= r0.primal["P_inv"][0, 0] - 1e-9


# --- persistence ------------------------------------------------------------


def test_design_roundtrip(tmp_path):
    vs, d = lft_design()
    path = tmp_path / "design.json"
    save_design(d, path)
    d2 = load_design(path)
    for name in ("P", "P_inv", "L", "K", "Y", "T2O", "P_C", "T4O", "f_bar"):
        assert np.array_equal(getattr(d, name), getattr(d2, name)), name
    assert d2.tau1O == d.tau1O and d2.tau3O == d.tau3O
    assert d2.lambda_c == d.lambda_c
    assert d2.provenance["grid"] == d.provenance["grid"]
    check_design(vs, d2)


def test_design_file_errors(tmp_path):
    vs, d = lft_design()
    path = tmp_path / "design.json"
    save_design(d, path)
    doc = json.loads(path.read_text())
    del doc["P_C"]
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError) as ei:
        load_design(path)
    assert ei.value.field == "P_C"
    path.write_text("{not json")
    with pytest.raises(ParseError):
        load_design(path)
    doc["format"] = "nope/9"
    doc["P_C"] = [[1.0]]
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        load_design(path)
