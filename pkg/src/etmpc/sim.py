"""Ground-truth closed-loop simulation against sampled realizations.

The truth model evaluates the exact uncertain dynamics: the perturbation
input is the sampled block-diagonal gain applied to the regulated output,
plus an exogenous disturbance from its bounding ellipsoid.  The loop
solves the per-step tube program at each measurement, applies the
resulting input, and keeps the shifted candidate as the fallback when a
solve fails numerically.  Containment checking replays recorded tube
snapshots against the realized trajectory.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .conic import SolverOptions
from .errors import (EtmpcError, InfeasibleAtState, InitialStateInfeasible,
                     IoError, NumericalFailure)
from .model import CostWeights, ValidatedSystem
from .offline import OfflineDesign
from .online import (WORST_CASE, TubeSolution, fallback_input, mpc_step,
                     shift_candidate)

TRAJECTORY_FORMAT = "etmpc-trajectory/1"

RANDOM = "random"
BOUNDARY = "boundary"
RESAMPLE = "resample"
CONSTANT = "constant"


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _ball_point(L_upper: np.ndarray, rng, boundary: bool) -> np.ndarray:
    """Uniform draw from {y : ||L_upper y|| <= 1}, or from its shell."""
    n = L_upper.shape[0]
    if n == 0:
        return np.zeros(0)
    u = rng.normal(size=n)
    u /= np.linalg.norm(u)
    r = 1.0 if boundary else rng.uniform() ** (1.0 / n)
    return np.linalg.solve(L_upper, u) * r


def sample_delta(vs: ValidatedSystem, rng,
                 boundary: bool = False) -> np.ndarray:
    """Admissible block-diagonal perturbation gain.

    Each block is drawn from its induced-norm ball (the set where the
    block's weighted gram matrix stays below identity) with a uniform
    radial scale; on scalar blocks this is exactly uniform over the
    admissible interval.  With ``boundary`` the draw is pushed to the
    shell of the ball.
    """
    rng = _as_rng(rng)
    sys = vs.sys
    nd = sys.n_delta
    D = np.zeros((nd, nd))
    for j in range(len(vs.projector)):
        sl = vs.projector.slice(j)
        k = sl.stop - sl.start
        B = rng.normal(size=(k, k))
        # largest singular value of P_half @ B decides the induced norm
        P_half = np.linalg.cholesky(sys.P_Delta[sl, sl]).T
        s = np.linalg.norm(P_half @ B, 2)
        scale = 1.0 if boundary else rng.uniform()
        D[sl, sl] = B * (scale / s)
    return D


def sample_disturbance(vs: ValidatedSystem, rng,
                       boundary: bool = False) -> np.ndarray:
    """Disturbance drawn uniformly from its bounding ellipsoid."""
    rng = _as_rng(rng)
    if vs.sys.n_w == 0:
        return np.zeros(0)
    return _ball_point(np.linalg.cholesky(vs.sys.P_w).T, rng, boundary)


@dataclass(frozen=True)
class Realization:
    """A sampled admissible uncertainty/disturbance sequence."""

    Delta_seq: tuple
    w_seq: np.ndarray
    seed: object = None
    delta_mode: str = RESAMPLE
    mode: str = RANDOM

    def __len__(self) -> int:
        return len(self.Delta_seq)

    def check(self, vs: ValidatedSystem):
        """Raise if any step leaves the admissible sets."""
        sys = vs.sys
        for k, D in enumerate(self.Delta_seq):
            M = D.T @ sys.P_Delta @ D - np.eye(sys.n_delta)
            if M.size and np.max(np.linalg.eigvalsh(M)) > 1e-10:
                raise EtmpcError(f"realization step {k}: gain outside its set")
        for k, w in enumerate(np.atleast_2d(self.w_seq)):
            if sys.n_w and w @ sys.P_w @ w > 1.0 + 1e-12:
                raise EtmpcError(
                    f"realization step {k}: disturbance outside its set")


def draw_realization(vs: ValidatedSystem, T: int, seed=None,
                     mode: str = RANDOM,
                     delta_mode: str = RESAMPLE) -> Realization:
    """Sample a T-step realization; fixed seeds reproduce it bitwise."""
    if mode not in (RANDOM, BOUNDARY):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if delta_mode not in (RESAMPLE, CONSTANT):
        raise ValueError(f"unknown delta mode {delta_mode!r}")
    rng = _as_rng(seed)
    boundary = mode == BOUNDARY
    if delta_mode == CONSTANT:
        D0 = sample_delta(vs, rng, boundary)
        deltas = tuple(D0 for _ in range(T))
    else:
        deltas = tuple(sample_delta(vs, rng, boundary) for _ in range(T))
    w = np.array([sample_disturbance(vs, rng, boundary) for _ in range(T)])
    w = w.reshape(T, vs.sys.n_w)
    return Realization(Delta_seq=deltas, w_seq=w, seed=seed,
                       delta_mode=delta_mode, mode=mode)


def step_truth(vs: ValidatedSystem, x: np.ndarray, u: np.ndarray,
               Delta: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Exact one-step update of the uncertain dynamics."""
    sys = vs.sys
    x = np.asarray(x, float).reshape(sys.n_x)
    u = np.asarray(u, float).reshape(sys.n_u)
    w = np.asarray(w, float).reshape(sys.n_w)
    q = sys.C_q @ x + sys.D_u @ u + sys.D_w @ w
    p = np.asarray(Delta, float).reshape(sys.n_delta, sys.n_delta) @ q
    return sys.A @ x + sys.B @ u + sys.B_p @ p + sys.B_w @ w


@dataclass(frozen=True)
class Trajectory:
    """Closed-loop record: states, inputs, costs, tubes, flags."""

    states: np.ndarray
    inputs: np.ndarray
    stage_costs: np.ndarray
    solve_times: np.ndarray
    tubes: tuple
    violations: np.ndarray
    fallback_steps: tuple
    realization: Realization
    design: OfflineDesign
    sampling_time: float = 1.0

    def __post_init__(self):
        T = len(self.inputs)
        if not (len(self.states) == T + 1 == len(self.tubes) + 1
                and len(self.stage_costs) == T == len(self.solve_times)
                and len(self.violations) == T):
            raise ValueError("inconsistent trajectory lengths")

    @property
    def T(self) -> int:
        return len(self.inputs)


def run_closed_loop(vs: ValidatedSystem, design: OfflineDesign,
                    x0: np.ndarray, T_steps: int, N: int, rng=None,
                    mode: str = RANDOM, weights: CostWeights | None = None,
                    cost_mode: str = WORST_CASE,
                    delta_mode: str = RESAMPLE,
                    realization: Realization | None = None,
                    options: SolverOptions | None = None) -> Trajectory:
    """Simulate the controller against a sampled (or given) realization.

    The first solve failing marks ``x0`` infeasible.  Later failures fall
    back to the stored shifted candidate's input and are logged in
    ``fallback_steps``; the candidate also provides that step's tube
    snapshot.
    """
    sys = vs.sys
    if weights is None:
        weights = CostWeights(np.eye(sys.n_x), np.eye(sys.n_u))
    weights = weights.validated(sys.n_x, sys.n_u)
    if realization is None:
        realization = draw_realization(vs, T_steps, rng, mode, delta_mode)
    if len(realization) < T_steps:
        raise ValueError("realization shorter than the requested run")

    x = np.asarray(x0, float).reshape(sys.n_x)
    states = [x]
    inputs, costs, times, tubes, flags = [], [], [], [], []
    fallbacks = []
    candidate: TubeSolution | None = None

    for k in range(T_steps):
        t0 = time.perf_counter()
        try:
            u, sol = mpc_step(design, vs, x, N, weights, warm=candidate,
                              cost_mode=cost_mode, options=options)
        except (InfeasibleAtState, NumericalFailure) as e:
            if k == 0:
                raise InitialStateInfeasible(
                    f"first solve failed: {e}") from e
            u = fallback_input(design, x, candidate)
            sol = candidate
            fallbacks.append(k)
        times.append(time.perf_counter() - t0)
        tubes.append(sol)
        inputs.append(u)
        costs.append(float(x @ weights.Q_x @ x + u @ weights.Q_u @ u))
        flags.append(bool(np.max(sys.F @ x + sys.G @ u) > 1.0 + 1e-7))
        candidate = shift_candidate(sol, design, vs, weights,
                                    complete=False)
        x = step_truth(vs, x, u, realization.Delta_seq[k],
                       realization.w_seq[k])
        states.append(x)

    return Trajectory(
        states=np.array(states), inputs=np.array(inputs),
        stage_costs=np.array(costs), solve_times=np.array(times),
        tubes=tuple(tubes), violations=np.array(flags, bool),
        fallback_steps=tuple(fallbacks), realization=realization,
        design=design,
        sampling_time=float(sys.sampling_time or 1.0))


def run_terminal_loop(vs: ValidatedSystem, design: OfflineDesign,
                      x0: np.ndarray, T_steps: int,
                      realization: Realization) -> np.ndarray:
    """States under the offline feedback alone (no per-step solves)."""
    x = np.asarray(x0, float).reshape(vs.sys.n_x)
    out = [x]
    for k in range(T_steps):
        x = step_truth(vs, x, design.K @ x, realization.Delta_seq[k],
                       realization.w_seq[k])
        out.append(x)
    return np.array(out)


def rollout_plan(vs: ValidatedSystem, design: OfflineDesign,
                 sol: TubeSolution, x0: np.ndarray,
                 realization: Realization) -> np.ndarray:
    """States when one solved plan is applied open loop for N steps."""
    x = np.asarray(x0, float).reshape(vs.sys.n_x)
    out = [x]
    for l in range(sol.horizon):
        u = design.K @ (x - sol.z[l]) + sol.v[l]
        x = step_truth(vs, x, u, realization.Delta_seq[l],
                       realization.w_seq[l])
        out.append(x)
    return np.array(out)


def run_monte_carlo(vs: ValidatedSystem, design: OfflineDesign,
                    x0: np.ndarray, T_steps: int, N: int, seeds,
                    **kwargs) -> list:
    """Independent closed-loop runs, one per seed, solved concurrently."""
    seeds = list(seeds)

    def one(seed):
        return run_closed_loop(vs, design, x0, T_steps, N, rng=seed,
                               **kwargs)

    if len(seeds) <= 1:
        return [one(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=min(4, len(seeds))) as ex:
        return list(ex.map(one, seeds))


@dataclass(frozen=True)
class ContainmentReport:
    """Worst containment margin of realized states in recorded tubes."""

    worst_margin: float
    worst_step: tuple
    n_checked: int

    @property
    def ok(self) -> bool:
        return self.worst_margin <= 1e-7


def check_containment(traj: Trajectory) -> ContainmentReport:
    """Replay each snapshot against the states realized afterwards.

    For the plan recorded at step k, the state measured l steps later must
    lie in that plan's stage-l cross-section; the margin is the P-norm
    distance to the center minus the radius (negative inside).
    """
    L = traj.design.L
    worst = -np.inf
    worst_at = (0, 0)
    n = 0
    for k, sol in enumerate(traj.tubes):
        horizon = min(sol.horizon, traj.T - k)
        for l in range(horizon + 1):
            x = traj.states[k + l]
            margin = float(np.linalg.norm(L @ (x - sol.z[l]))
                           - sol.alpha[l])
            n += 1
            if margin > worst:
                worst, worst_at = margin, (k, l)
    return ContainmentReport(worst_margin=worst, worst_step=worst_at,
                             n_checked=n)


# --- persistence ------------------------------------------------------------


def save_trajectory_csv(traj: Trajectory, path):
    """One row per step: time, states, inputs, cost, solve time, flag."""
    sys_nx = traj.states.shape[1]
    n_u = traj.inputs.shape[1]
    header = (["time"] + [f"x[{i}]" for i in range(sys_nx)]
              + [f"u[{i}]" for i in range(n_u)]
              + ["stage_cost", "solve_time", "violation"])
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(traj.T):
                w.writerow([f"{k * traj.sampling_time:.10g}"]
                           + [f"{v:.12g}" for v in traj.states[k]]
                           + [f"{v:.12g}" for v in traj.inputs[k]]
                           + [f"{traj.stage_costs[k]:.12g}",
                              f"{traj.solve_times[k]:.6g}",
                              int(traj.violations[k])])
    except OSError as e:
        raise IoError(f"cannot write trajectory csv {path}: {e}") from e


def save_snapshots(traj: Trajectory, path):
    """Tube parameters per step as structured text, for plotting."""
    doc = {
        "format": TRAJECTORY_FORMAT,
        "sampling_time": traj.sampling_time,
        "states": traj.states.tolist(),
        "inputs": traj.inputs.tolist(),
        "stage_costs": traj.stage_costs.tolist(),
        "solve_times": traj.solve_times.tolist(),
        "violations": traj.violations.astype(int).tolist(),
        "fallback_steps": list(traj.fallback_steps),
        "tubes": [{"z": s.z.tolist(), "alpha": s.alpha.tolist(),
                   "objective": s.objective, "status": s.status}
                  for s in traj.tubes],
    }
    try:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    except OSError as e:
        raise IoError(f"cannot write snapshots {path}: {e}") from e
