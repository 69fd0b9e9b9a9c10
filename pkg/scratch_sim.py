import numpy as np
import sys
sys.path.insert(0, "src")
sys.path.insert(0, "tests")

from etmpc.model import CostWeights
from etmpc import sim
from test_online import lft_setup, scalar_setup

np.set_printoptions(precision=5, suppress=True)

vs, d, w = lft_setup()

t0 = __import__("time").perf_counter()
traj = sim.run_closed_loop(vs, d, np.array([1.2, 0.4]), 12, 5, rng=42,
                           weights=w)
t1 = __import__("time").perf_counter()
print(f"12-step loop in {t1-t0:.1f}s; mean solve {np.mean(traj.solve_times):.2f}s")
print("violations:", traj.violations.sum(), "fallbacks:", traj.fallback_steps)
print("|x| start/end:", np.linalg.norm(traj.states[0]),
      np.linalg.norm(traj.states[-1]))
rep = sim.check_containment(traj)
print("containment ok:", rep.ok, "worst:", rep.worst_margin,
      "at", rep.worst_step, "n:", rep.n_checked)

# falsified disturbance: scale w by 2
r = traj.realization
bad = sim.Realization(Delta_seq=r.Delta_seq, w_seq=r.w_seq * 2.0,
                      seed=r.seed)
try:
    bad.check(vs)
    print("falsified realization passed check -- BAD")
except Exception as e:
    print("falsified realization rejected:", type(e).__name__)

traj_bad = sim.run_closed_loop(vs, d, np.array([1.2, 0.4]), 12, 5,
                               weights=w, realization=bad)
rep_bad = sim.check_containment(traj_bad)
print("falsified containment ok:", rep_bad.ok, "worst:", rep_bad.worst_margin)

# contractivity under terminal feedback, w = 0, constant Delta
T = 15
real0 = sim.Realization(
    Delta_seq=tuple(sim.sample_delta(vs, np.random.default_rng(5), True)
                    for _ in range(T)),
    w_seq=np.zeros((T, 1)))
x0 = np.linalg.solve(d.L, np.array([1.0, 0.0]))  # on terminal boundary
xs = sim.run_terminal_loop(vs, d, x0, T, real0)
norms = np.array([np.linalg.norm(d.L @ x) for x in xs])
bound = np.array([d.lambda_c ** k for k in range(T + 1)])
print("contractivity holds:", np.all(norms <= bound + 1e-9))

# determinism
t_a = sim.run_closed_loop(vs, d, np.array([1.2, 0.4]), 4, 4, rng=7, weights=w)
t_b = sim.run_closed_loop(vs, d, np.array([1.2, 0.4]), 4, 4, rng=7, weights=w)
print("deterministic:", np.array_equal(t_a.states, t_b.states),
      np.array_equal(t_a.inputs, t_b.inputs))

# persistence
import tempfile, pathlib, json, csv as csvmod
td = pathlib.Path(tempfile.mkdtemp())
sim.save_trajectory_csv(traj, td / "t.csv")
sim.save_snapshots(traj, td / "t.json")
rows = list(csvmod.reader(open(td / "t.csv")))
print("csv rows:", len(rows), "cols:", len(rows[0]), rows[0][:4])
doc = json.load(open(td / "t.json"))
print("json format:", doc["format"], "tubes:", len(doc["tubes"]))
