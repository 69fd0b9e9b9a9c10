import numpy as np
import sys
sys.path.insert(0, "src")
sys.path.insert(0, "tests")

from etmpc.model import CostWeights, validate_system
from etmpc.offline import design as run_design
from etmpc import online
from etmpc.conic import SolverOptions

from test_offline import scalar_system, lft_system

np.set_printoptions(precision=6, suppress=True)

# --- scalar system -----------------------------------------------------
vs = scalar_system()
w = CostWeights(Q_x=np.array([[1.0]]), Q_u=np.array([[0.1]]))
d = run_design(vs, w)
print("scalar design: P =", d.P, "K =", d.K, "f_bar =", d.f_bar,
      "lambda_c =", d.lambda_c)

prog = online.build_online_program(d, vs, np.array([0.0]), 5, w)
print("scalar stats:", prog.stats())

u, sol = online.mpc_step(d, vs, np.array([0.0]), 5, w)
print("x=0:  u =", u, " obj =", sol.objective, " alpha =", sol.alpha)

u, sol = online.mpc_step(d, vs, np.array([0.8]), 5, w)
print("x=0.8: u =", u, " obj =", sol.objective)
print("  z =", sol.z.ravel())
print("  alpha =", sol.alpha)
print("  v =", sol.v.ravel())
print("  gamma =", sol.gamma, "gammaT =", sol.gammaT)

# audit
rep = online.worst_case_cost_audit(sol, d, vs, w, n_samples=500, seed=1)
print("  audit ok:", rep.all_ok, "stage_max:", rep.stage_max,
      "bounds:", rep.stage_bound)

# shift + feasibility in next program
cand = online.shift_candidate(sol, d, vs, w)
print("  candidate tau1:", cand.tau1, "tau1T:", cand.tau1T)
prog2 = online.build_online_program(d, vs, sol.z[1] + 0.0, 5, w)
xvec = online.candidate_as_vector(cand, prog2)
pv, lv = prog2.max_violations(xvec)
print("  candidate violations at next center: psd", pv, "lin", lv)

# --- LFT system --------------------------------------------------------
vs2 = lft_system()
w2 = CostWeights(Q_x=np.eye(2), Q_u=np.array([[0.5]]))
d2 = run_design(vs2, w2)
print("\nlft design: lambda_c =", d2.lambda_c, "f_bar =", d2.f_bar)

prog = online.build_online_program(d2, vs2, np.array([0.5, -0.3]), 6, w2)
st = prog.stats()
print("lft stats:", st)
n_x, n_u, nd, N = 2, 1, 1, 6
expect = (n_x + 1) * (N + 1) + (n_u + nd + 4) * N + 3
print("expected scalar_vars:", expect, "got:", st["scalar_vars"])

u, sol = online.mpc_step(d2, vs2, np.array([0.5, -0.3]), 6, w2)
print("u =", u, "obj =", sol.objective)
print("alpha =", sol.alpha)

rep = online.worst_case_cost_audit(sol, d2, vs2, w2, n_samples=500, seed=2)
print("audit ok:", rep.all_ok)

cand = online.shift_candidate(sol, d2, vs2, w2)
x_next = sol.z[1]  # nominal next state with zero disturbance
prog2 = online.build_online_program(d2, vs2, x_next, 6, w2)
xvec = online.candidate_as_vector(cand, prog2)
pv, lv = prog2.max_violations(xvec)
print("candidate violations: psd", pv, "lin", lv)

# nominal mode
u, soln = online.mpc_step(d2, vs2, np.array([0.5, -0.3]), 6, w2,
                          cost_mode=online.NOMINAL)
print("nominal u =", u, "obj =", soln.objective)
candn = online.shift_candidate(soln, d2, vs2, w2)
print("nominal candidate gamma:", candn.gamma, "gammaT:", candn.gammaT)

# infeasible state (outside constraint box scaled by anything reachable)
try:
    online.mpc_step(d2, vs2, np.array([50.0, 0.0]), 6, w2)
    print("NO EXCEPTION -- BAD")
except Exception as e:
    print("far state ->", type(e).__name__)
