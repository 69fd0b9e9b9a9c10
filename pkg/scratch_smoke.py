import numpy as np
from etmpc.conic import (AffMat, ConicProgram, SolverOptions, Status, solve,
                         export_sdpa, import_sdpa)

REP = []

def check(name, got, want, tol=1e-6):
    ok = abs(got - want) <= tol
    REP.append((name, ok, got, want))
    print(f"{'PASS' if ok else 'FAIL'} {name}: got {got!r} want {want!r}")

# 1. min tr(X) s.t. X >= I2
p = ConicProgram("tr")
X = p.sym_matrix("X", 2)
p.add_psd(AffMat.constant(np.eye(2)) - X.ex(), name="Xgeq")
p.minimize(X.entry(0, 0) + X.entry(1, 1))
r = solve(p)
print(r.status, r.iterations, r.diagnostics.get("reason"))
check("tr(X) obj", r.objective, 2.0)
check("tr(X) X00", r.primal["X"][0, 0], 1.0)
check("tr(X) X01", r.primal["X"][0, 1], 0.0)
print("viol:", r.psd_violation, r.lin_violation)

# 2. min x s.t. [x-3] >= 0
p = ConicProgram("x3")
x = p.scalar("x")
p.add_psd(AffMat.scale_of(x.ex * -1.0, np.ones((1, 1))) + np.array([[3.0]])
          , name="ge3")
p.minimize(x)
r = solve(p)
print(r.status, r.iterations)
check("1x1 lmi", r.primal["x"], 3.0)

# 3. feasibility of constant [[-1,1],[1,-1]] <= 0
p = ConicProgram("feas")
t = p.scalar("t", lb=0.0)
C = np.array([[-1.0, 1.0], [1.0, -1.0]])
p.add_psd(AffMat.constant(C) + AffMat.scale_of(t.ex, np.zeros((2, 2))))
p.minimize(t)
r = solve(p)
print("feas:", r.status, r.iterations)
check("const lmi feasible", 1.0 if r.optimal else 0.0, 1.0)

# 4. maximize logdet(Pinv) s.t. Pinv <= 4I
p = ConicProgram("logdet")
Pinv = p.sym_matrix("Pinv", 2)
p.add_psd(Pinv.ex() - np.eye(2) * 4.0)
p.maximize_logdet(Pinv)
r = solve(p)
print("logdet:", r.status, r.iterations)
check("logdet obj", -r.objective, 2.0 * np.log(4.0), tol=1e-5)
check("logdet P00", r.primal["Pinv"][0, 0], 4.0, tol=1e-4)
check("logdet P01", r.primal["Pinv"][0, 1], 0.0, tol=1e-4)

# 5. SOC: min x+y subject to ||(x,y)|| <= 1
p = ConicProgram("soc")
x = p.scalar("x"); y = p.scalar("y")
p.add_soc([x.ex, y.ex], 1.0)
p.minimize(x + y)
r = solve(p)
print("soc:", r.status, r.iterations)
check("soc obj", r.objective, -np.sqrt(2.0))

# 6. LP with equality: min x s.t. x + y = 1, x,y >= 0
p = ConicProgram("lp")
x = p.scalar("x", lb=0.0); y = p.scalar("y", lb=0.0)
p.add_eq(x + y, 1.0)
p.minimize(x)
r = solve(p)
print("lp:", r.status, r.iterations)
check("lp obj", r.objective, 0.0, tol=1e-7)

# 7. infeasible: x <= -1, x >= 0
p = ConicProgram("infeas")
x = p.scalar("x", lb=0.0)
p.add_le(x.ex, -1.0)
p.minimize(x)
r = solve(p)
print("infeas:", r.status, r.iterations)
check("infeasible status", 1.0 if r.status == Status.INFEASIBLE else 0.0, 1.0)

# 8. unbounded: min x, x <= 0
p = ConicProgram("unb")
x = p.scalar("x")
p.add_le(x.ex, 0.0)
p.minimize(x)
r = solve(p)
print("unb:", r.status, r.iterations)
check("unbounded status", 1.0 if r.status == Status.UNBOUNDED else 0.0, 1.0)

# 9. SDPA roundtrip of fixture 1
p = ConicProgram("tr")
X = p.sym_matrix("X", 2)
p.add_psd(AffMat.constant(np.eye(2)) - X.ex(), name="Xgeq")
p.minimize(X.entry(0, 0) + X.entry(1, 1))
export_sdpa(p, "/tmp/tr.dat-s")
q = import_sdpa("/tmp/tr.dat-s")
r2 = solve(q)
check("sdpa roundtrip obj", r2.objective, 2.0)

# 10. mixed SOC+PSD+eq: trust-region dual style
#     min t s.t. [[t, 1],[1, t]] >= 0  -> t >= 1
p = ConicProgram("tre")
t = p.scalar("t")
cell = AffMat.scale_of(t.ex * -1.0, np.eye(2)) + AffMat.constant(np.array([[0.0, -1.0], [-1.0, 0.0]]))
p.add_psd(cell)
p.minimize(t)
r = solve(p)
check("2x2 t>=1", r.objective, 1.0)

print()
bad = [n for n, ok, *_ in REP if not ok]
print("FAILURES:", bad if bad else "none")
