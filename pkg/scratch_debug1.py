import numpy as np
from etmpc.conic import AffMat, ConicProgram, SolverOptions, solve

def random_sdp(seed, n=4, m=3):
    r = np.random.default_rng(seed)
    p = ConicProgram(f"rand{seed}")
    xs = p.scalars("x", m)
    F0 = r.normal(size=(n, n)); F0 = -(F0 @ F0.T) - np.eye(n) * 0.5
    cell = AffMat.constant(F0)
    for k in range(m):
        Fk = r.normal(size=(n, n)); Fk = (Fk + Fk.T) / 2.0
        cell = cell + AffMat.scale_of(xs[k].ex, Fk)
    p.add_psd(cell)
    c = r.normal(size=m)
    lin = sum((xs[k] * float(c[k]) for k in range(1, m)), xs[0] * float(c[0]))
    p.minimize(lin)
    for k in range(m):
        p.add_le(xs[k].ex, 5.0)
        p.add_ge(xs[k].ex, -5.0)
    return p

p = random_sdp(10)
r = solve(p, SolverOptions(record_iterates=True))
print(r.status, r.iterations)
print("reason:", r.diagnostics.get("reason"))
for k, t in enumerate(r.diagnostics["iterates"]):
    print(k, " ".join(f"{v:9.2e}" for v in t))
print({k: v for k, v in r.diagnostics.items() if k != "iterates"})
r2 = solve(p, SolverOptions(backend="cvxopt"))
print("cvxopt:", r2.status, r2.objective)
