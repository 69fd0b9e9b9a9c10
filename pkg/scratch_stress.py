import time
import numpy as np
from etmpc.conic import (AffMat, ConicProgram, SolverOptions, Status, solve,
                         compile_program)
from etmpc.conic.solver import solve_compiled

rng = np.random.default_rng(0)

# --- random small SDPs vs cvxopt ---
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

nfail = 0
for seed in range(30):
    p = random_sdp(seed)
    r1 = solve(p)
    r2 = solve(p, SolverOptions(backend="cvxopt"))
    if r1.status != r2.status:
        print(f"seed {seed}: status {r1.status} vs {r2.status}")
        nfail += 1
    elif r1.optimal and abs(r1.objective - r2.objective) > 1e-5 * (1 + abs(r1.objective)):
        print(f"seed {seed}: obj {r1.objective} vs {r2.objective}")
        nfail += 1
print("random sdp vs cvxopt: failures =", nfail, "/30")

# --- structured vs dense Schur path ---
def tube_like(seed, n=12, nv=30):
    r = np.random.default_rng(seed)
    p = ConicProgram(f"tube{seed}")
    xs = p.scalars("v", nv)
    F0 = -np.eye(n) * 2.0
    cell = AffMat.constant(F0)
    # low-rank vars: one anchor row each
    for k in range(nv - 2):
        g = np.zeros((n, n))
        row = int(r.integers(0, 3))
        cols = r.integers(0, n, size=3)
        for cc in cols:
            g[row, cc] += float(r.normal())
        g = (g + g.T) / 2.0
        cell = cell + AffMat.scale_of(xs[k].ex, g)
    # dense vars
    for k in range(nv - 2, nv):
        Fk = r.normal(size=(n, n)) * 0.3
        Fk = (Fk + Fk.T) / 2.0
        cell = cell + AffMat.scale_of(xs[k].ex, Fk)
    p.add_psd(cell)
    c = r.normal(size=nv)
    lin = sum((xs[k] * float(c[k]) for k in range(1, nv)), xs[0] * float(c[0]))
    p.minimize(lin)
    for k in range(nv):
        p.add_le(xs[k].ex, 2.0)
        p.add_ge(xs[k].ex, -2.0)
    return p

nfail = 0
for seed in range(10):
    p = tube_like(seed)
    r1 = solve(p, SolverOptions(structure_exploit=True))
    r2 = solve(p, SolverOptions(structure_exploit=False))
    if r1.status != r2.status:
        print(f"tube {seed}: {r1.status} vs {r2.status}"); nfail += 1
    elif r1.optimal and abs(r1.objective - r2.objective) > 1e-6 * (1 + abs(r1.objective)):
        print(f"tube {seed}: {r1.objective} vs {r2.objective}"); nfail += 1
cp = compile_program(tube_like(0))
blk = cp.blocks[0]
print("structured vs dense:", nfail, "failures; anchors:", blk.anchors,
      "dense vars:", blk.dense_pos.size, "lr vars:", blk.lr_vars.size)

# exact coefficient reconstruction check
cpd = compile_program(tube_like(0), structure_exploit=False)
x = rng.normal(size=cp.m)
M1 = cp.blocks[0].apply(x, include_const=True)
M2 = cpd.blocks[0].apply(x, include_const=True)
print("apply equivalence:", np.max(np.abs(M1 - M2)))

# --- determinism ---
p = tube_like(3)
r1 = solve(p, SolverOptions(record_iterates=True))
r2 = solve(p, SolverOptions(record_iterates=True))
same = r1.diagnostics["iterates"] == r2.diagnostics["iterates"] and \
    np.array_equal(r1.x, r2.x)
print("determinism:", same)

# --- timing: tube-sized block, many low-rank vars ---
def big_block(n=132, nlr=110, nd=4, seed=0):
    r = np.random.default_rng(seed)
    p = ConicProgram("big")
    xs = p.scalars("v", nlr + nd)
    cell = AffMat.constant(-np.eye(n) * 3.0)
    for k in range(nlr):
        g = np.zeros((n, n))
        row = int(r.integers(0, 4))
        cols = r.integers(0, n, size=4)
        for cc in cols:
            g[row, cc] += float(r.normal())
        g = (g + g.T) / 2.0
        cell = cell + AffMat.scale_of(xs[k].ex, g)
    for k in range(nlr, nlr + nd):
        Fk = r.normal(size=(n, n)) * 0.05
        Fk = (Fk + Fk.T) / 2.0
        cell = cell + AffMat.scale_of(xs[k].ex, Fk)
    p.add_psd(cell)
    c = r.normal(size=nlr + nd) * 0.1
    lin = sum((xs[k] * float(c[k]) for k in range(1, nlr + nd)), xs[0] * float(c[0]))
    p.minimize(lin)
    for k in range(nlr + nd):
        p.add_le(xs[k].ex, 1.0)
        p.add_ge(xs[k].ex, -1.0)
    return p

p = big_block()
t0 = time.perf_counter()
cpb = compile_program(p)
t1 = time.perf_counter()
r = solve_compiled(cpb)
t2 = time.perf_counter()
print(f"big block: compile {t1-t0:.3f}s solve {t2-t1:.3f}s "
      f"({r.iterations} iters, {(t2-t1)/max(r.iterations,1)*1000:.0f} ms/iter) {r.status}")

# 8 big blocks sharing variables, like one online program
p8 = ConicProgram("eight")
nv = 140
xs = p8.scalars("v", nv)
r8 = np.random.default_rng(7)
for bidx in range(8):
    cell = AffMat.constant(-np.eye(132) * 3.0)
    for k in range(nv - 4):
        g = np.zeros((132, 132))
        row = int(r8.integers(0, 4))
        for cc in r8.integers(0, 132, size=4):
            g[row, cc] += float(r8.normal())
        g = (g + g.T) / 2.0
        cell = cell + AffMat.scale_of(xs[k].ex, g)
    for k in range(nv - 4, nv):
        Fk = r8.normal(size=(132, 132)) * 0.05
        Fk = (Fk + Fk.T) / 2.0
        cell = cell + AffMat.scale_of(xs[k].ex, Fk)
    p8.add_psd(cell)
c = r8.normal(size=nv) * 0.1
lin = sum((xs[k] * float(c[k]) for k in range(1, nv)), xs[0] * float(c[0]))
p8.minimize(lin)
for k in range(nv):
    p8.add_le(xs[k].ex, 1.0)
    p8.add_ge(xs[k].ex, -1.0)
t0 = time.perf_counter()
cp8 = compile_program(p8)
t1 = time.perf_counter()
rr = solve_compiled(cp8)
t2 = time.perf_counter()
print(f"8-block: compile {t1-t0:.3f}s solve {t2-t1:.3f}s "
      f"({rr.iterations} iters, {(t2-t1)/max(rr.iterations,1)*1000:.0f} ms/iter) {rr.status}")
