"""Lowering of a ConicProgram to solver-ready arrays.

Each PSD block classifies its variables into two groups:

* "dense": the coefficient matrix is kept as a full (n, n) array;
* "low-rank": all nonzeros of the coefficient matrix sit in at most a few
  rows/columns, so it can be written as sum_t (e_a g_t^T + g_t e_a^T) over
  anchor rows a.  Tube programs are dominated by such variables (centers,
  inputs, per-block multipliers), and the interior-point Schur assembly
  exploits the factored form.

The classification is purely structural and deterministic; both forms
represent the same matrices exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import IllPosedProgram, UnsupportedObjective
from .program import ConicProgram, PsdConstraint

MAX_ANCHORS = 4


@dataclass
class BlockData:
    """One PSD block A(x) = F0 + sum_i x_i F_i <= 0 in structured form."""

    n: int
    F0: np.ndarray                      # (n, n)
    dense_pos: np.ndarray               # (kd,) global var indices
    F_dense: np.ndarray                 # (kd, n, n)
    anchors: np.ndarray                 # (ka,) anchor row indices
    term_var: np.ndarray                # (T,) global var index per term
    term_slot: np.ndarray               # (T,) anchor slot per term
    G_lr: np.ndarray                    # (n, T) g-vectors as columns
    lr_vars: np.ndarray = field(default=None)     # (nv_lr,) unique, term order
    lr_starts: np.ndarray = field(default=None)   # (nv_lr,) reduceat offsets
    slot_order: np.ndarray = field(default=None)  # (T,) terms grouped by slot
    slot_starts: np.ndarray = field(default=None) # (ka,) reduceat offsets
    touched: np.ndarray = field(default=None)     # (nv,) dense then lr

    def finalize(self):
        T = self.term_var.size
        if T:
            # terms arrive sorted by variable; group boundaries for reduceat
            change = np.flatnonzero(np.diff(self.term_var)) + 1
            self.lr_starts = np.concatenate(([0], change)).astype(np.intp)
            self.lr_vars = self.term_var[self.lr_starts]
            order = np.argsort(self.term_slot, kind="stable")
            self.slot_order = order.astype(np.intp)
            ts = self.term_slot[order]
            change = np.flatnonzero(np.diff(ts)) + 1
            self.slot_starts = np.concatenate(([0], change)).astype(np.intp)
        else:
            self.lr_starts = np.zeros(0, dtype=np.intp)
            self.lr_vars = np.zeros(0, dtype=np.intp)
            self.slot_order = np.zeros(0, dtype=np.intp)
            self.slot_starts = np.zeros(0, dtype=np.intp)
        self.touched = np.concatenate([self.dense_pos, self.lr_vars]).astype(np.intp)

    # ---- linear-map applications ----

    def apply(self, x: np.ndarray, include_const: bool = False) -> np.ndarray:
        """A(x) without F0 (the pure linear part), or with it."""
        M = self.F0.copy() if include_const else np.zeros((self.n, self.n))
        if self.dense_pos.size:
            M += np.tensordot(x[self.dense_pos], self.F_dense, axes=(0, 0))
        if self.term_var.size:
            WA = self.G_lr * x[self.term_var]           # (n, T)
            WS = np.add.reduceat(WA[:, self.slot_order], self.slot_starts, axis=1)
            M[:, self.anchors] += WS
            M[self.anchors, :] += WS.T
        return M

    def adjoint(self, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(values, positions): y_i = <F_i, Z> for touched variables."""
        vals = np.zeros(self.touched.size)
        kd = self.dense_pos.size
        if kd:
            vals[:kd] = self.F_dense.reshape(kd, -1) @ Z.reshape(-1)
        if self.term_var.size:
            rows = Z[self.anchors, :]                    # (ka, n)
            per_term = 2.0 * np.einsum("nt,tn->t", self.G_lr,
                                       rows[self.term_slot, :])
            vals[kd:] = np.add.reduceat(per_term, self.lr_starts)
        return vals, self.touched

    def full_coeff(self, gvar: int) -> np.ndarray:
        """Dense coefficient matrix of one variable (testing/fallback)."""
        F = np.zeros((self.n, self.n))
        hit = np.flatnonzero(self.dense_pos == gvar)
        for k in hit:
            F += self.F_dense[k]
        for t in np.flatnonzero(self.term_var == gvar):
            a = self.anchors[self.term_slot[t]]
            g = self.G_lr[:, t]
            F[a, :] += g
            F[:, a] += g
        return F


@dataclass
class SocData:
    """One SOC ||v|| <= s over a small touched-variable set, dense rows."""

    dim: int                 # len(v) + 1
    touched: np.ndarray      # (mt,)
    G: np.ndarray            # (dim, mt): s = h - G x restricted to touched
    h: np.ndarray            # (dim,)
    C0: np.ndarray = None    # g0 g0^T - G1^T G1, constant part of the Schur term

    def finalize(self):
        g0 = self.G[0]
        G1 = self.G[1:]
        self.C0 = np.outer(g0, g0) - G1.T @ G1


@dataclass
class CompiledProgram:
    m: int
    c: np.ndarray
    G_nn: sp.csr_matrix          # nonnegative-orthant rows
    h_nn: np.ndarray
    socs: list[SocData]
    blocks: list[BlockData]
    A: np.ndarray                # (p, m) equalities
    b: np.ndarray
    var_names: list[str]
    trivially_infeasible: bool = False
    # original program kept for violation reporting and value extraction
    source: ConicProgram = None

    @property
    def cone_degree(self) -> int:
        return (self.G_nn.shape[0] + len(self.socs)
                + sum(b.n for b in self.blocks))

    def clone_shallow(self) -> "CompiledProgram":
        """Copy with independent h/c arrays but shared structure."""
        out = CompiledProgram(
            self.m, self.c.copy(), self.G_nn, self.h_nn.copy(),
            [SocData(s.dim, s.touched, s.G, s.h.copy(), s.C0) for s in self.socs],
            self.blocks, self.A, self.b.copy(), self.var_names,
            self.trivially_infeasible, self.source)
        return out


def _cell_coo(cell, memo: dict):
    """Per-variable nonzeros of an AffMat cell, memoized by identity."""
    key = id(cell)
    hit = memo.get(key)
    if hit is not None:
        return hit
    out = {}
    for var, C in cell.terms.items():
        ri, ci = np.nonzero(C)
        if ri.size:
            out[var] = (ri, ci, C[ri, ci])
    memo[key] = out
    return out


def _detect_structure(n: int, r: np.ndarray, c: np.ndarray, v: np.ndarray,
                      max_anchors: int = MAX_ANCHORS):
    """Greedy anchor cover of canonical-upper entries; None if dense."""
    covered = np.zeros(r.size, dtype=bool)
    anchors: list[int] = []
    while not covered.all():
        if len(anchors) >= max_anchors:
            return None
        rows = np.concatenate([r[~covered], c[~covered]])
        counts = np.bincount(rows, minlength=n)
        a = int(np.argmax(counts))
        anchors.append(a)
        covered |= (r == a) | (c == a)
    terms = []
    assigned = np.zeros(r.size, dtype=bool)
    for slot, a in enumerate(anchors):
        mask = ~assigned & ((r == a) | (c == a))
        if not mask.any():
            continue
        g = np.zeros(n)
        rr, cc, vv = r[mask], c[mask], v[mask]
        diag = rr == cc
        np.add.at(g, cc[~diag & (rr == a)], vv[~diag & (rr == a)])
        np.add.at(g, rr[~diag & (cc == a) & (rr != a)],
                  vv[~diag & (cc == a) & (rr != a)])
        np.add.at(g, rr[diag], vv[diag] / 2.0)
        terms.append((slot, g))
        assigned |= mask
    return anchors, terms


def _compile_psd(con: PsdConstraint, memo: dict, normalize: bool,
                 max_anchors: int = MAX_ANCHORS) -> BlockData:
    n = con.n
    F0 = np.zeros((n, n))
    per_var: dict[int, dict] = {}
    for r0, c0, cell in con.placements:
        V = cell.const
        F0[r0:r0 + V.shape[0], c0:c0 + V.shape[1]] += V
        if r0 != c0:
            F0[c0:c0 + V.shape[1], r0:r0 + V.shape[0]] += V.T
        coo = _cell_coo(cell, memo)
        for var, (ri, ci, vv) in coo.items():
            store = per_var.setdefault(var, {"r": [], "c": [], "v": []})
            store["r"].append(r0 + ri)
            store["c"].append(c0 + ci)
            store["v"].append(vv)
            if r0 != c0:
                store["r"].append(c0 + ci)
                store["c"].append(r0 + ri)
                store["v"].append(vv)
    F0 = (F0 + F0.T) / 2.0

    scale = 1.0
    if normalize:
        big = float(np.max(np.abs(F0))) if F0.size else 0.0
        for store in per_var.values():
            for arr in store["v"]:
                if arr.size:
                    big = max(big, float(np.max(np.abs(arr))))
        if big > 0:
            scale = 1.0 / big
    F0 *= scale

    dense_pos, F_dense_list = [], []
    anchors_union: list[int] = []
    anchor_slot_of: dict[int, int] = {}
    term_var, term_slot, term_g = [], [], []

    for var in sorted(per_var):
        store = per_var[var]
        r = np.concatenate(store["r"])
        c = np.concatenate(store["c"])
        v = np.concatenate(store["v"]) * scale
        # combine duplicates on full coordinates, then keep canonical upper
        keys = r * n + c
        uk, inv = np.unique(keys, return_inverse=True)
        vals = np.bincount(inv, weights=v)
        ru, cu = uk // n, uk % n
        keep = (ru <= cu) & (vals != 0.0)
        ru, cu, vals = ru[keep], cu[keep], vals[keep]
        if ru.size == 0:
            continue
        det = _detect_structure(n, ru, cu, vals, max_anchors)
        if det is None:
            F = np.zeros((n, n))
            F[ru, cu] = vals
            F[cu, ru] = vals
            dense_pos.append(var)
            F_dense_list.append(F)
        else:
            local_anchors, terms = det
            for slot, g in terms:
                a = local_anchors[slot]
                if a not in anchor_slot_of:
                    anchor_slot_of[a] = len(anchors_union)
                    anchors_union.append(a)
                term_var.append(var)
                term_slot.append(anchor_slot_of[a])
                term_g.append(g)

    blk = BlockData(
        n=n,
        F0=F0,
        dense_pos=np.asarray(dense_pos, dtype=np.intp),
        F_dense=(np.stack(F_dense_list) if F_dense_list
                 else np.zeros((0, n, n))),
        anchors=np.asarray(anchors_union, dtype=np.intp),
        term_var=np.asarray(term_var, dtype=np.intp),
        term_slot=np.asarray(term_slot, dtype=np.intp),
        G_lr=(np.stack(term_g, axis=1) if term_g else np.zeros((n, 0))),
    )
    blk.finalize()
    return blk


def compile_program(prog: ConicProgram, normalize: bool = True,
                    structure_exploit: bool = True) -> CompiledProgram:
    """Lower a (logdet-free) program; raises on ill-posedness."""
    if prog.logdet_terms:
        raise UnsupportedObjective(
            "compile requires a logdet-free objective; reformulate first")
    prog.check_well_posed()
    m = prog.n_vars

    c = np.zeros(m)
    for i, a in prog.objective_lin.coeffs.items():
        c[i] += a

    trivially_infeasible = False
    rows_i, cols_i, vals_i, h_list = [], [], [], []
    nn_rows = 0

    def add_row(coeffs: dict[int, float], rhs: float):
        nonlocal nn_rows, trivially_infeasible
        if not coeffs:
            if rhs < -1e-12:
                trivially_infeasible = True
            return
        s = max(abs(v) for v in coeffs.values())
        s = 1.0 / s if s > 0 else 1.0
        for i, a in coeffs.items():
            rows_i.append(nn_rows)
            cols_i.append(i)
            vals_i.append(a * s)
        h_list.append(rhs * s)
        nn_rows += 1

    for i, lb in prog.lower_bounds:
        add_row({i: -1.0}, -lb)
    for lin, rhs in prog.lin_ineq:
        add_row(dict(lin.coeffs), rhs - lin.const)

    G_nn = sp.csr_matrix(
        (np.asarray(vals_i, float), (rows_i, cols_i)), shape=(nn_rows, m))
    h_nn = np.asarray(h_list, float)

    socs = []
    for con in prog.soc:
        touched = np.asarray(sorted(con.variables()), dtype=np.intp)
        pos = {int(g): k for k, g in enumerate(touched)}
        d = con.dim + 1
        G = np.zeros((d, touched.size))
        h = np.zeros(d)
        h[0] = con.scal.const
        for i, a in con.scal.coeffs.items():
            G[0, pos[i]] = -a
        for r, e in enumerate(con.vec, start=1):
            h[r] = e.const
            for i, a in e.coeffs.items():
                G[r, pos[i]] = -a
        s = max(1.0, float(np.max(np.abs(G))) if G.size else 0.0,
                float(np.max(np.abs(h))))
        G /= s
        h /= s
        sd = SocData(dim=d, touched=touched, G=G, h=h)
        sd.finalize()
        socs.append(sd)

    memo: dict = {}
    max_anchors = MAX_ANCHORS if structure_exploit else 0
    blocks = [_compile_psd(con, memo, normalize, max_anchors)
              for con in prog.psd]

    p = len(prog.lin_eq)
    A = np.zeros((p, m))
    b = np.zeros(p)
    for r, (lin, rhs) in enumerate(prog.lin_eq):
        for i, a in lin.coeffs.items():
            A[r, i] = a
        b[r] = rhs - lin.const
        s = max(1.0, float(np.max(np.abs(A[r]))), abs(b[r]))
        A[r] /= s
        b[r] /= s

    return CompiledProgram(
        m=m, c=c, G_nn=G_nn, h_nn=h_nn, socs=socs, blocks=blocks,
        A=A, b=b, var_names=list(prog.var_names),
        trivially_infeasible=trivially_infeasible, source=prog)
