"""Reference dense conic interior-point solver.

Primal-dual path following on the homogeneous self-dual embedding with
Nesterov-Todd scaling and a Mehrotra predictor-corrector step, over the
cone product (nonnegative orthant) x (second-order cones) x (PSD blocks).

Solves   min c'x  s.t.  G x + s = h,  A x = b,  s in K
and reports certificates for primal infeasibility and unboundedness.
Intended for the dense, moderately sized blocks produced by the tube-MPC
programs: the Schur-complement assembly exploits the factored (anchor-row)
form of most coefficient matrices, which is what keeps repeated online
solves affordable on one core.

Deterministic: fixed iteration order, no randomization, dense LAPACK
factorizations only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .compiled import CompiledProgram, compile_program
from .program import ConicProgram


class Status:
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    MAX_ITERATIONS = "MaxIterations"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class SolverOptions:
    """Knobs for the interior-point loop.

    feas_tol bounds the scaled primal/dual residuals at termination; the
    duality gap must fall below gap_tol_abs absolutely or gap_tol_rel
    relative to the objective magnitude.
    """

    feas_tol: float = 1e-8
    gap_tol_rel: float = 1e-7
    gap_tol_abs: float = 1e-9
    max_iter: int = 200
    step_frac: float = 0.99
    normalize: bool = True
    structure_exploit: bool = True
    refine: int = 0
    record_iterates: bool = False
    backend: str = "reference"


@dataclass
class SolveReport:
    """Outcome of one conic solve.

    `objective` is the value of the minimization objective at `x` (callers
    that posed a maximization read it negated).  Violation fields are
    measured on the original, unnormalized constraints; `psd_violation` is
    the most positive eigenvalue over all blocks, `lin_violation` the worst
    scalar/SOC/equality residual.  Both are NaN when no point is returned.
    """

    status: str
    x: np.ndarray | None
    primal: dict
    objective: float
    psd_violation: float
    lin_violation: float
    iterations: int
    wall_time: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == Status.OPTIMAL


# ---------------------------------------------------------------------------
# cone-space vectors


class ConeVec:
    """Value in the cone space: nonneg slice, SOC slices, PSD matrices."""

    __slots__ = ("nn", "soc", "psd")

    def __init__(self, nn, soc, psd):
        self.nn = nn
        self.soc = soc
        self.psd = psd

    @staticmethod
    def zeros(cp: CompiledProgram) -> "ConeVec":
        return ConeVec(np.zeros(cp.G_nn.shape[0]),
                       [np.zeros(s.dim) for s in cp.socs],
                       [np.zeros((b.n, b.n)) for b in cp.blocks])

    @staticmethod
    def identity(cp: CompiledProgram) -> "ConeVec":
        e = ConeVec.zeros(cp)
        e.nn[:] = 1.0
        for u in e.soc:
            u[0] = 1.0
        for M in e.psd:
            np.fill_diagonal(M, 1.0)
        return e

    def copy(self) -> "ConeVec":
        return ConeVec(self.nn.copy(), [u.copy() for u in self.soc],
                       [M.copy() for M in self.psd])

    def dot(self, o: "ConeVec") -> float:
        t = float(self.nn @ o.nn)
        for u, v in zip(self.soc, o.soc):
            t += float(u @ v)
        for M, N_ in zip(self.psd, o.psd):
            t += float(np.vdot(M, N_))
        return t

    def norm(self) -> float:
        return float(np.sqrt(max(self.dot(self), 0.0)))

    def axpy(self, a: float, o: "ConeVec"):
        self.nn += a * o.nn
        for u, v in zip(self.soc, o.soc):
            u += a * v
        for M, N_ in zip(self.psd, o.psd):
            M += a * N_

    def scaled(self, a: float) -> "ConeVec":
        return ConeVec(a * self.nn, [a * u for u in self.soc],
                       [a * M for M in self.psd])

    def resym(self):
        """Project PSD blocks back onto the symmetric subspace.

        Congruence transforms with ill-conditioned scaling factors leak
        skew roundoff into the matrix blocks; every downstream consumer
        (eigenvalue margins, adjoint pairings, Cholesky) assumes exact
        symmetry, so the leak is removed after each iterate update.
        """
        for M in self.psd:
            M += M.T
            M *= 0.5

    def combine(self, a: float, o: "ConeVec") -> "ConeVec":
        out = self.copy()
        out.axpy(a, o)
        return out

    def finite(self) -> bool:
        if not np.all(np.isfinite(self.nn)):
            return False
        return (all(np.all(np.isfinite(u)) for u in self.soc)
                and all(np.all(np.isfinite(M)) for M in self.psd))


def _h_vec(cp: CompiledProgram) -> ConeVec:
    return ConeVec(cp.h_nn.copy(), [s.h.copy() for s in cp.socs],
                   [-b.F0 for b in cp.blocks])


def _G_apply(cp: CompiledProgram, x: np.ndarray) -> ConeVec:
    return ConeVec(cp.G_nn @ x,
                   [s.G @ x[s.touched] for s in cp.socs],
                   [b.apply(x) for b in cp.blocks])


def _G_adjoint(cp: CompiledProgram, u: ConeVec) -> np.ndarray:
    out = cp.G_nn.T @ u.nn
    for s, v in zip(cp.socs, u.soc):
        out[s.touched] += s.G.T @ v
    for b, Z in zip(cp.blocks, u.psd):
        vals, pos = b.adjoint(Z)
        out[pos] += vals
    return out


# ---------------------------------------------------------------------------
# Nesterov-Todd scalings


class _SocScale:
    """NT scaling of one second-order cone: W = eta * Wbar.

    Wbar = [[w0, w1'], [w1, I + w1 w1'/(1+w0)]] with w0^2 - w1'w1 = 1,
    hence Wbar^{-1} = J Wbar J (sign flip of the w1 parts).
    """

    __slots__ = ("eta", "wbar", "lam")

    def __init__(self, s: np.ndarray, z: np.ndarray):
        rs = s[0] ** 2 - s[1:] @ s[1:]
        rz = z[0] ** 2 - z[1:] @ z[1:]
        if rs <= 0.0 or rz <= 0.0 or s[0] <= 0.0 or z[0] <= 0.0:
            raise np.linalg.LinAlgError("SOC iterate left the cone interior")
        rs, rz = float(np.sqrt(rs)), float(np.sqrt(rz))
        sb, zb = s / rs, z / rz
        gam = float(np.sqrt((1.0 + sb @ zb) / 2.0))
        wbar = sb.copy()
        wbar[0] += zb[0]
        wbar[1:] -= zb[1:]
        wbar /= 2.0 * gam
        lam = np.empty_like(s)
        lam[0] = gam
        lam[1:] = ((gam + zb[0]) * sb[1:] + (gam + sb[0]) * zb[1:]) \
            / (sb[0] + zb[0] + 2.0 * gam)
        self.eta = float(np.sqrt(rs / rz))
        self.wbar = wbar
        self.lam = lam * np.sqrt(rs * rz)

    def _wbar_apply(self, u: np.ndarray, flip: bool) -> np.ndarray:
        w0 = self.wbar[0]
        w1 = -self.wbar[1:] if flip else self.wbar[1:]
        out = np.empty_like(u)
        t = w1 @ u[1:]
        out[0] = w0 * u[0] + t
        out[1:] = u[1:] + (u[0] + t / (1.0 + w0)) * w1
        return out

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.eta * self._wbar_apply(u, flip=False)

    def apply_inv(self, u: np.ndarray) -> np.ndarray:
        return self._wbar_apply(u, flip=True) / self.eta

    def w2inv(self, u: np.ndarray) -> np.ndarray:
        jw = self.wbar.copy()
        jw[1:] = -jw[1:]
        out = (2.0 * (jw @ u)) * jw
        out[0] -= u[0]
        out[1:] += u[1:]
        return out / self.eta ** 2


def _factor_spd(M: np.ndarray) -> np.ndarray:
    """Some L with M = L L'.  Near the cone boundary plain Cholesky can
    fail on roundoff; fall back to an eigenfactor with clipped spectrum so
    the iteration can limp to termination instead of aborting."""
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh((M + M.T) / 2.0)
        floor = max(float(w[-1]), 1.0) * 1e-14
        return V * np.sqrt(np.maximum(w, floor))


class _PsdScale:
    """NT scaling of one PSD block: R^{-1} S R^{-T} = R' Z R = diag(lam)."""

    __slots__ = ("R", "Rinv", "lam", "A_t", "H_t", "G_d", "G_all")

    def __init__(self, S: np.ndarray, Z: np.ndarray):
        Ls = _factor_spd(S)
        Lz = _factor_spd(Z)
        U, sig, Vt = np.linalg.svd(Lz.T @ Ls)
        if sig[-1] <= 0.0 or not np.all(np.isfinite(sig)):
            raise np.linalg.LinAlgError("NT scaling: degenerate block")
        sq = np.sqrt(sig)
        self.R = Ls @ (Vt.T / sq)
        self.Rinv = (U.T @ Lz.T) / sq[:, None]
        self.lam = sig
        self.A_t = None     # Rinv restricted to anchor columns
        self.H_t = None     # Rinv @ G_lr
        self.G_d = None     # scaled dense coefficient matrices

    def congr_rinv(self, V: np.ndarray) -> np.ndarray:
        """Rinv V Rinv': s-space (or h) into scaled space."""
        return self.Rinv @ V @ self.Rinv.T

    def congr_rinvT(self, V: np.ndarray) -> np.ndarray:
        """Rinv' V Rinv: scaled dz back to z-space."""
        return self.Rinv.T @ V @ self.Rinv

    def congr_r(self, V: np.ndarray) -> np.ndarray:
        """R V R': scaled ds back to s-space."""
        return self.R @ V @ self.R.T

    def congr_rT(self, V: np.ndarray) -> np.ndarray:
        """R' V R: z-space into scaled space."""
        return self.R.T @ V @ self.R


class _Scaling:
    def __init__(self, s: ConeVec, z: ConeVec):
        with np.errstate(invalid="raise", divide="raise"):
            self.w_nn = np.sqrt(s.nn / z.nn)
            self.lam_nn = np.sqrt(s.nn * z.nn)
        self.socs = [_SocScale(u, v) for u, v in zip(s.soc, z.soc)]
        self.psd = [_PsdScale(S, Z) for S, Z in zip(s.psd, z.psd)]

    def lam_vec(self) -> ConeVec:
        return ConeVec(self.lam_nn.copy(), [q.lam.copy() for q in self.socs],
                       [np.diag(p.lam) for p in self.psd])

    def W(self, v: ConeVec) -> ConeVec:
        return ConeVec(self.w_nn * v.nn,
                       [q.apply(u) for q, u in zip(self.socs, v.soc)],
                       [p.congr_rT(M) for p, M in zip(self.psd, v.psd)])

    def WT(self, v: ConeVec) -> ConeVec:
        return ConeVec(self.w_nn * v.nn,
                       [q.apply(u) for q, u in zip(self.socs, v.soc)],
                       [p.congr_r(M) for p, M in zip(self.psd, v.psd)])

    def Winv(self, v: ConeVec) -> ConeVec:
        return ConeVec(v.nn / self.w_nn,
                       [q.apply_inv(u) for q, u in zip(self.socs, v.soc)],
                       [p.congr_rinvT(M) for p, M in zip(self.psd, v.psd)])

    def WinvT(self, v: ConeVec) -> ConeVec:
        return ConeVec(v.nn / self.w_nn,
                       [q.apply_inv(u) for q, u in zip(self.socs, v.soc)],
                       [p.congr_rinv(M) for p, M in zip(self.psd, v.psd)])


def _jprod(a: ConeVec, b: ConeVec) -> ConeVec:
    nn = a.nn * b.nn
    soc = []
    for u, v in zip(a.soc, b.soc):
        w = u[0] * v[1:] + v[0] * u[1:]
        soc.append(np.concatenate(([float(u @ v)], w)))
    psd = [(U @ V + V @ U) / 2.0 for U, V in zip(a.psd, b.psd)]
    return ConeVec(nn, soc, psd)


def _jsolve_lam(scal: _Scaling, rhs: ConeVec) -> ConeVec:
    """Solve lam o u = rhs where lam is the current scaled point."""
    nn = rhs.nn / scal.lam_nn
    soc = []
    for q, d in zip(scal.socs, rhs.soc):
        lam = q.lam
        det = lam[0] ** 2 - lam[1:] @ lam[1:]
        u0 = (lam[0] * d[0] - lam[1:] @ d[1:]) / det
        u1 = (d[1:] - u0 * lam[1:]) / lam[0]
        soc.append(np.concatenate(([u0], u1)))
    psd = []
    for p, D in zip(scal.psd, rhs.psd):
        denom = 0.5 * (p.lam[:, None] + p.lam[None, :])
        psd.append(D / denom)
    return ConeVec(nn, soc, psd)


def _max_step(scal: _Scaling, d: ConeVec) -> float:
    """sup {alpha : lam + alpha d in K}, all in scaled coordinates."""
    alpha = np.inf
    neg = d.nn < 0.0
    if neg.any():
        alpha = min(alpha, float(np.min(-scal.lam_nn[neg] / d.nn[neg])))
    for q, du in zip(scal.socs, d.soc):
        lam = q.lam
        if du[0] < 0.0:
            # necessary bound; also covers the degenerate case where the
            # quadratic discriminant rounds to a tiny negative
            alpha = min(alpha, -lam[0] / du[0])
        a = du[0] ** 2 - du[1:] @ du[1:]
        b2 = lam[0] * du[0] - lam[1:] @ du[1:]
        c0 = lam[0] ** 2 - lam[1:] @ lam[1:]
        if a > 0.0 and b2 >= 0.0:
            continue
        disc = b2 * b2 - a * c0
        if disc < 0.0:
            continue
        denom = -b2 + float(np.sqrt(disc))
        if denom > 0.0:
            alpha = min(alpha, c0 / denom)
    for p, D in zip(scal.psd, d.psd):
        isq = 1.0 / np.sqrt(p.lam)
        Dt = D * np.outer(isq, isq)
        if Dt.shape[0] == 1:
            wmin = float(Dt[0, 0])
        else:
            wmin = float(sla.eigh(Dt, eigvals_only=True, check_finite=False,
                                  subset_by_index=(0, 0), driver="evr")[0])
        if wmin < 0.0:
            alpha = min(alpha, -1.0 / wmin)
    return alpha


# ---------------------------------------------------------------------------
# Schur-complement KKT system


class _KKT:
    """Factor/solve of the reduced Newton system at one NT scaling.

    dz is eliminated via dz = (W^2)^{-1}(G dx - u3), leaving
    (G'(W^2)^{-1}G) dx + A'dy = u1 + G'(W^2)^{-1}u3 and A dx = u2.
    PSD contributions to the Schur matrix use the cached anchor
    factorizations, so assembly cost is set by the few dense variables
    per block rather than the full variable count.
    """

    def __init__(self, cp: CompiledProgram, scal: _Scaling, refine: int,
                 exact: bool = False):
        self.cp = cp
        self.scal = scal
        self.refine = refine
        m = cp.m
        H = np.zeros((m, m))
        if cp.G_nn.shape[0]:
            dnn = 1.0 / scal.w_nn ** 2
            H += (cp.G_nn.T @ cp.G_nn.multiply(dnn[:, None])).toarray()
        for s, q in zip(cp.socs, scal.socs):
            jw = q.wbar.copy()
            jw[1:] = -jw[1:]
            v = s.G.T @ jw
            Hl = (2.0 * np.outer(v, v) - s.C0) / q.eta ** 2
            H[np.ix_(s.touched, s.touched)] += Hl
        for b, p in zip(cp.blocks, scal.psd):
            self._psd_pieces(b, p, exact)
            Hl = self._psd_schur(b, p)
            if Hl is not None:
                H[np.ix_(b.touched, b.touched)] += Hl
        self.H = H
        self._factor()

    @staticmethod
    def _psd_pieces(b, p: _PsdScale, exact: bool = False):
        p.A_t = p.Rinv[:, b.anchors] if b.anchors.size else np.zeros((b.n, 0))
        p.H_t = p.Rinv @ b.G_lr if b.term_var.size else np.zeros((b.n, 0))
        p.G_d = (np.matmul(np.matmul(p.Rinv, b.F_dense), p.Rinv.T)
                 if b.dense_pos.size else np.zeros((0, b.n, b.n)))
        p.G_all = None
        if not exact or b.touched.size == 0:
            return
        # materialize the transformed coefficient matrix of every variable;
        # the factored Schur formula multiplies large scalars that cancel
        # once the scaling is very ill conditioned, while inner products of
        # these matrices only cancel at the element level
        if b.term_var.size:
            At = p.A_t[:, b.term_slot]
            M = np.einsum("it,jt->tij", At, p.H_t)
            M += M.transpose(0, 2, 1)
            lr_mats = np.add.reduceat(M, b.lr_starts, axis=0)
            p.G_all = (np.concatenate([p.G_d, lr_mats], axis=0)
                       if b.dense_pos.size else lr_mats)
        else:
            p.G_all = p.G_d

    @staticmethod
    def _psd_schur(b, p: _PsdScale):
        if p.G_all is not None:
            Gf = p.G_all.reshape(p.G_all.shape[0], -1)
            return Gf @ Gf.T
        kd = b.dense_pos.size
        T = b.term_var.size
        nv = kd + b.lr_vars.size
        if nv == 0:
            return None
        H = np.zeros((nv, nv))
        if kd:
            Gf = p.G_d.reshape(kd, -1)
            H[:kd, :kd] = Gf @ Gf.T
        if T:
            S = b.term_slot
            AA = p.A_t.T @ p.A_t
            AH = p.A_t.T @ p.H_t
            HH = p.H_t.T @ p.H_t
            AHS = AH[S, :]
            Ht = 2.0 * (AA[np.ix_(S, S)] * HH + AHS * AHS.T)
            tmp = np.add.reduceat(Ht, b.lr_starts, axis=0)
            H[kd:, kd:] = np.add.reduceat(tmp, b.lr_starts, axis=1)
            if kd:
                # mixed term <G_i, a h' + h a'> = 2 a' G_i h
                q = np.matmul(p.A_t.T, p.G_d) @ p.H_t
                vals = 2.0 * q[:, S, np.arange(T)]
                mixed = np.add.reduceat(vals, b.lr_starts, axis=1)
                H[:kd, kd:] = mixed
                H[kd:, :kd] = mixed.T
        return H

    def _factor(self):
        m = self.H.shape[0]
        dscale = max(1.0, float(np.max(np.abs(np.diag(self.H)))) if m else 1.0)
        last = None
        for reg in (0.0, 1e-12, 1e-9, 1e-6):
            try:
                Hr = self.H if reg == 0.0 else self.H + (reg * dscale) * np.eye(m)
                self.chol = sla.cho_factor(Hr, lower=True, check_finite=False)
                self.reg = reg
                break
            except (np.linalg.LinAlgError, sla.LinAlgError) as e:
                last = e
        else:
            raise np.linalg.LinAlgError(f"Schur matrix not factorizable: {last}")
        cp = self.cp
        if cp.A.shape[0]:
            HiAT = sla.cho_solve(self.chol, cp.A.T, check_finite=False)
            self.S_lu = sla.lu_factor(cp.A @ HiAT, check_finite=False)
        else:
            self.S_lu = None

    def _adjoint_w2inv(self, u3: ConeVec):
        """G'(W^2)^{-1} u3, plus the scaled PSD slices of u3 for reuse."""
        cp, scal = self.cp, self.scal
        out = np.zeros(cp.m)
        if cp.G_nn.shape[0]:
            out += cp.G_nn.T @ (u3.nn / scal.w_nn ** 2)
        for s, q, u in zip(cp.socs, scal.socs, u3.soc):
            out[s.touched] += s.G.T @ q.w2inv(u)
        u3s_list = []
        for b, p, U in zip(cp.blocks, scal.psd, u3.psd):
            u3s = p.congr_rinv(U)
            u3s_list.append(u3s)
            if p.G_all is not None:
                out[b.touched] += (p.G_all.reshape(p.G_all.shape[0], -1)
                                   @ u3s.reshape(-1))
                continue
            kd = b.dense_pos.size
            if kd:
                out[b.dense_pos] += p.G_d.reshape(kd, -1) @ u3s.reshape(-1)
            T = b.term_var.size
            if T:
                q2 = p.A_t.T @ u3s @ p.H_t
                vals = 2.0 * q2[b.term_slot, np.arange(T)]
                out[b.lr_vars] += np.add.reduceat(vals, b.lr_starts)
        return out, u3s_list

    def _solve_once(self, u1: np.ndarray, u2: np.ndarray, u3: ConeVec):
        cp, scal = self.cp, self.scal
        adj, u3s_list = self._adjoint_w2inv(u3)
        rhs = u1 + adj
        if self.S_lu is not None:
            t1 = sla.cho_solve(self.chol, rhs, check_finite=False)
            dy = sla.lu_solve(self.S_lu, cp.A @ t1 - u2, check_finite=False)
            dx = sla.cho_solve(self.chol, rhs - cp.A.T @ dy, check_finite=False)
        else:
            dy = np.zeros(0)
            dx = sla.cho_solve(self.chol, rhs, check_finite=False)
        # scaled dual direction dzs = W^{-T}(G dx - u3), blockwise
        nn = (cp.G_nn @ dx - u3.nn) / scal.w_nn if cp.G_nn.shape[0] \
            else np.zeros(0)
        soc = [q.apply_inv(s.G @ dx[s.touched] - u)
               for s, q, u in zip(cp.socs, scal.socs, u3.soc)]
        psd = [p.congr_rinv(b.apply(dx)) - u3s
               for b, p, u3s in zip(cp.blocks, scal.psd, u3s_list)]
        return dx, dy, ConeVec(nn, soc, psd)

    def solve(self, u1: np.ndarray, u2: np.ndarray, u3: ConeVec):
        dx, dy, dzs = self._solve_once(u1, u2, u3)
        for _ in range(self.refine):
            cp, scal = self.cp, self.scal
            dz = scal.Winv(dzs)
            r1 = u1 - _G_adjoint(cp, dz)
            if dy.size:
                r1 = r1 - cp.A.T @ dy
            r2 = u2 - cp.A @ dx if dy.size else u2
            r3 = u3.combine(-1.0, _G_apply(cp, dx))
            r3.axpy(1.0, scal.WT(dzs))
            cx, cy, czs = self._solve_once(r1, r2, r3)
            dx = dx + cx
            dy = dy + cy if dy.size else dy
            dzs.axpy(1.0, czs)
        return dx, dy, dzs


# ---------------------------------------------------------------------------
# main loop


def solve_compiled(cp: CompiledProgram,
                   opts: SolverOptions | None = None) -> SolveReport:
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    m = cp.m
    iters_log: list = []
    _embed_state: dict = {}

    def report(status, x=None, it=0, diag=None):
        wall = time.perf_counter() - t0
        primal, obj, pv, lv = {}, float("nan"), float("nan"), float("nan")
        if x is not None and cp.source is not None:
            primal = cp.source.extract(x)
            obj = cp.source.objective_value(x)
            pv, lv = cp.source.max_violations(x)
        d = dict(diag) if diag else {}
        if opts.record_iterates:
            d["iterates"] = iters_log
            d["embedding"] = _embed_state
        return SolveReport(status, x, primal, obj, pv, lv, it, wall, d)

    if cp.trivially_infeasible:
        return report(Status.INFEASIBLE,
                      diag={"reason": "constant constraint row is infeasible"})

    ncone = cp.G_nn.shape[0] + sum(s.dim for s in cp.socs) \
        + sum(b.n for b in cp.blocks)
    if ncone == 0 and cp.A.shape[0] == 0:
        if np.allclose(cp.c, 0.0):
            return report(Status.OPTIMAL, np.zeros(m))
        return report(Status.UNBOUNDED,
                      diag={"reason": "unconstrained with nonzero objective"})

    h = _h_vec(cp)
    c = cp.c
    b_eq = cp.b
    p_eq = cp.A.shape[0]
    degree = cp.cone_degree

    x = np.zeros(m)
    y = np.zeros(p_eq)
    s = ConeVec.identity(cp)
    z = ConeVec.identity(cp)
    tau, kappa = 1.0, 1.0

    resx0 = max(1.0, float(np.linalg.norm(c)))
    resy0 = max(1.0, float(np.linalg.norm(b_eq))) if p_eq else 1.0
    resz0 = max(1.0, h.norm())

    metrics: dict = {}
    stall = 0
    best_x: np.ndarray | None = None
    best_metrics: dict = {}
    best_score = np.inf
    best_age = 0
    tau_max = tau

    for it in range(opts.max_iter):
        # residuals of the embedded system
        rx = _G_adjoint(cp, z) + c * tau
        if p_eq:
            rx += cp.A.T @ y
        ry = cp.A @ x - b_eq * tau if p_eq else np.zeros(0)
        Gx = _G_apply(cp, x)
        rz = Gx.combine(1.0, s)
        rz.axpy(-tau, h)
        hz = h.dot(z)
        by = float(b_eq @ y) if p_eq else 0.0
        cx = float(c @ x)
        rt = cx + by + hz + kappa

        gap = s.dot(z)
        mu = (gap + tau * kappa) / (degree + 1)

        pcost = cx / tau
        dcost = -(hz + by) / tau
        pres = max(float(np.linalg.norm(ry)) / resy0 if p_eq else 0.0,
                   rz.norm() / resz0) / tau
        dres = float(np.linalg.norm(rx)) / resx0 / tau
        # the actual primal-dual difference, not s'z: the two differ by
        # residual cross-terms that can dominate when the dual iterate is
        # large, and certifying on s'z alone can pass a non-optimal point
        gap_t = abs(pcost - dcost)
        relgap = gap_t / max(1.0, abs(pcost), abs(dcost))

        if opts.record_iterates:
            iters_log.append((float(mu), float(pres), float(dres),
                              float(gap_t), float(tau), _cone_margin(s),
                              _cone_margin(z)))
            _embed_state.update(x=x.copy(), y=y.copy(), s=s.copy(),
                                z=z.copy(), tau=tau, kappa=kappa)
        metrics = {"pres": pres, "dres": dres, "gap": gap_t,
                   "relgap": relgap, "pcost": pcost, "dcost": dcost,
                   "mu": mu, "tau": tau, "kappa": kappa}

        # remember the cleanest iterate seen; double precision limits how
        # far residuals can drop, and past that point they degrade again
        score = max(pres / opts.feas_tol, dres / opts.feas_tol,
                    min((gap_t if gap_t >= 0.0 else np.inf)
                        / max(opts.gap_tol_abs, 1e-300),
                        (relgap if relgap >= 0.0 else np.inf)
                        / max(opts.gap_tol_rel, 1e-300)))
        if mu > 0.0 and np.isfinite(score) and score < best_score:
            best_score = score
            best_x = x / tau
            best_metrics = dict(metrics)
            best_age = 0
        else:
            best_age += 1

        if (pres <= opts.feas_tol and dres <= opts.feas_tol
                and (gap_t <= opts.gap_tol_abs
                     or relgap <= opts.gap_tol_rel)):
            out = _finish_optimal(cp, opts, x / tau, it, metrics, report)
            if out.status == Status.OPTIMAL:
                return out
            # normalized residuals converged but the point still violates
            # an original constraint beyond the absolute gate: iterate on

        cert_prox = np.inf
        ct = -(hz + by)
        if ct > 0.0:
            pinf = float(np.linalg.norm(rx - c * tau)) / resx0 / ct
            cert_prox = min(cert_prox, pinf)
            if pinf <= opts.feas_tol:
                metrics["certificate"] = "primal infeasibility"
                metrics["residual"] = pinf
                return report(Status.INFEASIBLE, it=it, diag=metrics)
        if cx < 0.0:
            gxs = Gx.combine(1.0, s)
            dinf = max(float(np.linalg.norm(ry + b_eq * tau)) / resy0
                       if p_eq else 0.0,
                       gxs.norm() / resz0) / -cx
            cert_prox = min(cert_prox, dinf)
            if dinf <= opts.feas_tol:
                metrics["certificate"] = "dual infeasibility"
                metrics["residual"] = dinf
                return report(Status.UNBOUNDED, it=it, diag=metrics)

        def fail(reason: str):
            """Numerical breakdown: accept the current or best-seen iterate
            if it is within a whisker of the tolerances (true violations
            are still re-checked by the Optimal gate), else report."""
            out = _near_accept(cp, opts, x / tau, metrics, it, report)
            if out is None:
                out = _near_accept(cp, opts, best_x, best_metrics, it,
                                   report)
            if out is not None:
                return out
            metrics["reason"] = reason
            return report(Status.NUMERICAL_FAILURE, x / tau, it, metrics)

        if gap <= 0.0 or mu <= 0.0:
            return fail("complementarity collapsed")
        tau_max = max(tau_max, tau)
        if tau <= 1e-6 * tau_max and (cert_prox > 1e-3
                                      or tau <= 1e-12 * tau_max):
            # homogenization collapsed with no infeasibility or
            # unboundedness certificate forming; further steps only
            # amplify roundoff
            return fail("homogenization variable collapsed")
        if best_age == 4:
            # residuals stopped improving; if the cleanest iterate seen is
            # within a whisker of the tolerances and its true violations
            # pass the gate, accept it now rather than grinding at the
            # precision floor (one attempt per candidate)
            out = _near_accept(cp, opts, best_x, best_metrics, it, report)
            if out is not None:
                return out

        try:
            scal = _Scaling(s, z)
            # near convergence: extra refinement and exact (materialized)
            # Schur assembly lower the achievable residual floor
            kkt = _KKT(cp, scal,
                       opts.refine if mu > 1e-6 else max(opts.refine, 1),
                       exact=mu <= 1e-6)
        except (np.linalg.LinAlgError, sla.LinAlgError,
                FloatingPointError) as e:
            return fail(f"scaling/factorization failed: {e}")

        lam = scal.lam_vec()
        hs = scal.WinvT(h)      # pairs h against scaled dual directions

        try:
            x1, y1, z1s = kkt.solve(-c, b_eq, h)
        except (np.linalg.LinAlgError, sla.LinAlgError) as e:
            return fail(f"static solve failed: {e}")
        den = float(c @ x1) + (float(b_eq @ y1) if p_eq else 0.0) \
            + hs.dot(z1s) - kappa / tau
        if not np.isfinite(den) or den == 0.0:
            return fail("degenerate tau elimination")

        def directions(u1, u2, u3, bt, btk, gamma):
            x2, y2, z2s = kkt.solve(u1, u2, u3)
            num = bt - btk / tau - (float(c @ x2)
                                    + (float(b_eq @ y2) if p_eq else 0.0)
                                    + hs.dot(z2s))
            dtau = num / den
            dx = x2 + dtau * x1
            dy = y2 + dtau * y1 if p_eq else y2
            dzs = z2s.combine(dtau, z1s)
            dss = gamma.combine(-1.0, dzs)
            dkap = (btk - kappa * dtau) / tau
            return dx, dy, dzs, dss, dtau, dkap

        # predictor (affine) direction: gamma = -lam
        u3a = s.combine(-1.0, rz)
        try:
            _, _, dzsa, dssa, dtaua, dkapa = directions(
                -rx, -ry, u3a, -rt, -tau * kappa, lam.scaled(-1.0))
        except (np.linalg.LinAlgError, sla.LinAlgError) as e:
            return fail(f"predictor solve failed: {e}")

        alpha_aff = min(_max_step(scal, dssa), _max_step(scal, dzsa))
        if dtaua < 0.0:
            alpha_aff = min(alpha_aff, -tau / dtaua)
        if dkapa < 0.0:
            alpha_aff = min(alpha_aff, -kappa / dkapa)
        alpha_aff = min(alpha_aff, 1.0)
        sigma = (1.0 - alpha_aff) ** 3

        # corrector: lam o (dzs + dss) = -lam o lam - corr + sigma mu e
        rhs = _jprod(lam, lam)
        rhs.axpy(1.0, _jprod(dzsa, dssa))
        rhs.axpy(-sigma * mu, ConeVec.identity(cp))
        gamma = _jsolve_lam(scal, rhs).scaled(-1.0)
        u3c = rz.scaled(-(1.0 - sigma))
        u3c.axpy(-1.0, scal.WT(gamma))
        btk = sigma * mu - tau * kappa - dtaua * dkapa
        try:
            dx, dy, dzs, dss, dtau, dkap = directions(
                -(1.0 - sigma) * rx, -(1.0 - sigma) * ry, u3c,
                -(1.0 - sigma) * rt, btk, gamma)
        except (np.linalg.LinAlgError, sla.LinAlgError) as e:
            return fail(f"corrector solve failed: {e}")

        alpha_max = min(_max_step(scal, dss), _max_step(scal, dzs))
        if dtau < 0.0:
            alpha_max = min(alpha_max, -tau / dtau)
        if dkap < 0.0:
            alpha_max = min(alpha_max, -kappa / dkap)
        alpha = min(1.0, opts.step_frac * alpha_max)
        if not np.isfinite(alpha) or alpha <= 0.0:
            return fail("step length collapsed")
        if alpha < 1e-7:
            stall += 1
            if stall >= 3:
                return fail("no progress over three iterations")
        else:
            stall = 0

        ds = scal.WT(dss)
        dz = scal.Winv(dzs)
        x += alpha * dx
        if p_eq:
            y += alpha * dy
        s.axpy(alpha, ds)
        z.axpy(alpha, dz)
        s.resym()
        z.resym()
        tau += alpha * dtau
        kappa += alpha * dkap

        if not (np.all(np.isfinite(x)) and s.finite() and z.finite()
                and np.isfinite(tau) and np.isfinite(kappa) and tau > 0.0):
            out = _near_accept(cp, opts, best_x, best_metrics, it, report)
            if out is not None:
                return out
            metrics["reason"] = "iterate diverged"
            return report(Status.NUMERICAL_FAILURE, it=it, diag=metrics)

    out = _near_accept(cp, opts, x / tau if tau > 0 else None, metrics,
                       opts.max_iter, report)
    if out is None:
        out = _near_accept(cp, opts, best_x, best_metrics, opts.max_iter,
                           report)
    if out is not None:
        return out
    return report(Status.MAX_ITERATIONS, x / tau if tau > 0 else None,
                  opts.max_iter, metrics)


def _cone_margin(v: ConeVec) -> float:
    """Smallest cone margin across all blocks (negative = outside)."""
    m = np.inf
    if v.nn.size:
        m = float(np.min(v.nn))
    for u in v.soc:
        m = min(m, float(u[0] - np.linalg.norm(u[1:])))
    for M in v.psd:
        m = min(m, float(np.linalg.eigvalsh(M)[0]))
    return m


def _near_accept(cp, opts, xhat, mm, it, report):
    """Accept an iterate whose residuals sit within a whisker of the
    tolerances; returns None when it does not qualify.  The Optimal gate
    in ``_finish_optimal`` still re-checks true constraint violations."""
    if xhat is None or not mm:
        return None
    if (mm["pres"] <= 100.0 * opts.feas_tol
            and mm["dres"] <= 100.0 * opts.feas_tol
            and (mm["gap"] <= 100.0 * opts.gap_tol_abs
                 or mm["relgap"] <= 10.0 * opts.gap_tol_rel)):
        out = _finish_optimal(cp, opts, xhat, it, mm, report)
        if out.status == Status.OPTIMAL:
            return out
    return None


def _finish_optimal(cp, opts, xhat, it, metrics, report):
    """Build the Optimal report, downgrading if true violations are large.

    Residuals converge in normalized units; this re-checks the original
    constraints so an ill-scaled problem cannot come back as Optimal
    while materially violating a constraint.
    """
    rep = report(Status.OPTIMAL, xhat, it, metrics)
    gate = opts.feas_tol
    bad = []
    if np.isfinite(rep.psd_violation) and rep.psd_violation > gate:
        bad.append(f"psd violation {rep.psd_violation:.3e}")
    if np.isfinite(rep.lin_violation) and rep.lin_violation > gate:
        bad.append(f"linear violation {rep.lin_violation:.3e}")
    if bad:
        rep.status = Status.NUMERICAL_FAILURE
        rep.diagnostics["reason"] = ("converged point fails original "
                                     "constraints: " + ", ".join(bad))
    return rep


def solve(prog: ConicProgram, opts: SolverOptions | None = None) -> SolveReport:
    """Solve a conic program, reformulating any logdet objective first."""
    opts = opts or SolverOptions()
    if prog.logdet_terms:
        from .logdet import logdet_reformulate, restrict_report
        ref = logdet_reformulate(prog)
        inner = solve(ref, opts)
        return restrict_report(prog, inner)
    if opts.backend == "cvxopt":
        from .backends import solve_cvxopt
        return solve_cvxopt(prog, opts)
    cp = compile_program(prog, normalize=opts.normalize,
                         structure_exploit=opts.structure_exploit)
    return solve_compiled(cp, opts)
