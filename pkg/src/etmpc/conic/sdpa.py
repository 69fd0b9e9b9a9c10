"""SDPA sparse-format (".dat-s") export and import.

The exported problem is the standard SDPA form

    minimize    c'x
    subject to  sum_i x_i F_i - F0  >= 0   (block diagonal)

with negative block dimensions denoting diagonal blocks.  Mapping from
the internal convention (affine expressions required <= 0): a PSD
constraint F0 + sum x_i F_i <= 0 exports as F_i^sdpa = -F_i and
F0^sdpa = F0.  Second-order cones are embedded as arrowhead PSD blocks
[[s, v'], [v, s I]]; linear inequalities and bounds populate one shared
diagonal block; equalities export as paired inequalities.

Entries are written upper-triangle, 1-indexed, with full %.17g precision
so roundtrips preserve data bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from ..errors import IoError, ParseError, UnsupportedObjective
from .compiled import compile_program
from .program import ConicProgram, LinExpr, AffMat


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _arrow(u: np.ndarray) -> np.ndarray:
    """[[u0, u1'], [u1, u0 I]] for the SOC slack vector u."""
    k = u.size - 1
    M = np.zeros((k + 1, k + 1))
    M[0, 0] = u[0]
    M[0, 1:] = u[1:]
    M[1:, 0] = u[1:]
    M[1:, 1:] = u[0] * np.eye(k)
    return M


def export_sdpa(prog: ConicProgram, path) -> None:
    """Write `prog` in SDPA sparse format at `path`."""
    if prog.logdet_terms:
        raise UnsupportedObjective(
            "SDPA export requires a linear objective; apply "
            "logdet_reformulate first")
    cp = compile_program(prog, normalize=False, structure_exploit=False)
    m = cp.m

    # block table: (signed dimension, {matno: [(i, j, value), ...]})
    blocks: list[tuple[int, dict]] = []

    def put(entries: dict, matno: int, i: int, j: int, v: float):
        if v != 0.0:
            entries.setdefault(matno, []).append((i, j, v))

    for b in cp.blocks:
        entries: dict = {}
        for i in range(b.n):
            for j in range(i, b.n):
                put(entries, 0, i + 1, j + 1, b.F0[i, j])
        for k, gvar in enumerate(b.dense_pos):
            F = b.F_dense[k]
            for i in range(b.n):
                for j in range(i, b.n):
                    put(entries, int(gvar) + 1, i + 1, j + 1, -F[i, j])
        blocks.append((b.n, entries))

    for s in cp.socs:
        entries = {}
        F0 = _arrow(-s.h)
        d = s.dim
        for i in range(d):
            for j in range(i, d):
                put(entries, 0, i + 1, j + 1, F0[i, j])
        for k, gvar in enumerate(s.touched):
            Fk = _arrow(-s.G[:, k])
            for i in range(d):
                for j in range(i, d):
                    put(entries, int(gvar) + 1, i + 1, j + 1, Fk[i, j])
        blocks.append((d, entries))

    nlin = cp.G_nn.shape[0]
    neq = cp.A.shape[0]
    if nlin + neq:
        entries = {}
        Gd = cp.G_nn.tocoo()
        for r, i, v in zip(Gd.row, Gd.col, Gd.data):
            put(entries, int(i) + 1, int(r) + 1, int(r) + 1, -float(v))
        for r, hv in enumerate(cp.h_nn):
            put(entries, 0, r + 1, r + 1, -float(hv))
        for r in range(neq):
            lo = nlin + 2 * r + 1
            for i, v in enumerate(cp.A[r]):
                if v != 0.0:
                    put(entries, i + 1, lo, lo, -float(v))
                    put(entries, i + 1, lo + 1, lo + 1, float(v))
            put(entries, 0, lo, lo, -float(cp.b[r]))
            put(entries, 0, lo + 1, lo + 1, float(cp.b[r]))
        blocks.append((-(nlin + 2 * neq), entries))

    try:
        with open(path, "w") as f:
            f.write(f"* exported conic program"
                    f"{': ' + prog.name if prog.name else ''}\n")
            f.write(f"* variables: {' '.join(cp.var_names)}\n")
            f.write(f"{m}\n{len(blocks)}\n")
            f.write(" ".join(str(d) for d, _ in blocks) + "\n")
            f.write(" ".join(_fmt(v) for v in cp.c) + "\n")
            for bi, (_, entries) in enumerate(blocks, start=1):
                for matno in sorted(entries):
                    for i, j, v in entries[matno]:
                        f.write(f"{matno} {bi} {i} {j} {_fmt(v)}\n")
    except OSError as e:
        raise IoError(f"cannot write SDPA file {path}: {e}") from e


def _tokens(path):
    """Yield (token, line_number), skipping comments, tolerating braces."""
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise IoError(f"cannot read SDPA file {path}: {e}") from e
    for ln, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped[0] in "*\"":
            continue
        for ch in ",{}()":
            stripped = stripped.replace(ch, " ")
        for tok in stripped.split():
            yield tok, ln


def import_sdpa(path) -> ConicProgram:
    """Rebuild a ConicProgram from an SDPA sparse file.

    Variables come back as scalars named x[0..m-1]; PSD blocks become
    PSD constraints, diagonal blocks become scalar inequalities.
    """
    stream = _tokens(path)
    loc = [0]

    def take(kind, what):
        try:
            tok, ln = next(stream)
        except StopIteration:
            raise ParseError(f"{path}:eof", f"expected {what}") from None
        loc[0] = ln
        try:
            return kind(tok)
        except ValueError:
            raise ParseError(f"{path}:{ln}",
                             f"expected {what}, got {tok!r}") from None

    def take_int(what):
        v = take(float, what)
        if v != int(v):
            raise ParseError(f"{path}:{loc[0]}", f"{what} must be integral")
        return int(v)

    m = take_int("variable count")
    if m <= 0:
        raise ParseError(f"{path}:{loc[0]}", "variable count must be positive")
    nblocks = take_int("block count")
    dims = [take_int(f"dimension of block {b + 1}") for b in range(nblocks)]
    if any(d == 0 for d in dims):
        raise ParseError(f"{path}:{loc[0]}", "zero block dimension")
    c = np.array([take(float, f"objective coefficient {i + 1}")
                  for i in range(m)])

    mats: list[dict[int, np.ndarray]] = [{} for _ in dims]
    while True:
        try:
            tok, ln = next(stream)
        except StopIteration:
            break
        loc[0] = ln
        try:
            matno = int(float(tok))
        except ValueError:
            raise ParseError(f"{path}:{ln}", f"bad entry start {tok!r}") from None
        blk = take_int("block index")
        i = take_int("row index")
        j = take_int("column index")
        v = take(float, "entry value")
        if not (0 <= matno <= m):
            raise ParseError(f"{path}:{ln}", f"matrix index {matno} out of range")
        if not (1 <= blk <= nblocks):
            raise ParseError(f"{path}:{ln}", f"block index {blk} out of range")
        d = abs(dims[blk - 1])
        if not (1 <= i <= d and 1 <= j <= d):
            raise ParseError(f"{path}:{ln}",
                             f"entry ({i},{j}) outside block of size {d}")
        if dims[blk - 1] < 0 and i != j:
            raise ParseError(f"{path}:{ln}",
                             "off-diagonal entry in a diagonal block")
        F = mats[blk - 1].setdefault(matno, np.zeros((d, d)))
        F[i - 1, j - 1] = v
        F[j - 1, i - 1] = v

    prog = ConicProgram(name=f"sdpa:{path}")
    xs = [prog.scalar(f"x[{i}]") for i in range(m)]
    prog.minimize(LinExpr({xs[i].index: float(c[i])
                           for i in range(m) if c[i] != 0.0}))

    for bi, d in enumerate(dims):
        table = mats[bi]
        if d > 0:
            const = table.get(0, np.zeros((d, d)))
            terms = {xs[k - 1].index: -F for k, F in table.items() if k != 0}
            prog.add_psd(AffMat((d, d), const, terms), name=f"block{bi + 1}")
        else:
            dd = -d
            F0 = table.get(0, np.zeros((dd, dd)))
            for r in range(dd):
                coeffs = {}
                for k, F in table.items():
                    if k != 0 and F[r, r] != 0.0:
                        coeffs[xs[k - 1].index] = -float(F[r, r])
                if coeffs:
                    prog.add_le(LinExpr(coeffs), -float(F0[r, r]))
                elif -float(F0[r, r]) < 0.0:
                    # constant row that can never hold
                    prog.add_le(LinExpr({xs[0].index: 0.0}), -float(F0[r, r]))
    return prog
