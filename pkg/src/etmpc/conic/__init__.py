"""Conic-program IR, reference interior-point solver, and SDPA exchange."""

from .program import (EPS, AffMat, ConicProgram, LinExpr, MatrixVar,
                      PsdConstraint, ScalarVar, SocConstraint)
from .compiled import CompiledProgram, compile_program
from .solver import (SolveReport, SolverOptions, Status, solve,
                     solve_compiled)
from .logdet import logdet_reformulate
from .sdpa import export_sdpa, import_sdpa

__all__ = [
    "EPS", "AffMat", "ConicProgram", "LinExpr", "MatrixVar",
    "PsdConstraint", "ScalarVar", "SocConstraint",
    "CompiledProgram", "compile_program",
    "SolveReport", "SolverOptions", "Status", "solve", "solve_compiled",
    "logdet_reformulate", "export_sdpa", "import_sdpa",
]
