"""Exception hierarchy shared across the toolkit."""


class EtmpcError(Exception):
    """Base class for all toolkit errors."""


# --- model validation ---------------------------------------------------


class ValidationError(EtmpcError):
    """A system failed one of its structural invariants."""


class DimensionMismatch(ValidationError):
    def __init__(self, what: str):
        super().__init__(f"dimension mismatch: {what}")
        self.what = what


class NotPositiveDefinite(ValidationError):
    def __init__(self, which: str):
        super().__init__(f"matrix not positive definite: {which}")
        self.which = which


class UnboundedConstraintSet(ValidationError):
    def __init__(self, detail: str = ""):
        super().__init__(f"constraint polytope is unbounded {detail}".rstrip())
        self.detail = detail


class BadBlockStructure(ValidationError):
    def __init__(self, detail: str):
        super().__init__(f"bad uncertainty block structure: {detail}")
        self.detail = detail


# --- file formats -------------------------------------------------------


class ParseError(EtmpcError):
    """File does not parse; carries a location string."""

    def __init__(self, location: str, detail: str = ""):
        super().__init__(f"parse error at {location}: {detail}")
        self.location = location


class SchemaError(EtmpcError):
    """File parses but violates the schema; names the offending field."""

    def __init__(self, field: str, detail: str = ""):
        msg = f"schema error on field {field!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.field = field


class IoError(EtmpcError):
    """Output could not be written."""


class EmptyResults(EtmpcError):
    """Report emission called with nothing to report."""


# --- conic programming --------------------------------------------------


class IllPosedProgram(EtmpcError):
    """Program violates well-posedness (unused variable, bad reference)."""


class UnsupportedObjective(EtmpcError):
    """Operation cannot handle the program's objective form."""


class MultipleLogdetTerms(EtmpcError):
    """logdet reformulation requires exactly one logdet term."""


class NumericalFailure(EtmpcError):
    """Interior-point iteration broke down; carries diagnostics."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


# --- offline design -----------------------------------------------------


class NoFeasibleDesign(EtmpcError):
    """Every grid point of the offline line search failed."""

    def __init__(self, statuses):
        lines = ", ".join(f"tau1O={t:g}: {s}" for t, s in statuses)
        super().__init__(f"no feasible offline design; per-point statuses: {lines}")
        self.statuses = statuses


class TerminalCostInfeasible(EtmpcError):
    """Terminal-cost LMI infeasible: K cannot absorb the uncertainty level."""


# --- online -------------------------------------------------------------


class HorizonTooShort(EtmpcError):
    def __init__(self, N: int):
        super().__init__(f"horizon must be >= 1, got {N}")
        self.N = N


class InfeasibleAtState(EtmpcError):
    """Per-step program infeasible at the measured state."""

    def __init__(self, x_hat, diagnostics=None):
        super().__init__("online program infeasible at the measured state")
        self.x_hat = x_hat
        self.diagnostics = diagnostics


# --- simulation / benchmarks -------------------------------------------


class InitialStateInfeasible(EtmpcError):
    """First closed-loop solve infeasible: x0 outside the feasible region."""


class SetpointInfeasible(EtmpcError):
    """Terminal design fails at the shifted equilibrium."""
