from typing import Optional


class BellmanError(Exception):
    """Base class for every error raised by the solver, the verifier and their front-ends."""


class ModelError(BellmanError, ValueError):
    """A model file or model object does not satisfy its schema or invariants."""


class ConfigError(BellmanError, ValueError):
    """Unknown or ill-typed configuration value."""


class DomainError(BellmanError, ValueError):
    """Argument outside the domain of the utility or its conjugate."""


class AdmissibilityError(BellmanError):
    """A strategy drives wealth to a non-positive value."""

    def __init__(self, message: str, node: Optional[str] = None):
        super().__init__(message if node is None else f"{message} (node {node})")
        self.node = node


class StepSizeError(BellmanError, ValueError):
    """The time step is too coarse for positive branch probabilities."""

    def __init__(self, message: str, max_dt: float):
        super().__init__(f"{message}; choose a time step below {max_dt:.6g}")
        self.max_dt = max_dt


class StructureConditionError(BellmanError):
    """The drift is not in the range of the covariance matrix."""


class NotRepresentableError(BellmanError):
    """A constraint set cannot be represented after the requested transformation."""


class OutsideDomainError(BellmanError, ValueError):
    """A portfolio lies outside the natural constraints, where g is not defined."""


class UnboundedObjectiveError(BellmanError):
    """The local objective has no finite supremum over the constraints."""


class InfiniteValueError(BellmanError):
    """The utility maximization problem is not finite at some node."""

    def __init__(self, message: str, node: Optional[str] = None):
        super().__init__(message if node is None else f"{message} (node {node})")
        self.node = node


class OracleBudgetError(BellmanError):
    """Brute-force enumeration would exceed the configured budget."""


class NumericalFailureError(BellmanError):
    """A numerical routine left its valid range."""


class CandidateError(BellmanError, ValueError):
    """A candidate solution triple fails validation against its lattice."""
