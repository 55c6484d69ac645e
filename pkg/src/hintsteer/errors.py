"""Exception types shared across the package."""


class HintsteerError(Exception):
    """Base class for all package errors."""


class RuleReferencesUnknownHint(HintsteerError):
    """A rule names a hint id that is not in the catalog."""


class InvalidSpec(HintsteerError):
    """A catalog/workload generation spec is malformed."""


class UnknownTable(HintsteerError):
    """A query references a table the catalog does not define."""


class UnknownOperator(HintsteerError):
    """A plan node uses an operator outside the fixed vocabulary."""


class ShapeMismatch(HintsteerError):
    """An encoded tree's feature width does not match the model."""


class NonPositiveInput(HintsteerError):
    """Q-error received a non-positive prediction or reward."""


class NonFiniteGradient(HintsteerError):
    """Backprop produced NaN/inf; parameters were rolled back."""


class StoreUnavailable(HintsteerError):
    """The experience store cannot be opened or written."""


class EmptyClass(HintsteerError):
    """No experience or queries exist for the requested complexity class."""


class UnknownWorkload(HintsteerError):
    """No statistics registered for a query's workload."""


class Timeout(HintsteerError):
    """A simulated execution exceeded the timeout limit.

    This is a control-flow signal, not a failure: callers must drop the
    measurement (collection) or account for it per policy (evaluation).
    """

    def __init__(self, limit_ms, elapsed_ms):
        super().__init__(f"execution exceeded {limit_ms} ms (ran {elapsed_ms:.3f} ms)")
        self.limit_ms = limit_ms
        self.elapsed_ms = elapsed_ms
