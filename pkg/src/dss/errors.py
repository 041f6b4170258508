"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes, so each class carries a stable meaning.
"""


class DssError(Exception):
    """Base class for all package errors."""


class DomainError(DssError, ValueError):
    """Argument outside the operation's domain (bad length, shape, sign)."""


class PreconditionError(DomainError):
    """A mathematical precondition failed, e.g. a zero eigenvalue."""


class SingularRowError(DssError, ArithmeticError):
    """Row-softmax denominator vanished: exp(L * lambda_i * delta) == 1."""

    def __init__(self, index: int, eigenvalue: complex | None = None, message: str | None = None):
        self.index = int(index)
        self.eigenvalue = eigenvalue
        if message is None:
            message = f"singular row-softmax denominator for eigenvalue index {self.index}"
            if eigenvalue is not None:
                message += f" (lambda={eigenvalue!r})"
        super().__init__(message)


class NumericError(DssError, ArithmeticError):
    """Non-finite values or solver failure."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        self.step = int(step)
        self.loss = loss
        super().__init__(f"training diverged at step {self.step} (loss={loss})")


class UsageError(DssError, RuntimeError):
    """API misuse, e.g. calling backward on a tensor with no recorded graph."""


class ConfigError(DssError, ValueError):
    """Malformed or inconsistent run configuration."""
