"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigurationError(ValueError):
    """A simulation configuration violates a structural requirement.

    Carries a list of ``(field_path, message)`` pairs when raised by the
    config validator so callers can report every violation at once.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [("", violations)]
        self.violations = list(violations)
        msg = "; ".join(f"{path}: {text}" if path else text
                        for path, text in self.violations)
        super().__init__(msg)


class RefusalError(RuntimeError):
    """A verification routine refuses to run because its preconditions
    (replicate count, lag count, quadrature resolution) are not met."""


class NumericalAbort(RuntimeError):
    """A scheme produced a non-finite value; carries the failure location."""

    def __init__(self, step, node, replicate=0):
        self.step = step
        self.node = node
        self.replicate = replicate
        super().__init__(
            f"non-finite value at step {step}, node {node}, replicate {replicate}"
        )
