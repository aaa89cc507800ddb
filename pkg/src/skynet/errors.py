"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent with an operator's contract."""


class DomainError(ValueError):
    """A value is outside an operator's mathematical domain."""


class ValidationError(ValueError):
    """A network specification violates a structural rule.

    ``violations`` carries one message per broken rule.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
