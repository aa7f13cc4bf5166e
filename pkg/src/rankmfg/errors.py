class RankMFGError(Exception):
    """Base class for library errors."""


class DomainError(RankMFGError, ValueError):
    """An argument lies outside the domain where the quantity is defined."""


class UnsupportedMethodError(RankMFGError):
    """The requested evaluator cannot handle this reward/measure combination."""


class ConsistencyError(RankMFGError):
    """Two estimators of the same quantity disagree beyond their error budget."""


class InsufficientDataError(RankMFGError):
    pass


class ValidationError(RankMFGError, ValueError):
    """Configuration validation failure; ``problems`` lists every violated field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
