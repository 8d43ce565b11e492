"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class SingularConfigurationError(DomainError):
    """The control algebra has no finite solution for this configuration."""


class OverdampedError(DomainError):
    """The requested frequency does not exist because 4k < gamma**2."""


class ValidationError(ValueError):
    """Input data or a generation plan failed validation.

    ``problems`` lists every offending entry, not just the first.
    """

    def __init__(self, message: str, problems: list[str] | None = None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + ":\n  " + "\n  ".join(self.problems)
        super().__init__(message)


class NonFiniteObjectiveError(RuntimeError):
    """The fitting objective became non-finite; carries the last good iterate."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good
