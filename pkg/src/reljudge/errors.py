"""Exception hierarchy shared by every reljudge module."""

from __future__ import annotations


class RelJudgeError(Exception):
    """Base class for all errors raised by this package."""


class DatasetError(RelJudgeError):
    """A dataset file could not be read or violates its schema."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class DuplicateError(DatasetError):
    pass


class DomainError(DatasetError, ValueError):
    """A value lies outside its allowed domain (grade, tier, probability...)."""


class EmptyDatasetError(RelJudgeError):
    pass


class BalanceError(RelJudgeError):
    """Class-balanced sampling is impossible with the available pool."""

    def __init__(self, message: str, deficient_class: int | None = None):
        self.deficient_class = deficient_class
        super().__init__(message)


class ConfigurationError(RelJudgeError, ValueError):
    pass


class EmptyInputError(RelJudgeError, ValueError):
    pass


class UndefinedResultError(RelJudgeError):
    """No input yields a defined value for the requested metric."""


class IncompleteJudgmentsError(RelJudgeError):
    def __init__(self, missing: list[tuple[str, str]]):
        self.missing = missing
        shown = ", ".join(f"{q}/{d}" for q, d in missing[:10])
        more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
        super().__init__(f"{len(missing)} hard negatives lack a judgment: {shown}{more}")


class ValidationSplitError(RelJudgeError):
    """Validation data must keep its original labels."""


class JudgeError(RelJudgeError):
    """A model completion could not be turned into a grade.

    ``code`` is the stable identifier written to journals.
    """

    code = "judge_error"

    def __init__(self, message: str, raw_output: str | None = None):
        self.raw_output = raw_output
        super().__init__(message)


class ParseFailure(JudgeError):
    code = "parse_failure"


class OutOfRange(JudgeError):
    code = "out_of_range"

    def __init__(self, message: str, value: int, raw_output: str | None = None):
        self.value = value
        super().__init__(message, raw_output)


class TransportError(JudgeError):
    code = "transport"


class RunAborted(RelJudgeError):
    """Too many pairs failed; partial results are attached."""

    def __init__(self, message: str, partial=None, failure_rate: float = 0.0):
        self.partial = partial
        self.failure_rate = failure_rate
        super().__init__(message)


class DivergenceError(RelJudgeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
