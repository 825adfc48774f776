"""Exception hierarchy shared by every stage.

Each class carries the CLI exit code of its category so the driver can map
failures without a lookup table.
"""

from __future__ import annotations


class MotionWarpError(Exception):
    category = "error"
    exit_code = 1


class MissingInputError(MotionWarpError, FileNotFoundError):
    category = "missing-input"
    exit_code = 2


class ContractError(MotionWarpError, ValueError):
    """An argument violates a documented shape/value precondition."""

    category = "contract-violation"
    exit_code = 3


class ConditioningError(ContractError):
    def __init__(self, message: str, min_eigenvalue: float):
        super().__init__(f"{message} (smallest eigenvalue {min_eigenvalue:.3e})")
        self.min_eigenvalue = min_eigenvalue


class RankError(ContractError):
    def __init__(self, message: str, effective_rank: int):
        super().__init__(f"{message} (effective rank {effective_rank})")
        self.effective_rank = effective_rank


class EmptyBasisError(ContractError):
    pass


class UnsupportedRateError(ContractError):
    pass


class TooShortError(ContractError):
    pass


class DegenerateMaskError(ContractError):
    pass


class CoverageError(ContractError):
    def __init__(self, missing: list[int]):
        super().__init__(f"target frames not covered by path: {missing}")
        self.missing = missing


class TrainingFailure(MotionWarpError):
    category = "training-failure"
    exit_code = 4

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step
