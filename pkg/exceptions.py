from typing import Optional, Sequence


class PLearnerError(Exception):
    """Base class for every error raised by the learner's modules."""


class DataValidationError(PLearnerError, ValueError):
    pass


class ConfigError(PLearnerError, ValueError):
    pass


class EmptyArmError(PLearnerError, ValueError):
    pass


class FoldError(PLearnerError):
    def __init__(self, fold: int, message: str):
        super().__init__(f"fold {fold}: {message}")
        self.fold = fold


class KernelError(PLearnerError, ValueError):
    pass


class SingularSystemError(PLearnerError):
    pass


class RankDeficiencyError(PLearnerError):
    def __init__(self, columns: Sequence[str]):
        super().__init__(f"rank-deficient design, offending columns: {', '.join(columns)}")
        self.columns = list(columns)


class LeverageError(PLearnerError):
    def __init__(self, unit: int):
        super().__init__(f"unit {unit} has leverage 1 (exact fit), HC3 is undefined")
        self.unit = unit


class OracleCertificationError(PLearnerError):
    pass


class BenchmarkError(PLearnerError):
    def __init__(self, seed: int, cause: Optional[BaseException] = None):
        super().__init__(f"seed {seed}: {cause}")
        self.seed = seed
