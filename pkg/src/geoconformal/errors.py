"""Exception and warning types shared across the package."""


class GeoConformalError(ValueError):
    """Base class for all errors raised by geoconformal."""


class CRSMismatchError(GeoConformalError):
    def __init__(self, a, b):
        super().__init__(f"CRS mismatch: {a.value} vs {b.value}")
        self.crs = (a, b)


class EmptyDatasetError(GeoConformalError):
    def __init__(self, msg="empty dataset"):
        super().__init__(msg)


class SchemaError(GeoConformalError):
    """Raised when columns, feature counts or query layouts do not line up."""


class FitError(GeoConformalError):
    """Raised when a model cannot be fitted (singular system, divergence, ...)."""


class StageError(GeoConformalError):
    """Wraps an error raised inside one stage of a pipeline."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class GeoConformalWarning(UserWarning):
    pass
