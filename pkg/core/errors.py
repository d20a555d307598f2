from __future__ import annotations


class GeoAdaptError(Exception):
    """Base class for every failure the pipelines report on purpose."""

    exit_code = 1

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class ConfigError(GeoAdaptError):
    exit_code = 2


class TensorFormatError(GeoAdaptError):
    pass


class CheckpointError(GeoAdaptError):
    pass


class DatasetError(GeoAdaptError):
    pass


class GeometryError(GeoAdaptError):
    pass


class EmptySupervisionError(GeoAdaptError):
    pass


class DivergenceError(GeoAdaptError):
    """A loss term went non-finite."""

    def __init__(self, term: str, step: int | None = None, value: float | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite {term} loss{where} (value={value})", stage="train")
        self.term = term
        self.step = step
        self.value = value


class QuadratureGridError(GeoAdaptError):
    pass


class VanishingLikelihoodError(GeoAdaptError):
    pass


class NoMaskedPatchesWarning(UserWarning):
    pass


class AbsentClassWarning(UserWarning):
    pass


class AdaptedWindowWarning(UserWarning):
    pass
