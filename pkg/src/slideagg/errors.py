"""Exception and warning types shared across the package."""


class SlideAggError(Exception):
    """Base class for all package errors."""


class FormatError(SlideAggError, ValueError):
    """A SAGG/SAGM container or manifest could not be parsed."""


class ManifestError(SlideAggError, ValueError):
    pass


class ShapeError(SlideAggError, ValueError):
    pass


class TrainingError(SlideAggError, RuntimeError):
    """Training could not start or produced a non-finite loss."""


class ConfigError(SlideAggError, ValueError):
    pass


class SlideAggWarning(UserWarning):
    pass


class SmallClassWarning(SlideAggWarning):
    """A class has fewer slides than folds; some folds will lack it."""


class EmptyComponentWarning(SlideAggWarning):
    pass


class ZeroNormWarning(SlideAggWarning):
    pass


class AbsentClassWarning(SlideAggWarning):
    """A class is missing from a fold's gallery and can never be predicted."""
