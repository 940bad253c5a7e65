"""Exception types. Each carries a short machine-readable ``category``."""


class XtascError(Exception):
    category = "error"


class ShapeError(XtascError, ValueError):
    category = "shape"


class DegenerateBatchError(XtascError, ValueError):
    category = "degenerate-batch"


class EmptyMaskError(XtascError, ValueError):
    category = "empty-mask"


class DivergenceError(XtascError, FloatingPointError):
    category = "divergence"


class CorruptDataError(XtascError, IOError):
    category = "corrupt-data"


class ConfigError(XtascError, ValueError):
    category = "config"
