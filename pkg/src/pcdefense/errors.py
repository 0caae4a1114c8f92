"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array shapes do not satisfy an operation's contract."""


class ValidationError(ValueError):
    """A value violates a documented invariant (labels, configs, ranges)."""


class ParseError(ValueError):
    """A dataset file is malformed (bad magic, truncation, count mismatch)."""


class DivergenceError(RuntimeError):
    """State integration produced non-finite values."""


class ModelFileError(IOError):
    """A model file is corrupt, has the wrong version, or the wrong kind/arch."""
