"""Exception hierarchy shared by every gridloc module."""


class GridlocError(Exception):
    """Root of all gridloc errors."""


class ConfigError(GridlocError, ValueError):
    """Invalid configuration value. The message names the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class InputError(GridlocError, ValueError):
    """Invalid argument passed to an operation."""


class ShapeError(InputError):
    """Tensor shape mismatch. The message names the offending dimension."""


class GeometryError(InputError):
    """Degenerate box, empty edge set or invalid RoI geometry."""


class NumericError(GridlocError, ArithmeticError):
    """A primitive produced NaN or Inf."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, message: str, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")


class PlacementError(GridlocError, RuntimeError):
    """Scene rejection sampling ran out of tries."""


class ChecksumError(GridlocError, IOError):
    """Stored checksum does not match file contents."""

    def __init__(self, path, expected: str, actual: str):
        self.path = path
        super().__init__(f"checksum mismatch for {path}: expected {expected[:12]}…, got {actual[:12]}…")


class BlobFormatError(GridlocError, ValueError):
    """Malformed blob manifest or payload."""
