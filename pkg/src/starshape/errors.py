"""Exception types shared across the package."""


class StarshapeError(Exception):
    """Base class for all package errors."""


class ShapeError(StarshapeError):
    """Array has the wrong rank, channel count or spatial size."""


class DataError(StarshapeError):
    """Input data is unusable: non-finite pixels, bad checksums, bad files."""


class SplitError(StarshapeError):
    """A train/test partition cannot be formed as requested."""


class MiningError(StarshapeError):
    """Nearest-neighbor channel mining cannot run (e.g. an empty class)."""


class SpecError(StarshapeError):
    """A declarative spec (synthetic recipe, generator spec) is invalid."""


class ConfigError(StarshapeError):
    """A runtime configuration is inconsistent or mismatched."""


class ContractError(StarshapeError):
    """An operation was called on an object that cannot support it."""


class NumericError(StarshapeError):
    """Non-finite values reached a numerical routine."""


class ProtocolError(StarshapeError):
    """An evaluation protocol precondition failed (e.g. too few test items)."""


class DivergenceError(StarshapeError):
    """Training produced non-finite losses for too many consecutive steps."""

    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
