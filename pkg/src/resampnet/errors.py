"""Exception hierarchy shared across the package."""


class ResampNetError(Exception):
    """Base class for all package errors."""


class ContractError(ResampNetError, ValueError):
    """Argument shapes or values violate an operation's preconditions."""


class DegenerateBatchError(ContractError):
    """Batch normalization in training mode needs at least two samples."""


class ConfigError(ResampNetError, ValueError):
    pass


class ParameterError(ResampNetError, ValueError):
    """Invalid image-processing parameter (window, sigma, gamma, factor)."""


class ChannelError(ResampNetError, ValueError):
    pass


class CropError(ResampNetError, ValueError):
    pass


class PatchError(ResampNetError, ValueError):
    pass


class ImageFormatError(ResampNetError, ValueError):
    pass


class CheckpointError(ResampNetError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class GenerationError(ResampNetError):
    pass


class InsufficientSourcesError(GenerationError):
    pass


class DivergenceError(ResampNetError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
