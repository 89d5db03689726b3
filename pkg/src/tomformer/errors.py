"""Exception hierarchy shared by every module."""


class TomFormerError(Exception):
    """Base class for all package errors."""


class ShapeError(TomFormerError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(TomFormerError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(TomFormerError, ValueError):
    """A configuration is internally inconsistent."""


class SchemaError(TomFormerError, ValueError):
    """Annotation JSON does not follow the manifest schema."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class RecordError(TomFormerError, ValueError):
    """An annotation record is semantically invalid (e.g. box out of bounds)."""

    def __init__(self, message: str, image_ids: list[str]):
        super().__init__(f"{message} (images: {', '.join(image_ids)})")
        self.image_ids = image_ids


class VocabularyError(TomFormerError, ValueError):
    """A class name is not part of the fixed vocabulary."""


class ImageFormatError(TomFormerError, ValueError):
    """Image file is not a binary 8-bit PPM, or its payload is truncated."""


class CheckpointError(TomFormerError, ValueError):
    """Checkpoint file is corrupt, of the wrong version, or mismatches a config."""


class NumericalError(TomFormerError, ArithmeticError):
    """A loss or gradient became non-finite."""


class CheckpointShapeError(CheckpointError, ShapeError):
    """A stored tensor's shape disagrees with the requested config."""
