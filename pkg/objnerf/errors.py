from typing import Optional


class ObjNerfError(Exception):
    """Base class for all errors raised by objnerf."""


class DatasetError(ObjNerfError):
    """A dataset directory or an in-memory dataset violates the dataset format."""


class CheckpointError(ObjNerfError):
    """A field checkpoint file could not be decoded."""


class CorruptionError(ObjNerfError):
    """Noise could not be injected as requested."""


class DivergenceError(ObjNerfError):
    """
    Optimization produced non-finite values.

    :param step: The training step at which the non-finite value was observed, if known.
    """

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)
        self.step = step


class SceneError(ObjNerfError):
    """A scene file or built-in scene name could not be resolved."""
