"""
Domain exceptions.

Everything a caller can fix by changing its inputs is a ValueError subclass;
the orchestrator turns any of them into a FAILED RunResult.
"""


class ShapeMismatchError(ValueError):
    """An array does not match the geometry it is used with."""


class MaskError(ValueError):
    """Invalid mask ratio, or a mask applied to the wrong tokens."""


class EpisodeFormatError(ValueError):
    """An episode directory is missing a file or holds malformed content."""


class CheckpointError(ValueError):
    """Checkpoint is corrupt or does not match the requested configuration."""


class SceneGenerationError(ValueError):
    """A scene cannot be generated under the given constraints."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step: int, last_finite_loss: float | None):
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"non-finite loss at step {step} (last finite loss: {last_finite_loss})"
        )
