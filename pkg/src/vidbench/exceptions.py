"""Exception hierarchy shared across the pipeline."""


class VidbenchError(Exception):
    """Base class for all pipeline errors."""


class ConfigurationError(VidbenchError):
    """Bad or missing configuration (paths, grids, config files)."""


class InvalidInputError(VidbenchError, ValueError):
    """An argument violates an operation's preconditions."""


class InvalidParameterError(InvalidInputError):
    """An augmentation or schedule parameter is out of range."""


class LabelError(InvalidInputError):
    """A video could not be mapped to one of the two classes."""


class DecodeError(VidbenchError):
    """A video container could not be decoded."""

    def __init__(self, video_id, message):
        super().__init__(f"{video_id}: {message}")
        self.video_id = video_id
        self.message = message

    def __reduce__(self):
        return type(self), (self.video_id, self.message)


class SplitSizeError(VidbenchError, ValueError):
    """The manifest is too small for the requested split sizes."""


class SpecError(VidbenchError, ValueError):
    """A ModelSpec does not match the builder or is internally inconsistent."""


class ShapeError(VidbenchError, ValueError):
    """A tensor does not have the expected shape."""


class WeightsMissingError(VidbenchError):
    """Pretrained backbone weights are not available locally or remotely."""


class TrainingDivergedError(VidbenchError):
    """Loss became non-finite during optimisation."""

    def __init__(self, epoch, batch, loss):
        super().__init__(
            f"loss became non-finite ({loss!r}) at epoch {epoch}, batch {batch}; "
            "try a lower initial_lr or a different optimizer"
        )
        self.epoch = epoch
        self.batch = batch
        self.loss = loss

    def __reduce__(self):
        return type(self), (self.epoch, self.batch, self.loss)


class IncompleteGridError(VidbenchError):
    """The ablation summary is missing a (family, split) cell."""
