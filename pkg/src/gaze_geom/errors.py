"""Exception hierarchy shared by all gaze_geom modules."""


class GazeGeomError(Exception):
    """Base class for every error raised by this package."""


class DegenerateInput(GazeGeomError, ValueError):
    """Points admit no ellipse (collinear, coincident, rank deficient)."""


class TooFewPoints(DegenerateInput):
    pass


class NotAnEllipse(GazeGeomError, ValueError):
    pass


class DimensionMismatch(GazeGeomError, ValueError):
    pass


class LengthMismatch(GazeGeomError, ValueError):
    pass


class InvalidLayout(GazeGeomError, ValueError):
    pass


class TooShortSequence(GazeGeomError, ValueError):
    pass


class EmptyDataset(GazeGeomError, ValueError):
    pass


class InvalidConfig(GazeGeomError, ValueError):
    pass


class ArtifactError(GazeGeomError):
    """A CLI input artifact could not be used.

    ``path`` and ``field`` name the offending file and, where relevant, the
    key or column inside it.  ``stage`` is set when the error surfaced inside
    a multi-stage pipeline.
    """

    kind = "ArtifactError"

    def __init__(self, message, path=None, field=None, stage=None):
        super().__init__(message)
        self.path = None if path is None else str(path)
        self.field = field
        self.stage = stage

    def to_dict(self):
        out = {"error": self.kind, "message": str(self)}
        if self.stage is not None:
            out["stage"] = self.stage
        if self.path is not None:
            out["path"] = self.path
        if self.field is not None:
            out["field"] = self.field
        return out


class FileNotFound(ArtifactError):
    kind = "FileNotFound"


class ParseError(ArtifactError):
    kind = "ParseError"


class SchemaMismatch(ArtifactError):
    kind = "SchemaMismatch"


class EmptyPredictionWarning(UserWarning):
    """EFE was evaluated on a prediction with no foreground boundary."""
