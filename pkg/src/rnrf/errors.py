"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument violates an operation's preconditions."""


class MeshError(ValueError):
    """A mesh is structurally invalid (bad indices, degenerate faces, empty)."""


class LoadError(RuntimeError):
    """A dataset, model file, or checkpoint failed to load."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite; carries a diagnostic dump path."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
