"""Error hierarchy with stable process exit codes.

Library code raises the specific subclasses below; ``app.main`` maps
whatever escapes a command to ``exc.exit_code``:

  0 ok, 1 internal, 2 usage/config, 3 I/O, 4 hash mismatch,
  5 checkpoint incompatibility, 6 missing entity.
"""


class RotsetError(Exception):
    """Base class for every error raised by rotset."""

    exit_code = 1


# ---- Math / library errors ----

class DegenerateInput(RotsetError):
    """A normalization divided by a (near-)zero norm."""


class BadCount(RotsetError):
    """A requested count is outside its valid range."""


class ShapeMismatch(RotsetError):
    """Operands of a tensor op have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NotScalar(RotsetError):
    """backward() was called on a tensor with more than one element."""


class MissingGrad(RotsetError):
    """An optimizer step found a parameter without a gradient."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"parameter '{name}' has no gradient")


class GeneratorPanic(RotsetError):
    """The object generator could not produce an acceptable object."""


class InsufficientData(RotsetError):
    """A dataset is too small for the requested batch."""


class InsufficientReferences(RotsetError):
    """An object has fewer references than the requested k."""

    exit_code = 2  # a --k larger than the pool is a usage error


class BadLayer(RotsetError):
    """A transformer layer index is out of range."""

    exit_code = 2


class EmptyInput(RotsetError):
    """A metric was asked to summarize an empty list."""


# ---- Command-level errors ----

class ConfigError(RotsetError):
    exit_code = 2


class IoFailure(RotsetError):
    exit_code = 3

    def __init__(self, path, cause):
        self.path = str(path)
        self.cause = cause
        super().__init__(f"{self.path}: {cause}")


class DatasetCorrupt(IoFailure):
    """The dataset file parsed but failed a content check."""


class HashMismatch(RotsetError):
    exit_code = 4


class CheckpointIncompatible(RotsetError):
    exit_code = 5


class MissingEntity(RotsetError):
    exit_code = 6
