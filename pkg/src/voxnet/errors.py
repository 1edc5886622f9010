"""Exception hierarchy shared by every voxnet module."""


class VoxnetError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class GeometryError(VoxnetError, ValueError):
    """Shapes, extents or kernel placements that cannot chain."""


class CorruptedTraceError(VoxnetError):
    """A forward trace that does not match the model or the call."""


class UnsupportedCompositionError(VoxnetError):
    """An operation requested outside its supported composition."""


class DegenerateInputError(VoxnetError, ValueError):
    """Empty data sets, single-sample batches in train mode, empty meshes."""


class InvalidLabelError(VoxnetError, ValueError):
    pass


class InvalidPlanError(VoxnetError, ValueError):
    pass


class InvalidConfigError(VoxnetError, ValueError):
    pass


class InvalidShiftError(VoxnetError, ValueError):
    pass


class InvalidClassError(VoxnetError, ValueError):
    pass


class InvalidSliceError(VoxnetError, ValueError):
    pass


class SelectionError(VoxnetError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class UndefinedMetricError(VoxnetError, ValueError):
    pass


class TransferError(VoxnetError):
    pass


class FormatError(VoxnetError, ValueError):
    """Malformed binary/text file. ``offset`` is the byte offset of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(VoxnetError, ValueError):
    """Malformed text manifest or config; carries the 1-based line number."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line
        self.path = path


class IntegrityError(VoxnetError, ValueError):
    """Referenced data missing or inconsistent (indices, blobs, counts)."""


class StratificationWarning(UserWarning):
    pass


class ParityWarning(UserWarning):
    pass


class StagnationWarning(UserWarning):
    pass


class UndefinedMetricWarning(UserWarning):
    pass
