"""Exception hierarchy shared by every edgexc module."""


class EdgeXcError(Exception):
    """Base class for all library errors."""


class ShapeError(EdgeXcError, ValueError):
    """Two tensors (or a tensor and a spec) have incompatible shapes."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class GeometryError(EdgeXcError, ValueError):
    """A convolution/pooling geometry yields a non-positive output extent."""


class UnsupportedConfigError(EdgeXcError, ValueError):
    pass


class DegenerateVarianceError(EdgeXcError, ValueError):
    """Batch statistics requested over fewer than two elements per channel."""


class LabelError(EdgeXcError, ValueError):
    pass


class ArchError(EdgeXcError, ValueError):
    """Architecture description is inconsistent; ``path`` locates the offending layer."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class DataError(EdgeXcError, IOError):
    """Dataset files are missing, truncated or malformed."""


class NonFiniteLossError(EdgeXcError, FloatingPointError):
    def __init__(self, batch_index, value):
        super().__init__(f"non-finite loss {value!r} at batch {batch_index}")
        self.batch_index = batch_index
        self.value = value
