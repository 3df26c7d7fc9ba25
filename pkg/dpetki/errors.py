# Exception hierarchy shared by every stage; exit_code is what the CLI returns.


class DpetError(Exception):
    """Base class for all dpetki errors."""
    exit_code = 2


class VolumeIOError(DpetError, OSError):
    """Reading or writing a file failed; the message names the path."""

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = str(reason)
        super().__init__(f"{self.path}: {self.reason}")


class VolumeFormatError(DpetError, ValueError):
    """A volume file or its sidecar is malformed."""


class BadMagic(VolumeFormatError):
    """The NIfTI magic string is not 'n+1'."""


class UnsupportedDatatype(VolumeFormatError):
    """The NIfTI datatype is not float32, int16 or uint16."""


class Truncated(VolumeFormatError):
    """The payload is shorter than the header declares."""


class SchedulingMismatch(VolumeFormatError):
    """The frame schedule length differs from the number of frames."""


class EmptySchedule(DpetError, ValueError):
    """A frame schedule has no frames."""


class NonMonotonicTimes(DpetError, ValueError):
    """Sample times are not strictly increasing."""


class ParseError(DpetError, ValueError):
    """A CSV row could not be parsed."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class GridMismatch(DpetError, ValueError):
    """Two arrays or curves are not on the same grid."""


class DegenerateInput(DpetError, ValueError):
    """Input carries no usable signal."""


class InsufficientPoints(DpetError, ValueError):
    """Too few samples after t* for a linear fit."""


class LengthMismatch(DpetError, ValueError):
    """Two metric inputs differ in length."""


class CropOutOfBounds(DpetError, ValueError):
    """A crop box reaches outside the volume."""


class ConfigError(DpetError, ValueError):
    """A configuration is valid on its own but unusable at run time."""


class EmptySegmentation(DpetError, ValueError):
    """No carotid island survived segmentation."""
    exit_code = 3
