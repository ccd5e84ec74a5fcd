"""This module includes exceptions used in the package."""


class DDLError(Exception):
    """Base class for every error raised by the package."""


class InvalidBox(DDLError, ValueError):
    """Box coordinates violate x1 < x2 and y1 < y2 or are not finite."""


class DegenerateResult(DDLError):
    """A mapped box collapsed to zero area after clamping to the frame."""


class InvalidCount(DDLError, ValueError):
    """A view count or other cardinality argument is out of range."""


class UnsupportedImage(DDLError):
    """The raster could not be read or has zero size."""


class TransportError(DDLError):
    """The model endpoint could not be reached after all retries."""


class ModelRefusal(DDLError):
    """The model returned an empty completion."""


class ParseError(DDLError):
    """Model output could not be parsed.

    The raw completion is kept on the exception so callers can log it.
    """

    def __init__(self, message, raw=None):
        """Initialize the error.

        :param message: human readable cause
        :param raw:     raw completion text
        """
        super(ParseError, self).__init__(message)
        self.raw = raw


class TagMissing(ParseError):
    """The meta-optimizer completion lacks <IMPROVED_PROMPT> tags."""


class VariantCountMismatch(ParseError):
    """The meta-optimizer returned a wrong number of seed variants."""


class ConfigError(DDLError, ValueError):
    """Run or consensus configuration is inconsistent."""


class InsufficientHistory(DDLError):
    """The prompt history is too short for the requested operation."""


class InsufficientData(DDLError, ValueError):
    """Too few (or degenerate) samples for a density estimate."""


class DegenerateInput(DDLError, ValueError):
    """Calibration input is empty."""


class ManifestError(DDLError):
    """A dataset manifest line is malformed."""

    def __init__(self, message, line=None, cause=None):
        """Initialize the error.

        :param message: human readable cause
        :param line:    1-based manifest line number
        :param cause:   short machine readable cause
        """
        if line is not None:
            message = 'line {0}: {1}'.format(line, message)
        super(ManifestError, self).__init__(message)
        self.line = line
        self.cause = cause
