"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ValidationError -> 2,
NumericalError -> 3, ResourceError -> 4.
"""


class ToolkitError(Exception):
    """Base class for all gffpin errors."""


class ValidationError(ToolkitError):
    """Bad inputs: malformed kernels, configs, out-of-domain arguments."""


class NumericalError(ToolkitError):
    """A solve or iteration failed to reach its accuracy target."""


class ResourceError(ToolkitError):
    """The request exceeds a hard size limit (enumeration, window, memory)."""


class WindowTooSmall(NumericalError):
    """A convolution window dropped more probability mass than allowed."""

    def __init__(self, radius, captured):
        self.radius = radius
        self.captured = captured
        super().__init__(
            f"window radius {radius} captures only {captured:.15f} of the mass"
        )
