"""Exception types shared by every module.

Each error carries a short machine-readable ``code`` (``"PERM"``,
``"OVERSIZE"``, ...) so callers can branch without string matching.
"""


class AcqError(Exception):
    code = "ERROR"

    def __init__(self, code=None, message=""):
        if code is not None:
            self.code = code
        self.message = message
        super().__init__(f"{self.code}: {message}" if message else self.code)


class FrameError(AcqError):
    """Malformed, truncated or oversize wire frame."""


class AccessError(AcqError):
    """Filesystem access refused or impossible (PERM, NOT_FOUND, NOT_DIR, ...)."""


class RemoteError(AccessError):
    """A non-OK status answered by the device."""


class PathError(AccessError):
    pass


class DeltaError(AcqError):
    pass


class AttrError(AcqError):
    pass


class ContainerError(AcqError):
    pass


class MalformedContainer(ContainerError):
    """Structural damage; ``offset`` is the start of the section that failed to parse."""

    def __init__(self, offset, section, message=""):
        self.offset = offset
        self.section = section
        super().__init__("MALFORMED", f"{section} at offset {offset}: {message}")


class PolicyError(AcqError):
    pass


class FixtureError(AcqError):
    pass


class ParseError(AcqError):
    def __init__(self, line, message=""):
        self.line = line
        super().__init__("PARSE", f"line {line}: {message}")


class AcquisitionError(AcqError):
    pass
