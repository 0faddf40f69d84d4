"""Exception hierarchy shared across the fuzzer."""


class CivFuzzError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(CivFuzzError):
    """Interface or scenario document is not structurally valid."""


class ValidationError(CivFuzzError):
    """Document parsed but violates an invariant.

    ``path`` points at the offending element, e.g. ``functions[3].params[0]``.
    """

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class FrameError(CivFuzzError):
    """Short read or bad length prefix on the wire."""


class CodecError(CivFuzzError):
    """Frame decoded to an unknown tag or malformed payload."""


class VersionMismatch(CivFuzzError):
    """Adapter speaks a different protocol version."""


class HandshakeTimeout(CivFuzzError):
    """No Ready event arrived within the configured timeout."""


class ProtocolError(CivFuzzError):
    """Adapter violated the event/command alternation contract."""


class AdapterLaunchError(CivFuzzError):
    """Target adapter could not be started."""


class ConfigError(CivFuzzError):
    """Campaign configuration is invalid."""


class UnattributableStack(CivFuzzError):
    """No stack frame matches any component label."""


class ReplayDivergence(CivFuzzError):
    """Crash stopped reproducing in the middle of minimization."""


class ScenarioError(CivFuzzError):
    """Simulated scenario file is malformed or inconsistent."""
