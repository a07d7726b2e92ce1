"""Exception hierarchy shared by all pipeline stages."""


class MasfuzzError(Exception):
    """Base class for errors raised by masfuzz."""


class EmptyModelError(MasfuzzError):
    """The scanned tree exposes no public API, so no campaign can run."""


class TypeNormalizationError(MasfuzzError, ValueError):
    def __init__(self, raw: str, reason: str = "unparsable type spelling"):
        super().__init__(f"{reason}: {raw!r}")
        self.raw = raw


class CoverageFormatError(MasfuzzError, ValueError):
    def __init__(self, message: str, excerpt: str = ""):
        super().__init__(f"{message} (excerpt: {excerpt[:200]!r})" if excerpt else message)
        self.excerpt = excerpt


class UnknownApiError(MasfuzzError, KeyError):
    pass


class OracleError(MasfuzzError):
    """An oracle call failed or returned a reply that does not conform."""


class StateTransitionError(MasfuzzError):
    pass


class PreconditionError(MasfuzzError, ValueError):
    pass


class BudgetExhausted(MasfuzzError):
    """Raised when a scheduling decision is requested with no budget left."""


class ExecutorError(MasfuzzError):
    pass


class DependencyError(MasfuzzError):
    """A pipeline stage was invoked before the stage it depends on."""

    def __init__(self, stage: str, requires: str, missing: str):
        super().__init__(
            f"stage '{stage}' requires '{requires}' to have run first (missing {missing})"
        )
        self.stage = stage
        self.requires = requires


class ConfigError(MasfuzzError, ValueError):
    pass
