"""Exception hierarchy shared by the library modules."""


class JumpLDPError(Exception):
    """Base class for all errors raised by :mod:`jumpldp`."""


class CramerViolation(JumpLDPError):
    """``K(lambda)`` is not finite at the requested tilt."""

    def __init__(self, lam, mark):
        self.lam = lam
        self.mark = mark
        super().__init__(f"Cramer condition violated at lambda={lam!r} (mark u={mark!r})")


class CumulantOverflow(JumpLDPError):
    """The exponential term of the cumulant overflows."""

    def __init__(self, lam):
        self.lam = lam
        super().__init__(f"cumulant overflow at lambda={lam!r}")


class ConditionViolation(JumpLDPError):
    """A coefficient exceeded its linear-growth envelope in debug mode."""


class FluidExplosion(JumpLDPError):
    """A deterministic path left the representable range."""


class NotPoissonType(JumpLDPError):
    """The model does not satisfy the pure-jump floor conditions."""

    def __init__(self, clause, detail=""):
        self.clause = clause
        msg = f"not Poisson-type: clause {clause!r} fails"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class PathExplosion(JumpLDPError):
    """A simulated path overflowed."""

    def __init__(self, step):
        self.step = step
        super().__init__(f"path explosion at step {step}")


class ConfigError(JumpLDPError):
    """An experiment configuration failed validation."""
