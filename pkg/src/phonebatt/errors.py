"""Exception hierarchy.

Everything raised on purpose by the package derives from ``PhonebattError`` so
the CLI can map it to an exit code.
"""


class PhonebattError(Exception):
    """Base class for package errors."""


# numerics
class NonMonotoneAbscissa(PhonebattError, ValueError):
    pass


class TooFewKnots(PhonebattError, ValueError):
    pass


class StepUnderflow(PhonebattError, RuntimeError):
    pass


class DegenerateBounds(PhonebattError, ValueError):
    pass


class FitDiverged(PhonebattError, RuntimeError):
    pass


class InsufficientSamples(PhonebattError, ValueError):
    pass


class EmptySamples(PhonebattError, ValueError):
    pass


# battery
class CapacityExhausted(PhonebattError, ValueError):
    pass


class NegativeEffectiveVoltage(PhonebattError, RuntimeError):
    pass


class InvalidParameters(PhonebattError, ValueError):
    pass


# usage
class InvalidMix(PhonebattError, ValueError):
    pass


class NonPositiveDwell(PhonebattError, ValueError):
    pass


# simulation
class AllRunsCensored(PhonebattError, RuntimeError):
    pass


class SimulationFault(PhonebattError, RuntimeError):
    """A run-level failure inside the trajectory kernel."""


# identification
class SchemaError(PhonebattError, ValueError):
    pass


class NonMonotoneTime(PhonebattError, ValueError):
    pass


class NoQuasiStaticSegment(PhonebattError, ValueError):
    pass


class NoStepFound(PhonebattError, ValueError):
    pass


class NoRestSegment(PhonebattError, ValueError):
    pass


# analysis
class DegenerateVariance(PhonebattError, RuntimeError):
    pass


class NoOverlap(PhonebattError, ValueError):
    pass


# configuration
class ParseError(PhonebattError, ValueError):
    pass


class ValidationError(PhonebattError, ValueError):
    """Carries every violation found, each as ``(path, message)``."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [f"{path}: {msg}" for path, msg in self.violations]
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))
