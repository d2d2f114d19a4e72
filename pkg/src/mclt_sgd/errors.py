"""Exception hierarchy shared by every module."""


class MCLTError(Exception):
    """Base class for toolkit errors."""


class NotSymmetric(MCLTError):
    pass


class NotPositiveDefinite(MCLTError):
    pass


class NonFiniteInput(MCLTError):
    pass


class InvalidParams(MCLTError):
    pass


class DimTooLarge(MCLTError):
    pass


class QuadratureNotConverged(MCLTError):
    pass


class NumericallyUnstable(MCLTError):
    pass


class SingularTail(MCLTError):
    pass


class InvalidMoment(MCLTError):
    pass


class SupportTooLarge(MCLTError):
    pass


class DivergenceDetected(MCLTError):
    def __init__(self, step, norm):
        super().__init__(f"residual norm {norm:.3e} exceeded 1e8 at step {step}")
        self.step = step
        self.norm = norm


class IndexOrder(MCLTError):
    pass


class HorizonTooLarge(MCLTError):
    pass


class InvalidSmoothness(MCLTError):
    pass


class StepTooLarge(MCLTError):
    pass


class DimTooLargeForQuadrature(MCLTError):
    pass


class ReferenceUnavailable(MCLTError):
    pass


class InsufficientReplications(MCLTError):
    pass


class ConfigInvalid(MCLTError):
    pass


class BoundViolated(MCLTError):
    pass


class EngineError(MCLTError):
    pass
