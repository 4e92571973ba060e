"""Exception hierarchy shared by all modules."""


class SoildNetError(Exception):
    pass


class ShapeError(SoildNetError, ValueError):
    """Raised when a tensor dimension does not match what an op expects.

    ``dim`` names the offending dimension (e.g. ``"channels"``).
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class DivisibilityError(SoildNetError, ValueError):
    pass


class SpecError(SoildNetError, ValueError):
    pass


class StrideArithmeticError(SpecError):
    pass


class LabelError(SoildNetError, ValueError):
    pass


class QuantizationError(SoildNetError, ValueError):
    pass


class AccumulatorOverflowError(QuantizationError):
    def __init__(self, layer, bits):
        super().__init__(f"accumulator overflow in layer {layer!r} ({bits}-bit accumulator)")
        self.layer = layer
        self.bits = bits


class TrainingDivergedError(SoildNetError, RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch
