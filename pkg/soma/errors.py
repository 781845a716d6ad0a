'''
Every error the library raises on purpose.

DataError means the input was wrong (exit code 2 on the command line),
NumericError means the numbers went bad (exit code 3).
'''


class SomaError(Exception):
    exit_code = 2


class DataError(SomaError, ValueError):
    exit_code = 2


class NumericError(SomaError, ArithmeticError):
    exit_code = 3


class ShapeError(DataError):
    pass


class RankError(DataError):
    pass


class RangeError(DataError):
    pass


class LabelError(DataError):
    pass


class CacheMismatchError(DataError):
    pass


class SpectrumError(DataError):
    pass


class DomainError(DataError):
    pass


class ConfigError(DataError):
    pass


class LayerError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NonFiniteError(NumericError):
    pass


class ConvergenceError(NumericError):
    def __init__(self, off_norm: float, sweeps: int):
        super().__init__(f'svd did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:.3e})')
        self.off_norm = off_norm
        self.sweeps = sweeps

    def __reduce__(self):
        return type(self), (self.off_norm, self.sweeps)


class DivergenceError(NumericError):
    def __init__(self, step: int, loss: float):
        super().__init__(f'training diverged at step {step} (loss {loss})')
        self.step = step
        self.loss = loss

    def __reduce__(self):
        return type(self), (self.step, self.loss)


class FoundationError(NumericError):
    def __init__(self, accuracy: float, required: float):
        super().__init__(f'foundation model under-trained: accuracy {accuracy:.4f} < {required:.4f}')
        self.accuracy = accuracy
        self.required = required

    def __reduce__(self):
        return type(self), (self.accuracy, self.required)
