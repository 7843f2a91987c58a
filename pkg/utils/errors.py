"""
Exception hierarchy shared by the engine, the data pipeline and the runtime
"""


class XModalError(Exception):
    """
    Root of every error raised on purpose by this code base
    """


class DimensionError(XModalError, ValueError):
    """
    Operand shapes do not line up
    """

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        super(DimensionError, self).__init__(
            '{}: incompatible shapes {}'.format(op, ' vs '.join(str(s) for s in self.shapes)))


class ContractError(XModalError, ValueError):
    pass


class ParameterError(XModalError, ValueError):
    pass


class DegenerateError(XModalError, ValueError):
    pass


class NumericError(XModalError, ArithmeticError):
    pass


class StateError(XModalError, RuntimeError):
    pass


class ConvergenceError(XModalError, RuntimeError):

    def __init__(self, message, last_delta):
        self.last_delta = last_delta
        super(ConvergenceError, self).__init__('{} (last delta {:.3e})'.format(message, last_delta))


class FormatError(XModalError, ValueError):

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = '{} at byte offset {}'.format(message, offset)
        super(FormatError, self).__init__(message)


class ConfigError(XModalError, ValueError):

    def __init__(self, key, message):
        self.key = key
        super(ConfigError, self).__init__('config key "{}": {}'.format(key, message))


class DivergenceError(XModalError, RuntimeError):

    def __init__(self, message, checkpoint=None):
        self.checkpoint = checkpoint
        super(DivergenceError, self).__init__(message)
