class NoiseTraceError(Exception):
    pass


class AudioFormatError(NoiseTraceError):
    pass


class InputTooShortError(NoiseTraceError):
    pass


class AdapterError(NoiseTraceError):
    pass


class InvalidBandError(NoiseTraceError, ValueError):
    pass


class ConfigError(NoiseTraceError, ValueError):
    pass


class ModelFormatError(NoiseTraceError):
    pass


class IncompatibleVersionError(ModelFormatError):
    pass


class DataError(NoiseTraceError):
    pass


class ParseError(DataError):
    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class DivergenceError(NoiseTraceError):
    pass


class MetricUndefinedError(NoiseTraceError, ValueError):
    pass


class ComparisonError(NoiseTraceError):
    pass


class AttackError(NoiseTraceError):
    pass


class EncoderUnavailableError(AttackError):
    pass
