"""Exception hierarchy shared across the package."""


class AttenMixerError(Exception):
    """Base class for every error raised by this package."""


class NonFiniteError(AttenMixerError, ValueError):
    """A tensor value is NaN or infinite where finite values are required."""


class DegenerateNorm(AttenMixerError, ValueError):
    pass


class InvalidP(AttenMixerError, ValueError):
    pass


class NonFiniteGradient(NonFiniteError):
    pass


class NonFiniteUpdate(NonFiniteError):
    pass


class ShapeError(AttenMixerError, ValueError):
    pass


# data
class ParseError(AttenMixerError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyInput(AttenMixerError, ValueError):
    pass


class EmptyAfterFilter(AttenMixerError, ValueError):
    pass


class InvalidRule(AttenMixerError, ValueError):
    pass


# training / eval
class InvalidTarget(AttenMixerError, ValueError):
    pass


class VersionMismatch(AttenMixerError):
    pass


class CorruptCheckpoint(AttenMixerError):
    pass


class EmptyRanks(AttenMixerError, ValueError):
    pass


class VocabularyMismatch(AttenMixerError):
    pass


class UnknownItem(AttenMixerError, KeyError):
    def __init__(self, items):
        self.items = list(items)
        super().__init__(f"unknown item ids: {', '.join(map(str, self.items))}")

    def __str__(self):
        return self.args[0]


class ConfigError(AttenMixerError, ValueError):
    pass
