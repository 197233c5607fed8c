"""Exception hierarchy shared across the pipeline."""


class HvladError(Exception):
    """Base class for every error raised by this package."""


# audio / dsp
class AudioError(HvladError):
    pass


class UnsupportedFormat(AudioError):
    pass


class EmptyAudio(AudioError):
    pass


class TooShort(AudioError):
    pass


# numerics
class ShapeMismatch(HvladError, ValueError):
    pass


class NonFinite(HvladError, FloatingPointError):
    pass


class LabelOutOfRange(HvladError, ValueError):
    pass


# model / checkpoints
class InvalidConfig(HvladError, ValueError):
    pass


class MissingTap(HvladError, ValueError):
    pass


class ConfigMismatch(HvladError):
    pass


class CheckpointFormatError(HvladError):
    pass


# corpus / manifest
class CorpusError(HvladError):
    pass


class EmptySpeaker(CorpusError):
    pass


class EmptyCorpus(CorpusError):
    pass


class TooFewSpeakers(CorpusError):
    pass


class SizeMismatch(HvladError, ValueError):
    pass


class ConverterFailed(HvladError):
    def __init__(self, message, returncode=None, stderr=""):
        super().__init__(message)
        self.returncode = returncode
        self.stderr = stderr


class BadOutput(HvladError):
    pass


# reporting
class EmptySeries(HvladError, ValueError):
    pass


class TooFewValues(HvladError, ValueError):
    pass
