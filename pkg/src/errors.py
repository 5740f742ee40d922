"""
Exceptions raised by the birdsong pipeline.

Validation-style errors also derive from ValueError so callers that already
catch ValueError around service calls keep working.
"""


class BirdsongError(Exception):
    """Base class for all pipeline errors"""


class ConfigError(BirdsongError, ValueError):
    """Invalid or unresolvable pipeline configuration"""


# audio-io
class MalformedContainer(BirdsongError, ValueError):
    """RIFF/WAVE structure is broken (bad magic, chunk sizes, missing chunks)"""


class UnsupportedEncoding(BirdsongError, ValueError):
    """Audio encoding that cannot be decoded in-process"""


class ParseError(BirdsongError, ValueError):
    """Manifest does not match the expected schema"""


class DuplicateId(BirdsongError, ValueError):
    """Two manifest rows share the same recording id"""


class NetworkError(BirdsongError):
    """Archive could not be reached or returned an HTTP error"""


class ApiSchemaChanged(BirdsongError):
    """Archive JSON is missing fields the client relies on"""


# dsp-features
class EmptySignal(BirdsongError, ValueError):
    """Signal has no samples"""


class DegenerateBand(BirdsongError, ValueError):
    """Too few FFT bins between fmin and fmax for the requested mel filters"""


class TooShort(BirdsongError, ValueError):
    """Signal is shorter than the analysis frame"""


# augmentation
class SilentClip(BirdsongError, ValueError):
    """Clip has zero power so an SNR cannot be defined"""


# rebalance
class TooFewSamples(BirdsongError, ValueError):
    """A class has fewer samples than the resampling strategy needs"""


# classifiers
class EmptyTrainingSet(BirdsongError, ValueError):
    """Training set has no items"""


class ShapeMismatch(BirdsongError, ValueError):
    """Input tensor does not match the model's expected shape"""


class NonFiniteLoss(BirdsongError):
    """Training produced a NaN or infinite loss"""


class ArtifactError(BirdsongError, ValueError):
    """Model artifact cannot be read"""


class BadMagic(ArtifactError):
    """Bytes do not start with the model file magic"""


class UnsupportedVersion(ArtifactError):
    """Model file version is not understood by this build"""


class TruncatedPayload(ArtifactError):
    """Model file ends before its declared payload"""


# evaluation
class TooFewItems(BirdsongError, ValueError):
    """Not enough items or groups to build the requested folds"""


class LengthMismatch(BirdsongError, ValueError):
    """Predictions and labels have different lengths"""


class EmptyGroup(BirdsongError, ValueError):
    """A recording has no clip predictions to vote on"""


class ClassTooSmall(UserWarning):
    """A class has too few recordings to fill every split partition"""
