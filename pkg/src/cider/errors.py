"""Exception types shared across the pipeline."""


class CiderError(Exception):
    """Base class for all library errors."""


# --- audio_io ---

class MalformedHeader(CiderError):
    """File is not a parseable RIFF/WAVE container."""


class UnsupportedEncoding(CiderError):
    """WAV encoding is not PCM 8/16/24/32-bit int or 32-bit float."""


class TruncatedData(CiderError):
    """Declared chunk length exceeds the bytes present in the file."""


# --- dsp ---

class EmptyClip(CiderError):
    """Operation requires a clip with at least one sample."""


class LengthMismatch(CiderError):
    """Segment length does not match sr * segment_seconds."""


class ShapeMismatch(CiderError):
    """Tensor/matrix shapes are incompatible for the operation."""


# --- autodiff / model ---

class NonScalarLoss(CiderError):
    """backward() requires a scalar (single-element) loss."""


class DegenerateBatch(CiderError):
    """Batch statistics undefined: fewer than two elements per channel."""


class InvalidConfig(CiderError):
    """Model or DSP configuration violates its invariants."""


class ShapeTooSmall(CiderError):
    """Input spatial dims too small for the configured stride plan."""


# --- trainer ---

class EmptyList(CiderError):
    """Operation requires a non-empty sequence."""


class NoPositives(CiderError):
    """Training split contains no positive examples; auto weights undefined."""


class NoNegatives(CiderError):
    """Training split contains no negative examples; auto weights undefined."""


class TooFewRuns(CiderError):
    """Aggregation requires at least two runs."""


# --- evaluator ---

class EmptyChunks(CiderError):
    """Majority vote requires at least one chunk logit."""


class SingleClass(CiderError):
    """Metric requires both classes to be present."""


class InvalidCounts(CiderError):
    """Confidence interval requires positive sample counts."""


# --- dataset folds / manifest ---

class MissingFile(CiderError):
    """A manifest row references a file that does not exist."""


class UnknownStratum(CiderError):
    """Stratum value outside the five recognised categories."""


class LabelStratumConflict(CiderError):
    """Participant label inconsistent with stratum (COVID-* implies positive)."""


class DuplicateRow(CiderError):
    """Identical manifest row appears more than once."""


class EmptyDataset(CiderError):
    """No participants available for fold assignment."""


class UnknownTask(CiderError):
    """Task index outside 1..4."""


class IoFailure(CiderError):
    """Filesystem write failed during corpus generation."""
