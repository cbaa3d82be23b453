"""Exception hierarchy shared by all mgll modules."""


class MGLLError(Exception):
    """Base class for every domain error raised by this package."""


class ConfigError(MGLLError):
    """Invalid user-supplied configuration (maps to CLI exit code 2)."""


# --- numerics ---------------------------------------------------------------

class ZeroRow(MGLLError):
    """A matrix row that must be normalized has (near-)zero Euclidean norm."""


class DimensionMismatch(MGLLError):
    """Operand shapes are incompatible for the requested operation."""


class EmptyInput(MGLLError):
    """An operation received an empty vector where at least one entry is required."""


class ShapeMismatch(MGLLError):
    """Two arrays that must share a shape do not."""


# --- annotations ------------------------------------------------------------

class AllZeroCounts(MGLLError):
    """A sample's co-occurrence counts sum to zero and cannot be normalized."""

    def __init__(self, sample_id: str):
        super().__init__(f"all co-occurrence counts are zero for sample {sample_id!r}")
        self.sample_id = sample_id


class LevelOutOfRange(MGLLError):
    """A granularity level index does not exist in the schema."""


class ParseError(MGLLError):
    """A manifest or embedding file could not be parsed."""


class SchemaViolation(MGLLError):
    """Manifest contents violate the annotation schema invariants."""


class MissingEmbeddingFile(MGLLError):
    """A manifest references an embedding file that does not exist."""

    def __init__(self, path: str):
        super().__init__(f"referenced embedding file not found: {path}")
        self.path = path


class InvalidSpec(ConfigError):
    """Synthetic dataset parameters are out of their legal ranges."""


# --- losses -----------------------------------------------------------------

class EmptyBatch(MGLLError):
    """An alignment batch contains no samples."""


class MultiLabelAmbiguity(MGLLError):
    """Strict CLIP evaluation hit a sample with more than one label."""


class SingleGranularity(MGLLError):
    """The smooth-KL loss needs at least two granularity levels."""


class LevelMismatch(MGLLError):
    """Per-level distributions cannot be matched to a common dimension."""


# --- gradients --------------------------------------------------------------

class NonFiniteLoss(MGLLError):
    """A loss evaluation produced NaN or infinity."""


# --- trainer ----------------------------------------------------------------

class DivergenceDetected(MGLLError):
    """Gradient descent produced a non-finite loss value."""


class DegenerateCentroid(MGLLError):
    """The weighted sum of text directions vanishes; no alignment target exists."""


# --- metrics ----------------------------------------------------------------

class DegenerateLabels(MGLLError):
    """ROC-AUC needs at least one positive and one negative label."""


class NoPositives(MGLLError):
    """Average precision needs at least one positive label."""


class AllCategoriesDegenerate(MGLLError):
    """No category in the score matrix supports AUC computation."""
