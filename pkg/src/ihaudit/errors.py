"""Exception hierarchy shared by every module.

Each error carries a stable ``code`` so the CLI can emit machine-readable
failures.
"""


class IhaError(Exception):
    code = "error"


class NonFiniteInput(IhaError, ValueError):
    code = "non_finite_input"


class DimensionMismatch(IhaError, ValueError):
    code = "dimension_mismatch"


class IllConditioned(IhaError, ValueError):
    code = "ill_conditioned"


class IndefiniteOperator(IhaError, ArithmeticError):
    code = "indefinite_operator"


class DivergedNumerically(IhaError, ArithmeticError):
    code = "diverged_numerically"


class EmptyDataset(IhaError, ValueError):
    code = "empty_dataset"


class HessianTooLarge(IhaError, MemoryError):
    code = "hessian_too_large"


class FormatError(IhaError, ValueError):
    code = "format_error"


class InsufficientData(IhaError, ValueError):
    code = "insufficient_data"


class InsufficientSamples(IhaError, ValueError):
    code = "insufficient_samples"


class InvalidBatch(IhaError, ValueError):
    code = "invalid_batch"


class UnstableRegime(IhaError, ValueError):
    code = "unstable_regime"


class MissingContext(IhaError, ValueError):
    code = "missing_context"


class InsufficientReferences(IhaError, ValueError):
    code = "insufficient_references"


class DegenerateLabels(IhaError, ValueError):
    code = "degenerate_labels"


class IndexMismatch(IhaError, ValueError):
    code = "index_mismatch"


class MissingArtifact(IhaError, FileNotFoundError):
    code = "missing_artifact"

    def __init__(self, path):
        super().__init__(f"missing artifact: {path}")
        self.path = str(path)


class IoError(IhaError, OSError):
    code = "io_error"
