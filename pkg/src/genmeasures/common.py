# Definitions shared by the measure engine, the zoo builder and the file
# formats: default settings and the exception hierarchy.

from typing import Optional, Sequence

# Noise stability defaults
DEFAULT_NU: float = 0.01
DEFAULT_NOISE_SAMPLES: int = 16

# Margin solver defaults
DEFAULT_MARGIN_STEPS: int = 30
DEFAULT_MARGIN_STEP_SIZE: float = 0.25
DEFAULT_MARGIN_RESTARTS: int = 2
DEFAULT_MARGIN_TOLERANCE: float = 1e-3
DEFAULT_BISECTION_STEPS: int = 12
DEFAULT_INITIAL_RADIUS: float = 10.0
DEFAULT_MARGIN_SAMPLE_SIZE: int = 256
# Gradient differences below this norm carry no boundary direction
DEGENERATE_GRADIENT_NORM: float = 1e-12

# Power method defaults
DEFAULT_PM_ITERS: int = 200
DEFAULT_PM_TOLERANCE: float = 1e-5
PM_RESEEDS: int = 3

# Evaluation defaults
DEFAULT_MAX_CONDITION_SIZE: int = 2

# Training defaults
DEFAULT_TARGET_TRAIN_ACCURACY: float = 0.99

# Version written into model, dataset and manifest files
FORMAT_VERSION: int = 1


class GenMeasuresError(Exception):
    """Base class of every error raised by this package."""


class ShapeMismatchError(GenMeasuresError, ValueError):
    def __init__(
        self,
        layer_index: int,
        expected: Sequence[int],
        found: Sequence[int],
        msg: str = "",
    ) -> None:
        self.layer_index = layer_index
        self.expected = tuple(expected)
        self.found = tuple(found)
        super().__init__(
            f"shape mismatch at layer {layer_index}: expected "
            f"{self.expected}, found {self.found}"
            + (f" ({msg})" if msg else "")
        )


class InvalidNetworkError(GenMeasuresError, ValueError):
    def __init__(self, msg: str, layer_index: Optional[int] = None) -> None:
        self.layer_index = layer_index
        loc = f"layer {layer_index}: " if layer_index is not None else ""
        super().__init__(loc + msg)


class InvalidLayerIndexError(GenMeasuresError, IndexError):
    def __init__(self, index: object, num_affine: int) -> None:
        self.index = index
        self.num_affine = num_affine
        super().__init__(
            f"invalid layer index {index!r}: network has {num_affine} "
            "affine layers"
        )


class InvalidInputError(GenMeasuresError, ValueError):
    pass


class InvalidDatasetError(GenMeasuresError, ValueError):
    pass


class InvalidConfigError(GenMeasuresError, ValueError):
    pass


class MeasureError(GenMeasuresError):
    """Raised when a measure cannot be evaluated on a network."""


class ZeroPreActivationError(MeasureError):
    def __init__(self, example: Optional[int], layer: int) -> None:
        self.example = example
        self.layer = layer
        super().__init__(
            f"pre-activation of layer {layer} is exactly zero "
            f"(example {example})"
        )


class ZeroLogitsError(MeasureError):
    def __init__(self, example: Optional[int]) -> None:
        self.example = example
        super().__init__(f"logits are exactly zero (example {example})")


class NonPositiveBetaError(MeasureError):
    def __init__(self, example: int, layer: int, value: float) -> None:
        self.example = example
        self.layer = layer
        self.value = value
        super().__init__(
            f"noise stability of layer {layer} for example {example} is "
            f"{value}, its logarithm is undefined"
        )


class DegenerateGradientError(MeasureError):
    pass


class NonPositiveMarginError(MeasureError):
    def __init__(self, value: float) -> None:
        self.value = value
        super().__init__(f"aggregated output margin {value} is not positive")


class ZeroSpectralNormError(MeasureError):
    def __init__(self, layer: int) -> None:
        self.layer = layer
        super().__init__(f"affine layer {layer} has zero spectral norm")


class DegenerateZooError(GenMeasuresError, ValueError):
    pass


class NonDiscreteHyperparameterError(GenMeasuresError, ValueError):
    pass


class MissingMeasureValuesError(GenMeasuresError, KeyError):
    def __init__(self, measure: str, model_ids: Sequence[str]) -> None:
        self.measure = measure
        self.model_ids = tuple(model_ids)
        super().__init__(
            f"measure {measure!r} has no value for models: "
            + ", ".join(self.model_ids)
        )

    def __str__(self) -> str:
        return str(self.args[0])


class UnknownMeasureError(GenMeasuresError, ValueError):
    def __init__(self, names: Sequence[str]) -> None:
        self.names = tuple(names)
        super().__init__("unknown measure names: " + ", ".join(self.names))


class FileFormatError(GenMeasuresError, ValueError):
    pass


class ChecksumMismatchError(FileFormatError):
    def __init__(self, path: str, expected: int, found: int) -> None:
        self.expected = expected
        self.found = found
        super().__init__(
            f"{path}: payload checksum {found:#018x} does not match "
            f"stored {expected:#018x}"
        )


class UnknownLayerTypeError(FileFormatError):
    def __init__(self, path: str, layer_type: str) -> None:
        self.layer_type = layer_type
        super().__init__(f"{path}: unknown layer type {layer_type!r}")


class VersionMismatchError(FileFormatError):
    def __init__(self, path: str, found: object, expected: int) -> None:
        self.found = found
        self.expected = expected
        super().__init__(
            f"{path}: format version {found!r}, expected {expected}"
        )


class HeaderValidationError(FileFormatError):
    pass
