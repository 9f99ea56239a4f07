# Noise stability of a network: how much Gaussian noise injected into the
# input of an affine layer (or into the network input) grows by the time it
# reaches that layer's pre-activation (or the logits), and the four dataset
# measures built from it.
#
# Noise for an example is drawn from a counter-based stream keyed on the
# global seed, a hash of the example contents and the layer index, so the
# aggregates do not depend on dataset order, duplication or worker count.

import hashlib
import math
from dataclasses import dataclass
from functools import partial
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .common import (
    DEFAULT_NOISE_SAMPLES,
    DEFAULT_NU,
    InvalidConfigError,
    NonPositiveBetaError,
    ZeroLogitsError,
    ZeroPreActivationError,
)
from .network import (
    ActivationTrace,
    LabeledDataset,
    Network,
    affine_linear_map,
    forward,
    forward_batch,
    sq_norm,
)
from .parallel import parallel_map

MEAN_NOISE_STABILITY = "mean-noise-stability"
GEOMETRIC_MEAN_NOISE_STABILITY = "geometric-mean-noise-stability"
MEAN_NOISE_STABILITY_OUTPUT = "mean-noise-stability-output"
GEOMETRIC_MEAN_NOISE_STABILITY_OUTPUT = "geometric-mean-noise-stability-output"

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NoiseConfig:
    nu: float = DEFAULT_NU
    num_noise_samples: int = DEFAULT_NOISE_SAMPLES
    seed: int = 0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.nu) and self.nu > 0):
            raise InvalidConfigError(f"nu must be positive, got {self.nu}")
        if self.num_noise_samples < 1:
            raise InvalidConfigError(
                f"num_noise_samples must be >= 1, got {self.num_noise_samples}"
            )

    def to_dict(self) -> dict[str, object]:
        return {
            "nu": self.nu,
            "num_noise_samples": self.num_noise_samples,
            "seed": self.seed,
        }


@dataclass(frozen=True, eq=False)
class NoiseStabilityResult:
    per_layer: NDArray[np.float64]  # (n, l); (n, 1) for output variants
    aggregate: float
    measure_name: str

    @property
    def per_layer_mean(self) -> list[float]:
        """Mean beta of every layer across examples."""
        n = self.per_layer.shape[0]
        return [math.fsum(col.tolist()) / n for col in self.per_layer.T]


def example_key(x: NDArray) -> int:
    """64-bit content hash of one example."""
    x = np.ascontiguousarray(x)
    h = hashlib.blake2b(x.dtype.str.encode("ascii"), digest_size=8)
    h.update(x.tobytes())
    return int.from_bytes(h.digest(), "little")


def noise_rng(seed: int, key: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence([seed & _MASK64, key & _MASK64, stream])
    return np.random.Generator(np.random.Philox(ss))


def draw_noise(cfg: NoiseConfig, key: int, j: int, dim: int) -> NDArray:
    """Standard normal draws Y of shape (num_noise_samples, dim)."""
    rng = noise_rng(cfg.seed, key, j)
    return rng.standard_normal((cfg.num_noise_samples, dim))


def _check_draws(draws: NDArray, dim: int) -> NDArray:
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim == 1:
        draws = draws[None]
    if draws.ndim != 2 or draws.shape[1] != dim or draws.shape[0] < 1:
        raise InvalidConfigError(
            f"noise draws of shape {draws.shape}, expected (samples, {dim})"
        )
    return draws


def beta_layer(
    net: Network,
    trace: ActivationTrace,
    j: int,
    cfg: NoiseConfig = NoiseConfig(),
    draws: Optional[NDArray] = None,
    example: Optional[int] = None,
) -> float:
    """Noise stability of affine layer j at the traced input: the mean over
    draws Y of ||z'_j - z_j||^2 / (nu ||z_j||^2) where a_{j-1} is perturbed
    by sqrt(nu / h) ||a_{j-1}|| Y.  ``draws`` overrides the seeded noise;
    ``example`` only labels errors."""
    net.check_affine_index(j)
    z = trace.pre_activations[j - 1]
    z_norm_sq = sq_norm(z)
    if z_norm_sq == 0:
        raise ZeroPreActivationError(example, j)
    a = trace.activations[j - 1]
    a_norm_sq = sq_norm(a)
    if a_norm_sq == 0:
        # nothing to perturb
        return 0.0
    h = a.size
    if draws is None:
        draws = draw_noise(cfg, example_key(trace.activations[0]), j, h)
    draws = _check_draws(draws, h)
    scale = math.sqrt(cfg.nu / h) * math.sqrt(a_norm_sq)
    noise = (scale * draws).reshape((draws.shape[0],) + a.shape)
    # z'_j - z_j is the linear part of layer j applied to the noise
    diff = affine_linear_map(net, j, noise).reshape(draws.shape[0], -1)
    ratios = np.sum(np.square(diff, dtype=np.float64), axis=1)
    return math.fsum(ratios.tolist()) / (
        draws.shape[0] * cfg.nu * z_norm_sq
    )


def beta_output(
    net: Network,
    trace: ActivationTrace,
    cfg: NoiseConfig = NoiseConfig(),
    draws: Optional[NDArray] = None,
    example: Optional[int] = None,
) -> float:
    """Noise stability of the logits with respect to the input."""
    f = trace.output.astype(np.float64)
    f_norm_sq = sq_norm(f)
    if f_norm_sq == 0:
        raise ZeroLogitsError(example)
    x = trace.activations[0]
    x_norm_sq = sq_norm(x)
    if x_norm_sq == 0:
        return 0.0
    d = x.size
    if draws is None:
        draws = draw_noise(cfg, example_key(x), 1, d)
    draws = _check_draws(draws, d)
    scale = math.sqrt(cfg.nu / d) * math.sqrt(x_norm_sq)
    xs = x.astype(np.float64)[None] + (scale * draws).reshape(
        (draws.shape[0],) + x.shape
    )
    out = forward_batch(net, xs)[-1].astype(np.float64)
    ratios = np.sum(np.square(out - f[None]), axis=1)
    return math.fsum(ratios.tolist()) / (draws.shape[0] * cfg.nu * f_norm_sq)


def _example_layer_betas(
    net: Network, cfg: NoiseConfig, item: tuple[int, NDArray]
) -> list[float]:
    i, x = item
    trace = forward(net, x)
    return [
        beta_layer(net, trace, j, cfg, example=i)
        for j in range(1, net.num_affine + 1)
    ]


def _example_output_beta(
    net: Network, cfg: NoiseConfig, item: tuple[int, NDArray]
) -> list[float]:
    i, x = item
    return [beta_output(net, forward(net, x), cfg, example=i)]


def layer_beta_matrix(
    net: Network,
    data: LabeledDataset,
    cfg: NoiseConfig = NoiseConfig(),
    workers: int = 1,
) -> NDArray[np.float64]:
    """beta_j(x_i) for every example and affine layer, shape (n, l)."""
    rows = parallel_map(
        partial(_example_layer_betas, net, cfg),
        enumerate(data.inputs),
        workers,
    )
    return np.array(rows, dtype=np.float64).reshape(data.n, net.num_affine)


def output_beta_matrix(
    net: Network,
    data: LabeledDataset,
    cfg: NoiseConfig = NoiseConfig(),
    workers: int = 1,
) -> NDArray[np.float64]:
    """beta_output(x_i) for every example, shape (n, 1)."""
    rows = parallel_map(
        partial(_example_output_beta, net, cfg),
        enumerate(data.inputs),
        workers,
    )
    return np.array(rows, dtype=np.float64).reshape(data.n, 1)


def mean_aggregate(matrix: NDArray, name: str) -> NoiseStabilityResult:
    total = math.fsum(matrix.ravel().tolist())
    return NoiseStabilityResult(matrix, total / matrix.size, name)


def geometric_aggregate(matrix: NDArray, name: str) -> NoiseStabilityResult:
    """Mean of log beta (no closing exponential)."""
    bad = np.argwhere(matrix <= 0)
    if len(bad):
        i, j = (int(v) for v in bad[0])
        raise NonPositiveBetaError(i, j + 1, float(matrix[i, j]))
    total = math.fsum(np.log(matrix).ravel().tolist())
    return NoiseStabilityResult(matrix, total / matrix.size, name)


def mean_noise_stability(
    net: Network,
    data: LabeledDataset,
    cfg: NoiseConfig = NoiseConfig(),
    workers: int = 1,
) -> NoiseStabilityResult:
    return mean_aggregate(
        layer_beta_matrix(net, data, cfg, workers), MEAN_NOISE_STABILITY
    )


def geometric_mean_noise_stability(
    net: Network,
    data: LabeledDataset,
    cfg: NoiseConfig = NoiseConfig(),
    workers: int = 1,
) -> NoiseStabilityResult:
    return geometric_aggregate(
        layer_beta_matrix(net, data, cfg, workers),
        GEOMETRIC_MEAN_NOISE_STABILITY,
    )


def noise_stability_output_measures(
    net: Network,
    data: LabeledDataset,
    cfg: NoiseConfig = NoiseConfig(),
    workers: int = 1,
) -> tuple[NoiseStabilityResult, NoiseStabilityResult]:
    """Mean and geometric-mean output noise stability from one set of
    draws."""
    matrix = output_beta_matrix(net, data, cfg, workers)
    return (
        mean_aggregate(matrix, MEAN_NOISE_STABILITY_OUTPUT),
        geometric_aggregate(matrix, GEOMETRIC_MEAN_NOISE_STABILITY_OUTPUT),
    )
