# Spectral norms of affine layers computed matrix-free with the power
# method, and the fast-log-spec measure built from them.

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from numpy.typing import NDArray

from .common import (
    DEFAULT_PM_ITERS,
    DEFAULT_PM_TOLERANCE,
    PM_RESEEDS,
    InvalidConfigError,
    NonPositiveMarginError,
    ShapeMismatchError,
    ZeroSpectralNormError,
)
from .logging_utils import logger
from .network import (
    Conv2d,
    Dense,
    LabeledDataset,
    Network,
    OutputMarginConfig,
    Shape,
    aggregate_output_margin,
    layer_forward,
    layer_input_vjp,
    layer_output_shape,
    sq_norm,
)
from .parallel import parallel_map

FAST_LOG_SPEC = "fast-log-spec"

Vector = NDArray[np.float64]


@dataclass(frozen=True)
class LinearOperatorHandle:
    """A linear map known only through products with vectors."""

    apply: Callable[[Vector], Vector]
    adjoint: Callable[[Vector], Vector]
    in_dim: int
    out_dim: int
    name: str = ""


@dataclass(frozen=True)
class PowerMethodConfig:
    max_iters: int = DEFAULT_PM_ITERS
    rel_tolerance: float = DEFAULT_PM_TOLERANCE
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise InvalidConfigError(
                f"max_iters must be >= 1, got {self.max_iters}"
            )
        if not 0 < self.rel_tolerance < 1:
            raise InvalidConfigError(
                f"rel_tolerance must be in (0, 1), got {self.rel_tolerance}"
            )

    def to_dict(self) -> dict[str, object]:
        return {
            "max_iters": self.max_iters,
            "rel_tolerance": self.rel_tolerance,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class PowerIterationResult:
    norm: float
    iterations: int
    converged: bool
    history: tuple[float, ...] = field(repr=False, default=())


def _check_vector(v: NDArray, dim: int, what: str) -> None:
    if v.shape != (dim,):
        raise ShapeMismatchError(0, (dim,), v.shape, what)


def dense_operator(layer: Dense) -> LinearOperatorHandle:
    weight = layer.weight
    out_dim, in_dim = weight.shape

    def apply(v: Vector) -> Vector:
        _check_vector(v, in_dim, "operator input")
        return weight @ v

    def adjoint(u: Vector) -> Vector:
        _check_vector(u, out_dim, "adjoint input")
        return weight.T @ u

    return LinearOperatorHandle(apply, adjoint, in_dim, out_dim, "dense")


def conv_operator(layer: Conv2d, input_shape: Shape) -> LinearOperatorHandle:
    """Bias-free convolution on flattened (C, H, W) inputs; the adjoint is
    the transposed convolution."""
    input_shape = tuple(input_shape)
    out_shape = layer_output_shape(layer, input_shape, 0)
    in_dim = math.prod(input_shape)
    out_dim = math.prod(out_shape)

    def apply(v: Vector) -> Vector:
        _check_vector(v, in_dim, "operator input")
        x = v.reshape((1,) + input_shape)
        return layer_forward(layer, x, with_bias=False).ravel()

    def adjoint(u: Vector) -> Vector:
        _check_vector(u, out_dim, "adjoint input")
        g = u.reshape((1,) + out_shape)
        return layer_input_vjp(layer, g, g, input_shape).ravel()

    return LinearOperatorHandle(apply, adjoint, in_dim, out_dim, "conv2d")


def layer_operator(net: Network, j: int) -> LinearOperatorHandle:
    """Operator of affine layer j (1-based)."""
    layer = net.affine_layer(j)
    if isinstance(layer, Dense):
        return dense_operator(layer)
    return conv_operator(layer, net.shapes[net.affine_indices[j - 1]])


def spectral_norm(
    op: LinearOperatorHandle, cfg: PowerMethodConfig = PowerMethodConfig()
) -> PowerIterationResult:
    """Largest singular value of ``op`` by power iteration on A^T A from a
    seeded Gaussian start.  Stops when two successive estimates differ by
    less than ``rel_tolerance`` relatively."""
    if op.in_dim < 1:
        raise InvalidConfigError(f"operator input dimension {op.in_dim}")
    for attempt in range(PM_RESEEDS + 1):
        ss = np.random.SeedSequence([cfg.seed, attempt])
        rng = np.random.default_rng(ss)
        v = rng.standard_normal(op.in_dim)
        v /= math.sqrt(sq_norm(v))
        w = np.asarray(op.apply(v), dtype=np.float64)
        if sq_norm(w) > 0:
            break
    else:
        logger.debug(f"{op.name or 'operator'} maps every start vector to 0")
        return PowerIterationResult(0.0, 0, True, ())

    history: list[float] = []
    converged = False
    for it in range(1, cfg.max_iters + 1):
        if it > 1:
            w = np.asarray(op.apply(v), dtype=np.float64)
        # ||A v||^2 is the Rayleigh quotient of A^T A at the unit vector v
        sigma = math.sqrt(sq_norm(w))
        history.append(sigma)
        if it > 1 and abs(sigma - history[-2]) <= cfg.rel_tolerance * sigma:
            converged = True
            break
        u = np.asarray(op.adjoint(w), dtype=np.float64)
        u_norm = math.sqrt(sq_norm(u))
        if u_norm == 0:
            break
        v = u / u_norm
    return PowerIterationResult(
        history[-1], len(history), converged, tuple(history)
    )


def _affine_spectral_norm(
    net: Network, cfg: PowerMethodConfig, j: int
) -> PowerIterationResult:
    return spectral_norm(layer_operator(net, j), cfg)


def layer_spectral_norms(
    net: Network, cfg: PowerMethodConfig = PowerMethodConfig(), workers: int = 1
) -> list[PowerIterationResult]:
    """Spectral norm of every affine layer, in layer order."""
    return parallel_map(
        partial(_affine_spectral_norm, net, cfg),
        range(1, net.num_affine + 1),
        workers,
    )


@dataclass(frozen=True)
class FastLogSpecResult:
    value: float
    layer_norms: tuple[float, ...]
    margin: float
    converged: tuple[bool, ...]
    iterations: tuple[int, ...]


def fast_log_spec_from_norms(norms: Sequence[float], margin: float) -> float:
    """(1 - 1/l) sum_i log ||W_i||^2 - log margin^2."""
    if margin <= 0:
        raise NonPositiveMarginError(margin)
    for i, s in enumerate(norms):
        if s <= 0:
            raise ZeroSpectralNormError(i + 1)
    depth = len(norms)
    log_sum = math.fsum(2 * math.log(s) for s in norms)
    return (1 - 1 / depth) * log_sum - 2 * math.log(margin)


def fast_log_spec(
    net: Network,
    data: LabeledDataset,
    cfg: PowerMethodConfig = PowerMethodConfig(),
    margin_cfg: OutputMarginConfig = OutputMarginConfig(),
    workers: int = 1,
) -> FastLogSpecResult:
    margin = aggregate_output_margin(net, data, margin_cfg)
    if margin <= 0:
        raise NonPositiveMarginError(margin)
    results = layer_spectral_norms(net, cfg, workers)
    for j, r in enumerate(results, start=1):
        if r.norm == 0:
            raise ZeroSpectralNormError(j)
        if not r.converged:
            logger.warning(
                f"power method for layer {j} did not converge in "
                f"{r.iterations} iterations, using last estimate {r.norm:.6g}"
            )
    norms = tuple(r.norm for r in results)
    return FastLogSpecResult(
        fast_log_spec_from_norms(norms, margin),
        norms,
        margin,
        tuple(r.converged for r in results),
        tuple(r.iterations for r in results),
    )
