# Margin-based measures: the first-order input margin, the all-layer margin
# found by projected gradient ascent inside a radius bisection, and the
# margin-jacobian measure.
#
# The all-layer perturbation follows the recurrence
#     g_0 = x,  g_j = f_j(g_{j-1}) + delta_j ||g_{j-1}||,
# where f_j runs the layers of segment j (everything up to and including
# affine layer j) and delta_j has the shape of the output of affine layer j.

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from functools import partial
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .common import (
    DEFAULT_BISECTION_STEPS,
    DEFAULT_INITIAL_RADIUS,
    DEFAULT_MARGIN_RESTARTS,
    DEFAULT_MARGIN_SAMPLE_SIZE,
    DEFAULT_MARGIN_STEP_SIZE,
    DEFAULT_MARGIN_STEPS,
    DEFAULT_MARGIN_TOLERANCE,
    DEGENERATE_GRADIENT_NORM,
    DegenerateGradientError,
    InvalidConfigError,
    InvalidInputError,
    NonPositiveMarginError,
)
from .logging_utils import logger
from .network import (
    Array,
    LabeledDataset,
    Network,
    OutputMarginConfig,
    aggregate_output_margin,
    backward_layers,
    cross_entropy,
    forward,
    jacobian_frobenius_sq,
    run_layers,
    sq_norm,
    vjp,
)
from .noise import example_key, noise_rng
from .parallel import parallel_map

INPUT_LAYER_MARGIN = "input-layer-margin"
ALL_LAYER_MARGIN = "all-layer-margin"
MARGIN_JACOBIAN = "margin-jacobian"

# stream ids for the random restart directions and the subsample; distinct
# from the layer streams of the noise measures
_RESTART_STREAM = 1 << 20
_SUBSAMPLE_STREAM = (1 << 20) + 1

# line search along one direction stops at this relative bracket width
_LINE_SEARCH_STEPS = 60
_LINE_SEARCH_TOLERANCE = 1e-9


@dataclass(frozen=True)
class MarginSolverConfig:
    max_steps: int = DEFAULT_MARGIN_STEPS
    step_size: float = DEFAULT_MARGIN_STEP_SIZE
    num_restarts: int = DEFAULT_MARGIN_RESTARTS
    seed: int = 0
    # bisection stops once (hi - lo) <= tolerance * hi
    tolerance: float = DEFAULT_MARGIN_TOLERANCE
    num_bisection_steps: int = DEFAULT_BISECTION_STEPS
    initial_radius: float = DEFAULT_INITIAL_RADIUS
    sample_size: int = DEFAULT_MARGIN_SAMPLE_SIZE

    def __post_init__(self) -> None:
        for name in ("max_steps", "num_restarts", "sample_size"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(
                    f"{name} must be >= 1, got {getattr(self, name)}"
                )
        if self.num_bisection_steps < 0:
            raise InvalidConfigError(
                f"num_bisection_steps must be >= 0, got "
                f"{self.num_bisection_steps}"
            )
        for name in ("step_size", "tolerance", "initial_radius"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidConfigError(f"{name} must be positive, got {v}")

    def to_dict(self) -> dict[str, object]:
        return {
            "max_steps": self.max_steps,
            "step_size": self.step_size,
            "num_restarts": self.num_restarts,
            "seed": self.seed,
            "tolerance": self.tolerance,
            "num_bisection_steps": self.num_bisection_steps,
            "initial_radius": self.initial_radius,
            "sample_size": self.sample_size,
        }


@dataclass(frozen=True, eq=False)
class PerturbationVector:
    deltas: tuple[Array, ...]  # delta_1..delta_l, float64

    @property
    def norm(self) -> float:
        return math.sqrt(math.fsum(sq_norm(d) for d in self.deltas))

    @classmethod
    def zeros(cls, net: Network) -> "PerturbationVector":
        return cls(
            tuple(
                np.zeros(net.shapes[k + 1], dtype=np.float64)
                for k in net.affine_indices
            )
        )

    def scaled(self, c: float) -> "PerturbationVector":
        return PerturbationVector(tuple(c * d for d in self.deltas))


@dataclass(frozen=True, eq=False)
class MarginSolverResult:
    """Outcome of the all-layer margin solver for one example.  ``margin``
    is +inf when no misclassifying perturbation was found at the initial
    radius (``feasible`` is then False and ``perturbation`` is None)."""

    margin: float
    perturbation: Optional[PerturbationVector]
    feasible: bool
    restarts: int = 0
    steps: int = 0
    bisection_steps: int = 0
    line_search_steps: int = 0


def _check_deltas(net: Network, deltas: Sequence[NDArray]) -> list[Array]:
    if len(deltas) != net.num_affine:
        raise InvalidInputError(
            f"{len(deltas)} perturbations for {net.num_affine} affine layers"
        )
    out = []
    for j, (k, d) in enumerate(zip(net.affine_indices, deltas), start=1):
        d = np.asarray(d, dtype=np.float64)
        if d.shape != net.shapes[k + 1]:
            raise InvalidInputError(
                f"perturbation {j} has shape {d.shape}, expected "
                f"{net.shapes[k + 1]}"
            )
        out.append(d)
    return out


def perturbed_forward(
    net: Network, x: NDArray, deltas: Sequence[NDArray]
) -> Array:
    """Logits F(x, delta) of the perturbed network, in float64."""
    ds = _check_deltas(net, deltas)
    g = np.asarray(x, dtype=np.float64)[None]
    for j in range(1, net.num_affine + 1):
        start, stop = net.segment(j)
        scale = math.sqrt(sq_norm(g))
        g = run_layers(net, g, start, stop)[-1] + ds[j - 1][None] * scale
    return g[0]


def _perturbed_grad(
    net: Network,
    x: NDArray,
    deltas: Sequence[NDArray],
    objective: Callable[[Array], tuple[float, Array]],
) -> tuple[float, list[Array], Array]:
    ds = _check_deltas(net, deltas)
    g = np.asarray(x, dtype=np.float64)[None]
    saved = []
    for j in range(1, net.num_affine + 1):
        start, stop = net.segment(j)
        values = run_layers(net, g, start, stop)
        scale = math.sqrt(sq_norm(g))
        saved.append((values, g, scale))
        g = values[-1] + ds[j - 1][None] * scale
    value, cot = objective(g)
    grads: list[Array] = [ds[0]] * net.num_affine
    for j in range(net.num_affine, 0, -1):
        values, g_prev, scale = saved[j - 1]
        start, stop = net.segment(j)
        grads[j - 1] = cot[0] * scale
        prev = backward_layers(net, values, cot, start, stop)
        if scale > 0:
            # derivative of delta_j ||g_{j-1}|| with respect to g_{j-1}
            prev = prev + (np.sum(cot * ds[j - 1][None]) / scale) * g_prev
        cot = prev
    return value, grads, g[0]


def perturbed_loss_grad(
    net: Network, x: NDArray, y: int, deltas: Sequence[NDArray]
) -> tuple[float, list[Array], Array]:
    """Cross-entropy of F(x, delta) against label ``y``, its gradient with
    respect to every delta_j, and the perturbed logits."""
    labels = np.array([y])
    return _perturbed_grad(
        net, x, deltas, lambda g: cross_entropy(g, labels)
    )


def competitor_margin(logits: NDArray, y: int) -> tuple[float, Array]:
    """max over k != y of F_k - F_y for a batch of one, and its gradient
    with respect to the logits."""
    logits = np.atleast_2d(logits)
    others = logits[0].astype(np.float64)
    others[y] = -np.inf
    k = int(np.argmax(others))
    cot = np.zeros(logits.shape, dtype=np.float64)
    cot[0, k] = 1.0
    cot[0, y] = -1.0
    return float(logits[0, k] - logits[0, y]), cot


def input_layer_margin(net: Network, x: NDArray, y: int) -> float:
    """First-order distance from ``x`` to the nearest decision boundary:
    min over y' != y of (f_y - f_y') / ||grad f_y - grad f_y'||.  Zero when
    ``x`` is misclassified or tied."""
    if not 0 <= y < net.num_classes or net.num_classes < 2:
        raise InvalidInputError(
            f"label {y} with {net.num_classes} classes has no margin"
        )
    trace = forward(net, x)
    f = trace.output.astype(np.float64)
    others = np.array([k for k in range(net.num_classes) if k != y])
    diffs = f[y] - f[others]
    if np.any(diffs <= 0):
        return 0.0
    cot = np.zeros((len(others), net.num_classes), dtype=np.float64)
    cot[:, y] = 1
    cot[np.arange(len(others)), others] = -1
    grads = vjp(net, trace, cot, "input").reshape(len(others), -1)
    gnorms = np.sqrt(np.sum(np.square(grads, dtype=np.float64), axis=1))
    valid = gnorms >= DEGENERATE_GRADIENT_NORM
    if not np.any(valid):
        raise DegenerateGradientError(
            "gradient differences vanish for every competing class"
        )
    return float(np.min(diffs[valid] / gnorms[valid]))


def _project(
    deltas: Sequence[Array], radius: float
) -> Optional[list[Array]]:
    norm = math.sqrt(math.fsum(sq_norm(d) for d in deltas))
    if norm == 0:
        return None
    return [d * (radius / norm) for d in deltas]


def _start_directions(
    net: Network, x: NDArray, y: int, key: int, cfg: MarginSolverConfig
) -> list[list[Array]]:
    """Unit-norm starting directions, one per restart.  Restart 0 follows
    the loss gradient at delta = 0; the others are seeded Gaussian.
    Restart r does not depend on num_restarts."""
    zero = PerturbationVector.zeros(net).deltas
    dirs: list[list[Array]] = []
    _, grads, _ = perturbed_loss_grad(net, x, y, zero)
    first = _project(grads, 1.0)
    for r in range(cfg.num_restarts):
        if r == 0 and first is not None:
            dirs.append(first)
            continue
        rng = noise_rng(cfg.seed, key, _RESTART_STREAM + r)
        rand = [rng.standard_normal(d.shape) for d in zero]
        dirs.append(_project(rand, 1.0) or rand)
    return dirs


def _margin_direction(
    net: Network, x: NDArray, y: int
) -> Optional[list[Array]]:
    """Unit direction of steepest ascent of the top competitor's logit
    margin at delta = 0.  Exact minimizer for a single affine layer."""
    zero = PerturbationVector.zeros(net).deltas
    _, grads, _ = _perturbed_grad(
        net, x, zero, lambda g: competitor_margin(g, y)
    )
    return _project(grads, 1.0)


def _misclassified(logits: Array, y: int) -> bool:
    return int(np.argmax(logits)) != y


def _line_search(
    net: Network,
    x: NDArray,
    y: int,
    direction: Sequence[Array],
    radius: float,
    stats: dict[str, int],
) -> Optional[tuple[float, list[Array]]]:
    """Bisection for the smallest t in (0, radius] at which t * direction
    misclassifies.  Returns t with its perturbation, or None when the
    far end does not misclassify."""
    best = [d * radius for d in direction]
    if not _misclassified(perturbed_forward(net, x, best), y):
        return None
    lo, hi = 0.0, radius
    for _ in range(_LINE_SEARCH_STEPS):
        if hi - lo <= _LINE_SEARCH_TOLERANCE * hi:
            break
        stats["line_search_steps"] += 1
        mid = (lo + hi) / 2
        deltas = [d * mid for d in direction]
        if _misclassified(perturbed_forward(net, x, deltas), y):
            hi, best = mid, deltas
        else:
            lo = mid
    return hi, best


def _attack_at_radius(
    net: Network,
    x: NDArray,
    y: int,
    radius: float,
    direction: Sequence[Array],
    cfg: MarginSolverConfig,
    stats: dict[str, int],
) -> Optional[list[Array]]:
    """Projected gradient ascent on the sphere of the given radius from
    one starting direction.  Returns the first iterate whose perturbed
    forward pass misclassifies.  Step k is independent of max_steps, so a
    longer run only extends a shorter one."""
    deltas = [d * radius for d in direction]
    for step in range(cfg.max_steps + 1):
        _, grads, logits = perturbed_loss_grad(net, x, y, deltas)
        if _misclassified(logits, y):
            if _misclassified(perturbed_forward(net, x, deltas), y):
                return deltas
        if step == cfg.max_steps:
            break
        unit = _project(grads, 1.0)
        if unit is None:
            break
        stats["steps"] += 1
        size = cfg.step_size * radius / math.sqrt(1 + step)
        moved = [d + size * u for d, u in zip(deltas, unit)]
        projected = _project(moved, radius)
        if projected is None:
            break
        deltas = projected
    return None


def _bisect_radius(
    net: Network,
    x: NDArray,
    y: int,
    direction: Sequence[Array],
    hi: float,
    best: Optional[list[Array]],
    cfg: MarginSolverConfig,
    stats: dict[str, int],
) -> tuple[float, Optional[list[Array]]]:
    lo = 0.0
    for _ in range(cfg.num_bisection_steps):
        if hi - lo <= cfg.tolerance * hi:
            break
        stats["bisection_steps"] += 1
        mid = (lo + hi) / 2
        found = _attack_at_radius(net, x, y, mid, direction, cfg, stats)
        if found is None:
            lo = mid
        else:
            hi, best = mid, found
    return hi, best


def all_layer_margin(
    net: Network,
    x: NDArray,
    y: int,
    cfg: MarginSolverConfig = MarginSolverConfig(),
    key: Optional[int] = None,
) -> MarginSolverResult:
    """Smallest total perturbation found that changes the prediction.

    A line search along the competitor-margin direction sets the upper
    radius.  Each restart then runs its own bisection below it, and the
    smallest misclassifying radius over all of them wins.  The returned
    perturbation always misclassifies under perturbed_forward, so the
    margin is an upper bound on the true all-layer margin.  Raising
    max_steps or num_restarts never raises the result."""
    if not 0 <= y < net.num_classes:
        raise InvalidInputError(f"label {y} out of range")
    logits = forward(net, x).output
    if _misclassified(logits, y):
        return MarginSolverResult(0.0, PerturbationVector.zeros(net), True)
    if key is None:
        key = example_key(np.asarray(x))
    stats = {
        "restarts": 0,
        "steps": 0,
        "bisection_steps": 0,
        "line_search_steps": 0,
    }
    radius = cfg.initial_radius
    candidates: list[tuple[float, list[Array]]] = []
    searched: Optional[tuple[float, list[Array]]] = None
    steepest = _margin_direction(net, x, y)
    if steepest is not None:
        searched = _line_search(net, x, y, steepest, radius, stats)
    if searched is not None:
        radius = searched[0]
        candidates.append(searched)
    for direction in _start_directions(net, x, y, key, cfg):
        stats["restarts"] += 1
        best = None
        if searched is None:
            best = _attack_at_radius(
                net, x, y, radius, direction, cfg, stats
            )
            if best is None:
                continue
        hi, best = _bisect_radius(
            net, x, y, direction, radius, best, cfg, stats
        )
        if best is not None:
            candidates.append((hi, best))
    if not candidates:
        return MarginSolverResult(
            math.inf,
            None,
            False,
            stats["restarts"],
            stats["steps"],
            stats["bisection_steps"],
            stats["line_search_steps"],
        )
    _, best = min(candidates, key=lambda c: c[0])
    perturbation = PerturbationVector(tuple(best))
    return MarginSolverResult(
        perturbation.norm,
        perturbation,
        True,
        stats["restarts"],
        stats["steps"],
        stats["bisection_steps"],
        stats["line_search_steps"],
    )


def margin_subsample(n: int, cfg: MarginSolverConfig) -> NDArray[np.int64]:
    """Seeded uniform subsample of example indices, sorted."""
    if n <= cfg.sample_size:
        return np.arange(n, dtype=np.int64)
    rng = noise_rng(cfg.seed, n, _SUBSAMPLE_STREAM)
    idx = rng.choice(n, size=cfg.sample_size, replace=False)
    return np.sort(idx).astype(np.int64)


@dataclass(frozen=True)
class MarginMeasureResult:
    value: float
    num_examples: int
    num_skipped: int
    num_failed: int = 0
    mean_steps: float = 0.0


def _example_input_margin(
    net: Network, item: tuple[NDArray, int]
) -> Optional[float]:
    x, y = item
    try:
        return input_layer_margin(net, x, y)
    except DegenerateGradientError:
        return None


def input_layer_margin_measure(
    net: Network,
    data: LabeledDataset,
    cfg: MarginSolverConfig = MarginSolverConfig(),
    workers: int = 1,
) -> MarginMeasureResult:
    """Median input margin over a seeded subsample.  Examples whose
    gradient differences all vanish are left out."""
    idx = margin_subsample(data.n, cfg)
    items = [(data.inputs[i], int(data.labels[i])) for i in idx]
    margins = parallel_map(partial(_example_input_margin, net), items, workers)
    kept = [m for m in margins if m is not None]
    skipped = len(margins) - len(kept)
    if not kept:
        raise DegenerateGradientError(
            f"gradient differences vanish on all {len(margins)} examples"
        )
    if skipped:
        logger.warning(
            f"input-layer margin skipped {skipped} examples with "
            "vanishing gradients"
        )
    return MarginMeasureResult(float(np.median(kept)), len(kept), skipped)


def _example_all_layer_margin(
    net: Network, cfg: MarginSolverConfig, item: tuple[NDArray, int]
) -> MarginSolverResult:
    x, y = item
    return all_layer_margin(net, x, y, cfg)


def all_layer_margin_measure(
    net: Network,
    data: LabeledDataset,
    cfg: MarginSolverConfig = MarginSolverConfig(),
    workers: int = 1,
) -> MarginMeasureResult:
    """Median all-layer margin over a seeded subsample; failed solves count
    as +inf."""
    idx = margin_subsample(data.n, cfg)
    items = [(data.inputs[i], int(data.labels[i])) for i in idx]
    results = parallel_map(
        partial(_example_all_layer_margin, net, cfg), items, workers
    )
    failed = sum(1 for r in results if not r.feasible)
    if failed:
        logger.warning(
            f"all-layer margin solver failed on {failed} of {len(results)} "
            f"examples at radius {cfg.initial_radius}"
        )
    values = [r.margin for r in results]
    mean_steps = math.fsum(r.steps for r in results) / len(results)
    return MarginMeasureResult(
        float(np.median(values)), len(results), 0, failed, mean_steps
    )


@dataclass(frozen=True)
class MarginJacobianResult:
    value: float
    margin_term: float
    jacobian_term: float
    margin: float


def _example_jacobian_terms(net: Network, x: NDArray) -> list[float]:
    trace = forward(net, x)
    return [
        jacobian_frobenius_sq(net, trace, j)
        / (net.num_classes * net.width(j))
        for j in range(1, net.num_affine + 1)
    ]


def margin_jacobian(
    net: Network,
    data: LabeledDataset,
    margin_cfg: OutputMarginConfig = OutputMarginConfig(),
    workers: int = 1,
) -> MarginJacobianResult:
    """(l / gamma^2)^(1/l) plus the width-normalized mean squared Jacobian
    norm of the logits with respect to every a_j, divided by l^2 gamma."""
    gamma = aggregate_output_margin(net, data, margin_cfg)
    if gamma <= 0:
        raise NonPositiveMarginError(gamma)
    depth = net.num_affine
    rows = parallel_map(
        partial(_example_jacobian_terms, net), list(data.inputs), workers
    )
    total = math.fsum(v for row in rows for v in row)
    margin_term = (depth / gamma**2) ** (1 / depth)
    jacobian_term = total / (data.n * depth**2 * gamma)
    return MarginJacobianResult(
        margin_term + jacobian_term, margin_term, jacobian_term, gamma
    )
