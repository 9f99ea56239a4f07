# Registry of the generalization measures and the context a measure run
# carries: configuration, worker count, a per-network cache and the
# collected error / warning / debug messages.

import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any, Optional, TypedDict

import numpy as np

from .common import GenMeasuresError, UnknownMeasureError
from .logging_utils import logger
from .margins import (
    ALL_LAYER_MARGIN,
    INPUT_LAYER_MARGIN,
    MARGIN_JACOBIAN,
    MarginSolverConfig,
    all_layer_margin_measure,
    input_layer_margin_measure,
    margin_jacobian,
)
from .network import LabeledDataset, Network, OutputMarginConfig
from .noise import (
    GEOMETRIC_MEAN_NOISE_STABILITY,
    GEOMETRIC_MEAN_NOISE_STABILITY_OUTPUT,
    MEAN_NOISE_STABILITY,
    MEAN_NOISE_STABILITY_OUTPUT,
    NoiseConfig,
    NoiseStabilityResult,
    geometric_aggregate,
    layer_beta_matrix,
    mean_aggregate,
    output_beta_matrix,
)
from .norms import FAST_LOG_SPEC, PowerMethodConfig, fast_log_spec


class ErrorMessageData(TypedDict):
    msg: str
    model: str
    measure: str
    called_from: str


class CollatedErrorReturnData(TypedDict):
    errors: list[ErrorMessageData]
    warnings: list[ErrorMessageData]
    debugs: list[ErrorMessageData]


@dataclass
class MeasureResult:
    value: float
    diagnostics: dict[str, Any] = field(default_factory=dict)


class MeasureContext:
    """Settings and message collection for computing measures on one or
    more networks."""

    __slots__ = (
        "noise",
        "margin",
        "power",
        "output_margin",
        "workers",
        "model",
        "measure",
        "errors",
        "warnings",
        "debugs",
        "cache",
    )

    def __init__(
        self,
        noise: NoiseConfig = NoiseConfig(),
        margin: MarginSolverConfig = MarginSolverConfig(),
        power: PowerMethodConfig = PowerMethodConfig(),
        output_margin: OutputMarginConfig = OutputMarginConfig(),
        workers: int = 1,
        quiet: bool = False,
    ) -> None:
        self.noise = noise
        self.margin = margin
        self.power = power
        self.output_margin = output_margin
        self.workers = workers
        self.model: Optional[str] = None
        self.measure: Optional[str] = None
        self.errors: list[ErrorMessageData] = []
        self.warnings: list[ErrorMessageData] = []
        self.debugs: list[ErrorMessageData] = []
        # results shared between measures of the same (network, data)
        self.cache: dict[str, Any] = {}
        logger.setLevel("WARNING" if quiet else "INFO")

    def _message(self, msg: str, sortid: str) -> ErrorMessageData:
        return {
            "msg": msg,
            "model": self.model or "",
            "measure": self.measure or "",
            "called_from": sortid,
        }

    def _location(self) -> str:
        return "/".join(p for p in (self.model, self.measure) if p) or "-"

    def error(self, msg: str, sortid: str = "XYZunsorted") -> None:
        """Logs an error and keeps it in self.errors."""
        self.errors.append(self._message(msg, sortid))
        logger.error(f"{self._location()}: {msg}")

    def warning(self, msg: str, sortid: str = "XYZunsorted") -> None:
        self.warnings.append(self._message(msg, sortid))
        logger.warning(f"{self._location()}: {msg}")

    def debug(self, msg: str, sortid: str = "XYZunsorted") -> None:
        self.debugs.append(self._message(msg, sortid))
        logger.debug(f"{self._location()}: {msg}")

    def to_return(self) -> CollatedErrorReturnData:
        """Messages collected so far, JSON-compatible."""
        return {
            "errors": self.errors,
            "warnings": self.warnings,
            "debugs": self.debugs,
        }

    def cached(self, key: str, compute: Callable[[], Any]) -> Any:
        if key not in self.cache:
            self.cache[key] = compute()
        return self.cache[key]

    def config_echo(self, name: str) -> dict[str, Any]:
        return {
            section: getattr(self, section).to_dict()
            for section in MEASURE_CONFIGS[name]
        }


def _noise_diagnostics(
    ctx: MeasureContext, r: NoiseStabilityResult
) -> dict[str, Any]:
    return {
        "num_examples": int(r.per_layer.shape[0]),
        "num_noise_samples": ctx.noise.num_noise_samples,
        "per_layer_mean": r.per_layer_mean,
    }


def _layer_betas(
    ctx: MeasureContext, net: Network, data: LabeledDataset
) -> np.ndarray:
    return ctx.cached(
        "layer-betas",
        lambda: layer_beta_matrix(net, data, ctx.noise, ctx.workers),
    )


def _output_betas(
    ctx: MeasureContext, net: Network, data: LabeledDataset
) -> np.ndarray:
    return ctx.cached(
        "output-betas",
        lambda: output_beta_matrix(net, data, ctx.noise, ctx.workers),
    )


def mean_noise_stability_fn(
    ctx: MeasureContext, net: Network, data: LabeledDataset
) -> MeasureResult:
    r = mean_aggregate(_layer_betas(ctx, net, data), MEAN_NOISE_STABILITY)
    return MeasureResult(r.aggregate, _noise_diagnostics(ctx, r))


def geometric_mean_noise_stability_fn(
    ctx: MeasureContext, net: Network, data: LabeledDataset
) -> MeasureResult:
    r = geometric_aggregate(
        _layer_betas(ctx, net, data), GEOMETRIC_MEAN_NOISE_STABILITY
    )
    return MeasureResult(r.aggregate, _noise_diagnostics(ctx, r))


def mean_noise_stability_output_fn(
    ctx: MeasureContext, net: Network, data: LabeledDataset
) -> MeasureResult:
    r = mean_aggregate(
        _output_betas(ctx, net, data), MEAN_NOISE_STABILITY_OUTPUT
    )
    return MeasureResult(r.aggregate, _noise_diagnostics(ctx, r))


def geometric_mean_noise_stability_output_fn(
    ctx: MeasureContext, net: Network, data: LabeledDataset
) -> MeasureResult:
    r = geometric_aggregate(
        _output_betas(ctx, net, data), GEOMETRIC_MEAN_NOISE_STABILITY_OUTPUT
    )
    return MeasureResult(r.aggregate, _noise_diagnostics(ctx, r))


def input_layer_margin_fn(
    ctx: MeasureContext, net: Network, data: LabeledDataset
) -> MeasureResult:
    r = input_layer_margin_measure(net, data, ctx.margin, ctx.workers)
    if r.num_skipped:
        ctx.warning(
            f"{r.num_skipped} examples skipped for vanishing gradients",
            sortid="measures/input-skipped",
        )
    return MeasureResult(
        r.value,
        {"num_examples": r.num_examples, "num_skipped": r.num_skipped},
    )


def all_layer_margin_fn(
    ctx: MeasureContext, net: Network, data: LabeledDataset
) -> MeasureResult:
    r = all_layer_margin_measure(net, data, ctx.margin, ctx.workers)
    if r.num_failed:
        ctx.warning(
            f"solver found no misclassifying perturbation for "
            f"{r.num_failed} of {r.num_examples} examples",
            sortid="measures/solver-failed",
        )
    return MeasureResult(
        r.value,
        {
            "num_examples": r.num_examples,
            "num_failed": r.num_failed,
            "mean_ascent_steps": r.mean_steps,
            "restarts": ctx.margin.num_restarts,
        },
    )


def margin_jacobian_fn(
    ctx: MeasureContext, net: Network, data: LabeledDataset
) -> MeasureResult:
    r = margin_jacobian(net, data, ctx.output_margin, ctx.workers)
    return MeasureResult(
        r.value,
        {
            "margin": r.margin,
            "margin_term": r.margin_term,
            "jacobian_term": r.jacobian_term,
        },
    )


def fast_log_spec_fn(
    ctx: MeasureContext, net: Network, data: LabeledDataset
) -> MeasureResult:
    r = fast_log_spec(net, data, ctx.power, ctx.output_margin, ctx.workers)
    for j, ok in enumerate(r.converged, start=1):
        if not ok:
            ctx.warning(
                f"power method for layer {j} did not converge",
                sortid="measures/pm-not-converged",
            )
    return MeasureResult(
        r.value,
        {
            "margin": r.margin,
            "layer_norms": list(r.layer_norms),
            "power_iterations": list(r.iterations),
            "converged": all(r.converged),
        },
    )


MeasureFn = Callable[[MeasureContext, Network, LabeledDataset], MeasureResult]

MEASURES: dict[str, MeasureFn] = {
    MEAN_NOISE_STABILITY: mean_noise_stability_fn,
    GEOMETRIC_MEAN_NOISE_STABILITY: geometric_mean_noise_stability_fn,
    MEAN_NOISE_STABILITY_OUTPUT: mean_noise_stability_output_fn,
    GEOMETRIC_MEAN_NOISE_STABILITY_OUTPUT: (
        geometric_mean_noise_stability_output_fn
    ),
    INPUT_LAYER_MARGIN: input_layer_margin_fn,
    ALL_LAYER_MARGIN: all_layer_margin_fn,
    MARGIN_JACOBIAN: margin_jacobian_fn,
    FAST_LOG_SPEC: fast_log_spec_fn,
}

# configuration sections echoed into the report of each measure
MEASURE_CONFIGS: dict[str, tuple[str, ...]] = {
    MEAN_NOISE_STABILITY: ("noise",),
    GEOMETRIC_MEAN_NOISE_STABILITY: ("noise",),
    MEAN_NOISE_STABILITY_OUTPUT: ("noise",),
    GEOMETRIC_MEAN_NOISE_STABILITY_OUTPUT: ("noise",),
    INPUT_LAYER_MARGIN: ("margin",),
    ALL_LAYER_MARGIN: ("margin",),
    MARGIN_JACOBIAN: ("output_margin",),
    FAST_LOG_SPEC: ("power", "output_margin"),
}


def check_measure_names(names: Sequence[str]) -> list[str]:
    """Validated list of measure names; an empty list selects all."""
    if not names:
        return list(MEASURES)
    unknown = [n for n in names if n not in MEASURES]
    if unknown:
        raise UnknownMeasureError(unknown)
    return list(dict.fromkeys(names))


def compute_measures(
    ctx: MeasureContext,
    net: Network,
    data: LabeledDataset,
    names: Sequence[str],
    model_id: Optional[str] = None,
) -> dict[str, dict[str, Any]]:
    """Runs the named measures on one network.  A measure that raises is
    recorded with its error and does not stop the others."""
    names = check_measure_names(names)
    ctx.cache.clear()
    ctx.model = model_id
    records: dict[str, dict[str, Any]] = {}
    for name in names:
        ctx.measure = name
        start = time.perf_counter()
        record: dict[str, Any] = {
            "config": ctx.config_echo(name),
            "value": None,
            "diagnostics": {},
            "error": None,
        }
        try:
            result = MEASURES[name](ctx, net, data)
        except GenMeasuresError as e:
            ctx.error(f"{type(e).__name__}: {e}", sortid="measures/failed")
            record["error"] = {"type": type(e).__name__, "message": str(e)}
        else:
            record["value"] = result.value
            record["diagnostics"] = result.diagnostics
        record["wall_time_s"] = time.perf_counter() - start
        records[name] = record
        logger.info(
            f"{model_id or 'model'}: {name} = {record['value']} in "
            f"{record['wall_time_s']:.2f}s"
        )
    ctx.measure = None
    ctx.cache.clear()
    return records
