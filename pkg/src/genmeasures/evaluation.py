# Scoring a measure against a model zoo.  The score is the conditional
# mutual information between the sign of a pairwise measure difference and
# the sign of the pairwise generalization-gap difference, minimized over
# every conditioning subset of hyperparameters of bounded size.  Each
# unordered pair enters in both orientations.

import math
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, field
from itertools import combinations
from typing import TYPE_CHECKING, Optional, Union

import numpy as np
from scipy.stats import entropy, kendalltau

from .common import (
    DEFAULT_MAX_CONDITION_SIZE,
    DegenerateZooError,
    InvalidConfigError,
    MissingMeasureValuesError,
    NonDiscreteHyperparameterError,
)
from .logging_utils import logger

if TYPE_CHECKING:
    from .network import LabeledDataset, Network

HyperValue = Union[int, str, bool]


@dataclass
class ZooEntry:
    model_id: str
    hyperparams: dict[str, HyperValue]
    train_error: float
    test_error: float
    measure_values: dict[str, float] = field(default_factory=dict)
    model_path: Optional[str] = None
    data_path: Optional[str] = None
    did_not_fit: bool = False
    # in-memory only, never serialized
    network: Optional["Network"] = field(
        default=None, repr=False, compare=False
    )
    train_data: Optional["LabeledDataset"] = field(
        default=None, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        for name in ("train_error", "test_error"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise InvalidConfigError(
                    f"{self.model_id}: {name} {v} not in [0, 1]"
                )


def generalization_gap(entry: ZooEntry) -> float:
    return entry.test_error - entry.train_error


@dataclass(frozen=True)
class SubsetScore:
    subset: tuple[str, ...]
    score: float  # 100 x conditional mutual information, nats
    gap_entropy: float  # 100 x H(sign gap | cell), the score's ceiling
    agreement_rate: float
    num_pairs: int
    cells_used: int
    cells_skipped: int


@dataclass(frozen=True)
class CmiScore:
    measure_name: str
    score: float
    min_subset: tuple[str, ...]
    per_condition: dict[str, SubsetScore]
    num_pairs: int
    warnings: tuple[str, ...] = ()


def subset_label(subset: Sequence[str]) -> str:
    return "+".join(subset) if subset else "(none)"


def _check_zoo(
    zoo: Sequence[ZooEntry], measure_name: str
) -> tuple[list[ZooEntry], list[str]]:
    if len(zoo) < 2:
        raise DegenerateZooError(
            f"a zoo needs at least two models, got {len(zoo)}"
        )
    entries = sorted(zoo, key=lambda e: e.model_id)
    ids = [e.model_id for e in entries]
    if len(set(ids)) != len(ids):
        raise DegenerateZooError("duplicate model ids in zoo")
    missing = [
        e.model_id for e in entries if measure_name not in e.measure_values
    ]
    if missing:
        raise MissingMeasureValuesError(measure_name, missing)
    keys = sorted(entries[0].hyperparams)
    for e in entries:
        if sorted(e.hyperparams) != keys:
            raise DegenerateZooError(
                f"{e.model_id}: hyperparameters {sorted(e.hyperparams)} "
                f"differ from {keys}"
            )
        for k, v in e.hyperparams.items():
            if not isinstance(v, (int, str, bool)):
                raise NonDiscreteHyperparameterError(
                    f"{e.model_id}: hyperparameter {k}={v!r} is not "
                    "discrete (use an int or a string tag)"
                )
        value = e.measure_values[measure_name]
        if not math.isfinite(value):
            logger.debug(f"{e.model_id}: {measure_name} is {value}")
    return entries, keys


def _mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) of two +-1 arrays."""
    ia = (a > 0).astype(np.int64)
    ib = (b > 0).astype(np.int64)
    joint = np.bincount(2 * ia + ib, minlength=4)
    mi = (
        entropy(np.bincount(ia, minlength=2))
        + entropy(np.bincount(ib, minlength=2))
        - entropy(joint)
    )
    return max(0.0, float(mi))


def _signed_pairs(
    entries: Sequence[ZooEntry], measure_name: str
) -> tuple[list[tuple[int, int]], np.ndarray, np.ndarray]:
    measure = [e.measure_values[measure_name] for e in entries]
    gap = [generalization_gap(e) for e in entries]
    pairs = []
    dm_signs = []
    dg_signs = []
    for i, j in combinations(range(len(entries)), 2):
        dm = measure[j] - measure[i]
        dg = gap[j] - gap[i]
        # ties and inf - inf carry no ordering
        if dm == 0 or dg == 0 or math.isnan(dm) or math.isnan(dg):
            continue
        pairs.append((i, j))
        dm_signs.append(1 if dm > 0 else -1)
        dg_signs.append(1 if dg > 0 else -1)
    return pairs, np.array(dm_signs), np.array(dg_signs)


def conditional_mi_score(
    zoo: Sequence[ZooEntry],
    measure_name: str,
    max_condition_size: int = DEFAULT_MAX_CONDITION_SIZE,
) -> CmiScore:
    """Conditional mutual information score of ``measure_name`` on ``zoo``,
    in units of 100 nats.  Pairs of models are compared only within cells
    where they share the values of the conditioning hyperparameters; cells
    with fewer than two usable pairs are skipped."""
    if max_condition_size < 0:
        raise InvalidConfigError(
            f"max_condition_size must be >= 0, got {max_condition_size}"
        )
    entries, keys = _check_zoo(zoo, measure_name)
    pairs, dm, dg = _signed_pairs(entries, measure_name)
    warnings: list[str] = []
    per_condition: dict[str, SubsetScore] = {}
    for size in range(min(max_condition_size, len(keys)) + 1):
        for subset in combinations(keys, size):
            cells: dict[tuple, list[int]] = defaultdict(list)
            for p, (i, j) in enumerate(pairs):
                vi = tuple(entries[i].hyperparams[k] for k in subset)
                vj = tuple(entries[j].hyperparams[k] for k in subset)
                if vi == vj:
                    cells[vi].append(p)
            mi_terms = []
            h_terms = []
            agree = 0
            used = 0
            skipped = 0
            for cell in sorted(cells, key=repr):
                members = cells[cell]
                if len(members) < 2:
                    skipped += 1
                    continue
                idx = np.array(members)
                # each unordered pair counts in both orientations
                sm = np.concatenate((dm[idx], -dm[idx]))
                sg = np.concatenate((dg[idx], -dg[idx]))
                mi = _mutual_information(sm, sg)
                gap_up = (sg > 0).astype(np.int64)
                gap_counts = np.bincount(gap_up, minlength=2)
                mi_terms.append(len(idx) * mi)
                h_terms.append(len(idx) * float(entropy(gap_counts)))
                agree += int(np.sum(dm[idx] == dg[idx]))
                used += len(idx)
            label = subset_label(subset)
            if skipped:
                msg = (
                    f"{measure_name}: conditioning on {label} skipped "
                    f"{skipped} cells with fewer than two usable pairs"
                )
                logger.warning(msg)
                warnings.append(msg)
            if used == 0:
                continue
            per_condition[label] = SubsetScore(
                subset,
                100 * math.fsum(mi_terms) / used,
                100 * math.fsum(h_terms) / used,
                agree / used,
                used,
                len(cells) - skipped,
                skipped,
            )
    if not per_condition:
        raise DegenerateZooError(
            f"{measure_name}: no conditioning subset has a cell with two "
            f"usable model pairs ({len(pairs)} usable pairs in total)"
        )
    best = min(per_condition.values(), key=lambda s: (s.score, len(s.subset)))
    return CmiScore(
        measure_name,
        best.score,
        best.subset,
        per_condition,
        len(pairs),
        tuple(warnings),
    )


def rank_correlation(zoo: Sequence[ZooEntry], measure_name: str) -> float:
    """Kendall's tau-b between the measure and the generalization gap.
    Returns 0.0 when either side is constant."""
    entries, _ = _check_zoo(zoo, measure_name)
    measure = np.array([e.measure_values[measure_name] for e in entries])
    gap = np.array([generalization_gap(e) for e in entries])
    tau = kendalltau(measure, gap, variant="b").statistic
    if math.isnan(tau):
        logger.warning(f"{measure_name}: Kendall tau undefined, reporting 0")
        return 0.0
    return float(tau)


@dataclass(frozen=True)
class TaskAverageScore:
    measure_name: str
    score: float
    per_task: tuple[CmiScore, ...]


def score_tasks(
    zoos: Sequence[Sequence[ZooEntry]],
    measure_name: str,
    max_condition_size: int = DEFAULT_MAX_CONDITION_SIZE,
) -> TaskAverageScore:
    """Average conditional MI score of a measure over several tasks."""
    if not zoos:
        raise DegenerateZooError("no zoos to score")
    scores = tuple(
        conditional_mi_score(zoo, measure_name, max_condition_size)
        for zoo in zoos
    )
    return TaskAverageScore(
        measure_name,
        math.fsum(s.score for s in scores) / len(scores),
        scores,
    )
