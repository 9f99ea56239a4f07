# Desk-scale model zoos: procedurally generated classification tasks, a
# plain SGD trainer for ReLU MLPs, and hyperparameter sweeps that turn them
# into ZooEntry lists with varied generalization gaps.

import json
import math
from dataclasses import dataclass, field, replace
from functools import partial
from importlib.resources import files
from typing import Any, NamedTuple, Optional

import numpy as np
from numpy.typing import NDArray

from .common import DEFAULT_TARGET_TRAIN_ACCURACY, InvalidConfigError
from .evaluation import ZooEntry
from .logging_utils import logger
from .network import (
    Dense,
    Flatten,
    LabeledDataset,
    Layer,
    Network,
    ReLU,
    Shape,
    backward_layers,
    cross_entropy,
    layer_parameters,
    predict_logits,
    run_layers,
)
from .parallel import parallel_map

GENERATORS = ("gaussian-blobs", "two-spirals", "random-label-fraction")

_MASK64 = (1 << 64) - 1
_TRAIN_STREAM = 0x7A00


@dataclass(frozen=True)
class SyntheticTaskSpec:
    generator: str = "gaussian-blobs"
    input_dim: int = 16
    num_classes: int = 2
    n_train: int = 128
    n_test: int = 512
    label_noise_fraction: float = 0.0
    seed: int = 0
    # blob means are +-separation per coordinate
    separation: float = 3.0

    def __post_init__(self) -> None:
        if self.generator not in GENERATORS:
            raise InvalidConfigError(
                f"unknown generator {self.generator!r}, expected one of "
                + ", ".join(GENERATORS)
            )
        min_dim = 2 if self.generator == "two-spirals" else 1
        if self.input_dim < min_dim:
            raise InvalidConfigError(
                f"{self.generator} needs input_dim >= {min_dim}"
            )
        if self.num_classes < 2:
            raise InvalidConfigError(
                f"num_classes must be >= 2, got {self.num_classes}"
            )
        if min(self.n_train, self.n_test) < self.num_classes:
            raise InvalidConfigError(
                "n_train and n_test must be at least num_classes"
            )
        if not 0 <= self.label_noise_fraction <= 1:
            raise InvalidConfigError(
                f"label_noise_fraction {self.label_noise_fraction} not in "
                "[0, 1]"
            )
        if not self.separation > 0:
            raise InvalidConfigError(
                f"separation must be positive, got {self.separation}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "generator": self.generator,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "label_noise_fraction": self.label_noise_fraction,
            "seed": self.seed,
            "separation": self.separation,
        }


class Task(NamedTuple):
    train: LabeledDataset  # labels after label noise
    test: LabeledDataset
    spec: SyntheticTaskSpec
    clean_train_labels: NDArray[np.int64]


def _balanced_labels(
    rng: np.random.Generator, n: int, num_classes: int
) -> NDArray[np.int64]:
    return rng.permutation(np.arange(n, dtype=np.int64) % num_classes)


def _blob_means(
    rng: np.random.Generator, spec: SyntheticTaskSpec
) -> NDArray[np.float64]:
    signs = np.empty((spec.num_classes, spec.input_dim))
    signs[0] = 1
    signs[1] = -1
    if spec.num_classes > 2:
        signs[2:] = rng.choice(
            [-1.0, 1.0], size=(spec.num_classes - 2, spec.input_dim)
        )
    return spec.separation * signs


def _spiral_inputs(
    rng: np.random.Generator, labels: NDArray, spec: SyntheticTaskSpec
) -> NDArray[np.float64]:
    n = len(labels)
    t = rng.uniform(0.1, 1.0, n)
    angle = 2 * math.pi * labels / spec.num_classes + 3 * math.pi * t
    x = 0.1 * rng.standard_normal((n, spec.input_dim))
    x[:, 0] += 3 * t * np.cos(angle)
    x[:, 1] += 3 * t * np.sin(angle)
    return x


def _corrupt_labels(
    rng: np.random.Generator,
    labels: NDArray[np.int64],
    fraction: float,
    num_classes: int,
    redraw: bool,
) -> NDArray[np.int64]:
    """Changes round(fraction * n) labels.  ``redraw`` draws the new label
    uniformly from all classes; otherwise it is moved to a different
    class."""
    noisy = labels.copy()
    count = int(round(fraction * len(labels)))
    if count == 0:
        return noisy
    idx = rng.choice(len(labels), size=count, replace=False)
    if redraw:
        noisy[idx] = rng.integers(0, num_classes, size=count)
    else:
        shift = rng.integers(1, num_classes, size=count)
        noisy[idx] = (labels[idx] + shift) % num_classes
    return noisy


def generate_task(spec: SyntheticTaskSpec) -> Task:
    """Deterministic train/test split for ``spec``.  Label noise touches the
    train split only."""
    gen_id = GENERATORS.index(spec.generator)
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed & _MASK64, gen_id])
    )
    y_train = _balanced_labels(rng, spec.n_train, spec.num_classes)
    y_test = _balanced_labels(rng, spec.n_test, spec.num_classes)
    if spec.generator == "two-spirals":
        x_train = _spiral_inputs(rng, y_train, spec)
        x_test = _spiral_inputs(rng, y_test, spec)
    else:
        means = _blob_means(rng, spec)
        x_train = means[y_train] + rng.standard_normal(
            (spec.n_train, spec.input_dim)
        )
        x_test = means[y_test] + rng.standard_normal(
            (spec.n_test, spec.input_dim)
        )
    noisy = _corrupt_labels(
        rng,
        y_train,
        spec.label_noise_fraction,
        spec.num_classes,
        redraw=spec.generator == "random-label-fraction",
    )
    return Task(
        LabeledDataset(x_train.astype(np.float32), noisy, spec.num_classes),
        LabeledDataset(x_test.astype(np.float32), y_test, spec.num_classes),
        spec,
        y_train,
    )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    learning_rate: float = 0.05
    depth: int = 2
    width: int = 32
    seed: int = 0
    target_train_accuracy: float = DEFAULT_TARGET_TRAIN_ACCURACY

    def __post_init__(self) -> None:
        for name in ("epochs", "batch_size", "depth", "width"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(
                    f"{name} must be >= 1, got {getattr(self, name)}"
                )
        if not self.learning_rate > 0:
            raise InvalidConfigError(
                f"learning_rate must be positive, got {self.learning_rate}"
            )
        if not 0 < self.target_train_accuracy <= 1:
            raise InvalidConfigError(
                f"target_train_accuracy {self.target_train_accuracy} not in "
                "(0, 1]"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "depth": self.depth,
            "width": self.width,
            "seed": self.seed,
            "target_train_accuracy": self.target_train_accuracy,
        }


@dataclass(frozen=True, eq=False)
class TrainedModel:
    network: Network
    train_error: float
    test_error: float
    did_not_fit: bool
    epochs: int


def init_mlp(
    input_shape: Shape,
    num_classes: int,
    depth: int,
    width: int,
    rng: np.random.Generator,
) -> Network:
    """ReLU MLP with ``depth`` dense layers, He-initialized weights and zero
    biases, float32."""
    layers: list[Layer] = []
    if len(input_shape) > 1:
        layers.append(Flatten())
    fan_in = math.prod(input_shape)
    for k in range(depth):
        out = num_classes if k == depth - 1 else width
        w = rng.standard_normal((out, fan_in)) * math.sqrt(2 / fan_in)
        layers.append(
            Dense(w.astype(np.float32), np.zeros(out, dtype=np.float32))
        )
        if k < depth - 1:
            layers.append(ReLU())
        fan_in = out
    return Network(tuple(layers), input_shape, num_classes)


def error_rate(net: Network, data: LabeledDataset) -> float:
    pred = np.argmax(predict_logits(net, data.inputs), axis=1)
    return float(np.mean(pred != data.labels))


def train_model(task: Task, cfg: TrainConfig) -> TrainedModel:
    """Minibatch SGD on cross-entropy until the train accuracy reaches the
    target or the epoch budget runs out.  Deterministic given cfg.seed."""
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed & _MASK64, _TRAIN_STREAM])
    )
    train = task.train
    net = init_mlp(
        train.input_shape, train.num_classes, cfg.depth, cfg.width, rng
    )
    xs = train.inputs.astype(net.dtype)
    lr = net.dtype.type(cfg.learning_rate)
    train_error = error_rate(net, train)
    epochs = 0
    while epochs < cfg.epochs and 1 - train_error < cfg.target_train_accuracy:
        order = rng.permutation(train.n)
        for b in range(0, train.n, cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            values = run_layers(net, xs[idx])
            _, grad = cross_entropy(values[-1], train.labels[idx])
            grads: dict[int, tuple[NDArray, NDArray]] = {}
            backward_layers(net, values, grad, param_grads=grads)
            # the trainer owns the arrays until the network is returned
            for k, (dw, db) in grads.items():
                w, bias = layer_parameters(net.layers[k])
                w -= lr * dw.astype(net.dtype)
                bias -= lr * db.astype(net.dtype)
        epochs += 1
        train_error = error_rate(net, train)
    # revalidates the updated weights (non-finite values are rejected)
    net = Network(net.layers, net.input_shape, net.num_classes)
    did_not_fit = 1 - train_error < cfg.target_train_accuracy
    if did_not_fit:
        logger.warning(
            f"model depth={cfg.depth} width={cfg.width} seed={cfg.seed} did "
            f"not fit: train accuracy {1 - train_error:.3f} after "
            f"{epochs} epochs"
        )
    return TrainedModel(
        net, train_error, error_rate(net, task.test), did_not_fit, epochs
    )


def zoo_hyperparams(
    spec: SyntheticTaskSpec, cfg: TrainConfig
) -> dict[str, int | str]:
    """Discrete hyperparameter tags of a zoo entry."""
    return {
        "depth": cfg.depth,
        "width": cfg.width,
        "label_noise": f"{spec.label_noise_fraction:g}",
        "learning_rate": f"{cfg.learning_rate:g}",
    }


def _train_job(job: tuple[Task, TrainConfig]) -> TrainedModel:
    return train_model(*job)


def _train_all(
    jobs: list[tuple[Task, TrainConfig, str]], workers: Optional[int]
) -> list[ZooEntry]:
    models = parallel_map(
        _train_job, [(task, cfg) for task, cfg, _ in jobs], workers
    )
    entries = []
    for (task, cfg, prefix), m in zip(jobs, models):
        model_id = (
            f"{prefix}d{cfg.depth}-w{cfg.width}-lr{cfg.learning_rate:g}"
            f"-s{cfg.seed}"
        )
        entries.append(
            ZooEntry(
                model_id,
                zoo_hyperparams(task.spec, cfg),
                m.train_error,
                m.test_error,
                model_path=f"models/{model_id}.gmmf",
                data_path=f"data/{prefix or 'task-'}train.gmds",
                did_not_fit=m.did_not_fit,
                network=m.network,
                train_data=task.train,
            )
        )
    ids = [e.model_id for e in entries]
    if len(set(ids)) != len(ids):
        raise InvalidConfigError("sweep contains duplicate configurations")
    logger.info(
        f"trained {len(entries)} models, "
        f"{sum(e.did_not_fit for e in entries)} did not fit"
    )
    return entries


def build_zoo(
    task: Task,
    sweep: list[TrainConfig],
    workers: Optional[int] = 1,
    prefix: str = "",
) -> list[ZooEntry]:
    """Trains every configuration of ``sweep`` on ``task``.  The entries
    keep their networks and training data in memory; measure values are
    left empty."""
    if len(sweep) < 2:
        raise InvalidConfigError(
            f"a zoo needs at least two configurations, got {len(sweep)}"
        )
    return _train_all([(task, cfg, prefix) for cfg in sweep], workers)


@dataclass(frozen=True)
class ZooSweep:
    task: SyntheticTaskSpec
    label_noise: tuple[float, ...]
    depth: tuple[int, ...]
    width: tuple[int, ...]
    train: dict[str, Any] = field(default_factory=dict)
    replicates: int = 3

    def __post_init__(self) -> None:
        if not (self.label_noise and self.depth and self.width):
            raise InvalidConfigError("sweep axes must not be empty")
        if self.replicates < 1:
            raise InvalidConfigError(
                f"replicates must be >= 1, got {self.replicates}"
            )
        # fail early on bad training settings
        TrainConfig(**self.train)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ZooSweep":
        try:
            return cls(
                SyntheticTaskSpec(**data["task"]),
                tuple(float(v) for v in data["label_noise"]),
                tuple(int(v) for v in data["depth"]),
                tuple(int(v) for v in data["width"]),
                dict(data.get("train", {})),
                int(data.get("replicates", 3)),
            )
        except (KeyError, TypeError) as e:
            raise InvalidConfigError(f"invalid zoo sweep: {e}") from e

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task.to_dict(),
            "label_noise": list(self.label_noise),
            "depth": list(self.depth),
            "width": list(self.width),
            "train": dict(self.train),
            "replicates": self.replicates,
        }


def default_zoo_sweep() -> ZooSweep:
    """The sweep behind the default acceptance zoo."""
    path = files("genmeasures") / "data" / "default_zoo.json"
    with path.open(encoding="utf-8") as f:
        return ZooSweep.from_dict(json.load(f))


def build_default_zoo(
    seed: int = 0,
    replicates: Optional[int] = None,
    workers: Optional[int] = 1,
    sweep: Optional[ZooSweep] = None,
) -> list[ZooEntry]:
    """One task per (label-noise level, replicate), each trained over the
    depth x width grid.  Replicate r uses seed + r for both the data and
    the training."""
    if sweep is None:
        sweep = default_zoo_sweep()
    if replicates is None:
        replicates = sweep.replicates
    if replicates < 1:
        raise InvalidConfigError(f"replicates must be >= 1, got {replicates}")
    jobs = []
    for noise in sweep.label_noise:
        for rep in range(replicates):
            spec = replace(
                sweep.task, label_noise_fraction=noise, seed=seed + rep
            )
            task = generate_task(spec)
            for depth in sweep.depth:
                for width in sweep.width:
                    cfg = TrainConfig(
                        depth=depth, width=width, seed=seed + rep, **sweep.train
                    )
                    jobs.append((task, cfg, f"n{noise:g}-r{rep}-"))
    logger.info(f"training {len(jobs)} models for the default zoo")
    return _train_all(jobs, workers)
