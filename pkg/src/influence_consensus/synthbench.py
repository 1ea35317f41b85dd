"""Desk-scale synthetic multitask benchmark.

A pool of labelled Gaussian-class examples (a fraction carrying deliberately
wrong labels) and K tasks, each defined by a class mixture, stand in for a
large instruction-tuning pool and its target benchmarks.  A softmax-regression
model trained with batch-size-1 SGD supplies exact per-example gradients, so
the whole select-then-retrain loop runs in seconds.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .datastore import FeatureShard, ScoreTable
from .errors import TrainingDivergedError, ValidationError
from .influence import stream_task_scores
from .projection import DESK_OUT_DIM, ProjectionSpec, project_and_normalize
from .results import EvalReport, SelectionResult
from .selection import rel_metric, select

# rng stream tags, so warmup, evaluation and world generation never share draws
_WARMUP_STREAM = 1
_EVAL_STREAM = 2
SCHEDULES = ("linear", "constant")


@dataclass
class SyntheticSpec:
    seed: int = 0
    feature_dim: int = 20
    n_classes: int = 10
    n_tasks: int = 5
    pool_size: int = 2000
    val_per_task: int = 50
    test_per_task: int = 200
    distractor_fraction: float = 0.2
    class_sep: float = 3.0
    feature_scale: float = 1.0
    mixtures: Optional[List[List[float]]] = None

    def __post_init__(self) -> None:
        if min(self.feature_dim, self.n_classes, self.n_tasks, self.pool_size) < 1:
            raise ValidationError("dimensions, classes, tasks and pool size must be >= 1")
        if self.n_classes < 2:
            raise ValidationError("need at least two classes")
        if self.val_per_task < 1 or self.test_per_task < 1:
            raise ValidationError("per-task validation and test sets must be non-empty")
        if not 0.0 <= self.distractor_fraction < 1.0:
            raise ValidationError("distractor_fraction must lie in [0, 1)")
        if self.mixtures is not None:
            mix = np.asarray(self.mixtures, dtype=np.float64)
            if mix.shape != (self.n_tasks, self.n_classes):
                raise ValidationError(f"mixtures must be {self.n_tasks} x {self.n_classes}")
            if (mix < 0).any() or not np.allclose(mix.sum(axis=1), 1.0):
                raise ValidationError("each task mixture must be a probability vector")

    def task_mixtures(self) -> np.ndarray:
        """Class weights per task, shape ``(n_tasks, n_classes)``.

        Default layout: only the first ``n_tasks + 1`` classes ("core") are
        needed by any task; the remaining pool classes are redundant.  Task 0
        is narrow (core class 0 only); task t >= 1 is uniform over core
        classes t, t+1, t+2 (wrapping), so neighbouring tasks share classes.
        The narrow task's influence scores are spread much wider than the
        others', which is what makes raw score merging miscalibrated.
        """
        if self.mixtures is not None:
            return np.asarray(self.mixtures, dtype=np.float64)
        c, k = self.n_classes, self.n_tasks
        core = min(c, k + 1)
        width = min(3, core)
        mix = np.zeros((k, c))
        mix[0, 0] = 1.0
        for t in range(1, k):
            for j in range(width):
                mix[t, (t + j) % core] = 1.0
        return mix / mix.sum(axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class World:
    spec: SyntheticSpec
    class_means: np.ndarray
    pool_x: np.ndarray
    pool_y: np.ndarray  # training labels, distractors included
    pool_true: np.ndarray
    val_x: List[np.ndarray]
    val_y: List[np.ndarray]
    test_x: List[np.ndarray]
    test_y: List[np.ndarray]
    task_names: List[str] = field(default_factory=list)

    @property
    def is_distractor(self) -> np.ndarray:
        return self.pool_y != self.pool_true


@dataclass
class ModelParams:
    weights: np.ndarray  # n_classes x feature_dim
    bias: np.ndarray  # n_classes

    @classmethod
    def zeros(cls, n_classes: int, feature_dim: int) -> "ModelParams":
        return cls(np.zeros((n_classes, feature_dim)), np.zeros(n_classes))

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    @classmethod
    def from_flat(cls, theta: np.ndarray, n_classes: int, feature_dim: int) -> "ModelParams":
        theta = np.asarray(theta, dtype=np.float64)
        split = n_classes * feature_dim
        return cls(theta[:split].reshape(n_classes, feature_dim).copy(), theta[split:].copy())

    def copy(self) -> "ModelParams":
        return ModelParams(self.weights.copy(), self.bias.copy())

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        return cls(np.asarray(data["weights"], dtype=np.float64), np.asarray(data["bias"], dtype=np.float64))


@dataclass
class TrainerConfig:
    learning_rate: float = 0.1
    epochs: int = 3
    warmup_ratio: float = 0.05
    seed: int = 0
    schedule: str = "linear"

    def __post_init__(self) -> None:
        if self.schedule not in SCHEDULES:
            raise ValidationError(f"schedule must be one of {SCHEDULES}")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if not 0.0 < self.warmup_ratio <= 1.0:
            raise ValidationError("warmup_ratio must lie in (0, 1]")


def generate_multitask(spec: SyntheticSpec) -> World:
    rng = np.random.default_rng(spec.seed)
    c, d = spec.n_classes, spec.feature_dim
    means = rng.normal(size=(c, d))
    means *= spec.class_sep / np.linalg.norm(means, axis=1, keepdims=True)

    scale = spec.feature_scale

    def draw(labels):
        return scale * (means[labels] + rng.normal(size=(labels.shape[0], d)))

    pool_true = rng.integers(0, c, size=spec.pool_size)
    pool_x = draw(pool_true)
    pool_y = pool_true.copy()
    n_bad = int(round(spec.distractor_fraction * spec.pool_size))
    bad = rng.choice(spec.pool_size, size=n_bad, replace=False)
    # shift by 1..C-1 so the wrong label is uniform over the other classes
    pool_y[bad] = (pool_true[bad] + rng.integers(1, c, size=n_bad)) % c

    mix = spec.task_mixtures()
    val_x, val_y, test_x, test_y = [], [], [], []
    for t in range(spec.n_tasks):
        y = rng.choice(c, size=spec.val_per_task, p=mix[t])
        val_x.append(draw(y))
        val_y.append(y)
        y = rng.choice(c, size=spec.test_per_task, p=mix[t])
        test_x.append(draw(y))
        test_y.append(y)
    return World(
        spec=spec,
        class_means=means,
        pool_x=pool_x,
        pool_y=pool_y,
        pool_true=pool_true,
        val_x=val_x,
        val_y=val_y,
        test_x=test_x,
        test_y=test_y,
        task_names=[f"task{t}" for t in range(spec.n_tasks)],
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return softmax(np.atleast_2d(x) @ params.weights.T + params.bias)


def cross_entropy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    """Mean negative log-likelihood."""
    x = np.atleast_2d(x)
    logits = x @ params.weights.T + params.bias
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(x.shape[0]), np.atleast_1d(y)].mean())


def per_example_gradient(params: ModelParams, x: np.ndarray, y: int) -> np.ndarray:
    """Cross-entropy gradient for one example, flattened weights-then-bias."""
    err = predict_proba(params, x)[0]
    err[int(y)] -= 1.0
    return np.concatenate([np.outer(err, x).ravel(), err])


def per_example_gradients(params: ModelParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row i is ``per_example_gradient(params, x[i], y[i])``."""
    err = predict_proba(params, x)
    err[np.arange(x.shape[0]), y] -= 1.0
    gw = err[:, :, None] * x[:, None, :]
    return np.concatenate([gw.reshape(x.shape[0], -1), err], axis=1)


def sgd(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    lr: float,
    epochs: int,
    rng: np.random.Generator,
    schedule: str = "constant",
) -> ModelParams:
    """Batch-size-1 SGD, reshuffling each epoch with ``rng``.

    ``schedule="linear"`` decays the step size from ``lr`` towards 0 over the
    run (step t of T uses ``lr * (1 - t / T)``).
    """
    p = params.copy()
    total = epochs * x.shape[0]
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(x.shape[0]):
            step = lr * (1.0 - t / total) if schedule == "linear" else lr
            t += 1
            xi = x[i]
            err = softmax(p.weights @ xi + p.bias)
            err[y[i]] -= 1.0
            p.weights -= step * np.outer(err, xi)
            p.bias -= step * err
        if not (np.isfinite(p.weights).all() and np.isfinite(p.bias).all()):
            raise TrainingDivergedError(f"non-finite parameters after SGD epoch (lr={lr})")
    return p


def warmup_ids(n: int, config: TrainerConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, _WARMUP_STREAM])
    m = math.ceil(round(config.warmup_ratio * n, 9))
    return np.sort(rng.choice(n, size=m, replace=False))


def sgd_warmup(world: World, config: TrainerConfig) -> ModelParams:
    """Train from zero on a seeded random ``warmup_ratio`` slice of the pool."""
    ids = warmup_ids(world.pool_x.shape[0], config)
    rng = np.random.default_rng([config.seed, _WARMUP_STREAM, 1])
    params = ModelParams.zeros(world.spec.n_classes, world.spec.feature_dim)
    return sgd(params, world.pool_x[ids], world.pool_y[ids], config.learning_rate, config.epochs, rng, config.schedule)


def train_on(world: World, selected_ids: Sequence[int], config: TrainerConfig) -> ModelParams:
    ids = np.asarray(selected_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValidationError("cannot train on an empty selection")
    ids = np.sort(ids)
    if ids[0] < 0 or ids[-1] >= world.pool_x.shape[0]:
        raise ValidationError("selected id out of range")
    if np.any(ids[1:] == ids[:-1]):
        raise ValidationError("selection contains duplicate ids")
    rng = np.random.default_rng([config.seed, _EVAL_STREAM])
    params = ModelParams.zeros(world.spec.n_classes, world.spec.feature_dim)
    return sgd(params, world.pool_x[ids], world.pool_y[ids], config.learning_rate, config.epochs, rng, config.schedule)


def task_accuracies(world: World, params: ModelParams) -> np.ndarray:
    return np.array(
        [np.mean(predict_proba(params, x).argmax(axis=1) == y) for x, y in zip(world.test_x, world.test_y)]
    )


def evaluate_subset(world: World, selected_ids: Sequence[int], config: TrainerConfig) -> np.ndarray:
    """Per-task held-out accuracy of a fresh model trained on ``selected_ids``.

    The selection is sorted before training, so the visiting order depends on
    ``config.seed`` only.
    """
    return task_accuracies(world, train_on(world, selected_ids, config))


def world_gradients(world: World, params: ModelParams) -> tuple:
    """Raw gradient shards for the pool and each task's validation set."""
    pool = FeatureShard(per_example_gradients(params, world.pool_x, world.pool_y))
    vals = [FeatureShard(per_example_gradients(params, x, y)) for x, y in zip(world.val_x, world.val_y)]
    return pool, vals


def score_world(
    world: World,
    params: ModelParams,
    *,
    proj_dim: int = DESK_OUT_DIM,
    proj_seed: int = 0,
    block_rows: int = 512,
    n_workers: Optional[int] = None,
) -> ScoreTable:
    """Gradients -> projection -> normalization -> per-task mean influence."""
    pool, vals = world_gradients(world, params)
    spec = ProjectionSpec(seed=proj_seed, in_dim=pool.dim, out_dim=proj_dim)
    pool_blocks = [
        project_and_normalize(spec, FeatureShard(pool.values[s : s + block_rows], base_id=s), n_workers)[0]
        for s in range(0, pool.count, block_rows)
    ]
    columns = []
    for name, val in zip(world.task_names, vals):
        v, _ = project_and_normalize(spec, val, n_workers)
        columns.append(stream_task_scores(pool_blocks, v, task_name=name, n_workers=n_workers).scores)
    return ScoreTable(np.stack(columns, axis=1), list(world.task_names))


@dataclass
class PipelineRun:
    report: EvalReport
    selection: SelectionResult
    table: ScoreTable
    world: World
    warmup: ModelParams


def run_pipeline(
    spec: SyntheticSpec,
    trainer: TrainerConfig,
    p: float,
    strategy: str = "vote",
    *,
    proj_dim: int = DESK_OUT_DIM,
    proj_seed: Optional[int] = None,
    n_workers: Optional[int] = None,
    full_scores: Optional[np.ndarray] = None,
) -> PipelineRun:
    """Full synthetic run: world, warmup, scores, selection, retrain, Rel.

    ``full_scores`` may carry cached full-pool accuracies for the same world
    and trainer to skip retraining on the whole pool.
    """
    world = generate_multitask(spec)
    warm = sgd_warmup(world, trainer)
    table = score_world(world, warm, proj_dim=proj_dim, proj_seed=spec.seed if proj_seed is None else proj_seed, n_workers=n_workers)
    selection = select(table, p, strategy, seed=spec.seed if strategy == "random" else None)
    sub = evaluate_subset(world, selection.selected_ids, trainer)
    if full_scores is None:
        full_scores = evaluate_subset(world, np.arange(spec.pool_size), trainer)
    report = rel_metric(sub, full_scores, world.task_names)
    return PipelineRun(report, selection, table, world, warm)


def end_to_end(spec: SyntheticSpec, trainer: TrainerConfig, p: float, strategy: str = "vote", **kwargs) -> EvalReport:
    return run_pipeline(spec, trainer, p, strategy, **kwargs).report
