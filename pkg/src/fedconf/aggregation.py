"""Server-side aggregation: FedAvg, FedDF (mean teacher) and confidence distillation.

Both distillation strategies start from the uniform parameter average of the
local models and then take plain gradient steps on the student so that its
penultimate activations match a teacher target matrix under RMSE. They differ
only in how the target is built: FedDF averages the teachers' penultimate
outputs, confidence distillation copies each sample's row from the teacher
with the lowest entropy. The output layer keeps its averaged weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fedconf.confidence import EntropyMode, assemble_targets, select_teachers
from fedconf.errors import ConfigError, ShapeError
from fedconf.nn import MlpModel, OptimizerState, apply_update, backward_from, flatten_params, forward, penultimate, rmse_loss, unflatten_params
from fedconf.tensor import Matrix

METHODS = ("fedavg", "feddf", "confidence_distill")


@dataclass(frozen=True)
class AggregationMethod:
    kind: str = "confidence_distill"
    distill_steps: int | None = None  # None: one pass over the public pool
    distill_lr: float = 0.01
    distill_batch: int = 64
    entropy_mode: EntropyMode = field(default_factory=EntropyMode)

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ConfigError(f"unknown aggregation method {self.kind!r}; choose from {METHODS}")
        if self.kind != "fedavg":
            if self.distill_steps is not None and self.distill_steps < 1:
                raise ConfigError("distill_steps must be >= 1")
            if not self.distill_lr > 0:
                raise ConfigError("distill_lr must be > 0")
            if self.distill_batch < 1:
                raise ConfigError("distill_batch must be >= 1")

    def steps_for(self, n_public: int) -> int:
        if self.distill_steps is not None:
            return self.distill_steps
        return -(-n_public // self.distill_batch)


@dataclass
class DistillReport:
    losses: list[float]
    histogram: np.ndarray | None = None  # confidence distillation only


def fedavg_average(models: Sequence[MlpModel], weights: Sequence[float] | None = None) -> MlpModel:
    if not models:
        raise ConfigError("cannot average an empty model list")
    specs = models[0].specs
    for k, m in enumerate(models):
        if m.specs != specs:
            raise ConfigError(f"model {k} architecture differs from model 0")
    if weights is None:
        weights = [1.0 / len(models)] * len(models)
    if len(weights) != len(models):
        raise ConfigError(f"{len(weights)} weights for {len(models)} models")
    if any(w < 0 for w in weights):
        raise ConfigError("averaging weights must be non-negative")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError(f"averaging weights sum to {sum(weights)!r}, expected 1")
    acc = np.zeros(models[0].n_params)
    for m, w in zip(models, weights):
        acc += w * flatten_params(m)
    return unflatten_params(specs, acc)


def distill_step(student: MlpModel, teacher_targets: Matrix, batch: Matrix, lr: float) -> tuple[MlpModel, float]:
    """One SGD step pulling the student's penultimate output toward the targets.

    Returns the updated student and the loss recomputed after the step.
    """
    last_hidden = len(student.specs) - 2
    trace = forward(student, batch, upto=len(student.specs) - 1)
    pen = trace.activations[-1]
    if teacher_targets.shape != pen.shape:
        raise ShapeError(f"teacher targets {teacher_targets.shape} != student penultimate {pen.shape}")
    _, grad = rmse_loss(pen, teacher_targets)
    if last_hidden < 0:
        # single-layer model: the penultimate output is the input itself
        new = student.copy()
    else:
        grads = backward_from(student, trace, last_hidden, grad)
        new, _ = apply_update(student, grads, OptimizerState("sgd", lr))
    return new, rmse_loss(penultimate(new, batch), teacher_targets)[0]


def _batches_for(public_batches: Sequence[Matrix], steps: int):
    if not public_batches:
        raise ConfigError("public pool is empty; distillation needs unlabeled data")
    for j in range(steps):
        yield public_batches[j % len(public_batches)]


def feddf_aggregate(local_models: Sequence[MlpModel], public_batches: Sequence[Matrix],
                    method: AggregationMethod) -> tuple[MlpModel, DistillReport]:
    student = fedavg_average(local_models)
    steps = method.distill_steps or len(public_batches)
    losses = []
    for batch in _batches_for(public_batches, steps):
        pens = [penultimate(m, batch) for m in local_models]
        target = np.mean(np.stack(pens), axis=0)
        student, loss = distill_step(student, target, batch, method.distill_lr)
        losses.append(loss)
    return student, DistillReport(losses)


def confidence_distill_aggregate(local_models: Sequence[MlpModel], public_batches: Sequence[Matrix],
                                 method: AggregationMethod) -> tuple[MlpModel, DistillReport]:
    student = fedavg_average(local_models)
    steps = method.distill_steps or len(public_batches)
    hist = np.zeros(len(local_models), dtype=np.int64)
    losses = []
    for batch in _batches_for(public_batches, steps):
        pens = [penultimate(m, batch) for m in local_models]
        selection = select_teachers(pens, method.entropy_mode)
        hist += selection.histogram
        student, loss = distill_step(student, assemble_targets(pens, selection), batch, method.distill_lr)
        losses.append(loss)
    return student, DistillReport(losses, hist)


def aggregate(local_models: Sequence[MlpModel], public_batches: Sequence[Matrix],
              method: AggregationMethod) -> tuple[MlpModel, DistillReport | None]:
    if method.kind == "fedavg":
        return fedavg_average(local_models), None
    if method.kind == "feddf":
        return feddf_aggregate(local_models, public_batches, method)
    return confidence_distill_aggregate(local_models, public_batches, method)
