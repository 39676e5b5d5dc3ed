"""Round-based federated training: broadcast, local training, aggregation, evaluation."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from fedconf.aggregation import AggregationMethod, aggregate
from fedconf.datagen import FederatedData
from fedconf.errors import ConfigError, NumericError
from fedconf.nn import DEFAULT_DIMS, MlpModel, apply_update, backward, forward, init_model, make_optimizer, mlp_specs, rmse_loss
from fedconf.tensor import Matrix, SeededRng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 100
    clients: int = 5
    participation_fraction: float = 1.0
    local_epochs: int = 5
    local_batch: int = 64
    local_lr: float = 1e-4
    local_weight_decay: float = 1e-5
    local_optimizer: str = "adam"
    method: AggregationMethod = field(default_factory=AggregationMethod)
    seed: int = 0
    eval_every: int = 1
    dims: tuple[int, ...] = DEFAULT_DIMS

    def __post_init__(self):
        for name in ("rounds", "clients", "local_epochs", "local_batch", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ConfigError("participation_fraction must lie in (0, 1]")
        if self.local_lr < 0 or self.local_weight_decay < 0:
            raise ConfigError("local_lr and local_weight_decay must be >= 0")
        if self.local_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown local optimizer {self.local_optimizer!r}")


@dataclass
class ClientState:
    client_id: int
    inputs: Matrix
    targets: Matrix

    def __post_init__(self):
        if self.inputs.shape[0] < 1 or self.inputs.shape[0] != self.targets.shape[0]:
            raise ConfigError(
                f"client {self.client_id}: need >= 1 sample and matching rows, "
                f"got inputs {self.inputs.shape} / targets {self.targets.shape}"
            )


@dataclass
class RoundMetrics:
    round: int
    method: str
    seed: int
    test_rmse: float
    client_losses: dict[int, float] = field(default_factory=dict)
    teacher_histogram: list[int] | None = None
    wall_ms: float = 0.0


def client_update(state: ClientState, global_model: MlpModel, cfg: FedConfig,
                  rng: SeededRng) -> tuple[MlpModel, float]:
    """Local training from a copy of the global model.

    Runs ``cfg.local_epochs`` epochs of shuffled mini-batches (last partial batch
    kept) with a freshly initialised optimizer. Returns the trained model and
    its mean batch loss over the final epoch.
    """
    model = global_model.copy()
    opt = make_optimizer(model, cfg.local_optimizer, cfg.local_lr, cfg.local_weight_decay)
    n = state.inputs.shape[0]
    last_epoch_losses: list[float] = []
    for epoch in range(cfg.local_epochs):
        order = rng.split(f"epoch{epoch}").permutation(n)
        last_epoch_losses = []
        for start in range(0, n, cfg.local_batch):
            idx = order[start:start + cfg.local_batch]
            trace = forward(model, state.inputs[idx])
            loss, g = rmse_loss(trace.output, state.targets[idx])
            model, opt = apply_update(model, backward(model, trace, g), opt)
            last_epoch_losses.append(loss)
    return model, float(np.mean(last_epoch_losses))


def sample_clients(n_clients: int, fraction: float, rng: SeededRng) -> list[int]:
    """ceil(fraction * K) distinct client indices, sorted ascending."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must lie in (0, 1]")
    m = math.ceil(fraction * n_clients - 1e-12)
    if m >= n_clients:
        return list(range(n_clients))
    return sorted(int(i) for i in rng.choice(n_clients, m))


def public_batches(public: Matrix, batch: int, steps: int, rng: SeededRng) -> list[Matrix]:
    """``steps`` full batches drawn by cycling fresh shuffles of the public pool."""
    n = public.shape[0]
    if n == 0:
        raise ConfigError("public pool is empty")
    need = batch * steps
    order = []
    cycle = 0
    while sum(len(o) for o in order) < need:
        order.append(rng.split(f"cycle{cycle}").permutation(n))
        cycle += 1
    flat = np.concatenate(order)[:need]
    return [public[flat[j * batch:(j + 1) * batch]] for j in range(steps)]


def evaluate(model: MlpModel, test_inputs: Matrix, test_targets: Matrix) -> float:
    if test_inputs.shape[0] == 0:
        raise ConfigError("test pool is empty")
    return rmse_loss(forward(model, test_inputs).output, test_targets)[0]


def client_rng(root: SeededRng, rnd: int, client_id: int) -> SeededRng:
    return root.split(f"round{rnd}").split(f"client{client_id}")


def run_round(global_model: MlpModel, clients: Sequence[ClientState], public: Matrix, cfg: FedConfig,
              rnd: int, root: SeededRng, *, execution_order: Sequence[int] | None = None,
              rng_for: Callable[[int], SeededRng] | None = None, workers: int = 1):
    """One communication round. Returns (new global model, client losses, distill report).

    Local results are keyed by client id and aggregated in id order, so neither
    ``execution_order`` nor ``workers`` can change the outcome.
    """
    round_rng = root.split(f"round{rnd}")
    selected = sample_clients(len(clients), cfg.participation_fraction, round_rng.split("sample"))
    order = list(selected if execution_order is None else [k for k in execution_order if k in selected])
    rng_for = rng_for or (lambda k: client_rng(root, rnd, k))

    def work(k):
        return k, client_update(clients[k], global_model, cfg, rng_for(k))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            done = dict(pool.map(work, order))
    else:
        done = dict(work(k) for k in order)
    local = [done[k][0] for k in selected]
    losses = {k: done[k][1] for k in selected}
    batches: list[Matrix] = []
    if cfg.method.kind != "fedavg":
        steps = cfg.method.steps_for(public.shape[0])
        batches = public_batches(public, cfg.method.distill_batch, steps, round_rng.split("public"))
    new_global, report = aggregate(local, batches, cfg.method)
    return new_global, losses, report


def run_federation(data: FederatedData, cfg: FedConfig, *, workers: int = 1,
                   initial_model: MlpModel | None = None) -> tuple[MlpModel, list[RoundMetrics]]:
    """Run ``cfg.rounds`` rounds; evaluate on rounds divisible by ``eval_every`` and the last."""
    if len(data.clients) < cfg.clients:
        raise ConfigError(f"config wants {cfg.clients} clients, data has {len(data.clients)}")
    clients = [ClientState(k, x, y) for k, (x, y) in enumerate(data.clients[:cfg.clients])]
    root = SeededRng(cfg.seed)
    model = initial_model or init_model(mlp_specs(cfg.dims), root.split("init"))
    if model.specs[0].in_dim != data.test_inputs.shape[1]:
        raise ConfigError(f"model input dim {model.specs[0].in_dim} != data dim {data.test_inputs.shape[1]}")
    metrics = []
    for rnd in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()
        model, losses, report = run_round(model, clients, data.public, cfg, rnd, root, workers=workers)
        if rnd % cfg.eval_every == 0 or rnd == cfg.rounds:
            rmse = evaluate(model, data.test_inputs, data.test_targets)
            if not math.isfinite(rmse):
                raise NumericError(f"round {rnd}: test RMSE is not finite ({rmse})")
            hist = None if report is None or report.histogram is None else [int(c) for c in report.histogram]
            metrics.append(RoundMetrics(rnd, cfg.method.kind, cfg.seed, rmse, losses, hist,
                                        (time.perf_counter() - t0) * 1000.0))
            log.debug("round %d %s seed %d test_rmse %.6f", rnd, cfg.method.kind, cfg.seed, rmse)
    return model, metrics
