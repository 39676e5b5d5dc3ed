"""Multilayer perceptron for scalar regression with manual backpropagation.

Layout conventions: a layer maps ``a @ W + b`` with ``W`` of shape
``(in_dim, out_dim)`` and ``b`` of shape ``(1, out_dim)``. Batches are rows.
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fedconf.errors import ConfigError, DomainError, FormatError, NumericError, ShapeError
from fedconf.tensor import Matrix, SeededRng, relu

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"


def mlp_specs(dims: list[int] | tuple[int, ...]) -> tuple[LayerSpec, ...]:
    """Relu hidden layers and an identity output layer, e.g. ``[8, 64, 32, 16, 1]``."""
    if len(dims) < 2:
        raise ConfigError("need at least an input and an output dimension")
    n = len(dims) - 1
    return tuple(
        LayerSpec(dims[i], dims[i + 1], "identity" if i == n - 1 else "relu") for i in range(n)
    )


DEFAULT_DIMS = (8, 64, 32, 16, 1)


def validate_specs(specs) -> tuple[LayerSpec, ...]:
    specs = tuple(specs)
    if not specs:
        raise ConfigError("model needs at least one layer")
    for i, s in enumerate(specs):
        if s.in_dim < 1 or s.out_dim < 1:
            raise ConfigError(f"layer {i}: dimensions must be positive, got {s}")
        if s.activation not in ACTIVATIONS:
            raise ConfigError(f"layer {i}: unknown activation {s.activation!r}")
    for i in range(len(specs) - 1):
        if specs[i].out_dim != specs[i + 1].in_dim:
            raise ConfigError(
                f"layer {i} out_dim {specs[i].out_dim} does not match layer {i + 1} in_dim {specs[i + 1].in_dim}"
            )
    last = specs[-1]
    if last.activation != "identity" or last.out_dim != 1:
        raise ConfigError("final layer must be identity with out_dim 1")
    if len(specs) >= 2 and specs[-2].activation != "relu":
        raise ConfigError("penultimate layer must use relu (its outputs feed the entropy)")
    return specs


@dataclass
class MlpModel:
    specs: tuple[LayerSpec, ...]
    weights: list[Matrix]
    biases: list[Matrix]

    def copy(self) -> "MlpModel":
        return MlpModel(self.specs, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @property
    def n_params(self) -> int:
        return param_count(self.specs)

    @property
    def penultimate_dim(self) -> int:
        return self.specs[-1].in_dim

    def predict(self, x: Matrix) -> Matrix:
        return forward(self, x).output


def param_count(specs) -> int:
    return sum(s.in_dim * s.out_dim + s.out_dim for s in specs)


def init_model(specs, rng: SeededRng) -> MlpModel:
    """He-normal weights (stddev sqrt(2/in_dim)) and zero biases."""
    specs = validate_specs(specs)
    weights, biases = [], []
    for i, s in enumerate(specs):
        layer_rng = rng.split(f"layer{i}")
        weights.append(layer_rng.normal(s.in_dim, s.out_dim, 0.0, float(np.sqrt(2.0 / s.in_dim))))
        biases.append(np.zeros((1, s.out_dim)))
    return MlpModel(specs, weights, biases)


@dataclass
class ForwardTrace:
    """Per-layer pre-activations and activations.

    ``activations[0]`` is the input batch and ``activations[i + 1]`` the output of
    layer ``i``; ``pre[i]`` is layer ``i`` before its activation.
    """

    pre: list[Matrix]
    activations: list[Matrix]

    @property
    def output(self) -> Matrix:
        return self.activations[-1]

    @property
    def penultimate(self) -> Matrix:
        return self.activations[-2]


def forward(model: MlpModel, batch: Matrix, upto: int | None = None) -> ForwardTrace:
    """Run the model on ``batch``; ``upto`` stops after that many layers."""
    if batch.ndim != 2 or batch.shape[1] != model.specs[0].in_dim:
        raise ShapeError(f"batch shape {batch.shape} does not fit input dim {model.specs[0].in_dim}")
    n_layers = len(model.specs) if upto is None else upto
    a = batch
    pre, acts = [], [batch]
    for s, w, b in zip(model.specs[:n_layers], model.weights, model.biases):
        z = a @ w + b
        a = relu(z) if s.activation == "relu" else z
        pre.append(z)
        acts.append(a)
    return ForwardTrace(pre, acts)


def penultimate(model: MlpModel, batch: Matrix) -> Matrix:
    """Activations feeding the output layer, without evaluating the output layer."""
    return forward(model, batch, upto=len(model.specs) - 1).activations[-1]


@dataclass
class Gradients:
    weights: list[Matrix]
    biases: list[Matrix]


def backward_from(model: MlpModel, trace: ForwardTrace, layer: int, act_grad: Matrix) -> Gradients:
    """Reverse-mode pass starting from d(loss)/d(activation of layer ``layer``).

    Layers after ``layer`` receive zero gradients.
    """
    if act_grad.shape != trace.activations[layer + 1].shape:
        raise ShapeError(f"gradient shape {act_grad.shape} != activation shape {trace.activations[layer + 1].shape}")
    gw = [np.zeros_like(w) if i > layer else None for i, w in enumerate(model.weights)]
    gb = [np.zeros_like(b) if i > layer else None for i, b in enumerate(model.biases)]
    delta = act_grad
    for i in range(layer, -1, -1):
        if model.specs[i].activation == "relu":
            delta = delta * (trace.pre[i] > 0.0)  # relu_grad, without the float copy
        gw[i] = trace.activations[i].T @ delta
        gb[i] = delta.sum(axis=0, keepdims=True)
        if i > 0:
            delta = delta @ model.weights[i].T
    return Gradients(gw, gb)


def backward(model: MlpModel, trace: ForwardTrace, output_grad: Matrix) -> Gradients:
    if len(trace.pre) != len(model.specs):
        raise ShapeError("trace does not cover every layer of the model")
    return backward_from(model, trace, len(model.specs) - 1, output_grad)


_RMSE_FLOOR = 1e-12


def rmse_loss(pred: Matrix, target: Matrix) -> tuple[float, Matrix]:
    """Root-mean-square error over all elements and its gradient w.r.t. ``pred``.

    The gradient has unit norm for any nonzero residual, so residuals at
    round-off level (relative to the target magnitude) are treated as zero
    and yield a zero gradient.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    n = pred.size
    if n == 0:
        raise DomainError("rmse_loss needs at least one element")
    diff = pred - target
    loss = float(np.sqrt(np.sum(diff * diff) / n))
    if loss <= _RMSE_FLOOR * max(1.0, float(np.max(np.abs(target)))):
        return loss, np.zeros_like(pred)
    return loss, diff / (n * loss)


def mse_loss(pred: Matrix, target: Matrix) -> tuple[float, Matrix]:
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise DomainError("mse_loss needs at least one element")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / pred.size


LOSSES = {"rmse": rmse_loss, "mse": mse_loss}


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[Matrix] = field(default_factory=list)
    v: list[Matrix] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")


def make_optimizer(model: MlpModel, kind: str = "adam", learning_rate: float = 1e-4,
                   weight_decay: float = 0.0, **kw) -> OptimizerState:
    opt = OptimizerState(kind, learning_rate, weight_decay, **kw)
    if kind == "adam":
        params = model.weights + model.biases
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    return opt


def apply_update(model: MlpModel, grads: Gradients, opt: OptimizerState) -> tuple[MlpModel, OptimizerState]:
    """One optimizer step. Returns new model and state; inputs are left untouched.

    sgd:  w <- w - lr * (g + wd * w)
    adam: bias-corrected Adam with the decoupled decay term lr * wd * w.
    """
    n = len(model.specs)
    params = model.weights + model.biases
    gs = grads.weights + grads.biases
    for i, (p, g) in enumerate(zip(params, gs)):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {i} shape {g.shape} != parameter shape {p.shape}")
    # one cheap reduction per tensor; locate the culprit only when something is off
    if not math.isfinite(sum(float(g.sum()) for g in gs)):
        for i, g in enumerate(gs):
            if not np.all(np.isfinite(g)):
                kind = "weights" if i < n else "biases"
                raise NumericError(f"non-finite gradient in layer {i % n} {kind}")
    lr, wd = opt.learning_rate, opt.weight_decay
    step = opt.step + 1
    if opt.kind == "sgd":
        new = [p - lr * g - lr * wd * p if wd else p - lr * g for p, g in zip(params, gs)]
        new_opt = replace(opt, step=step)
    else:
        if not opt.m:
            opt = make_optimizer(model, "adam", lr, wd, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
        b1, b2 = opt.beta1, opt.beta2
        c1 = 1.0 - b1**step
        c2 = 1.0 - b2**step
        ms, vs, new = [], [], []
        for p, g, m, v in zip(params, gs, opt.m, opt.v):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + opt.eps)
            if wd:
                upd = upd + wd * p
            new.append(p - lr * upd)
            ms.append(m)
            vs.append(v)
        new_opt = replace(opt, step=step, m=ms, v=vs)
    return MlpModel(model.specs, new[:n], new[n:]), new_opt


def loss_and_grads(model: MlpModel, batch: Matrix, target: Matrix, loss: str = "rmse"):
    trace = forward(model, batch)
    value, g = LOSSES[loss](trace.output, target)
    return value, backward(model, trace, g)


def flatten_params(model: MlpModel) -> np.ndarray:
    """All parameters as one 1-D vector: layer by layer, weights (row-major) then biases."""
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def unflatten_params(specs, flat: np.ndarray) -> MlpModel:
    specs = tuple(specs)
    flat = np.asarray(flat, dtype=np.float64).ravel()
    total = param_count(specs)
    if flat.size != total:
        raise ShapeError(f"flat vector has {flat.size} entries, model needs {total}")
    weights, biases, pos = [], [], 0
    for s in specs:
        k = s.in_dim * s.out_dim
        weights.append(flat[pos:pos + k].reshape(s.in_dim, s.out_dim).copy())
        pos += k
        biases.append(flat[pos:pos + s.out_dim].reshape(1, s.out_dim).copy())
        pos += s.out_dim
    return MlpModel(specs, weights, biases)


def _relu_pattern(trace: ForwardTrace) -> list[np.ndarray]:
    return [z > 0 for z in trace.pre]


def grad_check(model: MlpModel, batch: Matrix, target: Matrix, loss: str = "rmse", h: float = 1e-5) -> float:
    """Largest relative disagreement between backprop and central differences.

    Relative error per parameter is |a - f| / max(1e-8, |a| + |f|). Parameters
    whose +-h stencil flips any relu on/off pattern sit on a kink where the
    loss has no derivative; they are skipped.
    """
    base = forward(model, batch)
    value_grad = LOSSES[loss](base.output, target)[1]
    grads = backward(model, base, value_grad)
    analytic = flatten_params(MlpModel(model.specs, grads.weights, grads.biases))
    pattern = _relu_pattern(base)
    flat = flatten_params(model)
    loss_fn = LOSSES[loss]
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        values, kink = [], False
        for shift in (h, -h):
            flat[i] = orig + shift
            trace = forward(unflatten_params(model.specs, flat), batch)
            kink = kink or any(not np.array_equal(a, b) for a, b in zip(_relu_pattern(trace), pattern))
            values.append(loss_fn(trace.output, target)[0])
        flat[i] = orig
        if kink:
            continue
        fd = (values[0] - values[1]) / (2.0 * h)
        err = abs(analytic[i] - fd) / max(1e-8, abs(analytic[i]) + abs(fd))
        worst = max(worst, err)
    return worst


# Checkpoint text format:
#   fedconf-mlp 1
#   layers <L>
#   <in_dim> <out_dim> <activation>      (L lines)
#   params <N>
#   <float.hex value>                    (N lines, flatten_params order)
_CKPT_MAGIC = "fedconf-mlp 1"


def save_model(model: MlpModel, path: str | Path) -> None:
    lines = [_CKPT_MAGIC, f"layers {len(model.specs)}"]
    lines += [f"{s.in_dim} {s.out_dim} {s.activation}" for s in model.specs]
    flat = flatten_params(model)
    lines.append(f"params {flat.size}")
    lines += [float(x).hex() for x in flat]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_model(path: str | Path) -> MlpModel:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a fedconf model checkpoint")
    try:
        n_layers = int(lines[1].split()[1])
        specs = []
        for line in lines[2:2 + n_layers]:
            i, o, act = line.split()
            specs.append(LayerSpec(int(i), int(o), act))
        n = int(lines[2 + n_layers].split()[1])
        values = [float.fromhex(x) for x in lines[3 + n_layers:3 + n_layers + n]]
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if len(values) != n:
        raise FormatError(f"{path}: expected {n} parameters, found {len(values)}")
    return unflatten_params(validate_specs(specs), np.array(values))
