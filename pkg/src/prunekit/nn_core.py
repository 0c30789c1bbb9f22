"""Minimal deterministic training stack for dense multi-output regressors.

Tensors are plain numpy arrays (float32 by default, row-major). A model is
an ordered list of dense layers computing ``act(x @ W.T + b)`` with ``W`` of
shape ``(out_dim, in_dim)``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import Lcg64
from .exceptions import ConfigurationError, NumericError, ShapeError

ACTIVATIONS = ("relu", "identity")
DTYPE = np.float32


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_dim: int
    out_dim: int
    activation: str = "relu"
    prunable: bool = True


@dataclass
class Layer:
    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray

    @property
    def name(self):
        return self.spec.name


@dataclass
class Model:
    layers: list

    @property
    def in_dim(self):
        return self.layers[0].spec.in_dim

    @property
    def out_dim(self):
        return self.layers[-1].spec.out_dim

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def copy(self):
        return Model([Layer(l.spec, l.weight.copy(), l.bias.copy()) for l in self.layers])

    def astype(self, dtype):
        return Model([
            Layer(l.spec, l.weight.astype(dtype), l.bias.astype(dtype))
            for l in self.layers
        ])

    def n_params(self):
        return sum(l.weight.size + l.bias.size for l in self.layers)


def mlp_specs(in_dim=16, hidden=(64, 64), out_dim=3):
    """Layer specs for a relu MLP with an identity regression head."""
    dims = [in_dim, *hidden, out_dim]
    specs = []
    for k in range(len(dims) - 1):
        last = k == len(dims) - 2
        specs.append(LayerSpec(
            name="head" if last else f"dense_{k}",
            in_dim=dims[k],
            out_dim=dims[k + 1],
            activation="identity" if last else "relu",
        ))
    return specs


def validate_specs(specs):
    if not specs:
        raise ConfigurationError("a model needs at least one layer")
    seen = set()
    for k, spec in enumerate(specs):
        if spec.in_dim < 1 or spec.out_dim < 1:
            raise ConfigurationError(f"layer {spec.name!r}: dimensions must be positive")
        if spec.activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"layer {spec.name!r}: unknown activation {spec.activation!r}")
        if spec.name in seen:
            raise ConfigurationError(f"duplicate layer name {spec.name!r}")
        seen.add(spec.name)
        if k > 0 and specs[k - 1].out_dim != spec.in_dim:
            raise ConfigurationError(
                f"layer {spec.name!r} expects {spec.in_dim} inputs but "
                f"{specs[k - 1].name!r} produces {specs[k - 1].out_dim}")
    if specs[-1].activation != "identity":
        raise ConfigurationError("the output layer must use the identity activation")


def init_model(specs, seed):
    """Glorot-uniform weights from :class:`Lcg64`, zero biases.

    Layers are initialised in order; each weight matrix consumes
    ``out_dim * in_dim`` uniforms in row-major order.
    """
    specs = list(specs)
    validate_specs(specs)
    rng = Lcg64(seed)
    layers = []
    for spec in specs:
        limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        w = rng.uniform(spec.in_dim * spec.out_dim, -limit, limit)
        layers.append(Layer(
            spec,
            w.reshape(spec.out_dim, spec.in_dim).astype(DTYPE),
            np.zeros(spec.out_dim, dtype=DTYPE),
        ))
    return Model(layers)


def _as_batch(model, batch):
    batch = np.asarray(batch, dtype=model.dtype)
    if batch.ndim != 2 or batch.shape[1] != model.in_dim:
        raise ShapeError(f"expected a batch of shape (B, {model.in_dim}), got {batch.shape}")
    return batch


def _forward_cache(model, batch):
    x = _as_batch(model, batch)
    inputs, pre = [], []
    for layer in model.layers:
        inputs.append(x)
        z = x @ layer.weight.T + layer.bias
        pre.append(z)
        x = np.maximum(z, 0) if layer.spec.activation == "relu" else z
    return x, inputs, pre


def forward(model, batch):
    """Model outputs for a ``(B, in_dim)`` batch."""
    return _forward_cache(model, batch)[0]


def mae(pred, target):
    """Mean absolute error over every entry of ``pred`` and ``target``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ShapeError("mae needs at least one entry")
    return float(np.mean(np.abs(pred.astype(np.float64) - target)))


def backward(model, batch, target):
    """Analytic MAE gradients as a list of ``(dW, db)`` per layer.

    The subgradient of ``|r|`` at ``r = 0`` and the relu derivative at 0 are
    both taken as 0.
    """
    out, inputs, pre = _forward_cache(model, batch)
    target = np.asarray(target, dtype=model.dtype)
    if target.shape != out.shape:
        raise ShapeError(f"target shape {target.shape} != output shape {out.shape}")
    delta = np.sign(out - target) / out.dtype.type(out.size)
    grads = [None] * len(model.layers)
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.spec.activation == "relu":
            delta = delta * (pre[k] > 0)
        grads[k] = (delta.T @ inputs[k], delta.sum(axis=0))
        if k:
            delta = delta @ layer.weight
    return grads


@dataclass
class AdamState:
    """First/second moments per parameter, in ``(weight, bias)`` layer order."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model):
        params = list(iter_params(model))
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])

    def copy(self):
        return replace(self, m=[a.copy() for a in self.m], v=[a.copy() for a in self.v])


def iter_params(model):
    for layer in model.layers:
        yield layer.weight
        yield layer.bias


def _set_params(model, params):
    it = iter(params)
    for layer in model.layers:
        layer.weight = next(it)
        layer.bias = next(it)


def adam_step(model, grads, state, lr, masks=None):
    """One bias-corrected Adam update, in place on ``model`` and ``state``.

    ``masks`` maps layer name to a {0, 1} array shaped like that layer's
    weight. Masked entries keep their value and their moments untouched.
    Returns ``(model, state)``.
    """
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    flat = [g for pair in grads for g in pair]
    params = list(iter_params(model))
    if len(flat) != len(params):
        raise ShapeError("gradient list does not match model parameters")
    for g, p in zip(flat, params):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    if not state.m:
        fresh = AdamState.for_model(model)
        state.m, state.v = fresh.m, fresh.v
    keep = []
    for layer in model.layers:
        mask = None if masks is None else masks.get(layer.name)
        keep.extend([None if mask is None else mask.astype(bool), None])

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    new_params = []
    for i, (p, g) in enumerate(zip(params, flat)):
        m = b1 * state.m[i] + (1.0 - b1) * g
        v = b2 * state.v[i] + (1.0 - b2) * (g * g)
        step = (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        new_p = (p - step).astype(p.dtype)
        m, v = m.astype(p.dtype), v.astype(p.dtype)
        if keep[i] is not None:
            m = np.where(keep[i], m, state.m[i])
            v = np.where(keep[i], v, state.v[i])
            new_p = np.where(keep[i], new_p, p)
        state.m[i], state.v[i] = m, v
        new_params.append(new_p)
    _set_params(model, new_params)
    return model, state


@dataclass(frozen=True)
class PlateauState:
    lr: float = 1e-3
    best_val: float = float("inf")
    wait: int = 0
    patience: int = 3
    factor: float = 0.5
    min_lr: float = 1e-5


def plateau_update(state, val_mae):
    """Reduce-on-plateau bookkeeping for one epoch's validation MAE."""
    if val_mae < state.best_val:
        return replace(state, best_val=val_mae, wait=0)
    wait = state.wait + 1
    if wait >= state.patience:
        return replace(state, lr=max(state.lr * state.factor, state.min_lr), wait=0)
    return replace(state, wait=wait)


@dataclass(frozen=True)
class TrainingParams:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 80
    patience: int = 3
    factor: float = 0.5
    min_lr: float = 1e-5
    shuffle_seed: int | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if not 0 < self.min_lr <= self.lr:
            raise ConfigurationError("need 0 < min_lr <= lr")
        if not 0 < self.factor < 1:
            raise ConfigurationError("plateau factor must lie in (0, 1)")

    def plateau(self):
        return PlateauState(lr=self.lr, patience=self.patience,
                            factor=self.factor, min_lr=self.min_lr)


def batch_order(n, epoch, params):
    """Sample order for one epoch: identity, or an LCG shuffle when seeded."""
    if params.shuffle_seed is None:
        return None
    return Lcg64(params.shuffle_seed * 1_000_003 + epoch).permutation(n)


def iter_batches(X, y, order, batch_size):
    if order is not None:
        X, y = X[order], y[order]
    for start in range(0, len(X), batch_size):
        yield X[start:start + batch_size], y[start:start + batch_size]


def train_step(model, batch, target, adam, lr):
    grads = backward(model, batch, target)
    return adam_step(model, grads, adam, lr)


def train(model, data, params=TrainingParams()):
    """Plain (unpruned) training; returns ``(model, validation_curve)``.

    ``data`` is ``(X_train, y_train, X_val, y_val)``. The model is updated in
    place.
    """
    X, y, X_val, y_val = data
    X = np.asarray(X, dtype=model.dtype)
    y = np.asarray(y, dtype=model.dtype)
    adam = AdamState.for_model(model)
    plateau = params.plateau()
    curve = []
    for epoch in range(params.epochs):
        for xb, yb in iter_batches(X, y, batch_order(len(X), epoch, params), params.batch_size):
            train_step(model, xb, yb, adam, plateau.lr)
        val = mae(forward(model, X_val), y_val)
        curve.append(val)
        plateau = plateau_update(plateau, val)
    return model, curve
