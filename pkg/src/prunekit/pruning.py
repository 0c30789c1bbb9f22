"""Magnitude pruning: sparsity schedules, masks and the masked training loop.

Schedules are indexed by epoch *boundary* ``b`` in ``0..total_epochs``.
Boundary ``b < total_epochs`` sits just before epoch ``b`` trains; boundary
``total_epochs`` is the end of training. Masks are recomputed at every
boundary where :func:`should_update_mask` is true, so a schedule ending at
``tf == total_epochs`` applies its final sparsity with no recovery epochs.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .exceptions import ConfigurationError, ShapeError
from .nn_core import (
    AdamState,
    TrainingParams,
    adam_step,
    backward,
    batch_order,
    forward,
    iter_batches,
    mae,
    plateau_update,
)

CONSTANT = "constant"
DYNAMIC = "dynamic"


@dataclass(frozen=True)
class PruningSchedule:
    """Constant (``s_c``) or cubic polynomial (``s_i`` -> ``s_f``) sparsity over ``[t0, tf]``."""

    kind: str = DYNAMIC
    s_c: float = 0.0
    s_i: float = 0.0
    s_f: float = 0.5
    t0: int = 0
    tf: int = 60
    delta_t: int = 1

    def __post_init__(self):
        if self.kind not in (CONSTANT, DYNAMIC):
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        for name in ("s_c", "s_i", "s_f"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
        if self.kind == DYNAMIC and self.s_i > self.s_f:
            raise ConfigurationError("dynamic schedule needs s_i <= s_f")
        if self.t0 < 0 or self.tf <= self.t0:
            raise ConfigurationError(f"need 0 <= t0 < tf, got t0={self.t0}, tf={self.tf}")
        if self.delta_t < 1:
            raise ConfigurationError("delta_t must be >= 1")

    @classmethod
    def constant(cls, s_c, t0=0, tf=60, delta_t=1):
        return cls(kind=CONSTANT, s_c=s_c, s_i=0.0, s_f=s_c, t0=t0, tf=tf, delta_t=delta_t)

    @classmethod
    def dynamic(cls, s_i=0.0, s_f=0.5, t0=0, tf=60, delta_t=1):
        return cls(kind=DYNAMIC, s_i=s_i, s_f=s_f, t0=t0, tf=tf, delta_t=delta_t)

    @property
    def target(self):
        """Sparsity the schedule ends at."""
        return self.s_c if self.kind == CONSTANT else self.s_f


def schedule_sparsity(schedule, epoch):
    if epoch < 0:
        raise ConfigurationError("epoch must be non-negative")
    if epoch < schedule.t0:
        return 0.0
    if schedule.kind == CONSTANT:
        return schedule.s_c
    if epoch >= schedule.tf:
        return schedule.s_f
    frac = (epoch - schedule.t0) / (schedule.tf - schedule.t0)
    return schedule.s_f + (schedule.s_i - schedule.s_f) * (1.0 - frac) ** 3


def should_update_mask(schedule, epoch):
    return (schedule.t0 <= epoch <= schedule.tf
            and (epoch - schedule.t0) % schedule.delta_t == 0)


def pruned_count(sparsity, n):
    """``ceil(sparsity * n)`` evaluated exactly on the shortest decimal form of ``sparsity``.

    Plain float arithmetic gives ``0.1 * 30 == 3.0000000000000004`` and would
    prune one weight too many.
    """
    return min(n, math.ceil(Fraction(repr(float(sparsity))) * n))


def compute_mask(weights, sparsity):
    """Binary mask zeroing the ``ceil(sparsity * n)`` smallest-magnitude entries.

    Equal magnitudes are ordered by flat index, lowest pruned first.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ConfigurationError(f"sparsity must lie in [0, 1], got {sparsity}")
    weights = np.asarray(weights)
    n = weights.size
    z = pruned_count(sparsity, n)
    flat = np.ones(n, dtype=weights.dtype if weights.dtype.kind == "f" else np.float32)
    if z:
        order = np.argsort(np.abs(weights).reshape(-1), kind="stable")
        flat[order[:z]] = 0
    return flat.reshape(weights.shape)


def apply_masks(model, masks):
    """Multiply each masked layer's weight by its mask, in place; returns ``model``."""
    for name, mask in masks.items():
        layer = model.layer(name)
        if mask.shape != layer.weight.shape:
            raise ShapeError(
                f"mask for {name!r} has shape {mask.shape}, weight has {layer.weight.shape}")
        # np.where rather than a product: masked negatives must become +0.0, not -0.0
        layer.weight = np.where(mask != 0, layer.weight, layer.weight.dtype.type(0))
    return model


def prunable_names(model, excluded=()):
    excluded = set(excluded)
    unknown = excluded - {l.name for l in model.layers}
    if unknown:
        raise ConfigurationError(f"excluded layers not in model: {sorted(unknown)}")
    return [l.name for l in model.layers if l.spec.prunable and l.name not in excluded]


def pruned_train_step(model, masks, batch, target, adam, lr):
    """Gradient step on the masked model that leaves masked entries at exactly 0."""
    grads = backward(model, batch, target)
    grads = [
        (dw * masks[layer.name] if layer.name in masks else dw, db)
        for layer, (dw, db) in zip(model.layers, grads)
    ]
    adam_step(model, grads, adam, lr, masks=masks)
    apply_masks(model, masks)
    return model, adam


@dataclass(frozen=True)
class SparsityReport:
    per_layer: dict
    global_fraction: float
    zeros: int
    total: int


def achieved_sparsity(model, names):
    per_layer = {}
    zeros = total = 0
    for name in names:
        w = model.layer(name).weight
        z = int(np.count_nonzero(w == 0))
        per_layer[name] = z / w.size
        zeros += z
        total += w.size
    return SparsityReport(per_layer, zeros / total if total else 0.0, zeros, total)


@dataclass(frozen=True)
class PruneRunConfig:
    schedule: PruningSchedule = field(default_factory=PruningSchedule)
    total_epochs: int = 80
    excluded_layer_names: tuple = ()

    def __post_init__(self):
        if self.schedule.tf > self.total_epochs:
            raise ConfigurationError(
                f"schedule ends at epoch {self.schedule.tf} but training has "
                f"{self.total_epochs} epochs")


def _update_masks(model, names, sparsity):
    return {name: compute_mask(model.layer(name).weight, sparsity) for name in names}


def run_pruned_training(model, config, data, params=TrainingParams(), callback=None):
    """Train ``model`` (in place) under the pruning schedule of ``config``.

    ``data`` is ``(X_train, y_train, X_val, y_val)``. ``params.epochs`` is
    ignored in favour of ``config.total_epochs``. ``callback(epoch, step,
    model, masks)`` fires after every optimizer step when given.

    Returns ``(model, masks, validation_curve)``; the curve has one validation
    MAE per epoch.
    """
    X, y, X_val, y_val = data
    X = np.asarray(X, dtype=model.dtype)
    y = np.asarray(y, dtype=model.dtype)
    names = prunable_names(model, config.excluded_layer_names)
    schedule = config.schedule
    masks = {name: np.ones_like(model.layer(name).weight) for name in names}
    adam = AdamState.for_model(model)
    plateau = params.plateau()
    curve = []
    for epoch in range(config.total_epochs):
        if should_update_mask(schedule, epoch):
            masks = _update_masks(model, names, schedule_sparsity(schedule, epoch))
            apply_masks(model, masks)
        order = batch_order(len(X), epoch, params)
        for step, (xb, yb) in enumerate(iter_batches(X, y, order, params.batch_size)):
            pruned_train_step(model, masks, xb, yb, adam, plateau.lr)
            if callback is not None:
                callback(epoch, step, model, masks)
        val = mae(forward(model, X_val), y_val)
        curve.append(val)
        plateau = plateau_update(plateau, val)
    if should_update_mask(schedule, config.total_epochs):
        masks = _update_masks(model, names, schedule_sparsity(schedule, config.total_epochs))
    apply_masks(model, masks)
    return model, masks, curve
