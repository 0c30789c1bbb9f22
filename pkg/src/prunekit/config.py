"""Plain-text ``key = value`` configuration files.

Grammar, one entry per line::

    # comment            (full-line; also allowed after a value)
    key = value
    key = v1, v2, v3     (list-valued keys only)

Keys are case-sensitive and may appear at most once. Unknown keys are an
error. Recognised keys and their defaults:

=======================  =====================  ===========================
key                      default                meaning
=======================  =====================  ===========================
seed                     0                      run seed (weight init)
dataset.n_train          8192                   training samples
dataset.n_val            1024                   validation samples
dataset.n_test           1024                   test samples
dataset.in_dim           16                     input features
dataset.out_dim          3                      regression targets
dataset.noise_std        0.05                   target noise
dataset.seed             0                      dataset generator seed
model.hidden             64, 64                 hidden layer widths
model.excluded           (empty)                layer names never pruned
train.lr                 0.001                  initial learning rate
train.batch_size         128
train.epochs             80
train.patience           3                      plateau patience
train.factor             0.5                    plateau factor
train.min_lr             0.00001                plateau floor
train.shuffle_seed       none                   per-epoch shuffling seed
schedule.kind            dynamic                dynamic | constant
schedule.s_c             0.5                    constant sparsity
schedule.s_i             0.0                    dynamic start sparsity
schedule.s_f             0.5                    dynamic final sparsity
schedule.t0              0                      first pruning epoch
schedule.tf              60 (x epochs / 80)     last pruning epoch
schedule.delta_t         1                      mask update interval
grid.kinds               dynamic, constant      sweep only
grid.s_f                 0.5, 0.75, 0.875       sweep only (s_c for constant)
grid.s_i                 0.0                    sweep only
grid.t0                  0, 20, 40, 60, 80      sweep only
grid.tf                  20, 40, 60, 80         sweep only
=======================  =====================  ===========================
"""

from dataclasses import dataclass
from pathlib import Path

from .exceptions import ConfigurationError
from .experiments import DatasetConfig, ExperimentConfig, SweepGrid
from .nn_core import TrainingParams
from .pruning import CONSTANT, PruningSchedule


def _opt_int(text):
    return None if text.lower() in ("", "none") else int(text)


def _names(text):
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _ints(text):
    return tuple(int(p) for p in _names(text))


def _floats(text):
    return tuple(float(p) for p in _names(text))


KEYS = {
    "seed": int,
    "dataset.n_train": int,
    "dataset.n_val": int,
    "dataset.n_test": int,
    "dataset.in_dim": int,
    "dataset.out_dim": int,
    "dataset.noise_std": float,
    "dataset.seed": int,
    "model.hidden": _ints,
    "model.excluded": _names,
    "train.lr": float,
    "train.batch_size": int,
    "train.epochs": int,
    "train.patience": int,
    "train.factor": float,
    "train.min_lr": float,
    "train.shuffle_seed": _opt_int,
    "schedule.kind": str,
    "schedule.s_c": float,
    "schedule.s_i": float,
    "schedule.s_f": float,
    "schedule.t0": int,
    "schedule.tf": int,
    "schedule.delta_t": int,
    "grid.kinds": _names,
    "grid.s_f": _floats,
    "grid.s_i": _floats,
    "grid.t0": _ints,
    "grid.tf": _ints,
}


def parse(text):
    """``{key: (value, line_number)}`` for the entries in ``text``."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigurationError(f"unknown key {key!r}", lineno)
        if key in entries:
            raise ConfigurationError(f"duplicate key {key!r}", lineno)
        try:
            entries[key] = (KEYS[key](value), lineno)
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key}: {exc}", lineno) from None
    return entries


@dataclass(frozen=True)
class LoadedConfig:
    experiment: ExperimentConfig
    grid: SweepGrid


def _section(entries, prefix):
    return {k[len(prefix):]: v for k, (v, _) in entries.items() if k.startswith(prefix)}


def _first_line(entries, prefix):
    lines = [ln for k, (_, ln) in entries.items() if k.startswith(prefix)]
    return min(lines) if lines else None


def build(entries, seed=None):
    """Turn parsed entries into configs; ``seed`` overrides the ``seed`` key."""

    def make(prefix, factory):
        try:
            return factory()
        except ConfigurationError as exc:
            raise ConfigurationError(str(exc), _first_line(entries, prefix)) from None
        except TypeError as exc:
            raise ConfigurationError(str(exc), _first_line(entries, prefix)) from None

    dataset = make("dataset.", lambda: DatasetConfig(**_section(entries, "dataset.")))
    training = make("train.", lambda: TrainingParams(**_section(entries, "train.")))
    sched = _section(entries, "schedule.")
    kind = sched.pop("kind", "dynamic")
    if "tf" not in sched:
        sched["tf"] = max(1, round(60 * training.epochs / 80))
    s_c = sched.pop("s_c", 0.5)
    if kind == CONSTANT:
        sched.pop("s_i", None)
        sched.pop("s_f", None)
        schedule = make("schedule.", lambda: PruningSchedule.constant(s_c, **sched))
    else:
        schedule = make("schedule.", lambda: PruningSchedule(kind=kind, **sched))
    model = _section(entries, "model.")
    run_seed = seed if seed is not None else entries.get("seed", (0, None))[0]
    experiment = make("", lambda: ExperimentConfig(
        dataset=dataset,
        hidden=model.get("hidden", (64, 64)),
        training=training,
        schedule=schedule,
        excluded_layers=model.get("excluded", ()),
        seed=run_seed,
    ))
    grid = make("grid.", lambda: SweepGrid(**_section(entries, "grid.")))
    return LoadedConfig(experiment, grid)


def load_config(path, seed=None):
    text = Path(path).read_text(encoding="utf-8")
    return build(parse(text), seed=seed)


def dump_experiment(config):
    """Config text that reproduces ``config`` through :func:`load_config`."""
    d, t, s = config.dataset, config.training, config.schedule
    lines = [
        f"seed = {config.seed}",
        f"dataset.n_train = {d.n_train}",
        f"dataset.n_val = {d.n_val}",
        f"dataset.n_test = {d.n_test}",
        f"dataset.in_dim = {d.in_dim}",
        f"dataset.out_dim = {d.out_dim}",
        f"dataset.noise_std = {d.noise_std!r}",
        f"dataset.seed = {d.seed}",
        f"model.hidden = {', '.join(map(str, config.hidden))}",
        f"model.excluded = {', '.join(config.excluded_layers)}",
        f"train.lr = {t.lr!r}",
        f"train.batch_size = {t.batch_size}",
        f"train.epochs = {t.epochs}",
        f"train.patience = {t.patience}",
        f"train.factor = {t.factor!r}",
        f"train.min_lr = {t.min_lr!r}",
        f"train.shuffle_seed = {t.shuffle_seed if t.shuffle_seed is not None else 'none'}",
        f"schedule.kind = {s.kind}",
        f"schedule.s_c = {s.s_c!r}",
        f"schedule.s_i = {s.s_i!r}",
        f"schedule.s_f = {s.s_f!r}",
        f"schedule.t0 = {s.t0}",
        f"schedule.tf = {s.tf}",
        f"schedule.delta_t = {s.delta_t}",
    ]
    return "\n".join(lines) + "\n"
