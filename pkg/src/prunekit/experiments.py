"""Synthetic regression task, experiment runner, parameter sweep and reports."""

import csv
import functools
import hashlib
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import model_io
from ._rng import Lcg64
from .estimator import PrunedMLPRegressor
from .exceptions import ConfigurationError, UsageError
from .nn_core import TrainingParams, forward, mae
from .pruning import CONSTANT, DYNAMIC, PruningSchedule

TEACHER_HIDDEN = 8
TEACHER_GAIN = 1.0
TRACE_SAMPLES = 20
TRACE_OUTPUT = 1  # pitch
OUTPUT_NAMES = ("yaw", "pitch", "roll")


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 8192
    n_val: int = 1024
    n_test: int = 1024
    in_dim: int = 16
    out_dim: int = 3
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigurationError("sample counts must be positive")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigurationError("in_dim and out_dim must be positive")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")


@dataclass(frozen=True)
class Teacher:
    """Frozen target map ``y = W2 @ tanh(W1 @ x + b1)``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray

    def __call__(self, X):
        return np.tanh(np.asarray(X) @ self.w1.T + self.b1) @ self.w2.T


@dataclass(frozen=True)
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    teacher: Teacher

    def training_data(self):
        return self.X_train, self.y_train, self.X_val, self.y_val


def _frozen(a):
    a.flags.writeable = False
    return a


@functools.lru_cache(maxsize=8)
def make_dataset(config=DatasetConfig()):
    """Deterministic train/val/test splits for ``config``.

    Draw order from ``Lcg64(config.seed)``: teacher ``W1`` (normal, scaled by
    ``TEACHER_GAIN / sqrt(in_dim)``), ``b1`` (normal, x0.1), ``W2`` (normal,
    scaled by ``1 / sqrt(TEACHER_HIDDEN)``), then all inputs uniform in
    ``[-1, 1]`` (train, val, test rows in that order), then the noise.
    """
    rng = Lcg64(config.seed)
    h, d, k = TEACHER_HIDDEN, config.in_dim, config.out_dim
    teacher = Teacher(
        _frozen(rng.normal(h * d).reshape(h, d) * (TEACHER_GAIN / np.sqrt(d))),
        _frozen(rng.normal(h) * 0.1),
        _frozen(rng.normal(k * h).reshape(k, h) / np.sqrt(h)),
    )
    n = config.n_train + config.n_val + config.n_test
    X = rng.uniform(n * d, -1.0, 1.0).reshape(n, d)
    y = teacher(X)
    if config.noise_std > 0:
        y = y + config.noise_std * rng.normal(n * k).reshape(n, k)
    a, b = config.n_train, config.n_train + config.n_val
    parts = [X[:a], y[:a], X[a:b], y[a:b], X[b:], y[b:]]
    return Dataset(*[_frozen(p.copy()) for p in parts], teacher)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    hidden: tuple = (64, 64)
    training: TrainingParams = field(default_factory=TrainingParams)
    schedule: PruningSchedule = field(default_factory=PruningSchedule)
    excluded_layers: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.schedule.tf > self.training.epochs:
            raise ConfigurationError(
                f"schedule end {self.schedule.tf} exceeds {self.training.epochs} epochs")
        if self.dataset.n_train < self.training.batch_size:
            raise ConfigurationError("n_train must be at least the batch size")

    def estimator(self, pruned=True):
        s = self.schedule
        t = self.training
        return PrunedMLPRegressor(
            hidden_layer_sizes=tuple(self.hidden),
            schedule=s.kind if pruned else None,
            initial_sparsity=s.s_i,
            final_sparsity=s.target,
            begin_epoch=s.t0,
            end_epoch=s.tf,
            frequency=s.delta_t,
            excluded_layers=tuple(self.excluded_layers),
            epochs=t.epochs,
            batch_size=t.batch_size,
            learning_rate=t.lr,
            patience=t.patience,
            factor=t.factor,
            min_lr=t.min_lr,
            shuffle_seed=t.shuffle_seed,
            random_state=self.seed,
        )


@dataclass(frozen=True)
class VariantMetrics:
    mae: float
    raw_size: int
    gzip_size: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    baseline_mae: float = float("nan")
    variants: dict = field(default_factory=dict)
    achieved_sparsity: float = float("nan")
    layer_sparsity: dict = field(default_factory=dict)
    validation_curve: list = field(default_factory=list)
    wall_time: float = 0.0
    trace_true: np.ndarray = None
    trace_baseline: np.ndarray = None
    traces: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    error: str = None

    @property
    def ok(self):
        return self.error is None


@functools.lru_cache(maxsize=16)
def _baseline(config):
    """Test MAE and test predictions of the unpruned reference run."""
    data = make_dataset(config.dataset)
    est = config.estimator(pruned=False).fit(data.X_train, data.y_train, data.X_val, data.y_val)
    pred = forward(est.model_, data.X_test)
    pred.flags.writeable = False
    return mae(pred, data.y_test), pred


def run_experiment(config):
    """Baseline + pruned training, then the three artifacts and their test metrics.

    Each artifact is evaluated by decoding its own bytes, so the metrics cover
    the full serialization path.
    """
    start = time.perf_counter()
    data = make_dataset(config.dataset)
    base_key = replace(config, schedule=PruningSchedule.constant(0.0, 0, 1))
    baseline_mae, baseline_pred = _baseline(base_key)

    est = config.estimator().fit(data.X_train, data.y_train, data.X_val, data.y_val)
    artifacts = model_io.build_artifacts(est.model_)
    variants, traces = {}, {}
    for name, art in artifacts.items():
        model = model_io.as_float_model(model_io.load(art.payload))
        pred = forward(model, data.X_test)
        variants[name] = VariantMetrics(mae(pred, data.y_test), art.raw_size, art.gzip_size)
        traces[name] = pred[:TRACE_SAMPLES].copy()
    return ExperimentResult(
        config=config,
        baseline_mae=baseline_mae,
        variants=variants,
        achieved_sparsity=est.sparsity_.global_fraction,
        layer_sparsity=dict(est.sparsity_.per_layer),
        validation_curve=list(est.validation_curve_),
        wall_time=time.perf_counter() - start,
        trace_true=np.array(data.y_test[:TRACE_SAMPLES]),
        trace_baseline=np.array(baseline_pred[:TRACE_SAMPLES]),
        traces=traces,
        artifacts=artifacts,
    )


# -- sweep ------------------------------------------------------------------

@dataclass(frozen=True)
class SweepGrid:
    kinds: tuple = (DYNAMIC, CONSTANT)
    s_f: tuple = (0.5, 0.75, 0.875)
    t0: tuple = (0, 20, 40, 60, 80)
    tf: tuple = (20, 40, 60, 80)
    s_i: tuple = (0.0,)
    delta_t: int = 1

    def scaled(self, epochs, reference=80):
        """Same grid with step values rescaled from ``reference`` to ``epochs``."""
        f = epochs / reference
        return replace(self, t0=tuple(round(t * f) for t in self.t0),
                       tf=tuple(round(t * f) for t in self.tf))

    def schedules(self, epochs):
        """Valid schedules in canonical (kind, s_i, s_f, t0, tf) order.

        Constant schedules ignore ``s_i``; they are enumerated once with 0.
        """
        out = []
        for kind in sorted(set(self.kinds)):
            if kind not in (CONSTANT, DYNAMIC):
                raise ConfigurationError(f"unknown schedule kind {kind!r}")
            s_is = sorted(set(self.s_i)) if kind == DYNAMIC else [0.0]
            for s_i in s_is:
                for s_f in sorted(set(self.s_f)):
                    if kind == DYNAMIC and s_i > s_f:
                        continue
                    for t0 in sorted(set(self.t0)):
                        for tf in sorted(set(self.tf)):
                            if not t0 < tf <= epochs:
                                continue
                            if kind == CONSTANT:
                                out.append(PruningSchedule.constant(s_f, t0, tf, self.delta_t))
                            else:
                                out.append(PruningSchedule.dynamic(s_i, s_f, t0, tf, self.delta_t))
        return out


def point_seed(base_seed, schedule):
    """64-bit run seed from the base seed and the grid coordinates."""
    key = (f"{base_seed}|{schedule.kind}|{schedule.s_i!r}|{schedule.target!r}"
           f"|{schedule.t0}|{schedule.tf}|{schedule.delta_t}")
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")


def _run_point(config):
    try:
        return run_experiment(config)
    except Exception as exc:  # recorded per point; the sweep carries on
        return ExperimentResult(config=config, error=f"{type(exc).__name__}: {exc}")


def sweep_configs(grid, base):
    return [
        replace(base, schedule=s, seed=point_seed(base.seed, s))
        for s in grid.schedules(base.training.epochs)
    ]


def run_sweep(grid, base=None, jobs=1):
    """One :class:`ExperimentResult` per valid grid point, in canonical order."""
    base = base or ExperimentConfig()
    configs = sweep_configs(grid, base)
    if not configs:
        raise UsageError("the sweep grid has no valid points")
    if jobs <= 1:
        return [_run_point(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_point, configs))


# -- reports ----------------------------------------------------------------

CSV_COLUMNS = (
    "schedule_kind", "s_i", "s_f", "t0", "tf",
    "mae_pruned", "size_pruned_gz", "mae_sparse", "size_sparse_gz",
    "mae_quant", "size_quant_gz", "achieved_sparsity", "baseline_mae",
)


def result_row(result):
    s = result.config.schedule
    v = result.variants
    return {
        "schedule_kind": s.kind,
        "s_i": s.s_i,
        "s_f": s.target,
        "t0": s.t0,
        "tf": s.tf,
        "mae_pruned": v["pruned"].mae,
        "size_pruned_gz": v["pruned"].gzip_size,
        "mae_sparse": v["sparse"].mae,
        "size_sparse_gz": v["sparse"].gzip_size,
        "mae_quant": v["quantized"].mae,
        "size_quant_gz": v["quantized"].gzip_size,
        "achieved_sparsity": result.achieved_sparsity,
        "baseline_mae": result.baseline_mae,
    }


def _csv_text(columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


_INT_COLUMNS = {"t0", "tf", "size_pruned_gz", "size_sparse_gz", "size_quant_gz"}


def read_rows(text):
    """Parse a sweep CSV back into typed row dicts."""
    reader = csv.DictReader(io.StringIO(text))
    missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise UsageError(f"sweep CSV lacks columns: {', '.join(sorted(missing))}")
    rows = []
    for raw in reader:
        row = {}
        for c in CSV_COLUMNS:
            if c == "schedule_kind":
                row[c] = raw[c]
            elif c in _INT_COLUMNS:
                row[c] = int(raw[c])
            else:
                row[c] = float(raw[c])
        rows.append(row)
    return rows


def best_rows(rows):
    """Summary picks per kind: min pruned MAE, and min post-pruned gzip size.

    Ties on MAE go to the smaller pruned gzip size, ties on size to the lower
    MAE, then to canonical grid order.
    """
    picks = []
    for kind in (DYNAMIC, CONSTANT):
        group = [r for r in rows if r["schedule_kind"] == kind]
        if not group:
            continue
        acc = min(group, key=lambda r: (r["mae_pruned"], r["size_pruned_gz"]))
        size = min(group, key=lambda r: (r["size_sparse_gz"], r["mae_pruned"]))
        picks.append((f"{kind.capitalize()} (best accuracy)", acc))
        picks.append((f"{kind.capitalize()} (best size)", size))
    return picks


def markdown_table(rows):
    if not rows:
        raise UsageError("no completed results to report")
    head = ("| Model | Initial sparsity | Final sparsity | Starting step | End step "
            "| Pruned MAE | Pruned size (KB) | Post-pruned MAE | Post-pruned size (KB) "
            "| Post-quantized MAE | Post-quantized size (KB) |")
    lines = [head, "|" + "---|" * 11]
    for label, r in best_rows(rows):
        lines.append(
            f"| {label} | {r['s_i']:.2f} | {r['s_f']:.3f} | {r['t0']} | {r['tf']} "
            f"| {r['mae_pruned']:.4f} | {r['size_pruned_gz'] / 1024:.2f} "
            f"| {r['mae_sparse']:.4f} | {r['size_sparse_gz'] / 1024:.2f} "
            f"| {r['mae_quant']:.4f} | {r['size_quant_gz'] / 1024:.2f} |")
    return "\n".join(lines) + "\n"


def emit_report(results):
    """``(csv_text, markdown_text)`` for the completed results.

    Failed points are skipped in the CSV and listed under the Markdown table.
    """
    if not results:
        raise UsageError("emit_report needs at least one result")
    done = [r for r in results if r.ok]
    rows = [result_row(r) for r in done]
    md = "## Best models\n\n" + markdown_table(rows)
    failed = [r for r in results if not r.ok]
    if failed:
        md += "\n## Failed points\n\n"
        for r in failed:
            s = r.config.schedule
            md += f"- {s.kind} s_i={s.s_i} s_f={s.target} t0={s.t0} tf={s.tf}: {r.error}\n"
    return _csv_text(CSV_COLUMNS, rows), md


# -- plot series ------------------------------------------------------------

_METRIC_COLUMNS = ("mae_pruned", "mae_sparse", "mae_quant",
                   "size_pruned_gz", "size_sparse_gz", "size_quant_gz")
AXES = ("sparsity", "t0", "tf", "validation", "trace", "best_worst")
CURVE_FILES = {
    "sparsity": "fig_sparsity.csv",
    "t0": "fig_start_step.csv",
    "tf": "fig_end_step.csv",
    "validation": "fig_validation.csv",
    "trace": "fig_trace_variants.csv",
    "best_worst": "fig_trace_best_worst.csv",
}


def _sparsity_series(rows):
    out = []
    for kind in (DYNAMIC, CONSTANT):
        group = [r for r in rows if r["schedule_kind"] == kind]
        if not group:
            continue
        s_i = min(r["s_i"] for r in group)
        for s_f in sorted({r["s_f"] for r in group}):
            cands = [r for r in group if r["s_f"] == s_f and r["s_i"] == s_i]
            if cands:
                # widest pruning window as the reference point
                out.append(min(cands, key=lambda r: (r["t0"], -r["tf"])))
    return out


def _step_series(rows, axis):
    out = []
    for kind in (DYNAMIC, CONSTANT):
        group = [r for r in rows if r["schedule_kind"] == kind]
        if not group:
            continue
        s_f = min(r["s_f"] for r in group)
        s_i = min(r["s_i"] for r in group)
        group = [r for r in group if r["s_f"] == s_f and r["s_i"] == s_i]
        if axis == "t0":
            tf = max(r["tf"] for r in group)
            out += sorted((r for r in group if r["tf"] == tf), key=lambda r: r["t0"])
        else:
            t0 = min(r["t0"] for r in group)
            out += sorted((r for r in group if r["t0"] == t0), key=lambda r: r["tf"])
    return out


def _covered(series, key):
    kinds = {r["schedule_kind"] for r in series}
    return any(len({r[key] for r in series if r["schedule_kind"] == k}) >= 2 for k in kinds)


def emit_curves(results, axes=None):
    """CSV text per plot series, keyed by file name.

    ``axes=None`` emits every axis the results cover. Explicitly requested
    axes that the results do not cover raise :class:`UsageError`; the
    sparsity, t0 and tf axes need at least two distinct values in one kind.
    """
    done = [r for r in results if r.ok]
    if not done:
        raise UsageError("emit_curves needs at least one completed result")
    rows = [result_row(r) for r in done]
    by_row = {id(row): res for row, res in zip(rows, done)}
    series = {
        "sparsity": (_sparsity_series(rows), "s_f"),
        "t0": (_step_series(rows, "t0"), "t0"),
        "tf": (_step_series(rows, "tf"), "tf"),
    }
    explicit = axes is not None
    axes = AXES if axes is None else tuple(axes)
    out = {}
    for axis in axes:
        if axis not in AXES:
            raise UsageError(f"unknown axis {axis!r}")
        if axis in series:
            rows_for, key = series[axis]
            if not _covered(rows_for, key):
                if explicit:
                    raise UsageError(f"results do not cover the {axis!r} axis")
                continue
            cols = ("schedule_kind", "s_i", "s_f", "t0", "tf") + _METRIC_COLUMNS
            out[CURVE_FILES[axis]] = _csv_text(cols, rows_for)
        elif axis == "validation":
            out[CURVE_FILES[axis]] = _validation_csv(rows, by_row)
        elif axis == "trace":
            out[CURVE_FILES[axis]] = _variant_trace_csv(rows, by_row)
        else:
            out[CURVE_FILES[axis]] = _best_worst_csv(rows, by_row)
    return out


def _validation_csv(rows, by_row):
    picks = [(label.lower().replace(" (", "_").replace(")", "").replace(" ", "_"), by_row[id(r)])
             for label, r in best_rows(rows)]
    n = max(len(res.validation_curve) for _, res in picks)
    cols = ("epoch",) + tuple(name for name, _ in picks)
    table = []
    for e in range(n):
        row = {"epoch": e + 1}
        for name, res in picks:
            curve = res.validation_curve
            row[name] = curve[e] if e < len(curve) else ""
        table.append(row)
    return _csv_text(cols, table)


def _variant_trace_csv(rows, by_row):
    best = by_row[id(best_rows(rows)[0][1])]
    k = TRACE_OUTPUT if best.trace_true.shape[1] > TRACE_OUTPUT else 0
    table = [{
        "true": float(best.trace_true[i, k]),
        "pruned": float(best.traces["pruned"][i, k]),
        "sparse": float(best.traces["sparse"][i, k]),
        "quantized": float(best.traces["quantized"][i, k]),
    } for i in range(len(best.trace_true))]
    return _csv_text(("true", "pruned", "sparse", "quantized"), table)


def _best_worst_csv(rows, by_row):
    order = sorted(range(len(rows)), key=lambda i: (rows[i]["mae_pruned"], i))
    best = by_row[id(rows[order[0]])]
    worst = by_row[id(rows[order[-1]])]
    k = TRACE_OUTPUT if best.trace_true.shape[1] > TRACE_OUTPUT else 0
    table = [{
        "true": float(best.trace_true[i, k]),
        "baseline": float(best.trace_baseline[i, k]),
        "best": float(best.traces["pruned"][i, k]),
        "worst": float(worst.traces["pruned"][i, k]),
    } for i in range(len(best.trace_true))]
    return _csv_text(("true", "baseline", "best", "worst"), table)
