import numpy as np
import pytest

from prunekit import model_io
from prunekit.config import build, dump_experiment, load_config, parse
from prunekit.exceptions import ConfigurationError, UsageError
from prunekit.experiments import (
    CSV_COLUMNS,
    CURVE_FILES,
    TRACE_SAMPLES,
    DatasetConfig,
    ExperimentConfig,
    ExperimentResult,
    SweepGrid,
    best_rows,
    emit_curves,
    emit_report,
    make_dataset,
    point_seed,
    read_rows,
    run_experiment,
    run_sweep,
)
from prunekit.nn_core import TrainingParams
from prunekit.pruning import PruningSchedule

SMALL_DATA = DatasetConfig(n_train=256, n_val=64, n_test=64, in_dim=6, out_dim=3, seed=3)


def small_config(schedule=None, epochs=6, **kw):
    return ExperimentConfig(
        dataset=SMALL_DATA,
        hidden=(12, 12),
        training=TrainingParams(batch_size=64, epochs=epochs),
        schedule=schedule or PruningSchedule.dynamic(0.0, 0.5, 0, 4),
        **kw,
    )


# -- dataset -----------------------------------------------------------------

def test_dataset_is_deterministic_and_read_only():
    a = make_dataset(SMALL_DATA)
    b = make_dataset.__wrapped__(SMALL_DATA)
    for name in ("X_train", "y_train", "X_val", "y_val", "X_test", "y_test"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    with pytest.raises(ValueError):
        a.X_train[0, 0] = 1.0


def test_dataset_shapes_and_ranges():
    d = make_dataset(SMALL_DATA)
    assert d.X_train.shape == (256, 6) and d.y_train.shape == (256, 3)
    assert d.X_val.shape == (64, 6) and d.X_test.shape == (64, 6)
    assert d.X_train.min() >= -1.0 and d.X_train.max() <= 1.0
    # splits are disjoint draws, not copies of each other
    assert not np.array_equal(d.X_train[:64], d.X_val)


def test_noiseless_targets_come_from_teacher():
    d = make_dataset(DatasetConfig(n_train=32, n_val=8, n_test=8, noise_std=0.0))
    np.testing.assert_allclose(d.y_train, d.teacher(d.X_train))


def test_noise_level():
    cfg = DatasetConfig(n_train=4096, n_val=8, n_test=8, noise_std=0.05)
    d = make_dataset(cfg)
    resid = d.y_train - d.teacher(d.X_train)
    assert abs(resid.std() - 0.05) < 0.003


def test_different_seeds_differ():
    a = make_dataset(SMALL_DATA)
    b = make_dataset(DatasetConfig(**{**SMALL_DATA.__dict__, "seed": 4}))
    assert not np.array_equal(a.y_train, b.y_train)


def test_dataset_config_validation():
    with pytest.raises(ConfigurationError):
        DatasetConfig(n_train=0)
    with pytest.raises(ConfigurationError):
        DatasetConfig(noise_std=-1)


# -- experiment --------------------------------------------------------------

def test_run_experiment_metrics():
    result = run_experiment(small_config())
    assert result.ok
    v = result.variants
    assert set(v) == {"pruned", "sparse", "quantized"}
    assert v["pruned"].mae == v["sparse"].mae
    assert v["quantized"].raw_size < v["sparse"].raw_size < v["pruned"].raw_size
    assert result.achieved_sparsity == pytest.approx(0.5, abs=0.01)
    assert len(result.validation_curve) == 6
    assert result.trace_true.shape == (TRACE_SAMPLES, 3)
    assert result.traces["pruned"].shape == (TRACE_SAMPLES, 3)
    assert result.variants["pruned"].gzip_size == model_io.gzip_size(result.artifacts["pruned"].payload)


def test_zero_sparsity_matches_baseline():
    result = run_experiment(small_config(PruningSchedule.constant(0.0, 0, 4)))
    assert result.variants["pruned"].mae == result.baseline_mae


def test_experiment_config_rejects_window_past_training():
    with pytest.raises(ConfigurationError):
        small_config(PruningSchedule.dynamic(0.0, 0.5, 0, 10), epochs=6)


def test_excluded_layer_stays_dense():
    result = run_experiment(small_config(excluded_layers=("head",)))
    assert "head" not in result.layer_sparsity
    assert set(result.layer_sparsity) == {"dense_0", "dense_1"}


# -- sweep -------------------------------------------------------------------

def test_default_grid_enumeration():
    schedules = SweepGrid().schedules(80)
    kinds = [s.kind for s in schedules]
    assert kinds.count("dynamic") == 30 and kinds.count("constant") == 30
    assert all(s.t0 < s.tf <= 80 for s in schedules)
    assert schedules == sorted(schedules, key=lambda s: (s.kind, s.s_i, s.target, s.t0, s.tf))


def test_scaled_grid():
    g = SweepGrid().scaled(40)
    assert g.t0 == (0, 10, 20, 30, 40)
    assert g.tf == (10, 20, 30, 40)
    assert len(g.schedules(40)) == 60


def test_point_seed_depends_on_coordinates_only():
    a = PruningSchedule.dynamic(0.0, 0.5, 0, 20)
    b = PruningSchedule.dynamic(0.0, 0.5, 0, 40)
    assert point_seed(0, a) == point_seed(0, PruningSchedule.dynamic(0.0, 0.5, 0, 20))
    assert point_seed(0, a) != point_seed(0, b)
    assert point_seed(0, a) != point_seed(1, a)
    assert 0 <= point_seed(0, a) < 2**64


def test_empty_grid_is_usage_error():
    with pytest.raises(UsageError):
        run_sweep(SweepGrid(t0=(50,), tf=(20,)), small_config())


SMALL_GRID = SweepGrid(kinds=("dynamic", "constant"), s_f=(0.5, 0.75), t0=(0, 2), tf=(4, 6))


@pytest.fixture(scope="module")
def sweep_results():
    return run_sweep(SMALL_GRID, small_config())


def test_sweep_report(sweep_results):
    assert len(sweep_results) == 16 and all(r.ok for r in sweep_results)
    csv_text, md = emit_report(sweep_results)
    lines = csv_text.split("\r\n")
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 18 and lines[-1] == ""
    rows = read_rows(csv_text)
    assert [r["schedule_kind"] for r in rows] == ["constant"] * 8 + ["dynamic"] * 8
    assert "Dynamic (best accuracy)" in md and "Constant (best size)" in md
    assert "Failed points" not in md


def test_best_rows_selection(sweep_results):
    rows = read_rows(emit_report(sweep_results)[0])
    picks = dict(best_rows(rows))
    dyn = [r for r in rows if r["schedule_kind"] == "dynamic"]
    assert picks["Dynamic (best accuracy)"]["mae_pruned"] == min(r["mae_pruned"] for r in dyn)
    assert picks["Dynamic (best size)"]["size_sparse_gz"] == min(r["size_sparse_gz"] for r in dyn)


def test_failed_points_are_listed(sweep_results):
    broken = ExperimentResult(config=sweep_results[0].config, error="NumericError: boom")
    csv_text, md = emit_report(list(sweep_results) + [broken])
    assert len(read_rows(csv_text)) == 16
    assert "Failed points" in md and "boom" in md


def test_curves(sweep_results):
    curves = emit_curves(sweep_results)
    assert set(curves) == set(CURVE_FILES.values())
    trace = curves["fig_trace_best_worst.csv"].split("\r\n")
    assert trace[0] == "true,baseline,best,worst"
    assert len(trace) == TRACE_SAMPLES + 2
    start = curves["fig_start_step.csv"].split("\r\n")
    assert len(start) - 2 == 4  # two t0 values per kind
    validation = curves["fig_validation.csv"].split("\r\n")
    assert validation[0].startswith("epoch,dynamic_best_accuracy")
    assert len(validation) == 6 + 2


def test_uncovered_axis():
    results = run_sweep(SweepGrid(kinds=("dynamic",), s_f=(0.5,), t0=(0,), tf=(4,)), small_config())
    curves = emit_curves(results)
    assert "fig_sparsity.csv" not in curves and "fig_trace_variants.csv" in curves
    with pytest.raises(UsageError):
        emit_curves(results, axes=("sparsity",))


def test_emit_report_rejects_empty():
    with pytest.raises(UsageError):
        emit_report([])


# -- configuration files -----------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = small_config(seed=11)
    path = tmp_path / "c.cfg"
    path.write_text(dump_experiment(cfg))
    assert load_config(path).experiment == cfg
    assert load_config(path, seed=5).experiment.seed == 5


def test_config_errors_carry_line_numbers():
    with pytest.raises(ConfigurationError, match="line 2"):
        parse("seed = 1\nbogus.key = 3\n")
    with pytest.raises(ConfigurationError, match="line 3"):
        parse("# c\nseed = 1\nseed = 2\n")
    with pytest.raises(ConfigurationError, match="line 1"):
        parse("train.epochs: 3\n")
    with pytest.raises(ConfigurationError, match="line 2"):
        build(parse("seed = 1\nschedule.s_f = 1.5\n"))


def test_config_defaults():
    loaded = build({})
    assert loaded.experiment == ExperimentConfig()
    assert loaded.grid == SweepGrid()
    short = build(parse("train.epochs = 40\n")).experiment
    assert short.schedule.tf == 30


def test_constant_schedule_from_config():
    cfg = build(parse("schedule.kind = constant\nschedule.s_c = 0.75\n")).experiment
    assert cfg.schedule.kind == "constant" and cfg.schedule.target == 0.75
