import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import mask_oracle, polynomial_oracle

from prunekit.exceptions import ConfigurationError, ShapeError
from prunekit.nn_core import (
    AdamState,
    TrainingParams,
    init_model,
    mlp_specs,
    train,
    train_step,
)
from prunekit.pruning import (
    PruneRunConfig,
    PruningSchedule,
    achieved_sparsity,
    apply_masks,
    compute_mask,
    prunable_names,
    pruned_train_step,
    run_pruned_training,
    schedule_sparsity,
    should_update_mask,
)

# -- schedules ---------------------------------------------------------------

@pytest.mark.parametrize("epoch, expected", [(0, 0.0), (80, 0.5), (40, 0.4375)])
def test_dynamic_examples(epoch, expected):
    s = PruningSchedule.dynamic(0.0, 0.5, 0, 80)
    assert schedule_sparsity(s, epoch) == expected


def test_dynamic_shifted_window():
    s = PruningSchedule.dynamic(0.25, 0.875, 20, 60)
    assert schedule_sparsity(s, 40) == pytest.approx(0.796875, abs=1e-15)


def test_dynamic_outside_window():
    s = PruningSchedule.dynamic(0.25, 0.875, 20, 60)
    assert schedule_sparsity(s, 10) == 0.0
    assert schedule_sparsity(s, 70) == 0.875


def test_constant_schedule():
    s = PruningSchedule.constant(0.5, 20, 60)
    assert [schedule_sparsity(s, e) for e in (0, 19, 20, 40, 60, 79)] == [0, 0, .5, .5, .5, .5]


@pytest.mark.parametrize("kwargs", [
    dict(kind="dynamic", s_i=0.6, s_f=0.5),
    dict(kind="dynamic", t0=10, tf=10),
    dict(kind="constant", s_c=1.5),
    dict(kind="dynamic", delta_t=0),
    dict(kind="other"),
])
def test_invalid_schedules(kwargs):
    with pytest.raises(ConfigurationError):
        PruningSchedule(**kwargs)


def test_run_config_checks_total_epochs():
    with pytest.raises(ConfigurationError):
        PruneRunConfig(PruningSchedule.dynamic(0, 0.5, 0, 81), total_epochs=80)


schedules = st.builds(
    lambda s_i, gap, t0, span, dt: PruningSchedule.dynamic(s_i, min(1.0, s_i + gap), t0, t0 + span, dt),
    st.floats(0, 1), st.floats(0, 1), st.integers(0, 100), st.integers(1, 100), st.integers(1, 10),
)


@given(schedules, st.integers(0, 250))
def test_schedule_matches_closed_form(s, epoch):
    got = schedule_sparsity(s, epoch)
    if epoch < s.t0:
        assert got == 0.0
    else:
        assert abs(got - polynomial_oracle(s.s_i, s.s_f, s.t0, s.tf, epoch)) <= 1e-12


@given(schedules)
def test_schedule_endpoints_and_monotone(s):
    assert abs(schedule_sparsity(s, s.t0) - s.s_i) <= 1e-12
    assert abs(schedule_sparsity(s, s.tf) - s.s_f) <= 1e-12
    values = [schedule_sparsity(s, e) for e in range(s.t0, s.tf + 1)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_should_update_mask_examples():
    assert should_update_mask(PruningSchedule.dynamic(0, .5, 0, 80, 1), 5)
    assert not should_update_mask(PruningSchedule.dynamic(0, .5, 20, 60, 10), 35)
    assert should_update_mask(PruningSchedule.dynamic(0, .5, 20, 60, 10), 40)
    assert not should_update_mask(PruningSchedule.dynamic(0, .5, 0, 80, 1), 81)
    assert not should_update_mask(PruningSchedule.dynamic(0, .5, 20, 60, 1), 19)


# -- masks ---------------------------------------------------------------------

def test_mask_examples():
    np.testing.assert_array_equal(compute_mask([0.3, -0.1, 0.5, 0.0], 0.5), [1, 0, 1, 0])
    np.testing.assert_array_equal(compute_mask([0.3, -0.1, 0.5, 0.0], 0.0), [1, 1, 1, 1])
    np.testing.assert_array_equal(compute_mask([0.2, -0.2, 0.2, 0.2], 0.25), [0, 1, 1, 1])
    np.testing.assert_array_equal(compute_mask([0.2, -0.2], 1.0), [0, 0])


def test_mask_keeps_shape_and_dtype():
    w = np.arange(12, dtype=np.float32).reshape(3, 4)
    m = compute_mask(w, 0.5)
    assert m.shape == (3, 4) and m.dtype == np.float32


@settings(max_examples=200)
@given(arrays(np.float32, st.integers(1, 300),
              elements=st.sampled_from([0.0, 0.5, -0.5, 1.0, -2.0, 3.25]) | st.floats(-4, 4, width=32)),
       st.floats(0, 1))
def test_mask_matches_sort_oracle(w, s):
    m = compute_mask(w, s)
    np.testing.assert_array_equal(m, mask_oracle(w, s))
    assert int(np.sum(m == 0)) == math.ceil(Fraction(repr(s)) * w.size)


def test_apply_masks():
    model = init_model(mlp_specs(2, (2,), 2), 0)
    model.layers[0].weight = np.array([[0.3, -0.1], [0.5, 0.0]], dtype=np.float32)
    before = model.layers[1].weight.copy()
    apply_masks(model, {"dense_0": np.array([[1, 0], [1, 0]], dtype=np.float32)})
    np.testing.assert_array_equal(model.layers[0].weight, np.float32([[0.3, 0], [0.5, 0]]))
    assert not np.signbit(model.layers[0].weight).any()
    assert model.layers[1].weight.tobytes() == before.tobytes()
    with pytest.raises(ShapeError):
        apply_masks(model, {"dense_0": np.ones((3, 2))})


def test_all_ones_mask_is_identity():
    model = init_model(mlp_specs(4, (5,), 2), 0)
    ref = model.copy()
    apply_masks(model, {l.name: np.ones_like(l.weight) for l in model.layers})
    for a, b in zip(model.layers, ref.layers):
        assert a.weight.tobytes() == b.weight.tobytes()


def test_excluded_layers():
    model = init_model(mlp_specs(4, (5,), 2), 0)
    assert prunable_names(model, ["head"]) == ["dense_0"]
    with pytest.raises(ConfigurationError):
        prunable_names(model, ["nope"])


# -- pruned steps --------------------------------------------------------------

def _batch(seed=0, n=32):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 4)).astype(np.float32)
    y = rng.normal(size=(n, 2)).astype(np.float32)
    return X, y


def test_fully_masked_layer_is_frozen():
    model = init_model(mlp_specs(4, (6,), 2), 0)
    masks = {"dense_0": np.zeros((6, 4), dtype=np.float32)}
    apply_masks(model, masks)
    X, y = _batch()
    pruned_train_step(model, masks, X, y, AdamState.for_model(model), 0.01)
    assert np.all(model.layers[0].weight == 0.0)


def test_masked_entry_stays_zero_under_large_gradient():
    model = init_model(mlp_specs(4, (6,), 2), 0)
    model.layers[0].weight[0, 0] = 100.0  # largest weight -> big gradient too
    mask = np.ones((6, 4), dtype=np.float32)
    mask[0, 0] = 0
    masks = {"dense_0": mask}
    apply_masks(model, masks)
    X, y = _batch()
    adam = AdamState.for_model(model)
    for _ in range(5):
        pruned_train_step(model, masks, X, y * 100, adam, 0.1)
    assert model.layers[0].weight[0, 0] == 0.0
    assert adam.m[0][0, 0] == 0.0


def test_unit_masks_reduce_to_plain_step():
    a = init_model(mlp_specs(4, (6,), 2), 3)
    b = a.copy()
    masks = {l.name: np.ones_like(l.weight) for l in b.layers}
    sa, sb = AdamState.for_model(a), AdamState.for_model(b)
    X, y = _batch()
    for _ in range(3):
        train_step(a, X, y, sa, 1e-3)
        pruned_train_step(b, masks, X, y, sb, 1e-3)
    for la, lb in zip(a.layers, b.layers):
        assert la.weight.tobytes() == lb.weight.tobytes()
        assert la.bias.tobytes() == lb.bias.tobytes()


def test_achieved_sparsity_counts():
    model = init_model(mlp_specs(4, (8,), 2), 0)
    rep = achieved_sparsity(model, prunable_names(model))
    assert rep.global_fraction == 0.0
    masks = {"dense_0": compute_mask(model.layers[0].weight, 0.3)}
    apply_masks(model, masks)
    rep = achieved_sparsity(model, ["dense_0"])
    assert rep.zeros >= math.ceil(0.3 * 32)
    assert rep.per_layer["dense_0"] == rep.zeros / 32


# -- training loop -------------------------------------------------------------

def _data(n=256, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 4))
    y = np.stack([np.sin(2 * X[:, 0]) + X[:, 1], X[:, 2] * X[:, 3]], axis=1)
    return X, y, X[:64], y[:64]


PARAMS = TrainingParams(batch_size=32, epochs=12)


def _weights(model):
    return b"".join(l.weight.tobytes() + l.bias.tobytes() for l in model.layers)


def test_zero_sparsity_run_equals_plain_training():
    plain, curve_plain = train(init_model(mlp_specs(4, (8, 8), 2), 5), _data(), PARAMS)
    cfg = PruneRunConfig(PruningSchedule.constant(0.0, 2, 9), total_epochs=12)
    pruned, masks, curve = run_pruned_training(init_model(mlp_specs(4, (8, 8), 2), 5), cfg, _data(), PARAMS)
    assert _weights(plain) == _weights(pruned)
    assert curve == curve_plain
    assert len(curve) == 12


def test_dynamic_run_reaches_target_and_holds():
    cfg = PruneRunConfig(PruningSchedule.dynamic(0, 0.5, 0, 8), total_epochs=12)
    model = init_model(mlp_specs(4, (8, 8), 2), 5)
    names = prunable_names(model)
    seen = {}

    def check(epoch, step, model, masks):
        rep = achieved_sparsity(model, names)
        seen.setdefault(epoch, []).append(rep.global_fraction)
        for name, mask in masks.items():
            assert np.all(model.layer(name).weight[mask == 0] == 0.0)

    model, masks, curve = run_pruned_training(model, cfg, _data(), PARAMS, callback=check)
    n_min = min(model.layer(n).weight.size for n in names)
    for epoch in range(8, 12):
        assert all(0.5 <= g <= 0.5 + 1 / n_min for g in seen[epoch])
    assert min(seen[0]) == 0.0
    final = achieved_sparsity(model, names)
    assert 0.5 <= final.global_fraction <= 0.5 + 1 / n_min


def test_constant_schedule_jumps_at_t0():
    cfg = PruneRunConfig(PruningSchedule.constant(0.75, 4, 10), total_epochs=12)
    model = init_model(mlp_specs(4, (8, 8), 2), 5)
    names = prunable_names(model)
    seen = {}

    def check(epoch, step, model, masks):
        seen.setdefault(epoch, []).append(achieved_sparsity(model, names).global_fraction)

    run_pruned_training(model, cfg, _data(), PARAMS, callback=check)
    assert max(seen[3]) == 0.0
    assert all(g >= 0.75 for e in range(4, 12) for g in seen[e])


def test_excluded_layer_untouched_by_pruning():
    cfg = PruneRunConfig(PruningSchedule.dynamic(0, 0.875, 0, 6), total_epochs=8,
                         excluded_layer_names=("head",))
    model, masks, _ = run_pruned_training(init_model(mlp_specs(4, (8,), 2), 1), cfg, _data(),
                                          TrainingParams(batch_size=32, epochs=8))
    assert set(masks) == {"dense_0"}
    assert np.count_nonzero(model.layer("head").weight == 0) == 0


def test_end_of_training_update_when_tf_equals_total():
    cfg = PruneRunConfig(PruningSchedule.dynamic(0, 0.5, 0, 10), total_epochs=10)
    model = init_model(mlp_specs(4, (8, 8), 2), 2)
    model, masks, curve = run_pruned_training(model, cfg, _data(), TrainingParams(batch_size=32, epochs=10))
    names = prunable_names(model)
    assert achieved_sparsity(model, names).global_fraction >= 0.5
    assert len(curve) == 10


def test_delta_t_controls_update_cadence():
    cfg = PruneRunConfig(PruningSchedule.dynamic(0, 0.5, 0, 8, delta_t=4), total_epochs=10)
    model = init_model(mlp_specs(4, (8,), 2), 2)
    names = prunable_names(model)
    seen = {}

    def check(epoch, step, model, masks):
        seen.setdefault(epoch, []).append(achieved_sparsity(model, names).zeros)

    run_pruned_training(model, cfg, _data(), TrainingParams(batch_size=32, epochs=10), callback=check)
    # masks change only at epochs 0, 4, 8
    assert len({seen[e][0] for e in (1, 2, 3)}) == 1
    assert seen[4][0] > seen[3][0]
    assert seen[8][0] > seen[7][0]
