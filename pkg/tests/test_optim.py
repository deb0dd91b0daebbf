import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_flat_scene
from splatlab.core import PARAM_FIELDS, ContractViolation
from splatlab.gradients import ParamGradients
from splatlab.optim import DEFAULT_LR, AdamState, position_lr_at


def grads_like(scene, fill=None, rng=None):
    return ParamGradients(**{f: (rng.normal(size=getattr(scene, f).shape) if rng is not None
                                  else np.full_like(getattr(scene, f), fill)) for f in PARAM_FIELDS})


def test_zero_gradient_leaves_parameters(rng):
    scene = random_flat_scene(rng, 4, 8, 8)
    before = scene.copy()
    AdamState.for_scene(scene).step(scene, grads_like(scene, 0.0))
    assert scene.allclose(before)


def test_first_step_is_signed_lr(rng):
    scene = random_flat_scene(rng, 3, 8, 8)
    before = scene.copy()
    g = grads_like(scene, rng=rng)
    AdamState.for_scene(scene).step(scene, g)
    for f in PARAM_FIELDS:
        delta = getattr(scene, f) - getattr(before, f)
        np.testing.assert_allclose(delta, -DEFAULT_LR[f] * np.sign(g[f]), rtol=1e-9)


@settings(max_examples=50)
@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(1e-6, 1.0))
def test_fresh_step_magnitude_bounded_by_lr(g, lr):
    rng = np.random.default_rng(0)
    scene = random_flat_scene(rng, 1, 8, 8)
    before = scene.copy()
    AdamState.for_scene(scene, {f: lr for f in PARAM_FIELDS}).step(scene, grads_like(scene, g))
    for f in PARAM_FIELDS:
        assert np.abs(getattr(scene, f) - getattr(before, f)).max() <= lr * (1 + 1e-6)


def test_identical_rows_stay_identical(rng):
    scene = random_flat_scene(rng, 1, 8, 8)
    scene.append_rows(scene.rows([0]))
    opt = AdamState.for_scene(scene)
    for _ in range(5):
        g = grads_like(scene, rng=rng)
        for f in PARAM_FIELDS:
            g[f][1] = g[f][0]
        opt.step(scene, g)
    for f in scene.row_fields:
        assert np.array_equal(getattr(scene, f)[0], getattr(scene, f)[1])


def test_extend_appends_zero_rows(rng):
    scene = random_flat_scene(rng, 4, 8, 8)
    opt = AdamState.for_scene(scene)
    opt.step(scene, grads_like(scene, rng=rng))
    opt.extend_rows(3)
    for store in (opt.exp_avg, opt.exp_avg_sq):
        for f in PARAM_FIELDS:
            assert store[f].shape[0] == 7
            assert np.all(store[f][-3:] == 0)
            assert np.all(store[f][:4] != 0)


def test_keep_all_is_identity(rng):
    scene = random_flat_scene(rng, 5, 8, 8)
    opt = AdamState.for_scene(scene)
    opt.step(scene, grads_like(scene, rng=rng))
    before = {f: opt.exp_avg[f].copy() for f in PARAM_FIELDS}
    opt.remove_rows(np.ones(5, bool))
    for f in PARAM_FIELDS:
        assert np.array_equal(opt.exp_avg[f], before[f])


def test_mask_length_checked(rng):
    scene = random_flat_scene(rng, 5, 8, 8)
    with pytest.raises(ContractViolation):
        AdamState.for_scene(scene).remove_rows(np.ones(4, bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_remove_then_extend_matches_direct_construction(seed):
    rng = np.random.default_rng(seed)
    scene = random_flat_scene(rng, 12, 8, 8)
    opt = AdamState.for_scene(scene)
    opt.step(scene, grads_like(scene, rng=rng))
    keep = rng.uniform(size=12) < 0.5
    k = int(rng.integers(0, 5))
    expected = {f: np.concatenate([opt.exp_avg[f][keep], np.zeros((k,) + opt.exp_avg[f].shape[1:])])
                for f in PARAM_FIELDS}
    opt.remove_rows(keep).extend_rows(k)
    for f in PARAM_FIELDS:
        assert np.array_equal(opt.exp_avg[f], expected[f])


def test_misalignment_names_field(rng):
    scene = random_flat_scene(rng, 5, 8, 8)
    opt = AdamState.for_scene(scene)
    scene.keep_rows(np.arange(5) > 0)
    with pytest.raises(ContractViolation, match="position"):
        opt.step(scene, grads_like(scene, 0.0))


def test_stale_generation_detected(rng):
    scene = random_flat_scene(rng, 5, 8, 8)
    opt = AdamState.for_scene(scene)
    scene.keep_rows(np.ones(5, bool))
    with pytest.raises(ContractViolation, match="generation"):
        opt.step(scene, grads_like(scene, 0.0))


def test_position_lr_schedule_endpoints():
    assert position_lr_at(0, 100) == pytest.approx(1.6e-4, rel=1e-12)
    assert position_lr_at(100, 100) == pytest.approx(1.6e-6, rel=1e-12)
    assert position_lr_at(50, 100) == pytest.approx(1.6e-5, rel=1e-12)
    assert position_lr_at(50, 100, scale=3.0) == pytest.approx(4.8e-5, rel=1e-12)
