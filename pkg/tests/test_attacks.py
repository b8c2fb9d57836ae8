import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from keyregion.attacks import InnerAttack, clip_box, deepfool, fgsm, pgd
from keyregion.detectors import REAL

from helpers import linear_detector, tiny_detector


def image(seed, size=8, lo=0.2, hi=0.8):
    return np.random.default_rng(seed).uniform(lo, hi, size=(3, size, size))


def test_clip_box_examples():
    assert clip_box(np.array([0.9]), np.array([0.3]))[0] == pytest.approx(0.1)
    r = np.array([0.05, -0.1])
    assert np.array_equal(clip_box(np.array([0.5, 0.5]), r), r)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_clip_box_idempotent_and_in_range(seed):
    rng = np.random.default_rng(seed)
    x = rng.random(50)
    r = rng.normal(scale=0.7, size=50)
    once = clip_box(x, r)
    assert np.array_equal(clip_box(x, once), once)
    assert np.all(x + once >= 0) and np.all(x + once <= 1)


@pytest.mark.parametrize("seed", range(5))
def test_deepfool_linear_projection(seed):
    d, w, b = linear_detector(seed, offset=0.4 if seed % 2 else -0.4)
    x = image(seed)
    z = float(np.sum(w * x) + b)
    expected = -(z / np.sum(w * w)) * w * 1.02
    out = deepfool(d, x, overshoot=0.02)
    assert np.max(np.abs(out.r - expected)) < 1e-10
    assert out.steps == 1
    assert d.predict(x + out.r).label != d.predict(x).label


def test_deepfool_already_flipped_returns_zero():
    d, _, _ = linear_detector(0, offset=0.4)
    x = image(0)
    label = 1 - d.predict(x).label
    out = deepfool(d, x, label=label)
    assert not out.r.any() and out.steps == 0


@pytest.mark.parametrize("seed", range(5))
def test_fgsm_linear_direction(seed):
    d, w, _ = linear_detector(seed, offset=0.3 if seed % 2 else -0.3)
    x = image(seed)
    out = fgsm(d, x, eps=0.05)
    towards = 1.0 if d.predict(x).label == REAL else -1.0
    np.testing.assert_array_equal(np.sign(out.r), towards * np.sign(w))
    assert np.allclose(np.abs(out.r), 0.05)


def test_pgd_single_step_equals_fgsm():
    d = tiny_detector(3)
    x = np.random.default_rng(3).random((3, 16, 16))
    a = pgd(d, x, eps=0.04, alpha_step=0.04, n_steps=1).r
    b = fgsm(d, x, eps=0.04).r
    np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), method=st.sampled_from(["fgsm", "pgd"]),
       eps=st.floats(0.005, 0.2))
def test_linf_bound_and_box(seed, method, eps):
    d = tiny_detector(seed % 50)
    x = np.random.default_rng(seed).random((3, 16, 16))
    r = InnerAttack(method, eps=eps, alpha_step=eps / 3, n_steps=4)(d, x).r
    assert np.max(np.abs(r)) <= eps + 1e-15
    assert np.all(x + r >= 0) and np.all(x + r <= 1)


def test_deepfool_stays_in_box():
    d = tiny_detector(5)
    x = np.random.default_rng(5).random((3, 16, 16))
    r = deepfool(d, x).r
    assert np.all(x + r >= 0) and np.all(x + r <= 1)


def test_zero_gradient_flagged():
    d, _, _ = linear_detector(0)
    d.params["dense.weight"][:] = 0.0
    x = image(1)
    for method in ("fgsm", "pgd", "deepfool"):
        out = InnerAttack(method)(d, x)
        assert out.zero_gradient
        assert not out.r.any()


def test_deterministic():
    d = tiny_detector(2)
    x = np.random.default_rng(2).random((3, 16, 16))
    for method in ("fgsm", "pgd", "deepfool"):
        a, b = InnerAttack(method)(d, x).r, InnerAttack(method)(d, x).r
        assert np.array_equal(a, b)


def test_config_validation():
    with pytest.raises(ValueError):
        InnerAttack("cw")
    with pytest.raises(ValueError):
        InnerAttack(eps=0)
    with pytest.raises(ValueError):
        InnerAttack(n_steps=0)
    with pytest.raises(ValueError):
        InnerAttack(overshoot=-0.1)
