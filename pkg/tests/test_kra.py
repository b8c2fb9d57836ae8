import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from keyregion.attacks import InnerAttack
from keyregion.kra import KraConfig, attack, attack_many, threshold_schedule
from keyregion.mlskrs import select_key_region

from helpers import linear_detector, tiny_detector


def test_default_threshold_trace():
    cfg = KraConfig()
    trace = [threshold_schedule(cfg, u) for u in range(10)]
    assert trace == [0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.1, 0.1]


def test_config_validation():
    for kwargs in ({"t_prime": 0.9}, {"beta": 0.0}, {"u_max": 0}, {"t_alpha": 1.5},
                   {"layers": ()}):
        with pytest.raises(ValueError):
            KraConfig(**kwargs)


def test_all_masks_empty_fails_at_floor():
    d = tiny_detector(0)
    x = np.random.default_rng(0).random((3, 16, 16))
    out = attack(d, x, KraConfig(t_alpha=1.0, t_prime=1.0))
    assert not out.success and out.empty_mask_at_floor
    assert out.iterations == 1 and out.mask_sizes == [0]
    assert not out.r.any()


def test_linear_detector_zero_threshold_drops_only_minimum():
    # on a 1×1 linear detector the tap gradient is the dense weight map itself
    d, _, _ = linear_detector(2, offset=0.5)
    x = np.random.default_rng(2).uniform(0.2, 0.8, (3, 8, 8))
    out = attack(d, x, KraConfig(t_alpha=0.0, t_prime=0.0, u_max=2, inner=InnerAttack("fgsm")))
    weights = d.params["dense.weight"][:, 0].reshape(8, 8)
    assert out.mask_sizes[0] == 63
    assert not out.masks[0][np.unravel_index(np.argmin(weights), (8, 8))]


def test_first_iteration_always_runs():
    d = tiny_detector(4)
    x = np.random.default_rng(4).random((3, 16, 16))
    out = attack(d, x, KraConfig(t_alpha=0.5, t_prime=0.0, inner=InnerAttack("deepfool")))
    assert out.iterations >= 1 and len(out.thresholds) == out.iterations


def check_outcome(d, x, cfg, out):
    clean = d.predict(x).label
    after = d.predict(x + out.r).label
    assert out.success == (after != clean)
    assert out.clean_label == clean and out.adv_label == after
    union = out.mask_union()
    assert not np.any(out.r[:, ~union])
    assert np.all(x + out.r >= 0.0) and np.all(x + out.r <= 1.0)
    assert 1 <= out.iterations <= cfg.u_max
    if not cfg.recompute_mask_on_candidate:
        for a, b in zip(out.masks, out.masks[1:]):
            assert not np.any(a & ~b)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), method=st.sampled_from(["fgsm", "pgd", "deepfool"]),
       recompute=st.booleans(), u_max=st.integers(1, 12))
def test_outcome_soundness(seed, method, recompute, u_max):
    d = tiny_detector(seed % 20)
    x = np.random.default_rng(seed).random((3, 16, 16))
    cfg = KraConfig(inner=InnerAttack(method, n_steps=3), u_max=u_max,
                    recompute_mask_on_candidate=recompute)
    check_outcome(d, x, cfg, attack(d, x, cfg))


def test_first_mask_matches_selection():
    d = tiny_detector(1)
    x = np.random.default_rng(1).random((3, 16, 16))
    out = attack(d, x, KraConfig(u_max=3))
    expected = select_key_region(d, x, d.tap_names, 0.8)
    assert np.array_equal(out.masks[0], expected.bits)


def test_layer_subset():
    d = tiny_detector(1)
    x = np.random.default_rng(1).random((3, 16, 16))
    out = attack(d, x, KraConfig(layers=("conv1",), u_max=2))
    assert np.array_equal(out.masks[0], select_key_region(d, x, ["conv1"], 0.8).bits)


def test_attack_many_order_and_jobs_independent():
    d = tiny_detector(6)
    xs = np.random.default_rng(6).random((6, 3, 16, 16))
    cfg = KraConfig(u_max=5)
    serial = attack_many(d, xs, cfg, jobs=1)
    threaded = attack_many(d, xs, cfg, jobs=3)
    for a, b in zip(serial, threaded):
        assert np.array_equal(a.r, b.r) and a.thresholds == b.thresholds


def test_record_fields():
    d = tiny_detector(0)
    x = np.random.default_rng(0).random((3, 16, 16))
    rec = attack(d, x, KraConfig(u_max=2)).to_record("img", timing=False)
    assert set(rec) == {"image_id", "success", "iterations", "thresholds", "p_l0", "p_l2",
                        "seconds"}
    assert rec["seconds"] is None
