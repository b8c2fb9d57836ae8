import numpy as np
import pytest

from keyregion import detectors as det
from keyregion.tensor import Tape, Tensor


@pytest.mark.parametrize("arch", sorted(det.REGISTRY))
def test_forward_shapes_and_taps(arch):
    d = det.build(arch, seed=1)
    x = np.random.default_rng(0).random((2, 3, 32, 32))
    tape = Tape()
    z = d.forward(tape, Tensor(x))
    assert z.shape == (2, 1)
    assert list(tape.taps) == d.tap_names
    widths = [w for w, _ in d.spec.blocks]
    for name, width, i in zip(d.tap_names, widths, range(len(widths))):
        assert tape.taps[name].shape == (2, width, 32 >> i, 32 >> i)


def test_bad_input_shape():
    d = det.build("detector_a")
    with pytest.raises(ValueError):
        d.predict(np.zeros((3, 16, 16)))
    with pytest.raises(det.ArchitectureError):
        det.build("detector_z")


def test_prediction_threshold_half_is_fake():
    assert det.label_from_probability(0.5) == det.FAKE
    assert det.label_from_probability(0.4999) == det.REAL


@pytest.mark.parametrize("objective", ["logit", "probability", "loss"])
def test_input_gradient_matches_finite_differences(objective):
    d = det.build("detector_a", seed=2)
    rng = np.random.default_rng(5)
    img = rng.random((3, 32, 32))
    value, grad, _ = d.input_gradient(img, objective=objective, label=1)
    for idx in [(0, 3, 4), (1, 16, 16), (2, 31, 0)]:
        plus, minus = img.copy(), img.copy()
        plus[idx] += 1e-6
        minus[idx] -= 1e-6
        fp = d.input_gradient(plus, objective=objective, label=1)[0]
        fm = d.input_gradient(minus, objective=objective, label=1)[0]
        assert grad[idx] == pytest.approx((fp - fm) / 2e-6, rel=1e-4, abs=1e-9)


def test_loss_objective_needs_label():
    d = det.build("detector_a")
    with pytest.raises(ValueError):
        d.input_gradient(np.zeros((3, 32, 32)), objective="loss")


@pytest.mark.parametrize("arch", sorted(det.REGISTRY))
def test_parameter_gradients(arch):
    # random biases keep probes off the ReLU kink (see gradient_check)
    errors = det.gradient_check(arch, seed=3, probes=4)
    assert set(errors) == set(det.build(arch).params)
    assert max(errors.values()) < 1e-4


def test_training_learns_tiny_separable_problem():
    rng = np.random.default_rng(0)
    n = 64
    x = rng.random((n, 3, 32, 32)) * 0.2 + 0.4
    y = np.arange(n) % 2
    x[y == 1, :, ::2, ::2] += 0.1
    d = det.build("detector_a", seed=0)
    hist = det.train(d, x, y, det.TrainConfig(epochs=6, batch_size=16, lr=0.02))
    assert hist.epochs[-1]["loss"] < hist.epochs[0]["loss"]
    assert d.accuracy(x, y) == 1.0


def test_training_is_deterministic():
    rng = np.random.default_rng(1)
    x = rng.random((16, 3, 32, 32))
    y = np.arange(16) % 2
    a, b = det.build("detector_a"), det.build("detector_a")
    cfg = det.TrainConfig(epochs=2, batch_size=8)
    det.train(a, x, y, cfg)
    det.train(b, x, y, cfg)
    assert det.dumps(a) == det.dumps(b)


def test_divergence_detected():
    x = np.random.default_rng(1).random((8, 3, 32, 32))
    x[0, 0, 0, 0] = np.nan
    y = np.arange(8) % 2
    with pytest.raises(det.DivergenceError):
        det.train(det.build("detector_a"), x, y, det.TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        det.TrainConfig(lr=0)
    with pytest.raises(ValueError):
        det.TrainConfig(weight_decay=-1)


def test_history_csv(tmp_path):
    h = det.TrainHistory(epochs=[{"epoch": 1, "loss": 0.5, "train_acc": 1.0, "val_acc": None}])
    h.write_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == "epoch,loss,train_acc,val_acc\n1,0.5,1.0,\n"


def test_weights_round_trip_bit_exact(tmp_path):
    d = det.build("detector_b", seed=4)
    det.save_weights(d, tmp_path / "w.krw")
    e = det.load_weights(tmp_path / "w.krw", expected_arch="detector_b")
    for name in d.params:
        assert np.array_equal(d.params[name], e.params[name])
    assert det.dumps(e) == det.dumps(d)


def test_weights_corruption_detected():
    blob = det.dumps(det.build("detector_a"))
    with pytest.raises(det.ChecksumError):
        det.loads(blob[:-10])
    flipped = bytearray(blob)
    flipped[100] ^= 0xFF
    with pytest.raises(det.ChecksumError):
        det.loads(bytes(flipped))
    with pytest.raises(det.WeightsFormatError):
        det.loads(b"NOPE" + blob[4:])
    with pytest.raises(det.ArchitectureError):
        det.loads(blob, expected_arch="detector_c")


def test_weights_version_mismatch():
    import struct
    import zlib
    body = det.dumps(det.build("detector_a"))[:-4]
    body = body[:4] + struct.pack("<H", 99) + body[6:]
    with pytest.raises(det.VersionError):
        det.loads(body + struct.pack("<I", zlib.crc32(body)))


def test_copy_is_independent():
    d = det.build("detector_a")
    e = d.copy()
    e.params["dense.bias"][0] = 5.0
    assert d.params["dense.bias"][0] == 0.0
