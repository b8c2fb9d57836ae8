"""Small detectors with closed-form behavior, shared by several test modules."""

import numpy as np

from keyregion.detectors import INPUT_MEAN, INPUT_SCALE, ArchSpec, Detector, init_params


def linear_detector(seed=0, size=8, offset=0.0):
    """A detector whose logit is exactly affine in the input pixels.

    One 1×1 conv with a large bias keeps the ReLU in its linear regime for
    every input in [0, 1]. Returns (detector, w, b) with z(x) = <w, x> + b.
    """
    spec = ArchSpec("linear", ((1, 1),), input_size=size, pool=False)
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed)
    channel_w = rng.uniform(0.5, 1.5, size=3)
    params["conv1.weight"] = channel_w.reshape(1, 3, 1, 1)
    params["conv1.bias"] = np.array([50.0])
    dense = rng.normal(size=(size * size, 1)) * 0.1
    params["dense.weight"] = dense
    params["dense.bias"] = np.array([0.0])
    pixel_w = dense[:, 0].reshape(size, size)
    w = INPUT_SCALE * channel_w[:, None, None] * pixel_w[None]
    b = float(np.sum(pixel_w) * (50.0 - INPUT_SCALE * INPUT_MEAN * channel_w.sum()))
    d = Detector(spec, params)
    d.params["dense.bias"][0] = offset - b
    return d, w, offset


def tiny_spec(name="tiny"):
    return ArchSpec(name, ((4, 3), (6, 3), (8, 3)), input_size=16)


def tiny_detector(seed=0):
    spec = tiny_spec()
    return Detector(spec, init_params(spec, seed))
