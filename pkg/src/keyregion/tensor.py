"""Small reverse-mode autodiff core.

Only the layer vocabulary the detectors use is supported: ``conv2d``,
``relu``, ``avgpool2x2``, ``flatten``, ``dense``, ``sigmoid`` and the two
binary cross-entropy losses. Everything is float64.

Operations are methods on a :class:`Tape`; each call computes the forward
value immediately and appends a backward rule. Named activations can be
registered as taps so that their gradients are returned by
:func:`backward_with_taps`.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

# largest float64 below 1.0; keeps sigmoid strictly inside (0, 1)
_ONE_MINUS = np.nextafter(1.0, 0.0)
_TINY = np.finfo(DTYPE).tiny


class ShapeError(ValueError):
    pass


class UnknownTapError(KeyError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Op:
    __slots__ = ("kind", "out", "inputs", "backward")

    def __init__(self, kind: str, out: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn):
        self.kind = kind
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Define-by-run record of executed primitives.

    A tape belongs to one forward pass and one thread. Build a new one for
    every forward evaluation.
    """

    def __init__(self):
        self.ops: List[_Op] = []
        self.taps: Dict[str, Tensor] = {}

    # -- bookkeeping -------------------------------------------------------

    def _record(self, kind: str, data: np.ndarray, inputs: Tuple[Tensor, ...],
                backward: BackwardFn) -> Tensor:
        out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
        if out.requires_grad:
            self.ops.append(_Op(kind, out, inputs, backward))
        return out

    def tap(self, name: str, tensor: Tensor) -> Tensor:
        if name in self.taps:
            raise ValueError(f"tap {name!r} registered twice")
        tensor.name = name
        self.taps[name] = tensor
        return tensor

    # -- primitives --------------------------------------------------------

    def conv2d(self, x: Tensor, kernel: Tensor, bias: Tensor,
               stride: int = 1, padding: int = 0) -> Tensor:
        """Cross-correlation of an N×C×H×W input with a O×C×k×k kernel."""
        if stride <= 0:
            raise ValueError(f"stride must be positive, got {stride}")
        if padding < 0:
            raise ValueError(f"padding must be non-negative, got {padding}")
        if x.data.ndim != 4 or kernel.data.ndim != 4:
            raise ShapeError("conv2d expects 4-d input and kernel")
        n, c, h, w = x.shape
        o, ck, kh, kw = kernel.shape
        if ck != c:
            raise ShapeError(f"input has {c} channels but kernel expects {ck}")
        if kh != kw:
            raise ShapeError("only square kernels are supported")
        if bias.shape != (o,):
            raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
        k = kh
        if h + 2 * padding < k or w + 2 * padding < k:
            raise ShapeError("kernel larger than padded input")

        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        ho = (h + 2 * padding - k) // stride + 1
        wo = (w + 2 * padding - k) // stride + 1
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        # N,C,Ho,Wo,k,k -> N,Ho,Wo,C,k,k -> (N·Ho·Wo) × (C·k·k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        wmat = kernel.data.reshape(o, c * k * k)
        out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

        def backward(g: np.ndarray):
            gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
            gx = gk = gb = None
            if kernel.requires_grad:
                gk = (gmat.T @ cols).reshape(o, c, k, k)
            if bias.requires_grad:
                gb = g.sum(axis=(0, 2, 3))
            if x.requires_grad:
                gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding:padding + h, padding:padding + w]
            return gx, gk, gb

        return self._record("conv2d", np.ascontiguousarray(out), (x, kernel, bias), backward)

    def relu(self, x: Tensor) -> Tensor:
        mask = x.data > 0
        return self._record("relu", x.data * mask, (x,), lambda g: (g * mask,))

    def avgpool2x2(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4:
            raise ShapeError("avgpool2x2 expects N×C×H×W input")
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"avgpool2x2 needs even spatial dims, got {h}×{w}")
        out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

        def backward(g: np.ndarray):
            gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
            return (gx,)

        return self._record("avgpool2x2", out, (x,), backward)

    def flatten(self, x: Tensor) -> Tensor:
        shape = x.shape
        return self._record("flatten", x.data.reshape(shape[0], -1), (x,),
                            lambda g: (g.reshape(shape),))

    def dense(self, x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
        """``x @ weights + bias`` for an N×D input and D×O weights."""
        if x.data.ndim != 2 or weights.data.ndim != 2:
            raise ShapeError("dense expects a 2-d input and 2-d weights")
        if x.shape[1] != weights.shape[0]:
            raise ShapeError(f"dense input width {x.shape[1]} != weight rows {weights.shape[0]}")
        if bias.shape != (weights.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[1]} outputs")
        out = x.data @ weights.data + bias.data

        def backward(g: np.ndarray):
            gx = g @ weights.data.T if x.requires_grad else None
            gw = x.data.T @ g if weights.requires_grad else None
            gb = g.sum(axis=0) if bias.requires_grad else None
            return gx, gw, gb

        return self._record("dense", out, (x, weights, bias), backward)

    def sigmoid(self, x: Tensor) -> Tensor:
        p = np.clip(_stable_sigmoid(x.data), _TINY, _ONE_MINUS)
        return self._record("sigmoid", p, (x,), lambda g: (g * p * (1.0 - p),))

    def shift(self, x: Tensor, offset: float) -> Tensor:
        return self._record("shift", x.data + offset, (x,), lambda g: (g,))

    def scale(self, x: Tensor, factor: float) -> Tensor:
        return self._record("scale", x.data * factor, (x,), lambda g: (g * factor,))

    def sum(self, x: Tensor) -> Tensor:
        shape = x.shape
        return self._record("sum", np.array(x.data.sum()), (x,),
                            lambda g: (np.broadcast_to(g, shape).copy(),))

    def bce_loss(self, prediction: Tensor, label) -> Tensor:
        """Mean binary cross-entropy of probabilities against 0/1 labels."""
        p = prediction.data
        y = np.broadcast_to(np.asarray(label, dtype=DTYPE), p.shape)
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise DomainError("bce_loss needs predictions strictly inside (0, 1)")
        m = p.size
        loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))

        def backward(g: np.ndarray):
            return (g * (p - y) / (p * (1.0 - p)) / m,)

        return self._record("bce_loss", np.array(loss), (prediction,), backward)

    def bce_with_logits(self, logits: Tensor, label) -> Tensor:
        """Mean binary cross-entropy taken directly on logits (no saturation)."""
        z = logits.data
        y = np.broadcast_to(np.asarray(label, dtype=DTYPE), z.shape)
        m = z.size
        loss = np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))
        # p - y written as (1-y)·σ(z) - y·σ(-z) so confident logits keep a nonzero gradient
        residual = (1.0 - y) * _stable_sigmoid(z) - y * _stable_sigmoid(-z)
        return self._record("bce_with_logits", np.array(loss), (logits,),
                            lambda g: (g * residual / m,))


def backward_with_taps(tape: Tape, output: Tensor,
                       taps: Iterable[str] = ()) -> Dict[str, np.ndarray]:
    """Backpropagate a scalar through ``tape``.

    Returns ``{tap name: d output / d activation}``. Leaf tensors that
    require gradients get their ``grad`` field overwritten.
    """
    taps = list(taps)
    missing = [name for name in taps if name not in tape.taps]
    if missing:
        raise UnknownTapError(f"taps never executed on this tape: {missing}")
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")

    grads: Dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    produced = set()
    for op in reversed(tape.ops):
        g = grads.get(id(op.out))
        produced.add(id(op.out))
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    for op in tape.ops:
        for inp in op.inputs:
            if inp.requires_grad and id(inp) not in produced:
                g = grads.get(id(inp))
                inp.grad = np.zeros_like(inp.data) if g is None else g.copy()

    result = {}
    for name in taps:
        t = tape.taps[name]
        g = grads.get(id(t))
        result[name] = np.zeros_like(t.data) if g is None else g.copy()
        t.grad = result[name]
    return result


def finite_diff_check(forward: Callable[[Tape], Tensor], params: Tensor,
                      step: float = 1e-5, probes: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``forward`` builds a scalar on the given tape using ``params``. With
    ``probes`` set, only that many randomly chosen entries are compared.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params.requires_grad = True
    tape = Tape()
    out = forward(tape)
    backward_with_taps(tape, out)
    analytic = params.grad.reshape(-1).copy()
    if not np.all(np.isfinite(analytic)):
        return float("inf")

    flat = params.data.reshape(-1)
    if probes is None:
        indices = np.arange(flat.size)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        indices = rng.choice(flat.size, size=min(probes, flat.size), replace=False)

    worst = 0.0
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + step
        plus = forward(Tape()).item()
        flat[idx] = orig - step
        minus = forward(Tape()).item()
        flat[idx] = orig
        numeric = (plus - minus) / (2.0 * step)
        a = analytic[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst
