"""
Numpy layer primitives with hand-written backward passes, plus the tape that
chains them into reverse-mode differentiation.

Activations are laid out channel-first as ``(C, B, D, H, W)`` so that every
convolution is a single ``tensordot`` against the kernel's input-channel axis.
Each primitive returns ``(out, backward)`` where ``backward(grad_out)`` yields
``(input_grads, param_grads)``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Triple = Tuple[int, int, int]

BN_EPS = 1e-5


class ShapeError(ValueError):
    pass


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 values, got {v}")
    return v


def _pad(x: np.ndarray, pad: Triple) -> np.ndarray:
    if not any(pad):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _windows(xp: np.ndarray, kernel: Triple, stride: Triple, out: Triple) -> np.ndarray:
    """Strided view ``(C, B, Do, Ho, Wo, kd, kh, kw)`` over a padded input."""
    view = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    return view[
        :,
        :,
        : stride[0] * (out[0] - 1) + 1 : stride[0],
        : stride[1] * (out[1] - 1) + 1 : stride[1],
        : stride[2] * (out[2] - 1) + 1 : stride[2],
    ]


def _col2im(cols: np.ndarray, padded_shape, stride: Triple) -> np.ndarray:
    """Scatter-add ``cols`` of shape ``(C, kd, kh, kw, B, Do, Ho, Wo)`` into a padded grid."""
    C, kd, kh, kw, B, Do, Ho, Wo = cols.shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    sd, sh, sw = stride
    for a, b, c in itertools.product(range(kd), range(kh), range(kw)):
        out[:, :, a : a + sd * Do : sd, b : b + sh * Ho : sh, c : c + sw * Wo : sw] += cols[:, a, b, c]
    return out


def _unpad(x: np.ndarray, pad: Triple) -> np.ndarray:
    pd, ph, pw = pad
    D, H, W = x.shape[2:]
    return x[:, :, pd : D - pd, ph : H - ph, pw : W - pw]


def conv3d(x: np.ndarray, w: np.ndarray, stride=1, padding=0):
    """Cross-correlation of ``x (C, B, D, H, W)`` with ``w (O, C, kd, kh, kw)``."""
    stride, padding = _triple(stride), _triple(padding)
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"kernel expects {w.shape[1]} input channels, input has {x.shape[0]}")
    kernel = w.shape[2:]
    out = tuple(_out_size(n, k, s, p) for n, k, s, p in zip(x.shape[2:], kernel, stride, padding))
    if min(out) < 1:
        raise ShapeError(f"input {x.shape[2:]} too small for kernel {kernel} with padding {padding}")
    xp = _pad(x, padding)
    cols = _windows(xp, kernel, stride, out)
    y = np.tensordot(w, cols, axes=([1, 2, 3, 4], [0, 5, 6, 7]))

    def backward(g):
        gw = np.tensordot(g, cols, axes=([1, 2, 3, 4], [1, 2, 3, 4]))
        gcols = np.tensordot(w, g, axes=([0], [0]))
        gx = _unpad(_col2im(gcols, xp.shape, stride), padding)
        return (gx,), {"w": gw}

    return y, backward


def conv_transpose3d(x: np.ndarray, w: np.ndarray, stride=1, padding=0):
    """Transposed convolution; ``w`` has shape ``(C_in, C_out, kd, kh, kw)``.

    Output extent per axis is ``(n - 1) * stride + k - 2 * padding``.
    """
    stride, padding = _triple(stride), _triple(padding)
    if w.shape[0] != x.shape[0]:
        raise ShapeError(f"kernel expects {w.shape[0]} input channels, input has {x.shape[0]}")
    kernel = w.shape[2:]
    C, B = x.shape[:2]
    full = tuple((n - 1) * s + k for n, k, s in zip(x.shape[2:], kernel, stride))
    if any(f - 2 * p < 1 for f, p in zip(full, padding)):
        raise ShapeError(f"transpose conv padding {padding} removes the whole output {full}")
    cols = np.tensordot(w, x, axes=([0], [0]))
    y = _unpad(_col2im(cols, (w.shape[1], B) + full, stride), padding)

    def backward(g):
        gp = _pad(g, padding)
        gcols = _windows(gp, kernel, stride, x.shape[2:])
        gx = np.tensordot(w, gcols, axes=([1, 2, 3, 4], [0, 5, 6, 7]))
        gw = np.tensordot(x, gcols, axes=([1, 2, 3, 4], [1, 2, 3, 4]))
        return (gx,), {"w": gw}

    return y, backward


def _bcast(v: np.ndarray) -> np.ndarray:
    return v.reshape(-1, 1, 1, 1, 1)


def batchnorm(x, scale, shift, mean, var, use_batch_stats: bool, momentum: float = 0.1):
    """Per-channel batch normalization.

    Returns ``(y, backward, new_running)``; ``new_running`` is ``None`` unless
    batch statistics were used, in which case it holds the momentum-updated
    running mean and (unbiased) variance.
    """
    axes = (1, 2, 3, 4)
    if use_batch_stats:
        n = x.size // x.shape[0]
        mu = x.mean(axis=axes)
        centered = x - _bcast(mu)
        bvar = (centered * centered).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(bvar + BN_EPS)
        xhat = centered * _bcast(inv_std)
        unbiased = bvar * (n / max(n - 1, 1))
        new_running = (
            ((1 - momentum) * mean + momentum * mu).astype(mean.dtype),
            ((1 - momentum) * var + momentum * unbiased).astype(var.dtype),
        )
    else:
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - _bcast(mean)) * _bcast(inv_std)
        new_running = None
    y = xhat * _bcast(scale) + _bcast(shift)

    def backward(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gxhat = g * _bcast(scale)
        if use_batch_stats:
            m = x.size // x.shape[0]
            gx = _bcast(inv_std / m) * (
                m * gxhat - _bcast(gxhat.sum(axis=axes)) - xhat * _bcast((gxhat * xhat).sum(axis=axes))
            )
        else:
            gx = gxhat * _bcast(inv_std)
        return (gx,), {"scale": gscale, "shift": gshift}

    return y, backward, new_running


def relu(x):
    mask = x > 0
    y = x * mask

    def backward(g):
        return (g * mask,), {}

    return y, backward


def maxpool_hw(x):
    """2x2 in-plane max pooling with stride 2; depth untouched. Ties pick the first element."""
    C, B, D, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max pooling needs even H and W, got {H}x{W}")
    blocks = x.reshape(C, B, D, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
    blocks = blocks.reshape(C, B, D, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(C, B, D, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
        return (gx.reshape(x.shape),), {}

    return y, backward


def add(a, b):
    def backward(g):
        return (g, g), {}

    return a + b, backward


def concat(a, b):
    ca = a.shape[0]

    def backward(g):
        return (g[:ca], g[ca:]), {}

    return np.concatenate([a, b], axis=0), backward


def add_bias(x, bias):
    def backward(g):
        return (g,), {"bias": g.sum(axis=(1, 2, 3, 4))}

    return x + _bcast(bias), backward


def softmax(x):
    """Softmax over the channel axis (axis 0)."""
    z = x - x.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)),), {}

    return p, backward


def global_avg_pool(x):
    """``(C, B, D, H, W)`` -> ``(C, B)``."""
    shape = x.shape
    n = shape[2] * shape[3] * shape[4]

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None, None] / n, shape).copy(),), {}

    return x.mean(axis=(2, 3, 4)), backward


def linear(x, w, b):
    """``x (C, B)``, ``w (O, C)``, ``b (O,)`` -> ``(O, B)``."""

    def backward(g):
        return (w.T @ g,), {"w": g @ x.T, "b": g.sum(axis=1)}

    return w @ x + b[:, None], backward


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Var:
    __slots__ = ("id", "value")

    def __init__(self, id_: int, value: np.ndarray):
        self.id = id_
        self.value = value

    @property
    def shape(self):
        return self.value.shape


class ActivationTape:
    """Records primitive applications for a reverse sweep.

    In ``eval`` mode nothing is recorded and :meth:`backward` refuses to run.
    """

    def __init__(self, mode: str = "train"):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.records: List[tuple] = []
        self.running_stats: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        self.param_names: List[str] = []
        self.param_shapes: Dict[str, tuple] = {}
        self.input: Optional[Var] = None
        self.output: Optional[Var] = None
        self._count = 0

    @property
    def recording(self) -> bool:
        return self.mode == "train"

    def var(self, value: np.ndarray) -> Var:
        self._count += 1
        return Var(self._count, value)

    def call(self, fn: Callable, inputs: Sequence[Var], params: Optional[Dict[str, str]] = None, args=(), **kwargs) -> Var:
        """Apply primitive ``fn``; ``params`` maps its local grad keys to parameter names."""
        out, back = fn(*(v.value for v in inputs), *args, **kwargs)
        result = self.var(out)
        if self.recording:
            self.records.append((back, tuple(v.id for v in inputs), result.id, dict(params or {})))
        return result

    def backward(self, grad_out: np.ndarray, param_shapes: Optional[Dict[str, tuple]] = None):
        """Propagate ``grad_out`` from :attr:`output`; returns ``(param_grads, input_grad)``."""
        if not self.recording:
            raise RuntimeError("cannot run backward on an eval-mode tape")
        if self.output is None:
            raise RuntimeError("tape has no output")
        grads = {self.output.id: grad_out}
        pgrads: Dict[str, np.ndarray] = {}
        for back, in_ids, out_id, pmap in reversed(self.records):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            in_grads, local = back(g)
            for i, gi in zip(in_ids, in_grads):
                grads[i] = gi if i not in grads else grads[i] + gi
            for key, name in pmap.items():
                gp = local[key]
                pgrads[name] = gp if name not in pgrads else pgrads[name] + gp
        for name, shape in (param_shapes or {}).items():
            if name not in pgrads:
                pgrads[name] = np.zeros(shape, dtype=grad_out.dtype)
        input_grad = grads.get(self.input.id) if self.input is not None else None
        return pgrads, input_grad
