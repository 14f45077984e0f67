"""
ResNet-style encoder lifted to 3D (1xkxk kernels) with a transpose-convolution
decoder carrying 3x1x1 depth layers.

Parameters live in a flat ``dict`` keyed by the weight-store naming scheme::

    enc.stage{0..4}.block{i}.conv{1,2}.weight      (O, C, 1, k, k)
    enc.stage{0..4}.block{i}.bn{1,2}.{scale,shift,mean,var}
    enc.stage{2..4}.block0.down.weight             (O, C, 1, 1, 1)   projection shortcut
    enc.stage{2..4}.block0.down_bn.{scale,shift,mean,var}
    dec.block{0..4}.{up,conv,depth}.weight
    head.weight, head.bias

Stage 0 is the stem (single kxk conv, stride 2, followed by 2x2 max pooling).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..nifti import WeightStore
from . import layers as L
from .layers import ActivationTape, ShapeError

Params = Dict[str, np.ndarray]

BN_FIELDS = ("scale", "shift", "mean", "var")
BUFFER_FIELDS = ("mean", "var")


class ConfigError(ValueError):
    pass


class PretrainedLoadError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    blocks_per_stage: Tuple[int, int, int, int] = (3, 4, 6, 3)
    base_width: int = 64
    depth_layers_enabled: bool = True
    in_channels: int = 3
    out_classes: int = 4
    decoder_widths: Optional[Tuple[int, int, int, int, int]] = None
    stem_kernel: int = 7
    # Initial softmax mass on the background class (None: zero head bias).
    background_prior: Optional[float] = 0.97

    def __post_init__(self):
        if self.background_prior is not None and not 0.0 < self.background_prior < 1.0:
            raise ConfigError(f"background_prior must lie in (0, 1), got {self.background_prior}")
        if self.decoder_widths is None:
            w = self.base_width
            dw = (4 * w, 2 * w, w, max(w // 2, 1), max(w // 4, 1))
            object.__setattr__(self, "decoder_widths", dw)
        object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))

    @classmethod
    def full(cls, **kw) -> "NetworkConfig":
        return cls(**kw)

    @classmethod
    def tiny(cls, **kw) -> "NetworkConfig":
        kw.setdefault("blocks_per_stage", (1, 1, 1, 1))
        kw.setdefault("base_width", 8)
        kw.setdefault("decoder_widths", (32, 16, 8, 8, 8))
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "blocks_per_stage": list(self.blocks_per_stage),
            "base_width": self.base_width,
            "depth_layers_enabled": self.depth_layers_enabled,
            "in_channels": self.in_channels,
            "out_classes": self.out_classes,
            "decoder_widths": list(self.decoder_widths),
            "stem_kernel": self.stem_kernel,
            "background_prior": self.background_prior,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    @property
    def stage_widths(self) -> Tuple[int, ...]:
        """Channel widths of the stem and the four residual stages."""
        w = self.base_width
        return (w, w, 2 * w, 4 * w, 8 * w)

    @property
    def skip_widths(self) -> Tuple[int, ...]:
        """Encoder channels concatenated into each decoder block (0 = no skip)."""
        sw = self.stage_widths
        return (sw[3], sw[2], sw[1], sw[0], 0)

    def validate(self) -> None:
        problems = []
        if self.base_width < 1:
            problems.append(f"base_width must be >= 1, got {self.base_width}")
        if len(self.blocks_per_stage) != 4 or any(b < 1 for b in self.blocks_per_stage):
            problems.append(f"blocks_per_stage needs 4 entries >= 1, got {self.blocks_per_stage}")
        if self.in_channels < 1 or self.out_classes < 1:
            problems.append("in_channels and out_classes must be positive")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            problems.append(f"stem_kernel must be odd, got {self.stem_kernel}")
        if len(self.decoder_widths) != 5:
            problems.append(f"decoder_widths needs 5 entries, got {len(self.decoder_widths)}")
        else:
            limits = self.stage_widths[3::-1] + (self.stage_widths[0],)
            for k, (dw, limit) in enumerate(zip(self.decoder_widths, limits)):
                if dw < 1 or dw > limit:
                    problems.append(f"decoder block {k}: width {dw} outside [1, {limit}] (matching encoder width)")
        if problems:
            raise ConfigError("invalid network config: " + "; ".join(problems))


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------


def _encoder_layout(cfg: NetworkConfig):
    """Yield ``(prefix, c_in, c_out, kernel, stride, kind)`` for every encoder conv."""
    w = cfg.stage_widths
    k = cfg.stem_kernel
    yield "enc.stage0.block0.conv1", cfg.in_channels, w[0], k, 2, "stem"
    c_in = w[0]
    for s, nblocks in enumerate(cfg.blocks_per_stage, start=1):
        for i in range(nblocks):
            stride = 2 if (s > 1 and i == 0) else 1
            base = f"enc.stage{s}.block{i}"
            yield f"{base}.conv1", c_in, w[s], 3, stride, "conv1"
            yield f"{base}.conv2", w[s], w[s], 3, 1, "conv2"
            if stride != 1 or c_in != w[s]:
                yield f"{base}.down", c_in, w[s], 1, stride, "down"
            c_in = w[s]


def _bn_prefix(conv_prefix: str) -> str:
    head, _, tail = conv_prefix.rpartition(".")
    if tail == "down":
        return f"{head}.down_bn"
    return f"{head}.bn{tail[-1]}"


def param_shapes(cfg: NetworkConfig) -> "OrderedDict[str, tuple]":
    """Every tensor (trainable or buffer) and its shape, in canonical order."""
    cfg.validate()
    shapes: "OrderedDict[str, tuple]" = OrderedDict()
    for prefix, c_in, c_out, k, _, _ in _encoder_layout(cfg):
        shapes[f"{prefix}.weight"] = (c_out, c_in, 1, k, k)
        for f in BN_FIELDS:
            shapes[f"{_bn_prefix(prefix)}.{f}"] = (c_out,)
    prev = cfg.stage_widths[4]
    for b, (dw, skip) in enumerate(zip(cfg.decoder_widths, cfg.skip_widths)):
        shapes[f"dec.block{b}.up.weight"] = (prev, dw, 1, 4, 4)
        shapes[f"dec.block{b}.conv.weight"] = (dw, dw + skip, 1, 3, 3)
        if cfg.depth_layers_enabled:
            shapes[f"dec.block{b}.depth.weight"] = (dw, dw, 3, 1, 1)
        prev = dw
    shapes["head.weight"] = (cfg.out_classes, prev, 1, 1, 1)
    shapes["head.bias"] = (cfg.out_classes,)
    return shapes


def is_buffer(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in BUFFER_FIELDS


def trainable_names(cfg: NetworkConfig) -> List[str]:
    return [n for n in param_shapes(cfg) if not is_buffer(n)]


def encoder_names(cfg: NetworkConfig) -> List[str]:
    return [n for n in param_shapes(cfg) if n.startswith("enc.")]


def encoder_conv_count(cfg: NetworkConfig, include_projections: bool = False) -> int:
    """Number of encoder convolution kernels (projection shortcuts excluded by default)."""
    return sum(1 for *_, kind in _encoder_layout(cfg) if include_projections or kind != "down")


def count_parameters(params: Params, trainable_only: bool = True) -> int:
    return int(sum(v.size for n, v in params.items() if not (trainable_only and is_buffer(n))))


def audit_shapes(params: Params, cfg: NetworkConfig) -> None:
    expected = param_shapes(cfg)
    problems = []
    for name, shape in expected.items():
        if name not in params:
            problems.append(f"missing {name}")
        elif tuple(params[name].shape) != shape:
            problems.append(f"{name}: shape {tuple(params[name].shape)} != {shape}")
    problems += [f"unexpected {n}" for n in params if n not in expected]
    if problems:
        raise ShapeError("parameter shape audit failed: " + "; ".join(problems))


def _head_bias(cfg: NetworkConfig) -> np.ndarray:
    # The dice loss ignores background, so without a prior the network can
    # park background voxels in a foreground class and never move them back.
    if cfg.background_prior is None:
        return np.zeros(cfg.out_classes)
    p = cfg.background_prior
    rest = (1.0 - p) / (cfg.out_classes - 1)
    return np.log(np.array([p] + [rest] * (cfg.out_classes - 1)))


def build_network(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> Params:
    """Allocate all tensors. Convolutions get He-uniform init scaled by fan-in."""
    rng = np.random.default_rng(seed)
    params: Params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        field_ = name.rsplit(".", 1)[-1]
        if field_ in ("scale", "var"):
            value = np.ones(shape)
        elif field_ in ("shift", "mean"):
            value = np.zeros(shape)
        elif name == "head.bias":
            value = _head_bias(cfg)
        else:
            if ".up." in name:
                fan_in = shape[0] * int(np.prod(shape[2:])) // 4
            else:
                fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if name.startswith("head.") else 2.0
            bound = np.sqrt(3.0 * gain / fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = value.astype(dtype)
    audit_shapes(params, cfg)
    return params


def cast_params(params: Params, dtype) -> Params:
    return OrderedDict((n, v.astype(dtype)) for n, v in params.items())


# ---------------------------------------------------------------------------
# pretrained weights
# ---------------------------------------------------------------------------


def lift_kernel_2d_to_3d(k2d: np.ndarray) -> np.ndarray:
    """Insert a unit depth axis: ``(O, C, k, k)`` -> ``(O, C, 1, k, k)``."""
    k2d = np.asarray(k2d)
    if k2d.ndim != 4:
        raise ShapeError(f"expected a 4D kernel (O, C, k, k), got shape {k2d.shape}")
    return k2d[:, :, None, :, :]


def squeeze_kernel_3d_to_2d(k3d: np.ndarray) -> np.ndarray:
    if k3d.ndim != 5 or k3d.shape[2] != 1:
        raise ShapeError(f"expected a (O, C, 1, k, k) kernel, got shape {k3d.shape}")
    return k3d[:, :, 0]


def export_encoder_2d(params: Params, cfg: NetworkConfig, extra: Optional[Params] = None) -> WeightStore:
    """Encoder tensors in 2D form, the format :func:`load_pretrained` consumes."""
    store = WeightStore()
    for name in encoder_names(cfg):
        value = params[name]
        store.add(name, squeeze_kernel_3d_to_2d(value) if value.ndim == 5 else value)
    for name, value in (extra or {}).items():
        store.add(name, value)
    return store


def load_pretrained(params: Params, store: WeightStore, cfg: NetworkConfig, strict: bool = True) -> Params:
    """Replace encoder tensors by lifted 2D counterparts from ``store``.

    Decoder and head tensors are returned untouched. With ``strict`` every
    encoder tensor must be present.
    """
    audit_shapes(params, cfg)
    out = OrderedDict(params)
    missing = []
    for name in encoder_names(cfg):
        if name not in store:
            missing.append(name)
            continue
        value = store[name]
        if name.endswith(".weight"):
            if value.ndim != 4:
                raise PretrainedLoadError(f"{name}: expected a 2D kernel (O, C, k, k), got shape {value.shape}")
            value = lift_kernel_2d_to_3d(value)
        if value.shape != params[name].shape:
            raise PretrainedLoadError(
                f"{name}: lifted shape {tuple(value.shape)} does not match network shape {params[name].shape}"
            )
        out[name] = value.astype(params[name].dtype)
    if strict and missing:
        raise PretrainedLoadError("pretrained store is missing encoder tensors: " + ", ".join(missing))
    return out


def params_to_store(params: Params) -> WeightStore:
    """Every tensor (buffers included) in its native 3D shape."""
    return WeightStore(params)


def params_from_store(store: WeightStore, cfg: NetworkConfig, dtype=np.float32) -> Params:
    """Inverse of :func:`params_to_store`; the store must match ``cfg`` exactly."""
    shapes = param_shapes(cfg)
    missing = [n for n in shapes if n not in store]
    extra = [n for n in store if n not in shapes]
    if missing or extra:
        raise PretrainedLoadError(
            f"weight store does not match the network config (missing: {', '.join(missing) or 'none'}; "
            f"unexpected: {', '.join(extra) or 'none'})"
        )
    params = OrderedDict((n, np.array(store[n], dtype=dtype)) for n in shapes)
    audit_shapes(params, cfg)
    return params


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def conv_forward(x: np.ndarray, kernel: np.ndarray, stride=1, padding=0) -> np.ndarray:
    """Single-sample convolution: ``x (C_in, D, H, W)`` -> ``(C_out, D', H', W')``."""
    y, _ = L.conv3d(x[:, None], kernel, stride, padding)
    return y[:, 0]


class _Net:
    """Forward graph builder bound to one tape."""

    def __init__(self, params: Params, tape: ActivationTape, bn_batch_stats: bool):
        self.p = params
        self.tape = tape
        self.bn_batch_stats = bn_batch_stats

    def conv(self, x, name, stride, padding):
        return self.tape.call(L.conv3d, [x], {"w": f"{name}.weight"}, args=(self.p[f"{name}.weight"], stride, padding))

    def bn(self, x, prefix):
        p = self.p
        updates = []

        def fn(v):
            y, back, new = L.batchnorm(
                v, p[f"{prefix}.scale"], p[f"{prefix}.shift"], p[f"{prefix}.mean"], p[f"{prefix}.var"],
                self.bn_batch_stats,
            )
            updates.append(new)
            return y, back

        out = self.tape.call(fn, [x], {"scale": f"{prefix}.scale", "shift": f"{prefix}.shift"})
        if updates[0] is not None and self.tape.recording:
            self.tape.running_stats[prefix] = updates[0]
        return out

    def relu(self, x):
        return self.tape.call(L.relu, [x])

    def encoder(self, x, cfg: NetworkConfig):
        k = cfg.stem_kernel
        h = self.conv(x, "enc.stage0.block0.conv1", (1, 2, 2), (0, k // 2, k // 2))
        e0 = self.relu(self.bn(h, "enc.stage0.block0.bn1"))
        h = self.tape.call(L.maxpool_hw, [e0])
        skips = [e0]
        projected = {prefix for prefix, *_, kind in _encoder_layout(cfg) if kind == "down"}
        for s, nblocks in enumerate(cfg.blocks_per_stage, start=1):
            for i in range(nblocks):
                base = f"enc.stage{s}.block{i}"
                stride = 2 if (s > 1 and i == 0) else 1
                y = self.conv(h, f"{base}.conv1", (1, stride, stride), (0, 1, 1))
                y = self.relu(self.bn(y, f"{base}.bn1"))
                y = self.conv(y, f"{base}.conv2", 1, (0, 1, 1))
                y = self.bn(y, f"{base}.bn2")
                shortcut = h
                if f"{base}.down" in projected:
                    shortcut = self.bn(self.conv(h, f"{base}.down", (1, stride, stride), 0), f"{base}.down_bn")
                h = self.relu(self.tape.call(L.add, [y, shortcut]))
            skips.append(h)
        return skips

    def decoder(self, skips, cfg: NetworkConfig):
        p = self.p
        d = skips[4]
        skip_for_block = [skips[3], skips[2], skips[1], skips[0], None]
        for b in range(5):
            name = f"dec.block{b}"
            u = self.tape.call(
                L.conv_transpose3d, [d], {"w": f"{name}.up.weight"},
                args=(p[f"{name}.up.weight"], (1, 2, 2), (0, 1, 1)),
            )
            u = self.relu(u)
            if skip_for_block[b] is not None:
                u = self.tape.call(L.concat, [u, skip_for_block[b]])
            d = self.conv(u, f"{name}.conv", 1, (0, 1, 1))
            if cfg.depth_layers_enabled:
                d = self.conv(d, f"{name}.depth", 1, (1, 0, 0))
            d = self.relu(d)
        logits = self.conv(d, "head", 1, 0)
        logits = self.tape.call(L.add_bias, [logits], {"bias": "head.bias"}, args=(p["head.bias"],))
        return self.tape.call(L.softmax, [logits])


def check_input(batch: np.ndarray, cfg: NetworkConfig) -> None:
    if batch.ndim != 5 or batch.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected input (B, {cfg.in_channels}, D, H, W), got {batch.shape}")
    H, W = batch.shape[3:]
    if H % 32 or W % 32:
        raise ShapeError(f"H and W must be divisible by 32 (five 2x downsamplings), got {H}x{W}")


def network_forward(params: Params, cfg: NetworkConfig, batch: np.ndarray, mode: str = "eval", freeze_bn: bool = False):
    """Class probabilities ``(B, 4, D, H, W)`` and the activation tape.

    ``train`` mode records the tape and normalizes with batch statistics
    (unless ``freeze_bn``); momentum-updated running statistics are collected
    in ``tape.running_stats`` and applied by the caller, so ``params`` is never
    mutated here.
    """
    check_input(batch, cfg)
    dtype = params["head.weight"].dtype
    tape = ActivationTape(mode)
    net = _Net(params, tape, bn_batch_stats=(mode == "train" and not freeze_bn))
    x = tape.var(np.ascontiguousarray(batch.transpose(1, 0, 2, 3, 4), dtype=dtype))
    tape.input = x
    skips = net.encoder(x, cfg)
    probs = net.decoder(skips, cfg)
    tape.output = probs
    tape.param_names = trainable_names(cfg)
    tape.param_shapes = {n: params[n].shape for n in tape.param_names}
    return probs.value.transpose(1, 0, 2, 3, 4), tape


def network_backward(tape: ActivationTape, grad_out: np.ndarray):
    """Gradients for every trainable tensor plus the input gradient ``(B, 3, D, H, W)``."""
    if tape.mode != "train":
        raise RuntimeError("network_backward needs a train-mode tape")
    g = np.ascontiguousarray(np.asarray(grad_out).transpose(1, 0, 2, 3, 4))
    pgrads, gin = tape.backward(g, tape.param_shapes)
    grads = OrderedDict((n, pgrads[n]) for n in tape.param_names)
    return grads, gin.transpose(1, 0, 2, 3, 4)


def apply_running_stats(params: Params, tape: ActivationTape) -> Params:
    """Return ``params`` with batchnorm running statistics taken from ``tape``."""
    out = OrderedDict(params)
    for prefix, (mean, var) in tape.running_stats.items():
        out[f"{prefix}.mean"] = mean
        out[f"{prefix}.var"] = var
    return out


def encoder_features(params: Params, cfg: NetworkConfig, batch: np.ndarray, mode: str = "eval"):
    """Deepest encoder feature map ``(C, B, D, H/32, W/32)`` as a tape variable (for pretraining heads)."""
    check_input(batch, cfg)
    dtype = params["enc.stage0.block0.conv1.weight"].dtype
    tape = ActivationTape(mode)
    net = _Net(params, tape, bn_batch_stats=(mode == "train"))
    x = tape.var(np.ascontiguousarray(batch.transpose(1, 0, 2, 3, 4), dtype=dtype))
    tape.input = x
    return net.encoder(x, cfg)[-1], tape
