"""
2D encoder pretraining on an image-classification task, the stand-in for
large-scale natural-image pretraining. The trained encoder is exported as a
2D weight store and lifted into the 3D network with ``load_pretrained``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List

import numpy as np

from ..network import NetworkConfig, apply_running_stats, build_network, export_encoder_2d
from ..network import layers as L
from ..network.model import encoder_features, encoder_names, is_buffer
from ..nifti import WeightStore
from .adam import AdamState, adam_step


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class PretrainResult:
    params: dict
    losses: List[float] = field(default_factory=list)
    accuracy: float = float("nan")

    def store(self, cfg: NetworkConfig) -> WeightStore:
        extra = {n: v for n, v in self.params.items() if n.startswith("cls.")}
        return export_encoder_2d(self.params, cfg, extra=extra)


def classifier_forward(params, cfg: NetworkConfig, images: np.ndarray, mode: str = "eval"):
    """Logits ``(K, B)`` for 2D images ``(B, 3, H, W)`` and the tape that produced them."""
    feat, tape = encoder_features(params, cfg, images[:, :, None], mode)
    pooled = tape.call(L.global_avg_pool, [feat])
    logits = tape.call(
        L.linear, [pooled], {"w": "cls.weight", "b": "cls.bias"}, args=(params["cls.weight"], params["cls.bias"])
    )
    tape.output = logits
    return logits.value, tape


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of ``logits (K, B)``; returns ``(loss, grad)``."""
    z = logits - logits.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    b = logits.shape[1]
    loss = -logp[labels, np.arange(b)].mean()
    grad = np.exp(logp)
    grad[labels, np.arange(b)] -= 1.0
    return float(loss), (grad / b).astype(logits.dtype)


def init_classifier(cfg: NetworkConfig, n_classes: int, seed: int) -> dict:
    full = build_network(cfg, seed=seed)
    params = OrderedDict((n, full[n]) for n in encoder_names(cfg))
    rng = np.random.default_rng([seed, 1])
    width = cfg.stage_widths[-1]
    bound = np.sqrt(1.0 / width)
    params["cls.weight"] = rng.uniform(-bound, bound, size=(n_classes, width)).astype(np.float32)
    params["cls.bias"] = np.zeros(n_classes, dtype=np.float32)
    return params


def pretrain_encoder(images: np.ndarray, labels: np.ndarray, cfg: NetworkConfig, pcfg: PretrainConfig) -> PretrainResult:
    n_classes = int(labels.max()) + 1
    params = init_classifier(cfg, n_classes, pcfg.seed)
    state = AdamState()
    losses = []
    for step in range(pcfg.steps):
        rng = np.random.default_rng([pcfg.seed, step])
        idx = rng.integers(0, len(images), size=pcfg.batch_size)
        logits, tape = classifier_forward(params, cfg, images[idx], mode="train")
        loss, g = softmax_cross_entropy(logits, labels[idx])
        shapes = {n: v.shape for n, v in params.items() if not is_buffer(n)}
        grads, _ = tape.backward(g, shapes)
        params = apply_running_stats(params, tape)
        params, state = adam_step(params, grads, state, pcfg.learning_rate)
        losses.append(loss)
    logits, _ = classifier_forward(params, cfg, images, mode="eval")
    accuracy = float((logits.argmax(axis=0) == labels).mean())
    return PretrainResult(params, losses, accuracy)
