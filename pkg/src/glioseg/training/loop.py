"""
Epoch loop: sample -> augment -> forward -> dice loss -> backward -> Adam,
with full-volume validation after every epoch.
"""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..inference import DEFAULT_STEPS, predict_volume, prepare_case
from ..metrics import dice_region
from ..network import (
    NetworkConfig,
    apply_running_stats,
    build_network,
    load_pretrained,
    network_backward,
    network_forward,
)
from ..nifti import WeightStore
from ..volume import LABEL_CODES, REGIONS, indices_from_codes, regions_from_labels
from .adam import AdamState, adam_step
from .augment import AugmentConfig, augment_patch
from .loss import multiple_dice_loss
from .sampling import sample_patch

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    patch_shape: Tuple[int, int, int] = (24, 128, 128)
    batch_size: int = 24
    learning_rate: float = 1e-3
    epochs: int = 50
    batches_per_epoch: int = 100
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pretrained: bool = False
    inference_steps: Tuple[int, int, int] = DEFAULT_STEPS
    freeze_bn: bool = False
    prefetch: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(int(p) for p in self.patch_shape))
        object.__setattr__(self, "inference_steps", tuple(int(s) for s in self.inference_steps))
        if self.patch_shape[1] % 32 or self.patch_shape[2] % 32:
            raise ValueError(f"patch H and W must be divisible by 32, got {self.patch_shape}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if isinstance(self.augment, dict):
            aug = dict(self.augment)
            if "blur_sigma" in aug:
                aug["blur_sigma"] = tuple(aug["blur_sigma"])
            object.__setattr__(self, "augment", AugmentConfig(**aug))

    @classmethod
    def preset_3d(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def preset_2d(cls, **kw) -> "TrainConfig":
        kw.setdefault("patch_shape", (1, 128, 128))
        kw.setdefault("batch_size", 64)
        kw.setdefault("inference_steps", (1, 32, 32))
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dice: Dict[str, float]


@dataclass
class TrainRun:
    config: TrainConfig
    net_config: NetworkConfig
    epochs: List[EpochRecord] = field(default_factory=list)
    params: Optional[dict] = None

    def curve(self, region: str) -> List[float]:
        return [e.dice.get(region, float("nan")) for e in self.epochs]

    def to_log(self) -> str:
        lines = ["epoch\tloss\t" + "\t".join(REGIONS)]
        for e in self.epochs:
            cells = [f"{e.dice.get(r, float('nan')):.6f}" for r in REGIONS]
            lines.append(f"{e.epoch}\t{e.loss:.6f}\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"


def parse_log(text: str) -> List[EpochRecord]:
    rows = [line.split("\t") for line in text.strip().splitlines()[1:]]
    return [EpochRecord(int(r[0]), float(r[1]), dict(zip(REGIONS, map(float, r[2:])))) for r in rows]


def _batch_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


def make_batch(cases, cfg: TrainConfig, iteration: int):
    """Input ``(B, 3, D, H, W)`` and one-hot ``(B, 4, D, H, W)`` batch for one iteration.

    Depends only on ``(cfg.seed, iteration)``, never on call order.
    """
    rng = _batch_rng(cfg.seed, iteration)
    images, onehots = [], []
    for _ in range(cfg.batch_size):
        scan, seg = cases[int(rng.integers(len(cases)))]
        image, labels = sample_patch(scan, seg, cfg.patch_shape, rng)
        image, labels = augment_patch(image, labels, cfg.augment, rng)
        images.append(image)
        onehots.append(np.eye(len(LABEL_CODES), dtype=np.float32)[indices_from_codes(labels)].transpose(3, 0, 1, 2))
    return np.stack(images).astype(np.float32), np.stack(onehots)


def _batches(cases, cfg: TrainConfig, start: int, count: int):
    if cfg.prefetch <= 0:
        for it in range(start, start + count):
            yield make_batch(cases, cfg, it)
        return
    q: "queue.Queue" = queue.Queue(maxsize=cfg.prefetch)
    stop = threading.Event()

    def producer():
        for it in range(start, start + count):
            if stop.is_set():
                return
            q.put(make_batch(cases, cfg, it))

    worker = threading.Thread(target=producer, daemon=True)
    worker.start()
    try:
        for _ in range(count):
            yield q.get()
    finally:
        stop.set()
        while worker.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                worker.join(timeout=0.01)


def region_dice_scores(params, net_cfg: NetworkConfig, cases, patch_shape, steps) -> Dict[str, float]:
    """Mean full-volume region dice over prepared ``(scan, seg)`` cases."""
    totals = {r: 0.0 for r in REGIONS}
    for scan, seg in cases:
        _, pred = predict_volume(params, net_cfg, scan, patch_shape=patch_shape, steps=steps)
        pr, rr = regions_from_labels(pred), regions_from_labels(seg)
        for r in REGIONS:
            totals[r] += dice_region(pr[r], rr[r])
    return {r: totals[r] / len(cases) for r in REGIONS}


def train_step(params, state: AdamState, net_cfg: NetworkConfig, cfg: TrainConfig, images, onehots):
    probs, tape = network_forward(params, net_cfg, images, mode="train", freeze_bn=cfg.freeze_bn)
    loss, grad_probs, dsc = multiple_dice_loss(probs, onehots)
    if not np.isfinite(loss):
        return loss, dsc, None, None
    grads, _ = network_backward(tape, grad_probs.astype(probs.dtype))
    params = apply_running_stats(params, tape)
    params, state = adam_step(params, grads, state, cfg.learning_rate)
    return loss, dsc, params, state


def train(
    cfg: TrainConfig,
    net_cfg: NetworkConfig,
    dataset: Sequence,
    val_split: int = 0,
    pretrained: Optional[WeightStore] = None,
    params: Optional[dict] = None,
    prepared: bool = False,
) -> TrainRun:
    """Train on ``dataset`` (list of ``(MultiModalScan, SegmentationMap)``).

    The last ``val_split`` cases are held out and scored with sliding-window
    region dice after each epoch. Cases are cropped and normalized first
    unless ``prepared`` is set.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if val_split < 0 or val_split >= len(dataset):
        raise ValueError(f"val_split must leave at least one training case, got {val_split} of {len(dataset)}")
    if cfg.pretrained and pretrained is None:
        raise ValueError("config asks for a pretrained encoder but no weight store was given")
    cases = list(dataset) if prepared else [prepare_case(s, g)[:2] for s, g in dataset]
    train_cases = cases[: len(cases) - val_split]
    val_cases = cases[len(cases) - val_split :]

    if params is None:
        params = build_network(net_cfg, seed=cfg.seed)
        if pretrained is not None:
            params = load_pretrained(params, pretrained, net_cfg, strict=True)
    run = TrainRun(cfg, net_cfg, params=params)
    state = AdamState()
    iteration = 0
    for epoch in range(cfg.epochs):
        losses = []
        for images, onehots in _batches(train_cases, cfg, iteration, cfg.batches_per_epoch):
            loss, dsc, new_params, new_state = train_step(params, state, net_cfg, cfg, images, onehots)
            if new_params is None:
                snapshot = dict(
                    epoch=epoch, iteration=iteration, loss=loss, class_dice=[float(d) for d in dsc],
                    param_norms={n: float(np.linalg.norm(v)) for n, v in params.items()},
                )
                raise TrainingDiverged(f"non-finite loss at iteration {iteration}", snapshot)
            params, state = new_params, new_state
            losses.append(loss)
            iteration += 1
        dice = region_dice_scores(params, net_cfg, val_cases, cfg.patch_shape, cfg.inference_steps) if val_cases else {}
        record = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"), dice)
        run.epochs.append(record)
        log.info("epoch %d loss %.4f %s", epoch, record.loss, " ".join(f"{k}={v:.3f}" for k, v in dice.items()))
    run.params = params
    return run
