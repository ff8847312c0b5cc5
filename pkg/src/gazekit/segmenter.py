"""U-Net eye-region segmenter: channel 0 visible eyeball, channel 1 iris."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentSpec, apply_random
from .checkpoint import load_checkpoint, save_checkpoint
from .datapipe import ArraySet
from .errors import DataError
from .seeding import derive_seed, seed_everything, torch_generator
from .synth import MaskPair

log = logging.getLogger(__name__)

KIND = "segmenter"


@dataclass
class SegmenterConfig:
    input_hw: tuple = (36, 60)
    base_channels: int = 32
    depth: int = 2
    out_channels: int = 2
    convs_per_stage: int = 1
    epochs: int = 50
    lr: float = 1e-5
    batch_size: int = 32
    lr_step: int = 5
    lr_gamma: float = 0.1
    augment: bool = True
    augment_spec: dict = field(default_factory=lambda: AugmentSpec().to_dict())
    seed: int = 0

    def __post_init__(self):
        self.input_hw = tuple(self.input_hw)
        f = 2 ** self.depth
        if self.input_hw[0] % f or self.input_hw[1] % f:
            raise ValueError(f"input {self.input_hw} not divisible by 2**depth = {f}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs and batch_size must be >= 1 and lr > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        return d


def _block(cin, cout, n):
    layers = []
    for i in range(n):
        layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class UNet(nn.Module):
    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.depth = cfg.depth
        chans = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
        self.down = nn.ModuleList()
        cin = 1
        for c in chans:
            self.down.append(_block(cin, c, cfg.convs_per_stage))
            cin = c
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.up.append(nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2))
            self.merge.append(_block(2 * chans[i], chans[i], cfg.convs_per_stage))
        self.head = nn.Conv2d(chans[0], cfg.out_channels, 1)

    def forward(self, x, probe: list | None = None):
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < self.depth:
                skips.append(x)
                if probe is not None:
                    probe.append(("enc", i, tuple(x.shape)))
                x = F.max_pool2d(x, 2)
        for j, (up, merge) in enumerate(zip(self.up, self.merge)):
            x = up(x)
            skip = skips[self.depth - 1 - j]
            x = torch.cat([x, skip], dim=1)
            if probe is not None:
                probe.append(("dec", self.depth - 1 - j, tuple(x.shape)))
            x = merge(x)
        return torch.sigmoid(self.head(x))


def binarize(soft, threshold: float = 0.5) -> MaskPair:
    """Threshold soft (2, H, W) masks and clip the iris to the eyeball."""
    soft = soft.detach().cpu().numpy() if isinstance(soft, torch.Tensor) else np.asarray(soft)
    hard = (soft >= threshold).astype(np.uint8)
    eyeball = hard[0]
    return MaskPair(eyeball, hard[1] & eyeball)


def binarize_batch(soft: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    hard = (np.asarray(soft) >= threshold).astype(np.uint8)
    hard[:, 1] &= hard[:, 0]
    return hard


def _iou(p, g) -> float:
    p = np.asarray(p).astype(bool)
    g = np.asarray(g).astype(bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def evaluate_iou(pred: MaskPair, gt: MaskPair) -> tuple[float, float]:
    if pred.eyeball.shape != gt.eyeball.shape or pred.iris.shape != gt.iris.shape:
        raise ValueError("mask shape mismatch")
    return _iou(pred.eyeball, gt.eyeball), _iou(pred.iris, gt.iris)


def mean_iou(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Per-sample IoU averaged over a batch of (N, 2, H, W) binary masks."""
    if pred.shape != gt.shape:
        raise ValueError("mask shape mismatch")
    ious = np.array([[_iou(p[c], g[c]) for c in range(2)] for p, g in zip(pred, gt)])
    return float(ious[:, 0].mean()), float(ious[:, 1].mean())


def _as_model(ckpt) -> UNet:
    if isinstance(ckpt, UNet):
        return ckpt
    return load_segmenter(ckpt)[0]


@torch.no_grad()
def segment(image: np.ndarray, ckpt) -> np.ndarray:
    """Soft masks (2, H, W) in [0, 1] for one preprocessed image."""
    return segment_batch(np.asarray(image)[None], ckpt)[0]


@torch.no_grad()
def segment_batch(images: np.ndarray, ckpt, batch_size: int = 256) -> np.ndarray:
    model = _as_model(ckpt)
    images = np.asarray(images, dtype=np.float32)
    hw = getattr(model, "input_hw", None)
    if images.ndim != 3 or (hw is not None and tuple(images.shape[1:]) != tuple(hw)):
        raise ValueError(f"expected (N, {hw[0] if hw else 'H'}, {hw[1] if hw else 'W'}) images, got {images.shape}")
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(images[i:i + batch_size]).unsqueeze(1)
        out.append(model(x).numpy())
    return np.concatenate(out) if out else np.zeros((0, 2, *images.shape[1:]), dtype=np.float32)


def build_segmenter(cfg: SegmenterConfig) -> UNet:
    model = UNet(cfg)
    model.input_hw = cfg.input_hw
    return model


@dataclass
class SegmenterResult:
    model: UNet
    config: SegmenterConfig
    best_epoch: int
    val_iou: tuple
    history: list


def train_segmenter(train: ArraySet, val: ArraySet, cfg: SegmenterConfig) -> SegmenterResult:
    """MSE on sigmoid outputs, step LR decay, online augmentation of inputs only.

    Returns the state with the best mean validation IoU.
    """
    if len(train) == 0:
        raise DataError("empty training set")
    if train.masks is None or (len(val) and val.masks is None):
        raise DataError("segmenter training needs eyeball/iris mask ground truth")
    seed_everything(derive_seed(cfg.seed, "segmenter", "init"))
    model = build_segmenter(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_step, gamma=cfg.lr_gamma)
    spec = AugmentSpec.from_dict(cfg.augment_spec)
    rng = np.random.default_rng(derive_seed(cfg.seed, "segmenter", "data"))
    targets = torch.from_numpy(train.masks)
    best = (-1.0, None, 0, (0.0, 0.0))
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        lr = opt.param_groups[0]["lr"]
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            imgs = train.images[idx]
            if cfg.augment:
                imgs = np.stack([apply_random(im, spec, rng) for im in imgs]).astype(np.float32)
            x = torch.from_numpy(np.ascontiguousarray(imgs, dtype=np.float32)).unsqueeze(1)
            loss = F.mse_loss(model(x), targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        train_mse = total / len(order)
        if len(val):
            pred = binarize_batch(segment_batch(val.images, model))
            iou = mean_iou(pred, val.masks.astype(np.uint8))
        else:
            iou = (float("nan"), float("nan"))
        score = float(np.mean(iou)) if len(val) else -train_mse
        history.append({"epoch": epoch + 1, "lr": lr, "train_mse": train_mse,
                        "val_iou_eyeball": iou[0], "val_iou_iris": iou[1]})
        log.info("seg epoch %d lr %.2e mse %.5f iou %.3f/%.3f", epoch + 1, lr, train_mse, *iou)
        if score > best[0]:
            best = (score, copy.deepcopy(model.state_dict()), epoch + 1, iou)
    if best[1] is not None:
        model.load_state_dict(best[1])
    model.eval()
    return SegmenterResult(model, cfg, best[2], best[3], history)


def save_segmenter(path, result: SegmenterResult):
    meta = {"epochs_trained": len(result.history), "best_epoch": result.best_epoch,
            "val_iou": list(result.val_iou), "history": result.history}
    return save_checkpoint(path, KIND, result.config.to_dict(), result.model.state_dict(), meta)


def load_segmenter(path):
    _, config, state, meta = load_checkpoint(path, expect_kind=KIND)
    cfg = SegmenterConfig(**config)
    model = build_segmenter(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, cfg, meta
