"""Multistream gaze regressor: eye image, eyeball mask and iris mask streams."""
from __future__ import annotations

import copy
import json
import math
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .datapipe import ArraySet, load_arrays, load_manifest
from .errors import DataError
from .geometry import GazeAngles, angular_error_deg
from .seeding import derive_seed, seed_everything
from .segmenter import binarize_batch, load_segmenter, segment_batch
from .ssl import EyeEncoder, load_encoder

log = logging.getLogger(__name__)

KIND = "multistream_gaze"
STREAMS = ("eye", "eyeball", "iris")


class MultistreamModel(nn.Module):
    def __init__(self, encoder_channels=(32, 64, 128), head_units=(256, 128)):
        super().__init__()
        self.encoder_eye = EyeEncoder(encoder_channels)
        self.encoder_eyeball = EyeEncoder(encoder_channels)
        self.encoder_iris = EyeEncoder(encoder_channels)
        fused = 3 * self.encoder_eye.out_dim
        self.head = nn.Sequential(
            nn.Linear(fused, head_units[0]), nn.ReLU(inplace=True),
            nn.Linear(head_units[0], head_units[1]), nn.ReLU(inplace=True),
            nn.Linear(head_units[1], 2),
        )

    def features(self, image, eyeball, iris):
        return torch.cat([self.encoder_eye(image), self.encoder_eyeball(eyeball), self.encoder_iris(iris)], dim=1)

    def forward(self, image, eyeball, iris):
        """All inputs (B, 1, H, W); returns (B, 2) pitch/yaw radians."""
        return self.head(self.features(image, eyeball, iris))


@dataclass
class GazeTrainConfig:
    encoder_channels: tuple = (32, 64, 128)
    epochs_total: int = 25
    freeze_epochs: int = 5
    lr: float = 1e-5
    batch_size: int = 128
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        if self.epochs_total < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs_total and batch_size must be >= 1 and lr > 0")
        if not 0 <= self.freeze_epochs <= self.epochs_total:
            raise ValueError("freeze_epochs must lie in [0, epochs_total]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d


class PlateauDecay:
    """Multiply lr by ``factor`` once ``patience`` consecutive epochs fail to beat the best metric."""

    def __init__(self, optimizer, factor: float = 0.1, patience: int = 3):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, metric: float) -> bool:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for g in self.optimizer.param_groups:
                g["lr"] *= self.factor
            self.bad_epochs = 0
            return True
        return False


def _tensors(images, masks, idx=None):
    if idx is not None:
        images, masks = images[idx], masks[idx]
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).unsqueeze(1)
    m = torch.from_numpy(np.ascontiguousarray(masks, dtype=np.float32))
    return x, m[:, 0:1], m[:, 1:2]


@torch.no_grad()
def predict_arrays(model: MultistreamModel, images: np.ndarray, masks: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    if masks is None:
        raise ValueError("mask streams are required")
    if masks.shape[0] != images.shape[0] or masks.shape[2:] != images.shape[1:]:
        raise ValueError(f"mask shape {masks.shape} does not match images {images.shape}")
    model.eval()
    out = [model(*_tensors(images[i:i + batch_size], masks[i:i + batch_size])).double().numpy()
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 2))


def forward(model: MultistreamModel, image: np.ndarray, masks) -> GazeAngles:
    """Predict gaze for one 36x60 sample; ``masks`` is a MaskPair or (2, H, W) array."""
    if masks is None:
        raise ValueError("masks are a required input stream")
    m = masks.stack() if hasattr(masks, "stack") else np.asarray(masks)
    pred = predict_arrays(model, np.asarray(image)[None], m[None])[0]
    pitch = float(np.clip(pred[0], -math.pi / 2, math.pi / 2))
    yaw = math.remainder(float(pred[1]), 2 * math.pi)
    return GazeAngles(pitch, math.pi if yaw <= -math.pi else yaw)


@dataclass
class GazeTrainResult:
    model: MultistreamModel
    config: GazeTrainConfig
    ssl_init: bool
    best_epoch: int
    history: list


def _ssl_state(ssl_ckpt):
    if ssl_ckpt is None:
        return None
    if isinstance(ssl_ckpt, EyeEncoder):
        return ssl_ckpt.state_dict()
    if isinstance(ssl_ckpt, dict):
        return ssl_ckpt
    return load_encoder(ssl_ckpt)[0].state_dict()


def train_gaze(train: ArraySet, val: ArraySet, cfg: GazeTrainConfig, ssl_ckpt=None,
               on_epoch=None) -> GazeTrainResult:
    """MSE on radians with Adam; plateau decay on validation mean angular error.

    With ``ssl_ckpt`` the eye encoder starts from the pretrained weights and
    is held fixed (no updates, eval mode) for ``cfg.freeze_epochs`` epochs.
    ``on_epoch(epoch, model)`` is called after every epoch.
    """
    if len(train) == 0:
        raise DataError("empty training set")
    for name, part in (("train", train), ("val", val)):
        if len(part) and part.gaze is None:
            raise DataError(f"{name} set contains samples without gaze labels")
        if len(part) and part.masks is None:
            raise DataError(f"{name} set contains samples without masks")
    seed_everything(derive_seed(cfg.seed, "gaze", "init"))
    model = MultistreamModel(cfg.encoder_channels)
    state = _ssl_state(ssl_ckpt)
    if state is not None:
        model.encoder_eye.load_state_dict(state)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    plateau = PlateauDecay(opt, cfg.plateau_factor, cfg.plateau_patience)
    rng = np.random.default_rng(derive_seed(cfg.seed, "gaze", "data"))
    target = torch.from_numpy(train.gaze.astype(np.float32))
    eval_set = val if len(val) else train
    best = (float("inf"), None, 0)
    history = []
    for epoch in range(cfg.epochs_total):
        frozen = state is not None and epoch < cfg.freeze_epochs
        model.train()
        model.encoder_eye.requires_grad_(not frozen)
        if frozen:
            model.encoder_eye.eval()
        lr = opt.param_groups[0]["lr"]
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pred = model(*_tensors(train.images, train.masks, idx))
            loss = F.mse_loss(pred, target[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        model.encoder_eye.requires_grad_(True)
        err = float(angular_error_deg(predict_arrays(model, eval_set.images, eval_set.masks),
                                      eval_set.gaze).mean())
        history.append({"epoch": epoch + 1, "lr": lr, "frozen_eye_encoder": frozen,
                        "train_mse": total / len(order), "val_error_deg": err})
        log.info("gaze epoch %d lr %.2e mse %.5f val %.2f deg%s", epoch + 1, lr, total / len(order), err,
                 " (eye encoder frozen)" if frozen else "")
        if on_epoch is not None:
            on_epoch(epoch + 1, model)
        if err < best[0]:
            best = (err, copy.deepcopy(model.state_dict()), epoch + 1)
        plateau.step(err)
    model.load_state_dict(best[1])
    model.eval()
    return GazeTrainResult(model, cfg, state is not None, best[2], history)


def save_gaze(path, result: GazeTrainResult):
    meta = {"ssl_init": result.ssl_init, "best_epoch": result.best_epoch, "history": result.history}
    return save_checkpoint(path, KIND, result.config.to_dict(), result.model.state_dict(), meta)


def load_gaze(path):
    _, config, state, meta = load_checkpoint(path, expect_kind=KIND)
    cfg = GazeTrainConfig(**config)
    model = MultistreamModel(cfg.encoder_channels)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not match the stored config: {exc}") from exc
    model.eval()
    return model, cfg, meta


def masks_for(data: ArraySet, seg_ckpt=None, use_gt_masks: bool = True) -> np.ndarray:
    """Ground-truth masks when present and allowed, otherwise segmenter output."""
    if use_gt_masks and data.masks is not None:
        return data.masks
    if seg_ckpt is None:
        raise DataError("samples lack masks and no segmenter checkpoint was given")
    return binarize_batch(segment_batch(data.images, seg_ckpt)).astype(np.float32)


def predict_batch(model_ckpt, manifest, out_path, seg_ckpt=None, use_gt_masks: bool = True) -> Path:
    """Write one JSON line per sample: id, predicted and (if known) true pitch/yaw."""
    model = model_ckpt if isinstance(model_ckpt, MultistreamModel) else load_gaze(model_ckpt)[0]
    seg = seg_ckpt
    if seg_ckpt is not None and not hasattr(seg_ckpt, "forward"):
        seg = load_segmenter(seg_ckpt)[0]
    records = load_manifest(manifest)
    data = load_arrays(records)
    masks = masks_for(data, seg, use_gt_masks)
    pred = predict_arrays(model, data.images, masks)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for i, sid in enumerate(data.ids):
            rec = {"id": sid, "subject_id": data.subjects[i],
                   "pred_pitch_rad": float(pred[i, 0]), "pred_yaw_rad": float(pred[i, 1])}
            if data.gaze is not None:
                rec["gt_pitch_rad"] = float(data.gaze[i, 0])
                rec["gt_yaw_rad"] = float(data.gaze[i, 1])
                rec["error_deg"] = float(angular_error_deg(pred[i:i + 1], data.gaze[i:i + 1])[0])
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out_path
