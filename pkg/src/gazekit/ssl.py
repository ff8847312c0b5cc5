"""Contrastive (NT-Xent) pretraining of the eye-image encoder."""
from __future__ import annotations

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
from .seeding import derive_seed, seed_everything

log = logging.getLogger(__name__)

KIND = "eye_encoder"
TEMPERATURE = 0.1


class EyeEncoder(nn.Module):
    """Three (3x3 conv, ReLU, 2x max-pool) stages, flattened and projected to ``channels[-1]`` dims.

    Flattening rather than global pooling keeps where things are, which is
    what gaze depends on (iris position inside the eyeball).
    """

    def __init__(self, channels=(32, 64, 128), in_channels: int = 1, input_hw=(36, 60)):
        super().__init__()
        layers = []
        cin = in_channels
        h, w = input_hw
        for c in channels:
            layers += [nn.Conv2d(cin, c, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            cin = c
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ValueError(f"input {tuple(input_hw)} too small for {len(channels)} pooling stages")
        self.features = nn.Sequential(*layers)
        self.embed = nn.Sequential(nn.Flatten(), nn.Linear(cin * h * w, cin), nn.ReLU(inplace=True))
        self.input_hw = tuple(input_hw)
        self.out_dim = cin

    def forward(self, x):
        return self.embed(self.features(x))


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int = 128, hidden: int = 128, out_dim: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))

    def forward(self, h):
        return F.normalize(self.net(h), dim=1)


def nt_xent_loss(z: torch.Tensor, temperature: float = TEMPERATURE, validate: bool = True) -> torch.Tensor:
    """Mean NT-Xent loss over all 2N anchors; row i is paired with row (i + N) mod 2N.

    Similarities are cosines, so ``validate=False`` accepts unnormalized
    rows (used for finite-difference checks).
    """
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2:
        raise ValueError(f"expected (2N, d) embeddings with N >= 1, got {tuple(z.shape)}")
    if validate:
        norms = z.detach().norm(dim=1)
        if not torch.all((norms - 1).abs() <= 1e-6):
            raise ValueError("embeddings must be L2-normalized (|z| = 1 within 1e-6)")
    n2 = z.shape[0]
    zn = F.normalize(z, dim=1)
    sim = zn @ zn.T / temperature
    self_mask = torch.eye(n2, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    idx = torch.arange(n2, device=z.device)
    pos = (idx + n2 // 2) % n2
    return (torch.logsumexp(sim, dim=1) - sim[idx, pos]).mean()


def make_pair(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator):
    return apply_random(image, spec, rng), apply_random(image, spec, rng)


@dataclass
class SSLConfig:
    encoder_channels: tuple = (32, 64, 128)
    use_projection: bool = True
    projection_dims: tuple = (128, 64)
    temperature: float = TEMPERATURE
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 128
    augment_spec: dict = field(default_factory=lambda: AugmentSpec().to_dict())
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.projection_dims = tuple(self.projection_dims)
        if self.epochs < 1 or not self.lr > 0 or not self.temperature > 0:
            raise ValueError("epochs must be >= 1, lr and temperature > 0")
        if self.batch_size < 2:
            raise ValueError("contrastive batches need at least 2 images")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["projection_dims"] = list(self.projection_dims)
        return d


def cosine_lr(epoch: int, base_lr: float, epochs: int) -> float:
    """Cosine decay from ``base_lr`` at epoch 0 to 0 at ``epochs``."""
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * epoch / epochs))


@dataclass
class PretrainResult:
    encoder: EyeEncoder
    config: SSLConfig
    history: list


def pretrain(data: ArraySet, cfg: SSLConfig) -> PretrainResult:
    """Train encoder (+ projection head) on unlabeled images; the head is discarded."""
    if len(data) < 2:
        raise DataError("need at least 2 images for contrastive pretraining")
    seed_everything(derive_seed(cfg.seed, "ssl", "init"))
    encoder = EyeEncoder(cfg.encoder_channels)
    head = (ProjectionHead(encoder.out_dim, *cfg.projection_dims) if cfg.use_projection
            else nn.Identity())
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    spec = AugmentSpec.from_dict(cfg.augment_spec)
    rng = np.random.default_rng(derive_seed(cfg.seed, "ssl", "data"))
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.lr, cfg.epochs)
        for g in opt.param_groups:
            g["lr"] = lr
        encoder.train()
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            pairs = [make_pair(data.images[i], spec, rng) for i in idx]
            views = np.stack([a for a, _ in pairs] + [b for _, b in pairs]).astype(np.float32)
            z = head(encoder(torch.from_numpy(views).unsqueeze(1)))
            if not cfg.use_projection:
                z = F.normalize(z, dim=1)
            loss = nt_xent_loss(z, cfg.temperature)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append({"epoch": epoch + 1, "lr": lr, "loss": float(np.mean(losses))})
        log.info("ssl epoch %d lr %.2e loss %.4f", epoch + 1, lr, history[-1]["loss"])
    encoder.eval()
    return PretrainResult(encoder, cfg, history)


def save_encoder(path, result: PretrainResult):
    return save_checkpoint(path, KIND, result.config.to_dict(), result.encoder.state_dict(),
                           {"history": result.history})


def load_encoder(path):
    _, config, state, meta = load_checkpoint(path, expect_kind=KIND)
    cfg = SSLConfig(**config)
    enc = EyeEncoder(cfg.encoder_channels)
    enc.load_state_dict(state)
    enc.eval()
    return enc, cfg, meta
