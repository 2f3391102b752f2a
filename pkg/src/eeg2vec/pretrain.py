"""Self-supervised EEG model: convolutional feature encoder, span masking,
Transformer context network and the contrastive / reconstruction
objectives, plus the pretraining loop and frozen feature extraction."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import ModelCheckpoint
from .layers import Conv1d, ConvConfig, LayerNorm, PositionalEmbedding, TransformerLayer, gelu

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Eeg2vecConfig:
    n_channels: int = 64
    encoder_layers: int = 4
    encoder_kernel: int = 3
    encoder_dim: int = 64
    context_layers: int = 12
    context_dim: int = 256
    context_ffn_dim: int = 1024
    n_heads: int = 4
    max_len: int = 1024
    dropout: float = 0.0
    mask_ratio: float = 0.5
    mask_span: int = 10
    n_negatives: int = 50
    temperature: float = 1.5
    objective: str = "contrastive"
    negatives_from: str = "prediction"
    recon_average: str = "all"
    detach_targets: bool = False
    lr: float = 5e-4
    updates: int = 2000
    batch_size: int = 8
    window_s: float = 3.0
    hop_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.mask_span < 1 or self.n_negatives < 1:
            raise ValueError("mask_span and n_negatives must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.objective not in ("contrastive", "reconstruction"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.negatives_from not in ("prediction", "target"):
            raise ValueError(f"unknown negatives_from {self.negatives_from!r}")
        if self.recon_average not in ("all", "masked"):
            raise ValueError(f"unknown recon_average {self.recon_average!r}")
        if self.context_dim % self.n_heads:
            raise ValueError("context_dim must be divisible by n_heads")

    @classmethod
    def full(cls, **overrides) -> "Eeg2vecConfig":
        """Full-size setting (12 context layers, 100k updates)."""
        return cls(**{"updates": 100_000, **overrides})

    @classmethod
    def desk(cls, **overrides) -> "Eeg2vecConfig":
        """Small setting that trains in seconds on a laptop CPU."""
        base = dict(
            n_channels=16,
            encoder_dim=64,
            context_layers=2,
            context_dim=64,
            context_ffn_dim=128,
            n_heads=2,
            updates=200,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Eeg2vecConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown Eeg2vecConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskPlan:
    masked: np.ndarray
    starts: tuple[int, ...]

    @property
    def coverage(self) -> int:
        return int(self.masked.sum())


def sample_mask(n_frames: int, mask_ratio: float, mask_span: int, rng: np.random.Generator) -> MaskPlan:
    """Draw span starts uniformly from ``[0, n_frames - mask_span]`` until the
    union of spans covers at least ``mask_ratio * n_frames`` frames."""
    if n_frames < mask_span:
        raise ValueError(f"{n_frames} frames cannot hold a span of {mask_span}")
    target = math.ceil(mask_ratio * n_frames)
    masked = np.zeros(n_frames, dtype=bool)
    starts = []
    while masked.sum() < target:
        s = int(rng.integers(0, n_frames - mask_span + 1))
        starts.append(s)
        masked[s : s + mask_span] = True
    return MaskPlan(masked, tuple(starts))


def batch_masks(batch: int, n_frames: int, cfg: Eeg2vecConfig, rng) -> torch.Tensor:
    plans = [sample_mask(n_frames, cfg.mask_ratio, cfg.mask_span, rng) for _ in range(batch)]
    return torch.from_numpy(np.stack([p.masked for p in plans]))


# ---------------------------------------------------------------------------
# model


class FeatureEncoder(nn.Module):
    """Stacked conv -> layer norm -> GELU stages, stride 1."""

    def __init__(self, n_channels: int, dim: int, n_layers: int, kernel: int):
        super().__init__()
        self.n_channels = n_channels
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i in range(n_layers):
            self.convs.append(Conv1d(ConvConfig(n_channels if i == 0 else dim, dim, kernel)))
            self.norms.append(LayerNorm(dim))

    def forward(self, eeg):
        """``eeg`` is ``[B, C, T]`` (or ``[C, T]``); returns ``[B, T, dim]``."""
        if eeg.shape[-2] != self.n_channels:
            raise ValueError(f"expected {self.n_channels} EEG channels, got {eeg.shape[-2]}")
        x = eeg.transpose(-1, -2)
        for conv, norm in zip(self.convs, self.norms):
            x = gelu(norm(conv(x)))
        return x


class Eeg2vec(nn.Module):
    def __init__(self, cfg: Eeg2vecConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = FeatureEncoder(cfg.n_channels, cfg.encoder_dim, cfg.encoder_layers, cfg.encoder_kernel)
        self.mask_embedding = nn.Parameter(torch.empty(cfg.encoder_dim).uniform_())
        self.in_proj = nn.Linear(cfg.encoder_dim, cfg.context_dim)
        self.pos = PositionalEmbedding(cfg.max_len, cfg.context_dim)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.context_dim, cfg.context_ffn_dim, cfg.n_heads, cfg.dropout)
            for _ in range(cfg.context_layers)
        )
        self.final_norm = LayerNorm(cfg.context_dim)
        self.out_proj = nn.Linear(cfg.context_dim, cfg.encoder_dim)

    def encode_features(self, eeg):
        return self.encoder(eeg)

    def context(self, z, mask=None):
        """Context representation ``[B, T, context_dim]`` before the output projection."""
        if mask is not None:
            if mask.shape != z.shape[:-1]:
                raise ValueError(f"mask shape {tuple(mask.shape)} does not match features {tuple(z.shape[:-1])}")
            z = torch.where(mask[..., None], self.mask_embedding.to(z.dtype), z)
        x = self.pos(self.in_proj(z))
        for layer in self.layers:
            x = layer(x)
        return self.final_norm(x)

    def context_forward(self, z, mask=None):
        """Predictions ``c_pre`` in the feature space, ``[B, T, encoder_dim]``."""
        return self.out_proj(self.context(z, mask))

    def forward(self, eeg, mask=None):
        """Returns ``(z, c_pre)``."""
        z = self.encode_features(eeg)
        return z, self.context_forward(z, mask)


# ---------------------------------------------------------------------------
# objectives


def info_nce(anchor, positive, negatives, temperature: float):
    """Mean of ``-log softmax`` of cosine similarities over ``[positive, negatives]``.

    Shapes: anchor ``[M, D]``, positive ``[M, D]``, negatives ``[M, K, D]``.
    """
    pos = F.cosine_similarity(anchor, positive, dim=-1)
    neg = F.cosine_similarity(anchor[:, None, :], negatives, dim=-1)
    logits = torch.cat([pos[:, None], neg], dim=1) / temperature
    return -torch.log_softmax(logits, dim=1)[:, 0].mean()


def _negative_indices(m: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """For each of ``m`` anchors pick ``k`` of the other ``m - 1`` positions."""
    if m < 2:
        raise ValueError("need at least two masked frames to draw negatives")
    if m - 1 >= k:
        keys = rng.random((m, m - 1))
        pick = np.argsort(keys, axis=1)[:, :k]
    else:
        warnings.warn(
            f"only {m - 1} candidate positions for {k} negatives; sampling with replacement",
            RuntimeWarning,
            stacklevel=3,
        )
        pick = rng.integers(0, m - 1, size=(m, k))
    # skip the anchor's own position
    return pick + (pick >= np.arange(m)[:, None])


def contrastive_loss(
    c_pre,
    z_tar,
    mask,
    rng: np.random.Generator,
    n_negatives: int = 50,
    temperature: float = 1.5,
    negatives_from: str = "prediction",
):
    """Contrastive loss over masked frames.

    For every masked frame the positive is the target feature at that frame
    and the negatives are ``n_negatives`` vectors drawn from other masked
    frames of the same sequence, taken from the predictions by default or
    from the targets when ``negatives_from="target"``.
    """
    if c_pre.dim() == 2:
        c_pre, z_tar, mask = c_pre[None], z_tar[None], torch.as_tensor(mask)[None]
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not mask.any():
        raise ValueError("mask has no masked frames")
    pool_src = c_pre if negatives_from == "prediction" else z_tar
    total, count = 0.0, 0
    for b in range(c_pre.shape[0]):
        idx = torch.nonzero(mask[b]).squeeze(1)
        m = idx.numel()
        if m == 0:
            continue
        anchors, positives, pool = c_pre[b, idx], z_tar[b, idx], pool_src[b, idx]
        neg = torch.from_numpy(_negative_indices(m, n_negatives, rng))
        total = total + info_nce(anchors, positives, pool[neg], temperature) * m
        count += m
    return total / count


def reconstruction_loss(c_pre, z_tar, mask=None, average: str = "all"):
    """Mean absolute error, over every frame or over masked frames only."""
    if c_pre.shape != z_tar.shape:
        raise ValueError(f"shape mismatch {tuple(c_pre.shape)} vs {tuple(z_tar.shape)}")
    err = (c_pre - z_tar).abs()
    if average == "all":
        return err.mean()
    if mask is None:
        raise ValueError("masked averaging needs a mask")
    mask = torch.as_tensor(mask, dtype=torch.bool)
    return err[mask].mean()


def objective_loss(model: Eeg2vec, eeg, mask, rng):
    cfg = model.cfg
    z, c_pre = model(eeg, mask)
    target = z.detach() if cfg.detach_targets else z
    if cfg.objective == "contrastive":
        return contrastive_loss(
            c_pre, target, mask, rng, cfg.n_negatives, cfg.temperature, cfg.negatives_from
        )
    return reconstruction_loss(c_pre, target, mask, cfg.recon_average)


# ---------------------------------------------------------------------------
# training


@dataclass
class PretrainResult:
    model: Eeg2vec
    checkpoint: ModelCheckpoint
    losses: list[float]


def pretrain(
    windows: np.ndarray,
    cfg: Eeg2vecConfig,
    on_step: Callable[[int, float], None] | None = None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
) -> PretrainResult:
    """Adam on the configured objective over EEG windows ``[N, C, T]``.

    Deterministic for a fixed ``cfg.seed`` on a single thread.
    """
    windows = np.asarray(windows, dtype=np.float32)
    if windows.ndim != 3 or len(windows) == 0:
        raise ValueError("windows must be a non-empty [N, C, T] array")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = Eeg2vec(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    n, _, t = windows.shape
    losses = []
    model.train()
    for step in range(1, cfg.updates + 1):
        idx = rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
        eeg = torch.from_numpy(windows[np.sort(idx)]).to(model.mask_embedding.dtype)
        mask = batch_masks(len(idx), t, cfg, rng)
        loss = objective_loss(model, eeg, mask, rng)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite {cfg.objective} loss at step {step} (last finite: "
                f"{losses[-1] if losses else 'none'})"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
        if checkpoint_path and checkpoint_every and step % checkpoint_every == 0:
            _checkpoint(model, step, losses).save(checkpoint_path)
    ckpt = _checkpoint(model, cfg.updates, losses)
    if checkpoint_path:
        ckpt.save(checkpoint_path)
    return PretrainResult(model, ckpt, losses)


def _checkpoint(model: Eeg2vec, step: int, losses) -> ModelCheckpoint:
    return ModelCheckpoint.from_module(
        "eeg2vec", model.cfg.to_dict(), model, step=step, final_loss=losses[-1] if losses else None
    )


def load_eeg2vec(ckpt: ModelCheckpoint | str | os.PathLike) -> Eeg2vec:
    if not isinstance(ckpt, ModelCheckpoint):
        ckpt = ModelCheckpoint.load(ckpt)
    if ckpt.kind != "eeg2vec":
        raise ValueError(f"checkpoint kind {ckpt.kind!r} is not an eeg2vec model")
    model = Eeg2vec(Eeg2vecConfig.from_dict(ckpt.config))
    return ckpt.load_into(model)


class FrozenExtractor:
    """Eval-mode Eeg2vec returning unmasked context features without gradients."""

    def __init__(self, model: Eeg2vec | ModelCheckpoint):
        if isinstance(model, ModelCheckpoint):
            model = load_eeg2vec(model)
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @property
    def out_dim(self) -> int:
        return self.model.cfg.context_dim

    @property
    def n_channels(self) -> int:
        return self.model.cfg.n_channels

    def __call__(self, eeg) -> torch.Tensor:
        with torch.no_grad():
            dtype = next(self.model.parameters()).dtype
            eeg = torch.as_tensor(eeg).to(dtype)
            return self.model.context(self.model.encode_features(eeg))


def extract_representation(checkpoint, eeg) -> np.ndarray:
    """``[C, T]`` EEG -> ``[T, context_dim]`` features from a frozen model."""
    extractor = checkpoint if isinstance(checkpoint, FrozenExtractor) else FrozenExtractor(checkpoint)
    return extractor(np.asarray(eeg, dtype=np.float32)).numpy()
