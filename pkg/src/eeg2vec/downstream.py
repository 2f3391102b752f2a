"""Match-mismatch classification and envelope regression on top of a frozen
EEG feature extractor."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import ModelCheckpoint
from .eegio import SegmentTriple, Window, sample_imposter
from .layers import Conv1d, ConformerConfig, ConvConfig, PositionalEmbedding, conformer_stack, gelu
from .pretrain import FrozenExtractor, TrainingDivergedError

log = logging.getLogger(__name__)


class DegenerateInputError(ValueError):
    """Raised when a correlation is undefined because an input is constant."""


@dataclass(frozen=True)
class DownstreamConfig:
    speech_layers: int = 2
    speech_kernel: int = 3
    speech_dim: int = 64
    model_dim: int = 128
    ffn_dim: int = 512
    n_heads: int = 4
    conv_kernel: int = 31
    conv_dim: int = 128
    conv_norm: str = "batch"
    n_layers: int = 4
    shared_backbone: bool = True
    max_len: int = 1024
    dropout: float = 0.0
    lr: float = 1e-4
    weight_decay: float = 1e-2
    epochs: int = 100
    batch_size: int = 32
    augment: bool = True
    alpha_range: tuple[float, float] = (0.0, 0.2)
    window_s: float = 3.0
    hop_s: float = 1.0
    head_init: float = 5.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.alpha_range
        if not 0.0 <= lo <= hi < 1.0:
            raise ValueError(f"alpha_range {self.alpha_range} must lie inside [0, 1)")
        object.__setattr__(self, "alpha_range", (float(lo), float(hi)))
        if self.window_s <= 0 or self.hop_s <= 0:
            raise ValueError("window_s and hop_s must be positive")
        self.backbone_config()

    def backbone_config(self) -> ConformerConfig:
        return ConformerConfig(
            self.model_dim, self.ffn_dim, self.n_heads, self.conv_kernel, self.conv_dim, self.conv_norm, self.dropout
        )

    @classmethod
    def full(cls, **overrides) -> "DownstreamConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "DownstreamConfig":
        base = dict(
            speech_dim=16,
            model_dim=32,
            ffn_dim=64,
            n_heads=2,
            conv_kernel=15,
            conv_dim=32,
            conv_norm="layer",
            n_layers=2,
            lr=2e-3,
            batch_size=16,
            epochs=20,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["alpha_range"] = list(self.alpha_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DownstreamConfig":
        d = dict(d)
        if "alpha_range" in d:
            d["alpha_range"] = tuple(d["alpha_range"])
        return cls(**d)


# ---------------------------------------------------------------------------
# correlation, losses, augmentation


def pcc(y, y_hat) -> float:
    """Pearson correlation with population (1/N) moments."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise ValueError("pcc expects two 1-D vectors of equal length")
    yc, hc = y - y.mean(), y_hat - y_hat.mean()
    sy, sh = math.sqrt(np.mean(yc * yc)), math.sqrt(np.mean(hc * hc))
    if sy == 0.0 or sh == 0.0:
        raise DegenerateInputError("correlation undefined: an input has zero variance")
    return float(np.clip(np.mean(yc * hc) / (sy * sh), -1.0, 1.0))


def pcc_torch(y, y_hat):
    """Per-row PCC along the last axis."""
    yc = y - y.mean(-1, keepdim=True)
    hc = y_hat - y_hat.mean(-1, keepdim=True)
    var_y, var_h = (yc * yc).mean(-1), (hc * hc).mean(-1)
    if bool((var_y == 0).any()) or bool((var_h == 0).any()):
        raise DegenerateInputError("correlation undefined: an input has zero variance")
    return (yc * hc).mean(-1) / torch.sqrt(var_y * var_h)


def neg_pcc_loss(y, y_hat):
    """Negative PCC, averaged over rows when batched."""
    return -pcc_torch(y, y_hat).mean()


def bce_loss(logit, label):
    label = torch.as_tensor(label, dtype=logit.dtype)
    return F.binary_cross_entropy_with_logits(logit, label)


def channel_mix_augment(eeg: np.ndarray, rng: np.random.Generator, alpha_range=(0.0, 0.2)) -> np.ndarray:
    """Mix each channel with a randomly chosen other channel.

    ``out[c] = (1 - a) * eeg[c] + a * eeg[src]`` with ``src != c`` and
    ``a ~ U(alpha_range)`` drawn per channel (and per window when batched).
    """
    eeg = np.asarray(eeg)
    c = eeg.shape[-2]
    if c < 2:
        raise ValueError("channel mixing needs at least two channels")
    lead = eeg.shape[:-2]
    src = rng.integers(0, c - 1, size=lead + (c,))
    src = src + (src >= np.arange(c))
    alpha = rng.uniform(alpha_range[0], alpha_range[1], size=lead + (c, 1)).astype(eeg.dtype)
    mixed = np.take_along_axis(eeg, src[..., None], axis=-2) if lead else eeg[src]
    return (1 - alpha) * eeg + alpha * mixed


# ---------------------------------------------------------------------------
# models


class SpeechEncoder(nn.Module):
    def __init__(self, dim: int, n_layers: int, kernel: int):
        super().__init__()
        self.convs = nn.ModuleList(
            Conv1d(ConvConfig(1 if i == 0 else dim, dim, kernel)) for i in range(n_layers)
        )

    def forward(self, stim):
        x = stim.unsqueeze(-1)
        for conv in self.convs:
            x = gelu(conv(x))
        return x


class _Backbone(nn.Module):
    def __init__(self, cfg: DownstreamConfig):
        super().__init__()
        self.pos = PositionalEmbedding(cfg.max_len, cfg.model_dim)
        self.blocks = conformer_stack(cfg.backbone_config(), cfg.n_layers)

    def forward(self, x):
        return self.blocks(self.pos(x))


class MatchMismatchModel(nn.Module):
    """Scores which of two stimuli matches an EEG window.

    The head is ``w * (sim_a - sim_b)``, a linear layer over the concatenated
    similarities with weights tied to ``(w, -w)`` and no bias, so swapping
    the stimuli negates the logit.
    """

    def __init__(self, cfg: DownstreamConfig, eeg_dim: int):
        super().__init__()
        self.cfg = cfg
        self.eeg_dim = eeg_dim
        self.eeg_proj = nn.Linear(eeg_dim, cfg.model_dim)
        self.speech = SpeechEncoder(cfg.speech_dim, cfg.speech_layers, cfg.speech_kernel)
        self.speech_proj = nn.Linear(cfg.speech_dim, cfg.model_dim)
        self.backbone = _Backbone(cfg)
        self.speech_backbone = self.backbone if cfg.shared_backbone else _Backbone(cfg)
        self.head_weight = nn.Parameter(torch.tensor(cfg.head_init))

    def similarities(self, feats, stim_a, stim_b):
        e = self.backbone(self.eeg_proj(feats))
        sims = []
        for stim in (stim_a, stim_b):
            s = self.speech_backbone(self.speech_proj(self.speech(stim)))
            sims.append(F.cosine_similarity(e, s, dim=-1).mean(-1))
        return sims[0], sims[1]

    def forward(self, feats, stim_a, stim_b):
        """``feats`` ``[B, T, eeg_dim]``, stimuli ``[B, T]`` -> logits ``[B]``."""
        sim_a, sim_b = self.similarities(feats, stim_a, stim_b)
        w = torch.stack([self.head_weight, -self.head_weight])
        return torch.stack([sim_a, sim_b], dim=-1) @ w


class RegressionModel(nn.Module):
    def __init__(self, cfg: DownstreamConfig, eeg_dim: int):
        super().__init__()
        self.cfg = cfg
        self.eeg_dim = eeg_dim
        self.eeg_proj = nn.Linear(eeg_dim, cfg.model_dim)
        self.backbone = _Backbone(cfg)
        self.head = nn.Linear(cfg.model_dim, 1)

    def forward(self, feats):
        """``[B, T, eeg_dim]`` -> envelope ``[B, T]``."""
        return self.head(self.backbone(self.eeg_proj(feats))).squeeze(-1)


class RawFeatures:
    """Stand-in extractor for training without pretraining: EEG as ``[B, T, C]``."""

    def __init__(self, n_channels: int):
        self.out_dim = n_channels
        self.n_channels = n_channels

    def __call__(self, eeg):
        return torch.as_tensor(eeg, dtype=torch.float32).transpose(-1, -2)


def features(extractor, eeg) -> torch.Tensor:
    eeg = np.asarray(eeg, dtype=np.float32)
    if eeg.shape[-2] != extractor.n_channels:
        raise ValueError(f"extractor expects {extractor.n_channels} channels, got {eeg.shape[-2]}")
    return extractor(eeg).float()


@dataclass(frozen=True)
class MatchPrediction:
    similarity_a: float
    similarity_b: float
    logit: float

    @property
    def predicted(self) -> int:
        return int(self.logit > 0)


@dataclass(frozen=True)
class EnvelopePrediction:
    y_hat: np.ndarray


def mm_forward(model: MatchMismatchModel, triple: SegmentTriple, extractor) -> MatchPrediction:
    if not (len(triple.stim_a) == len(triple.stim_b) == triple.eeg.shape[-1]):
        raise ValueError("triple lengths are not aligned")
    model.eval()
    with torch.no_grad():
        f = features(extractor, triple.eeg[None])
        a = torch.as_tensor(triple.stim_a, dtype=torch.float32)[None]
        b = torch.as_tensor(triple.stim_b, dtype=torch.float32)[None]
        sa, sb = model.similarities(f, a, b)
        logit = model(f, a, b)
    return MatchPrediction(sa.item(), sb.item(), logit.item())


def reg_forward(model: RegressionModel, eeg: np.ndarray, extractor) -> EnvelopePrediction:
    model.eval()
    with torch.no_grad():
        y = model(features(extractor, np.asarray(eeg)[None]))[0]
    return EnvelopePrediction(y.numpy().astype(np.float64))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: nn.Module
    checkpoint: ModelCheckpoint
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def make_triples(windows: Sequence[Window], rng: np.random.Generator) -> list[SegmentTriple]:
    """One triple per window, imposters drawn from the same recording first."""
    groups: dict[tuple[str, str], list[int]] = {}
    for i, w in enumerate(windows):
        groups.setdefault((w.subject_id, w.trial_id), []).append(i)
    triples = []
    for key in sorted(groups):
        members = [windows[i] for i in groups[key]]
        for j in range(len(members)):
            triples.append(sample_imposter(members, j, rng, pool=windows))
    return triples


def _stack_triples(triples):
    eeg = np.stack([t.eeg for t in triples]).astype(np.float32)
    a = torch.from_numpy(np.stack([t.stim_a for t in triples]).astype(np.float32))
    b = torch.from_numpy(np.stack([t.stim_b for t in triples]).astype(np.float32))
    y = torch.tensor([t.label for t in triples], dtype=torch.float32)
    return eeg, a, b, y


def _batched_features(extractor, eeg: np.ndarray, batch: int = 64) -> torch.Tensor:
    return torch.cat([features(extractor, eeg[i : i + batch]) for i in range(0, len(eeg), batch)])


def _optimizer(model, cfg):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def _check_finite(value: float, epoch: int, step: int, what: str):
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite {what} loss at epoch {epoch}, step {step}")


def evaluate_mm(model, extractor, triples, batch: int = 64) -> tuple[float, np.ndarray]:
    """Accuracy and logits over ``triples`` (no augmentation, eval mode)."""
    eeg, a, b, y = _stack_triples(triples)
    model.eval()
    logits = []
    with torch.no_grad():
        for i in range(0, len(triples), batch):
            f = features(extractor, eeg[i : i + batch])
            logits.append(model(f, a[i : i + batch], b[i : i + batch]))
    logits = torch.cat(logits).numpy().astype(np.float64)
    acc = float(np.mean((logits > 0) == (y.numpy() > 0.5)))
    return acc, logits


def evaluate_reg(model, extractor, windows: Sequence[Window], batch: int = 64) -> tuple[float, list[float], np.ndarray]:
    """Mean segment PCC, per-segment PCCs and predictions."""
    eeg = np.stack([w.eeg for w in windows]).astype(np.float32)
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(windows), batch):
            preds.append(model(features(extractor, eeg[i : i + batch])))
    preds = torch.cat(preds).numpy().astype(np.float64)
    scores = [pcc(w.envelope, p) for w, p in zip(windows, preds)]
    return float(np.mean(scores)), scores, preds


def train_mm(
    train_windows: Sequence[Window],
    dev_windows: Sequence[Window],
    extractor,
    cfg: DownstreamConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """BCE training with AdamW; keeps the epoch with the best dev accuracy.

    Imposters for training are redrawn every epoch; dev triples are fixed.
    """
    if not train_windows or not dev_windows:
        raise ValueError("train and dev windows must be non-empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dev_triples = make_triples(dev_windows, np.random.default_rng([cfg.seed, 1]))
    model = MatchMismatchModel(cfg, extractor.out_dim)
    opt = _optimizer(model, cfg)
    cached = None if cfg.augment else _batched_features(extractor, np.stack([w.eeg for w in train_windows]))
    index_of = {id(w.eeg): i for i, w in enumerate(train_windows)}

    history, best, best_state, best_epoch = [], -1.0, None, 0
    for epoch in range(1, cfg.epochs + 1):
        triples = make_triples(train_windows, rng)
        order = rng.permutation(len(triples))
        model.train()
        losses = []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = [triples[i] for i in order[start : start + cfg.batch_size]]
            eeg, a, b, y = _stack_triples(chunk)
            if cached is not None:
                f = cached[[index_of[id(t.eeg)] for t in chunk]]
            else:
                f = features(extractor, channel_mix_augment(eeg, rng, cfg.alpha_range))
            loss = bce_loss(model(f, a, b), y)
            _check_finite(loss.item(), epoch, step, "BCE")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        acc, _ = evaluate_mm(model, extractor, dev_triples)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "dev_accuracy": acc}
        history.append(row)
        log.info("epoch %d loss %.4f dev acc %.4f", epoch, row["train_loss"], acc)
        if on_epoch:
            on_epoch(row)
        if acc > best:
            best, best_epoch = acc, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    ckpt = ModelCheckpoint.from_module(
        "match_mismatch",
        {"downstream": cfg.to_dict(), "eeg_dim": extractor.out_dim},
        model,
        best_epoch=best_epoch,
        best_dev_accuracy=best,
    )
    return TrainResult(model, ckpt, history, best_epoch)


def train_reg(
    train_windows: Sequence[Window],
    dev_windows: Sequence[Window],
    extractor,
    cfg: DownstreamConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Negative-PCC training with AdamW; keeps the epoch with the best dev PCC."""
    if not train_windows or not dev_windows:
        raise ValueError("train and dev windows must be non-empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = RegressionModel(cfg, extractor.out_dim)
    opt = _optimizer(model, cfg)
    eeg_all = np.stack([w.eeg for w in train_windows]).astype(np.float32)
    env_all = torch.from_numpy(np.stack([w.envelope for w in train_windows]).astype(np.float32))
    cached = None if cfg.augment else _batched_features(extractor, eeg_all)

    history, best, best_state, best_epoch = [], -math.inf, None, 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_windows))
        model.train()
        losses = []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = np.sort(order[start : start + cfg.batch_size])
            if cached is not None:
                f = cached[idx]
            else:
                f = features(extractor, channel_mix_augment(eeg_all[idx], rng, cfg.alpha_range))
            loss = neg_pcc_loss(env_all[idx], model(f))
            _check_finite(loss.item(), epoch, step, "negative-PCC")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        dev_pcc, _, _ = evaluate_reg(model, extractor, dev_windows)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "dev_pcc": dev_pcc}
        history.append(row)
        log.info("epoch %d loss %.4f dev pcc %.4f", epoch, row["train_loss"], dev_pcc)
        if on_epoch:
            on_epoch(row)
        if dev_pcc > best:
            best, best_epoch = dev_pcc, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    ckpt = ModelCheckpoint.from_module(
        "regression",
        {"downstream": cfg.to_dict(), "eeg_dim": extractor.out_dim},
        model,
        best_epoch=best_epoch,
        best_dev_pcc=best,
    )
    return TrainResult(model, ckpt, history, best_epoch)


def load_task_model(ckpt: ModelCheckpoint) -> nn.Module:
    cfg = DownstreamConfig.from_dict(ckpt.config["downstream"])
    cls = {"match_mismatch": MatchMismatchModel, "regression": RegressionModel}.get(ckpt.kind)
    if cls is None:
        raise ValueError(f"checkpoint kind {ckpt.kind!r} is not a downstream model")
    return ckpt.load_into(cls(cfg, ckpt.config["eeg_dim"]))
