"""Sequence layers shared by the pretraining and downstream models.

All modules take batch-first ``[B, T, D]`` tensors; 2-D ``[T, D]`` inputs are
accepted and returned unbatched. ``gelu`` is the exact (erf) form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ConvConfig:
    in_dim: int
    out_dim: int
    kernel: int = 3
    stride: int = 1
    padding: str | int = "same"

    def __post_init__(self):
        if min(self.in_dim, self.out_dim, self.kernel, self.stride) < 1:
            raise ValueError(f"conv dims must be positive: {self}")
        if self.padding == "same" and (self.kernel % 2 == 0 or self.stride != 1):
            raise ValueError("'same' padding needs an odd kernel and stride 1")


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    n_heads: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim < 1 or self.n_heads < 1:
            raise ValueError("attention dims must be positive")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")


@dataclass(frozen=True)
class ConformerConfig:
    model_dim: int = 128
    ffn_dim: int = 512
    n_heads: int = 4
    conv_kernel: int = 31
    conv_dim: int = 128
    conv_norm: str = "batch"
    dropout: float = 0.0

    def __post_init__(self):
        AttentionConfig(self.model_dim, self.n_heads)
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if self.conv_norm not in ("batch", "layer"):
            raise ValueError("conv_norm must be 'batch' or 'layer'")
        if min(self.ffn_dim, self.conv_dim) < 1:
            raise ValueError("dims must be positive")


def _batched(fn):
    def wrapper(self, x, *args, **kwargs):
        if x.dim() == 2:
            out = fn(self, x.unsqueeze(0), *args, **kwargs)
            if isinstance(out, tuple):
                return tuple(o.squeeze(0) for o in out)
            return out.squeeze(0)
        return fn(self, x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


class Conv1d(nn.Module):
    """Cross-correlation over time for ``[B, T, D_in]`` sequences."""

    def __init__(self, cfg: ConvConfig, groups: int = 1):
        super().__init__()
        self.cfg = cfg
        self.conv = nn.Conv1d(
            cfg.in_dim, cfg.out_dim, cfg.kernel, stride=cfg.stride, padding=cfg.padding, groups=groups
        )

    @property
    def weight(self):
        return self.conv.weight

    @property
    def bias(self):
        return self.conv.bias

    @_batched
    def forward(self, x):
        if x.shape[-1] != self.cfg.in_dim:
            raise ValueError(f"expected {self.cfg.in_dim} input features, got {x.shape[-1]}")
        if x.shape[1] < self.cfg.kernel and self.cfg.padding != "same":
            raise ValueError("sequence shorter than kernel")
        return self.conv(x.transpose(1, 2)).transpose(1, 2)


class LayerNorm(nn.LayerNorm):
    """Per-frame normalisation over the feature axis."""

    def forward(self, x):
        if x.shape[-1] != self.normalized_shape[0]:
            raise ValueError(f"expected {self.normalized_shape[0]} features, got {x.shape[-1]}")
        return super().forward(x)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.dropout = nn.Dropout(cfg.dropout)

    @_batched
    def forward(self, x, mask: torch.Tensor | None = None, return_weights: bool = False):
        """``mask`` is ``[B, T]`` with True marking padded keys to ignore."""
        b, t, d = x.shape
        if d != self.cfg.model_dim:
            raise ValueError(f"expected model_dim {self.cfg.model_dim}, got {d}")
        h = self.cfg.n_heads
        dh = d // h

        def heads(z):
            return z.view(b, t, h, dh).transpose(1, 2)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if mask is not None:
            scores = scores.masked_fill(mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        ctx = (self.dropout(weights) @ v).transpose(1, 2).reshape(b, t, d)
        out = self.out(ctx)
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, model_dim: int, hidden_dim: int, activation=gelu, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(model_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, model_dim)
        self.activation = activation
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(self.activation(self.fc1(x))))


class TransformerLayer(nn.Module):
    """Pre-norm Transformer encoder layer (attention then feed-forward)."""

    def __init__(self, model_dim: int, ffn_dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = LayerNorm(model_dim)
        self.attn = MultiHeadSelfAttention(AttentionConfig(model_dim, n_heads, dropout))
        self.norm2 = LayerNorm(model_dim)
        self.ffn = FeedForward(model_dim, ffn_dim, gelu, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        x = x + self.dropout(self.attn(self.norm1(x), mask))
        return x + self.dropout(self.ffn(self.norm2(x)))


class ConformerConvModule(nn.Module):
    """pointwise -> GLU -> depthwise -> norm -> swish -> pointwise."""

    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        self.norm = LayerNorm(cfg.model_dim)
        self.pointwise_in = Conv1d(ConvConfig(cfg.model_dim, 2 * cfg.conv_dim, kernel=1))
        self.depthwise = Conv1d(ConvConfig(cfg.conv_dim, cfg.conv_dim, cfg.conv_kernel), groups=cfg.conv_dim)
        if cfg.conv_norm == "batch":
            self.conv_norm = nn.BatchNorm1d(cfg.conv_dim)
        else:
            self.conv_norm = LayerNorm(cfg.conv_dim)
        self.pointwise_out = Conv1d(ConvConfig(cfg.conv_dim, cfg.model_dim, kernel=1))
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x):
        y = F.glu(self.pointwise_in(self.norm(x)), dim=-1)
        y = self.depthwise(y)
        if isinstance(self.conv_norm, nn.BatchNorm1d):
            y = self.conv_norm(y.transpose(1, 2)).transpose(1, 2)
        else:
            y = self.conv_norm(y)
        return self.dropout(self.pointwise_out(F.silu(y)))


class ConformerBlock(nn.Module):
    """Macaron Conformer block: ½FFN, MHSA, conv module, ½FFN, final norm."""

    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.ffn1_norm = LayerNorm(d)
        self.ffn1 = FeedForward(d, cfg.ffn_dim, F.silu, cfg.dropout)
        self.attn_norm = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(AttentionConfig(d, cfg.n_heads, cfg.dropout))
        self.conv = ConformerConvModule(cfg)
        self.ffn2_norm = LayerNorm(d)
        self.ffn2 = FeedForward(d, cfg.ffn_dim, F.silu, cfg.dropout)
        self.final_norm = LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    @_batched
    def forward(self, x, mask=None):
        x = x + 0.5 * self.dropout(self.ffn1(self.ffn1_norm(x)))
        x = x + self.dropout(self.attn(self.attn_norm(x), mask))
        x = x + self.conv(x)
        x = x + 0.5 * self.dropout(self.ffn2(self.ffn2_norm(x)))
        return self.final_norm(x)


class PositionalEmbedding(nn.Module):
    """Learned absolute position vectors added to the input."""

    def __init__(self, max_len: int, dim: int):
        super().__init__()
        self.table = nn.Parameter(torch.randn(max_len, dim) * 0.02)

    def forward(self, x):
        t = x.shape[-2]
        if t > self.table.shape[0]:
            raise ValueError(f"sequence of {t} frames exceeds max_len {self.table.shape[0]}")
        return x + self.table[:t]


def conformer_stack(cfg: ConformerConfig, n_layers: int) -> nn.Sequential:
    return nn.Sequential(*[ConformerBlock(cfg) for _ in range(n_layers)])
