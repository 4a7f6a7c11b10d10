"""Mapping networks translating audio features into decoder prefixes.

Each branch attaches a fixed number of learnable tokens to its feature
sequence, runs a Transformer, and returns only the learnable-token
outputs, so the prefix count never depends on audio duration. The
temporal branch adds sinusoidal positional encoding; the global branch
has none.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import DimensionMismatch, ShapeMismatch


@dataclass(frozen=True)
class MapperConfig:
    n_temporal_prefixes: int = 15
    n_global_prefixes: int = 11
    d_model: int = 768
    n_layers: int = 4
    n_heads: int = 8
    use_positional_encoding: bool = True
    use_temporal: bool = True     # ablation: f_t branch
    use_global: bool = True       # ablation: f_g branch
    use_mapper: bool = True       # ablation: bypass (linear projection only)
    dropout: float = 0.0

    @classmethod
    def toy(cls, d_model: int = 64, n: int = 4, m: int = 2) -> "MapperConfig":
        return cls(n_temporal_prefixes=n, n_global_prefixes=m, d_model=d_model,
                   n_layers=2, n_heads=4)

    @property
    def total_prefixes(self) -> int:
        n = self.n_temporal_prefixes if self.use_temporal else 0
        m = self.n_global_prefixes if self.use_global else 0
        return n + m


def sinusoidal_encoding(length: int, d_model: int, device=None,
                        dtype=torch.float32) -> torch.Tensor:
    position = torch.arange(length, device=device, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, device=device, dtype=torch.float64)
                    * (-math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model, device=device, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: (d_model + 1) // 2])
    return pe.to(dtype)


def _transformer(config: MapperConfig) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d_model=config.d_model, nhead=config.n_heads,
        dim_feedforward=4 * config.d_model, dropout=config.dropout,
        batch_first=True, norm_first=True,
    )
    # nested-tensor fast path never applies with norm_first; opting out
    # up front avoids a spurious warning
    return nn.TransformerEncoder(layer, num_layers=config.n_layers,
                                 enable_nested_tensor=False)


class TemporalMapper(nn.Module):
    """f_t (B, N, 2, C) -> prefixes (B, n, d_model)."""

    def __init__(self, config: MapperConfig, feature_channels: int):
        super().__init__()
        self.config = config
        self.feature_channels = feature_channels
        self.conv = nn.Conv1d(2 * feature_channels, config.d_model,
                              kernel_size=3, padding=1)
        self.tokens = nn.Parameter(
            torch.randn(config.n_temporal_prefixes, config.d_model) * 0.02)
        self.transformer = _transformer(config)

    def forward(self, f_t: torch.Tensor) -> torch.Tensor:
        if f_t.dim() != 4 or f_t.shape[3] != self.feature_channels:
            raise ShapeMismatch(f"expected (B, N, 2, {self.feature_channels}), "
                                f"got {tuple(f_t.shape)}")
        b, n_steps = f_t.shape[0], f_t.shape[1]
        x = f_t.reshape(b, n_steps, -1)                # flatten frequency
        x = self.conv(x.transpose(1, 2)).transpose(1, 2)
        if self.config.use_positional_encoding:
            x = x + sinusoidal_encoding(n_steps, self.config.d_model,
                                        device=x.device, dtype=x.dtype)
        tok = self.tokens.unsqueeze(0).expand(b, -1, -1).to(x.dtype)
        out = self.transformer(torch.cat([x, tok], dim=1))
        return out[:, -self.config.n_temporal_prefixes:, :]


class GlobalMapper(nn.Module):
    """f_g (B, C) -> prefixes (B, m, d_model). No positional encoding."""

    def __init__(self, config: MapperConfig, feature_channels: int):
        super().__init__()
        self.config = config
        self.feature_channels = feature_channels
        self.proj = nn.Linear(feature_channels, config.d_model)
        self.tokens = nn.Parameter(
            torch.randn(config.n_global_prefixes, config.d_model) * 0.02)
        self.transformer = _transformer(config)

    def forward(self, f_g: torch.Tensor) -> torch.Tensor:
        if f_g.dim() != 2 or f_g.shape[1] != self.feature_channels:
            raise ShapeMismatch(f"expected (B, {self.feature_channels}), "
                                f"got {tuple(f_g.shape)}")
        x = self.proj(f_g).unsqueeze(1)                # one feature token
        tok = self.tokens.unsqueeze(0).expand(f_g.shape[0], -1, -1).to(x.dtype)
        out = self.transformer(torch.cat([x, tok], dim=1))
        return out[:, -self.config.n_global_prefixes:, :]


class BypassProjection(nn.Module):
    """Ablation path: project features straight to prefix rows.

    No Transformer and no learnable tokens; the prefix count becomes
    N + 1 and therefore depends on audio duration.
    """

    def __init__(self, d_model: int, feature_channels: int):
        super().__init__()
        self.proj_t = nn.Linear(2 * feature_channels, d_model)
        self.proj_g = nn.Linear(feature_channels, d_model)

    def forward(self, f_t: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
        b, n_steps = f_t.shape[0], f_t.shape[1]
        rows_t = self.proj_t(f_t.reshape(b, n_steps, -1))
        rows_g = self.proj_g(f_g).unsqueeze(1)
        return torch.cat([rows_t, rows_g], dim=1)


def concat_prefixes(p_t: torch.Tensor | None,
                    p_g: torch.Tensor | None) -> torch.Tensor:
    """Row-wise concatenation, temporal block first."""
    if p_t is None and p_g is None:
        raise DimensionMismatch("both prefix branches are disabled")
    if p_t is None:
        return p_g
    if p_g is None:
        return p_t
    if p_t.shape[-1] != p_g.shape[-1]:
        raise DimensionMismatch(
            f"d_model mismatch: {p_t.shape[-1]} vs {p_g.shape[-1]}")
    return torch.cat([p_t, p_g], dim=-2)


class PrefixNetwork(nn.Module):
    """Bundles both mapper branches (or the bypass) behind ablation flags."""

    def __init__(self, config: MapperConfig, feature_channels: int):
        super().__init__()
        self.config = config
        if not config.use_mapper:
            self.bypass = BypassProjection(config.d_model, feature_channels)
            self.mapper_t = None
            self.mapper_g = None
            return
        self.bypass = None
        self.mapper_t = (TemporalMapper(config, feature_channels)
                         if config.use_temporal else None)
        self.mapper_g = (GlobalMapper(config, feature_channels)
                         if config.use_global else None)
        if self.mapper_t is None and self.mapper_g is None:
            raise DimensionMismatch("at least one feature branch must be enabled")

    def forward(self, f_t: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
        if self.bypass is not None:
            return self.bypass(f_t, f_g)
        p_t = self.mapper_t(f_t) if self.mapper_t is not None else None
        p_g = self.mapper_g(f_g) if self.mapper_g is not None else None
        return concat_prefixes(p_t, p_g)
