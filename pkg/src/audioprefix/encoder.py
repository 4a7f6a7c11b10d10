"""Convolutional audio encoder producing temporal and global features.

From a (T, n_mels) spectrogram the encoder emits a time-resolved feature
map of shape (N, 2, C) and a single C-dimensional pooled vector from the
tagging head. At full scale (C=2048, time downsample 64) a 1500x64 input
yields a 23x2x2048 map, matching the CNN14 feature contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_module, load_tensors, module_tensors, save_tensors
from .errors import ShapeMismatch


@dataclass(frozen=True)
class EncoderConfig:
    n_blocks: int = 6
    base_channels: int = 64
    channels: int = 2048          # C, width of f_t / f_g
    time_downsample: int = 64     # D
    n_mels: int = 64
    trainable: bool = True

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        return cls()

    @classmethod
    def toy(cls, channels: int = 32, time_downsample: int = 4,
            n_blocks: int = 2, base_channels: int = 8) -> "EncoderConfig":
        return cls(n_blocks=n_blocks, base_channels=base_channels,
                   channels=channels, time_downsample=time_downsample)


def temporal_out_length(t_frames: int, downsample: int) -> int:
    """Output time length: nearest integer to T/D, at least 1."""
    return max(1, round(t_frames / downsample))


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        x = F.relu(self.bn(self.conv(x)))
        # pool 2x2 where there is room; floor division on both axes
        kt = 2 if x.shape[2] >= 2 else 1
        kf = 2 if x.shape[3] >= 2 else 1
        if kt > 1 or kf > 1:
            x = F.avg_pool2d(x, kernel_size=(kt, kf))
        return x


class AudioEncoder(nn.Module):
    """CNN feature extractor plus a tagging head for the global vector."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        chans = [1]
        for i in range(config.n_blocks):
            chans.append(min(config.base_channels * (2 ** i), config.channels))
        chans[-1] = config.channels
        self.blocks = nn.ModuleList(ConvBlock(chans[i], chans[i + 1])
                                    for i in range(config.n_blocks))
        # tagging head: penultimate embedding layer of the tagging module
        self.tag_fc = nn.Linear(config.channels, config.channels)
        if not config.trainable:
            for p in self.parameters():
                p.requires_grad_(False)

    def forward(self, spec: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """spec: (B, T, n_mels) -> f_t (B, N, 2, C), f_g (B, C)."""
        if spec.dim() != 3 or spec.shape[2] != self.config.n_mels:
            raise ShapeMismatch(
                f"expected (B, T, {self.config.n_mels}) input, got {tuple(spec.shape)}"
            )
        t_frames = spec.shape[1]
        x = spec.unsqueeze(1)  # (B, 1, T, M)
        for block in self.blocks:
            x = block(x)
        n_out = temporal_out_length(t_frames, self.config.time_downsample)
        x = F.adaptive_avg_pool2d(x, (n_out, 2))       # (B, C, N, 2)
        f_t = x.permute(0, 2, 3, 1).contiguous()       # (B, N, 2, C)
        f_g = F.relu(self.tag_fc(f_t.mean(dim=(1, 2))))  # (B, C)
        return f_t, f_g


def encode(encoder: AudioEncoder, spec_values) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-spectrogram convenience wrapper: (T, M) -> ((N,2,C), (C,))."""
    x = torch.as_tensor(spec_values, dtype=torch.float32).unsqueeze(0)
    f_t, f_g = encoder(x)
    return f_t[0], f_g[0]


def save_encoder(encoder: AudioEncoder, path, metadata: dict | None = None) -> None:
    save_tensors(path, module_tensors(encoder, "encoder"), metadata)


def load_pretrained(encoder: AudioEncoder, checkpoint_path, strict: bool = True) -> dict:
    """Load encoder weights from a named-tensor checkpoint; returns the
    loaded/skipped report (skipped must be empty in strict mode)."""
    tensors, _meta = load_tensors(checkpoint_path)
    return load_module(encoder, tensors, "encoder", strict=strict)
