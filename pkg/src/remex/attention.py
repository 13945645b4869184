"""Channel attention applied per spatial quadrant.

Splitting a feature map into four regions before the squeeze step keeps the
pooled channel statistics local, so a small foreground structure confined to
one corner is not washed out by pooling over the whole map. Tensors follow
the torch layout (batch, channels, height, width); the quadrant helpers also
accept unbatched (channels, height, width) maps.
"""

from __future__ import annotations

import torch
import torch.nn as nn

Tensor = torch.Tensor


def split_quadrants(x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Split the last two (spatial) dims into four quadrants.

    Odd heights or widths split floor/ceil: top-left gets floor(H/2) rows and
    floor(W/2) columns, bottom-right the ceilings. Returns (top-left,
    top-right, bottom-left, bottom-right); ``merge_quadrants`` inverts this
    exactly.
    """
    h, w = x.shape[-2], x.shape[-1]
    if h < 2 or w < 2:
        raise ValueError(f"need at least 2x2 spatial size to form quadrants, got {h}x{w}")
    h0, w0 = h // 2, w // 2
    return (
        x[..., :h0, :w0],
        x[..., :h0, w0:],
        x[..., h0:, :w0],
        x[..., h0:, w0:],
    )


def merge_quadrants(tl: Tensor, tr: Tensor, bl: Tensor, br: Tensor) -> Tensor:
    """Reassemble four quadrants produced by :func:`split_quadrants`."""
    top = torch.cat([tl, tr], dim=-1)
    bottom = torch.cat([bl, br], dim=-1)
    return torch.cat([top, bottom], dim=-2)


class ChannelAttention(nn.Module):
    """Channel gate: sigmoid(MLP(avgpool) + MLP(maxpool)), scaling each channel.

    One two-layer perceptron (channels -> channels/reduction -> channels) is
    shared between the average- and max-pooled descriptors. The hidden width
    is clamped to at least 1.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels < 1 or reduction < 1:
            raise ValueError("channels and reduction must be positive")
        self.channels = channels
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def _mlp(self, pooled: Tensor) -> Tensor:
        return self.fc2(torch.relu(self.fc1(pooled)))

    def gate(self, x: Tensor) -> Tensor:
        """Per-channel gate in (0, 1), shape (B, C)."""
        if x.dim() != 4:
            raise ValueError(f"expected (batch, channels, h, w), got shape {tuple(x.shape)}")
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        return torch.sigmoid(self._mlp(avg) + self._mlp(mx))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x).unsqueeze(-1).unsqueeze(-1)


class RegionalChannelAttention(nn.Module):
    """Channel attention run independently on each spatial quadrant.

    By default the four quadrants share one set of gate parameters;
    ``shared=False`` gives each quadrant its own.
    """

    def __init__(self, channels: int, reduction: int = 16, shared: bool = True):
        super().__init__()
        self.shared = shared
        if shared:
            self.gates = nn.ModuleList([ChannelAttention(channels, reduction)])
        else:
            self.gates = nn.ModuleList(ChannelAttention(channels, reduction) for _ in range(4))

    def forward(self, x: Tensor) -> Tensor:
        quads = split_quadrants(x)
        if self.shared:
            gated = [self.gates[0](q) for q in quads]
        else:
            gated = [gate(q) for gate, q in zip(self.gates, quads)]
        return merge_quadrants(*gated)


class SpatialAttention(nn.Module):
    """Spatial gate from channel-pooled maps; ablation baseline, untuned."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x: Tensor) -> Tensor:
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return x * torch.sigmoid(self.conv(pooled))


class ConvBlockAttention(nn.Module):
    """Channel gate followed by spatial gate; ablation baseline, untuned."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention()

    def forward(self, x: Tensor) -> Tensor:
        return self.spatial(self.channel(x))


def make_attention(kind: str, channels: int, reduction: int = 16,
                   per_quadrant_params: bool = False) -> nn.Module | None:
    """Attention module factory; ``kind`` one of rc|channel|spatial|cbam|none."""
    if kind == "rc":
        return RegionalChannelAttention(channels, reduction, shared=not per_quadrant_params)
    if kind == "channel":
        return ChannelAttention(channels, reduction)
    if kind == "spatial":
        return SpatialAttention()
    if kind == "cbam":
        return ConvBlockAttention(channels, reduction)
    if kind == "none":
        return None
    raise ValueError(f"unknown attention kind {kind!r}")
