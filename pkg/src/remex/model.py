"""Multi-expert classifier: independent branches, each a small conv backbone
with optional regional channel attention and a cosine classification head.

Checkpoint layout (one directory):
    branch_<k>.pt   flat {parameter name -> tensor} state dict for branch k
    meta.json       {"K", "C", "D", "class_counts", "config_hash", "epoch",
                     "created_at", "arch"}  (arch holds the constructor kwargs)
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn

from .attention import make_attention

Tensor = torch.Tensor

NORM_EPS = 1e-12


def cosine_logits(embeddings: Tensor, weight: Tensor, scale: float = 16.0) -> Tensor:
    """Scaled cosine similarity between embeddings and class weight rows.

    z_j = scale * <w_j / ||w_j||, e / ||e||>, with both norms floored at
    1e-12, so every logit is bounded by +-scale and positive rescaling of an
    embedding never changes the ranking.
    """
    if embeddings.shape[-1] != weight.shape[-1]:
        raise ValueError(
            f"embedding dim {embeddings.shape[-1]} does not match weight dim {weight.shape[-1]}"
        )
    e = embeddings / embeddings.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)
    w = weight / weight.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)
    return scale * (e @ w.T)


class CosineHead(nn.Module):
    """Classification head producing scaled cosine-similarity logits."""

    def __init__(self, embed_dim: int, num_classes: int, scale: float = 16.0):
        super().__init__()
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = float(scale)
        self.weight = nn.Parameter(torch.empty(num_classes, embed_dim))
        nn.init.normal_(self.weight, std=0.01)

    def forward(self, embeddings: Tensor) -> Tensor:
        return cosine_logits(embeddings, self.weight, self.scale)


class SmallBackbone(nn.Module):
    """Four stride-2 conv stages (32/64/128/256 channels) with global average
    pooling; small enough to train a full pipeline on a desktop CPU in
    minutes. ``attn_stages`` lists the stage indices (0-based) whose outputs
    pass through the configured attention module; the default covers the last
    two stages.
    """

    STAGE_CHANNELS = (32, 64, 128, 256)

    def __init__(self, in_channels: int = 1, attention: str = "rc",
                 attn_stages: Sequence[int] = (2, 3), reduction: int = 16,
                 per_quadrant_params: bool = False):
        super().__init__()
        bad = [s for s in attn_stages if not 0 <= s < len(self.STAGE_CHANNELS)]
        if bad:
            raise ValueError(f"attention stage indices out of range: {bad}")
        self.out_dim = self.STAGE_CHANNELS[-1]
        self.attn_stages = tuple(sorted(set(attn_stages)))
        stages = []
        attns = {}
        prev = in_channels
        for i, ch in enumerate(self.STAGE_CHANNELS):
            stages.append(nn.Sequential(
                nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1),
                nn.BatchNorm2d(ch),
                nn.ReLU(inplace=True),
            ))
            if i in self.attn_stages:
                mod = make_attention(attention, ch, reduction, per_quadrant_params)
                if mod is not None:
                    attns[str(i)] = mod
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.attns = nn.ModuleDict(attns)

    def forward(self, x: Tensor) -> Tensor:
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if str(i) in self.attns:
                x = self.attns[str(i)](x)
        return x.mean(dim=(2, 3))


BACKBONES: dict[str, Callable[..., nn.Module]] = {"small": SmallBackbone}


def register_backbone(name: str, factory: Callable[..., nn.Module]) -> None:
    """Register a feature-extractor factory; it must accept the SmallBackbone
    keyword arguments and expose an ``out_dim`` attribute."""
    BACKBONES[name] = factory


class ExpertBranch(nn.Module):
    """One independent classifier path: backbone then cosine head."""

    def __init__(self, num_classes: int, backbone: str = "small", in_channels: int = 1,
                 attention: str = "rc", attn_stages: Sequence[int] = (2, 3),
                 reduction: int = 16, per_quadrant_params: bool = False,
                 scale: float = 16.0):
        super().__init__()
        if backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone!r}; registered: {sorted(BACKBONES)}")
        self.backbone = BACKBONES[backbone](
            in_channels=in_channels, attention=attention, attn_stages=attn_stages,
            reduction=reduction, per_quadrant_params=per_quadrant_params,
        )
        self.head = CosineHead(self.backbone.out_dim, num_classes, scale)

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        embeddings = self.backbone(images)
        return embeddings, self.head(embeddings)


class MultiExpertModel(nn.Module):
    """K independently parameterized expert branches over one class space.

    ``forward`` returns the per-branch (embedding, logits) pairs; ``predict``
    fuses the branches by averaging their standard softmax outputs.
    """

    def __init__(self, num_classes: int, num_branches: int = 2, backbone: str = "small",
                 in_channels: int = 1, attention: str = "rc",
                 attn_stages: Sequence[int] = (2, 3), reduction: int = 16,
                 per_quadrant_params: bool = False, scale: float = 16.0):
        super().__init__()
        if num_branches < 1:
            raise ValueError("need at least one branch")
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.arch = {
            "num_classes": num_classes,
            "num_branches": num_branches,
            "backbone": backbone,
            "in_channels": in_channels,
            "attention": attention,
            "attn_stages": list(attn_stages),
            "reduction": reduction,
            "per_quadrant_params": per_quadrant_params,
            "scale": scale,
        }
        self.num_classes = num_classes
        self.branches = nn.ModuleList(
            ExpertBranch(num_classes, backbone, in_channels, attention, attn_stages,
                         reduction, per_quadrant_params, scale)
            for _ in range(num_branches)
        )
        self.embed_dim = self.branches[0].backbone.out_dim

    @property
    def num_branches(self) -> int:
        return len(self.branches)

    def forward(self, images: Tensor) -> list[tuple[Tensor, Tensor]]:
        expected = self.arch["in_channels"]
        if images.dim() != 4 or images.shape[1] != expected:
            raise ValueError(
                f"expected image batch (B, {expected}, H, W), got {tuple(images.shape)}"
            )
        return [branch(images) for branch in self.branches]

    @torch.no_grad()
    def predict(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """Consensus prediction: mean of the branches' standard softmaxes.

        Returns (class ids, consensus probability matrix). Argmax ties go to
        the lower class id.
        """
        outputs = self.forward(images)
        probs = torch.stack([torch.softmax(logits, dim=1) for _, logits in outputs])
        consensus = probs.mean(dim=0)
        # torch.argmax returns the first maximal index, i.e. the lowest class id
        return consensus.argmax(dim=1), consensus


def save_checkpoint(model: MultiExpertModel, ckpt_dir, class_counts: Sequence[int],
                    config_hash: str = "", epoch: int = 0) -> Path:
    """Write one flat state-dict blob per branch plus meta.json.

    ``created_at`` in meta.json is the only non-deterministic byte in the
    directory; idempotence comparisons exclude it.
    """
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for k, branch in enumerate(model.branches):
        torch.save(branch.state_dict(), ckpt_dir / f"branch_{k}.pt")
    meta = {
        "K": model.num_branches,
        "C": model.num_classes,
        "D": model.embed_dim,
        "class_counts": [int(c) for c in class_counts],
        "config_hash": config_hash,
        "epoch": int(epoch),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "arch": model.arch,
    }
    with open(ckpt_dir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ckpt_dir


def load_checkpoint(ckpt_dir) -> tuple[MultiExpertModel, dict]:
    """Rebuild a model from :func:`save_checkpoint` output."""
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "meta.json") as fh:
        meta = json.load(fh)
    model = MultiExpertModel(**meta["arch"])
    for k, branch in enumerate(model.branches):
        state = torch.load(ckpt_dir / f"branch_{k}.pt", map_location="cpu", weights_only=True)
        branch.load_state_dict(state)
    model.eval()
    return model, meta
