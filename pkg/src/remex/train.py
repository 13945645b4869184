"""Training loop: SGD with momentum, cosine learning-rate decay, and the
composite objective over all expert branches.

Class counts are computed once from the manifest's train split and frozen
for the whole run. Three objective variants are supported: "full" (the
complete composite loss), "no_arb" (plain cross-entropy replaces the
count-balanced term, everything else kept), and "ce" (plain cross-entropy
only, the single-model baseline).

Run artifacts: history.csv with header
``epoch,lr,arb,hcm,contrastive,center,kd_all,kd_hard,total`` (one row per
epoch, batch-size-weighted means) and a checkpoint directory per save point.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import losses
from .datagen import Manifest, load_split
from .model import MultiExpertModel, save_checkpoint

HISTORY_COLUMNS = ("epoch", "lr", "arb", "hcm", "contrastive", "center",
                   "kd_all", "kd_hard", "total")

LOSS_VARIANTS = ("full", "no_arb", "ce")


def cosine_lr(t: float, lr_initial: float, lr_min: float) -> float:
    """Cosine-decayed learning rate at completed-epoch fraction t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return lr_min + 0.5 * (lr_initial - lr_min) * (1.0 + math.cos(math.pi * t))


@dataclass
class TrainingConfig:
    epochs: int = 150
    lr_initial: float = 0.1
    lr_min: float = 0.0001
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    w1: float = 0.05
    w2: float = 0.000625
    alpha: float = 0.6
    margin: float = 1.0
    num_branches: int = 2
    topn_fraction: float = 0.3
    backbone: str = "small"
    attention: str = "rc"
    attn_stages: tuple[int, ...] = (2, 3)
    reduction: int = 16
    per_quadrant_params: bool = False
    scale: float = 16.0
    loss_variant: str = "full"
    kd_warmup_epochs: int = 0
    augmentation: bool = False
    save_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_min > self.lr_initial:
            raise ValueError("lr_min must not exceed lr_initial")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if not 0.0 < self.topn_fraction <= 1.0:
            raise ValueError("topn_fraction must lie in (0, 1]")
        self.attn_stages = tuple(self.attn_stages)

    @classmethod
    def from_json(cls, path) -> "TrainingConfig":
        with open(path) as fh:
            data = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["attn_stages"] = list(self.attn_stages)
        return data

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(w1=self.w1, w2=self.w2, alpha=self.alpha, margin=self.margin)


@dataclass
class TrainResult:
    model: MultiExpertModel
    history: list[dict]
    class_counts: np.ndarray
    checkpoint_dir: Optional[Path] = None


def _objective(variant: str, outputs, labels, counts, weights, top_n) -> losses.LossBreakdown:
    """Loss breakdown for one batch under the configured variant.

    For "no_arb" and "ce" the arb slot carries the plain cross-entropy value,
    so the breakdown identity total = arb + hcm + w1*contrastive + w2*center
    + alpha*(kd_all + kd_hard) holds for every variant.
    """
    branch_logits = [logits for _, logits in outputs]
    branch_embeddings = [emb for emb, _ in outputs]
    if variant == "full":
        return losses.total_loss(branch_logits, branch_embeddings, labels, counts,
                                 weights, top_n)
    if variant == "no_arb":
        ce = torch.stack([losses.cross_entropy_loss(z, labels) for z in branch_logits]).mean()
        full = losses.total_loss(branch_logits, branch_embeddings, labels, counts,
                                 weights, top_n)
        total = ce + full.hcm + weights.w1 * full.contrastive + weights.w2 * full.center \
            + weights.alpha * (full.kd_all + full.kd_hard)
        return losses.LossBreakdown(ce, full.hcm, full.contrastive, full.center,
                                    full.kd_all, full.kd_hard, total)
    if variant == "ce":
        ce = torch.stack([losses.cross_entropy_loss(z, labels) for z in branch_logits]).mean()
        zero = ce.new_zeros(())
        return losses.LossBreakdown(ce, zero, zero, zero, zero, zero, ce + zero)
    raise ValueError(f"unknown loss variant {variant!r}")


def _check_finite(breakdown: losses.LossBreakdown, epoch: int) -> None:
    for name, value in breakdown.floats().items():
        if not math.isfinite(value):
            raise RuntimeError(
                f"non-finite loss term {name!r} ({value}) at epoch {epoch}; aborting"
            )


def train(config: TrainingConfig, manifest: Manifest, manifest_dir,
          out_dir=None) -> TrainResult:
    """Train a multi-expert model on the manifest's train split.

    Deterministic given (config, manifest): parameter init, batch order, and
    augmentation all derive from config.seed. When ``out_dir`` is given, the
    run directory receives config.json, history.csv, and checkpoints/.
    """
    images, labels_np, _, _ = load_split(manifest, manifest_dir, "train")
    num_classes = int(manifest.header["num_classes"])
    class_counts = np.bincount(labels_np, minlength=num_classes)
    if class_counts.min() < 1:
        missing = [int(c) for c in np.flatnonzero(class_counts == 0)]
        raise ValueError(f"classes without train samples: {missing}")

    torch.manual_seed(config.seed)
    num_branches = config.num_branches
    model = MultiExpertModel(
        num_classes=num_classes, num_branches=num_branches,
        backbone=config.backbone, in_channels=1, attention=config.attention,
        attn_stages=config.attn_stages, reduction=config.reduction,
        per_quadrant_params=config.per_quadrant_params, scale=config.scale,
    )
    optimizer = torch.optim.SGD(model.parameters(), lr=config.lr_initial,
                                momentum=config.momentum)

    # counts are computed once here and never re-derived during the run
    counts_t = torch.from_numpy(class_counts.copy())
    top_n = losses.topn_from_fraction(num_classes, config.topn_fraction)
    weights = config.weights()
    warmup_weights = dataclasses.replace(weights, alpha=0.0)

    all_images = torch.from_numpy(images).float().div_(255.0).sub_(0.5).div_(0.5).unsqueeze(1)
    all_labels = torch.from_numpy(labels_np)
    n = len(all_labels)
    gen = torch.Generator().manual_seed(config.seed)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        config.save(out_dir / "config.json")

    history: list[dict] = []
    checkpoint_dir: Optional[Path] = None
    for epoch in range(config.epochs):
        t = epoch / (config.epochs - 1) if config.epochs > 1 else 0.0
        lr = cosine_lr(t, config.lr_initial, config.lr_min)
        for group in optimizer.param_groups:
            group["lr"] = lr
        epoch_weights = warmup_weights if epoch < config.kd_warmup_epochs else weights

        model.train()
        perm = torch.randperm(n, generator=gen)
        sums = {name: 0.0 for name in HISTORY_COLUMNS[2:]}
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            x = all_images[idx]
            y = all_labels[idx]
            if config.augmentation:
                flip = torch.rand((), generator=gen) < 0.5
                if bool(flip):
                    x = torch.flip(x, dims=[3])
            outputs = model(x)
            breakdown = _objective(config.loss_variant, outputs, y, counts_t,
                                   epoch_weights, top_n)
            _check_finite(breakdown, epoch)
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()
            for name, value in breakdown.floats().items():
                sums[name] += value * len(idx)

        row = {"epoch": epoch, "lr": lr}
        row.update({name: sums[name] / n for name in HISTORY_COLUMNS[2:]})
        history.append(row)

        if out_dir is not None and config.save_every > 0 and (epoch + 1) % config.save_every == 0:
            save_checkpoint(model, out_dir / "checkpoints" / f"epoch_{epoch + 1:04d}",
                            class_counts, config.config_hash(), epoch + 1)

    if out_dir is not None:
        write_history(history, out_dir / "history.csv")
        checkpoint_dir = save_checkpoint(model, out_dir / "checkpoints" / "final",
                                         class_counts, config.config_hash(), config.epochs)
    model.eval()
    return TrainResult(model=model, history=history, class_counts=class_counts,
                       checkpoint_dir=checkpoint_dir)


def write_history(history: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history:
            cells = [str(row["epoch"])] + [f"{row[c]:.10g}" for c in HISTORY_COLUMNS[1:]]
            fh.write(",".join(cells) + "\n")
    return path


def read_history(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != HISTORY_COLUMNS:
            raise ValueError(f"unexpected history header: {header}")
        for line in fh:
            cells = line.strip().split(",")
            row = {"epoch": int(cells[0])}
            row.update({name: float(v) for name, v in zip(HISTORY_COLUMNS[1:], cells[1:])})
            rows.append(row)
    return rows
