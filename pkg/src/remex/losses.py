"""Loss terms for multi-expert training on highly imbalanced data.

Every function here is pure and stateless: tensors in, a scalar tensor out,
autograd graph intact. Class-count rebalancing runs through a single
count-weighted softmax map that all count-aware terms share, so the
classification losses, the hard-category restriction, and the distillation
terms stay mutually consistent.

Conventions:
  - logits are (B, C) float tensors, labels are (B,) integer class ids,
    counts are per-class training-sample counts of length C (every entry >= 1);
  - batch reductions are arithmetic means;
  - pairwise embedding distances use sqrt(d^2 + 1e-12) so gradients stay
    finite at coincident points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

Tensor = torch.Tensor

DIST_EPS = 1e-12


# ---------------------------------------------------------------------------
# input validation helpers
# ---------------------------------------------------------------------------

def _as_counts(counts, num_classes: Optional[int] = None) -> Tensor:
    counts = torch.as_tensor(counts)
    if counts.dim() != 1 or counts.numel() == 0:
        raise ValueError(f"counts must be a nonempty 1-D vector, got shape {tuple(counts.shape)}")
    if not bool((counts >= 1).all()):
        raise ValueError("every class count must be >= 1 (classes without training samples are rejected)")
    if num_classes is not None and counts.numel() != num_classes:
        raise ValueError(f"counts has {counts.numel()} entries but logits have {num_classes} classes")
    return counts


def _check_logit_batch(logits, labels=None) -> tuple[Tensor, Optional[Tensor]]:
    logits = torch.as_tensor(logits)
    if logits.dim() != 2:
        raise ValueError(f"logits must be (batch, classes), got shape {tuple(logits.shape)}")
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    if not bool(torch.isfinite(logits).all()):
        raise ValueError("logits contain NaN or Inf")
    if labels is None:
        return logits, None
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match batch of {logits.shape[0]}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise ValueError(f"label out of range [0, {logits.shape[1]})")
    return logits, labels


def _check_embedding_batch(embeddings, labels) -> tuple[Tensor, Tensor]:
    embeddings = torch.as_tensor(embeddings)
    if embeddings.dim() != 2 or embeddings.shape[0] == 0:
        raise ValueError(f"embeddings must be (batch, dim) with batch >= 1, got {tuple(embeddings.shape)}")
    if not bool(torch.isfinite(embeddings).all()):
        raise ValueError("embeddings contain NaN or Inf")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.dim() != 1 or labels.shape[0] != embeddings.shape[0]:
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match batch of {embeddings.shape[0]}")
    return embeddings, labels


# ---------------------------------------------------------------------------
# count-weighted softmax and classification losses
# ---------------------------------------------------------------------------

def balanced_softmax(logits, counts) -> Tensor:
    """Count-weighted softmax probabilities.

    P(j) = n_j * exp(z_j) / sum_l n_l * exp(z_l), evaluated as
    softmax(z + log n) so arbitrarily large logits cannot overflow.

    Args:
        logits: (C,) or (B, C) raw class scores.
        counts: per-class sample counts, length C, every entry >= 1.

    Returns:
        Probabilities with the same shape as ``logits``; rows sum to 1.
    """
    logits = torch.as_tensor(logits)
    if logits.dim() not in (1, 2):
        raise ValueError(f"logits must be (C,) or (B, C), got shape {tuple(logits.shape)}")
    if not bool(torch.isfinite(logits).all()):
        raise ValueError("logits contain NaN or Inf")
    counts = _as_counts(counts, logits.shape[-1])
    shifted = logits + torch.log(counts.to(dtype=logits.dtype))
    return torch.softmax(shifted, dim=-1)


def arb_loss(logits, labels, counts) -> Tensor:
    """Attraction-repulsion-balanced cross-entropy.

    Per sample: -log( exp(z_y) / sum_k (n_k / n_y) exp(z_k) ), which is the
    negative log of the balanced softmax at the target class. Mean over the
    batch. Equal counts reduce it to plain cross-entropy.
    """
    logits, labels = _check_logit_batch(logits, labels)
    counts = _as_counts(counts, logits.shape[1])
    shifted = logits + torch.log(counts.to(dtype=logits.dtype))
    return torch.nn.functional.cross_entropy(shifted, labels)


def cross_entropy_loss(logits, labels) -> Tensor:
    """Plain softmax cross-entropy, the un-rebalanced baseline hook."""
    logits, labels = _check_logit_batch(logits, labels)
    return torch.nn.functional.cross_entropy(logits, labels)


def topn_from_fraction(num_classes: int, fraction: float) -> int:
    """Hard-set size from a class-count fraction: max(1, floor(C * fraction))."""
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    # nudge guards against 0.29 * 100 = 28.999... style float droop
    return max(1, math.floor(num_classes * fraction + 1e-9))


def _hard_masks(scores: Tensor, labels: Tensor, top_n: int) -> Tensor:
    """Boolean (B, C) masks: top-N ranked classes per row, target always added.

    Ranking follows the row scores descending, ties broken toward the lower
    class id (stable sort), so the selection is deterministic.
    """
    num_classes = scores.shape[1]
    if not 1 <= top_n <= num_classes:
        raise ValueError(f"top_n must be in [1, {num_classes}], got {top_n}")
    order = torch.sort(scores, dim=1, descending=True, stable=True).indices
    masks = torch.zeros_like(scores, dtype=torch.bool)
    masks.scatter_(1, order[:, :top_n], True)
    masks.scatter_(1, labels.unsqueeze(1), True)
    return masks


def hard_category_set(logits, label: int, top_n: int) -> set[int]:
    """Per-sample hard-category set: the target class plus the top-N
    softmax-ranked classes (ties to the lower class id).

    Returns a plain set of class ids; its size is ``top_n`` when the target
    lands inside the top N, else ``top_n + 1``.
    """
    logits = torch.as_tensor(logits)
    if logits.dim() != 1:
        raise ValueError(f"logits must be a 1-D vector, got shape {tuple(logits.shape)}")
    if not 0 <= int(label) < logits.shape[0]:
        raise ValueError(f"label {label} out of range [0, {logits.shape[0]})")
    masks = _hard_masks(logits.unsqueeze(0), torch.tensor([int(label)]), top_n)
    return set(torch.nonzero(masks[0], as_tuple=False).flatten().tolist())


def hcm_loss(logits, labels, counts, top_n: int, hard_masks: Optional[Tensor] = None) -> Tensor:
    """Hard-category-mining loss: the balanced cross-entropy with the
    denominator restricted to each sample's hard set.

    Per sample: -log( exp(z_y) / sum_{l in set} (n_l / n_y) exp(z_l) ),
    mean over the batch. ``hard_masks`` may be supplied to reuse (or freeze)
    a previously computed selection; by default the set is recomputed from
    the logits. Set selection is treated as constant under differentiation.
    """
    logits, labels = _check_logit_batch(logits, labels)
    counts = _as_counts(counts, logits.shape[1])
    if hard_masks is None:
        hard_masks = _hard_masks(logits.detach(), labels, top_n)
    shifted = logits + torch.log(counts.to(dtype=logits.dtype))
    neg_inf = torch.tensor(float("-inf"), dtype=shifted.dtype)
    restricted = torch.where(hard_masks, shifted, neg_inf)
    target_term = shifted.gather(1, labels.unsqueeze(1)).squeeze(1)
    return (torch.logsumexp(restricted, dim=1) - target_term).mean()


# ---------------------------------------------------------------------------
# metric-learning terms
# ---------------------------------------------------------------------------

def _pairwise_distances(embeddings: Tensor) -> Tensor:
    # squared form keeps the graph free of cdist's sqrt, whose gradient
    # blows up at zero distance; the eps makes d=0 a flat (zero-grad) point
    sq_norms = (embeddings * embeddings).sum(dim=1)
    sq = sq_norms.unsqueeze(0) + sq_norms.unsqueeze(1) - 2.0 * embeddings @ embeddings.T
    return torch.sqrt(sq.clamp_min(0.0) + DIST_EPS)


def contrastive_loss(embeddings, labels, margin: float = 1.0) -> Tensor:
    """Pairwise contrastive loss over all unordered batch pairs.

    Same-class pairs contribute their L2 distance, different-class pairs the
    hinge max(0, margin - distance). Mean over pairs; a batch with fewer
    than two samples has no pairs and scores 0.
    """
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    embeddings, labels = _check_embedding_batch(embeddings, labels)
    batch = embeddings.shape[0]
    if batch < 2:
        return embeddings.new_zeros(())
    dist = _pairwise_distances(embeddings)
    rows, cols = torch.triu_indices(batch, batch, offset=1)
    d = dist[rows, cols]
    same = labels[rows] == labels[cols]
    per_pair = torch.where(same, d, torch.relu(margin - d))
    return per_pair.mean()


def center_loss(embeddings, labels) -> Tensor:
    """Mean L2 distance over same-class unordered pairs; 0 when none exist."""
    embeddings, labels = _check_embedding_batch(embeddings, labels)
    batch = embeddings.shape[0]
    if batch < 2:
        return embeddings.new_zeros(())
    rows, cols = torch.triu_indices(batch, batch, offset=1)
    same = labels[rows] == labels[cols]
    if not bool(same.any()):
        return embeddings.new_zeros(())
    dist = _pairwise_distances(embeddings)
    return dist[rows[same], cols[same]].mean()


# ---------------------------------------------------------------------------
# mutual distillation
# ---------------------------------------------------------------------------

def _check_branch_logits(branch_logits) -> list[Tensor]:
    if len(branch_logits) < 2:
        raise ValueError(f"distillation needs at least 2 branches, got {len(branch_logits)}")
    checked = [_check_logit_batch(z)[0] for z in branch_logits]
    shape = checked[0].shape
    for z in checked[1:]:
        if z.shape != shape:
            raise ValueError("all branch logit batches must share one shape")
    return checked


def kd_all_loss(branch_logits: Sequence[Tensor], counts) -> Tensor:
    """Mutual distillation across all classes.

    KL divergence between the balanced-softmax distributions of every ordered
    branch pair (k, l), k != l, averaged over pairs and samples. No side is
    detached: every branch both teaches and learns.
    """
    branches = _check_branch_logits(branch_logits)
    counts = _as_counts(counts, branches[0].shape[1])
    log_n = torch.log(counts.to(dtype=branches[0].dtype))
    log_probs = [torch.log_softmax(z + log_n, dim=1) for z in branches]
    total = branches[0].new_zeros(())
    pairs = 0
    for k, lp_k in enumerate(log_probs):
        p_k = lp_k.exp()
        for l, lp_l in enumerate(log_probs):
            if k == l:
                continue
            total = total + (p_k * (lp_k - lp_l)).sum(dim=1).mean()
            pairs += 1
    return total / pairs


def kd_hard_loss(
    branch_logits: Sequence[Tensor],
    labels,
    counts,
    top_n: int,
    hard_masks: Optional[Tensor] = None,
) -> Tensor:
    """Mutual distillation restricted to per-sample hard-category sets.

    One shared set per sample is selected from the mean of the branches'
    standard softmax outputs (target class always included); each branch's
    balanced-softmax distribution is renormalized over that set before the
    pairwise KL terms are averaged. Selection is constant under
    differentiation; pass ``hard_masks`` to freeze it explicitly.
    """
    branches = _check_branch_logits(branch_logits)
    _, labels = _check_logit_batch(branches[0], labels)
    counts = _as_counts(counts, branches[0].shape[1])
    if hard_masks is None:
        consensus = torch.stack([torch.softmax(z.detach(), dim=1) for z in branches]).mean(dim=0)
        hard_masks = _hard_masks(consensus, labels, top_n)
    log_n = torch.log(counts.to(dtype=branches[0].dtype))
    neg_inf = torch.tensor(float("-inf"), dtype=branches[0].dtype)
    log_probs = [
        torch.log_softmax(torch.where(hard_masks, z + log_n, neg_inf), dim=1)
        for z in branches
    ]
    zero = branches[0].new_zeros(())
    total = zero
    pairs = 0
    for k, lp_k in enumerate(log_probs):
        p_k = torch.where(hard_masks, lp_k.exp(), zero)
        for l, lp_l in enumerate(log_probs):
            if k == l:
                continue
            kl_terms = torch.where(hard_masks, p_k * (lp_k - lp_l), zero)
            total = total + kl_terms.sum(dim=1).mean()
            pairs += 1
    return total / pairs


# ---------------------------------------------------------------------------
# weighted total objective
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objective.

    w1 scales the contrastive term, w2 the centering term, alpha the two
    distillation terms together; margin is the contrastive hinge margin.
    """

    w1: float = 0.05
    w2: float = 0.000625
    alpha: float = 0.6
    margin: float = 1.0

    def __post_init__(self):
        for name in ("w1", "w2", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")


@dataclass
class LossBreakdown:
    """The six component terms plus their weighted total, as 0-dim tensors.

    Invariant: total == arb + hcm + w1*contrastive + w2*center
    + alpha*(kd_all + kd_hard) in the same floating-point arithmetic.
    """

    arb: Tensor
    hcm: Tensor
    contrastive: Tensor
    center: Tensor
    kd_all: Tensor
    kd_hard: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {
            "arb": float(self.arb.detach()),
            "hcm": float(self.hcm.detach()),
            "contrastive": float(self.contrastive.detach()),
            "center": float(self.center.detach()),
            "kd_all": float(self.kd_all.detach()),
            "kd_hard": float(self.kd_hard.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(
    branch_logits: Sequence[Tensor],
    branch_embeddings: Sequence[Tensor],
    labels,
    counts,
    weights: LossWeights = LossWeights(),
    top_n: int = 1,
) -> LossBreakdown:
    """Composite objective over all branches.

    The per-branch terms (arb, hcm, contrastive, center) are averaged over
    the K branches; the two distillation terms couple the branches and are
    computed once (they are 0 when K == 1, where no branch pair exists).
    """
    if len(branch_logits) < 1:
        raise ValueError("need at least one branch")
    if len(branch_logits) != len(branch_embeddings):
        raise ValueError("branch logits and embeddings disagree on branch count")

    arb = torch.stack([arb_loss(z, labels, counts) for z in branch_logits]).mean()
    hcm = torch.stack([hcm_loss(z, labels, counts, top_n) for z in branch_logits]).mean()
    contrastive = torch.stack(
        [contrastive_loss(e, labels, weights.margin) for e in branch_embeddings]
    ).mean()
    center = torch.stack([center_loss(e, labels) for e in branch_embeddings]).mean()

    if len(branch_logits) >= 2:
        kd_all = kd_all_loss(branch_logits, counts)
        kd_hard = kd_hard_loss(branch_logits, labels, counts, top_n)
    else:
        kd_all = arb.new_zeros(())
        kd_hard = arb.new_zeros(())

    total = arb + hcm + weights.w1 * contrastive + weights.w2 * center \
        + weights.alpha * (kd_all + kd_hard)
    return LossBreakdown(arb, hcm, contrastive, center, kd_all, kd_hard, total)
