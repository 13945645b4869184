"""Finite-difference verification of every differentiable building block.

Each check draws small random instances in double precision, compares the
autograd gradient of a scalar readout against central finite differences
(step 1e-5) entry by entry, and reports the worst relative error. The two
losses with data-dependent hard-category sets are checked with the set
selection frozen at the base point, since the selection itself is a
non-differentiable ranking.
"""

from __future__ import annotations

from typing import Callable

import torch

from . import losses
from .attention import RegionalChannelAttention
from .model import cosine_logits

STEP = 1e-5
TOLERANCE = 1e-4
INSTANCES = 20

Builder = Callable[[torch.Generator], tuple[list[torch.Tensor], Callable[[], torch.Tensor]]]


def _randn(shape, gen, scale=1.0):
    return (torch.randn(shape, generator=gen, dtype=torch.float64) * scale).requires_grad_(True)


def _counts(num_classes, gen):
    return torch.randint(1, 200, (num_classes,), generator=gen)


def _build_arb(gen):
    z = _randn((4, 5), gen, 2.0)
    y = torch.randint(0, 5, (4,), generator=gen)
    counts = _counts(5, gen)
    return [z], lambda: losses.arb_loss(z, y, counts)


def _build_hcm(gen):
    z = _randn((4, 5), gen, 2.0)
    y = torch.randint(0, 5, (4,), generator=gen)
    counts = _counts(5, gen)
    top_n = int(torch.randint(1, 6, (), generator=gen))
    masks = losses._hard_masks(z.detach(), y, top_n)
    return [z], lambda: losses.hcm_loss(z, y, counts, top_n, hard_masks=masks)


def _build_contrastive(gen):
    e = _randn((5, 4), gen)
    y = torch.randint(0, 3, (5,), generator=gen)
    return [e], lambda: losses.contrastive_loss(e, y, margin=1.0)


def _build_center(gen):
    e = _randn((5, 4), gen)
    y = torch.randint(0, 2, (5,), generator=gen)
    return [e], lambda: losses.center_loss(e, y)


def _build_kd_all(gen):
    za = _randn((3, 4), gen, 2.0)
    zb = _randn((3, 4), gen, 2.0)
    counts = _counts(4, gen)
    return [za, zb], lambda: losses.kd_all_loss([za, zb], counts)


def _build_kd_hard(gen):
    za = _randn((3, 4), gen, 2.0)
    zb = _randn((3, 4), gen, 2.0)
    y = torch.randint(0, 4, (3,), generator=gen)
    counts = _counts(4, gen)
    top_n = int(torch.randint(1, 5, (), generator=gen))
    consensus = torch.stack([torch.softmax(z.detach(), dim=1) for z in (za, zb)]).mean(dim=0)
    masks = losses._hard_masks(consensus, y, top_n)
    return [za, zb], lambda: losses.kd_hard_loss([za, zb], y, counts, top_n, hard_masks=masks)


def _build_rc_attn(gen):
    module = RegionalChannelAttention(channels=6, reduction=2).double()
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.5)
    x = _randn((1, 6, 4, 4), gen)
    readout = torch.randn((1, 6, 4, 4), generator=gen, dtype=torch.float64)
    params = [x] + list(module.parameters())
    return params, lambda: (module(x) * readout).sum()


def _build_cosine_head(gen):
    e = _randn((3, 5), gen)
    w = _randn((4, 5), gen)
    readout = torch.randn((3, 4), generator=gen, dtype=torch.float64)
    return [e, w], lambda: (cosine_logits(e, w, scale=7.0) * readout).sum()


BUILDERS: dict[str, Builder] = {
    "arb": _build_arb,
    "hcm": _build_hcm,
    "contrastive": _build_contrastive,
    "center": _build_center,
    "kd_all": _build_kd_all,
    "kd_hard": _build_kd_hard,
    "rc_attn": _build_rc_attn,
    "cosine_head": _build_cosine_head,
}


def _max_relative_error(tensors, fn) -> float:
    value = fn()
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    value.backward()
    worst = 0.0
    with torch.no_grad():
        for t in tensors:
            analytic = t.grad if t.grad is not None else torch.zeros_like(t)
            flat = t.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + STEP
                f_plus = float(fn())
                flat[i] = orig - STEP
                f_minus = float(fn())
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * STEP)
                ga = float(analytic.view(-1)[i])
                denom = max(abs(ga), abs(fd), 1e-6)
                worst = max(worst, abs(ga - fd) / denom)
    return worst


def gradcheck(loss_name: str, seed: int = 0, instances: int = INSTANCES) -> dict:
    """Finite-difference report for one named check.

    Returns {"loss", "instances", "max_rel_err", "tolerance", "passed"}.
    """
    if loss_name not in BUILDERS:
        raise ValueError(f"unknown loss {loss_name!r}; available: {sorted(BUILDERS)}")
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(instances):
        tensors, fn = BUILDERS[loss_name](gen)
        worst = max(worst, _max_relative_error(tensors, fn))
    return {
        "loss": loss_name,
        "instances": instances,
        "max_rel_err": worst,
        "tolerance": TOLERANCE,
        "passed": worst < TOLERANCE,
    }


def run_all(seed: int = 0, instances: int = INSTANCES) -> dict[str, dict]:
    """Run every registered check; keyed by loss name."""
    return {name: gradcheck(name, seed, instances) for name in BUILDERS}
