"""Late-interaction alignment losses over paired representations.

``Rt[i]`` and ``Rv[i]`` are the text and image representations of the i-th
aligned pair; every other in-batch combination is a negative. All losses are
averaged over anchors and computed in float64.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from . import core_math as cm
from .errors import ContractError


def _check(Rt: torch.Tensor, Rv: torch.Tensor) -> None:
    if Rt.dim() != 2 or Rt.shape != Rv.shape:
        raise ContractError(f"Rt {tuple(Rt.shape)} and Rv {tuple(Rv.shape)} must be matching [N, d]")
    if Rt.shape[0] < 1:
        raise ContractError("empty batch")


def cosine_pairs(Rt: torch.Tensor, Rv: torch.Tensor) -> torch.Tensor:
    """``C[i, j] = cos(Rt[i], Rv[j])`` in float64."""
    return cm.cosine_matrix(Rt, Rv)


def infonce_components(Rt: torch.Tensor, Rv: torch.Tensor, tau: float) -> tuple[torch.Tensor, torch.Tensor]:
    """``(L_t, L_v)``: text-to-image and image-to-text cross-entropy terms."""
    _check(Rt, Rv)
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    logits = cosine_pairs(Rt, Rv) / tau
    diag = torch.diagonal(logits)
    loss_t = (torch.logsumexp(logits, dim=1) - diag).mean()
    loss_v = (torch.logsumexp(logits, dim=0) - diag).mean()
    return loss_t, loss_v


def infonce_loss(Rt: torch.Tensor, Rv: torch.Tensor, tau: float) -> torch.Tensor:
    loss_t, loss_v = infonce_components(Rt, Rv, tau)
    return loss_t + loss_v


def bce_loss(Rt: torch.Tensor, Rv: torch.Tensor, tau: float) -> torch.Tensor:
    """Binary cross-entropy of ``sigmoid(cos / tau)`` against the identity, over all N^2 cells."""
    _check(Rt, Rv)
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    logits = cosine_pairs(Rt, Rv) / tau
    target = torch.eye(logits.shape[0], dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, target, reduction="mean")


def triplet_loss(Rt: torch.Tensor, Rv: torch.Tensor, margin: float = 0.2) -> torch.Tensor:
    """Hinge on the hardest in-batch negative, averaged over both directions."""
    _check(Rt, Rv)
    n = Rt.shape[0]
    if n < 2:
        raise ContractError("triplet loss needs at least 2 pairs")
    sims = cosine_pairs(Rt, Rv)
    pos = torch.diagonal(sims)
    off = sims.masked_fill(torch.eye(n, dtype=torch.bool), float("-inf"))
    hard_t2i = off.max(dim=1).values
    hard_i2t = off.max(dim=0).values
    loss_t = torch.relu(margin - pos + hard_t2i).mean()
    loss_v = torch.relu(margin - pos + hard_i2t).mean()
    return 0.5 * (loss_t + loss_v)


LOSSES = ("INFONCE", "BCE", "TRIPLET")


def decomposition_loss(name: str, Rt: torch.Tensor, Rv: torch.Tensor, tau: float, margin: float) -> torch.Tensor:
    if name == "INFONCE":
        return infonce_loss(Rt, Rv, tau)
    if name == "BCE":
        return bce_loss(Rt, Rv, tau)
    if name == "TRIPLET":
        return triplet_loss(Rt, Rv, margin)
    raise ContractError(f"unknown loss {name!r}; expected one of {LOSSES}")


def multi_positive_nce(logits: torch.Tensor, positive: torch.Tensor) -> torch.Tensor:
    """Symmetric in-batch contrastive loss where a cell may have several positives.

    Used for joint pre-training, where two pairs of the same latent class are
    equally valid matches.
    """
    z = logits.to(torch.float64)
    neg_inf = torch.full_like(z, float("-inf"))
    pos_z = torch.where(positive, z, neg_inf)
    rows = torch.logsumexp(z, 1) - torch.logsumexp(pos_z, 1)
    cols = torch.logsumexp(z, 0) - torch.logsumexp(pos_z, 0)
    return rows.mean() + cols.mean()
