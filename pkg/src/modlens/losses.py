from __future__ import annotations

import torch

PROB_CLAMP = 1e-7


def bce_per_sample(probabilities: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over all but the leading (batch) dimension."""
    if probabilities.shape != mask.shape:
        raise ValueError(f"shape mismatch: probabilities {tuple(probabilities.shape)} vs mask {tuple(mask.shape)}")
    p = probabilities.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = mask.to(p.dtype)
    loss = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))
    return loss.reshape(loss.shape[0], -1).mean(dim=1)


def bce_loss(probabilities: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of ``-[y log p + (1-y) log(1-p)]`` with p clamped to [1e-7, 1-1e-7]."""
    if probabilities.shape != mask.shape:
        raise ValueError(f"shape mismatch: probabilities {tuple(probabilities.shape)} vs mask {tuple(mask.shape)}")
    if probabilities.ndim == 0:
        return bce_per_sample(probabilities.reshape(1), mask.reshape(1))[0]
    return bce_per_sample(probabilities.reshape(1, -1), mask.reshape(1, -1))[0]


def bernoulli_kl_with_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean KL(target || sigmoid(logits)) for soft targets in [0, 1].

    This is the soft-target cross-entropy minus the target entropy, so it is 0 at
    ``sigmoid(logits) == target`` like squared error. Its gradient with respect to the logit is
    ``sigmoid(logit) - target`` and does not vanish when the sigmoid saturates.
    """
    if logits.shape != target.shape:
        raise ValueError(f"logit shape {tuple(logits.shape)} vs target {tuple(target.shape)}")
    t = target.to(logits.dtype)
    cross = torch.nn.functional.binary_cross_entropy_with_logits(logits, t, reduction="none")
    entropy = -(torch.xlogy(t, t) + torch.xlogy(1.0 - t, 1.0 - t))
    return torch.mean(cross - entropy)


def composite_loss(seg_loss, influence_pred, influence_target, weight: float):
    """``seg_loss + weight * mean((pred - target)**2)``."""
    pred = torch.as_tensor(influence_pred)
    target = torch.as_tensor(influence_target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"influence prediction shape {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return seg_loss + weight * torch.mean((pred - target) ** 2)
