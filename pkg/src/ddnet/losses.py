"""Loss terms of the composite objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import LossWeights
from .tensor import NumericalError, Tensor

PROB_EPS = 1e-7


def bce(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    probs = tn.as_tensor(probs)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != probs.shape:
        raise ValueError(f"label shape {y.shape} does not match prediction shape {probs.shape}")
    p = tn.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    ll = tn.log(p) * y + tn.log(1.0 - p) * (1.0 - y)
    return -tn.mean(ll)


def frame_loss(probs: Tensor, frame_labels) -> Tensor:
    return bce(probs, frame_labels)


def video_loss(video_prob: Tensor, video_label) -> Tensor:
    return bce(video_prob, video_label)


def adv_loss(O_adv: Tensor, domain_id) -> Tensor:
    """Softmax cross-entropy of (B, K) logits against integer domain labels."""
    O_adv = tn.as_tensor(O_adv)
    if O_adv.ndim == 1:
        O_adv = O_adv.reshape(1, -1)
    target = np.atleast_1d(np.asarray(domain_id, dtype=np.int64))
    K = O_adv.shape[-1]
    if target.shape[0] != O_adv.shape[0]:
        raise ValueError("one domain label per row required")
    if (target < 0).any() or (target >= K).any():
        raise ValueError(f"domain label outside [0, {K})")
    logp = tn.log_softmax(O_adv)
    return -tn.mean(logp[np.arange(target.shape[0]), target])


@dataclass
class LossParts:
    frame: Tensor
    video: Tensor
    adv: Tensor
    orth: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("frame", "video", "adv", "orth")}


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    for name, v in parts.values().items():
        if not np.isfinite(v):
            raise NumericalError(f"loss component L_{name} is not finite ({v})")
    return (parts.frame + weights.vid * parts.video
            + weights.adv * parts.adv + weights.orth * parts.orth)
