"""Pairwise posterior, cross-entropy ranking loss and the squared-loss contrast."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .nn import RankModel, rank_score

__all__ = [
    "TARGETS",
    "PosteriorConfig",
    "validate_target",
    "posterior",
    "ranking_loss",
    "score_pair_loss",
    "regression_loss",
    "pair_loss",
    "batch_pair_loss",
]

TARGETS = (0.0, 0.5, 1.0)


def validate_target(t) -> float:
    """Return ``t`` as a float, rejecting anything outside {0, 0.5, 1}."""
    try:
        value = float(t)
    except (TypeError, ValueError):
        raise ContractError(f"target must be one of {TARGETS}, got {t!r}") from None
    if value not in TARGETS:
        raise ContractError(f"target must be one of {TARGETS}, got {t!r}")
    return value


@dataclass(frozen=True)
class PosteriorConfig:
    clip_lo: float = 1e-7
    clip_hi: float = 1.0 - 1e-7

    def __post_init__(self):
        if not 0.0 < self.clip_lo < 0.5 < self.clip_hi < 1.0:
            raise ContractError(f"need 0 < clip_lo < 0.5 < clip_hi < 1, got {self.clip_lo}, {self.clip_hi}")

    @property
    def complement_bounds(self) -> tuple[float, float]:
        """Clip range for 1 - p.

        When clip_hi was written as 1 - clip_lo, the lower bound is clip_lo
        itself rather than the rounded 1 - clip_hi, so the two tails match.
        """
        lo = self.clip_lo if self.clip_hi == 1.0 - self.clip_lo else 1.0 - self.clip_hi
        return lo, 1.0 - self.clip_lo


def posterior(r_i, r_j) -> Tensor:
    """p_ij = 1 / (1 + exp(-(r_i - r_j)))."""
    return ad.sigmoid(ad.sub(r_i, r_j))


def _targets(t_ij, shape) -> np.ndarray:
    try:
        t = np.asarray(t_ij, dtype=np.float64)
    except (TypeError, ValueError):
        raise ContractError(f"targets must be drawn from {TARGETS}, got {t_ij!r}") from None
    if t.ndim == 0:
        validate_target(t)
    elif not np.isin(t, TARGETS).all():
        raise ContractError(f"targets must be drawn from {TARGETS}")
    if t.ndim and t.shape != shape:
        raise ContractError(f"target shape {t.shape} does not match posterior shape {shape}")
    return t


def _bce(p: Tensor, q: Tensor, t: np.ndarray, cfg: PosteriorConfig) -> Tensor:
    # q stands for 1 - p; clipping p to [lo, hi] clips q to [1 - hi, 1 - lo]
    p = ad.clip(p, cfg.clip_lo, cfg.clip_hi)
    q = ad.clip(q, *cfg.complement_bounds)
    pos = ad.mul(Tensor(t), ad.log(p))
    neg = ad.mul(Tensor(1.0 - t), ad.log(q))
    return ad.scale(ad.add(pos, neg), -1.0)


def ranking_loss(p_ij, t_ij, cfg: PosteriorConfig | None = None) -> Tensor:
    """Binary cross-entropy between target and clipped posterior.

    ``t_ij`` may be a scalar or an array matching ``p_ij``; every entry must
    be 0, 0.5 or 1. The general-t formula is used, so the restriction is a
    validation choice only.
    """
    cfg = cfg or PosteriorConfig()
    p = p_ij if isinstance(p_ij, Tensor) else Tensor(p_ij)
    return _bce(p, ad.sub(1.0, p), _targets(t_ij, p.shape), cfg)


def score_pair_loss(r_i, r_j, t_ij, cfg: PosteriorConfig | None = None) -> Tensor:
    """Ranking loss straight from two rank estimates.

    Same value as ``ranking_loss(posterior(r_i, r_j), t)``, but 1 - p is
    evaluated as sigmoid(r_j - r_i) instead of by subtraction, which keeps
    full precision when p is close to 1 and makes swapping the pair exact.
    """
    cfg = cfg or PosteriorConfig()
    d = ad.sub(r_i, r_j)
    return _bce(ad.sigmoid(d), ad.sigmoid(ad.scale(d, -1.0)), _targets(t_ij, d.shape), cfg)


def regression_loss(r_i, r_j, t_ij) -> Tensor:
    """Squared loss ((r_i - r_j) - t)^2 on the score difference."""
    t = validate_target(t_ij)
    d = ad.sub(ad.sub(r_i, r_j), t)
    return ad.mul(d, d)


def pair_loss(model: RankModel, image_i, image_j, t_ij, cfg: PosteriorConfig | None = None) -> Tensor:
    """Ranking loss for one image pair; both branches read the same parameters."""
    return score_pair_loss(rank_score(model, image_i), rank_score(model, image_j), t_ij, cfg)


def batch_pair_loss(model: RankModel, images_i: np.ndarray, images_j: np.ndarray, targets,
                    cfg: PosteriorConfig | None = None) -> Tensor:
    """Mean pair loss over a minibatch.

    The two sides are stacked into one ``(2B, C, H, W)`` forward pass through
    the shared extractor and split afterwards.
    """
    b = len(images_i)
    if b == 0 or len(images_j) != b or len(targets) != b:
        raise ContractError(f"minibatch sides disagree: {len(images_i)}, {len(images_j)}, {len(targets)}")
    r = rank_score(model, np.concatenate([images_i, images_j]))
    t = np.asarray(targets, dtype=np.float64)
    return ad.mean(score_pair_loss(ad.take(r, slice(0, b)), ad.take(r, slice(b, 2 * b)), t, cfg))


def ranking_loss_value(diff: float, t: float, cfg: PosteriorConfig | None = None) -> float:
    """Scalar convenience: loss as a function of r_i - r_j."""
    return score_pair_loss(diff, 0.0, t, cfg).item()


def regression_loss_value(diff: float, t: float) -> float:
    return regression_loss(diff, 0.0, t).item()


def max_loss(cfg: PosteriorConfig | None = None) -> float:
    """Largest attainable loss."""
    cfg = cfg or PosteriorConfig()
    return -math.log(min(cfg.clip_lo, cfg.complement_bounds[0]))
