"""Visual decomposition: overlap-ratio partitioning of region proposals
and masked-average-pooled prototypes for support, positive, and negative
regions.  Text/audio payloads pass straight through to the fusion stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .adapters import ProposalSet
from .errors import EmptyRegionError, InputError

DEFAULT_OVERLAP_TAU = 0.5


def overlap_ratio(proposal: np.ndarray, support_mask: np.ndarray) -> float:
    """Fraction of the proposal's pixels inside the support mask."""
    if proposal.shape != support_mask.shape:
        raise InputError("proposal and support mask shapes differ")
    p = proposal.astype(bool)
    area = int(p.sum())
    if area == 0:
        raise EmptyRegionError("overlap ratio undefined for an empty proposal")
    inter = int(np.logical_and(p, support_mask.astype(bool)).sum())
    return inter / area


def partition_proposals(
    proposals: ProposalSet,
    support_mask: np.ndarray,
    tau: float = DEFAULT_OVERLAP_TAU,
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Two-color the proposal indices: strictly above tau goes positive."""
    if not 0.0 < tau < 1.0:
        raise InputError(f"tau must lie in (0, 1), got {tau}")
    positive, negative = [], []
    for i, mask in enumerate(proposals.masks):
        if overlap_ratio(mask, support_mask) > tau:
            positive.append(i)
        else:
            negative.append(i)
    return tuple(positive), tuple(negative)


def downsample_mask(mask: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    """Area-average a full-resolution mask onto the feature grid, then
    binarize at 0.5 (ties count as on)."""
    gh, gw = grid_shape
    h, w = mask.shape
    if h % gh or w % gw:
        raise InputError("mask resolution must be a multiple of the feature grid")
    sh, sw = h // gh, w // gw
    frac = mask.astype(np.float64).reshape(gh, sh, gw, sw).mean(axis=(1, 3))
    return frac >= 0.5


def pool_prototype(features: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
    """Masked average pooling: mean feature over grid cells the mask covers.

    The mask is area-averaged down to the feature grid and binarized at
    0.5 first; a mask that vanishes at grid resolution raises, and the
    caller decides the fallback.
    """
    gh, gw, _ = features.shape
    on = downsample_mask(mask, (gh, gw))
    if not on.any():
        raise EmptyRegionError("mask is empty at feature-grid resolution")
    sel = torch.from_numpy(on)
    return features[sel].mean(dim=0)


@dataclass
class VisualDecomposition:
    """Partitioned proposals and the three pooled visual prototypes
    (all in raw visual-feature space)."""

    positive_indices: tuple[int, ...]
    negative_indices: tuple[int, ...]
    support_prototype: torch.Tensor
    positive_prototype: torch.Tensor
    negative_prototype: torch.Tensor


def _union_mask(proposals: ProposalSet, indices: Sequence[int]) -> np.ndarray:
    out = np.zeros(proposals.masks.shape[1:], dtype=bool)
    for i in indices:
        out |= proposals.masks[i]
    return out


def _soft_pool(features: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
    """Coverage-weighted pooling fallback for masks that vanish under
    hard binarization."""
    gh, gw, _ = features.shape
    h, w = mask.shape
    frac = mask.astype(np.float64).reshape(gh, h // gh, gw, w // gw).mean(axis=(1, 3))
    wt = torch.from_numpy(frac).to(features.dtype)
    total = wt.sum()
    if total <= 0:
        raise EmptyRegionError("cannot pool an empty mask")
    return (features * wt.unsqueeze(-1)).sum(dim=(0, 1)) / total


def decompose_visual(
    features: torch.Tensor,
    support_mask: np.ndarray,
    proposals: ProposalSet,
    tau: float = DEFAULT_OVERLAP_TAU,
) -> VisualDecomposition:
    """Partition proposals against the support mask and pool the three
    prototypes.

    Fallbacks keep the token bundle complete: an empty positive set
    reuses the support prototype; an empty negative set pools the region
    outside the support mask (or, failing that, the whole frame).
    """
    pos_idx, neg_idx = partition_proposals(proposals, support_mask, tau)

    try:
        support_proto = pool_prototype(features, support_mask)
    except EmptyRegionError:
        support_proto = _soft_pool(features, support_mask)

    if pos_idx:
        try:
            positive_proto = pool_prototype(features, _union_mask(proposals, pos_idx))
        except EmptyRegionError:
            positive_proto = support_proto
    else:
        positive_proto = support_proto

    def outside_mean() -> torch.Tensor:
        outside = ~support_mask.astype(bool)
        if outside.any():
            try:
                return pool_prototype(features, outside)
            except EmptyRegionError:
                pass
        return features.reshape(-1, features.shape[-1]).mean(dim=0)

    if neg_idx:
        try:
            negative_proto = pool_prototype(features, _union_mask(proposals, neg_idx))
        except EmptyRegionError:
            negative_proto = outside_mean()
    else:
        negative_proto = outside_mean()

    return VisualDecomposition(
        positive_indices=pos_idx,
        negative_indices=neg_idx,
        support_prototype=support_proto,
        positive_prototype=positive_proto,
        negative_prototype=negative_proto,
    )


def average_decompositions(parts: Sequence[VisualDecomposition]) -> VisualDecomposition:
    """K-shot aggregation: prototypes averaged across supports."""
    if not parts:
        raise InputError("need at least one decomposition to average")
    if len(parts) == 1:
        return parts[0]
    return VisualDecomposition(
        positive_indices=parts[0].positive_indices,
        negative_indices=parts[0].negative_indices,
        support_prototype=torch.stack([p.support_prototype for p in parts]).mean(dim=0),
        positive_prototype=torch.stack([p.positive_prototype for p in parts]).mean(dim=0),
        negative_prototype=torch.stack([p.negative_prototype for p in parts]).mean(dim=0),
    )
