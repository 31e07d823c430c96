"""Dual-path mask reconstruction.

Semantic path: the attended learned tokens are projected into one
high-quality output token; the surviving attended foreground tokens act
as sparse prompt embeddings.  Geometric path: per-modality location
priors (cosine map for visual, thresholded proposal unions for text and
audio) are encoded by the mask prompt encoder and fused by a small conv
block into the dense prompt.  The decoder produces initial logits and a
residual conv refiner polishes them.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .adapters import MaskDecoder, ProposalSet
from .errors import ConfigurationError, PriorError

DEFAULT_SIMILARITY_DELTA = 0.5


def project_semantic_token(
    fg_token: torch.Tensor,
    bg_token: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor,
) -> torch.Tensor:
    """ReLU(Wᵀ[fg; bg] + b) with W of shape (2d, d): the decoder's
    high-quality output token."""
    d = fg_token.shape[0]
    if weight.shape != (2 * d, d) or bias.shape != (d,):
        raise ConfigurationError(
            f"projection expects W (2d, d) and b (d,) for d={d}, "
            f"got {tuple(weight.shape)} and {tuple(bias.shape)}"
        )
    stacked = torch.cat([fg_token, bg_token])
    return torch.relu(weight.T @ stacked + bias)


class SemanticProjector(nn.Module):
    def __init__(self, embed_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(2 * embed_dim, embed_dim))
        self.bias = nn.Parameter(torch.zeros(embed_dim))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, fg_token: torch.Tensor, bg_token: torch.Tensor) -> torch.Tensor:
        return project_semantic_token(fg_token, bg_token, self.weight, self.bias)


def visual_prior(
    query_features: torch.Tensor,
    support_prototype: torch.Tensor,
    out_size: tuple[int, int],
) -> torch.Tensor:
    """Sigmoid of the per-position cosine between query features and the
    support prototype, bilinearly upsampled to image resolution.

    Values are strictly inside (0, 1).  A zero prototype has no
    direction and raises; the caller substitutes a uniform 0.5 map.
    """
    proto_norm = support_prototype.norm()
    if proto_norm < 1e-12:
        raise PriorError("support prototype is zero; visual prior undefined")
    feat_norm = query_features.norm(dim=-1).clamp_min(1e-12)
    cos = (query_features @ support_prototype) / (feat_norm * proto_norm)
    grid = torch.sigmoid(cos)
    return nn.functional.interpolate(
        grid.unsqueeze(0).unsqueeze(0), size=out_size, mode="bilinear", align_corners=False
    )[0, 0]


def uniform_prior(out_size: tuple[int, int], dtype: torch.dtype) -> torch.Tensor:
    return torch.full(out_size, 0.5, dtype=dtype)


def proposal_prior(
    query_proposals: ProposalSet,
    reference: torch.Tensor,
    delta: float,
    visual_projection: nn.Module,
) -> torch.Tensor:
    """Clamped union of query proposals whose projected pooled feature
    has cosine similarity strictly above delta with the reference.

    Output values are exactly 0 or 1.  The union is built under no_grad:
    the hard indicator carries no gradient anyway, and the projection is
    trained through the token path instead.
    """
    with torch.no_grad():
        feats = visual_projection(query_proposals.pooled_features.to(reference.dtype))
        feats = nn.functional.normalize(feats, dim=-1)
        ref = nn.functional.normalize(reference, dim=0)
        cos = feats @ ref
        selected = (cos > delta).cpu().numpy()
    h, w = query_proposals.masks.shape[1:]
    out = torch.zeros(h, w, dtype=reference.dtype)
    if selected.any():
        union = query_proposals.masks[selected].any(axis=0)
        out[torch.from_numpy(union)] = 1.0
    return out


def resize_prior(prior: torch.Tensor, out_size: tuple[int, int], binary: bool) -> torch.Tensor:
    """Fixed resizing policy: nearest for binary priors, bilinear otherwise."""
    if tuple(prior.shape) == tuple(out_size):
        return prior
    mode = "nearest" if binary else "bilinear"
    kwargs = {} if binary else {"align_corners": False}
    return nn.functional.interpolate(
        prior.unsqueeze(0).unsqueeze(0), size=out_size, mode=mode, **kwargs
    )[0, 0]


class GeometricPromptFuser(nn.Module):
    """Conv block fusing the three encoded priors (channel concat, so
    modality order matters) into one dense prompt grid."""

    def __init__(self, dense_dim: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(3 * dense_dim, dense_dim, kernel_size=3, padding=1),
            nn.GELU(),
            nn.Conv2d(dense_dim, dense_dim, kernel_size=3, padding=1),
        )

    def forward(
        self,
        visual_embedding: torch.Tensor,
        text_embedding: torch.Tensor,
        audio_embedding: torch.Tensor,
    ) -> torch.Tensor:
        if not visual_embedding.shape == text_embedding.shape == audio_embedding.shape:
            raise ConfigurationError("encoded priors must share one grid shape")
        x = torch.cat(
            [
                visual_embedding.permute(2, 0, 1),
                text_embedding.permute(2, 0, 1),
                audio_embedding.permute(2, 0, 1),
            ],
            dim=0,
        ).unsqueeze(0)
        return self.block(x)[0].permute(1, 2, 0)


class Refiner(nn.Module):
    """Residual conv head on [initial logits ⊕ upsampled query features].

    The last layer is zero-initialized, so refined logits equal the
    initial logits at initialization.
    """

    def __init__(self, visual_dim: int, hidden: int = 16):
        super().__init__()
        self.head = nn.Sequential(
            nn.Conv2d(1 + visual_dim, hidden, kernel_size=3, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, hidden, kernel_size=3, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, 1, kernel_size=3, padding=1),
        )
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def forward(self, initial_logits: torch.Tensor, query_features: torch.Tensor) -> torch.Tensor:
        h, w = initial_logits.shape
        feats = nn.functional.interpolate(
            query_features.permute(2, 0, 1).unsqueeze(0),
            size=(h, w),
            mode="bilinear",
            align_corners=False,
        )
        x = torch.cat([initial_logits.unsqueeze(0).unsqueeze(0), feats], dim=1)
        return initial_logits + self.head(x)[0, 0]


@dataclass
class PromptPack:
    """Everything the decoder consumes for one episode."""

    hq_token: torch.Tensor | None  # (d,); None when the semantic path is off
    semantic_tokens: torch.Tensor | None  # (m, d) sparse prompts
    geometric_embedding: torch.Tensor | None  # (H/s, W/s, dense_dim)
    visual_prior: torch.Tensor  # (H, W) in [0, 1]
    text_prior: torch.Tensor
    audio_prior: torch.Tensor


def reconstruct_mask(
    pack: PromptPack,
    query_features: torch.Tensor,
    decoder: MaskDecoder,
    refiner: Refiner,
    out_size: tuple[int, int],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode initial logits from the prompt pack, then refine them."""
    initial = decoder(
        pack.hq_token, pack.semantic_tokens, pack.geometric_embedding, query_features, out_size
    )
    refined = refiner(initial, query_features)
    return initial, refined
