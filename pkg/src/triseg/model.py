"""End-to-end episode pipeline.

``EpisodePreprocessor`` runs the frozen adapters (feature encoder,
region proposer) over an episode once; ``SegmentationModel`` holds every
trainable part (learned tokens, attention branches, shared visual
projection, semantic projector, prompt encoder, geometric fuser, mock
decoder, refiner) and maps a prepared episode to mask logits plus the
contrastive loss term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .adapters import (
    MaskDecoder,
    MaskPromptEncoder,
    ProposalSet,
    RegionProposer,
    TextPayload,
    VisualFeatureEncoder,
)
from .decompose import VisualDecomposition, average_decompositions, decompose_visual
from .episodes import Episode
from .errors import PriorError
from .fuse import FuseModule, TokenBundle, contrastive_loss, modality_dropout
from .losses import LossBreakdown, bce_loss, dice_loss, total_loss
from .reconstruct import (
    GeometricPromptFuser,
    PromptPack,
    Refiner,
    SemanticProjector,
    proposal_prior,
    reconstruct_mask,
    uniform_prior,
    visual_prior,
)


@dataclass
class PreparedEpisode:
    """Episode with frozen-adapter outputs precomputed as tensors."""

    class_id: int
    class_name: str
    query_image: np.ndarray
    query_mask: np.ndarray
    query_features: torch.Tensor
    query_proposals: ProposalSet
    support_masks: list[np.ndarray]
    support_features: list[torch.Tensor]
    support_proposals: list[ProposalSet]
    text_payload: TextPayload | None
    audio_payload: np.ndarray | None

    @property
    def shots(self) -> int:
        return len(self.support_masks)


class EpisodePreprocessor:
    """Applies the frozen visual encoder and region proposer to an episode."""

    def __init__(
        self,
        visual_encoder: VisualFeatureEncoder,
        proposer: RegionProposer,
        dtype: torch.dtype = torch.float32,
    ):
        self.visual_encoder = visual_encoder
        self.proposer = proposer
        self.dtype = dtype

    def _features(self, image: np.ndarray) -> torch.Tensor:
        return torch.from_numpy(self.visual_encoder.extract(image)).to(self.dtype)

    def prepare(self, episode: Episode) -> PreparedEpisode:
        qf = self._features(episode.query_image)
        q_props = self.proposer.propose_regions(episode.query_image, qf)
        s_masks, s_feats, s_props = [], [], []
        for image, mask in episode.supports:
            f = self._features(image)
            s_feats.append(f)
            s_masks.append(mask)
            s_props.append(self.proposer.propose_regions(image, f))
        return PreparedEpisode(
            class_id=episode.class_id,
            class_name=episode.class_name,
            query_image=episode.query_image,
            query_mask=episode.query_mask,
            query_features=qf,
            query_proposals=q_props,
            support_masks=s_masks,
            support_features=s_feats,
            support_proposals=s_props,
            text_payload=episode.text_payload,
            audio_payload=episode.audio_payload,
        )


@dataclass
class EpisodeOutput:
    initial_logits: torch.Tensor  # (H, W)
    refined_logits: torch.Tensor  # (H, W)
    contrastive: torch.Tensor  # scalar
    prompts: PromptPack
    bundle: TokenBundle

    def predicted_mask(self) -> np.ndarray:
        with torch.no_grad():
            return (torch.sigmoid(self.refined_logits) > 0.5).cpu().numpy()


class SegmentationModel(nn.Module):
    """All trainable modules plus the modality/path switches.

    The switches (``use_visual`` etc.) are plain attributes, not
    parameters: ablation flips them on a trained checkpoint without
    touching weights.
    """

    def __init__(
        self,
        embed_dim: int = 64,
        visual_dim: int = 16,
        dense_dim: int = 64,
        feature_stride: int = 4,
        tau_overlap: float = 0.5,
        tau_temp: float = 0.07,
        infonce_include_positive: bool = False,
        delta_text: float = 0.5,
        delta_audio: float = 0.5,
        use_visual: bool = True,
        use_text: bool = True,
        use_audio: bool = True,
        use_semantic: bool = True,
        use_geometric: bool = True,
    ):
        super().__init__()
        self.embed_dim = embed_dim
        self.tau_overlap = tau_overlap
        self.tau_temp = tau_temp
        self.infonce_include_positive = infonce_include_positive
        self.delta_text = delta_text
        self.delta_audio = delta_audio
        self.use_visual = use_visual
        self.use_text = use_text
        self.use_audio = use_audio
        self.use_semantic = use_semantic
        self.use_geometric = use_geometric

        self.fuse = FuseModule(embed_dim, visual_dim)
        self.semantic_projector = SemanticProjector(embed_dim)
        self.prompt_encoder = MaskPromptEncoder(dense_dim, stride=feature_stride)
        self.geometric_fuser = GeometricPromptFuser(dense_dim)
        self.decoder = MaskDecoder(embed_dim, visual_dim, dense_dim)
        self.refiner = Refiner(visual_dim)

    # -- stages -----------------------------------------------------------

    def decompose_supports(self, prep: PreparedEpisode) -> VisualDecomposition | None:
        if not (self.use_visual and prep.shots):
            return None
        parts = [
            decompose_visual(f, m, p, tau=self.tau_overlap)
            for f, m, p in zip(prep.support_features, prep.support_masks, prep.support_proposals)
        ]
        return average_decompositions(parts)

    def _priors(
        self, prep: PreparedEpisode, visual: VisualDecomposition | None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        out_size = prep.query_mask.shape
        dtype = prep.query_features.dtype
        if visual is not None:
            try:
                m_v = visual_prior(prep.query_features, visual.support_prototype, out_size)
            except PriorError:
                m_v = uniform_prior(out_size, dtype)
        else:
            m_v = uniform_prior(out_size, dtype)

        zeros = torch.zeros(out_size, dtype=dtype)
        if self.use_text and prep.text_payload is not None:
            ref = torch.as_tensor(prep.text_payload.category_embedding, dtype=dtype)
            m_t = proposal_prior(
                prep.query_proposals, ref, self.delta_text, self.fuse.visual_projection
            )
        else:
            m_t = zeros
        if self.use_audio and prep.audio_payload is not None:
            ref = torch.as_tensor(prep.audio_payload, dtype=dtype)
            m_a = proposal_prior(
                prep.query_proposals, ref, self.delta_audio, self.fuse.visual_projection
            )
        else:
            m_a = zeros.clone()
        return m_v, m_t, m_a

    # -- full episode forward ----------------------------------------------

    def forward_episode(
        self,
        prep: PreparedEpisode,
        dropout_rng: np.random.Generator | None = None,
        dropout_rates: dict[str, float] | None = None,
    ) -> EpisodeOutput:
        visual = self.decompose_supports(prep)
        text = prep.text_payload if self.use_text else None
        audio = None
        if self.use_audio and prep.audio_payload is not None:
            audio = torch.as_tensor(prep.audio_payload, dtype=prep.query_features.dtype)

        bundle = self.fuse.assemble(visual, text, audio)
        if self.training and dropout_rng is not None and dropout_rates:
            bundle = modality_dropout(bundle, dropout_rates, dropout_rng)

        fused = self.fuse(bundle)
        l_con = contrastive_loss(
            fused.anchors,
            fused.positives,
            fused.negatives,
            temperature=self.tau_temp,
            include_positive=self.infonce_include_positive,
        )

        m_v, m_t, m_a = self._priors(prep, visual)
        if self.use_geometric:
            geometric = self.geometric_fuser(
                self.prompt_encoder(m_v),
                self.prompt_encoder(m_t),
                self.prompt_encoder(m_a),
            )
        else:
            geometric = None

        if self.use_semantic:
            hq_token = self.semantic_projector(fused.fg_token, fused.bg_token)
            sparse = fused.fg_sequence()
        else:
            hq_token = None
            sparse = None

        pack = PromptPack(
            hq_token=hq_token,
            semantic_tokens=sparse,
            geometric_embedding=geometric,
            visual_prior=m_v,
            text_prior=m_t,
            audio_prior=m_a,
        )
        initial, refined = reconstruct_mask(
            pack, prep.query_features, self.decoder, self.refiner, prep.query_mask.shape
        )
        return EpisodeOutput(
            initial_logits=initial,
            refined_logits=refined,
            contrastive=l_con,
            prompts=pack,
            bundle=bundle,
        )


def episode_loss(
    output: EpisodeOutput, target_mask: np.ndarray, lam: float
) -> tuple[torch.Tensor, LossBreakdown]:
    """Segmentation losses averaged over initial and refined logits
    (deep supervision), combined with the contrastive term."""
    target = torch.from_numpy(target_mask.astype(np.float64)).to(output.initial_logits.dtype)
    l_bce = 0.5 * (bce_loss(output.initial_logits, target) + bce_loss(output.refined_logits, target))
    l_dice = 0.5 * (
        dice_loss(output.initial_logits, target) + dice_loss(output.refined_logits, target)
    )
    l_con = output.contrastive
    total = total_loss(l_bce, l_dice, l_con, lam)
    breakdown = LossBreakdown(
        bce=float(l_bce.detach()),
        dice=float(l_dice.detach()),
        contrastive=float(l_con.detach()) if torch.is_tensor(l_con) else float(l_con),
        total=float(total.detach()),
        lam=lam,
    )
    return total, breakdown
