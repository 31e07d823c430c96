"""Tri-modal (visual/text/audio) few-shot segmentation with deterministic
mock backbones: episodic protocol, proposal decomposition, contrastive
fusion, dual-path mask reconstruction, and an ablation harness."""

from .adapters import (
    MaskDecoder,
    MaskPromptEncoder,
    MockAudioEmbedder,
    MockTextEmbedder,
    ProposalSet,
    RegionProposer,
    TextPayload,
    VisualFeatureEncoder,
)
from .decompose import (
    VisualDecomposition,
    decompose_visual,
    overlap_ratio,
    partition_proposals,
    pool_prototype,
)
from .episodes import (
    ClassSplit,
    Episode,
    SyntheticDatasetSpec,
    generate_synthetic_dataset,
    load_dataset,
    sample_episode,
    save_dataset,
    split_folds,
)
from .fuse import FuseModule, TokenBundle, contrastive_loss, modality_dropout, self_attention
from .harness import Checkpoint, EvalReport, RunConfig, ablate, evaluate, train
from .losses import bce_loss, dice_loss, fb_iou, iou, miou, total_loss
from .model import EpisodePreprocessor, SegmentationModel, episode_loss
from .reconstruct import (
    PromptPack,
    Refiner,
    project_semantic_token,
    proposal_prior,
    reconstruct_mask,
    visual_prior,
)

__version__ = "0.1.0"
