"""Contrastive fusion stage.

Foreground/background token bundles are enhanced by two independent
self-attention branches; attended tokens then feed a grouped InfoNCE
loss whose denominator sums over negatives only (a flag restores the
standard form that includes the positive pair).  Modality dropout
removes whole modalities during training, never the learned tokens
and never every modality at once.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .adapters import TextPayload
from .decompose import VisualDecomposition
from .errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

GROUP_ANCHOR = "anchor"
GROUP_POSITIVE = "positive"
GROUP_NEGATIVE = "negative"

MOD_LEARNED = "learned"
MOD_VISUAL = "visual"
MOD_TEXT = "text"
MOD_AUDIO = "audio"

DROPPABLE_MODALITIES = (MOD_VISUAL, MOD_TEXT, MOD_AUDIO)

DEFAULT_TEMPERATURE = 0.07


@dataclass(frozen=True)
class Token:
    name: str
    vector: torch.Tensor  # (d,)
    group: str
    modality: str
    active: bool = True


@dataclass
class TokenBundle:
    """Fixed-slot foreground/background token sequences.

    Slots of absent modalities stay in place with ``active=False`` so the
    layout is always 6 foreground + 3 background tokens for one shot.
    """

    fg: list[Token]
    bg: list[Token]

    def active_fg(self) -> list[Token]:
        return [t for t in self.fg if t.active]

    def active_bg(self) -> list[Token]:
        return [t for t in self.bg if t.active]

    def active_modalities(self) -> set[str]:
        return {
            t.modality
            for t in self.fg + self.bg
            if t.active and t.modality in DROPPABLE_MODALITIES
        }


def assemble_tokens(
    visual: VisualDecomposition | None,
    text: TextPayload | None,
    audio: torch.Tensor | None,
    fg_token: torch.Tensor,
    bg_token: torch.Tensor,
    visual_projection: nn.Module,
) -> TokenBundle:
    """Build the fused-stage token bundle in its canonical slot order.

    Foreground: [fg_token, support proto, positive proto, category text,
    descriptor text, audio]; background: [bg_token, negative proto,
    background text].  Visual prototypes pass through the shared learned
    projection into the token dimension first.
    """
    d = fg_token.shape[0]
    dtype = fg_token.dtype

    def placeholder() -> torch.Tensor:
        return torch.zeros(d, dtype=dtype)

    def check(vec: torch.Tensor, what: str) -> torch.Tensor:
        if vec.shape != (d,):
            raise ConfigurationError(f"{what} has dim {tuple(vec.shape)}, expected ({d},)")
        return vec

    if visual is not None:
        support = check(visual_projection(visual.support_prototype.to(dtype)), "support prototype")
        positive = check(visual_projection(visual.positive_prototype.to(dtype)), "positive prototype")
        negative = check(visual_projection(visual.negative_prototype.to(dtype)), "negative prototype")
    else:
        support = positive = negative = placeholder()

    if text is not None:
        category = check(torch.as_tensor(text.category_embedding, dtype=dtype), "category embedding")
        descriptor = check(torch.as_tensor(text.descriptor_embedding, dtype=dtype), "descriptor embedding")
        background = check(torch.as_tensor(text.background_embedding, dtype=dtype), "background embedding")
    else:
        category = descriptor = background = placeholder()

    audio_vec = (
        check(torch.as_tensor(audio, dtype=dtype), "audio embedding")
        if audio is not None
        else placeholder()
    )

    has_v, has_t, has_a = visual is not None, text is not None, audio is not None
    fg = [
        Token("fg_token", fg_token, GROUP_ANCHOR, MOD_LEARNED),
        Token("support_prototype", support, GROUP_ANCHOR, MOD_VISUAL, has_v),
        Token("positive_prototype", positive, GROUP_POSITIVE, MOD_VISUAL, has_v),
        Token("category_text", category, GROUP_ANCHOR, MOD_TEXT, has_t),
        Token("descriptor_text", descriptor, GROUP_POSITIVE, MOD_TEXT, has_t),
        Token("audio", audio_vec, GROUP_ANCHOR, MOD_AUDIO, has_a),
    ]
    bg = [
        Token("bg_token", bg_token, GROUP_NEGATIVE, MOD_LEARNED),
        Token("negative_prototype", negative, GROUP_NEGATIVE, MOD_VISUAL, has_v),
        Token("background_text", background, GROUP_NEGATIVE, MOD_TEXT, has_t),
    ]
    return TokenBundle(fg=fg, bg=bg)


def modality_dropout(
    bundle: TokenBundle,
    rates: Mapping[str, float],
    rng: np.random.Generator,
) -> TokenBundle:
    """Drop whole modalities with their configured probabilities.

    Learned tokens are never dropped, and draws that would silence every
    present modality are rejected and resampled.
    """
    for mod, rate in rates.items():
        if mod not in DROPPABLE_MODALITIES:
            raise ConfigurationError(f"unknown modality {mod!r} in dropout rates")
        if not 0.0 <= rate <= 1.0:
            raise ConfigurationError(f"dropout rate for {mod} must lie in [0, 1]")

    present = sorted(bundle.active_modalities())
    if not present:
        return bundle
    if all(rates.get(m, 0.0) >= 1.0 for m in present):
        raise ConfigurationError("dropout rates would always remove every modality")

    while True:
        drops = {m: bool(rng.random() < rates.get(m, 0.0)) for m in present}
        if not all(drops.values()):
            break

    def apply(tokens: list[Token]) -> list[Token]:
        return [
            dataclasses.replace(t, active=False) if drops.get(t.modality, False) else t
            for t in tokens
        ]

    return TokenBundle(fg=apply(bundle.fg), bg=apply(bundle.bg))


def self_attention(
    tokens: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
) -> torch.Tensor:
    """softmax((XWq)(XWk)ᵀ / sqrt(d)) (XWv) over an n×d token sequence."""
    if tokens.dim() != 2 or tokens.shape[0] < 1:
        raise InputError("tokens must be a nonempty n×d matrix")
    return attention_weights(tokens, w_q, w_k) @ (tokens @ w_v)


def attention_weights(
    tokens: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor
) -> torch.Tensor:
    """Row-stochastic attention matrix used by ``self_attention``."""
    d_k = tokens.shape[-1]
    logits = (tokens @ w_q) @ (tokens @ w_k).transpose(-2, -1) / math.sqrt(d_k)
    return torch.softmax(logits, dim=-1)


class AttentionBranch(nn.Module):
    """One self-attention branch with its own query/key/value matrices."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.w_q = nn.Parameter(torch.empty(embed_dim, embed_dim))
        self.w_k = nn.Parameter(torch.empty(embed_dim, embed_dim))
        self.w_v = nn.Parameter(torch.empty(embed_dim, embed_dim))
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.xavier_uniform_(w)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self_attention(tokens, self.w_q, self.w_k, self.w_v)


def contrastive_loss(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    temperature: float = DEFAULT_TEMPERATURE,
    include_positive: bool = False,
) -> torch.Tensor:
    """Grouped InfoNCE, averaged over every anchor×positive pair.

    Per pair: -log(exp(a·p/t) / sum_n exp(a·n/t)), with the denominator
    over negatives only.  ``include_positive`` switches to the standard
    form that also adds the pair term to the denominator.  Tokens are
    L2-normalized before any dot product.  Empty groups contribute zero
    (with a warning) rather than failing the step.
    """
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    if anchors.numel() == 0 or positives.numel() == 0 or negatives.numel() == 0:
        logger.warning(
            "contrastive loss skipped: empty group (anchors=%d, positives=%d, negatives=%d)",
            anchors.shape[0] if anchors.dim() else 0,
            positives.shape[0] if positives.dim() else 0,
            negatives.shape[0] if negatives.dim() else 0,
        )
        ref = anchors if anchors.numel() else positives if positives.numel() else negatives
        return torch.zeros((), dtype=ref.dtype if ref.numel() else torch.get_default_dtype())

    a = torch.nn.functional.normalize(anchors, dim=-1)
    p = torch.nn.functional.normalize(positives, dim=-1)
    n = torch.nn.functional.normalize(negatives, dim=-1)
    sim_ap = a @ p.T / temperature  # (A, P)
    sim_an = a @ n.T / temperature  # (A, N)
    lse_neg = torch.logsumexp(sim_an, dim=1, keepdim=True)  # (A, 1)
    if include_positive:
        denom = torch.logaddexp(lse_neg.expand_as(sim_ap), sim_ap)
    else:
        denom = lse_neg.expand_as(sim_ap)
    return (denom - sim_ap).mean()


@dataclass
class FusedTokens:
    """Attended token bundle plus the contrastive groupings."""

    fg: list[Token]  # attended, active slots only, original order
    bg: list[Token]
    fg_token: torch.Tensor  # attended learned foreground token
    bg_token: torch.Tensor
    anchors: torch.Tensor  # (A, d)
    positives: torch.Tensor  # (P, d)
    negatives: torch.Tensor  # (N, d)

    def fg_sequence(self) -> torch.Tensor:
        """Surviving attended foreground tokens, (m, d), m <= 6."""
        return torch.stack([t.vector for t in self.fg])


class FuseModule(nn.Module):
    """Learned tokens, the shared visual projection, and both attention
    branches; maps a token bundle to attended tokens and group tensors."""

    def __init__(self, embed_dim: int, visual_dim: int):
        super().__init__()
        self.embed_dim = int(embed_dim)
        self.fg_token = nn.Parameter(torch.empty(embed_dim))
        self.bg_token = nn.Parameter(torch.empty(embed_dim))
        nn.init.normal_(self.fg_token, std=1.0 / math.sqrt(embed_dim))
        nn.init.normal_(self.bg_token, std=1.0 / math.sqrt(embed_dim))
        self.visual_projection = nn.Linear(visual_dim, embed_dim)
        self.fg_branch = AttentionBranch(embed_dim)
        self.bg_branch = AttentionBranch(embed_dim)

    def assemble(
        self,
        visual: VisualDecomposition | None,
        text: TextPayload | None,
        audio: torch.Tensor | None,
    ) -> TokenBundle:
        return assemble_tokens(
            visual, text, audio, self.fg_token, self.bg_token, self.visual_projection
        )

    def forward(self, bundle: TokenBundle) -> FusedTokens:
        fg_active = bundle.active_fg()
        bg_active = bundle.active_bg()

        fg_out = self.fg_branch(torch.stack([t.vector for t in fg_active]))
        bg_out = self.bg_branch(torch.stack([t.vector for t in bg_active]))
        fg_att = [
            dataclasses.replace(t, vector=fg_out[i]) for i, t in enumerate(fg_active)
        ]
        bg_att = [
            dataclasses.replace(t, vector=bg_out[i]) for i, t in enumerate(bg_active)
        ]

        def group(tokens: list[Token], which: str) -> torch.Tensor:
            vecs = [t.vector for t in tokens if t.group == which]
            if not vecs:
                return fg_out.new_zeros((0, self.embed_dim))
            return torch.stack(vecs)

        everything = fg_att + bg_att
        return FusedTokens(
            fg=fg_att,
            bg=bg_att,
            fg_token=fg_out[0],
            bg_token=bg_out[0],
            anchors=group(everything, GROUP_ANCHOR),
            positives=group(everything, GROUP_POSITIVE),
            negatives=group(everything, GROUP_NEGATIVE),
        )
