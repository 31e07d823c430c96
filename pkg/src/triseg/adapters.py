"""Deterministic stand-ins for the frozen foundation models.

Five adapters feed the pipeline: a visual feature encoder, a region
proposer, a text embedder, an audio embedder, and the promptable mask
decoder with its mask prompt encoder.  The first four are frozen and
parameter-free; the prompt encoder and decoder are small trainable
torch modules.  Everything is deterministic given (inputs, weights).

Real text/audio backends are supported only through precomputed
embedding fixtures (see ``FixtureEmbeddingStore``); no model inference
happens here.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .errors import (
    ConfigurationError,
    FixtureIntegrityError,
    InputError,
    MissingFixtureError,
)

ROLE_CATEGORY = "category"
ROLE_DESCRIPTOR = "descriptor"
ROLE_BACKGROUND = "background"
ROLE_AUDIO = "audio"


@dataclass(frozen=True)
class TextPayload:
    """Three semantic embeddings for one category plus their source strings."""

    category_embedding: np.ndarray
    descriptor_embedding: np.ndarray
    background_embedding: np.ndarray
    raw_strings: tuple[str, str, str]

    @property
    def dim(self) -> int:
        return int(self.category_embedding.shape[0])


@dataclass(frozen=True)
class ProposalSet:
    """Binary region masks with one pooled visual feature per mask.

    Masks live at image resolution and may overlap; pooled features are
    in the raw visual feature space (projection into the shared token
    space is learned downstream, so it cannot be baked in here).
    """

    masks: np.ndarray  # (N, H, W) bool
    pooled_features: torch.Tensor  # (N, visual_dim)

    def __post_init__(self) -> None:
        if self.masks.ndim != 3 or self.masks.shape[0] == 0:
            raise InputError("ProposalSet requires at least one H×W mask")
        if any(not m.any() for m in self.masks):
            raise InputError("ProposalSet masks must be nonempty")

    def __len__(self) -> int:
        return int(self.masks.shape[0])


def _hashed_unit_vector(tag: str, category: str, role: str, dim: int) -> np.ndarray:
    """Unit-norm float64 vector derived only from (tag, category, role, dim)."""
    digest = hashlib.sha256(f"{tag}|{category}|{role}|{dim}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class MockTextEmbedder:
    """Hash-seeded text embeddings over a fixed vocabulary.

    Each (category, role) pair maps to a stable unit-norm vector, so two
    processes agree bit-for-bit without any shared state.
    """

    def __init__(self, vocabulary: Sequence[str], embed_dim: int, tag: str = "text-v1"):
        self.vocabulary = tuple(vocabulary)
        self.embed_dim = int(embed_dim)
        self.tag = tag

    def embed_text(self, category_name: str) -> TextPayload:
        if category_name not in self.vocabulary:
            raise MissingFixtureError(f"category {category_name!r} not in mock vocabulary")
        vecs = {
            role: _hashed_unit_vector(self.tag, category_name, role, self.embed_dim)
            for role in (ROLE_CATEGORY, ROLE_DESCRIPTOR, ROLE_BACKGROUND)
        }
        return TextPayload(
            category_embedding=vecs[ROLE_CATEGORY],
            descriptor_embedding=vecs[ROLE_DESCRIPTOR],
            background_embedding=vecs[ROLE_BACKGROUND],
            raw_strings=(
                category_name,
                f"fine-grained attributes of {category_name}",
                f"categories co-occurring with {category_name}",
            ),
        )


class MockAudioEmbedder:
    """Hash-seeded audio embedding with a constructed cosine to the category text vector.

    The output is rho * f_category + sqrt(1 - rho^2) * u with u a unit vector
    orthogonal to f_category, so cos(audio, category_text) == rho exactly.
    """

    def __init__(
        self,
        vocabulary: Sequence[str],
        embed_dim: int,
        text_cosine: float = 0.6,
        tag: str = "text-v1",
    ):
        if not -1.0 <= text_cosine <= 1.0:
            raise ConfigurationError("audio/text cosine must lie in [-1, 1]")
        self.vocabulary = tuple(vocabulary)
        self.embed_dim = int(embed_dim)
        self.text_cosine = float(text_cosine)
        self.tag = tag

    def embed_audio(self, category_name: str) -> np.ndarray:
        if category_name not in self.vocabulary:
            raise MissingFixtureError(f"category {category_name!r} not in mock vocabulary")
        f_cat = _hashed_unit_vector(self.tag, category_name, ROLE_CATEGORY, self.embed_dim)
        raw = _hashed_unit_vector(self.tag, category_name, ROLE_AUDIO, self.embed_dim)
        u = raw - (raw @ f_cat) * f_cat
        norm = np.linalg.norm(u)
        if norm < 1e-12:  # hash collision with the category direction; unreachable in practice
            u = np.zeros_like(raw)
            u[0] = 1.0
            u -= (u @ f_cat) * f_cat
            norm = np.linalg.norm(u)
        u /= norm
        rho = self.text_cosine
        return rho * f_cat + math.sqrt(max(0.0, 1.0 - rho * rho)) * u


# ---------------------------------------------------------------------------
# Embedding fixtures (drop-in real-backend path)
# ---------------------------------------------------------------------------


class FixtureEmbeddingStore:
    """Reads/writes per-category embedding fixtures.

    Layout: ``<dir>/<category>.json`` holds a list of records
    ``{category, role, dim, blob_path, sha256}``; each blob is raw
    little-endian float32.  The loader validates checksum and dimension.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def write(self, category: str, role: str, vector: np.ndarray, text: str | None = None) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        blob = np.asarray(vector, dtype="<f4").tobytes()
        blob_name = f"{category}__{role}.f32"
        (self.root / blob_name).write_bytes(blob)
        record = {
            "category": category,
            "role": role,
            "dim": int(np.asarray(vector).shape[0]),
            "blob_path": blob_name,
            "sha256": hashlib.sha256(blob).hexdigest(),
        }
        if text is not None:
            record["text"] = text
        manifest_path = self.root / f"{category}.json"
        records = json.loads(manifest_path.read_text()) if manifest_path.exists() else []
        records = [r for r in records if r["role"] != role]
        records.append(record)
        manifest_path.write_text(json.dumps(records, indent=2, sort_keys=True))

    def load(self, category: str, role: str) -> np.ndarray:
        manifest_path = self.root / f"{category}.json"
        if not manifest_path.exists():
            raise MissingFixtureError(f"no fixture manifest for category {category!r}")
        records = json.loads(manifest_path.read_text())
        matches = [r for r in records if r["role"] == role]
        if not matches:
            raise MissingFixtureError(f"no {role!r} fixture for category {category!r}")
        record = matches[0]
        blob = (self.root / record["blob_path"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != record["sha256"]:
            raise FixtureIntegrityError(f"checksum mismatch for {record['blob_path']}")
        vec = np.frombuffer(blob, dtype="<f4").astype(np.float64)
        if vec.shape[0] != record["dim"]:
            raise FixtureIntegrityError(
                f"{record['blob_path']}: expected dim {record['dim']}, got {vec.shape[0]}"
            )
        return vec

    def load_text(self, category: str) -> str | None:
        manifest_path = self.root / f"{category}.json"
        if not manifest_path.exists():
            return None
        for record in json.loads(manifest_path.read_text()):
            if record["role"] == ROLE_DESCRIPTOR:
                return record.get("text")
        return None


class FixtureTextEmbedder:
    """Text embedder backed by precomputed fixture files."""

    def __init__(self, root: str | Path):
        self.store = FixtureEmbeddingStore(root)

    def embed_text(self, category_name: str) -> TextPayload:
        return TextPayload(
            category_embedding=self.store.load(category_name, ROLE_CATEGORY),
            descriptor_embedding=self.store.load(category_name, ROLE_DESCRIPTOR),
            background_embedding=self.store.load(category_name, ROLE_BACKGROUND),
            raw_strings=(
                category_name,
                self.store.load_text(category_name) or "",
                "",
            ),
        )


class FixtureAudioEmbedder:
    """Audio embedder backed by precomputed fixture files."""

    def __init__(self, root: str | Path):
        self.store = FixtureEmbeddingStore(root)

    def embed_audio(self, category_name: str) -> np.ndarray:
        return self.store.load(category_name, ROLE_AUDIO)


# ---------------------------------------------------------------------------
# Visual feature encoder (frozen)
# ---------------------------------------------------------------------------


class VisualFeatureEncoder:
    """Frozen mock image encoder.

    Per-pixel color/texture statistics are area-pooled onto the feature
    grid and pushed through a fixed random projection with tanh.  The
    projection seed is a constant, independent of any run seed, so the
    "backbone" is identical across processes.
    """

    _N_STATS = 9  # r, g, b, 3 box means, box std of luma, |dx|, |dy|

    def __init__(self, visual_dim: int = 16, stride: int = 4, seed: int = 0x5EED):
        self.visual_dim = int(visual_dim)
        self.stride = int(stride)
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((self._N_STATS, visual_dim)) / math.sqrt(self._N_STATS)
        self._bias = 0.1 * rng.standard_normal(visual_dim)

    def extract(self, image: np.ndarray) -> np.ndarray:
        """image: (H, W, 3) float in [0, 1] -> (H/s, W/s, visual_dim) float64."""
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise InputError("expected an H×W×3 image")
        h, w = img.shape[:2]
        if h % self.stride or w % self.stride:
            raise InputError(f"image size must be divisible by stride {self.stride}")
        luma = img.mean(axis=2)
        stats = [img[:, :, c] for c in range(3)]
        stats += [ndimage.uniform_filter(img[:, :, c], size=5, mode="nearest") for c in range(3)]
        mean_sq = ndimage.uniform_filter(luma * luma, size=5, mode="nearest")
        sq_mean = ndimage.uniform_filter(luma, size=5, mode="nearest") ** 2
        stats.append(np.sqrt(np.clip(mean_sq - sq_mean, 0.0, None)))
        gy, gx = np.gradient(luma)
        stats += [np.abs(gx), np.abs(gy)]
        field = np.stack(stats, axis=-1)  # (H, W, n_stats)
        s = self.stride
        pooled = field.reshape(h // s, s, w // s, s, self._N_STATS).mean(axis=(1, 3))
        return np.tanh(pooled @ self._proj + self._bias)


# ---------------------------------------------------------------------------
# Region proposer (frozen)
# ---------------------------------------------------------------------------


def soft_pool_features(features: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
    """Area-weighted mean of grid features under a full-resolution mask.

    Weights are the per-cell coverage fractions, so even masks that would
    vanish under hard binarization still pool to a finite vector.
    """
    gh, gw, _ = features.shape
    h, w = mask.shape
    if h % gh or w % gw:
        raise InputError("mask resolution must be a multiple of the feature grid")
    sh, sw = h // gh, w // gw
    weights = mask.astype(np.float64).reshape(gh, sh, gw, sw).mean(axis=(1, 3))
    wt = torch.from_numpy(weights).to(features.dtype)
    total = wt.sum()
    if total <= 0:
        raise InputError("cannot pool an empty mask")
    return (features * wt.unsqueeze(-1)).sum(dim=(0, 1)) / total


class RegionProposer:
    """Frozen mock region proposer.

    Builds an over-segmentation from color quantization, emits its
    connected components plus their intersections with a regular grid,
    and pools a feature vector per proposal.  Deterministic per image
    bytes; a uniform image degenerates to one full-frame proposal.
    """

    def __init__(self, quant_levels: int = 4, grid_cells: int = 4):
        if quant_levels < 2 or grid_cells < 1:
            raise ConfigurationError("quant_levels >= 2 and grid_cells >= 1 required")
        self.quant_levels = int(quant_levels)
        self.grid_cells = int(grid_cells)

    def _quantize(self, image: np.ndarray) -> np.ndarray:
        q = np.clip(image, 0.0, 1.0) * (self.quant_levels - 1)
        q = np.rint(q).astype(np.int64)
        return (q[:, :, 0] * self.quant_levels + q[:, :, 1]) * self.quant_levels + q[:, :, 2]

    def propose_regions(self, image: np.ndarray, features: torch.Tensor) -> ProposalSet:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise InputError("expected an H×W×3 image")
        h, w = img.shape[:2]
        if np.all(img == img[0, 0]):
            full = np.ones((1, h, w), dtype=bool)
            pooled = soft_pool_features(features, full[0]).unsqueeze(0)
            return ProposalSet(masks=full, pooled_features=pooled)

        labels = self._quantize(img)
        rows = np.minimum(np.arange(h) * self.grid_cells // h, self.grid_cells - 1)
        cols = np.minimum(np.arange(w) * self.grid_cells // w, self.grid_cells - 1)
        cell = rows[:, None] * self.grid_cells + cols[None, :]

        masks: list[np.ndarray] = []
        seen: set[bytes] = set()

        def add_components(field: np.ndarray) -> None:
            for value in np.unique(field):
                comp, n = ndimage.label(field == value)
                for i in range(1, n + 1):
                    m = comp == i
                    key = m.tobytes()
                    if key not in seen:
                        seen.add(key)
                        masks.append(m)

        add_components(labels)  # shape-level regions
        add_components(labels * self.grid_cells * self.grid_cells + cell)  # grid-split regions

        pooled = torch.stack([soft_pool_features(features, m) for m in masks])
        return ProposalSet(masks=np.stack(masks), pooled_features=pooled)


# ---------------------------------------------------------------------------
# Trainable prompt encoder and mask decoder
# ---------------------------------------------------------------------------


class MaskPromptEncoder(nn.Module):
    """Strided conv stack mapping an H×W prior in [0,1] to an (H/s, W/s, dense_dim) grid."""

    def __init__(self, dense_dim: int = 64, stride: int = 4):
        super().__init__()
        if stride < 1 or stride & (stride - 1):
            raise ConfigurationError("prompt encoder stride must be a power of two")
        self.dense_dim = int(dense_dim)
        self.stride = int(stride)
        mid = max(dense_dim // 2, 8)
        layers: list[nn.Module] = []
        ch = 1
        s = stride
        while s > 1:
            layers += [nn.Conv2d(ch, mid, kernel_size=3, stride=2, padding=1), nn.GELU()]
            ch = mid
            s //= 2
        layers.append(nn.Conv2d(ch, dense_dim, kernel_size=1))
        self.stack = nn.Sequential(*layers)

    def forward(self, prior: torch.Tensor) -> torch.Tensor:
        if prior.dim() != 2:
            raise InputError("prior must be a single H×W map")
        if torch.any(prior < 0) or torch.any(prior > 1):
            raise InputError("prior values must lie in [0, 1]")
        x = prior.unsqueeze(0).unsqueeze(0)
        out = self.stack(x)[0]  # (dense_dim, H/s, W/s)
        return out.permute(1, 2, 0)

    def zero_response(self, height: int, width: int) -> torch.Tensor:
        """Bias field produced by an all-zero prior."""
        param = next(self.parameters())
        zero = torch.zeros(height, width, dtype=param.dtype, device=param.device)
        with torch.no_grad():
            return self.forward(zero)


def _scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
) -> torch.Tensor:
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1) @ v


class MaskDecoder(nn.Module):
    """Mock promptable decoder: one two-way cross-attention block, then a
    per-position dot product with the output token, upsampled to H×W.

    The caller may supply its own output token (replacing the decoder's
    default), extra sparse prompt tokens, and a dense embedding that is
    added onto the projected query features.
    """

    def __init__(self, embed_dim: int, visual_dim: int, dense_dim: int):
        super().__init__()
        self.embed_dim = int(embed_dim)
        self.feature_proj = nn.Linear(visual_dim, embed_dim)
        self.dense_proj = nn.Linear(dense_dim, embed_dim)
        self.default_output_token = nn.Parameter(torch.zeros(embed_dim))
        nn.init.normal_(self.default_output_token, std=1.0 / math.sqrt(embed_dim))
        self.t2i_q = nn.Linear(embed_dim, embed_dim)
        self.t2i_k = nn.Linear(embed_dim, embed_dim)
        self.t2i_v = nn.Linear(embed_dim, embed_dim)
        self.i2t_q = nn.Linear(embed_dim, embed_dim)
        self.i2t_k = nn.Linear(embed_dim, embed_dim)
        self.i2t_v = nn.Linear(embed_dim, embed_dim)
        self.out_mlp = nn.Sequential(
            nn.Linear(embed_dim, embed_dim), nn.GELU(), nn.Linear(embed_dim, embed_dim)
        )

    def forward(
        self,
        output_token: torch.Tensor | None,
        sparse_tokens: torch.Tensor | None,
        dense_embedding: torch.Tensor | None,
        query_features: torch.Tensor,
        out_size: tuple[int, int],
    ) -> torch.Tensor:
        gh, gw, _ = query_features.shape
        feats = self.feature_proj(query_features.reshape(gh * gw, -1))
        if dense_embedding is not None:
            dh, dw, dc = dense_embedding.shape
            dense = dense_embedding
            if (dh, dw) != (gh, gw):
                dense = torch.nn.functional.interpolate(
                    dense.permute(2, 0, 1).unsqueeze(0), size=(gh, gw),
                    mode="bilinear", align_corners=False,
                )[0].permute(1, 2, 0)
            feats = feats + self.dense_proj(dense.reshape(gh * gw, dc))

        if output_token is None:
            output_token = self.default_output_token
        if output_token.shape != (self.embed_dim,):
            raise ConfigurationError("output token dimension mismatch")
        tokens = output_token.unsqueeze(0)
        if sparse_tokens is not None and sparse_tokens.numel():
            if sparse_tokens.shape[-1] != self.embed_dim:
                raise ConfigurationError("sparse token dimension mismatch")
            tokens = torch.cat([tokens, sparse_tokens], dim=0)

        tokens = tokens + _scaled_dot_attention(
            self.t2i_q(tokens), self.t2i_k(feats), self.t2i_v(feats)
        )
        feats = feats + _scaled_dot_attention(
            self.i2t_q(feats), self.i2t_k(tokens), self.i2t_v(tokens)
        )
        probe = self.out_mlp(tokens[0])
        grid_logits = (feats @ probe) / math.sqrt(self.embed_dim)
        grid = grid_logits.reshape(1, 1, gh, gw)
        return torch.nn.functional.interpolate(
            grid, size=out_size, mode="bilinear", align_corners=False
        )[0, 0]
