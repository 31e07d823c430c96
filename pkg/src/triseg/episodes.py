"""Episodic data model: 4-fold class splits, episode sampling, and a
deterministic synthetic shapes dataset used for desk-scale runs.

Every class owns a shape geometry, a color, and a texture, so the frozen
mock feature encoder produces class-discriminative prototypes.  Images
carry exactly one target shape plus non-overlapping distractors; masks
are the rasterized target pixels, nothing else.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .adapters import MockAudioEmbedder, MockTextEmbedder, TextPayload
from .errors import DatasetSpecError, ProtocolError, SamplingError

NUM_FOLDS = 4

SHAPE_KINDS = ("circle", "square", "triangle", "diamond", "ring", "cross", "ellipse")

_CLASS_COLORS = (
    ("red", (0.85, 0.15, 0.15)),
    ("green", (0.15, 0.75, 0.20)),
    ("blue", (0.20, 0.30, 0.85)),
    ("yellow", (0.85, 0.80, 0.15)),
    ("magenta", (0.80, 0.20, 0.80)),
    ("cyan", (0.15, 0.80, 0.80)),
    ("orange", (0.90, 0.55, 0.10)),
    ("purple", (0.50, 0.20, 0.70)),
    ("teal", (0.10, 0.55, 0.50)),
    ("pink", (0.95, 0.60, 0.70)),
    ("lime", (0.60, 0.90, 0.20)),
    ("navy", (0.10, 0.15, 0.50)),
)

_DISTRACTOR_COLORS = (
    (0.60, 0.60, 0.60),
    (0.35, 0.40, 0.45),
    (0.45, 0.45, 0.25),
    (0.65, 0.55, 0.40),
)

_BACKGROUND = (0.12, 0.13, 0.15)


@dataclass(frozen=True)
class ClassSplit:
    """Base/novel partition of the class list for one evaluation fold."""

    fold_index: int
    base_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]


def split_folds(all_class_ids: Sequence[int], fold_index: int) -> ClassSplit:
    """Partition classes into base/novel for a fold.

    Novel classes are the fold's contiguous block of the (ordered) class
    list; with 20 classes that is classes 5i+1..5(i+1) for fold i.
    """
    ids = tuple(all_class_ids)
    if not 0 <= fold_index < NUM_FOLDS:
        raise ProtocolError(f"fold_index must be in [0, {NUM_FOLDS - 1}], got {fold_index}")
    if len(ids) % NUM_FOLDS:
        raise ProtocolError(
            f"class count {len(ids)} is not divisible by {NUM_FOLDS} folds"
        )
    block = len(ids) // NUM_FOLDS
    novel = ids[fold_index * block : (fold_index + 1) * block]
    base = ids[: fold_index * block] + ids[(fold_index + 1) * block :]
    return ClassSplit(fold_index=fold_index, base_classes=base, novel_classes=novel)


# ---------------------------------------------------------------------------
# Synthetic shapes dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 8
    image_size: int = 64
    samples_per_class: int = 20
    distractor_count: int = 2
    noise_level: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise DatasetSpecError("num_classes must be >= 1")
        if self.samples_per_class < 1:
            raise DatasetSpecError("samples_per_class must be >= 1")
        if self.distractor_count < 0:
            raise DatasetSpecError("distractor_count must be >= 0")
        if not 0.0 <= self.noise_level < 0.2:
            raise DatasetSpecError("noise_level must lie in [0, 0.2)")
        if self.image_size < 16:
            raise DatasetSpecError("image_size must be >= 16")
        # rough packing bound: target bbox + distractor bboxes must fit
        area = self.image_size**2
        demand = 0.35 * area + self.distractor_count * 0.12 * area
        if demand > 0.9 * area:
            raise DatasetSpecError(
                f"image_size {self.image_size} too small for "
                f"{self.distractor_count} distractors plus a target shape"
            )


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1], quantized to 8-bit levels
    mask: np.ndarray  # (H, W) bool, exactly the target-shape pixels
    shape_kind: str
    center: tuple[int, int]  # (row, col)
    size: int


@dataclass
class SyntheticDataset:
    spec: SyntheticDatasetSpec
    class_ids: tuple[int, ...]
    class_names: dict[int, str]
    samples: dict[int, list[SyntheticSample]] = field(repr=False)

    @property
    def image_size(self) -> int:
        return self.spec.image_size

    def name_of(self, class_id: int) -> str:
        return self.class_names[class_id]


def rasterize_shape(kind: str, center: tuple[int, int], size: int, image_size: int) -> np.ndarray:
    """Boolean mask of one shape on an image_size² canvas. Pure and reusable
    as the re-render oracle for generated masks."""
    cy, cx = center
    r = size
    yy, xx = np.ogrid[:image_size, :image_size]
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "triangle":
        # upright isoceles: apex at cy - r, base at cy + r
        t = (dy + r) / (2 * r)
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= t * r)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= round(1.35 * r)
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        arm = max(1, round(0.35 * r))
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    if kind == "ellipse":
        b = max(2, round(0.6 * r))
        return (dx / r) ** 2 + (dy / b) ** 2 <= 1.0
    raise DatasetSpecError(f"unknown shape kind {kind!r}")


def _apply_texture(image: np.ndarray, mask: np.ndarray, class_index: int) -> None:
    """Class-specific texture modulation inside the shape (in place)."""
    yy, xx = np.nonzero(mask)
    if class_index % 3 == 1:
        mod = (((yy // 2) + (xx // 2)) % 2).astype(np.float64) * 0.12 - 0.06
    elif class_index % 3 == 2:
        mod = ((yy // 3) % 2).astype(np.float64) * 0.12 - 0.06
    else:
        return
    image[yy, xx, :] = np.clip(image[yy, xx, :] + mod[:, None], 0.0, 1.0)


def _class_style(index: int) -> tuple[str, str, tuple[float, float, float]]:
    color_name, color = _CLASS_COLORS[index % len(_CLASS_COLORS)]
    kind = SHAPE_KINDS[index % len(SHAPE_KINDS)]
    return color_name, kind, color


def _bbox(center: tuple[int, int], size: int) -> tuple[int, int, int, int]:
    cy, cx = center
    r = math.ceil(1.4 * size) + 1
    return cy - r, cy + r, cx - r, cx + r


def _boxes_overlap(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> bool:
    return not (a[1] < b[0] or b[1] < a[0] or a[3] < b[2] or b[3] < a[2])


def _render_sample(
    spec: SyntheticDatasetSpec, class_index: int, sample_index: int
) -> SyntheticSample:
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, class_index, sample_index])
    )
    s = spec.image_size
    _, kind, color = _class_style(class_index)

    image = np.empty((s, s, 3), dtype=np.float64)
    image[:] = np.asarray(_BACKGROUND) + rng.uniform(-0.02, 0.02, size=3)

    size = int(rng.integers(round(0.16 * s), round(0.26 * s) + 1))
    margin = math.ceil(1.4 * size) + 1
    cy = int(rng.integers(margin, s - margin))
    cx = int(rng.integers(margin, s - margin))
    target_mask = rasterize_shape(kind, (cy, cx), size, s)
    boxes = [_bbox((cy, cx), size)]

    for _ in range(spec.distractor_count):
        for _attempt in range(50):
            d_kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
            d_size = int(rng.integers(max(3, round(0.08 * s)), round(0.14 * s) + 1))
            d_margin = math.ceil(1.4 * d_size) + 1
            dy = int(rng.integers(d_margin, s - d_margin))
            dx = int(rng.integers(d_margin, s - d_margin))
            box = _bbox((dy, dx), d_size)
            if any(_boxes_overlap(box, other) for other in boxes):
                continue
            d_color = _DISTRACTOR_COLORS[int(rng.integers(len(_DISTRACTOR_COLORS)))]
            d_mask = rasterize_shape(d_kind, (dy, dx), d_size, s)
            image[d_mask] = d_color
            boxes.append(box)
            break

    image[target_mask] = color
    _apply_texture(image, target_mask, class_index)
    if spec.noise_level > 0:
        image += rng.normal(0.0, spec.noise_level, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    # quantize to 8-bit levels so the PNG round trip is lossless
    image = np.rint(image * 255.0) / 255.0
    return SyntheticSample(
        image=image.astype(np.float32),
        mask=target_mask,
        shape_kind=kind,
        center=(cy, cx),
        size=size,
    )


def generate_synthetic_dataset(spec: SyntheticDatasetSpec) -> SyntheticDataset:
    spec.validate()
    class_ids = tuple(range(1, spec.num_classes + 1))
    names: dict[int, str] = {}
    used: set[str] = set()
    for i, cid in enumerate(class_ids):
        color_name, kind, _ = _class_style(i)
        name = f"{color_name}-{kind}"
        if name in used:
            name = f"{name}-{cid}"
        used.add(name)
        names[cid] = name
    samples = {
        cid: [_render_sample(spec, i, j) for j in range(spec.samples_per_class)]
        for i, cid in enumerate(class_ids)
    }
    return SyntheticDataset(spec=spec, class_ids=class_ids, class_names=names, samples=samples)


# ---------------------------------------------------------------------------
# On-disk format: one directory per class, PNG images/masks, JSON manifest
# ---------------------------------------------------------------------------


def save_dataset(
    dataset: SyntheticDataset, root: str | Path, payload_fixtures: str | None = None
) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "image_size": dataset.image_size,
        "spec": {
            "num_classes": dataset.spec.num_classes,
            "image_size": dataset.spec.image_size,
            "samples_per_class": dataset.spec.samples_per_class,
            "distractor_count": dataset.spec.distractor_count,
            "noise_level": dataset.spec.noise_level,
            "seed": dataset.spec.seed,
        },
        "payload_fixtures": payload_fixtures,
        "classes": [],
    }
    for cid in dataset.class_ids:
        cdir = root / f"{cid:02d}_{dataset.class_names[cid]}"
        cdir.mkdir(exist_ok=True)
        entries = []
        for j, sample in enumerate(dataset.samples[cid]):
            img_name, mask_name = f"img_{j:03d}.png", f"mask_{j:03d}.png"
            Image.fromarray(
                np.rint(sample.image * 255.0).astype(np.uint8)
            ).save(cdir / img_name)
            Image.fromarray(
                (sample.mask.astype(np.uint8)) * 255
            ).save(cdir / mask_name)
            entries.append(
                {
                    "image": img_name,
                    "mask": mask_name,
                    "shape_kind": sample.shape_kind,
                    "center": list(sample.center),
                    "size": sample.size,
                }
            )
        manifest["classes"].append(
            {"id": cid, "name": dataset.class_names[cid], "dir": cdir.name, "samples": entries}
        )
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_dataset(root: str | Path) -> SyntheticDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = SyntheticDatasetSpec(**manifest["spec"])
    class_ids, names, samples = [], {}, {}
    for entry in manifest["classes"]:
        cid = int(entry["id"])
        class_ids.append(cid)
        names[cid] = entry["name"]
        cdir = root / entry["dir"]
        loaded = []
        for rec in entry["samples"]:
            img = np.asarray(Image.open(cdir / rec["image"]), dtype=np.float32) / 255.0
            mask = np.asarray(Image.open(cdir / rec["mask"])) > 127
            loaded.append(
                SyntheticSample(
                    image=img,
                    mask=mask,
                    shape_kind=rec["shape_kind"],
                    center=tuple(rec["center"]),
                    size=int(rec["size"]),
                )
            )
        samples[cid] = loaded
    return SyntheticDataset(
        spec=spec, class_ids=tuple(class_ids), class_names=names, samples=samples
    )


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    """One few-shot task: a query to segment plus K labeled supports and
    the category's text/audio payloads."""

    class_id: int
    class_name: str
    query_image: np.ndarray
    query_mask: np.ndarray
    supports: list[tuple[np.ndarray, np.ndarray]]
    text_payload: TextPayload | None
    audio_payload: np.ndarray | None
    query_index: int = -1

    @property
    def shots(self) -> int:
        return len(self.supports)


def default_embedders(
    dataset: SyntheticDataset, embed_dim: int, audio_text_cosine: float = 0.6
) -> tuple[MockTextEmbedder, MockAudioEmbedder]:
    vocab = [dataset.class_names[c] for c in dataset.class_ids]
    return (
        MockTextEmbedder(vocab, embed_dim),
        MockAudioEmbedder(vocab, embed_dim, text_cosine=audio_text_cosine),
    )


def sample_episode(
    dataset: SyntheticDataset,
    class_id: int,
    shots: int,
    rng: np.random.Generator,
    text_embedder: MockTextEmbedder | None = None,
    audio_embedder: MockAudioEmbedder | None = None,
    payload_dim: int = 64,
    sample_pool: Sequence[int] | None = None,
) -> Episode:
    """Draw a query plus ``shots`` distinct supports of one class.

    The query is never among the supports.  ``sample_pool`` restricts the
    candidate sample indices (used to keep held-out samples out of
    training episodes).
    """
    if class_id not in dataset.samples:
        raise SamplingError(f"unknown class id {class_id}")
    all_samples = dataset.samples[class_id]
    pool = list(sample_pool) if sample_pool is not None else list(range(len(all_samples)))
    if len(pool) < shots + 1:
        raise SamplingError(
            f"class {class_id} has {len(pool)} usable samples; need {shots + 1}"
        )
    picks = rng.choice(len(pool), size=shots + 1, replace=False)
    query_idx = pool[int(picks[0])]
    support_idx = [pool[int(i)] for i in picks[1:]]

    if text_embedder is None or audio_embedder is None:
        t, a = default_embedders(dataset, payload_dim)
        text_embedder = text_embedder or t
        audio_embedder = audio_embedder or a

    name = dataset.class_names[class_id]
    query = all_samples[query_idx]
    if not query.mask.any():
        raise SamplingError(f"sample {query_idx} of class {class_id} has an empty mask")
    return Episode(
        class_id=class_id,
        class_name=name,
        query_image=query.image,
        query_mask=query.mask,
        supports=[(all_samples[i].image, all_samples[i].mask) for i in support_idx],
        text_payload=text_embedder.embed_text(name),
        audio_payload=audio_embedder.embed_audio(name),
        query_index=query_idx,
    )
