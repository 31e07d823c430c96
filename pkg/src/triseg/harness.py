"""Training loop, configuration, checkpointing, evaluation, and the
modality/path ablation drivers.

Everything stochastic is derived from ``RunConfig.seed`` through named
substreams, so identical configs reproduce loss trajectories and
evaluation reports bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .adapters import (
    FixtureAudioEmbedder,
    FixtureTextEmbedder,
    MockAudioEmbedder,
    MockTextEmbedder,
    RegionProposer,
    VisualFeatureEncoder,
)
from .episodes import (
    Episode,
    SyntheticDataset,
    SyntheticDatasetSpec,
    generate_synthetic_dataset,
    load_dataset,
    sample_episode,
    split_folds,
)
from .errors import CheckpointError, ConfigurationError, DivergenceError, SamplingError
from .fuse import MOD_AUDIO, MOD_TEXT, MOD_VISUAL
from .losses import MetricAccumulator
from .model import EpisodePreprocessor, SegmentationModel, episode_loss

logger = logging.getLogger(__name__)

# fields that must match between a checkpoint and the evaluating config
ARCH_FIELDS = ("embed_dim", "visual_dim", "dense_dim", "feature_stride", "image_size")

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class RunConfig:
    # dataset: either a directory produced by `gen-data` or synthetic-spec fields
    dataset_path: str | None = None
    payload_fixtures: str | None = None
    num_classes: int = 8
    image_size: int = 64
    samples_per_class: int = 20
    distractor_count: int = 2
    noise_level: float = 0.02
    data_seed: int = 0
    holdout_fraction: float = 0.25
    # protocol
    fold: int | None = 0
    shots: int = 1
    # dimensions
    embed_dim: int = 64
    visual_dim: int = 16
    dense_dim: int = 64
    feature_stride: int = 4
    # thresholds and loss weights
    tau_overlap: float = 0.5
    tau_temp: float = 0.07
    delta_text: float = 0.5
    delta_audio: float = 0.5
    lambda_weight: float = 0.2
    infonce_include_positive: bool = False
    audio_text_cosine: float = 0.6
    # modality dropout (training only)
    dropout_visual: float = 0.2
    dropout_text: float = 0.2
    dropout_audio: float = 0.2
    # modality / path switches
    use_visual: bool = True
    use_text: bool = True
    use_audio: bool = True
    use_semantic: bool = True
    use_geometric: bool = True
    # optimization
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 10
    episodes_per_epoch: int = 100
    eval_episodes: int = 40
    seed: int = 0

    def validate(self) -> None:
        if not (self.use_visual or self.use_text or self.use_audio):
            raise ConfigurationError("at least one modality must be enabled")
        if not (self.use_semantic or self.use_geometric):
            raise ConfigurationError("at least one reconstruction path must be enabled")
        if not 0.0 < self.tau_overlap < 1.0:
            raise ConfigurationError("tau_overlap must lie in (0, 1)")
        if self.tau_temp <= 0:
            raise ConfigurationError("tau_temp must be positive")
        for name in ("delta_text", "delta_audio"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [-1, 1]")
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise ConfigurationError("lambda_weight must lie in [0, 1]")
        if not -1.0 <= self.audio_text_cosine <= 1.0:
            raise ConfigurationError("audio_text_cosine must lie in [-1, 1]")
        for name in ("dropout_visual", "dropout_text", "dropout_audio"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigurationError("holdout_fraction must lie in (0, 1)")
        if self.shots < 0:
            raise ConfigurationError("shots must be >= 0")
        if self.fold is not None and not 0 <= self.fold <= 3:
            raise ConfigurationError("fold must be None or in [0, 3]")
        if self.image_size % self.feature_stride:
            raise ConfigurationError("image_size must be divisible by feature_stride")
        for name in ("embed_dim", "visual_dim", "dense_dim", "batch_size",
                     "epochs", "episodes_per_epoch", "eval_episodes",
                     "num_classes", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def arch_fingerprint(self) -> str:
        blob = json.dumps({k: getattr(self, k) for k in ARCH_FIELDS}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def dropout_rates(self) -> dict[str, float]:
        return {
            MOD_VISUAL: self.dropout_visual,
            MOD_TEXT: self.dropout_text,
            MOD_AUDIO: self.dropout_audio,
        }


def config_from_sources(file_path: str | Path | None = None, **overrides) -> RunConfig:
    """Defaults <- config file (TOML or JSON) <- explicit overrides."""
    values: dict = {}
    if file_path is not None:
        path = Path(file_path)
        if path.suffix == ".toml":
            try:
                import tomllib  # type: ignore[import-not-found]
            except ModuleNotFoundError:
                import tomli as tomllib
            data = tomllib.loads(path.read_text())
        elif path.suffix == ".json":
            data = json.loads(path.read_text())
        else:
            raise ConfigurationError(f"config file must be .toml or .json, got {path.name}")
        values.update(data)
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    config = RunConfig(**values)
    config.validate()
    return config


# ---------------------------------------------------------------------------
# Builders and seed plumbing
# ---------------------------------------------------------------------------

_SALT_MODEL, _SALT_EPISODES, _SALT_DROPOUT, _SALT_EVAL = 11, 101, 202, 303


def _substream(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([k & 0x7FFFFFFF for k in key]))


def build_dataset(config: RunConfig) -> SyntheticDataset:
    if config.dataset_path:
        return load_dataset(config.dataset_path)
    spec = SyntheticDatasetSpec(
        num_classes=config.num_classes,
        image_size=config.image_size,
        samples_per_class=config.samples_per_class,
        distractor_count=config.distractor_count,
        noise_level=config.noise_level,
        seed=config.data_seed,
    )
    return generate_synthetic_dataset(spec)


def build_model(config: RunConfig, dtype: torch.dtype = torch.float32) -> SegmentationModel:
    torch.manual_seed(int(_substream(config.seed, _SALT_MODEL).integers(2**63)))
    model = SegmentationModel(
        embed_dim=config.embed_dim,
        visual_dim=config.visual_dim,
        dense_dim=config.dense_dim,
        feature_stride=config.feature_stride,
        tau_overlap=config.tau_overlap,
        tau_temp=config.tau_temp,
        infonce_include_positive=config.infonce_include_positive,
        delta_text=config.delta_text,
        delta_audio=config.delta_audio,
        use_visual=config.use_visual,
        use_text=config.use_text,
        use_audio=config.use_audio,
        use_semantic=config.use_semantic,
        use_geometric=config.use_geometric,
    )
    if dtype == torch.float64:
        model.double()
    return model


def build_preprocessor(config: RunConfig, dtype: torch.dtype = torch.float32) -> EpisodePreprocessor:
    return EpisodePreprocessor(
        VisualFeatureEncoder(visual_dim=config.visual_dim, stride=config.feature_stride),
        RegionProposer(),
        dtype=dtype,
    )


def build_embedders(config: RunConfig, dataset: SyntheticDataset):
    if config.payload_fixtures:
        return (
            FixtureTextEmbedder(config.payload_fixtures),
            FixtureAudioEmbedder(config.payload_fixtures),
        )
    vocab = [dataset.class_names[c] for c in dataset.class_ids]
    return (
        MockTextEmbedder(vocab, config.embed_dim),
        MockAudioEmbedder(vocab, config.embed_dim, text_cosine=config.audio_text_cosine),
    )


@dataclass(frozen=True)
class SamplePools:
    """Which classes and which per-class sample indices each phase may touch."""

    train_classes: tuple[int, ...]
    eval_classes: tuple[int, ...]
    train_range: tuple[int, ...]  # per-class sample indices usable in training
    query_range: tuple[int, ...]  # eval query indices
    support_range: tuple[int, ...]  # eval support indices


def sample_pools(config: RunConfig, dataset: SyntheticDataset) -> SamplePools:
    # a loaded dataset must agree with the config the model is built from
    if dataset.image_size != config.image_size:
        raise ConfigurationError(
            f"dataset images are {dataset.image_size}px but config.image_size is "
            f"{config.image_size}; pass --image-size {dataset.image_size}"
        )
    n = dataset.spec.samples_per_class
    everything = tuple(range(n))
    if config.fold is not None:
        split = split_folds(dataset.class_ids, config.fold)
        # novel classes never appear in training, so evaluation may use
        # all their samples
        return SamplePools(
            train_classes=split.base_classes,
            eval_classes=split.novel_classes,
            train_range=everything,
            query_range=everything,
            support_range=everything,
        )
    n_hold = max(1, round(config.holdout_fraction * n))
    if n_hold >= n:
        raise ConfigurationError("holdout_fraction leaves no training samples")
    train_range = tuple(range(n - n_hold))
    return SamplePools(
        train_classes=dataset.class_ids,
        eval_classes=dataset.class_ids,
        train_range=train_range,
        query_range=tuple(range(n - n_hold, n)),
        support_range=train_range,
    )


def _draw_eval_episode(
    dataset: SyntheticDataset,
    class_id: int,
    shots: int,
    rng: np.random.Generator,
    query_pool: Sequence[int],
    support_pool: Sequence[int],
    text_embedder,
    audio_embedder,
) -> Episode:
    """Query from one pool, supports from another (never the query itself)."""
    if not query_pool:
        raise SamplingError("empty query pool")
    query_idx = query_pool[int(rng.integers(len(query_pool)))]
    candidates = [i for i in support_pool if i != query_idx]
    if len(candidates) < shots:
        raise SamplingError(
            f"class {class_id}: need {shots} supports, have {len(candidates)}"
        )
    picks = rng.choice(len(candidates), size=shots, replace=False) if shots else []
    samples = dataset.samples[class_id]
    name = dataset.class_names[class_id]
    query = samples[query_idx]
    return Episode(
        class_id=class_id,
        class_name=name,
        query_image=query.image,
        query_mask=query.mask,
        supports=[(samples[candidates[int(i)]].image, samples[candidates[int(i)]].mask) for i in picks],
        text_payload=text_embedder.embed_text(name),
        audio_payload=audio_embedder.embed_audio(name),
        query_index=query_idx,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    state_dict: dict
    config: dict
    config_fingerprint: str
    arch_fingerprint: str
    epoch: int
    rng_state: dict
    loss_history: list[dict] = field(default_factory=list)
    format_version: int = CHECKPOINT_FORMAT

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(dataclasses.asdict(self), path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        data = torch.load(Path(path), weights_only=False)
        if data.get("format_version") != CHECKPOINT_FORMAT:
            raise CheckpointError(
                f"checkpoint format {data.get('format_version')} != {CHECKPOINT_FORMAT}"
            )
        return cls(**data)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train(config: RunConfig, dataset: SyntheticDataset | None = None) -> Checkpoint:
    """Episodic training: sample -> decompose -> fuse (with modality
    dropout) -> reconstruct -> combined loss -> Adam step."""
    config.validate()
    if dataset is None:
        dataset = build_dataset(config)
    pools = sample_pools(config, dataset)
    text_emb, audio_emb = build_embedders(config, dataset)
    model = build_model(config)
    preproc = build_preprocessor(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    episode_rng = _substream(config.seed, _SALT_EPISODES)
    dropout_rng = _substream(config.seed, _SALT_DROPOUT)
    rates = config.dropout_rates()

    model.train()
    history: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        remaining = config.episodes_per_epoch
        while remaining > 0:
            batch = min(config.batch_size, remaining)
            remaining -= batch
            optimizer.zero_grad()
            batch_total = None
            parts = {"bce": 0.0, "dice": 0.0, "contrastive": 0.0}
            last_episode = None
            for _ in range(batch):
                class_id = pools.train_classes[
                    int(episode_rng.integers(len(pools.train_classes)))
                ]
                episode = sample_episode(
                    dataset,
                    class_id,
                    config.shots,
                    episode_rng,
                    text_embedder=text_emb,
                    audio_embedder=audio_emb,
                    sample_pool=pools.train_range,
                )
                last_episode = episode
                output = model.forward_episode(
                    preproc.prepare(episode), dropout_rng=dropout_rng, dropout_rates=rates
                )
                loss, breakdown = episode_loss(output, episode.query_mask, config.lambda_weight)
                batch_total = loss if batch_total is None else batch_total + loss
                parts["bce"] += breakdown.bce / batch
                parts["dice"] += breakdown.dice / batch
                parts["contrastive"] += breakdown.contrastive / batch
            batch_total = batch_total / batch
            if not torch.isfinite(batch_total.detach()):
                where = (
                    f"class {last_episode.class_id}, query {last_episode.query_index}"
                    if last_episode
                    else "unknown episode"
                )
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {step} ({where}), "
                    f"seed {config.seed}"
                )
            total_value = float(batch_total.detach())
            batch_total.backward()
            optimizer.step()
            history.append({"epoch": epoch, "step": step, "total": total_value, **parts})
            step += 1
        logger.info("epoch %d/%d: loss %.4f", epoch + 1, config.epochs, history[-1]["total"])

    return Checkpoint(
        state_dict=model.state_dict(),
        config=config.to_dict(),
        config_fingerprint=config.fingerprint(),
        arch_fingerprint=config.arch_fingerprint(),
        epoch=config.epochs,
        rng_state={
            "torch": torch.get_rng_state(),
            "episodes": episode_rng.bit_generator.state,
            "dropout": dropout_rng.bit_generator.state,
        },
        loss_history=history,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    fold: int | None
    shots: int
    seed: int
    split: str
    config_fingerprint: str
    modalities: dict[str, bool]
    paths: dict[str, bool]
    class_names: dict[int, str]
    per_class_iou: dict[int, float]
    miou: float
    fb_iou: float
    num_episodes: int

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        payload["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        payload["class_names"] = {str(k): v for k, v in self.class_names.items()}
        return json.dumps(payload, indent=2, sort_keys=True)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def restore_model(config: RunConfig, checkpoint: Checkpoint) -> SegmentationModel:
    if checkpoint.arch_fingerprint != config.arch_fingerprint():
        raise CheckpointError(
            "checkpoint was trained with a different architecture "
            f"({checkpoint.arch_fingerprint[:12]} != {config.arch_fingerprint()[:12]})"
        )
    model = build_model(config)
    model.load_state_dict(checkpoint.state_dict)
    model.eval()
    return model


def evaluate(
    config: RunConfig,
    checkpoint: Checkpoint,
    split: str = "eval",
    dataset: SyntheticDataset | None = None,
) -> EvalReport:
    """Deterministic episodic evaluation.

    ``split='eval'`` walks the fold's novel classes (or the held-out
    sample range when fold is None); ``split='train'`` measures the
    training pool instead.  Dropout is always disabled.
    """
    config.validate()
    if split not in ("eval", "train"):
        raise ConfigurationError(f"split must be 'eval' or 'train', got {split!r}")
    if dataset is None:
        dataset = build_dataset(config)
    pools = sample_pools(config, dataset)
    text_emb, audio_emb = build_embedders(config, dataset)
    model = restore_model(config, checkpoint)
    preproc = build_preprocessor(config)

    if split == "eval":
        classes = pools.eval_classes
        query_pool, support_pool = pools.query_range, pools.support_range
    else:
        classes = pools.train_classes
        query_pool = support_pool = pools.train_range

    rng = _substream(
        config.seed, _SALT_EVAL, config.shots,
        -1 if config.fold is None else config.fold,
        0 if split == "eval" else 1,
    )
    acc = MetricAccumulator()
    for i in range(config.eval_episodes):
        class_id = classes[i % len(classes)]
        episode = _draw_eval_episode(
            dataset, class_id, config.shots, rng, query_pool, support_pool,
            text_emb, audio_emb,
        )
        with torch.no_grad():
            output = model.forward_episode(preproc.prepare(episode))
        acc.add(class_id, output.predicted_mask(), episode.query_mask)

    return EvalReport(
        fold=config.fold,
        shots=config.shots,
        seed=config.seed,
        split=split,
        config_fingerprint=config.fingerprint(),
        modalities={
            "visual": config.use_visual,
            "text": config.use_text,
            "audio": config.use_audio,
        },
        paths={"semantic": config.use_semantic, "geometric": config.use_geometric},
        class_names={c: dataset.class_names[c] for c in sorted(set(classes))},
        per_class_iou=acc.per_class_iou(),
        miou=acc.miou(),
        fb_iou=acc.fb_iou(),
        num_episodes=config.eval_episodes,
    )


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

MODALITY_COMBOS: tuple[tuple[str, tuple[bool, bool, bool]], ...] = (
    ("visual+text+audio", (True, True, True)),
    ("visual+text", (True, True, False)),
    ("visual+audio", (True, False, True)),
    ("text+audio", (False, True, True)),
    ("visual", (True, False, False)),
    ("text", (False, True, False)),
    ("audio", (False, False, True)),
)

PATH_COMBOS: tuple[tuple[str, tuple[bool, bool]], ...] = (
    ("semantic+geometric", (True, True)),
    ("semantic", (True, False)),
    ("geometric", (False, True)),
)


@dataclass
class AblationRow:
    label: str
    report: EvalReport


def ablate(
    config: RunConfig,
    checkpoint: Checkpoint,
    axis: str,
    dataset: SyntheticDataset | None = None,
) -> list[AblationRow]:
    """Re-evaluate one trained checkpoint across modality or path combos.

    The episode stream depends only on (seed, shots, fold), so every row
    sees the same episodes and rows are directly comparable.
    """
    if dataset is None:
        dataset = build_dataset(config)
    rows = []
    if axis == "modalities":
        for label, (v, t, a) in MODALITY_COMBOS:
            cfg = dataclasses.replace(config, use_visual=v, use_text=t, use_audio=a)
            rows.append(AblationRow(label, evaluate(cfg, checkpoint, dataset=dataset)))
    elif axis == "paths":
        for label, (s, g) in PATH_COMBOS:
            cfg = dataclasses.replace(config, use_semantic=s, use_geometric=g)
            rows.append(AblationRow(label, evaluate(cfg, checkpoint, dataset=dataset)))
    else:
        raise ConfigurationError(f"axis must be 'modalities' or 'paths', got {axis!r}")
    return rows


def ablation_table(rows: list[AblationRow]) -> str:
    width = max(len(r.label) for r in rows)
    lines = [f"{'configuration':<{width}}  {'mIoU':>7}  {'FB-IoU':>7}"]
    for r in rows:
        lines.append(f"{r.label:<{width}}  {r.report.miou:7.4f}  {r.report.fb_iou:7.4f}")
    return "\n".join(lines)
