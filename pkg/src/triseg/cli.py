"""Command-line interface.

Subcommands: gen-data, train, eval, ablate, dump-priors.  Flags mirror
RunConfig fields; a TOML/JSON config file may supply any of them, with
explicit flags taking precedence.  Exit codes: 0 success, 2 config
error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .episodes import SyntheticDatasetSpec, generate_synthetic_dataset, save_dataset
from .errors import (
    CheckpointError,
    ConfigurationError,
    DatasetSpecError,
    DivergenceError,
    ProtocolError,
)
from .harness import (
    Checkpoint,
    RunConfig,
    ablate,
    ablation_table,
    build_dataset,
    build_embedders,
    build_preprocessor,
    config_from_sources,
    evaluate,
    restore_model,
    sample_pools,
    train,
    _draw_eval_episode,
    _substream,
    _SALT_EVAL,
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("run configuration")
    g.add_argument("--config", type=str, help="TOML or JSON config file")
    g.add_argument("--dataset", dest="dataset_path", type=str, help="dataset directory")
    g.add_argument("--fixtures", dest="payload_fixtures", type=str,
                   help="directory of precomputed embedding fixtures")
    g.add_argument("--num-classes", dest="num_classes", type=int)
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    g.add_argument("--distractors", dest="distractor_count", type=int)
    g.add_argument("--noise", dest="noise_level", type=float)
    g.add_argument("--data-seed", dest="data_seed", type=int)
    g.add_argument("--holdout", dest="holdout_fraction", type=float)
    g.add_argument("--fold", type=int, help="fold index 0-3, or -1 for no class split")
    g.add_argument("--shots", type=int)
    g.add_argument("--dim", dest="embed_dim", type=int)
    g.add_argument("--visual-dim", dest="visual_dim", type=int)
    g.add_argument("--dense-dim", dest="dense_dim", type=int)
    g.add_argument("--stride", dest="feature_stride", type=int)
    g.add_argument("--tau-overlap", dest="tau_overlap", type=float)
    g.add_argument("--tau-temp", dest="tau_temp", type=float)
    g.add_argument("--delta-text", dest="delta_text", type=float)
    g.add_argument("--delta-audio", dest="delta_audio", type=float)
    g.add_argument("--lambda", dest="lambda_weight", type=float)
    g.add_argument("--include-positive", dest="infonce_include_positive",
                   action="store_const", const=True,
                   help="use the denominator form that includes the positive pair")
    g.add_argument("--audio-cosine", dest="audio_text_cosine", type=float)
    g.add_argument("--dropout-visual", dest="dropout_visual", type=float)
    g.add_argument("--dropout-text", dest="dropout_text", type=float)
    g.add_argument("--dropout-audio", dest="dropout_audio", type=float)
    g.add_argument("--drop-visual", action="store_const", const=True,
                   help="disable the visual modality")
    g.add_argument("--drop-text", action="store_const", const=True,
                   help="disable the text modality")
    g.add_argument("--drop-audio", action="store_const", const=True,
                   help="disable the audio modality")
    g.add_argument("--no-semantic", action="store_const", const=True,
                   help="disable the semantic reconstruction path")
    g.add_argument("--no-geometric", action="store_const", const=True,
                   help="disable the geometric reconstruction path")
    g.add_argument("--lr", dest="learning_rate", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--episodes-per-epoch", dest="episodes_per_epoch", type=int)
    g.add_argument("--eval-episodes", dest="eval_episodes", type=int)
    g.add_argument("--seed", type=int)


_FLAG_INVERSIONS = {
    "drop_visual": "use_visual",
    "drop_text": "use_text",
    "drop_audio": "use_audio",
    "no_semantic": "use_semantic",
    "no_geometric": "use_geometric",
}


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    config_fields = {f.name for f in RunConfig.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    for key, value in vars(args).items():
        if key in _FLAG_INVERSIONS:
            if value:
                overrides[_FLAG_INVERSIONS[key]] = False
        elif key in config_fields and value is not None:
            overrides[key] = value
    if overrides.get("fold") == -1:
        overrides["fold"] = None
    return config_from_sources(getattr(args, "config", None), **overrides)


def _cmd_gen_data(args: argparse.Namespace) -> int:
    spec = SyntheticDatasetSpec(
        num_classes=args.num_classes if args.num_classes is not None else 8,
        image_size=args.image_size if args.image_size is not None else 64,
        samples_per_class=args.samples_per_class if args.samples_per_class is not None else 20,
        distractor_count=args.distractor_count if args.distractor_count is not None else 2,
        noise_level=args.noise_level if args.noise_level is not None else 0.02,
        seed=args.data_seed if args.data_seed is not None else 0,
    )
    dataset = generate_synthetic_dataset(spec)
    root = save_dataset(dataset, args.out)
    n = sum(len(v) for v in dataset.samples.values())
    print(f"wrote {n} samples across {len(dataset.class_ids)} classes to {root}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    checkpoint = train(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = checkpoint.save(out / "checkpoint.pt")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    (out / "loss_history.json").write_text(json.dumps(checkpoint.loss_history, indent=2))
    final = checkpoint.loss_history[-1]["total"] if checkpoint.loss_history else float("nan")
    print(f"trained {config.epochs} epochs, final loss {final:.4f}; checkpoint at {ckpt_path}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    checkpoint = Checkpoint.load(args.checkpoint)
    report = evaluate(config, checkpoint, split=args.split)
    print(f"mIoU {report.miou:.4f}  FB-IoU {report.fb_iou:.4f}  "
          f"({report.num_episodes} episodes, split={report.split})")
    for cid, val in report.per_class_iou.items():
        print(f"  class {cid} ({report.class_names.get(cid, '?')}): IoU {val:.4f}")
    if args.out:
        path = report.save(Path(args.out) / "report.json")
        print(f"report written to {path}")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    checkpoint = Checkpoint.load(args.checkpoint)
    rows = ablate(config, checkpoint, axis=args.axis)
    print(ablation_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for row in rows:
            row.report.save(out / f"{args.axis}_{row.label.replace('+', '_')}.json")
        combined = [
            {"label": r.label, "miou": r.report.miou, "fb_iou": r.report.fb_iou}
            for r in rows
        ]
        (out / f"{args.axis}_summary.json").write_text(json.dumps(combined, indent=2))
        print(f"reports written to {out}")
    return 0


def _cmd_dump_priors(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.image as mpimg

    config = _config_from_args(args)
    checkpoint = Checkpoint.load(args.checkpoint)
    dataset = build_dataset(config)
    pools = sample_pools(config, dataset)
    text_emb, audio_emb = build_embedders(config, dataset)
    model = restore_model(config, checkpoint)
    preproc = build_preprocessor(config)
    rng = _substream(config.seed, _SALT_EVAL, config.shots,
                     -1 if config.fold is None else config.fold, 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.episodes):
        class_id = pools.eval_classes[i % len(pools.eval_classes)]
        episode = _draw_eval_episode(
            dataset, class_id, config.shots, rng,
            pools.query_range, pools.support_range, text_emb, audio_emb,
        )
        with torch.no_grad():
            output = model.forward_episode(preproc.prepare(episode))
        stem = out / f"ep{i:03d}_class{class_id}_{episode.class_name}"
        mpimg.imsave(f"{stem}_query.png", episode.query_image)
        mpimg.imsave(f"{stem}_mask.png", episode.query_mask, cmap="gray", vmin=0, vmax=1)
        maps = {
            "prior_visual": output.prompts.visual_prior,
            "prior_text": output.prompts.text_prior,
            "prior_audio": output.prompts.audio_prior,
            "initial": torch.sigmoid(output.initial_logits),
            "refined": torch.sigmoid(output.refined_logits),
        }
        for name, tensor in maps.items():
            mpimg.imsave(
                f"{stem}_{name}.png",
                np.asarray(tensor, dtype=np.float64),
                cmap="viridis", vmin=0.0, vmax=1.0,
            )
    print(f"wrote prior/mask heatmaps for {args.episodes} episodes to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triseg",
        description="Tri-modal few-shot segmentation: synthetic data, training, "
        "evaluation, and ablations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    p.add_argument("--distractors", dest="distractor_count", type=int)
    p.add_argument("--noise", dest="noise_level", type=float)
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train on episodic synthetic data")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory for the checkpoint")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["eval", "train"], default="eval")
    p.add_argument("--out", help="directory for report.json")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="modality or path ablations of a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--axis", choices=["modalities", "paths"], required=True)
    p.add_argument("--out", help="directory for per-row reports")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("dump-priors", help="save prior/mask heatmaps per episode")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dump_priors)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ProtocolError, DatasetSpecError, CheckpointError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
