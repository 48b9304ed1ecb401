"""Command-line interface.

Subcommands cover the full workflow: corpus ingestion (or synthetic corpus
generation), episodic training, conditional-NLL evaluation on held-out and
transfer data, few-shot classification, conditioned sampling grids, and
adaptation diagnostics. Every run directory gets a ``manifest.json`` with the
resolved configuration and content hashes of its inputs and outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from . import evaluate as eval_mod
from . import synth as synth_mod
from .data import IngestError, load_dataset, sha256_file
from .model import GMNConfig
from .train import (
    CheckpointError,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    load_model,
)

logger = logging.getLogger("genmatch")

_MODEL_FIELDS = [f.name for f in fields(GMNConfig)]
_TRAIN_FIELDS = [
    "steps", "episodes_per_batch", "learning_rate", "grad_clip",
    "ema_decay", "seed", "deterministic", "checkpoint_every", "log_every",
]


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model config")
    group.add_argument("--latent-dim", type=int)
    group.add_argument("--embed-dim", type=int)
    group.add_argument("--episode-len", type=int)
    group.add_argument("--classes-per-episode", type=int)
    group.add_argument("--match-steps", type=int)
    group.add_argument("--prior-steps", type=int)
    group.add_argument("--pseudo-count", type=int, choices=(0, 1))
    group.add_argument("--variant", choices=("full", "no_attention", "vae"))
    group.add_argument("--prior-mode", choices=("data_dependent", "standard_normal"))
    group.add_argument("--width", type=float)


def _resolve_train_config(
    args: argparse.Namespace, parser: argparse.ArgumentParser
) -> TrainConfig:
    """Defaults, then the optional config file, then explicit flags."""
    merged: dict = {"model": {}}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config file: {exc}")
        if not isinstance(loaded, dict):
            parser.error("config file must hold a JSON object")
        merged.update(loaded)
        merged["model"] = dict(loaded.get("model", {}))
    for name in _MODEL_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            merged["model"][name] = value
    for name in _TRAIN_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    try:
        model_cfg = GMNConfig.from_dict(merged.pop("model"))
        return TrainConfig(model=model_cfg, **merged)
    except (TypeError, ValueError) as exc:
        parser.error(f"invalid configuration: {exc}")


def _write_manifest(out_dir: Path, payload: dict) -> Path:
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _load_checkpoint_model(path_str: str):
    path = Path(path_str)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    model, payload = load_model(path)
    return model, payload, {"path": str(path), "sha256": sha256_file(path)}


def _dataset_info(path_str: str) -> tuple:
    path = Path(path_str)
    if not path.exists():
        raise IngestError(f"{path}: no such data cache")
    dataset = load_dataset(path)
    return dataset, {"path": str(path), "sha256": sha256_file(path),
                     "split": dataset.split, "classes": dataset.n_classes}


# ------------------------------------------------------------------- commands


def _cmd_ingest_omniglot(args, parser) -> int:
    manifest = data_mod.ingest_omniglot(args.source, args.out)
    logger.info("wrote caches under %s", args.out)
    print(json.dumps(manifest["splits"], indent=2))
    return 0


def _cmd_ingest_mnist(args, parser) -> int:
    manifest = data_mod.ingest_mnist(args.source, args.out, args.seed)
    logger.info("wrote %s (%d images)", manifest["cache"], manifest["images"])
    return 0


def _cmd_synth_data(args, parser) -> int:
    out = Path(args.out)
    raw = out / "raw"
    expected_train, expected_test = synth_mod.write_synthetic_omniglot(
        raw,
        train_alphabets=args.train_alphabets,
        test_alphabets=args.test_alphabets,
        classes_per_alphabet=args.classes_per_alphabet,
        seed=args.seed,
    )
    cache = out / "cache"
    data_mod.ingest_omniglot(raw, cache, expected_train, expected_test)
    mnist_raw = out / "mnist_raw"
    count = synth_mod.write_synthetic_mnist(
        mnist_raw, images_per_class=args.mnist_per_class, seed=args.seed + 1
    )
    data_mod.ingest_mnist(mnist_raw, cache, args.seed + 2, expected_images=count)
    logger.info("synthetic corpus ready under %s", cache)
    print(f"caches: {cache}/omniglot_train.gmd {cache}/omniglot_test.gmd"
          f" {cache}/mnist_test.gmd")
    return 0


def _cmd_train(args, parser) -> int:
    config = _resolve_train_config(args, parser)
    dataset, data_info = _dataset_info(args.data)
    out_dir = Path(args.out)
    trainer = Trainer(config, dataset, out_dir)
    if args.resume:
        trainer.restore(args.resume)
        logger.info("resumed from %s at step %d", args.resume, trainer.step)
    final = trainer.run()
    manifest = _write_manifest(out_dir, {
        "command": "train",
        "config": config.asdict(),
        "data": data_info,
        "checkpoint": {"path": str(final), "sha256": sha256_file(final)},
        "metrics": trainer.metrics_path.name,
    })
    logger.info("final checkpoint %s; manifest %s", final, manifest)
    return 0


def _eval_nll_common(args, parser, expect_mnist: bool) -> int:
    model, payload, ckpt_info = _load_checkpoint_model(args.checkpoint)
    dataset, data_info = _dataset_info(args.data)
    is_mnist = dataset.split.startswith("mnist")
    if expect_mnist and not is_mnist:
        parser.error(f"--data split is {dataset.split!r}, expected an mnist cache")
    if not expect_mnist and is_mnist:
        parser.error("use eval-mnist for mnist caches")
    min_cond = args.min_cond
    if min_cond is None:
        min_cond = 0 if (model.config.pseudo_count or model.config.variant == "vae") else 1
    curve = eval_mod.nll_curve(
        model, dataset,
        episodes=args.episodes, length=args.length,
        classes_per_episode=args.c_test, n_samples=args.samples,
        seed=args.seed, min_cond=min_cond,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "nll.csv"
    eval_mod.write_nll_csv(csv_path, curve)
    _write_manifest(out_dir, {
        "command": "eval-mnist" if expect_mnist else "eval-nll",
        "checkpoint": ckpt_info,
        "data": data_info,
        "episodes": curve.episodes,
        "samples": curve.n_samples,
        "c_test": curve.classes_per_episode,
        "seed": args.seed,
        "outputs": [csv_path.name],
    })
    for t, mean, se in zip(curve.positions, curve.mean, curve.se):
        print(f"t={t}: nll {mean:.2f} +- {se:.2f}")
    return 0


def _cmd_eval_nll(args, parser) -> int:
    return _eval_nll_common(args, parser, expect_mnist=False)


def _cmd_eval_mnist(args, parser) -> int:
    return _eval_nll_common(args, parser, expect_mnist=True)


def _cmd_classify(args, parser) -> int:
    model, payload, ckpt_info = _load_checkpoint_model(args.checkpoint)
    dataset, data_info = _dataset_info(args.data)
    result = eval_mod.few_shot_eval(
        model, dataset,
        ways=args.ways, shots=args.shots, trials=args.trials,
        method=args.method, n_samples=args.samples, seed=args.seed,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "accuracy": result.accuracy,
        "se": result.se,
        "trials": result.trials,
        "ways": args.ways,
        "shots": args.shots,
        "method": args.method,
    }
    (out_dir / "classification.json").write_text(
        json.dumps(summary, indent=2) + "\n"
    )
    _write_manifest(out_dir, {
        "command": "classify",
        "checkpoint": ckpt_info,
        "data": data_info,
        "seed": args.seed,
        "result": summary,
        "outputs": ["classification.json"],
    })
    print(
        f"{args.ways}-way {args.shots}-shot ({args.method}):"
        f" {100 * result.accuracy:.1f}% +- {100 * result.se:.1f}%"
    )
    return 0


def _render_grid(
    revealed: np.ndarray, sample_rows: list[np.ndarray | None], start: int
) -> np.ndarray:
    """Grid image: column 0 shows the revealed input per row, the remaining
    columns show samples conditioned on everything revealed so far."""
    pad, sep = 2, 4
    cell = data_mod.IMAGE_SIDE
    n_rows = len(sample_rows)
    n_cols = 1 + max(s.shape[0] for s in sample_rows if s is not None)
    height = n_rows * (cell + pad) + pad
    width = n_cols * (cell + pad) + pad + sep
    canvas = np.full((height, width), 255, dtype=np.uint8)
    canvas[:, cell + 2 * pad : cell + 2 * pad + sep] = 128
    for row, samples in enumerate(sample_rows):
        y = pad + row * (cell + pad)
        t = start + row
        if t >= 1:
            glyph = revealed[t - 1]
            canvas[y : y + cell, pad : pad + cell] = 255 - 255 * glyph
        if samples is not None:
            for col in range(samples.shape[0]):
                x = pad + sep + (col + 1) * (cell + pad)
                canvas[y : y + cell, x : x + cell] = 255 - 255 * samples[col]
    return canvas


def _cmd_sample(args, parser) -> int:
    model, payload, ckpt_info = _load_checkpoint_model(args.checkpoint)
    dataset, data_info = _dataset_info(args.data)
    rng = np.random.default_rng(args.seed)
    episode = data_mod.sample_episode(dataset, args.episode_len, args.c_test, rng)
    generator = torch.Generator().manual_seed(args.seed)
    start = 0 if (model.config.pseudo_count or model.config.variant == "vae") else 1
    sample_rows = []
    with torch.no_grad():
        for t in range(start, args.episode_len + 1):
            cond = torch.from_numpy(episode.images[:t]).to(model.dtype).unsqueeze(0)
            samples, _ = model.generate(cond, args.n_samples, generator)
            sample_rows.append(
                samples.squeeze(0).cpu().numpy().astype(np.uint8)
            )
    grid = _render_grid(episode.images, sample_rows, start)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid, mode="L").save(out_path)
    _write_manifest(out_path.parent, {
        "command": "sample",
        "checkpoint": ckpt_info,
        "data": data_info,
        "seed": args.seed,
        "episode_len": args.episode_len,
        "n_samples": args.n_samples,
        "outputs": [out_path.name],
    })
    logger.info("wrote %s", out_path)
    return 0


def _cmd_diagnostics(args, parser) -> int:
    model, payload, ckpt_info = _load_checkpoint_model(args.checkpoint)
    dataset, data_info = _dataset_info(args.data)
    positions, entropy = eval_mod.prior_entropy_curve(
        model, dataset,
        episodes=args.episodes, length=args.length,
        classes_per_episode=args.c_test, seed=args.seed,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    entropy_path = out_dir / "prior_entropy.csv"
    with entropy_path.open("w", newline="") as fh:
        fh.write("t," + ",".join(str(t) for t in positions) + "\n")
        fh.write("entropy," + ",".join(f"{v:.6f}" for v in entropy) + "\n")
    outputs.append(entropy_path.name)
    if args.metrics:
        records = [
            json.loads(line)
            for line in Path(args.metrics).read_text().splitlines()
            if line.strip()
        ]
        elbo_path = out_dir / "per_t_elbo.csv"
        with elbo_path.open("w", newline="") as fh:
            width = len(records[-1]["per_t_elbo_ema"]) if records else 0
            fh.write("step," + ",".join(f"t{t}" for t in range(width)) + "\n")
            for rec in records:
                fh.write(
                    f"{rec['step']},"
                    + ",".join(f"{v:.4f}" for v in rec["per_t_elbo_ema"])
                    + "\n"
                )
        outputs.append(elbo_path.name)
    _write_manifest(out_dir, {
        "command": "diagnostics",
        "checkpoint": ckpt_info,
        "data": data_info,
        "seed": args.seed,
        "outputs": outputs,
    })
    for t, v in zip(positions, entropy):
        print(f"t={t}: prior entropy {v:.3f}")
    return 0


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genmatch",
        description="Conditional generation from small conditioning sets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-omniglot", help="build binary caches from a glyph tree")
    p.add_argument("--source", required=True, help="dir with images_background/ and images_evaluation/")
    p.add_argument("--out", required=True, help="output cache directory")
    p.set_defaults(func=_cmd_ingest_omniglot)

    p = sub.add_parser("ingest-mnist", help="binarize the MNIST test set once")
    p.add_argument("--source", required=True, help="dir with t10k-*-ubyte[.gz]")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="binarization seed")
    p.set_defaults(func=_cmd_ingest_mnist)

    p = sub.add_parser("synth-data", help="generate and ingest a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train-alphabets", type=int, default=3)
    p.add_argument("--test-alphabets", type=int, default=2)
    p.add_argument("--classes-per-alphabet", type=int, default=16)
    p.add_argument("--mnist-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="episodic training")
    p.add_argument("--data", required=True, help="training split cache (.gmd)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_model_flags(p)
    t = p.add_argument_group("training config")
    t.add_argument("--steps", type=int)
    t.add_argument("--episodes-per-batch", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--grad-clip", type=float)
    t.add_argument("--ema-decay", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action="store_const", const=True)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--log-every", type=int)
    p.set_defaults(func=_cmd_train)

    def add_eval_common(p, mnist: bool) -> None:
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--episodes", type=int, default=100)
        p.add_argument("--length", type=int, default=None,
                       help="episode length (default: training episode_len)")
        p.add_argument("--c-test", type=int, default=1)
        p.add_argument("--samples", type=int, default=1000)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--min-cond", type=int, default=None,
                       help="first conditioning size to evaluate")

    p = sub.add_parser("eval-nll", help="conditional NLL curve on held-out classes")
    add_eval_common(p, mnist=False)
    p.set_defaults(func=_cmd_eval_nll)

    p = sub.add_parser("eval-mnist", help="transfer NLL curve on an mnist cache")
    add_eval_common(p, mnist=True)
    p.set_defaults(func=_cmd_eval_mnist)

    p = sub.add_parser("classify", help="few-shot classification")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--method", choices=("likelihood", "cosine"), default="likelihood")
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("sample", help="conditioned sample grid PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--episode-len", type=int, default=10)
    p.add_argument("--n-samples", type=int, default=8)
    p.add_argument("--c-test", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("diagnostics", help="prior entropy and bound curves")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--c-test", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", help="metrics.jsonl from a training run")
    p.set_defaults(func=_cmd_diagnostics)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (IngestError, CheckpointError, eval_mod.EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
