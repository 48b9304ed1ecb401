"""Episodic training: Adam on the negated episode bound, with full-state
checkpoints and a JSON-lines metrics log.

Each step samples a fresh batch of episodes from the training split, runs the
sequential bound over every episode, and takes one clipped Adam step.
Checkpoints carry the model, the optimizer, every RNG stream, and the running
per-step diagnostics, so a resumed deterministic run is bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
import time
from collections import deque
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .data import GlyphDataset, episodes_to_tensor, sample_episode
from .model import GMNConfig, GenerativeMatchingNetwork

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GMCK"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """A checkpoint file is unreadable or does not match the model."""


class TrainingDiverged(Exception):
    """The loss went non-finite; carries the last good checkpoint path."""

    def __init__(self, step: int, last_checkpoint: Path | None) -> None:
        where = last_checkpoint if last_checkpoint else "none written yet"
        super().__init__(
            f"non-finite loss at step {step}; last good checkpoint: {where}"
        )
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings around a model config."""

    model: GMNConfig
    steps: int = 2000
    episodes_per_batch: int = 16
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    ema_decay: float = 0.99
    seed: int = 0
    deterministic: bool = False
    checkpoint_every: int = 500
    log_every: int = 25

    def __post_init__(self) -> None:
        if self.steps < 1 or self.episodes_per_batch < 1:
            raise ValueError("steps and episodes_per_batch must be >= 1")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ValueError("learning_rate and grad_clip must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be >= 1")

    def asdict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["model"] = self.model.asdict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        payload = dict(data)
        payload["model"] = GMNConfig.from_dict(payload["model"])
        return cls(**payload)


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(path: Path | str, payload: dict) -> None:
    """Write ``payload`` (torch-serializable) behind a checksummed header."""
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    body = buffer.getvalue()
    digest = hashlib.sha256(body).digest()
    header = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    header += digest + struct.pack("<Q", len(body))
    Path(path).write_bytes(header + body)


def load_checkpoint(path: Path | str) -> dict:
    data = Path(path).read_bytes()
    head_len = 4 + 4 + 32 + 8
    if len(data) < head_len or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    digest = data[8:40]
    (body_len,) = struct.unpack("<Q", data[40:48])
    body = data[head_len:]
    if len(body) != body_len:
        raise CheckpointError(f"{path}: truncated checkpoint body")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    return torch.load(io.BytesIO(body), weights_only=False)


def load_model(path: Path | str, expected: GMNConfig | None = None):
    """Rebuild a model from a checkpoint; optionally enforce a config match."""
    payload = load_checkpoint(path)
    config = GMNConfig.from_dict(payload["train_config"]["model"])
    if expected is not None and config != expected:
        diffs = [
            f"{f.name}: checkpoint {getattr(config, f.name)!r}"
            f" != expected {getattr(expected, f.name)!r}"
            for f in fields(GMNConfig)
            if getattr(config, f.name) != getattr(expected, f.name)
        ]
        raise CheckpointError(
            f"{path}: model config mismatch: " + "; ".join(diffs)
        )
    model = GenerativeMatchingNetwork(config)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload


# -------------------------------------------------------------------- trainer


def _derived_seed(base: int, stream: str) -> int:
    digest = hashlib.sha256(f"{base}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Trainer:
    """Owns one training run: model, optimizer, RNG streams, and logs."""

    def __init__(
        self,
        config: TrainConfig,
        dataset: GlyphDataset,
        out_dir: Path | str,
    ) -> None:
        if dataset.n_classes < config.model.classes_per_episode:
            raise ValueError(
                f"dataset has {dataset.n_classes} classes; episodes need"
                f" {config.model.classes_per_episode}"
            )
        self.config = config
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if config.deterministic:
            torch.use_deterministic_algorithms(True)
            torch.set_num_threads(1)
        torch.manual_seed(_derived_seed(config.seed, "init"))
        self.model = GenerativeMatchingNetwork(config.model)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=config.learning_rate,
            betas=(config.adam_beta1, config.adam_beta2),
            eps=config.adam_eps,
        )
        self.episode_rng = np.random.default_rng(
            _derived_seed(config.seed, "episodes")
        )
        self.noise_generator = torch.Generator().manual_seed(
            _derived_seed(config.seed, "noise")
        )
        self.step = 0
        self.per_t_elbo_ema: np.ndarray | None = None
        self.loss_ema: float | None = None
        self.last_grad_norm = math.nan
        self.last_prior_entropy = math.nan
        self.grad_window: deque[dict[str, float]] = deque(maxlen=50)
        self.last_checkpoint: Path | None = None
        self.metrics_path = self.out_dir / "metrics.jsonl"
        self._started = time.monotonic()

    # ------------------------------------------------------------------ steps

    def _sample_batch(self) -> torch.Tensor:
        episodes = [
            sample_episode(
                self.dataset,
                self.config.model.episode_len,
                self.config.model.classes_per_episode,
                self.episode_rng,
            )
            for _ in range(self.config.episodes_per_batch)
        ]
        return episodes_to_tensor(episodes, self.model.dtype)

    def train_step(self) -> float:
        """One optimization step; returns the batch loss."""
        self.model.train()
        images = self._sample_batch()
        total, terms = self.model.episode_elbo(
            images, generator=self.noise_generator
        )
        loss = -total.mean()
        loss_value = float(loss.detach())
        if not math.isfinite(loss_value):
            raise TrainingDiverged(self.step + 1, self.last_checkpoint)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.grad_window.append(self._group_grad_norms())
        self.last_grad_norm = float(
            torch.nn.utils.clip_grad_norm_(
                self.model.parameters(), self.config.grad_clip
            )
        )
        self.optimizer.step()
        self.step += 1

        per_t = np.array([float(s.elbo.mean().detach()) for s in terms])
        decay = self.config.ema_decay
        if self.per_t_elbo_ema is None:
            self.per_t_elbo_ema = per_t
            self.loss_ema = loss_value
        else:
            self.per_t_elbo_ema = decay * self.per_t_elbo_ema + (1 - decay) * per_t
            self.loss_ema = decay * self.loss_ema + (1 - decay) * loss_value
        self.last_prior_entropy = float(
            np.mean([float(s.prior_entropy.mean().detach()) for s in terms])
        )
        return loss_value

    def _group_grad_norms(self) -> dict[str, float]:
        norms = {}
        for name, params in self.model.parameter_groups().items():
            total = 0.0
            for p in params:
                if p.grad is not None:
                    total += float((p.grad.detach() ** 2).sum())
            norms[name] = math.sqrt(total)
        return norms

    def assert_gradient_flow(self) -> None:
        """Every expected-live group must have gotten gradient recently."""
        if not self.grad_window:
            raise RuntimeError("no training steps recorded yet")
        expected = self.model.expected_live_groups()
        peak = {name: 0.0 for name in expected}
        for record in self.grad_window:
            for name in expected:
                peak[name] = max(peak[name], record.get(name, 0.0))
        dead = sorted(name for name, norm in peak.items() if norm == 0.0)
        if dead:
            raise RuntimeError(
                f"no gradient reached parameter groups {dead} in the last"
                f" {len(self.grad_window)} steps"
            )

    # -------------------------------------------------------------- lifecycle

    def log_metrics(self) -> dict:
        wall = 0.0 if self.config.deterministic else time.monotonic() - self._started
        record = {
            "step": self.step,
            "loss": self.loss_ema,
            "per_t_elbo_ema": [float(v) for v in self.per_t_elbo_ema],
            "prior_entropy_mean": self.last_prior_entropy,
            "wall_time": wall,
        }
        with self.metrics_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")
        return record

    def checkpoint_payload(self) -> dict:
        return {
            "train_config": self.config.asdict(),
            "model_state": self.model.state_dict(),
            "optimizer_state": self.optimizer.state_dict(),
            "step": self.step,
            "episode_rng_state": self.episode_rng.bit_generator.state,
            "noise_generator_state": self.noise_generator.get_state(),
            "per_t_elbo_ema": None
            if self.per_t_elbo_ema is None
            else self.per_t_elbo_ema.tolist(),
            "loss_ema": self.loss_ema,
        }

    def save(self, name: str | None = None) -> Path:
        name = name or f"ckpt_{self.step:06d}.gmck"
        path = self.out_dir / name
        save_checkpoint(path, self.checkpoint_payload())
        self.last_checkpoint = path
        return path

    def restore(self, path: Path | str) -> None:
        """Resume from a checkpoint written by an identically-configured run."""
        payload = load_checkpoint(path)
        saved = TrainConfig.from_dict(payload["train_config"])
        if saved != self.config:
            raise CheckpointError(
                f"{path}: train config does not match this run's config"
            )
        self.model.load_state_dict(payload["model_state"])
        self.optimizer.load_state_dict(payload["optimizer_state"])
        self.step = payload["step"]
        self.episode_rng.bit_generator.state = payload["episode_rng_state"]
        self.noise_generator.set_state(payload["noise_generator_state"])
        ema = payload["per_t_elbo_ema"]
        self.per_t_elbo_ema = None if ema is None else np.array(ema)
        self.loss_ema = payload["loss_ema"]
        self.last_checkpoint = Path(path)

    def run(self) -> Path:
        """Train to ``config.steps``, logging and checkpointing on the way."""
        logger.info(
            "training %s variant for %d steps (%d episodes/batch)",
            self.config.model.variant, self.config.steps,
            self.config.episodes_per_batch,
        )
        while self.step < self.config.steps:
            loss = self.train_step()
            if self.step % self.config.log_every == 0 or self.step == self.config.steps:
                record = self.log_metrics()
                logger.info(
                    "step %d loss %.2f (ema %.2f)",
                    self.step, loss, record["loss"],
                )
            if (
                self.step % self.config.checkpoint_every == 0
                and self.step < self.config.steps
            ):
                self.save()
        return self.save("ckpt_final.gmck")
