"""Evaluation: importance-sampled conditional likelihoods, adaptation curves,
few-shot classification, and prior-entropy diagnostics.

The conditional log-likelihood estimator draws latents from the recognition
proposal and averages importance weights in log space:
``log p(x | X) ~= logsumexp_s(log p(x, z_s | X) - log q(z_s | x, X)) - log S``.
Reported numbers are negative log-likelihoods in nats.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .data import GlyphDataset, sample_episode
from .model import (
    GenerativeMatchingNetwork,
    bernoulli_loglik,
    gaussian_entropy,
    gaussian_logpdf,
    reparam_sample,
)

_MAX_QUERY_ROWS = 4096  # decode chunking bound: episodes-per-chunk * samples


class EvaluationError(Exception):
    """An estimate could not be formed (non-finite term)."""


def importance_nll(log_weights: Tensor) -> Tensor:
    """NLL from log importance weights over the trailing sample dim."""
    s = log_weights.shape[-1]
    if s < 1:
        raise ValueError("need at least one importance sample")
    return -(torch.logsumexp(log_weights, dim=-1) - math.log(s))


def _check_finite(name: str, value: Tensor) -> None:
    if not torch.isfinite(value).all():
        raise EvaluationError(
            f"{name} produced non-finite values; estimate aborted"
        )


def log_importance_weights(
    model: GenerativeMatchingNetwork,
    x: Tensor,
    x_features: Tensor,
    cond_features: Tensor | None,
    n_samples: int,
    generator: torch.Generator | None = None,
    noise: Tensor | None = None,
) -> Tensor:
    """Log weights ``(B, S)`` for observations ``x`` against shared-size
    conditioning prefixes.

    ``x``: (B, 28, 28); ``x_features``: (B, F); ``cond_features``: (B, T, F)
    or None for the unconditional variant. ``noise`` fixes the proposal draws
    (B, S, D_z), e.g. to compare estimates across conditioning permutations.
    """
    batch = x.shape[0]
    cond = None
    if model.config.variant != "vae":
        if cond_features is None:
            raise ValueError("matching variants require conditioning features")
        cond = model.conditioning(cond_features)
    q = model.recognition_params(x_features.unsqueeze(1), cond)
    if noise is None:
        noise = torch.randn(
            batch, n_samples, model.config.latent_dim,
            dtype=model.dtype, device=model.device, generator=generator,
        )
    z = reparam_sample(q, noise)
    loglik = bernoulli_loglik(x.to(model.dtype).unsqueeze(1), model.decode(z, cond))
    prior = model.prior_params(cond, batch=batch)
    log_prior = gaussian_logpdf(z, prior)
    log_q = gaussian_logpdf(z, q)
    _check_finite("conditional log-likelihood", loglik)
    _check_finite("prior log-density", log_prior)
    _check_finite("proposal log-density", log_q)
    return loglik + log_prior - log_q


def conditional_nll(
    model: GenerativeMatchingNetwork,
    x: Tensor,
    x_features: Tensor,
    cond_features: Tensor | None,
    n_samples: int,
    generator: torch.Generator | None = None,
    noise: Tensor | None = None,
) -> Tensor:
    """Importance-sampled NLL estimates, one per batch row."""
    weights = log_importance_weights(
        model, x, x_features, cond_features, n_samples, generator, noise
    )
    return importance_nll(weights)


# ------------------------------------------------------------------ NLL curves


@dataclass
class NLLCurve:
    """Mean conditional NLL as a function of revealed conditioning size."""

    positions: np.ndarray  # (P,) conditioning sizes evaluated
    mean: np.ndarray  # (P,)
    se: np.ndarray  # (P,)
    episodes: int
    n_samples: int
    classes_per_episode: int

    def at(self, t: int) -> float:
        """Mean NLL at conditioning size t."""
        idx = np.flatnonzero(self.positions == t)
        if len(idx) == 0:
            raise KeyError(f"position {t} was not evaluated")
        return float(self.mean[idx[0]])


def _generator_for(seed: int, *key: int) -> torch.Generator:
    """An independent torch generator for one (seed, index...) stream."""
    state = np.random.SeedSequence([seed, *key]).generate_state(2)
    value = (int(state[0]) << 31) ^ int(state[1])
    return torch.Generator().manual_seed(value)


def _episode_batch(
    dataset: GlyphDataset,
    episodes: int,
    length: int,
    classes: int,
    rng: np.random.Generator,
) -> np.ndarray:
    return np.stack(
        [
            sample_episode(dataset, length, classes, rng).images
            for _ in range(episodes)
        ]
    )


@torch.no_grad()
def nll_curve(
    model: GenerativeMatchingNetwork,
    dataset: GlyphDataset,
    episodes: int = 100,
    length: int | None = None,
    classes_per_episode: int = 1,
    n_samples: int = 1000,
    seed: int = 0,
    min_cond: int = 0,
) -> NLLCurve:
    """Per-position NLL over fresh episodes from ``dataset``.

    Position t scores the t-th image against the prefix of the first t.
    ``min_cond`` skips early positions; a model without a pseudo-element
    cannot score t=0 (the empty set), so it starts at 1. Noise streams are
    keyed per (episode, position), making results independent of the
    internal evaluation batching.
    """
    length = length or model.config.episode_len
    if min_cond == 0 and model.config.variant != "vae" and not model.config.pseudo_count:
        raise ValueError(
            "a model without a pseudo-element cannot condition on the empty"
            " set; use min_cond >= 1"
        )
    positions = list(range(min_cond, length))
    if not positions:
        raise ValueError(f"no positions to evaluate (min_cond={min_cond})")
    rng = np.random.default_rng(seed)
    images = _episode_batch(dataset, episodes, length, classes_per_episode, rng)
    tensor = torch.from_numpy(images).to(model.dtype)
    chunk = max(1, _MAX_QUERY_ROWS // n_samples)
    rows = np.empty((episodes, len(positions)))
    model.eval()
    for lo in range(0, episodes, chunk):
        hi = min(lo + chunk, episodes)
        feats = model.encode(tensor[lo:hi])
        for col, t in enumerate(positions):
            noise = torch.stack(
                [
                    torch.randn(
                        n_samples, model.config.latent_dim,
                        dtype=model.dtype, generator=_generator_for(seed, e, t),
                    )
                    for e in range(lo, hi)
                ]
            )
            nll = conditional_nll(
                model,
                tensor[lo:hi, t],
                feats[:, t],
                feats[:, :t],
                n_samples,
                noise=noise,
            )
            rows[lo:hi, col] = nll.double().cpu().numpy()
    return NLLCurve(
        positions=np.array(positions),
        mean=rows.mean(axis=0),
        se=rows.std(axis=0, ddof=1) / math.sqrt(episodes) if episodes > 1
        else np.zeros(len(positions)),
        episodes=episodes,
        n_samples=n_samples,
        classes_per_episode=classes_per_episode,
    )


def write_nll_csv(path: Path | str, curve: NLLCurve) -> None:
    """Wide CSV: a ``stat`` column then one column per position t."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stat"] + [f"t{t}" for t in curve.positions])
        writer.writerow(["mean"] + [f"{v:.6f}" for v in curve.mean])
        writer.writerow(["se"] + [f"{v:.6f}" for v in curve.se])


@torch.no_grad()
def prior_entropy_curve(
    model: GenerativeMatchingNetwork,
    dataset: GlyphDataset,
    episodes: int = 100,
    length: int | None = None,
    classes_per_episode: int = 1,
    seed: int = 0,
    min_cond: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean prior entropy per conditioning size: (positions, entropies)."""
    length = length or model.config.episode_len
    if min_cond == 0 and model.config.variant != "vae" and not model.config.pseudo_count:
        min_cond = 1
    positions = np.arange(min_cond, length)
    rng = np.random.default_rng(seed)
    images = _episode_batch(dataset, episodes, length, classes_per_episode, rng)
    tensor = torch.from_numpy(images).to(model.dtype)
    model.eval()
    features = model.encode(tensor)
    out = np.empty(len(positions))
    for col, t in enumerate(positions):
        cond = None
        if model.config.variant != "vae":
            cond = model.conditioning(features[:, :t])
        prior = model.prior_params(cond, batch=tensor.shape[0])
        out[col] = float(gaussian_entropy(prior).mean())
    return positions, out


@torch.no_grad()
def paired_is_elbo(
    model: GenerativeMatchingNetwork,
    dataset: GlyphDataset,
    points: int = 200,
    cond_size: int = 3,
    classes_per_episode: int = 1,
    n_samples: int = 100,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Paired (IS log-likelihood, single-sample ELBO) on held-out points.

    Each point is the last image of a fresh episode scored against the rest.
    Returns two (points,) arrays for a paired comparison.
    """
    rng = np.random.default_rng(seed)
    images = _episode_batch(
        dataset, points, cond_size + 1, classes_per_episode, rng
    )
    tensor = torch.from_numpy(images).to(model.dtype)
    gen = torch.Generator().manual_seed(int(rng.integers(2**63)))
    model.eval()
    is_vals = np.empty(points)
    elbo_vals = np.empty(points)
    chunk = max(1, _MAX_QUERY_ROWS // n_samples)
    for lo in range(0, points, chunk):
        hi = min(lo + chunk, points)
        feats = model.encode(tensor[lo:hi])
        x = tensor[lo:hi, -1]
        nll = conditional_nll(
            model, x, feats[:, -1], feats[:, :-1], n_samples, generator=gen
        )
        is_vals[lo:hi] = -nll.double().cpu().numpy()
        cond = None
        if model.config.variant != "vae":
            cond = model.conditioning(feats[:, :-1])
        noise = torch.randn(
            hi - lo, model.config.latent_dim, dtype=model.dtype, generator=gen
        )
        terms = model.step_terms(x, feats[:, -1], cond, noise)
        elbo_vals[lo:hi] = terms.elbo.double().cpu().numpy()
    return is_vals, elbo_vals


# ------------------------------------------------------------------- few-shot


@dataclass
class FewShotTask:
    """One classification trial: labeled supports and a single query."""

    support_images: np.ndarray  # (ways, shots, 28, 28)
    class_ids: np.ndarray  # (ways,), ascending
    query_image: np.ndarray  # (28, 28)
    query_way: int  # index into class_ids


def sample_few_shot_task(
    dataset: GlyphDataset, ways: int, shots: int, rng: np.random.Generator
) -> FewShotTask:
    if not 2 <= ways <= dataset.n_classes:
        raise ValueError(f"cannot pick {ways} ways from {dataset.n_classes} classes")
    chosen = np.sort(rng.choice(np.array(dataset.class_ids), ways, replace=False))
    supports = np.empty((ways, shots, 28, 28), dtype=np.uint8)
    query_way = int(rng.integers(ways))
    query_image = None
    for w, cid in enumerate(chosen):
        pool = dataset.images[int(cid)]
        need = shots + (1 if w == query_way else 0)
        if len(pool) < need:
            raise ValueError(
                f"class {cid} has {len(pool)} images; task needs {need}"
            )
        picks = rng.choice(len(pool), size=need, replace=False)
        supports[w] = pool[picks[:shots]]
        if w == query_way:
            query_image = pool[picks[-1]]
    return FewShotTask(supports, chosen, query_image, query_way)


@dataclass
class FewShotResult:
    accuracy: float
    se: float
    trials: int


@torch.no_grad()
def _scores_likelihood(
    model: GenerativeMatchingNetwork,
    task: FewShotTask,
    n_samples: int,
    generator: torch.Generator,
) -> np.ndarray:
    ways = task.support_images.shape[0]
    supports = torch.from_numpy(task.support_images).to(model.dtype)
    query = torch.from_numpy(task.query_image).to(model.dtype)
    cond_features = model.encode(supports)  # (ways, shots, F)
    x = query.expand(ways, 28, 28)
    x_features = model.encode(x)
    # One noise draw shared across ways pairs the per-class estimates.
    noise = torch.randn(
        1, n_samples, model.config.latent_dim,
        dtype=model.dtype, generator=generator,
    ).expand(ways, n_samples, model.config.latent_dim)
    nll = conditional_nll(
        model, x, x_features, cond_features, n_samples, noise=noise
    )
    return -nll.double().cpu().numpy()


@torch.no_grad()
def _scores_cosine(
    model: GenerativeMatchingNetwork, task: FewShotTask
) -> np.ndarray:
    """Cosine similarity of recognition means against each labeled example.

    All supports pool into one conditioning set; scores follow class-major
    support order so ties resolve to the lowest class id downstream.
    """
    ways, shots = task.support_images.shape[:2]
    flat = task.support_images.reshape(ways * shots, 28, 28)
    stack = np.concatenate([task.query_image[None], flat])
    tensor = torch.from_numpy(stack).to(model.dtype)
    features = model.encode(tensor).unsqueeze(0)  # (1, 1 + ways*shots, F)
    cond_features = features[:, 1:]
    dist = model.recognition_params(features, model.conditioning(cond_features))
    means = dist.mean.squeeze(0)  # (1 + ways*shots, D)
    unit = means / means.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    sims = (unit[1:] @ unit[0]).double().cpu().numpy()  # (ways*shots,)
    return sims.reshape(ways, shots).max(axis=1)


def few_shot_eval(
    model: GenerativeMatchingNetwork,
    dataset: GlyphDataset,
    ways: int = 5,
    shots: int = 1,
    trials: int = 500,
    method: str = "likelihood",
    n_samples: int = 32,
    seed: int = 0,
) -> FewShotResult:
    """Accuracy over fresh tasks; ties break toward the lowest class id."""
    if method not in ("likelihood", "cosine"):
        raise ValueError(f"unknown method {method!r}")
    rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(int(rng.integers(2**63)))
    correct = 0
    for _ in range(trials):
        task = sample_few_shot_task(dataset, ways, shots, rng)
        if method == "likelihood":
            scores = _scores_likelihood(model, task, n_samples, generator)
        else:
            scores = _scores_cosine(model, task)
        predicted = int(np.argmax(scores))  # first max -> lowest class id
        correct += int(predicted == task.query_way)
    accuracy = correct / trials
    se = math.sqrt(max(accuracy * (1 - accuracy), 1e-12) / trials)
    return FewShotResult(accuracy, se, trials)
