"""The conditional generative model and its diagonal-Gaussian latent algebra.

The model observes an episode of images one at a time. For each new image it
matches against the already-revealed prefix (plus an optional trainable
pseudo-element) three ways: a recognition match proposes a posterior over the
latent, a prior match (with its own controller) builds a data-dependent prior,
and a generative match conditions the decoder on what the latent retrieved
from the set. Recognition and generation share their embedding heads and
controller; the prior keeps separate query/key machinery but shares the
prototype head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
from torch import Tensor, nn

from .matching import (
    ConditioningSet,
    MatchComponents,
    augment_with_pseudo,
    full_context_match,
)
from .neural import AffineHead, ImageDecoder, ImageEncoder, gru_step

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0

VARIANTS = ("full", "no_attention", "vae")
PRIOR_MODES = ("data_dependent", "standard_normal")


@dataclass(frozen=True)
class GMNConfig:
    """Model hyperparameters.

    ``width`` scales every convolutional channel count (1.0 reproduces the
    reference 16/16/32 stacks); ``embed_dim`` is both the matching-space and
    controller width. ``variant`` selects the full attentional model, the
    uniform-kernel ablation, or an unconditional VAE baseline with the same
    encoder/decoder stacks and no matching machinery.
    """

    latent_dim: int = 64
    embed_dim: int = 200
    episode_len: int = 20
    classes_per_episode: int = 2
    match_steps: int = 4
    prior_steps: int = 1
    pseudo_count: int = 1
    variant: str = "full"
    prior_mode: str = "data_dependent"
    width: float = 1.0

    def __post_init__(self) -> None:
        for name in (
            "latent_dim",
            "embed_dim",
            "episode_len",
            "classes_per_episode",
            "match_steps",
            "prior_steps",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.pseudo_count not in (0, 1):
            raise ValueError(f"pseudo_count must be 0 or 1, got {self.pseudo_count}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(
                f"prior_mode must be one of {PRIOR_MODES}, got {self.prior_mode!r}"
            )
        if self.width <= 0:
            raise ValueError(f"width must be positive, got {self.width}")

    def asdict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "GMNConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class DiagGaussian:
    """Diagonal Gaussian with log-variance clamped to [-10, 10] on creation."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.log_var.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != log_var shape"
                f" {tuple(self.log_var.shape)}"
            )
        self.log_var = torch.clamp(self.log_var, LOG_VAR_MIN, LOG_VAR_MAX)


def standard_gaussian(shape: tuple[int, ...], *, dtype, device) -> DiagGaussian:
    zeros = torch.zeros(shape, dtype=dtype, device=device)
    return DiagGaussian(zeros, zeros.clone())


def gaussian_logpdf(z: Tensor, dist: DiagGaussian) -> Tensor:
    """Log density, summed over the trailing (event) dimension."""
    if z.shape[-1] != dist.mean.shape[-1]:
        raise ValueError(
            f"z dim {z.shape[-1]} does not match distribution dim"
            f" {dist.mean.shape[-1]}"
        )
    log2pi = math.log(2.0 * math.pi)
    sq = (z - dist.mean) ** 2 * torch.exp(-dist.log_var)
    return -0.5 * (log2pi + dist.log_var + sq).sum(dim=-1)


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) in closed form, summed over the event dimension."""
    var_ratio = torch.exp(q.log_var - p.log_var)
    mean_term = (q.mean - p.mean) ** 2 * torch.exp(-p.log_var)
    return 0.5 * (p.log_var - q.log_var + var_ratio + mean_term - 1.0).sum(dim=-1)


def gaussian_entropy(dist: DiagGaussian) -> Tensor:
    log2pie = math.log(2.0 * math.pi) + 1.0
    return 0.5 * (log2pie + dist.log_var).sum(dim=-1)


def reparam_sample(dist: DiagGaussian, noise: Tensor) -> Tensor:
    """Deterministic transform ``mean + exp(log_var / 2) * noise``."""
    if noise.shape[-1] != dist.mean.shape[-1]:
        raise ValueError(
            f"noise dim {noise.shape[-1]} does not match distribution dim"
            f" {dist.mean.shape[-1]}"
        )
    return dist.mean + torch.exp(0.5 * dist.log_var) * noise


def bernoulli_loglik(x: Tensor, logits: Tensor) -> Tensor:
    """Pixel-summed Bernoulli log-likelihood of binary images under logits.

    ``x`` broadcasts against ``logits`` over leading dims (one observation
    scored under many logit maps is the common case).
    """
    x = x.expand(logits.shape)
    per_pixel = nn.functional.binary_cross_entropy_with_logits(
        logits, x, reduction="none"
    )
    return -per_pixel.sum(dim=(-2, -1))


@dataclass
class StepTerms:
    """Per-observation bound pieces, each shaped (batch,)."""

    elbo: Tensor
    loglik: Tensor
    kl: Tensor
    prior_entropy: Tensor


class GenerativeMatchingNetwork(nn.Module):
    """Conditional generative model that adapts to a conditioning set.

    All public methods take conditioning features produced by
    :meth:`encode` so episode prefixes can reuse one encoding pass. Query
    batches are shaped ``(B, Q, ...)``: B independent conditioning sets, Q
    queries against each.
    """

    def __init__(self, config: GMNConfig) -> None:
        super().__init__()
        self.config = config
        self.encoder = ImageEncoder(config.width)
        feature_dim = self.encoder.feature_dim
        e = config.embed_dim
        z = config.latent_dim

        if config.variant == "vae":
            self.decoder = ImageDecoder(z, config.width)
            self.vae_feature_head = AffineHead(feature_dim, e)
            self.posterior_head = nn.Linear(e, 2 * z)
            return

        self.decoder = ImageDecoder(z + 2 * e, config.width)
        self.query_head = AffineHead(feature_dim + e, e)
        self.latent_proj = nn.Linear(z, feature_dim)
        self.key_head = AffineHead(feature_dim + e, e)
        self.proto_head = AffineHead(feature_dim + e, e)
        self.shared_controller = nn.GRUCell(e, e)
        self.h0_shared = nn.Parameter(torch.randn(e) * 0.1)
        self.posterior_head = nn.Linear(2 * e, 2 * z)
        if config.pseudo_count:
            self.pseudo_key = nn.Parameter(torch.randn(e) * 0.1)
            self.pseudo_proto = nn.Parameter(torch.randn(e) * 0.1)
        if config.prior_mode == "data_dependent":
            self.prior_query_head = AffineHead(e, e)
            self.prior_key_head = AffineHead(feature_dim + e, e)
            self.prior_controller = nn.GRUCell(e, e)
            self.h0_prior = nn.Parameter(torch.randn(e) * 0.1)
            self.prior_head = nn.Linear(2 * e, 2 * z)
            if config.pseudo_count:
                self.pseudo_key_prior = nn.Parameter(torch.randn(e) * 0.1)

    # ---------------------------------------------------------------- helpers

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def encode(self, images: Tensor) -> Tensor:
        """Binary images ``(..., 28, 28)`` to features ``(..., F)``."""
        return self.encoder(images.to(self.dtype))

    def conditioning(self, features: Tensor) -> ConditioningSet:
        """Wrap prefix features ``(B, T, F)``, enabling the pseudo-element.

        With ``pseudo_count=0`` an empty prefix is rejected here.
        """
        return augment_with_pseudo(
            ConditioningSet(features), self.config.pseudo_count
        )

    def _shared_components(self) -> MatchComponents:
        return MatchComponents(
            key_head=self.key_head,
            proto_head=self.proto_head,
            controller=self.shared_controller,
            h0=self.h0_shared,
            pseudo_key=getattr(self, "pseudo_key", None),
            pseudo_proto=getattr(self, "pseudo_proto", None),
            uniform=self.config.variant == "no_attention",
        )

    def _prior_components(self) -> MatchComponents:
        return MatchComponents(
            key_head=self.prior_key_head,
            proto_head=self.proto_head,
            controller=self.prior_controller,
            h0=self.h0_prior,
            pseudo_key=getattr(self, "pseudo_key_prior", None),
            pseudo_proto=getattr(self, "pseudo_proto", None),
            uniform=self.config.variant == "no_attention",
        )

    def _split_gaussian(self, packed: Tensor) -> DiagGaussian:
        mean, log_var = packed.chunk(2, dim=-1)
        return DiagGaussian(mean, log_var)

    # ------------------------------------------------------------ model parts

    def recognition_params(
        self, x_features: Tensor, cond: ConditioningSet | None
    ) -> DiagGaussian:
        """Posterior q(z | x, X) parameters. ``x_features``: (B, Q, F)."""
        if x_features.dim() != 3:
            raise ValueError(
                f"x_features must be (B, Q, F), got {tuple(x_features.shape)}"
            )
        if self.config.variant == "vae":
            return self._split_gaussian(
                self.posterior_head(self.vae_feature_head(x_features))
            )
        if cond is None:
            raise ValueError("matching variants require a conditioning set")

        def query(state: Tensor) -> Tensor:
            return self.query_head(torch.cat([x_features, state], dim=-1))

        read, state = full_context_match(
            query, cond, self._shared_components(),
            self.config.match_steps, x_features.shape[1],
        )
        return self._split_gaussian(
            self.posterior_head(torch.cat([read, state], dim=-1))
        )

    def prior_params(
        self,
        cond: ConditioningSet | None,
        n_queries: int = 1,
        batch: int | None = None,
    ) -> DiagGaussian:
        """Prior p(z | X) parameters, shaped (B, n_queries, D_z).

        The prior has no per-query input, so callers usually keep
        ``n_queries=1`` and let broadcasting handle wider query batches.
        """
        if self.config.variant == "vae" or self.config.prior_mode == "standard_normal":
            if batch is None:
                batch = 1 if cond is None else cond.batch
            return standard_gaussian(
                (batch, n_queries, self.config.latent_dim),
                dtype=self.dtype, device=self.device,
            )
        if cond is None:
            raise ValueError("the data-dependent prior requires a conditioning set")

        def query(state: Tensor) -> Tensor:
            return self.prior_query_head(state)

        read, state = full_context_match(
            query, cond, self._prior_components(),
            self.config.prior_steps, n_queries,
        )
        return self._split_gaussian(
            self.prior_head(torch.cat([read, state], dim=-1))
        )

    def decode(self, z: Tensor, cond: ConditioningSet | None) -> Tensor:
        """Bernoulli logits for latents ``(B, Q, D_z) -> (B, Q, 28, 28)``."""
        if z.dim() != 3 or z.shape[-1] != self.config.latent_dim:
            raise ValueError(
                f"z must be (B, Q, {self.config.latent_dim}), got {tuple(z.shape)}"
            )
        if self.config.variant == "vae":
            return self.decoder(z)
        if cond is None:
            raise ValueError("matching variants require a conditioning set")

        def query(state: Tensor) -> Tensor:
            return self.query_head(torch.cat([self.latent_proj(z), state], dim=-1))

        read, state = full_context_match(
            query, cond, self._shared_components(),
            self.config.match_steps, z.shape[1],
        )
        return self.decoder(torch.cat([z, read, state], dim=-1))

    # ------------------------------------------------------------- objectives

    def step_terms(
        self,
        x: Tensor,
        x_features: Tensor,
        cond: ConditioningSet | None,
        noise: Tensor,
    ) -> StepTerms:
        """One observation's bound: ``E_q[log p(x, z | X)] - log q`` pieces.

        ``x``: (B, 28, 28); ``x_features``: (B, F); ``noise``: (B, D_z).
        Uses one reparameterized sample for the likelihood and the analytic
        KL between the two diagonal Gaussians.
        """
        q = self.recognition_params(x_features.unsqueeze(1), cond)
        p = self.prior_params(cond, batch=x.shape[0])
        z = reparam_sample(q, noise.unsqueeze(1))
        loglik = bernoulli_loglik(x.unsqueeze(1), self.decode(z, cond)).squeeze(1)
        kl = gaussian_kl(q, p).squeeze(1)
        entropy = gaussian_entropy(p).squeeze(1)
        return StepTerms(
            elbo=loglik - kl, loglik=loglik, kl=kl, prior_entropy=entropy
        )

    def episode_elbo(
        self,
        images: Tensor,
        noise: Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[Tensor, list[StepTerms]]:
        """Sum of per-step bounds over an episode.

        ``images``: (B, T, 28, 28) binary. Observation t is scored against
        the prefix of the first t images. Returns the per-episode total
        ``(B,)`` and the per-step terms. ``noise`` fixes the reparameterization
        draws ``(B, T, D_z)``; otherwise they come from ``generator``.

        Without a pseudo-element the empty prefix cannot be matched against,
        so matching variants with ``pseudo_count=0`` skip the first
        observation and return T - 1 terms.
        """
        if images.dim() != 4:
            raise ValueError(
                f"images must be (B, T, H, W), got {tuple(images.shape)}"
            )
        b, t_len = images.shape[:2]
        x = images.to(self.dtype)
        if noise is None:
            noise = torch.randn(
                b, t_len, self.config.latent_dim,
                dtype=self.dtype, device=self.device, generator=generator,
            )
        if noise.shape != (b, t_len, self.config.latent_dim):
            raise ValueError(
                f"noise must be {(b, t_len, self.config.latent_dim)},"
                f" got {tuple(noise.shape)}"
            )
        features = self.encode(x)
        matching = self.config.variant != "vae"
        t_first = 1 if matching and not self.config.pseudo_count else 0
        terms = []
        for t in range(t_first, t_len):
            cond = None
            if matching:
                cond = self.conditioning(features[:, :t])
            terms.append(
                self.step_terms(x[:, t], features[:, t], cond, noise[:, t])
            )
        total = torch.stack([s.elbo for s in terms], dim=1).sum(dim=1)
        return total, terms

    # -------------------------------------------------------------- sampling

    def generate(
        self,
        cond_images: Tensor | None,
        n_samples: int,
        generator: torch.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Sample images given conditioning images ``(B, T, 28, 28)`` or None.

        Returns binary samples and Bernoulli means, both (B, n_samples, 28, 28).
        """
        if self.config.variant == "vae":
            cond = None
            batch = 1 if cond_images is None else cond_images.shape[0]
        else:
            if cond_images is None:
                raise ValueError("matching variants require conditioning images")
            features = self.encode(cond_images)
            cond = self.conditioning(features)
            batch = cond.batch
        prior = self.prior_params(cond, batch=batch)
        noise = torch.randn(
            batch, n_samples, self.config.latent_dim,
            dtype=self.dtype, device=self.device, generator=generator,
        )
        z = reparam_sample(prior, noise)
        probs = torch.sigmoid(self.decode(z, cond))
        flips = torch.rand(
            probs.shape, dtype=self.dtype, device=self.device, generator=generator
        )
        return (flips < probs).to(probs.dtype), probs

    # ------------------------------------------------------------ diagnostics

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Named top-level parameter groups for gradient-flow audits."""
        groups: dict[str, list[nn.Parameter]] = {}
        direct = {
            name: param
            for name, param in self.named_parameters()
            if "." not in name
        }
        for name, param in direct.items():
            groups[name] = [param]
        for name, module in self.named_children():
            params = list(module.parameters())
            if params:
                groups[name] = params
        return groups

    def expected_live_groups(self) -> set[str]:
        """Groups that must receive gradient from the episode bound."""
        groups = set(self.parameter_groups())
        if self.config.variant == "no_attention":
            dead = {
                "query_head", "latent_proj", "key_head",
                "prior_query_head", "prior_key_head",
                "pseudo_key", "pseudo_key_prior",
            }
            groups -= dead
        return groups
