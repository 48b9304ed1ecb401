"""Attentional matching over a conditioning set.

A query vector attends over per-element keys, and the resulting weights
interpolate per-element prototype vectors. The full-context variant repeats
this for several steps, advancing a GRU controller state between passes so
that later passes can depend on what earlier ones aggregated. Keys and
prototypes are recomputed at every step because both embed the controller
state alongside the raw element features.

Trainable pseudo-elements extend the conditioning set with a constant key and
prototype, which keeps matching well-defined when no data has been revealed
yet.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import torch
from torch import Tensor, nn

from .neural import AffineHead, gru_step

QueryFn = Callable[[Tensor], Tensor]


def stable_softmax(logits: Tensor) -> Tensor:
    """Softmax over the trailing dim with explicit max subtraction."""
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    weights = torch.exp(shifted)
    return weights / weights.sum(dim=-1, keepdim=True)


def attention_weights(query: Tensor, keys: Tensor) -> Tensor:
    """Dot-product attention: ``(..., E) x (..., T, E) -> (..., T)``.

    Raises on an empty key set; a single key always gets weight exactly 1.
    """
    if keys.shape[-2] == 0:
        raise ValueError("cannot attend over an empty conditioning set")
    if query.shape[-1] != keys.shape[-1]:
        raise ValueError(
            f"query dim {query.shape[-1]} does not match key dim {keys.shape[-1]}"
        )
    logits = (keys * query.unsqueeze(-2)).sum(dim=-1)
    return stable_softmax(logits)


def uniform_weights(keys: Tensor) -> Tensor:
    """Uniform kernel over the set dimension, matching attention's shape."""
    n = keys.shape[-2]
    if n == 0:
        raise ValueError("cannot average over an empty conditioning set")
    return torch.full(keys.shape[:-1], 1.0 / n, dtype=keys.dtype, device=keys.device)


def interpolate_prototypes(weights: Tensor, prototypes: Tensor) -> Tensor:
    """Convex combination ``(..., T) x (..., T, E) -> (..., E)``."""
    if weights.shape[-1] != prototypes.shape[-2]:
        raise ValueError(
            f"{weights.shape[-1]} weights for {prototypes.shape[-2]} prototypes"
        )
    return (weights.unsqueeze(-1) * prototypes).sum(dim=-2)


@dataclass(frozen=True)
class ConditioningSet:
    """Encoded conditioning examples plus an optional pseudo-element.

    ``features`` has shape ``(B, T, F)`` where T may be zero. The pseudo
    count only records intent; the trainable pseudo vectors themselves live
    with the matcher since they are parameters, not data.
    """

    features: Tensor
    n_pseudo: int = 0

    def __post_init__(self) -> None:
        if self.features.dim() != 3:
            raise ValueError(
                f"features must be (batch, set, dim), got {tuple(self.features.shape)}"
            )
        if self.n_pseudo not in (0, 1):
            raise ValueError(f"n_pseudo must be 0 or 1, got {self.n_pseudo}")

    @property
    def batch(self) -> int:
        return self.features.shape[0]

    @property
    def n_real(self) -> int:
        return self.features.shape[1]

    @property
    def size(self) -> int:
        return self.n_real + self.n_pseudo


def augment_with_pseudo(cond: ConditioningSet, n_pseudo: int) -> ConditioningSet:
    """Enable ``n_pseudo`` trainable pseudo-elements on a conditioning set.

    The resulting set must be non-empty: matching over nothing is undefined,
    so an empty set with no pseudo-element is a contract error here rather
    than deeper in the matcher.
    """
    out = replace(cond, n_pseudo=n_pseudo)
    if out.size == 0:
        raise ValueError(
            "conditioning set is empty and no pseudo-element is enabled"
        )
    return out


@dataclass
class MatchComponents:
    """The trainable pieces one matching procedure uses.

    ``key_head`` and ``proto_head`` embed ``[features, state]``; the
    controller advances the state between attention passes from its trainable
    initial value ``h0``. ``uniform`` replaces attention with a uniform
    kernel (the query function is then never evaluated).
    """

    key_head: AffineHead
    proto_head: AffineHead
    controller: nn.GRUCell
    h0: Tensor
    pseudo_key: Tensor | None = None
    pseudo_proto: Tensor | None = None
    uniform: bool = False


def _embed_set(
    head: AffineHead, features: Tensor, state: Tensor, pseudo: Tensor | None
) -> Tensor:
    """Embed each set element jointly with the controller state.

    ``features``: (B, T, F); ``state``: (B, Q, E). Returns (B, Q, T', E)
    where T' includes the appended pseudo-element if present.
    """
    b, q, e = state.shape
    t = features.shape[1]
    parts = []
    if t > 0:
        feats = features.unsqueeze(1).expand(b, q, t, features.shape[-1])
        states = state.unsqueeze(2).expand(b, q, t, e)
        parts.append(head(torch.cat([feats, states], dim=-1)))
    if pseudo is not None:
        parts.append(pseudo.expand(b, q, 1, e))
    if not parts:
        raise ValueError("cannot embed an empty conditioning set")
    return torch.cat(parts, dim=2) if len(parts) > 1 else parts[0]


def full_context_match(
    query_fn: QueryFn,
    cond: ConditioningSet,
    comp: MatchComponents,
    steps: int,
    n_queries: int,
) -> tuple[Tensor, Tensor]:
    """Run ``steps`` attention passes guided by the controller.

    ``query_fn`` maps the controller state ``(B, Q, E)`` to query embeddings
    of the same shape; it closes over whatever the query is derived from (a
    latent sample, an encoded observation, or nothing for the prior).
    Returns the final aggregated read ``r`` and the controller state after
    one further update, both ``(B, Q, E)``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if cond.size == 0:
        raise ValueError(
            "conditioning set is empty and no pseudo-element is enabled"
        )
    use_pseudo = cond.n_pseudo == 1
    if use_pseudo and (comp.pseudo_key is None or comp.pseudo_proto is None):
        raise ValueError(
            "conditioning set requests a pseudo-element but the matcher has none"
        )
    pseudo_key = comp.pseudo_key if use_pseudo else None
    pseudo_proto = comp.pseudo_proto if use_pseudo else None
    b = cond.batch
    state = comp.h0.expand(b, n_queries, comp.h0.shape[-1])
    read = None
    for _ in range(steps):
        protos = _embed_set(comp.proto_head, cond.features, state, pseudo_proto)
        if comp.uniform:
            weights = uniform_weights(protos)
        else:
            keys = _embed_set(comp.key_head, cond.features, state, pseudo_key)
            weights = attention_weights(query_fn(state), keys)
        read = interpolate_prototypes(weights, protos)
        state = gru_step(comp.controller, state, read)
    return read, state
