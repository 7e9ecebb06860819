"""Per-scenario LoRA experts with orthogonal-key gated routing.

One expert per scenario: a low-rank adapter pair per attachment site plus a
unit routing key. Earlier experts freeze when a new one is added; routing
softmaxes the projected query against the keys, optionally drops frozen
experts at random during training, keeps the top-k survivors and
re-normalizes. The adapter contribution is always evaluated in factored form.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .core import ContractViolation, RngStream, Tensor
from .core import tensor as T
from .core.linalg import orthogonal_complement_vector


@dataclass
class MoeConfig:
    rank: int = 4
    alpha: float = 8.0
    key_dim: int = 32
    bottleneck: int = 16
    mask_prob: float = 0.3
    top_k: int = 2


class LoraExpert:
    """Adapter pair (A, B) per attachment site plus a routing key."""

    def __init__(
        self,
        index: int,
        key: np.ndarray,
        sites: dict[str, tuple[int, int]],
        rank: int,
        rng: RngStream,
    ):
        self.index = index
        self.frozen = False
        self.key = Tensor(key, requires_grad=True, name=f"expert.{index}.key")
        self.adapters: dict[str, tuple[Tensor, Tensor]] = {}
        for site, (d_in, d_out) in sites.items():
            a = Tensor(
                rng.normal((d_in, rank), 0.01),
                requires_grad=True,
                name=f"expert.{index}.{site}.A",
            )
            b = Tensor(
                np.zeros((rank, d_out)),
                requires_grad=True,
                name=f"expert.{index}.{site}.B",
            )
            self.adapters[site] = (a, b)

    def parameters(self) -> list[Tensor]:
        out = [self.key]
        for a, b in self.adapters.values():
            out.extend([a, b])
        return out

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters():
            p.requires_grad = False

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for p in sorted(self.parameters(), key=lambda t: t.name):
            digest.update(p.name.encode())
            digest.update(p.data.tobytes())
        return digest.hexdigest()


class QueryProjector:
    """Down/up projection mapping pooled features to the key space."""

    def __init__(self, model_dim: int, config: MoeConfig, rng: RngStream):
        bd, kd = config.bottleneck, config.key_dim
        self.down_w = Tensor(
            rng.normal((model_dim, bd), 1.0 / np.sqrt(model_dim)),
            requires_grad=True, name="query_projector.down.w",
        )
        self.down_b = Tensor(np.zeros(bd), requires_grad=True,
                             name="query_projector.down.b")
        self.up_w = Tensor(
            rng.normal((bd, kd), 1.0 / np.sqrt(bd)),
            requires_grad=True, name="query_projector.up.w",
        )
        self.up_b = Tensor(np.zeros(kd), requires_grad=True,
                           name="query_projector.up.b")

    def parameters(self) -> list[Tensor]:
        return [self.down_w, self.down_b, self.up_w, self.up_b]

    def project(self, pooled: Tensor) -> Tensor:
        return T.relu(pooled @ self.down_w + self.down_b) @ self.up_w + self.up_b


class ExpertPool:
    def __init__(self, sites: dict[str, tuple[int, int]], config: MoeConfig):
        self.sites = dict(sites)
        self.config = config
        self.experts: list[LoraExpert] = []

    def __len__(self) -> int:
        return len(self.experts)

    @property
    def active_index(self) -> int:
        return len(self.experts) - 1

    @property
    def active(self) -> LoraExpert:
        return self.experts[-1]

    def add_expert(self, rng: RngStream) -> LoraExpert:
        """New unfrozen expert; previous ones freeze; key drawn orthogonal to
        all existing keys. Adapter output starts at exactly zero (B = 0)."""
        if len(self.experts) >= self.config.key_dim:
            raise ContractViolation(
                f"cannot add expert {len(self.experts)}: key space of "
                f"dimension {self.config.key_dim} is full"
            )
        existing = self.keys_matrix()
        key = orthogonal_complement_vector(existing, self.config.key_dim, rng)
        for e in self.experts:
            e.freeze()
        expert = LoraExpert(
            len(self.experts), key, self.sites, self.config.rank, rng
        )
        self.experts.append(expert)
        return expert

    def keys_matrix(self) -> np.ndarray:
        if not self.experts:
            return np.zeros((0, self.config.key_dim))
        return np.stack([e.key.data for e in self.experts])

    def renormalize_active_key(self) -> None:
        key = self.experts[-1].key
        key.data = key.data / np.linalg.norm(key.data)

    def state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for e in self.experts:
            for p in e.parameters():
                out[p.name] = p.data.copy()
        return out

    def manifest(self) -> dict:
        return {
            "count": len(self.experts),
            "rank": self.config.rank,
            "key_dim": self.config.key_dim,
            "sites": sorted(self.sites),
        }


@dataclass
class GateOutput:
    """Routing decision for one batch: logits, normalized weights, which
    experts were randomly masked, and which survived top-k per sample."""

    logits: Tensor  # (B, E)
    weights: Tensor  # (B, E)
    masked: np.ndarray  # (E,) bool, True = dropped before top-k
    kept: np.ndarray  # (B, E) bool


def gate_weights(pooled: Tensor, pool: ExpertPool, projector: QueryProjector) -> GateOutput:
    """Softmax over dot products of the projected query with every key."""
    if len(pool) == 0:
        raise ContractViolation("gate_weights: empty expert pool")
    query = projector.project(pooled)
    keys = T.concat([T.reshape(e.key, (1, -1)) for e in pool.experts], axis=0)
    logits = query @ T.transpose(keys)
    weights = T.softmax(logits)
    n, e = weights.shape
    return GateOutput(
        logits=logits,
        weights=weights,
        masked=np.zeros(e, dtype=bool),
        kept=np.ones((n, e), dtype=bool),
    )


def mask_and_topk(
    gate: GateOutput,
    pool: ExpertPool,
    rng: RngStream | None,
    mask_prob: float,
    top_k: int,
    training: bool,
) -> GateOutput:
    """Drop frozen experts with probability ``mask_prob`` (training only),
    keep the ``top_k`` largest-weight survivors per sample, and re-softmax
    the retained logits. The active expert is never maskable."""
    if top_k < 1:
        raise ContractViolation("top_k must be >= 1")
    n, n_experts = gate.weights.shape
    masked = np.zeros(n_experts, dtype=bool)
    if training and mask_prob > 0 and n_experts > 1:
        draws = rng.uniform((n_experts,))
        for j, expert in enumerate(pool.experts):
            if expert.frozen and draws[j] < mask_prob:
                masked[j] = True
    masked[pool.active_index] = False

    base = gate.weights.data
    kept = np.zeros((n, n_experts), dtype=bool)
    candidates = np.flatnonzero(~masked)
    k = min(top_k, len(candidates))
    for i in range(n):
        order = candidates[np.argsort(-base[i, candidates], kind="stable")]
        kept[i, order[:k]] = True

    if kept.all():
        return GateOutput(gate.logits, gate.weights, masked, kept)
    penalty = np.where(kept, 0.0, -1e9)
    weights = T.softmax(gate.logits + Tensor(penalty))
    # exact zeros for dropped experts, exact renormalization for survivors
    return GateOutput(gate.logits, weights, masked, kept)


def moe_linear(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    pool: ExpertPool | None,
    site: str,
    gate: GateOutput | None,
    config: MoeConfig,
) -> Tensor:
    """Base linear plus the gated factored adapter contributions.

    The merged weight matrix is never materialized; each expert contributes
    ``(x A) B * (alpha/rank)`` scaled by its per-sample gate weight.
    """
    out = x @ weight
    if bias is not None:
        out = out + bias
    if pool is None or gate is None or len(pool) == 0:
        return out
    scale = config.alpha / config.rank
    for j, expert in enumerate(pool.experts):
        if not gate.kept[:, j].any():
            continue
        a, b = expert.adapters[site]
        w_j = T.reshape(gate.weights[:, j], (-1, 1, 1))
        out = out + ((x @ a) @ b) * w_j * scale
    return out


def freeze_policy(
    pool: ExpertPool, projector: QueryProjector, scenario_index: int
) -> list[Tensor]:
    """Trainable set for the given scenario: the active expert's adapters and
    key, plus the query projector. Frozen experts and the backbone stay out."""
    if scenario_index != pool.active_index:
        raise ContractViolation(
            f"scenario {scenario_index} is not the active expert "
            f"({pool.active_index})"
        )
    return pool.active.parameters() + projector.parameters()
