"""Emotion decoupling block: self-attention over the input, cross-attention
against a K-means-compressed global dictionary, FFN fusion into an
emotion-highlighted representation, and a classification constraint loss.

Both attention paths share one width; the dictionary entries are frozen data
(only their key/value projections train), refreshed per scenario from that
scenario's training features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ContractViolation, RngStream, Tensor
from .core import tensor as T
from .core.linalg import kmeans


@dataclass
class EmotionBlockConfig:
    model_dim: int
    attn_dim: int = 32
    dictionary_size: int = 32
    probe_hidden: int = 32
    emotions: tuple[str, ...] = ("Happy", "Sad", "Angry", "Neutral")

    def emotion_index(self, label: str) -> int:
        try:
            return self.emotions.index(label)
        except ValueError:
            raise ContractViolation(f"label {label!r} not in {self.emotions}") from None


class GlobalDictionary:
    """Frozen feature prototypes serving as cross-attention key/value sources."""

    def __init__(self, entries: np.ndarray | None = None):
        self.entries = None if entries is None else np.asarray(entries, float)

    @property
    def initialized(self) -> bool:
        return self.entries is not None

    @property
    def size(self) -> int:
        return 0 if self.entries is None else self.entries.shape[0]


def init_global_dictionary(
    features: np.ndarray, size: int, rng: RngStream
) -> GlobalDictionary:
    """Compress pooled training features into ``size`` K-means centroids."""
    features = np.asarray(features, float)
    if features.shape[0] < size:
        raise ContractViolation(
            f"init_global_dictionary: {features.shape[0]} features < {size} entries"
        )
    centroids, _ = kmeans(features, size, rng)
    return GlobalDictionary(centroids)


class EmotionBlock:
    def __init__(self, config: EmotionBlockConfig, rng: RngStream):
        self.config = config
        dm, da, hid = config.model_dim, config.attn_dim, config.probe_hidden
        n_emo = len(config.emotions)
        self.params: dict[str, Tensor] = {}

        def par(name, shape, scale=None):
            scale = scale if scale is not None else 1.0 / np.sqrt(shape[0])
            t = Tensor(rng.normal(shape, scale), requires_grad=True, name=name)
            self.params[name] = t
            return t

        def bias(name, n):
            t = Tensor(np.zeros(n), requires_grad=True, name=name)
            self.params[name] = t
            return t

        # query networks f and g, plus input / dictionary projections
        self.wq_self = par("emotion.f.w", (dm, da))
        self.wk_self = par("emotion.k_self.w", (dm, da))
        self.wv_self = par("emotion.v_self.w", (dm, da))
        self.wq_cross = par("emotion.g.w", (dm, da))
        self.wk_dict = par("emotion.k_dict.w", (dm, da))
        self.wv_dict = par("emotion.v_dict.w", (dm, da))
        # per-branch FFNs and the fusion affine
        self.ffn1_w1 = par("emotion.ffn1.w1", (da, da))
        self.ffn1_b1 = bias("emotion.ffn1.b1", da)
        self.ffn1_w2 = par("emotion.ffn1.w2", (da, da))
        self.ffn1_b2 = bias("emotion.ffn1.b2", da)
        self.ffn2_w1 = par("emotion.ffn2.w1", (da, da))
        self.ffn2_b1 = bias("emotion.ffn2.b1", da)
        self.ffn2_w2 = par("emotion.ffn2.w2", (da, da))
        self.ffn2_b2 = bias("emotion.ffn2.b2", da)
        self.fuse_w = par("emotion.fuse.w", (2 * da, dm))
        self.fuse_b = bias("emotion.fuse.b", dm)
        # classification probe
        self.probe_w1 = par("emotion.probe.w1", (dm, hid))
        self.probe_b1 = bias("emotion.probe.b1", hid)
        self.probe_w2 = par("emotion.probe.w2", (hid, n_emo))
        self.probe_b2 = bias("emotion.probe.b2", n_emo)
        self._scale = 1.0 / np.sqrt(da)

    def probe_params(self) -> list[Tensor]:
        return [self.probe_w1, self.probe_b1, self.probe_w2, self.probe_b2]

    def block_params(self) -> list[Tensor]:
        probes = set(id(p) for p in self.probe_params())
        return [p for p in self.params.values() if id(p) not in probes]

    # -- sampling paths ------------------------------------------------------

    def self_sample(self, x: Tensor) -> Tensor:
        """Attention of the input over itself; rows of the weight matrix are
        probability vectors, output is (B, L, attn_dim)."""
        x = self._batched(x)
        if x.shape[1] < 1:
            raise ContractViolation("self_sample: empty sequence")
        q = x @ self.wq_self
        k = x @ self.wk_self
        v = x @ self.wv_self
        attn = T.softmax((q @ k.swap_last2()) * self._scale)
        return attn @ v

    def cross_sample(self, x: Tensor, dictionary: GlobalDictionary) -> Tensor:
        """Attention of the input over dictionary entries; every output row is
        a convex combination of projected entries."""
        if not dictionary.initialized:
            raise ContractViolation("cross_sample: dictionary not initialized")
        x = self._batched(x)
        q = x @ self.wq_cross
        entries = Tensor(dictionary.entries)
        kg = entries @ self.wk_dict
        vg = entries @ self.wv_dict
        attn = T.softmax((q @ T.transpose(kg)) * self._scale)
        return attn @ vg

    def fuse(self, s_x: Tensor, s_m: Tensor) -> Tensor:
        """Concatenate branch features and map to model width."""
        if s_x.shape[:-1] != s_m.shape[:-1]:
            raise ContractViolation(
                f"fuse: sequence shapes differ {s_x.shape} vs {s_m.shape}"
            )
        f1 = T.relu(s_x @ self.ffn1_w1 + self.ffn1_b1) @ self.ffn1_w2 + self.ffn1_b2
        f2 = T.relu(s_m @ self.ffn2_w1 + self.ffn2_b1) @ self.ffn2_w2 + self.ffn2_b2
        return T.concat([f1, f2], axis=-1) @ self.fuse_w + self.fuse_b

    def forward(self, x: Tensor, dictionary: GlobalDictionary) -> Tensor:
        return self.fuse(self.self_sample(x), self.cross_sample(x, dictionary))

    # -- emotion probe ----------------------------------------------------------

    def emo_logits(self, h: Tensor) -> Tensor:
        """Classify; 3-D input (B, L, d) is mean-pooled over the sequence,
        2-D input is taken as already pooled."""
        h = h if isinstance(h, Tensor) else Tensor(h)
        if h.ndim == 1:
            h = T.reshape(h, (1, -1))
        pooled = h.mean(axis=1) if h.ndim == 3 else h
        hidden = T.relu(pooled @ self.probe_w1 + self.probe_b1)
        return hidden @ self.probe_w2 + self.probe_b2

    def emo_loss(self, h: Tensor, labels) -> Tensor:
        """Cross entropy of the probe prediction against true labels.

        ``labels`` may be a single label or a sequence; strings are resolved
        against the configured emotion set.
        """
        single = isinstance(labels, (str, int, np.integer))
        if single:
            labels = [labels]
        idx = np.array(
            [
                self.config.emotion_index(l) if isinstance(l, str) else int(l)
                for l in labels
            ]
        )
        if (idx < 0).any() or (idx >= len(self.config.emotions)).any():
            raise ContractViolation(f"emotion index out of range: {idx}")
        logits = self.emo_logits(self._batched(h))
        return T.cross_entropy_rows(logits, idx).mean()

    @staticmethod
    def _batched(x: Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return T.reshape(x, (1,) + x.shape) if x.ndim == 2 else x

    # -- persistence ----------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.asarray(state[name], float).reshape(p.shape)
