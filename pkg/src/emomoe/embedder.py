"""Evaluation-side models, trained once on stage-1 data and then frozen:

* a joint text/motion feature embedder (contrastive) whose 32-d features feed
  FID, retrieval precision, diversity and multimodality;
* an emotion classifier over motion features for the weighted-F1 metric.

Both must be identical across every compared method in a run, so they are
trained before any continual training and checkpointed alongside the
tokenizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Adam, RngStream, Tensor, backward, no_grad
from .core import tensor as T
from .lm import VocabLayout
from .synth import SampleRecord
from .tokenizer import MotionTokenizer


class FeatureEmbedder:
    """Motion path: frozen tokenizer encoder, mean pool, linear head.
    Text path: bag of word embeddings, linear head. Features L2-normalized."""

    def __init__(self, tokenizer: MotionTokenizer, layout: VocabLayout,
                 dim: int = 32, rng: RngStream | None = None):
        rng = rng or RngStream(0)
        self.tokenizer = tokenizer
        self.layout = layout
        self.dim = dim
        feat_in = tokenizer.config.width  # penultimate encoder activations
        self.motion_w = Tensor(rng.normal((feat_in, dim), 1.0 / np.sqrt(feat_in)),
                               requires_grad=True, name="embedder.motion.w")
        self.motion_b = Tensor(np.zeros(dim), requires_grad=True,
                               name="embedder.motion.b")
        self.text_table = Tensor(rng.normal((layout.text_vocab, dim), 0.1),
                                 requires_grad=True, name="embedder.text.table")
        self.text_w = Tensor(rng.normal((dim, dim), 1.0 / np.sqrt(dim)),
                             requires_grad=True, name="embedder.text.w")
        self.text_b = Tensor(np.zeros(dim), requires_grad=True,
                             name="embedder.text.b")
        self.temperature = 0.1

    def parameters(self) -> list[Tensor]:
        return [self.motion_w, self.motion_b, self.text_table, self.text_w, self.text_b]

    def _pooled_encodings(self, frames: np.ndarray) -> np.ndarray:
        with no_grad():
            enc = self.tokenizer.encode(Tensor(frames), return_hidden=True)
        return enc.data.mean(axis=-2)

    def motion_features(self, frames) -> np.ndarray:
        """L2-normalized features for (B, T, D) stacked frames or a list of
        (T_i, D) arrays (lengths may differ)."""
        if isinstance(frames, np.ndarray) and frames.ndim == 3:
            pooled = self._pooled_encodings(frames)
        else:
            pooled = np.stack([self._pooled_encodings(np.asarray(f)) for f in frames])
        feats = pooled @ self.motion_w.data + self.motion_b.data
        return _normalize(feats)

    def text_features(self, texts: list[str]) -> np.ndarray:
        bags = np.stack([
            self.text_table.data[self.layout.encode_words(t)].mean(axis=0)
            for t in texts
        ])
        feats = bags @ self.text_w.data + self.text_b.data
        return _normalize(feats)

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.asarray(state[p.name], float).reshape(p.shape)


def _normalize(feats: np.ndarray) -> np.ndarray:
    return feats / np.maximum(np.linalg.norm(feats, axis=-1, keepdims=True), 1e-12)


def _normalize_t(feats: Tensor) -> Tensor:
    norm = T.sqrt((feats ** 2).sum(axis=-1, keepdims=True)) + 1e-12
    return feats / norm


@dataclass
class EmbedderFitStats:
    losses: list[float]
    retrieval_top1: float


def fit_embedder(
    records: list[SampleRecord],
    tokenizer: MotionTokenizer,
    layout: VocabLayout,
    rng: RngStream,
    dim: int = 32,
    epochs: int = 60,
    lr: float = 3e-3,
) -> tuple[FeatureEmbedder, EmbedderFitStats]:
    """Symmetric InfoNCE over (motion, text) pairs.

    Batches hold the distinct texts of ONE scenario so the in-batch negatives
    force within-scenario discrimination; cross-scenario separation comes for
    free from the motion styles and would otherwise dominate the loss.
    """
    emb = FeatureEmbedder(tokenizer, layout, dim, rng.child("init"))
    by_text: dict[str, list[int]] = {}
    scenario_of: dict[str, int] = {}
    for i, r in enumerate(records):
        by_text.setdefault(r.text, []).append(i)
        scenario_of[r.text] = r.scenario
    texts = sorted(by_text)
    by_scenario: dict[int, list[str]] = {}
    for t in texts:
        by_scenario.setdefault(scenario_of[t], []).append(t)
    pooled_all = np.concatenate([
        emb._pooled_encodings(np.stack([r.frames for r in records[i : i + 128]]))
        for i in range(0, len(records), 128)
    ])
    word_ids = {t: np.array(layout.encode_words(t)) for t in texts}

    opt = Adam(emb.parameters(), lr=lr)
    batches = rng.child("batches")
    losses = []
    for epoch in range(epochs):
        if epoch == int(0.7 * epochs):
            opt.lr = lr / 3
        epoch_loss, n = 0.0, 0
        for scenario in sorted(by_scenario):
            group = by_scenario[scenario]
            order = batches.permutation(len(group))
            chosen = [group[i] for i in order]
            rec_idx = [
                by_text[t][int(batches.integers(0, len(by_text[t])))]
                for t in chosen
            ]
            m_in = Tensor(pooled_all[rec_idx])
            fm = _normalize_t(m_in @ emb.motion_w + emb.motion_b)
            bags = T.concat(
                [T.rows(emb.text_table, word_ids[t]).mean(axis=0, keepdims=True)
                 for t in chosen],
                axis=0,
            )
            ft = _normalize_t(bags @ emb.text_w + emb.text_b)
            logits = (fm @ T.transpose(ft)) * (1.0 / emb.temperature)
            targets = np.arange(len(chosen))
            loss = (
                T.cross_entropy_rows(logits, targets).mean()
                + T.cross_entropy_rows(T.transpose(logits), targets).mean()
            ) * 0.5
            opt.zero_grad()
            backward(loss)
            opt.step()
            epoch_loss += loss.item()
            n += 1
        losses.append(epoch_loss / max(n, 1))

    # training-set retrieval sanity: match each motion to its own text
    fm = _normalize(pooled_all @ emb.motion_w.data + emb.motion_b.data)
    ft = emb.text_features(texts)
    text_of = np.array([texts.index(r.text) for r in records])
    hits = (np.argmax(fm @ ft.T, axis=1) == text_of).mean()
    return emb, EmbedderFitStats(losses=losses, retrieval_top1=float(hits))


class EmotionClassifier:
    """Probe-architecture MLP over motion features; frozen after stage 1."""

    def __init__(self, emotions: tuple[str, ...], dim: int = 32,
                 hidden: int = 32, rng: RngStream | None = None):
        rng = rng or RngStream(0)
        self.emotions = tuple(emotions)
        self.w1 = Tensor(rng.normal((dim, hidden), 1.0 / np.sqrt(dim)),
                         requires_grad=True, name="emotion_clf.w1")
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, name="emotion_clf.b1")
        self.w2 = Tensor(rng.normal((hidden, len(emotions)), 1.0 / np.sqrt(hidden)),
                         requires_grad=True, name="emotion_clf.w2")
        self.b2 = Tensor(np.zeros(len(emotions)), requires_grad=True,
                         name="emotion_clf.b2")

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, features: np.ndarray) -> np.ndarray:
        hidden = np.maximum(features @ self.w1.data + self.b1.data, 0.0)
        return hidden @ self.w2.data + self.b2.data

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.logits(features).argmax(axis=-1)

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.asarray(state[p.name], float).reshape(p.shape)


def fit_emotion_classifier(
    records: list[SampleRecord],
    embedder: FeatureEmbedder,
    emotions: tuple[str, ...],
    rng: RngStream,
    epochs: int = 60,
    batch_size: int = 64,
    lr: float = 3e-3,
) -> tuple[EmotionClassifier, float]:
    """Supervised fit on real corpus motions; returns (classifier, accuracy)."""
    clf = EmotionClassifier(emotions, embedder.dim, rng=rng.child("init"))
    feats = np.concatenate([
        embedder.motion_features(np.stack([r.frames for r in records[i : i + 128]]))
        for i in range(0, len(records), 128)
    ])
    labels = np.array([emotions.index(r.emotion) for r in records])
    opt = Adam(clf.parameters(), lr=lr)
    batches = rng.child("batches")
    for _ in range(epochs):
        order = batches.permutation(len(records))
        for start in range(0, len(records), batch_size):
            idx = order[start : start + batch_size]
            hidden = T.relu(Tensor(feats[idx]) @ clf.w1 + clf.b1)
            logits = hidden @ clf.w2 + clf.b2
            loss = T.cross_entropy_rows(logits, labels[idx]).mean()
            opt.zero_grad()
            backward(loss)
            opt.step()
    accuracy = float((clf.predict(feats) == labels).mean())
    return clf, accuracy
