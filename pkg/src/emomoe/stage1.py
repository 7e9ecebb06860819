"""Stage-1 artifacts, trained once per corpus and frozen before any
continual training:

* the VQ motion tokenizer (reconstruction + codebook losses);
* the text/motion feature embedder and the emotion classifier used by every
  evaluation, shared across all compared methods;
* the pretrained backbone LM. The backbone learns packing format, the motion
  token grammar and the text vocabulary from pairs whose text<->motion
  association has been deliberately scrambled, so it carries no knowledge of
  the actual description-to-motion mapping that continual training must add.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Adam, RngStream, Tensor, backward
from .core.checkpoint import load_tensors, save_tensors
from .embedder import (
    EmotionClassifier,
    FeatureEmbedder,
    fit_embedder,
    fit_emotion_classifier,
)
from .lm import BackboneLM, LMConfig, VocabLayout, llm_loss, pack_sample
from .synth import EMOTIONS, SampleRecord, StreamOrder, vocabulary
from .tokenizer import MotionTokenizer, TokenizerConfig, fit_tokenizer


@dataclass
class PretrainConfig:
    epochs: int = 4
    batch_size: int = 16
    lr: float = 1e-3


@dataclass
class Stage1Config:
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    embedder_dim: int = 32
    embedder_epochs: int = 40
    classifier_epochs: int = 60


@dataclass
class Stage1Artifacts:
    tokenizer: MotionTokenizer
    embedder: FeatureEmbedder
    emotion_clf: EmotionClassifier
    backbone_state: dict[str, np.ndarray]
    layout: VocabLayout
    config: Stage1Config
    stats: dict

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_tensors(out / "tokenizer.ntc", self.tokenizer.state())
        save_tensors(out / "embedder.ntc", self.embedder.state())
        save_tensors(out / "emotion_clf.ntc", self.emotion_clf.state())
        save_tensors(out / "backbone.ntc", self.backbone_state)
        meta = {
            "words": self.layout.words,
            "text_vocab": self.layout.text_vocab,
            "codebook_size": self.layout.codebook_size,
            "lm": vars(self.config.lm),
            "tokenizer": vars(self.config.tokenizer),
            "stats": self.stats,
        }
        (out / "stage1.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, in_dir: str | Path) -> "Stage1Artifacts":
        src = Path(in_dir)
        meta = json.loads((src / "stage1.json").read_text())
        tok_cfg = TokenizerConfig(**meta["tokenizer"])
        lm_cfg = LMConfig(**meta["lm"])
        config = Stage1Config(tokenizer=tok_cfg, lm=lm_cfg)
        layout = VocabLayout(meta["words"], meta["text_vocab"], meta["codebook_size"])
        tokenizer = MotionTokenizer(tok_cfg, RngStream(0))
        tokenizer.load_state(load_tensors(src / "tokenizer.ntc"))
        embedder = FeatureEmbedder(tokenizer, layout, meta["stats"]["embedder_dim"])
        embedder.load_state(load_tensors(src / "embedder.ntc"))
        clf = EmotionClassifier(tuple(EMOTIONS), embedder.dim)
        clf.load_state(load_tensors(src / "emotion_clf.ntc"))
        return cls(
            tokenizer=tokenizer,
            embedder=embedder,
            emotion_clf=clf,
            backbone_state=load_tensors(src / "backbone.ntc"),
            layout=layout,
            config=config,
            stats=meta["stats"],
        )

    def fresh_backbone(self) -> BackboneLM:
        lm = BackboneLM(self.config.lm, self.layout.codebook_size, RngStream(0))
        lm.load_state(self.backbone_state)
        lm.set_trainable(False)
        return lm


def run_stage1(
    stream: StreamOrder, config: Stage1Config, rng: RngStream
) -> Stage1Artifacts:
    train_records = [r for step in stream.steps for r in step.train]
    frames = np.stack([r.frames for r in train_records])

    tokenizer, fit = fit_tokenizer(frames, config.tokenizer, rng.child("tokenizer"))

    layout = VocabLayout(
        vocabulary(stream.specs), config.lm.text_vocab, config.tokenizer.codebook_size
    )
    tokenize_stream(stream, tokenizer)

    embedder, emb_stats = fit_embedder(
        train_records, tokenizer, layout, rng.child("embedder"),
        dim=config.embedder_dim, epochs=config.embedder_epochs,
    )
    clf, clf_acc = fit_emotion_classifier(
        train_records, embedder, tuple(EMOTIONS), rng.child("classifier"),
        epochs=config.classifier_epochs,
    )

    backbone, pretrain_losses = pretrain_backbone(
        train_records, layout, config, rng.child("pretrain"),
        instruction=stream.manifest["instruction"],
    )

    stats = {
        "tokenizer_relative_mse": fit.relative_mse,
        "tokenizer_code_usage": fit.code_usage,
        "embedder_dim": config.embedder_dim,
        "embedder_retrieval_top1": emb_stats.retrieval_top1,
        "classifier_accuracy": clf_acc,
        "pretrain_losses": pretrain_losses,
    }
    return Stage1Artifacts(
        tokenizer=tokenizer,
        embedder=embedder,
        emotion_clf=clf,
        backbone_state=backbone.state(),
        layout=layout,
        config=config,
        stats=stats,
    )


def tokenize_stream(stream: StreamOrder, tokenizer: MotionTokenizer) -> None:
    """Attach codebook ids to every record (train, val, test, heldout)."""
    groups = [r for step in stream.steps for r in step.all_records] + stream.heldout
    for start in range(0, len(groups), 128):
        chunk = groups[start : start + 128]
        ids = tokenizer.tokenize(np.stack([r.frames for r in chunk]))
        for r, row in zip(chunk, ids):
            r.motion_tokens = [int(v) for v in row]


def pretrain_backbone(
    records: list[SampleRecord],
    layout: VocabLayout,
    config: Stage1Config,
    rng: RngStream,
    instruction: str,
) -> tuple[BackboneLM, list[float]]:
    """Next-token training on scrambled (text, motion) pairs; all backbone
    parameters train, nothing else exists yet."""
    backbone = BackboneLM(config.lm, layout.codebook_size, rng.child("init"))
    scramble = rng.child("scramble")

    def packed_epoch() -> list:
        # fresh pairing every epoch: no stable text->motion mapping exists to
        # memorize, only format, vocabulary and the motion-token grammar
        perm = scramble.permutation(len(records))
        out = []
        for i, r in enumerate(records):
            donor = records[perm[i]]
            out.append(
                pack_sample(
                    layout, instruction, r.text, donor.motion_tokens,
                    EMOTIONS.index(r.emotion), r.scenario, config.lm.context,
                )
            )
        return out

    opt = Adam(list(backbone.params.values()), lr=config.pretrain.lr)
    batches = rng.child("batches")
    losses = []
    for _ in range(config.pretrain.epochs):
        packed = packed_epoch()
        lengths = {len(p.tokens) for p in packed}
        if len(lengths) != 1:
            raise AssertionError(f"template packing produced ragged lengths {lengths}")
        order = batches.permutation(len(packed))
        total, n = 0.0, 0
        for start in range(0, len(packed), config.pretrain.batch_size):
            chunk = [packed[i] for i in order[start : start + config.pretrain.batch_size]]
            tokens = np.stack([p.tokens for p in chunk])
            mask = np.stack([p.loss_mask for p in chunk])
            logits = backbone.transformer_logits(backbone.embed(tokens))
            loss = llm_loss(logits, tokens, mask)
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += loss.item()
            n += 1
        losses.append(total / n)
    backbone.set_trainable(False)
    return backbone, losses
