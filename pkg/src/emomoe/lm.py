"""Tiny decoder-only LM over a joint text + motion-token vocabulary.

Consumes ``[BOS] instruction [SEP] description [SEP] motion-tokens [EOS]``
packs; the emotion block's output is residually added to the embedding-layer
output at description positions, and LoRA adapters hook the attention query
and value projections of every layer. Decoding after the second separator is
constrained to motion tokens plus EOS.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ContractViolation, RngStream, Tensor, no_grad
from .core import tensor as T
from .emotion import EmotionBlock, GlobalDictionary
from .experts import (
    ExpertPool,
    GateOutput,
    MoeConfig,
    QueryProjector,
    gate_weights,
    mask_and_topk,
)


@dataclass
class LMConfig:
    layers: int = 4
    width: int = 128
    heads: int = 4
    context: int = 256
    text_vocab: int = 512

    def __post_init__(self):
        if self.width % self.heads:
            raise ContractViolation("width must be divisible by head count")


class VocabLayout:
    """Disjoint id ranges: specials + words in [0, text_vocab), motion codes
    in [text_vocab, text_vocab + codebook_size)."""

    PAD, BOS, EOS, SEP = 0, 1, 2, 3

    def __init__(self, words: list[str], text_vocab: int, codebook_size: int):
        if len(words) + 4 > text_vocab:
            raise ContractViolation(
                f"{len(words)} words do not fit in a text vocab of {text_vocab}"
            )
        self.words = list(words)
        self.word_to_id = {w: 4 + i for i, w in enumerate(words)}
        self.text_vocab = text_vocab
        self.codebook_size = codebook_size
        self.motion_offset = text_vocab
        self.total = text_vocab + codebook_size

    def encode_words(self, text: str) -> list[int]:
        ids = []
        for raw in text.split():
            word = raw.strip(".,!?").lower()
            if not word:
                continue
            if word not in self.word_to_id:
                raise ContractViolation(f"word {word!r} not in the closed vocabulary")
            ids.append(self.word_to_id[word])
        return ids

    def motion_ids(self, codes) -> list[int]:
        out = []
        for c in codes:
            c = int(c)
            if not 0 <= c < self.codebook_size:
                raise ContractViolation(f"motion code {c} out of range")
            out.append(self.motion_offset + c)
        return out

    def is_motion(self, token: int) -> bool:
        return self.motion_offset <= token < self.total

    def to_codes(self, tokens) -> list[int]:
        return [int(t) - self.motion_offset for t in tokens if self.is_motion(int(t))]


@dataclass
class PackedSample:
    tokens: np.ndarray  # (L,) int
    loss_mask: np.ndarray  # (L,) bool; True at target positions (motion + EOS)
    desc_span: tuple[int, int]
    emotion_index: int
    scenario: int
    text: str


def pack_sample(
    layout: VocabLayout,
    instruction: str,
    text: str,
    motion_codes,
    emotion_index: int,
    scenario: int,
    context: int,
) -> PackedSample:
    instr = layout.encode_words(instruction)
    desc = layout.encode_words(text)
    motion = layout.motion_ids(motion_codes)
    tokens = (
        [layout.BOS] + instr + [layout.SEP] + desc + [layout.SEP]
        + motion + [layout.EOS]
    )
    if len(tokens) > context:
        raise ContractViolation(f"packed length {len(tokens)} exceeds context {context}")
    desc_start = 2 + len(instr)
    desc_end = desc_start + len(desc)
    mask = np.zeros(len(tokens), dtype=bool)
    mask[desc_end + 1 : len(tokens)] = True  # motion tokens and the EOS
    return PackedSample(
        tokens=np.array(tokens, dtype=np.int64),
        loss_mask=mask,
        desc_span=(desc_start, desc_end),
        emotion_index=emotion_index,
        scenario=scenario,
        text=text,
    )


class BackboneLM:
    """Pre-LN decoder-only transformer with learned positional embeddings."""

    def __init__(self, config: LMConfig, codebook_size: int, rng: RngStream):
        self.config = config
        self.vocab_size = config.text_vocab + codebook_size
        w, layers = config.width, config.layers
        self.params: dict[str, Tensor] = {}
        res_scale = 0.02 / np.sqrt(2 * layers)

        def par(name, shape, scale=0.02):
            t = Tensor(rng.normal(shape, scale), requires_grad=True, name=name)
            self.params[name] = t
            return t

        def bias(name, n, value=0.0):
            t = Tensor(np.full(n, value), requires_grad=True, name=name)
            self.params[name] = t
            return t

        self.wte = par("lm.wte", (self.vocab_size, w))
        self.wpe = par("lm.wpe", (config.context, w), 0.01)
        self.blocks = []
        for l in range(layers):
            blk = {
                "ln1.g": bias(f"lm.{l}.ln1.g", w, 1.0),
                "ln1.b": bias(f"lm.{l}.ln1.b", w),
                "wq": par(f"lm.{l}.attn.wq", (w, w)),
                "bq": bias(f"lm.{l}.attn.bq", w),
                "wk": par(f"lm.{l}.attn.wk", (w, w)),
                "bk": bias(f"lm.{l}.attn.bk", w),
                "wv": par(f"lm.{l}.attn.wv", (w, w)),
                "bv": bias(f"lm.{l}.attn.bv", w),
                "wo": par(f"lm.{l}.attn.wo", (w, w), res_scale),
                "bo": bias(f"lm.{l}.attn.bo", w),
                "ln2.g": bias(f"lm.{l}.ln2.g", w, 1.0),
                "ln2.b": bias(f"lm.{l}.ln2.b", w),
                "w1": par(f"lm.{l}.mlp.w1", (w, 4 * w)),
                "b1": bias(f"lm.{l}.mlp.b1", 4 * w),
                "w2": par(f"lm.{l}.mlp.w2", (4 * w, w), res_scale),
                "b2": bias(f"lm.{l}.mlp.b2", w),
            }
            self.blocks.append(blk)
        self.ln_f_g = bias("lm.lnf.g", w, 1.0)
        self.ln_f_b = bias("lm.lnf.b", w)
        self.head_w = par("lm.head.w", (w, self.vocab_size))
        self.head_b = bias("lm.head.b", self.vocab_size)
        self._mask_cache: dict[int, np.ndarray] = {}

    def adapter_sites(self) -> dict[str, tuple[int, int]]:
        w = self.config.width
        sites = {}
        for l in range(self.config.layers):
            sites[f"layer{l}.q"] = (w, w)
            sites[f"layer{l}.v"] = (w, w)
        return sites

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.max() >= self.vocab_size or tokens.min() < 0:
            raise ContractViolation("token id outside vocabulary")
        length = tokens.shape[-1]
        if length > self.config.context:
            raise ContractViolation(
                f"sequence length {length} exceeds context {self.config.context}"
            )
        return T.rows(self.wte, tokens) + self.wpe[:length]

    def _causal_bias(self, length: int) -> np.ndarray:
        if length not in self._mask_cache:
            mask = np.triu(np.full((length, length), -1e9), k=1)
            self._mask_cache[length] = mask
        return self._mask_cache[length]

    def transformer_logits(
        self,
        emb: Tensor,
        pool: ExpertPool | None = None,
        gate: GateOutput | None = None,
        moe_config: MoeConfig | None = None,
        last_only: bool = False,
    ) -> Tensor:
        from .experts import moe_linear

        cfg = self.config
        b, length, w = emb.shape
        heads, dh = cfg.heads, w // cfg.heads
        bias = Tensor(self._causal_bias(length))
        x = emb
        for l, blk in enumerate(self.blocks):
            xn = T.layer_norm(x, blk["ln1.g"], blk["ln1.b"])
            q = moe_linear(xn, blk["wq"], blk["bq"], pool, f"layer{l}.q", gate,
                           moe_config or MoeConfig())
            k = xn @ blk["wk"] + blk["bk"]
            v = moe_linear(xn, blk["wv"], blk["bv"], pool, f"layer{l}.v", gate,
                           moe_config or MoeConfig())
            q = T.transpose(T.reshape(q, (b, length, heads, dh)), (0, 2, 1, 3))
            k = T.transpose(T.reshape(k, (b, length, heads, dh)), (0, 2, 1, 3))
            v = T.transpose(T.reshape(v, (b, length, heads, dh)), (0, 2, 1, 3))
            att = T.softmax((q @ k.swap_last2()) * (1.0 / np.sqrt(dh)) + bias)
            ctx = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (b, length, w))
            x = x + ctx @ blk["wo"] + blk["bo"]
            xn = T.layer_norm(x, blk["ln2.g"], blk["ln2.b"])
            x = x + T.relu(xn @ blk["w1"] + blk["b1"]) @ blk["w2"] + blk["b2"]
        if last_only:
            x = x[:, -1:, :]
        x = T.layer_norm(x, self.ln_f_g, self.ln_f_b)
        return x @ self.head_w + self.head_b

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.asarray(state[name], float).reshape(p.shape)


def llm_loss(logits: Tensor, tokens: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean next-token cross entropy over masked target positions only."""
    tokens = np.asarray(tokens)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if loss_mask.shape != tokens.shape:
        raise ContractViolation("loss mask shape does not match tokens")
    target_mask = loss_mask[:, 1:] if tokens.ndim == 2 else loss_mask[None, 1:]
    if tokens.ndim == 1:
        tokens = tokens[None]
        logits = T.reshape(logits, (1,) + logits.shape)
    sel = np.flatnonzero(target_mask.ravel())
    if sel.size == 0:
        raise ContractViolation("llm_loss: empty loss mask")
    vocab = logits.shape[-1]
    flat = T.reshape(logits[:, :-1, :], (-1, vocab))
    picked = T.take_batch(flat, sel)
    targets = tokens[:, 1:].ravel()[sel]
    return T.cross_entropy_rows(picked, targets).mean()


def total_loss(l_llm: Tensor, l_emo: Tensor | None, lam: float) -> Tensor:
    """Weighted sum of the generation and emotion-constraint losses."""
    if l_emo is None or lam == 0.0:
        return l_llm
    return l_llm + l_emo * lam


@dataclass
class GeneratedSeq:
    codes: list[int]  # codebook ids (motion-token range, un-offset)
    truncated: bool


class MotionLM:
    """Backbone + emotion block + expert pool wired per the training recipe."""

    def __init__(
        self,
        backbone: BackboneLM,
        layout: VocabLayout,
        emotion_block: EmotionBlock | None = None,
        pool: ExpertPool | None = None,
        projector: QueryProjector | None = None,
        moe_config: MoeConfig | None = None,
    ):
        self.backbone = backbone
        self.layout = layout
        self.emotion_block = emotion_block
        self.pool = pool
        self.projector = projector
        self.moe_config = moe_config or MoeConfig()
        self.dictionary = GlobalDictionary()

    def _inject(self, emb: Tensor, span: tuple[int, int]):
        """Run the block on description positions; residually add its output.

        Returns (embedding, h, pooled query features)."""
        s, e = span
        x = emb[:, s:e, :]
        if self.emotion_block is not None:
            h = self.emotion_block.forward(x, self.dictionary)
            bsz, length, w = emb.shape
            pad_l = Tensor(np.zeros((bsz, s, w)))
            pad_r = Tensor(np.zeros((bsz, length - e, w)))
            emb = emb + T.concat([pad_l, h, pad_r], axis=1)
            return emb, h, h.mean(axis=1)
        return emb, None, x.mean(axis=1)

    def _gate(self, pooled: Tensor, training: bool, rng: RngStream | None) -> GateOutput | None:
        if self.pool is None or len(self.pool) == 0:
            return None
        if self.projector is None:
            # routing disabled: single shared expert at weight one
            n = pooled.shape[0]
            ones = Tensor(np.ones((n, len(self.pool))))
            return GateOutput(
                logits=ones, weights=ones,
                masked=np.zeros(len(self.pool), dtype=bool),
                kept=np.ones((n, len(self.pool)), dtype=bool),
            )
        gate = gate_weights(pooled, self.pool, self.projector)
        return mask_and_topk(
            gate, self.pool, rng, self.moe_config.mask_prob if training else 0.0,
            self.moe_config.top_k, training,
        )

    def description_state(
        self, tokens: np.ndarray, span: tuple[int, int]
    ) -> tuple[Tensor | None, Tensor]:
        """Emotion features for the description positions: (block output h or
        None, pooled per-sample query features)."""
        emb = self.backbone.embed(tokens)
        _, h, pooled = self._inject(emb, span)
        return h, pooled

    def forward_batch(
        self,
        tokens: np.ndarray,
        span: tuple[int, int],
        training: bool = False,
        mask_rng: RngStream | None = None,
    ) -> tuple[Tensor, Tensor | None, GateOutput | None]:
        """Logits over the batch plus the emotion features and gate decision.

        All samples in the batch must share the description span (packing is
        template-based, so this holds for whole corpora)."""
        emb = self.backbone.embed(tokens)
        emb, h, pooled = self._inject(emb, span)
        gate = self._gate(pooled, training, mask_rng)
        logits = self.backbone.transformer_logits(
            emb, self.pool, gate, self.moe_config
        )
        return logits, h, gate

    def generate(
        self,
        instruction: str,
        texts: list[str],
        rng: RngStream | None = None,
        temperature: float = 0.0,
        max_new: int = 24,
    ) -> list[GeneratedSeq]:
        """Batched autoregressive decoding constrained to motion tokens + EOS.

        Greedy when ``temperature`` is 0; otherwise seeded temperature
        sampling. Sequences without EOS inside ``max_new`` are truncated and
        flagged. All prompts must tokenize to the same length.
        """
        if temperature > 0 and rng is None:
            raise ContractViolation("sampled decoding needs an rng")
        layout = self.layout
        instr = layout.encode_words(instruction)
        descs = [layout.encode_words(t) for t in texts]
        if len({len(d) for d in descs}) != 1:
            raise ContractViolation("generate: prompts must share one length")
        prompts = [
            [layout.BOS] + instr + [layout.SEP] + d + [layout.SEP] for d in descs
        ]
        span = (2 + len(instr), 2 + len(instr) + len(descs[0]))
        tokens = np.array(prompts, dtype=np.int64)
        n = tokens.shape[0]
        allowed = np.full(layout.total, -1e30)
        allowed[layout.motion_offset : layout.total] = 0.0
        eos_open = np.full(layout.total, -1e30)
        eos_open[layout.motion_offset : layout.total] = 0.0
        eos_open[layout.EOS] = 0.0

        done = np.zeros(n, dtype=bool)
        out_codes: list[list[int]] = [[] for _ in range(n)]
        with no_grad():
            for step in range(max_new):
                emb = self.backbone.embed(tokens)
                emb, _, pooled = self._inject(emb, span)
                gate = self._gate(pooled, False, None)
                logits = self.backbone.transformer_logits(
                    emb, self.pool, gate, self.moe_config, last_only=True
                )
                last = logits.data[:, -1, :]
                last = last + (allowed if step == 0 else eos_open)
                if temperature > 0:
                    scaled = last / temperature
                    scaled -= scaled.max(axis=-1, keepdims=True)
                    probs = np.exp(scaled)
                    probs /= probs.sum(axis=-1, keepdims=True)
                    draws = rng.uniform((n,))
                    nxt = (probs.cumsum(axis=-1) < draws[:, None]).sum(axis=-1)
                    nxt = np.minimum(nxt, layout.total - 1)
                else:
                    nxt = last.argmax(axis=-1)
                for i in range(n):
                    if done[i]:
                        nxt[i] = layout.PAD
                    elif nxt[i] == layout.EOS:
                        done[i] = True
                    else:
                        out_codes[i].append(int(nxt[i]) - layout.motion_offset)
                if done.all():
                    break
                tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
        return [
            GeneratedSeq(codes=c, truncated=not d) for c, d in zip(out_codes, done)
        ]
