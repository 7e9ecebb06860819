"""Sequential scenario training and the full evaluation suite.

Each run walks the scenario stream in a given order: refresh the global
dictionary from the incoming scenario's features, add (or reuse) the LoRA
expert, train the scenario under the freeze policy, then evaluate every
already-seen scenario to fill row i of the result matrices. Controls
(sequential single adapter, pooled multi-task) and the ablation switches ride
the same loop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Adam, ContractViolation, NumericFault, RngStream, Tensor, backward, no_grad
from .core.checkpoint import save_tensors
from .embedder import FeatureEmbedder
from .emotion import EmotionBlock, EmotionBlockConfig, init_global_dictionary
from .experts import ExpertPool, MoeConfig, QueryProjector, freeze_policy
from .lm import MotionLM, PackedSample, llm_loss, pack_sample, total_loss
from .metrics import (
    BASE_METRICS,
    MetricsReport,
    ResultMatrix,
    aggregate,
    binomial_sign_test_p,
    diversity,
    fid,
    multimodality,
    r_precision_hit,
    weighted_f1,
)
from .stage1 import Stage1Artifacts
from .synth import EMOTIONS, SampleRecord, StreamOrder, StreamStep
from .tokenizer import MotionTokenizer


@dataclass(frozen=True)
class MethodSpec:
    name: str
    use_block: bool
    use_emo_loss: bool
    per_scenario_experts: bool
    routed: bool
    pooled_single_phase: bool = False


METHODS: dict[str, MethodSpec] = {
    "es-moe": MethodSpec("es-moe", True, True, True, True),
    "w/o-cged": MethodSpec("w/o-cged", False, False, True, True),
    "w/o-lemo": MethodSpec("w/o-lemo", True, False, True, True),
    "w/o-samoe": MethodSpec("w/o-samoe", True, True, False, False),
    "seq-lora": MethodSpec("seq-lora", False, False, False, False),
    "mtl": MethodSpec("mtl", False, False, False, False, pooled_single_phase=True),
}


@dataclass
class TrainConfig:
    epochs: int = 4
    batch_size: int = 16
    lr: float = 2e-3
    lambda_emo: float = 0.1


@dataclass
class EvalConfig:
    rprecision_pool: int = 32
    diversity_pairs: int = 50
    multimodality_texts: int = 10
    multimodality_pairs: int = 10
    temperature: float = 1.0
    max_new: int = 18
    eval_future: bool = False
    # sampled-decoding multimodality is by far the costliest cell metric and
    # no aggregate consumes its intermediate rows; default to final row only
    multimodality_final_row_only: bool = True


@dataclass
class RunConfigBundle:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    moe: MoeConfig = field(default_factory=MoeConfig)
    attn_dim: int = 32
    dictionary_size: int = 32
    probe_hidden: int = 32


@dataclass
class RunResult:
    report: MetricsReport
    matrices: dict[str, ResultMatrix]
    losses: list[list[float]]
    model: MotionLM
    order: list[int]


def build_model(
    stage1: Stage1Artifacts, method: MethodSpec, bundle: RunConfigBundle,
    rng: RngStream,
) -> MotionLM:
    backbone = stage1.fresh_backbone()
    block = None
    if method.use_block:
        block = EmotionBlock(
            EmotionBlockConfig(
                model_dim=stage1.config.lm.width,
                attn_dim=bundle.attn_dim,
                dictionary_size=bundle.dictionary_size,
                probe_hidden=bundle.probe_hidden,
                emotions=tuple(EMOTIONS),
            ),
            rng.child("emotion-block"),
        )
    pool = ExpertPool(backbone.adapter_sites(), bundle.moe)
    projector = None
    if method.routed:
        projector = QueryProjector(stage1.config.lm.width, bundle.moe, rng.child("projector"))
    return MotionLM(
        backbone, stage1.layout, emotion_block=block, pool=pool,
        projector=projector, moe_config=bundle.moe,
    )


def _trainable_params(model: MotionLM, method: MethodSpec, position: int):
    if method.routed:
        params = freeze_policy(model.pool, model.projector, position)
    else:
        expert = model.pool.experts[0]
        params = [p for p in expert.parameters() if not p.name.endswith(".key")]
    if method.use_block:
        params = params + model.emotion_block.block_params()
        if method.use_emo_loss:
            params = params + model.emotion_block.probe_params()
    return params


def _pack_records(
    records: list[SampleRecord], stage1: Stage1Artifacts, instruction: str
) -> list[PackedSample]:
    packed = []
    for r in records:
        if r.motion_tokens is None:
            r.motion_tokens = [int(v) for v in stage1.tokenizer.tokenize(r.frames)]
        packed.append(
            pack_sample(
                stage1.layout, instruction, r.text, r.motion_tokens,
                EMOTIONS.index(r.emotion), r.scenario, stage1.config.lm.context,
            )
        )
    return packed


def _refresh_dictionary(
    model: MotionLM, records: list[SampleRecord], stage1: Stage1Artifacts,
    size: int, instruction: str, rng: RngStream,
) -> None:
    """K-means over the scenario's description-position embedding features."""
    packed = _pack_records(records, stage1, instruction)
    tokens = np.stack([p.tokens for p in packed])
    s, e = packed[0].desc_span
    with no_grad():
        emb = model.backbone.embed(tokens)
    feats = emb.data[:, s:e, :].reshape(-1, emb.shape[-1])
    model.dictionary = init_global_dictionary(feats, size, rng)


def train_scenario(
    model: MotionLM,
    step: StreamStep,
    position: int,
    method: MethodSpec,
    stage1: Stage1Artifacts,
    bundle: RunConfigBundle,
    instruction: str,
    rng: RngStream,
) -> list[float]:
    """One pass of the per-scenario recipe; returns per-epoch mean losses."""
    cfg = bundle.train
    if method.per_scenario_experts or len(model.pool) == 0:
        model.pool.add_expert(rng.child("expert"))
    if method.use_block:
        _refresh_dictionary(
            model, step.train, stage1, bundle.dictionary_size, instruction,
            rng.child("dictionary"),
        )
    params = _trainable_params(model, method, position)
    opt = Adam(params, lr=cfg.lr)
    packed = _pack_records(step.train, stage1, instruction)
    span = packed[0].desc_span
    if any(p.desc_span != span for p in packed):
        raise ContractViolation("description spans differ within one scenario")
    batches = rng.child("batches")
    mask_rng = rng.child("mask")
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = batches.permutation(len(packed))
        total, count = 0.0, 0
        for start in range(0, len(packed), cfg.batch_size):
            chunk = [packed[i] for i in order[start : start + cfg.batch_size]]
            tokens = np.stack([p.tokens for p in chunk])
            mask = np.stack([p.loss_mask for p in chunk])
            labels = np.array([p.emotion_index for p in chunk])
            logits, h, _ = model.forward_batch(
                tokens, span, training=position > 0, mask_rng=mask_rng
            )
            l_llm = llm_loss(logits, tokens, mask)
            l_emo = None
            if method.use_emo_loss and h is not None:
                l_emo = model.emotion_block.emo_loss(h, labels)
            loss = total_loss(l_llm, l_emo, cfg.lambda_emo)
            if not np.isfinite(loss.data):
                raise NumericFault(
                    f"non-finite loss at scenario {position} epoch {epoch} "
                    f"batch {count} (lr={cfg.lr})"
                )
            opt.zero_grad()
            try:
                backward(loss)
            except NumericFault as err:
                raise NumericFault(
                    f"scenario {position} epoch {epoch} batch {count} "
                    f"(lr={cfg.lr}): {err}"
                ) from err
            opt.step()
            if method.routed:
                model.pool.renormalize_active_key()
            total += loss.item()
            count += 1
        epoch_losses.append(total / count)
    return epoch_losses


# -- evaluation ------------------------------------------------------------------


def _scenario_test_sets(stream: StreamOrder) -> dict[int, list[SampleRecord]]:
    sets: dict[int, list[SampleRecord]] = {s.index: [] for s in stream.specs}
    for step in stream.steps:
        for r in step.test:
            sets[r.scenario].append(r)
    return sets


def evaluate_cell(
    model: MotionLM,
    records: list[SampleRecord],
    stage1: Stage1Artifacts,
    eval_cfg: EvalConfig,
    instruction: str,
    rng: RngStream,
    real_features: np.ndarray,
    with_multimodality: bool = True,
) -> dict[str, float]:
    """Base metrics for one (state, scenario) pair."""
    embedder = stage1.embedder
    texts = [r.text for r in records]
    outs = model.generate(instruction, texts, max_new=eval_cfg.max_new)
    gen_frames = [stage1.tokenizer.detokenize(np.array(o.codes)) for o in outs]
    gen_feats = embedder.motion_features(gen_frames)

    values: dict[str, float] = {}
    values["fid"] = fid(real_features, gen_feats)

    distinct_texts = sorted(set(texts))
    text_feats = {t: f for t, f in zip(distinct_texts,
                                       embedder.text_features(distinct_texts))}
    pool_rng = rng.child("rprecision")
    hits = []
    for r, feat in zip(records, gen_feats):
        others = [t for t in distinct_texts if t != r.text]
        n_distract = min(eval_cfg.rprecision_pool - 1, len(others))
        chosen = pool_rng.choice(len(others), size=n_distract)
        distractors = np.stack([text_feats[others[i]] for i in chosen])
        hits.append(r_precision_hit(feat, text_feats[r.text], distractors))
    values["rprecision"] = float(np.mean(hits))

    values["diversity"] = diversity(
        gen_feats, eval_cfg.diversity_pairs, rng.child("diversity")
    ).value

    if with_multimodality:
        mm_texts = distinct_texts[: eval_cfg.multimodality_texts]
        groups = []
        mm_rng = rng.child("multimodality")
        for t in mm_texts:
            reps = model.generate(
                instruction, [t] * (2 * eval_cfg.multimodality_pairs),
                rng=mm_rng, temperature=eval_cfg.temperature,
                max_new=eval_cfg.max_new,
            )
            frames = [stage1.tokenizer.detokenize(np.array(o.codes)) for o in reps]
            groups.append(embedder.motion_features(frames))
        values["multimodality"] = multimodality(groups).value

    intended = np.array([EMOTIONS.index(r.emotion) for r in records])
    predicted = stage1.emotion_clf.predict(gen_feats)
    values["weighted_f1"] = weighted_f1(intended, predicted, len(EMOTIONS)).value
    return values


def run_continual(
    stream: StreamOrder,
    stage1: Stage1Artifacts,
    method_name: str,
    bundle: RunConfigBundle,
    rng: RngStream,
    order: list[int] | None = None,
    out_dir: str | Path | None = None,
    seed: int = 0,
) -> RunResult:
    """Train through the stream in the given order and fill the matrices."""
    if method_name not in METHODS:
        raise ContractViolation(f"unknown method {method_name!r}")
    method = METHODS[method_name]
    instruction = stream.manifest["instruction"]
    n = len(stream.steps)
    order = list(order) if order is not None else list(range(n))

    if method.pooled_single_phase:
        pooled = StreamStep(index=0, primary_scenario=None)
        pooled.train = [r for i in order for r in stream.steps[i].train]
        pooled.val = [r for i in order for r in stream.steps[i].val]
        pooled.test = [r for i in order for r in stream.steps[i].test]
        ordered_steps = [pooled]
    else:
        ordered_steps = [stream.steps[i] for i in order]

    model = build_model(stage1, method, bundle, rng.child("model"))
    test_sets = _scenario_test_sets(stream)
    real_feats = {
        s: stage1.embedder.motion_features(np.stack([r.frames for r in recs]))
        for s, recs in test_sets.items() if recs
    }
    n_rows = len(ordered_steps)
    matrices = {m: ResultMatrix(m, n_rows, n) for m in BASE_METRICS}
    losses: list[list[float]] = []

    for pos, step in enumerate(ordered_steps):
        step_rng = rng.child(f"step{pos}")
        losses.append(
            train_scenario(
                model, step, pos, method, stage1, bundle, instruction, step_rng
            )
        )
        if method.pooled_single_phase or bundle.eval.eval_future:
            columns = range(n)
        else:
            columns = range(pos + 1)
        with_mm = (pos == n_rows - 1) or not bundle.eval.multimodality_final_row_only
        for j in columns:
            scenario_id = order[j] if not method.pooled_single_phase else j
            cell_rng = rng.child(f"eval/{pos}/{j}")
            values = evaluate_cell(
                model, test_sets[scenario_id], stage1, bundle.eval,
                instruction, cell_rng, real_feats[scenario_id],
                with_multimodality=with_mm,
            )
            for name, value in values.items():
                matrices[name].set(pos, j, value)
        if out_dir is not None:
            _checkpoint(model, Path(out_dir) / f"scenario{pos}.ntc")

    notes = {
        "columns_are_training_order": not method.pooled_single_phase,
        "scenario_names": [stream.specs[i].name for i in order],
        "rprecision_pool": bundle.eval.rprecision_pool,
    }
    report = aggregate(matrices, method_name, stream.mode, seed, order, notes)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, m in matrices.items():
            m.to_csv(out / f"matrix_{name}.csv")
        (out / "report.json").write_text(report.to_json())
        (out / "losses.json").write_text(json.dumps(losses, sort_keys=True))
    return RunResult(report=report, matrices=matrices, losses=losses,
                     model=model, order=order)


def _checkpoint(model: MotionLM, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    state: dict[str, np.ndarray] = {}
    state.update(model.backbone.state())
    if model.emotion_block is not None:
        state.update(model.emotion_block.state())
        if model.dictionary.initialized:
            state["global_dictionary.entries"] = model.dictionary.entries.copy()
    state.update(model.pool.state())
    if model.projector is not None:
        for p in model.projector.parameters():
            state[p.name] = p.data.copy()
    save_tensors(path, state)
    manifest = model.pool.manifest()
    path.with_suffix(".json").write_text(json.dumps(manifest, sort_keys=True))


# -- emotion-transfer probes -------------------------------------------------------


def description_features(
    model: MotionLM, records: list[SampleRecord], stage1: Stage1Artifacts,
    instruction: str,
) -> np.ndarray:
    """Pooled emotion-path features per sample (block output when present,
    raw description embeddings otherwise)."""
    packed = _pack_records(records, stage1, instruction)
    tokens = np.stack([p.tokens for p in packed])
    span = packed[0].desc_span
    with no_grad():
        _, pooled = model.description_state(tokens, span)
    return pooled.data


def emotion_probe_transfer_accuracy(
    model: MotionLM,
    train_records: list[SampleRecord],
    heldout_records: list[SampleRecord],
    stage1: Stage1Artifacts,
    instruction: str,
) -> float:
    """Fit a linear probe on seen-scenario features, score it on the held-out
    scenario — the cross-scenario emotion-transfer check."""
    f_train = description_features(model, train_records, stage1, instruction)
    f_test = description_features(model, heldout_records, stage1, instruction)
    y_train = np.array([EMOTIONS.index(r.emotion) for r in train_records])
    y_test = np.array([EMOTIONS.index(r.emotion) for r in heldout_records])
    x = np.concatenate([f_train, np.ones((len(f_train), 1))], axis=1)
    onehot = np.eye(len(EMOTIONS))[y_train]
    w, *_ = np.linalg.lstsq(x, onehot, rcond=None)
    x_test = np.concatenate([f_test, np.ones((len(f_test), 1))], axis=1)
    pred = (x_test @ w).argmax(axis=1)
    return float((pred == y_test).mean())


@dataclass
class SignTestResult:
    successes: int
    trials: int
    p_value: float


def sad_signature_sign_test(
    model: MotionLM,
    heldout_records: list[SampleRecord],
    stage1: Stage1Artifacts,
    instruction: str,
    rng: RngStream,
    min_trials: int = 50,
    temperature: float = 0.8,
) -> SignTestResult:
    """Generate Sad and Neutral motions for held-out-scenario prompts and
    count pairs where the Sad generation has lower limb amplitude."""
    from .synth import ADVERBS, LIMB_CHANNELS

    bases = sorted({" ".join(r.text.split()[1:]) for r in heldout_records})
    repeats = max(1, int(np.ceil(min_trials / len(bases))))
    sad_texts, neu_texts = [], []
    for _ in range(repeats):
        for base in bases:
            sad_texts.append(f"{ADVERBS['Sad']} {base}")
            neu_texts.append(f"{ADVERBS['Neutral']} {base}")
    sad_out = model.generate(instruction, sad_texts, rng=rng.child("sad"),
                             temperature=temperature)
    neu_out = model.generate(instruction, neu_texts, rng=rng.child("neutral"),
                             temperature=temperature)
    successes, trials = 0, 0
    limbs = list(LIMB_CHANNELS)
    for s, u in zip(sad_out, neu_out):
        sad_amp = np.abs(stage1.tokenizer.detokenize(np.array(s.codes))[:, limbs]).mean()
        neu_amp = np.abs(stage1.tokenizer.detokenize(np.array(u.codes))[:, limbs]).mean()
        trials += 1
        if sad_amp < neu_amp:
            successes += 1
    return SignTestResult(
        successes=successes, trials=trials,
        p_value=binomial_sign_test_p(successes, trials),
    )


def make_orders(n_scenarios: int, n_orders: int, rng: RngStream) -> list[list[int]]:
    """First order is the natural one; the rest are seeded permutations."""
    orders = [list(range(n_scenarios))]
    for r in range(1, n_orders):
        orders.append([int(v) for v in rng.child(f"order{r}").permutation(n_scenarios)])
    return orders
