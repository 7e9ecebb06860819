"""Procedural emotional-motion corpus with known ground truth.

Each scenario has a distinct motion style (which limb channels move, the
waveform family, base frequency/phase); emotions modify every scenario the
same way (amplitude scaling, head-channel offset, tempo scaling), which is
exactly the cross-scenario commonality the training stack must pick up.
Streams come in two orderings: ``unseen`` (each step dominated by one
scenario) and ``mixed`` (uniform scenario mixture per step).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ContractViolation, RngStream

EMOTIONS = ("Happy", "Sad", "Angry", "Neutral")

N_CHANNELS = 8
HEAD_CHANNEL = 6
STYLE_CHANNEL = 7  # emotion-independent scenario marker
LIMB_CHANNELS = tuple(range(6))

INSTRUCTION = (
    "Generate a motion sequence that aligns with the following "
    "emotional text description."
)


@dataclass(frozen=True)
class EmotionSignature:
    """Style-independent modifiers applied identically in every scenario."""

    amplitude: float
    head_offset: float
    frequency: float


SIGNATURES: dict[str, EmotionSignature] = {
    "Happy": EmotionSignature(amplitude=1.3, head_offset=0.3, frequency=1.1),
    "Sad": EmotionSignature(amplitude=0.5, head_offset=-0.4, frequency=0.85),
    "Angry": EmotionSignature(amplitude=1.6, head_offset=0.1, frequency=1.25),
    "Neutral": EmotionSignature(amplitude=1.0, head_offset=0.0, frequency=1.0),
}

ADVERBS = {"Happy": "happily", "Sad": "sadly", "Angry": "angrily", "Neutral": "calmly"}

# modifier word -> (amplitude factor, frequency factor); spreads stay mild so
# the 64-code tokenizer budget is not blown on modifier variety
MODIFIERS: dict[str, tuple[float, float]] = {
    "slowly": (1.0, 0.9),
    "quickly": (1.0, 1.1),
    "gently": (0.85, 1.0),
    "firmly": (1.15, 1.0),
}

# per-action frequency multiplier within a scenario
ACTION_TEMPO = (1.0, 1.15, 1.3)


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    index: int
    actions: tuple[str, str, str]
    active_channels: tuple[int, int]
    waveform: str  # sin | ramp | pulse
    base_freq: float
    base_amp: float
    phases: tuple[float, ...]  # one per channel


_SCENARIO_TABLE = [
    ("household", ("walk", "stroll", "wave"), (0, 1), "sin", 2.0),
    ("sports", ("jog", "sprint", "jump"), (2, 3), "ramp", 3.0),
    ("dance", ("spin", "sway", "twirl"), (4, 5), "sin", 3.0),
    ("stage", ("bow", "gesture", "pose"), (0, 3), "pulse", 2.0),
    ("arcade", ("dodge", "crouch", "lunge"), (1, 4), "ramp", 2.0),
    ("cartoon", ("bounce", "stretch", "flip"), (2, 5), "pulse", 3.0),
    ("orchestra", ("strum", "drum", "conduct"), (0, 5), "sin", 2.0),
    ("circus", ("tumble", "cartwheel", "balance"), (1, 3), "ramp", 3.0),
]


def default_scenario_specs(count: int = 8) -> list[ScenarioSpec]:
    if count > len(_SCENARIO_TABLE):
        raise ContractViolation(f"only {len(_SCENARIO_TABLE)} scenario styles defined")
    specs = []
    for i in range(count):
        name, actions, channels, wave, freq = _SCENARIO_TABLE[i]
        phases = tuple((0.13 * i + 0.21 * c) % 1.0 for c in range(N_CHANNELS))
        specs.append(
            ScenarioSpec(
                name=name,
                index=i,
                actions=actions,
                active_channels=channels,
                waveform=wave,
                base_freq=freq,
                base_amp=1.0,
                phases=phases,
            )
        )
    return specs


@dataclass
class SampleRecord:
    scenario: int
    scenario_name: str
    emotion: str
    instruction: str
    text: str
    frames: np.ndarray
    motion_tokens: list[int] | None = None


def _wave(kind: str, freq: float, phase: float, t: np.ndarray) -> np.ndarray:
    arg = freq * t + phase
    if kind == "sin":
        return np.sin(2 * np.pi * arg)
    if kind == "ramp":
        return 2.0 * (arg % 1.0) - 1.0
    if kind == "pulse":
        return np.sign(np.sin(2 * np.pi * arg))
    raise ContractViolation(f"unknown waveform {kind!r}")


def render_frames(
    spec: ScenarioSpec,
    emotion: str,
    action: str,
    modifier: str,
    n_frames: int,
    noise_sigma: float,
    rng: RngStream | None,
) -> np.ndarray:
    """Deterministic motion for the factor combination, plus seeded noise.

    The two active limb channels carry the scenario waveform (the second at
    0.8 amplitude, same phase); the head channel holds the emotion posture
    offset; the style channel is a fixed-tempo scenario marker independent of
    emotion, action and modifier.
    """
    sig = SIGNATURES[emotion]
    amp_mod, freq_mod = MODIFIERS[modifier]
    tempo = ACTION_TEMPO[spec.actions.index(action)]
    t = np.arange(n_frames) / n_frames
    frames = np.zeros((n_frames, N_CHANNELS))
    freq = spec.base_freq * tempo * sig.frequency * freq_mod
    amp = spec.base_amp * sig.amplitude * amp_mod
    primary, secondary = spec.active_channels
    wave = _wave(spec.waveform, freq, spec.phases[primary], t)
    frames[:, primary] = amp * wave
    frames[:, secondary] = 0.8 * amp * wave
    frames[:, HEAD_CHANNEL] = sig.head_offset
    frames[:, STYLE_CHANNEL] = 0.7 - 0.2 * spec.index
    if rng is not None and noise_sigma > 0:
        frames = frames + rng.normal(frames.shape, noise_sigma)
    return frames


def generate_sample(
    spec: ScenarioSpec,
    emotion: str,
    rng: RngStream,
    n_frames: int = 64,
    noise_sigma: float = 0.02,
) -> SampleRecord:
    if emotion not in SIGNATURES:
        raise ContractViolation(f"unknown emotion {emotion!r}")
    action = spec.actions[int(rng.integers(0, len(spec.actions)))]
    modifier = list(MODIFIERS)[int(rng.integers(0, len(MODIFIERS)))]
    frames = render_frames(spec, emotion, action, modifier, n_frames, noise_sigma, rng)
    return SampleRecord(
        scenario=spec.index,
        scenario_name=spec.name,
        emotion=emotion,
        instruction=INSTRUCTION,
        text=f"{ADVERBS[emotion]} {action} {modifier}",
        frames=frames,
    )


@dataclass
class StreamStep:
    index: int
    primary_scenario: int | None
    train: list[SampleRecord] = field(default_factory=list)
    val: list[SampleRecord] = field(default_factory=list)
    test: list[SampleRecord] = field(default_factory=list)

    @property
    def all_records(self) -> list[SampleRecord]:
        return self.train + self.val + self.test


@dataclass
class StreamOrder:
    mode: str
    steps: list[StreamStep]
    specs: list[ScenarioSpec]
    heldout: list[SampleRecord]
    manifest: dict


class GeneratorSelfTestError(RuntimeError):
    """The generated corpus failed a ground-truth sanity check."""


def build_stream(
    specs: list[ScenarioSpec],
    mode: str,
    samples_per_step: int,
    rng: RngStream,
    n_frames: int = 64,
    noise_sigma: float = 0.02,
    primary_fraction: float = 0.8,
    splits: tuple[float, float, float] = (0.8, 0.05, 0.15),
    heldout_spec: ScenarioSpec | None = None,
    heldout_samples: int = 80,
) -> StreamOrder:
    """Sequential datasets D_1..D_N with disjoint train/val/test splits."""
    if mode not in ("unseen", "mixed"):
        raise ContractViolation(f"mode must be unseen or mixed, got {mode!r}")
    if samples_per_step < 50:
        raise ContractViolation("need at least 50 samples per step")
    if abs(sum(splits) - 1.0) > 1e-9:
        raise ContractViolation("split fractions must sum to 1")

    n_scenarios = len(specs)
    steps: list[StreamStep] = []
    for i in range(n_scenarios):
        scen_ids = _step_composition(
            i, n_scenarios, samples_per_step, mode, primary_fraction
        )
        step_rng = rng.child(f"step{i}")
        records = []
        emotion_cursor: dict[int, int] = {}
        for s in scen_ids:
            # round-robin emotions within each scenario for exact label balance
            k = emotion_cursor.get(s, 0)
            emotion_cursor[s] = k + 1
            records.append(
                generate_sample(
                    specs[s], EMOTIONS[k % len(EMOTIONS)], step_rng,
                    n_frames, noise_sigma,
                )
            )
        perm = step_rng.permutation(len(records))
        n_train = int(round(splits[0] * len(records)))
        n_val = int(round(splits[1] * len(records)))
        step = StreamStep(index=i, primary_scenario=i if mode == "unseen" else None)
        step.train = [records[j] for j in perm[:n_train]]
        step.val = [records[j] for j in perm[n_train : n_train + n_val]]
        step.test = [records[j] for j in perm[n_train + n_val :]]
        steps.append(step)

    heldout: list[SampleRecord] = []
    if heldout_spec is not None:
        ho_rng = rng.child("heldout")
        for j in range(heldout_samples):
            heldout.append(
                generate_sample(
                    heldout_spec, EMOTIONS[j % len(EMOTIONS)], ho_rng,
                    n_frames, noise_sigma,
                )
            )

    stream = StreamOrder(
        mode=mode,
        steps=steps,
        specs=specs,
        heldout=heldout,
        manifest={
            "seed": rng.seed,
            "mode": mode,
            "samples_per_step": samples_per_step,
            "n_frames": n_frames,
            "frame_rate": 30.0,
            "noise_sigma": noise_sigma,
            "primary_fraction": primary_fraction,
            "splits": list(splits),
            "instruction": INSTRUCTION,
            "emotions": list(EMOTIONS),
            "scenarios": [spec.name for spec in specs],
            "heldout_scenario": heldout_spec.name if heldout_spec else None,
        },
    )
    _self_test(stream)
    return stream


def _step_composition(
    step: int, n_scenarios: int, size: int, mode: str, primary_fraction: float
) -> list[int]:
    if mode == "mixed":
        return [j % n_scenarios for j in range(size)]
    n_primary = int(round(primary_fraction * size))
    others = [s for s in range(n_scenarios) if s != step]
    if not others:
        return [step] * size
    filler = [others[j % len(others)] for j in range(size - n_primary)]
    return [step] * n_primary + filler


def _self_test(stream: StreamOrder) -> None:
    records = [r for step in stream.steps for r in step.all_records]
    accuracy = scenario_separability(records, len(stream.specs))
    if accuracy < 0.9:
        raise GeneratorSelfTestError(
            f"scenario separability {accuracy:.3f} below 0.9"
        )
    counts: dict[tuple[int, str], int] = {}
    for r in records:
        counts[(r.scenario, r.emotion)] = counts.get((r.scenario, r.emotion), 0) + 1
    thin = {k: v for k, v in counts.items() if v < 10}
    if thin:
        raise GeneratorSelfTestError(f"label balance violated: {thin}")


def scenario_separability(records: list[SampleRecord], n_scenarios: int) -> float:
    """Accuracy of a nearest-centroid scenario classifier on raw frames."""
    flat = np.stack([r.frames.reshape(-1) for r in records])
    labels = np.array([r.scenario for r in records])
    centroids = np.stack(
        [flat[labels == s].mean(axis=0) for s in range(n_scenarios)]
    )
    d2 = ((flat[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((d2.argmin(axis=1) == labels).mean())


# -- corpus files ----------------------------------------------------------------


def vocabulary(specs: list[ScenarioSpec]) -> list[str]:
    """Closed word list for the whole pipeline, stable given the specs."""
    words = set(_words(INSTRUCTION))
    words.update(ADVERBS.values())
    words.update(MODIFIERS)
    for spec in specs:
        words.update(spec.actions)
    return sorted(words)


def _words(text: str) -> list[str]:
    return [w.strip(".,!?").lower() for w in text.split() if w.strip(".,!?")]


def record_to_json(r: SampleRecord) -> str:
    payload = {
        "scenario": r.scenario,
        "scenario_name": r.scenario_name,
        "emotion": r.emotion,
        "text": r.text,
        "frames": [[float(v) for v in row] for row in r.frames],
    }
    if r.motion_tokens is not None:
        payload["motion_tokens"] = [int(t) for t in r.motion_tokens]
    return json.dumps(payload, sort_keys=True)


def record_from_json(line: str, instruction: str = INSTRUCTION) -> SampleRecord:
    obj = json.loads(line)
    return SampleRecord(
        scenario=int(obj["scenario"]),
        scenario_name=obj.get("scenario_name", str(obj["scenario"])),
        emotion=obj["emotion"],
        instruction=instruction,
        text=obj["text"],
        frames=np.asarray(obj["frames"], dtype=np.float64),
        motion_tokens=obj.get("motion_tokens"),
    )


def write_stream(stream: StreamOrder, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for step in stream.steps:
        for split in ("train", "val", "test"):
            path = out / f"step{step.index}.{split}.jsonl"
            with path.open("w") as fh:
                for r in getattr(step, split):
                    fh.write(record_to_json(r) + "\n")
    if stream.heldout:
        with (out / "heldout.jsonl").open("w") as fh:
            for r in stream.heldout:
                fh.write(record_to_json(r) + "\n")
    manifest = dict(stream.manifest)
    manifest["vocabulary"] = vocabulary(stream.specs)
    manifest["split_sizes"] = [
        {"train": len(s.train), "val": len(s.val), "test": len(s.test)}
        for s in stream.steps
    ]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_stream(corpus_dir: str | Path) -> StreamOrder:
    corpus = Path(corpus_dir)
    manifest = json.loads((corpus / "manifest.json").read_text())
    stream_specs = default_scenario_specs(len(manifest["scenarios"]))
    instruction = manifest["instruction"]
    steps = []
    for i in range(len(manifest["scenarios"])):
        step = StreamStep(
            index=i,
            primary_scenario=i if manifest["mode"] == "unseen" else None,
        )
        for split in ("train", "val", "test"):
            path = corpus / f"step{i}.{split}.jsonl"
            records = [
                record_from_json(line, instruction)
                for line in path.read_text().splitlines()
            ]
            setattr(step, split, records)
        steps.append(step)
    heldout = []
    ho_path = corpus / "heldout.jsonl"
    if ho_path.exists():
        heldout = [
            record_from_json(line, instruction)
            for line in ho_path.read_text().splitlines()
        ]
    return StreamOrder(
        mode=manifest["mode"],
        steps=steps,
        specs=stream_specs,
        heldout=heldout,
        manifest=manifest,
    )
