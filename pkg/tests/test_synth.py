from __future__ import annotations

import numpy as np
import pytest

from emomoe.core import ContractViolation, RngStream
from emomoe import synth
from emomoe.synth import (
    EMOTIONS,
    LIMB_CHANNELS,
    SIGNATURES,
    build_stream,
    default_scenario_specs,
    generate_sample,
    read_stream,
    render_frames,
    scenario_separability,
    vocabulary,
    write_stream,
)


@pytest.fixture(scope="module")
def specs():
    return default_scenario_specs(4)


@pytest.fixture(scope="module")
def stream(specs):
    return build_stream(
        specs, "unseen", 120, RngStream(100),
        heldout_spec=default_scenario_specs(5)[4], heldout_samples=60,
    )


class TestSignatures:
    def test_signatures_identical_across_scenarios(self):
        # one SIGNATURES table keyed by emotion only; render uses nothing else
        all_specs = default_scenario_specs(8)
        for emo in EMOTIONS:
            sig = SIGNATURES[emo]
            for spec in all_specs:
                frames = render_frames(spec, emo, spec.actions[0], "slowly", 64, 0.0, None)
                # the head channel carries the emotion offset verbatim
                sway = 0.2 * np.sin(2 * np.pi * 0.5 * np.arange(64) / 64)
                np.testing.assert_allclose(
                    frames[:, synth.HEAD_CHANNEL] - sway, sig.head_offset, atol=1e-12
                )

    def test_sad_has_reduced_amplitude_and_lowered_head(self):
        assert SIGNATURES["Sad"].amplitude < 1.0
        assert SIGNATURES["Sad"].head_offset < 0.0

    def test_sad_quieter_than_neutral_on_limbs(self, specs):
        for spec in specs:
            sad = render_frames(spec, "Sad", spec.actions[0], "slowly", 64, 0.0, None)
            neu = render_frames(spec, "Neutral", spec.actions[0], "slowly", 64, 0.0, None)
            limbs = list(LIMB_CHANNELS)
            assert np.abs(sad[:, limbs]).mean() < np.abs(neu[:, limbs]).mean()

    def test_neutral_is_base_plus_noise_only(self, specs):
        spec = specs[0]
        base = render_frames(spec, "Neutral", spec.actions[0], "slowly", 64, 0.0, None)
        noisy = render_frames(
            spec, "Neutral", spec.actions[0], "slowly", 64, 0.02, RngStream(4)
        )
        assert np.abs(noisy - base).max() < 0.15  # gaussian noise only


class TestGenerateSample:
    def test_same_seed_identical(self, specs):
        a = generate_sample(specs[1], "Angry", RngStream(7))
        b = generate_sample(specs[1], "Angry", RngStream(7))
        assert a.text == b.text
        np.testing.assert_array_equal(a.frames, b.frames)

    def test_text_mentions_action_and_emotion(self, specs):
        r = generate_sample(specs[2], "Happy", RngStream(3))
        words = r.text.split()
        assert words[0] == "happily"
        assert words[1] in specs[2].actions

    def test_unknown_emotion_rejected(self, specs):
        with pytest.raises(ContractViolation):
            generate_sample(specs[0], "Bored", RngStream(1))


class TestStream:
    def test_unseen_steps_dominated_by_primary(self, stream):
        for step in stream.steps:
            recs = step.all_records
            share = sum(r.scenario == step.index for r in recs) / len(recs)
            assert share >= 0.8

    def test_mixed_steps_uniform(self, specs):
        st = build_stream(specs, "mixed", 120, RngStream(5))
        for step in st.steps:
            recs = step.all_records
            for s in range(len(specs)):
                share = sum(r.scenario == s for r in recs) / len(recs)
                assert abs(share - 0.25) <= 0.05

    def test_splits_disjoint_and_sized(self, stream):
        for step in stream.steps:
            ids = [id(r) for r in step.all_records]
            assert len(set(ids)) == len(ids)
            assert len(step.train) == 96
            assert len(step.val) == 6
            assert len(step.test) == 18

    def test_separability_self_test(self, stream):
        records = [r for s in stream.steps for r in s.all_records]
        assert scenario_separability(records, 4) >= 0.9

    def test_label_balance(self, stream):
        counts: dict[tuple[int, str], int] = {}
        for step in stream.steps:
            for r in step.all_records:
                counts[(r.scenario, r.emotion)] = counts.get((r.scenario, r.emotion), 0) + 1
        assert min(counts.values()) >= 10

    def test_bad_mode_rejected(self, specs):
        with pytest.raises(ContractViolation):
            build_stream(specs, "shuffled", 120, RngStream(1))

    def test_too_small_step_rejected(self, specs):
        with pytest.raises(ContractViolation):
            build_stream(specs, "unseen", 10, RngStream(1))


class TestCorpusFiles:
    def test_round_trip(self, tmp_path, stream):
        write_stream(stream, tmp_path)
        loaded = read_stream(tmp_path)
        assert loaded.mode == stream.mode
        assert len(loaded.steps) == len(stream.steps)
        orig = stream.steps[0].train[0]
        got = loaded.steps[0].train[0]
        assert got.text == orig.text
        assert got.emotion == orig.emotion
        np.testing.assert_allclose(got.frames, orig.frames)
        assert len(loaded.heldout) == len(stream.heldout)

    def test_same_seed_byte_identical(self, tmp_path, specs):
        for name in ("a", "b"):
            st = build_stream(specs, "unseen", 60, RngStream(77))
            write_stream(st, tmp_path / name)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_vocabulary_closed_and_stable(self, specs):
        v1 = vocabulary(specs)
        v2 = vocabulary(specs)
        assert v1 == v2
        assert len(v1) < 60
        assert "sadly" in v1 and "walk" in v1 and "generate" in v1
