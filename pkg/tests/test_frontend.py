"""Frontend tests: framing arithmetic, mel features, VAD episodes, wav I/O."""

import numpy as np
import pytest

from duplexvoice import frontend
from duplexvoice.frontend import (
    VadState,
    frame_count,
    frame_energy,
    frame_features,
    read_wav,
    vad_reset,
    vad_step,
    write_wav,
)


def sliding_window_count(n_samples, win=400, hop=160):
    """Independent oracle: count complete windows by walking the stream."""
    count, start = 0, 0
    while start + win <= n_samples:
        count += 1
        start += hop
    return count


def tone(duration_ms, freq=440.0, amp=0.3, sr=16_000):
    t = np.arange(int(sr * duration_ms / 1000)) / sr
    return (amp * 32767.0 * np.sin(2 * np.pi * freq * t)).astype(np.int16)


def silence(duration_ms, sr=16_000):
    return np.zeros(int(sr * duration_ms / 1000), dtype=np.int16)


class TestFraming:
    def test_one_second_is_98_frames(self):
        assert frame_count(16_000) == 98
        feats = frame_features(silence(1000))
        assert feats.shape == (98, 80)

    def test_below_one_window(self):
        assert frame_count(399) == 0
        assert frame_features(np.zeros(399, dtype=np.int16)).shape == (0, 80)

    def test_exactly_one_window(self):
        assert frame_count(400) == 1
        assert frame_features(np.zeros(400, dtype=np.int16)).shape == (1, 80)

    def test_formula_matches_window_walk(self):
        rng = np.random.default_rng(0)
        for n in list(range(0, 900, 37)) + [int(rng.integers(0, 40_000)) for _ in range(50)]:
            assert frame_count(n) == sliding_window_count(n), f"n={n}"

    def test_shift_consistency(self):
        pcm = tone(300, freq=523.0)
        full = frame_features(pcm)
        shifted = frame_features(pcm[160:])
        assert shifted.shape[0] == full.shape[0] - 1
        assert np.array_equal(shifted, full[1:])

    def test_features_finite_and_deterministic(self):
        pcm = tone(200)
        a = frame_features(pcm)
        b = frame_features(pcm)
        assert np.all(np.isfinite(a))
        assert np.array_equal(a, b)

    def test_loud_frames_have_higher_energy(self):
        loud = frame_energy(frame_features(tone(200, amp=0.5)))
        quiet = frame_energy(frame_features(silence(200)))
        assert loud.mean() > quiet.mean() + 5.0


class TestVad:
    def test_trigger_on_third_active_frame(self):
        feats = frame_features(tone(500))
        energies = frame_energy(feats)
        assert np.all(energies[:10] >= VadState().energy_threshold)
        state, event = vad_step(feats[:10], VadState())
        assert event is not None and event.frame_index == 2
        assert state.triggered

    def test_silence_never_triggers(self):
        state, event = vad_step(frame_features(silence(1000)), VadState())
        assert event is None
        assert not state.triggered

    def test_one_event_per_episode(self):
        feats = frame_features(tone(400))
        state, event = vad_step(feats, VadState())
        assert event is not None
        state, event2 = vad_step(feats, state)
        assert event2 is None

    def test_reset_allows_retrigger(self):
        feats = frame_features(tone(400))
        state, e1 = vad_step(feats, VadState())
        state = vad_reset(state)
        assert not state.triggered and state.consecutive_active == 0
        state, e2 = vad_step(feats, state)
        events = [e for e in (e1, e2) if e is not None]
        assert len(events) == 2

    def test_reset_idempotent_and_preserves_threshold(self):
        state = VadState(energy_threshold=-5.0)
        once = vad_reset(state)
        twice = vad_reset(once)
        assert once == twice
        assert twice.energy_threshold == -5.0

    def test_replay_reproduces_trigger_timing(self):
        feats = frame_features(np.concatenate([silence(200), tone(400)]))
        s1, e1 = vad_step(feats, VadState())
        s2, e2 = vad_step(feats, vad_reset(s1))
        assert e1 == e2

    def test_run_spanning_chunks_still_triggers(self):
        feats = frame_features(tone(500))
        state = VadState()
        state, e1 = vad_step(feats[:1], state)
        state, e2 = vad_step(feats[1:2], state)
        state, e3 = vad_step(feats[2:3], state)
        events = [e for e in (e1, e2, e3) if e is not None]
        assert len(events) == 1
        assert events[0].frame_index == 0  # third active frame, local to its chunk


class TestWavIo:
    def test_round_trip(self, tmp_path):
        pcm = tone(123)
        path = tmp_path / "t.wav"
        write_wav(path, pcm, 16_000)
        back, sr = read_wav(path)
        assert sr == 16_000
        assert np.array_equal(back, pcm)

    def test_zero_frame_wav(self, tmp_path):
        path = tmp_path / "empty.wav"
        write_wav(path, np.zeros(0, dtype=np.int16), 24_000)
        back, sr = read_wav(path)
        assert sr == 24_000
        assert len(back) == 0

    def test_raw_s16le_stream(self):
        import io

        pcm = tone(50)
        back = frontend.read_raw_s16le(io.BytesIO(pcm.tobytes()))
        assert np.array_equal(back, pcm)

    def test_rejects_stereo(self, tmp_path):
        import wave

        path = tmp_path / "stereo.wav"
        with wave.open(str(path), "wb") as w:
            w.setnchannels(2)
            w.setsampwidth(2)
            w.setframerate(16_000)
            w.writeframes(b"\x00" * 64)
        with pytest.raises(ValueError):
            read_wav(path)


class TestMelFilterbank:
    def test_filters_partition_reasonably(self):
        fb = frontend._mel_filterbank()
        assert fb.shape == (80, 257)
        assert np.all(fb >= 0)
        # every filter has support, every interior bin is covered by some filter
        assert np.all(fb.sum(axis=1) > 0)
        coverage = fb.sum(axis=0)
        assert np.all(coverage[1:-1] > 0)
