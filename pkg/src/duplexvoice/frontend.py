"""Acoustic frontend: PCM framing into log-mel features plus the energy VAD.

Input audio is signed 16-bit mono at 16 kHz.  Frames use a 25 ms window with
a 10 ms shift, an 80-band triangular mel filterbank over a 512-point spectrum
(0-8 kHz), and natural log with a 1e-10 floor.  The VAD is a short-term
energy detector that opens a dialogue turn after a run of consecutive
active frames.
"""

from __future__ import annotations

import io
import wave
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import BandMismatchError
from .nnkit import F32

SAMPLE_RATE = 16_000
WIN_SAMPLES = 400   # 25 ms
HOP_SAMPLES = 160   # 10 ms
N_FFT = 512
N_MELS = 80
LOG_FLOOR = 1e-10

VAD_THRESHOLD_DEFAULT = -12.0   # on log mel-band energy sums; silence sits near -18.6
VAD_ACTIVATION_FRAMES = 3


def frame_count(n_samples: int) -> int:
    """Number of complete 25 ms / 10 ms-shift windows in n_samples."""
    if n_samples < WIN_SAMPLES:
        return 0
    return 1 + (n_samples - WIN_SAMPLES) // HOP_SAMPLES


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def _mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE) -> np.ndarray:
    """(n_mels, n_fft//2+1) triangular filters spanning 0 Hz to sr/2."""
    n_bins = n_fft // 2 + 1
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sr / 2.0), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_bins) * sr / n_fft
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def pcm16_to_float(samples: np.ndarray) -> np.ndarray:
    return (np.asarray(samples, dtype=np.int16).astype(np.float64) / 32768.0)


def float_to_pcm16(x: np.ndarray) -> np.ndarray:
    clipped = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.round(clipped * 32767.0).astype(np.int16)


def frame_features(pcm: np.ndarray) -> np.ndarray:
    """Frame 16 kHz int16 PCM into (n_frames, 80) log mel-band energies."""
    n = frame_count(len(pcm))
    if n == 0:
        return np.zeros((0, N_MELS), dtype=F32)
    x = pcm16_to_float(pcm)
    idx = np.arange(WIN_SAMPLES)[None, :] + HOP_SAMPLES * np.arange(n)[:, None]
    frames = x[idx] * np.hanning(WIN_SAMPLES)[None, :]
    spectrum = np.fft.rfft(frames, n=N_FFT, axis=1)
    power = np.abs(spectrum) ** 2
    mel = power @ _mel_filterbank().T
    return np.log(np.maximum(mel, LOG_FLOOR)).astype(F32)


def frame_energy(features: np.ndarray) -> np.ndarray:
    """Per-frame log of total mel-band energy, used by the VAD."""
    if features.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)
    return np.logaddexp.reduce(features.astype(np.float64), axis=1)


# ---------------------------------------------------------------------------
# Voice activity detection
# ---------------------------------------------------------------------------

@dataclass
class VadState:
    """Energy-gate state; triggers once per episode after enough active frames."""

    triggered: bool = False
    consecutive_active: int = 0
    energy_threshold: float = VAD_THRESHOLD_DEFAULT
    activation_frames: int = VAD_ACTIVATION_FRAMES


@dataclass(frozen=True)
class VadTrigger:
    """Emitted exactly once per untriggered-to-triggered transition."""

    frame_index: int


def vad_step(features: np.ndarray, state: VadState) -> tuple[VadState, VadTrigger | None]:
    """Advance the VAD over a feature chunk; at most one trigger per episode."""
    if state.triggered:
        return state, None
    energy = frame_energy(features)
    count = state.consecutive_active
    for i, e in enumerate(energy):
        count = count + 1 if e >= state.energy_threshold else 0
        if count >= state.activation_frames:
            new = replace(state, triggered=True, consecutive_active=count)
            return new, VadTrigger(frame_index=i)
    return replace(state, consecutive_active=count), None


def vad_reset(state: VadState) -> VadState:
    """Back to untriggered with a zero counter; threshold preserved. Idempotent."""
    return replace(state, triggered=False, consecutive_active=0)


# ---------------------------------------------------------------------------
# WAV / raw stream I/O
# ---------------------------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a RIFF wav; returns (int16 mono samples, sample_rate)."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        if w.getnchannels() != 1:
            raise ValueError(f"expected mono, got {w.getnchannels()} channels")
        data = w.readframes(w.getnframes())
        return np.frombuffer(data, dtype="<i2"), w.getframerate()


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(np.asarray(samples, dtype="<i2").tobytes())


def read_raw_s16le(stream: io.BufferedIOBase) -> np.ndarray:
    return np.frombuffer(stream.read(), dtype="<i2")


def validate_features(features: np.ndarray) -> np.ndarray:
    if features.ndim != 2 or features.shape[1] != N_MELS:
        raise BandMismatchError(f"expected (*, {N_MELS}) features, got {features.shape}")
    return features
