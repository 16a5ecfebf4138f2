"""STFT magnitude spectrogram frontend and frame-energy VAD.

Fixed analysis parameters for 16 kHz audio: 320-sample (20 ms) symmetric
Hamming windows, 160-sample (10 ms) hop, 320-point FFT, magnitudes of
bins 0..160 (50 Hz per bin).  Window length equals FFT size, so frames
are never zero padded.  Magnitudes stay linear; any log compression is a
display concern, not an analysis one.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
WINDOW_LEN = 320
HOP = 160
N_BINS = WINDOW_LEN // 2 + 1     # 161
BIN_HZ = SAMPLE_RATE / WINDOW_LEN  # 50.0
HOP_S = HOP / SAMPLE_RATE          # 0.01
DEFAULT_VAD_RATIO = 0.01


@dataclass
class Spectrogram:
    values: np.ndarray   # (M, N) non-negative magnitudes
    bin_hz: float = BIN_HZ
    hop_s: float = HOP_S
    window_len: int = WINDOW_LEN

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError("spectrogram values must be a 2D (bins, frames) matrix")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("spectrogram magnitudes must be finite and non-negative")

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class VadMask:
    speech: np.ndarray       # per-frame booleans, True = speech
    threshold_ratio: float

    def __post_init__(self):
        self.speech = np.asarray(self.speech, dtype=bool)
        if self.speech.ndim != 1:
            raise ValueError("VAD mask must be one boolean per frame")


def hamming_window(length: int) -> np.ndarray:
    """Symmetric Hamming window: 0.54 - 0.46*cos(2*pi*k/(length-1))."""
    if length < 2:
        raise ValueError(f"window length must be >= 2, got {length}")
    k = np.arange(length)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (length - 1))


def frame_signal(samples, window_len: int, hop: int) -> np.ndarray:
    """Slice a signal into frames of `window_len` every `hop` samples.

    No padding: frame count is floor((L - window_len)/hop) + 1 and frame i
    starts at i*hop.  Raises if the signal is shorter than one window.
    """
    x = np.asarray(getattr(samples, "samples", samples), dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a mono 1D signal")
    if window_len < 1 or hop < 1:
        raise ValueError("window_len and hop must be positive")
    if x.shape[0] < window_len:
        raise ValueError(
            f"signal length {x.shape[0]} shorter than window {window_len}")
    frames = np.lib.stride_tricks.sliding_window_view(x, window_len)[::hop]
    return frames.copy()


def stft_magnitude(samples, sample_rate: int, window_len: int, hop: int) -> np.ndarray:
    """Windowed magnitude STFT, (bins, frames), FFT size = window length."""
    frames = frame_signal(samples, window_len, hop)
    window = hamming_window(window_len)
    spec = np.abs(np.fft.rfft(frames * window, n=window_len, axis=1))
    return np.ascontiguousarray(spec.T)


def magnitude_spectrogram(waveform) -> Spectrogram:
    """The fixed 16 kHz / 320-point / 10 ms-hop analysis front end."""
    sr = getattr(waveform, "sample_rate", SAMPLE_RATE)
    if sr != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {sr} Hz")
    values = stft_magnitude(waveform, SAMPLE_RATE, WINDOW_LEN, HOP)
    return Spectrogram(values=values)


def frame_count(n_samples: int, window_len: int = WINDOW_LEN, hop: int = HOP) -> int:
    if n_samples < window_len:
        raise ValueError(f"signal length {n_samples} shorter than window {window_len}")
    return (n_samples - window_len) // hop + 1


def sample_to_frame(sample_index, n_frames: int, hop: int = HOP) -> np.ndarray:
    """Map sample indices onto analysis frames (clipped to the last frame)."""
    idx = np.asarray(sample_index, dtype=np.int64) // hop
    return np.clip(idx, 0, n_frames - 1)


def region_to_frames(start: int, end: int, n_frames: int,
                     window_len: int = WINDOW_LEN, hop: int = HOP) -> tuple:
    """Frame range [lo, hi) of frames whose window overlaps samples [start, end)."""
    if end <= start:
        raise ValueError("empty sample region")
    lo = max(0, -(-(start - window_len + 1) // hop))  # ceil division
    hi = min(n_frames, (end - 1) // hop + 1)
    return lo, max(lo, hi)


def energy_vad(spec: Spectrogram, threshold_ratio: float = DEFAULT_VAD_RATIO) -> VadMask:
    """Frame n is speech iff its energy >= threshold_ratio * peak frame energy."""
    if not (0.0 < threshold_ratio < 1.0):
        raise ValueError(
            f"threshold_ratio must lie strictly between 0 and 1, got {threshold_ratio}")
    if spec.values.size == 0:
        raise ValueError("empty spectrogram")
    energies = np.sum(spec.values.astype(np.float64) ** 2, axis=0)
    peak = float(np.max(energies))
    mask = energies >= threshold_ratio * peak if peak > 0 else np.zeros_like(energies, bool)
    return VadMask(speech=mask, threshold_ratio=threshold_ratio)


# ---------------------------------------------------------------------------
# binary dump: little-endian float32 row-major values + JSON sidecar
# ---------------------------------------------------------------------------

def save_spectrogram(spec: Spectrogram, path) -> None:
    path = Path(path)
    path.write_bytes(spec.values.astype("<f4").tobytes())
    sidecar = {"M": spec.n_bins, "N": spec.n_frames,
               "bin_hz": spec.bin_hz, "hop_s": spec.hop_s}
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8")


def load_spectrogram(path) -> Spectrogram:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    values = np.frombuffer(path.read_bytes(), dtype="<f4")
    values = values.reshape(sidecar["M"], sidecar["N"]).astype(np.float64)
    return Spectrogram(values=values, bin_hz=sidecar["bin_hz"], hop_s=sidecar["hop_s"])
