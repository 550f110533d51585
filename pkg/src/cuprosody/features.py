"""Audio ingestion, log-mel extraction and Griffin-Lim playback.

Framing has no centre padding: an N-sample clip yields
``1 + (N - win_length) // hop_length`` frames and the trailing partial frame
is dropped.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import InvalidInputError

SAMPLE_RATE = 16000


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    silent: bool = False

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class MelParams:
    sample_rate: int = SAMPLE_RATE
    win_length: int = 800   # 50 ms
    hop_length: int = 200   # 12.5 ms
    n_fft: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.win_length <= self.hop_length:
            raise InvalidInputError("window must exceed hop")
        if self.n_fft < self.win_length:
            raise InvalidInputError("n_fft must be >= window length")

    def n_frames(self, n_samples):
        if n_samples < self.win_length:
            raise InvalidInputError(f"clip of {n_samples} samples is shorter than one window")
        return 1 + (n_samples - self.win_length) // self.hop_length


@dataclass
class MelSpectrogram:
    values: np.ndarray          # frames x n_mels
    params: MelParams = field(default_factory=MelParams)

    @property
    def n_frames(self):
        return self.values.shape[0]


def load_audio(path, target_sr=SAMPLE_RATE):
    """Read a WAV file as mono float32 in [-1, 1] resampled to ``target_sr``."""
    try:
        sr, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read audio {path}: {exc}") from exc
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return AudioClip(resample(data, sr, target_sr).astype(np.float32), target_sr)


def resample(samples, sr, target_sr):
    if sr == target_sr:
        return np.asarray(samples)
    g = math.gcd(int(sr), int(target_sr))
    return resample_poly(samples, target_sr // g, sr // g)


def save_audio(clip, path):
    pcm = np.clip(clip.samples, -1.0, 1.0)
    wavfile.write(path, clip.sample_rate, (pcm * 32767).astype(np.int16))


def frame_rms_db(samples, win, hop):
    n = max(1, 1 + (len(samples) - win) // hop) if len(samples) >= win else 1
    out = np.empty(n)
    for i in range(n):
        seg = samples[i * hop:i * hop + win]
        out[i] = 10 * np.log10(np.mean(np.square(seg, dtype=np.float64)) + 1e-20)
    return out


def trim_silence(clip, threshold_db=-40.0, params=MelParams()):
    """Strip leading and trailing analysis frames whose RMS is below ``threshold_db`` dBFS.

    Interior samples are never touched. A clip with no loud frame comes back
    empty with ``silent=True``.
    """
    x = clip.samples
    if len(x) == 0:
        return AudioClip(x, clip.sample_rate, silent=True)
    win, hop = params.win_length, params.hop_length
    loud = np.flatnonzero(frame_rms_db(x, win, hop) >= threshold_db)
    if loud.size == 0:
        return AudioClip(x[:0], clip.sample_rate, silent=True)
    start = loud[0] * hop
    end = min(len(x), loud[-1] * hop + win)
    return AudioClip(x[start:end], clip.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(params=MelParams()):
    """HTK-scale triangular filters, area-normalised, shape n_mels x (n_fft//2+1)."""
    n_bins = params.n_fft // 2 + 1
    fft_freqs = np.linspace(0, params.sample_rate / 2, n_bins)
    pts = mel_to_hz(np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.fmax), params.n_mels + 2))
    fb = np.zeros((params.n_mels, n_bins))
    for m in range(params.n_mels):
        lo, mid, hi = pts[m], pts[m + 1], pts[m + 2]
        up = (fft_freqs - lo) / (mid - lo)
        down = (hi - fft_freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    return fb


def stft_magnitude(x, params=MelParams()):
    n = params.n_frames(len(x))
    win = np.hanning(params.win_length + 1)[:-1]
    idx = np.arange(params.win_length)[None, :] + params.hop_length * np.arange(n)[:, None]
    frames = np.asarray(x, dtype=np.float64)[idx] * win
    return np.abs(np.fft.rfft(frames, n=params.n_fft, axis=1))


def mel_spectrogram(clip, params=MelParams()):
    if clip.sample_rate != params.sample_rate:
        raise InvalidInputError(f"clip at {clip.sample_rate} Hz, expected {params.sample_rate}")
    mag = stft_magnitude(clip.samples, params)
    mel = mag @ mel_filterbank(params).T
    return MelSpectrogram(np.log(np.maximum(mel, params.log_floor)).astype(np.float32), params)


def griffin_lim(mel, iterations=32, params=None):
    """Invert a log-mel matrix to audio.

    Magnitudes come from the filterbank pseudo-inverse (clipped at zero);
    phase starts at zero, so the result is deterministic.
    """
    values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    params = params or (mel.params if isinstance(mel, MelSpectrogram) else MelParams())
    fb = mel_filterbank(params)
    mag = np.maximum(0.0, np.exp(values.astype(np.float64)) @ np.linalg.pinv(fb).T)
    win = np.hanning(params.win_length + 1)[:-1]
    n_frames, hop, wl = mag.shape[0], params.hop_length, params.win_length
    length = (n_frames - 1) * hop + wl
    idx = np.arange(wl)[None, :] + hop * np.arange(n_frames)[:, None]
    norm = np.zeros(length)
    np.add.at(norm, idx, np.broadcast_to(win ** 2, idx.shape))
    # edge samples see almost no window energy; bound the gain there
    norm = np.maximum(norm, 1e-2 * norm.max())

    def istft(spec):
        frames = np.fft.irfft(spec, n=params.n_fft, axis=1)[:, :wl] * win
        y = np.zeros(length)
        np.add.at(y, idx, frames)
        return y / norm

    spec = mag.astype(np.complex128)
    y = istft(spec)
    for _ in range(iterations):
        reest = np.fft.rfft(y[idx] * win, n=params.n_fft, axis=1)
        spec = mag * np.exp(1j * np.angle(reest))
        y = istft(spec)
    peak = np.max(np.abs(y)) if len(y) else 0.0
    if peak > 1.0:
        y = y / peak
    return AudioClip(y.astype(np.float32), params.sample_rate)


# --------------------------------------------------------------------------
# File formats

MEL_MAGIC = b"MEL80\x00"


def write_mel(values, path):
    """``MEL80\\0``, u32 frames, u32 bins (little-endian), row-major f32."""
    values = np.ascontiguousarray(values, dtype="<f4")
    frames, bins = values.shape
    with open(path, "wb") as fh:
        fh.write(MEL_MAGIC + struct.pack("<II", frames, bins) + values.tobytes())


def read_mel(path):
    data = Path(path).read_bytes()
    if data[:6] != MEL_MAGIC:
        raise InvalidInputError(f"{path}: not a mel file")
    frames, bins = struct.unpack_from("<II", data, 6)
    body = data[14:]
    if len(body) != 4 * frames * bins:
        raise InvalidInputError(f"{path}: expected {frames}x{bins} values")
    return np.frombuffer(body, dtype="<f4").reshape(frames, bins).copy()


def save_heatmap(mels, path, titles=None):
    """PNG with one mel heatmap per row (time on x, mel bin on y)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    mels = [mels] if isinstance(mels, np.ndarray) and mels.ndim == 2 else list(mels)
    fig, axes = plt.subplots(len(mels), 1, figsize=(8, 2.4 * len(mels)), squeeze=False)
    for i, (ax, m) in enumerate(zip(axes[:, 0], mels)):
        ax.imshow(np.asarray(m).T, origin="lower", aspect="auto", interpolation="nearest")
        if titles:
            ax.set_title(titles[i], fontsize=9)
        ax.set_ylabel("mel bin")
    axes[-1, 0].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
