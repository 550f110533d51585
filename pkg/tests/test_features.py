import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from cuprosody.errors import InvalidInputError
from cuprosody.features import (
    AudioClip, MelParams, griffin_lim, load_audio, mel_filterbank, mel_spectrogram, read_mel,
    save_heatmap, trim_silence, write_mel,
)

SR = 16000


def tone(n, freq=440.0, amp=0.5, sr=SR):
    return (amp * np.sin(2 * np.pi * freq * np.arange(n) / sr)).astype(np.float32)


def chirp(n=16000, sr=SR):
    t = np.arange(n) / sr
    f = 150 + 80 * np.sin(2 * np.pi * 3 * t)  # wobbling "voice" fundamental
    phase = 2 * np.pi * np.cumsum(f) / sr
    x = sum(np.sin(k * phase) / k for k in range(1, 6))
    return (0.3 * x * (0.6 + 0.4 * np.sin(2 * np.pi * 2 * t))).astype(np.float32)


# -- loading ---------------------------------------------------------------

def test_load_16k_untouched(tmp_path):
    x = tone(12345)
    wavfile.write(tmp_path / "a.wav", SR, x)
    clip = load_audio(tmp_path / "a.wav")
    assert clip.sample_rate == SR and len(clip) == 12345
    np.testing.assert_array_equal(clip.samples, x)


def test_load_48k_resampled(tmp_path):
    wavfile.write(tmp_path / "a.wav", 48000, tone(48000 * 2, sr=48000))
    clip = load_audio(tmp_path / "a.wav")
    assert abs(len(clip) - 32000) <= 1


def test_load_int16_stereo_silence(tmp_path):
    wavfile.write(tmp_path / "s.wav", 44100, np.zeros((4410, 2), dtype=np.int16))
    clip = load_audio(tmp_path / "s.wav")
    assert np.all(clip.samples == 0) and clip.sample_rate == SR


def test_load_unreadable(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"not a wav")
    with pytest.raises(InvalidInputError):
        load_audio(tmp_path / "bad.wav")


# -- trimming --------------------------------------------------------------

def test_trim_all_loud_identity():
    x = tone(8000)
    out = trim_silence(AudioClip(x))
    np.testing.assert_array_equal(out.samples, x)


def test_trim_pure_silence_empty_flagged():
    out = trim_silence(AudioClip(np.zeros(5000, dtype=np.float32)))
    assert len(out) == 0 and out.silent


def test_trim_pad_tone_pad_boundaries():
    lead, body, tail = 3000, 8000, 4100
    x = np.concatenate([np.zeros(lead), tone(body), np.zeros(tail)]).astype(np.float32)
    out = trim_silence(AudioClip(x))
    start = np.flatnonzero([np.array_equal(x[s:s + len(out)], out.samples) for s in range(len(x) - len(out) + 1)])
    assert start.size
    s, e = start[0], start[0] + len(out)
    win = MelParams().win_length
    assert abs(s - lead) <= win and abs(e - (lead + body)) <= win
    assert s <= lead and e >= lead + body  # tone itself intact


@settings(max_examples=30, deadline=None)
@given(lead=st.integers(0, 3000), body=st.integers(1, 3000), tail=st.integers(0, 3000),
       seed=st.integers(0, 1000))
def test_trim_is_contiguous_slice(lead, body, tail, seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([1e-4 * rng.standard_normal(lead), 0.5 * rng.standard_normal(body),
                        1e-4 * rng.standard_normal(tail)]).astype(np.float32)
    out = trim_silence(AudioClip(x))
    if out.silent:
        return
    n = len(out)
    assert any(np.array_equal(x[s:s + n], out.samples) for s in range(len(x) - n + 1))


# -- mel -------------------------------------------------------------------

def test_frames_one_second():
    assert mel_spectrogram(AudioClip(tone(16000))).values.shape == (77, 80)


def test_frames_single_window():
    assert mel_spectrogram(AudioClip(tone(800))).n_frames == 1


def test_too_short_rejected():
    with pytest.raises(InvalidInputError):
        mel_spectrogram(AudioClip(tone(799)))


def test_wrong_rate_rejected():
    with pytest.raises(InvalidInputError):
        mel_spectrogram(AudioClip(tone(1600), sample_rate=8000))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(800, 24000))
def test_frame_count_formula(n):
    assert mel_spectrogram(AudioClip(np.zeros(n, dtype=np.float32))).n_frames == 1 + (n - 800) // 200


def test_zero_signal_at_floor():
    mel = mel_spectrogram(AudioClip(np.zeros(3000, dtype=np.float32)))
    assert np.all(mel.values == np.float32(np.log(1e-5)))


def test_mel_pure_bitwise():
    x = chirp(5000)
    assert mel_spectrogram(AudioClip(x)).values.tobytes() == mel_spectrogram(AudioClip(x.copy())).values.tobytes()


def test_tone_energy_in_expected_band():
    mel = mel_spectrogram(AudioClip(tone(4000, freq=1000.0))).values
    fb = mel_filterbank()
    centre = np.argmax(fb[:, int(round(1000 / 8000 * 512))])
    assert abs(int(np.argmax(mel.mean(0))) - centre) <= 1


def test_geometry():
    p = MelParams()
    assert (p.win_length, p.hop_length, p.n_mels, p.sample_rate) == (800, 200, 80, 16000)
    with pytest.raises(InvalidInputError):
        MelParams(win_length=200, hop_length=200)


# -- griffin-lim -----------------------------------------------------------

def test_griffin_lim_round_trip_correlation():
    mel = mel_spectrogram(AudioClip(chirp()))
    audio = griffin_lim(mel, iterations=32)
    again = mel_spectrogram(audio).values
    n = min(len(again), len(mel.values))
    corr = np.corrcoef(again[:n].ravel(), mel.values[:n].ravel())[0, 1]
    assert corr > 0.7


def test_griffin_lim_zero_mel_near_silence():
    floor_mel = np.full((20, 80), np.log(1e-5), dtype=np.float32)
    audio = griffin_lim(floor_mel, iterations=8)
    assert np.max(np.abs(audio.samples)) < 1e-3


def test_griffin_lim_deterministic():
    mel = mel_spectrogram(AudioClip(chirp(4000)))
    assert np.array_equal(griffin_lim(mel, 5).samples, griffin_lim(mel, 5).samples)


# -- files -----------------------------------------------------------------

def test_mel_file_round_trip(tmp_path):
    m = np.random.default_rng(0).standard_normal((13, 80)).astype(np.float32)
    write_mel(m, tmp_path / "x.mel")
    raw = (tmp_path / "x.mel").read_bytes()
    assert raw[:6] == b"MEL80\x00" and len(raw) == 14 + 13 * 80 * 4
    assert read_mel(tmp_path / "x.mel").tobytes() == m.tobytes()


def test_mel_file_bad_magic(tmp_path):
    (tmp_path / "x.mel").write_bytes(b"WRONG!" + b"\0" * 8)
    with pytest.raises(InvalidInputError):
        read_mel(tmp_path / "x.mel")


def test_heatmap_png(tmp_path):
    save_heatmap([np.zeros((10, 80)), np.ones((12, 80))], tmp_path / "h.png", titles=["a", "b"])
    assert (tmp_path / "h.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
