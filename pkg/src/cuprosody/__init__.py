"""Cross-utterance context conditioning for Tacotron2-style spectrogram prediction."""

__version__ = "0.1.0"
