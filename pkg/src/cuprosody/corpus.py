"""Manifest ingestion, deterministic splits, lexicon G2P and a synthetic
context-dependent corpus.

Manifest files are JSON Lines, one sentence per record::

    {"paragraph_id": "p1", "sentence_index": 0, "text": "Who called Mary?", "language": "en"}

Optional keys: ``audio_path``, ``mel_path`` (relative to the manifest), and
``neighbor_class`` (synthetic corpora only).
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, NotFoundError

N_MELS = 80

_FIELD_ORDER = ("paragraph_id", "sentence_index", "text", "language",
                "audio_path", "mel_path", "neighbor_class")


@dataclass(frozen=True)
class ManifestRecord:
    paragraph_id: str
    sentence_index: int
    text: str
    language: str = "en"
    audio_path: str | None = None
    mel_path: str | None = None
    neighbor_class: int | None = None

    @property
    def key(self):
        return (self.paragraph_id, self.sentence_index)

    def to_json(self):
        d = {k: getattr(self, k) for k in _FIELD_ORDER}
        return json.dumps({k: v for k, v in d.items() if v is not None}, ensure_ascii=False)


class Corpus:
    """Paragraph-ordered sentences plus optional per-utterance mel targets."""

    def __init__(self, records, targets=None):
        self._paragraphs: dict[str, list[ManifestRecord]] = {}
        seen = set()
        for rec in records:
            if rec.key in seen:
                raise InvalidInputError(f"duplicate record {rec.key}")
            seen.add(rec.key)
            self._paragraphs.setdefault(rec.paragraph_id, []).append(rec)
        for pid, recs in self._paragraphs.items():
            recs.sort(key=lambda r: r.sentence_index)
            idx = [r.sentence_index for r in recs]
            if idx != list(range(len(recs))):
                raise InvalidInputError(f"paragraph {pid!r}: indices {idx} are not contiguous from 0")
        self.targets: dict[tuple[str, int], np.ndarray] = dict(targets or {})

    @property
    def paragraph_ids(self):
        return list(self._paragraphs)

    def paragraph(self, paragraph_id):
        try:
            return self._paragraphs[paragraph_id]
        except KeyError:
            raise NotFoundError(f"unknown paragraph {paragraph_id!r}") from None

    def record(self, paragraph_id, sentence_index):
        recs = self.paragraph(paragraph_id)
        if not 0 <= sentence_index < len(recs):
            raise NotFoundError(f"paragraph {paragraph_id!r} has no sentence {sentence_index}")
        return recs[sentence_index]

    @property
    def records(self):
        return [r for recs in self._paragraphs.values() for r in recs]

    def keys(self):
        return [r.key for r in self.records]

    def __len__(self):
        return sum(len(v) for v in self._paragraphs.values())


def parse_manifest(path, load_targets=True):
    """Read a JSONL manifest. Raises InvalidInputError on duplicate keys or index gaps."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(ManifestRecord(
                    paragraph_id=str(d["paragraph_id"]),
                    sentence_index=int(d["sentence_index"]),
                    text=d["text"],
                    language=d.get("language", "en"),
                    audio_path=d.get("audio_path"),
                    mel_path=d.get("mel_path"),
                    neighbor_class=d.get("neighbor_class"),
                ))
            except (KeyError, ValueError, TypeError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: bad record ({exc})") from exc
    corpus = Corpus(records)
    if load_targets:
        from .features import read_mel
        for rec in corpus.records:
            if rec.mel_path:
                corpus.targets[rec.key] = read_mel(path.parent / rec.mel_path)
    return corpus


def write_manifest(corpus, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in corpus.records:
            fh.write(rec.to_json() + "\n")


def split(corpus, seed, n_val=100, n_test=100):
    """Shuffle utterance keys with ``seed`` and cut off validation and test sets.

    Returns ``(train, val, test)`` lists of ``(paragraph_id, sentence_index)``.
    Context windows may still read neighbour text from any split.
    """
    keys = corpus.keys()
    if len(keys) <= n_val + n_test:
        raise InvalidInputError(
            f"insufficient data: {len(keys)} utterances, need more than {n_val + n_test}")
    order = np.random.default_rng(seed).permutation(len(keys))
    shuffled = [keys[i] for i in order]
    val = sorted(shuffled[:n_val])
    test = sorted(shuffled[n_val:n_val + n_test])
    train = sorted(shuffled[n_val + n_test:])
    return train, val, test


# --------------------------------------------------------------------------
# G2P

_MANDARIN_INITIALS = ("zh", "ch", "sh", "b", "p", "m", "f", "d", "t", "n", "l",
                      "g", "k", "h", "j", "q", "x", "r", "z", "c", "s", "y", "w")
_TOKEN_RE = re.compile(r"[^\w']+", re.UNICODE)


@dataclass
class Lexicon:
    entries: dict[str, tuple[str, ...]]
    language: str = "en"

    @classmethod
    def load(cls, path, language="en"):
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line.strip() or line.startswith("#"):
                    continue
                word, _, pron = line.partition("\t")
                if not pron:
                    raise InvalidInputError(f"lexicon line without TAB: {line!r}")
                entries[word.strip().lower()] = tuple(pron.split())
        return cls(entries, language)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for word, phones in self.entries.items():
                fh.write(f"{word}\t{' '.join(phones)}\n")


@dataclass(frozen=True)
class PhonemeSequence:
    symbols: tuple[str, ...]
    tone_augmented: bool = False

    def __len__(self):
        return len(self.symbols)


def split_syllable(syllable):
    """``"zhong1"`` -> ``["zh", "ong1"]``; untoned syllables get neutral tone 5."""
    tone = syllable[-1] if syllable[-1].isdigit() else "5"
    body = syllable.rstrip("0123456789")
    for ini in _MANDARIN_INITIALS:
        if body.startswith(ini) and len(body) > len(ini):
            return [ini, body[len(ini):] + tone]
    return [body + tone]


def normalize_words(text):
    return [w for w in _TOKEN_RE.split(text.lower()) if w]


def g2p(text, lexicon, language=None):
    """Lexicon lookup per whitespace token; OOV words fall back to letter units.

    In Mandarin mode (``language="zh"``) lexicon values are toned pinyin
    syllables and every final carries its tone digit, so ``a1`` and ``a4`` are
    distinct units.
    """
    language = language or lexicon.language
    mandarin = language.startswith("zh")
    symbols = []
    for word in normalize_words(text):
        pron = lexicon.entries.get(word)
        if pron is None:
            symbols.extend(ch for ch in word if ch != "'")
        elif mandarin:
            for syl in pron:
                symbols.extend(split_syllable(syl))
        else:
            symbols.extend(pron)
    if not symbols:
        raise InvalidInputError(f"no phonemes for text {text!r}")
    return PhonemeSequence(tuple(symbols), tone_augmented=mandarin)


class PhonemeInventory:
    """Symbol <-> id table; id 0 is reserved for padding."""

    PAD = "<pad>"

    def __init__(self, symbols):
        uniq = list(dict.fromkeys(symbols))
        self.symbols = [self.PAD] + [s for s in uniq if s != self.PAD]
        self._ids = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def from_lexicon(cls, lexicon, extra=()):
        syms = []
        for pron in lexicon.entries.values():
            if lexicon.language.startswith("zh"):
                for syl in pron:
                    syms.extend(split_syllable(syl))
            else:
                syms.extend(pron)
        syms.extend("abcdefghijklmnopqrstuvwxyz")
        syms.extend(extra)
        return cls(syms)

    def __len__(self):
        return len(self.symbols)

    def encode(self, seq):
        try:
            return [self._ids[s] for s in seq.symbols]
        except KeyError as exc:
            raise InvalidInputError(f"phoneme {exc.args[0]!r} not in inventory") from None


# --------------------------------------------------------------------------
# Synthetic corpus

TOY_PHONEMES = ("AA", "AE", "AH", "B", "D", "EH", "F", "G", "IY", "K",
                "L", "M", "N", "OW", "P", "R", "S", "T", "UW", "Z")

_TOY_LEXICON = {
    "tom": ("T", "AA", "M"),
    "mary": ("M", "EH", "R", "IY"),
    "called": ("K", "AA", "L", "D"),
    "saw": ("S", "AA"),
    "bob": ("B", "AA", "B"),
    "fed": ("F", "EH", "D"),
    "the": ("D", "AH"),
    "dog": ("D", "AA", "G"),
    "went": ("UW", "EH", "N", "T"),
    "home": ("OW", "M"),
    "who": ("UW",),
    "zoe": ("Z", "OW", "IY"),
    "paid": ("P", "AE", "D"),
    "kim": ("K", "IY", "M"),
}

_TOY_SENTENCES = (
    "who called mary",
    "tom called mary",
    "bob fed the dog",
    "zoe saw kim",
    "the dog went home",
    "kim paid tom",
)


@dataclass
class SyntheticSpec:
    """Generator parameters for a corpus whose targets depend on the previous sentence.

    Every pool sentence belongs to one of ``K`` classes; an utterance's target
    is its per-phoneme base profiles, each held for ``frames_per_phoneme``
    frames, offset by the class shift of the preceding sentence.
    """

    class_shifts: np.ndarray
    base_profiles: dict[str, np.ndarray]
    frames_per_phoneme: int
    noise_sigma: float
    sentences: tuple[str, ...]
    sentence_classes: tuple[int, ...]
    lexicon: Lexicon
    sentences_per_paragraph: int = 5
    n_mels: int = N_MELS

    def __post_init__(self):
        self.class_shifts = np.asarray(self.class_shifts, dtype=np.float64)
        K = self.class_shifts.shape[0]
        if self.class_shifts.shape != (K, self.n_mels) or K < 1:
            raise InvalidInputError(f"class_shifts must be K x {self.n_mels}")
        for i in range(K):
            for j in range(i + 1, K):
                if np.array_equal(self.class_shifts[i], self.class_shifts[j]):
                    raise InvalidInputError(f"class shifts {i} and {j} coincide")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be >= 0")
        if len(self.sentences) != len(self.sentence_classes):
            raise InvalidInputError("one class per pool sentence required")
        if any(not 0 <= c < K for c in self.sentence_classes):
            raise InvalidInputError("sentence class out of range")
        self.base_profiles = {k: np.asarray(v, dtype=np.float64) for k, v in self.base_profiles.items()}
        for s in self.sentences:
            for p in g2p(s, self.lexicon).symbols:
                if p not in self.base_profiles:
                    raise InvalidInputError(f"no base profile for phoneme {p!r}")

    @property
    def n_classes(self):
        return self.class_shifts.shape[0]

    @property
    def class_probs(self):
        counts = np.bincount(self.sentence_classes, minlength=self.n_classes)
        return counts / counts.sum()

    @classmethod
    def default(cls, n_classes=2, noise_sigma=0.05, frames_per_phoneme=2, seed=0,
                shift_scale=0.5, sentences_per_paragraph=5):
        rng = np.random.default_rng(seed)
        k = np.arange(N_MELS)
        profiles = {}
        for p in TOY_PHONEMES:
            a, b = rng.uniform(-1.0, 1.0), rng.uniform(0.3, 1.0)
            f, phi = rng.uniform(0.5, 3.0), rng.uniform(0, 2 * np.pi)
            profiles[p] = a + b * np.cos(2 * np.pi * f * k / N_MELS + phi)
        contour = 1.0 + 0.3 * np.cos(2 * np.pi * k / N_MELS)
        if n_classes == 1:
            shifts = np.zeros((1, N_MELS))
        else:
            amps = shift_scale * (2 * np.arange(n_classes) / (n_classes - 1) - 1)
            shifts = amps[:, None] * contour[None, :]
        classes = tuple(i % n_classes for i in range(len(_TOY_SENTENCES)))
        return cls(class_shifts=shifts, base_profiles=profiles,
                   frames_per_phoneme=frames_per_phoneme, noise_sigma=noise_sigma,
                   sentences=_TOY_SENTENCES, sentence_classes=classes,
                   lexicon=Lexicon(dict(_TOY_LEXICON)),
                   sentences_per_paragraph=sentences_per_paragraph)

    def inventory(self):
        return PhonemeInventory(TOY_PHONEMES + tuple(sorted(set(self.base_profiles) - set(TOY_PHONEMES))))

    def to_json(self):
        return json.dumps({
            "class_shifts": self.class_shifts.tolist(),
            "base_profiles": {k: v.tolist() for k, v in self.base_profiles.items()},
            "frames_per_phoneme": self.frames_per_phoneme,
            "noise_sigma": self.noise_sigma,
            "sentences": list(self.sentences),
            "sentence_classes": list(self.sentence_classes),
            "lexicon": {k: list(v) for k, v in self.lexicon.entries.items()},
            "language": self.lexicon.language,
            "sentences_per_paragraph": self.sentences_per_paragraph,
            "n_mels": self.n_mels,
        })

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(class_shifts=np.array(d["class_shifts"]),
                   base_profiles={k: np.array(v) for k, v in d["base_profiles"].items()},
                   frames_per_phoneme=d["frames_per_phoneme"], noise_sigma=d["noise_sigma"],
                   sentences=tuple(d["sentences"]), sentence_classes=tuple(d["sentence_classes"]),
                   lexicon=Lexicon({k: tuple(v) for k, v in d["lexicon"].items()}, d.get("language", "en")),
                   sentences_per_paragraph=d.get("sentences_per_paragraph", 5),
                   n_mels=d.get("n_mels", N_MELS))

    def clean_target(self, text, neighbor_class):
        """Noise-free target mel for ``text`` preceded by a sentence of ``neighbor_class``."""
        phones = g2p(text, self.lexicon).symbols
        base = np.repeat(np.stack([self.base_profiles[p] for p in phones]), self.frames_per_phoneme, axis=0)
        return base + self.class_shifts[neighbor_class]


def generate_synthetic(spec, paragraphs, seed):
    """Sample ``paragraphs`` paragraphs of pool sentences with context-dependent targets.

    The first sentence of a paragraph has no visible predecessor; its
    neighbour class is drawn from the pool's class distribution as if a
    hidden sentence preceded it.
    """
    rng = np.random.default_rng(seed)
    probs = spec.class_probs
    records, targets = [], {}
    width = max(4, len(str(paragraphs - 1)))
    for p in range(paragraphs):
        pid = f"syn{p:0{width}d}"
        picks = rng.integers(0, len(spec.sentences), size=spec.sentences_per_paragraph)
        prev_class = int(rng.choice(spec.n_classes, p=probs))
        for j, s_idx in enumerate(picks):
            text = spec.sentences[s_idx]
            clean = spec.clean_target(text, prev_class)
            noisy = clean + spec.noise_sigma * rng.standard_normal(clean.shape)
            rec = ManifestRecord(pid, j, text, language=spec.lexicon.language, neighbor_class=prev_class)
            records.append(rec)
            targets[rec.key] = noisy.astype(np.float32)
            prev_class = spec.sentence_classes[s_idx]
    return Corpus(records, targets)


def context_blind_floor(spec):
    """Per-element MSE of the best predictor that sees only the current text.

    For any text the neighbour class follows the pool class distribution
    ``pi``, so the optimum is ``base + sum_c pi_c shift_c`` and the residual is
    the class-shift variance (averaged over bins) plus the noise variance.
    """
    pi = spec.class_probs
    mean_shift = pi @ spec.class_shifts
    var = pi @ ((spec.class_shifts - mean_shift) ** 2)
    return float(var.mean() + spec.noise_sigma ** 2)
