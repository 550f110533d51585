"""Sentence windows, CSE/PSE token layouts and CLS-embedding extraction.

Chunk layouts (``S`` = SEP)::

    past chunk    [CLS] u_-L S u_-L+1 S ... S u_0      all segment A
    future chunk  [CLS] u_0 S u_1 S ... S u_L          all segment A
    pair (a, b)   [CLS] a S b                          CLS/a/S -> A, b -> B

Padded neighbours are skipped in chunks; pairs keep a fixed count of 2L
and carry an ``is_pad`` flag instead.
"""
from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Protocol

import numpy as np

from .corpus import normalize_words
from .errors import BackendError, InvalidInputError, NotFoundError

MAX_TOKENS = 512
SEGMENT_A = 0
SEGMENT_B = 1


@dataclass(frozen=True)
class SentenceWindow:
    paragraph_id: str
    center_index: int
    center: str
    past: tuple[tuple[str, bool], ...]
    future: tuple[tuple[str, bool], ...]

    def __post_init__(self):
        if len(self.past) != len(self.future):
            raise InvalidInputError("past and future must both have L entries")
        if not self.center.strip():
            raise InvalidInputError("center sentence is empty")

    @property
    def L(self):
        return len(self.past)

    def sentences(self):
        """``[(text, is_pad)]`` for u_-L .. u_L in document order."""
        return [*self.past, (self.center, False), *self.future]

    def with_neighbor(self, offset, text):
        """Copy with u_offset replaced by ``text`` (ablation helper)."""
        if offset == 0 or abs(offset) > self.L:
            raise InvalidInputError(f"offset {offset} outside window of L={self.L}")
        past, future = list(self.past), list(self.future)
        if offset < 0:
            past[self.L + offset] = (text, False)
        else:
            future[offset - 1] = (text, False)
        return SentenceWindow(self.paragraph_id, self.center_index, self.center, tuple(past), tuple(future))


def build_window(corpus, paragraph_id, sentence_index, L):
    if L < 0:
        raise InvalidInputError("L must be >= 0")
    recs = corpus.paragraph(paragraph_id)
    if not 0 <= sentence_index < len(recs):
        raise NotFoundError(f"paragraph {paragraph_id!r} has no sentence {sentence_index}")

    def neighbor(i):
        return (recs[i].text, False) if 0 <= i < len(recs) else ("", True)

    past = tuple(neighbor(sentence_index - k) for k in range(L, 0, -1))
    future = tuple(neighbor(sentence_index + k) for k in range(1, L + 1))
    return SentenceWindow(paragraph_id, sentence_index, recs[sentence_index].text, past, future)


def window_from_texts(center, past=(), future=(), paragraph_id="adhoc", center_index=0):
    """Window from explicit neighbour texts; ``None`` or "" marks a pad."""
    if len(past) != len(future):
        raise InvalidInputError("past and future must have equal length")
    wrap = lambda t: ("", True) if not t else (t, False)  # noqa: E731
    return SentenceWindow(paragraph_id, center_index, center,
                          tuple(wrap(t) for t in past), tuple(wrap(t) for t in future))


# --------------------------------------------------------------------------
# Tokenizers

class Tokenizer(Protocol):
    cls_id: int
    sep_id: int

    def encode(self, text: str) -> list[int]: ...


class WhitespaceTokenizer:
    """Lowercased whitespace tokenizer over a fixed vocabulary.

    Out-of-vocabulary words map to stable hashed ids above the vocabulary, so
    distinct texts keep distinct token sequences.
    """

    PAD, CLS, SEP, UNK = 0, 1, 2, 3
    cls_id, sep_id = CLS, SEP
    n_buckets = 30000

    def __init__(self, vocab=()):
        self.vocab = {w: i + 4 for i, w in enumerate(dict.fromkeys(w.lower() for w in vocab))}

    def encode(self, text):
        out = []
        for w in normalize_words(text):
            i = self.vocab.get(w)
            if i is None:
                i = 4 + len(self.vocab) + fnv1a64(w.encode("utf-8")) % self.n_buckets
            out.append(i)
        return out


@dataclass(frozen=True)
class TokenChunk:
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    sep_positions: tuple[int, ...]
    attention_mask: tuple[bool, ...]
    truncated: bool = False
    is_pad: bool = False
    cls_position: int = 0

    def __len__(self):
        return len(self.token_ids)


def _assemble(parts, cls_id, sep_id, segments=None):
    ids, segs, seps = [cls_id], [SEGMENT_A], []
    for i, toks in enumerate(parts):
        seg = SEGMENT_A if segments is None else segments[i]
        if i > 0:
            seps.append(len(ids))
            ids.append(sep_id)
            segs.append(SEGMENT_A if segments is None else segments[i - 1])
        ids.extend(toks)
        segs.extend([seg] * len(toks))
    return ids, segs, seps


def _chunk(parts, tokenizer, truncated, segments=None, is_pad=False):
    ids, segs, seps = _assemble(parts, tokenizer.cls_id, tokenizer.sep_id, segments)
    return TokenChunk(tuple(ids), tuple(segs), tuple(seps), (True,) * len(ids), truncated, is_pad)


def _fit(parts, max_tokens, drop_from_front):
    """Drop whole sentences farthest from u_0 until the chunk fits; the centre
    sentence itself is clipped only as a last resort."""
    truncated = False
    parts = list(parts)

    def size():
        return 1 + sum(len(p) for p in parts) + max(len(parts) - 1, 0)

    while size() > max_tokens and len(parts) > 1:
        parts.pop(0 if drop_from_front else -1)
        truncated = True
    if size() > max_tokens:
        parts[0] = parts[0][:max_tokens - 1]
        truncated = True
    return parts, truncated


def build_cse_chunks(window, tokenizer, max_tokens=MAX_TOKENS):
    """Return ``(past, future)`` chunks for the CSE construction."""
    center = tokenizer.encode(window.center)
    if not center:
        raise InvalidInputError("center sentence has no tokens")
    past = [tokenizer.encode(t) for t, pad in window.past if not pad] + [center]
    future = [center] + [tokenizer.encode(t) for t, pad in window.future if not pad]
    past, tp = _fit(past, max_tokens, drop_from_front=True)
    future, tf = _fit(future, max_tokens, drop_from_front=False)
    return _chunk(past, tokenizer, tp), _chunk(future, tokenizer, tf)


def build_pse_pairs(window, tokenizer, max_tokens=MAX_TOKENS):
    """Return the 2L pair chunks (u_i, u_i+1) for i = -L .. L-1."""
    if window.L < 1:
        raise InvalidInputError("PSE needs L >= 1")
    if not tokenizer.encode(window.center):
        raise InvalidInputError("center sentence has no tokens")
    sents = window.sentences()
    pairs = []
    for (ta, pa), (tb, pb) in zip(sents[:-1], sents[1:]):
        a = tokenizer.encode(ta) if not pa else []
        b = tokenizer.encode(tb) if not pb else []
        truncated = False
        while 2 + len(a) + len(b) > max_tokens:
            # clip the longer sentence from its far end
            if len(a) >= len(b):
                a = a[1:]
            else:
                b = b[:-1]
            truncated = True
        pairs.append(_chunk([a, b], tokenizer, truncated, segments=(SEGMENT_A, SEGMENT_B), is_pad=pa or pb))
    return pairs


# --------------------------------------------------------------------------
# Hashing and backends

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def chunk_bytes(backend_id, chunk):
    """Canonical byte form: utf-8 id, NUL, token ids as <u4, segment ids as u8."""
    return (backend_id.encode("utf-8") + b"\x00"
            + struct.pack(f"<{len(chunk.token_ids)}I", *chunk.token_ids)
            + bytes(chunk.segment_ids))


def content_hash(backend_id, chunk) -> bytes:
    return hashlib.sha256(chunk_bytes(backend_id, chunk)).digest()


def xorshift64_uniform(seed, n):
    """``n`` draws in [-1, 1) from Marsaglia's xorshift64 (13, 7, 17).

    Each state's top 53 bits become a uniform in [0, 1) that is mapped
    affinely to [-1, 1). A zero seed is replaced by the FNV offset basis.
    """
    x = seed & _MASK64 or _FNV_OFFSET
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        x ^= (x << 13) & _MASK64
        x ^= x >> 7
        x ^= (x << 17) & _MASK64
        out[i] = (x >> 11) * (1.0 / (1 << 53))
    return 2.0 * out - 1.0


class EmbeddingBackend(Protocol):
    backend_id: str
    dim: int
    max_tokens: int
    tokenizer: Tokenizer

    def embed(self, chunk: TokenChunk) -> np.ndarray: ...


class StubBackend:
    """Deterministic pseudo-embeddings for tests and CI.

    seed = FNV-1a-64(chunk_bytes), vector = xorshift64 draws in [-1, 1), stored f32.
    """

    max_tokens = MAX_TOKENS

    def __init__(self, dim=768, backend_id="stub", tokenizer=None):
        self.dim = dim
        self.backend_id = backend_id
        self.tokenizer = tokenizer or WhitespaceTokenizer()

    def embed(self, chunk):
        seed = fnv1a64(chunk_bytes(self.backend_id, chunk))
        return xorshift64_uniform(seed, self.dim).astype(np.float32)


class HFTokenizerAdapter:
    def __init__(self, tok):
        self._tok = tok
        self.cls_id = tok.cls_token_id
        self.sep_id = tok.sep_token_id

    def encode(self, text):
        return list(self._tok.encode(text, add_special_tokens=False)) if text else []


class PretrainedBackend:
    """Frozen BERT-style encoder from ``transformers``; reads the top-layer CLS state.

    ``model`` and ``tokenizer`` may be passed directly (e.g. a randomly
    initialised config for tests); otherwise they are loaded by ``name``.
    The model is put in eval mode and never receives gradients.
    """

    def __init__(self, name=None, model=None, tokenizer=None):
        if model is None:
            from transformers import AutoModel, AutoTokenizer
            tokenizer = AutoTokenizer.from_pretrained(name)
            model = AutoModel.from_pretrained(name)
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer if hasattr(tokenizer, "cls_id") else HFTokenizerAdapter(tokenizer)
        self.dim = self.model.config.hidden_size
        self.max_tokens = min(MAX_TOKENS, self.model.config.max_position_embeddings)
        self.backend_id = f"pretrained:{name or self.model.config.name_or_path or 'custom'}"
        self._lock = threading.Lock()

    def embed(self, chunk):
        import torch
        ids = torch.tensor([chunk.token_ids])
        with self._lock, torch.no_grad():
            out = self.model(input_ids=ids,
                             token_type_ids=torch.tensor([chunk.segment_ids]),
                             attention_mask=torch.tensor([chunk.attention_mask], dtype=torch.long))
        return out.last_hidden_state[0, chunk.cls_position].float().numpy().copy()


def make_backend(spec, dim=768, vocab=()):
    """``"stub"`` or ``"pretrained:<name>"``."""
    if spec == "stub":
        return StubBackend(dim=dim, tokenizer=WhitespaceTokenizer(vocab))
    if spec.startswith("pretrained:"):
        try:
            return PretrainedBackend(spec.split(":", 1)[1])
        except Exception as exc:
            raise BackendError(f"cannot load backend {spec!r}: {exc}") from exc
    raise InvalidInputError(f"unknown backend {spec!r}")


# --------------------------------------------------------------------------
# Extraction and caching

class EmbedKind(Enum):
    PAST_CHUNK = "past"
    FUTURE_CHUNK = "future"
    PAIR = "pair"


@dataclass(frozen=True)
class ContextEmbedding:
    vector: np.ndarray
    kind: EmbedKind
    pair_index: int | None = None
    is_pad: bool = False

    def __post_init__(self):
        if (self.pair_index is not None) != (self.kind is EmbedKind.PAIR):
            raise InvalidInputError("pair_index is set iff kind is PAIR")


class EmbeddingCache:
    """In-memory map content-hash -> f32 vector, optionally persisted.

    File layout (little-endian): ``b"CUCACHE1"``, u32 dim, then records of
    32-byte SHA-256 digest followed by ``dim`` f32 values.
    """

    MAGIC = b"CUCACHE1"

    def __init__(self, dim, path=None):
        self.dim = dim
        self.path = Path(path) if path is not None else None
        self._store: dict[bytes, bytes] = {}
        self._lock = threading.Lock()
        self._pending: list[bytes] = []
        if self.path is not None and self.path.exists():
            self._read()

    def _read(self):
        data = self.path.read_bytes()
        if data[:8] != self.MAGIC:
            raise InvalidInputError(f"{self.path}: not an embedding cache")
        (dim,) = struct.unpack_from("<I", data, 8)
        if dim != self.dim:
            raise InvalidInputError(f"{self.path}: cache dim {dim} != {self.dim}")
        rec = 32 + 4 * dim
        body = data[12:]
        if len(body) % rec:
            raise InvalidInputError(f"{self.path}: truncated record")
        for off in range(0, len(body), rec):
            self._store[body[off:off + 32]] = body[off + 32:off + rec]

    def __len__(self):
        return len(self._store)

    def __contains__(self, key):
        return key in self._store

    def get(self, key):
        raw = self._store.get(key)
        return None if raw is None else np.frombuffer(raw, dtype="<f4").copy()

    def put(self, key, vector):
        vector = np.asarray(vector, dtype="<f4")
        if vector.shape != (self.dim,):
            raise InvalidInputError(f"vector shape {vector.shape} != ({self.dim},)")
        with self._lock:
            if key not in self._store:
                self._store[key] = vector.tobytes()
                self._pending.append(key)

    def save(self, path=None):
        """Write the whole cache (or append new records when extending the same file)."""
        path = Path(path) if path is not None else self.path
        with self._lock:
            if path == self.path and path.exists():
                with open(path, "ab") as fh:
                    for k in self._pending:
                        fh.write(k + self._store[k])
            else:
                with open(path, "wb") as fh:
                    fh.write(self.MAGIC + struct.pack("<I", self.dim))
                    for k, v in self._store.items():
                        fh.write(k + v)
            self._pending.clear()


def extract_cls_embedding(chunk, backend, cache=None, kind=EmbedKind.PAIR, pair_index=None):
    if len(chunk) > backend.max_tokens:
        raise InvalidInputError(f"chunk of {len(chunk)} tokens exceeds backend limit {backend.max_tokens}")
    key = content_hash(backend.backend_id, chunk)
    vec = cache.get(key) if cache is not None else None
    if vec is None:
        try:
            vec = np.asarray(backend.embed(chunk), dtype=np.float32)
        except Exception as exc:
            raise BackendError(f"backend {backend.backend_id} failed: {exc}", key.hex()) from exc
        if vec.shape != (backend.dim,):
            raise BackendError(f"backend returned shape {vec.shape}", key.hex())
        if cache is not None:
            cache.put(key, vec)
    if kind is not EmbedKind.PAIR:
        pair_index = None
    return ContextEmbedding(vec, kind, pair_index, chunk.is_pad)


def embed_window_cse(window, backend, cache=None):
    past, future = build_cse_chunks(window, backend.tokenizer, backend.max_tokens)
    return (extract_cls_embedding(past, backend, cache, EmbedKind.PAST_CHUNK),
            extract_cls_embedding(future, backend, cache, EmbedKind.FUTURE_CHUNK))


def embed_window_pse(window, backend, cache=None):
    """Return ``(E, key_mask)``: a 2L x d_e f32 matrix and a bool mask.

    Rows for padded pairs are zeros with mask False; they are never sent to
    the backend.
    """
    pairs = build_pse_pairs(window, backend.tokenizer, backend.max_tokens)
    E = np.zeros((len(pairs), backend.dim), dtype=np.float32)
    mask = np.zeros(len(pairs), dtype=bool)
    for row, chunk in enumerate(pairs):
        if chunk.is_pad:
            continue
        E[row] = extract_cls_embedding(chunk, backend, cache, EmbedKind.PAIR, row - window.L).vector
        mask[row] = True
    return E, mask
