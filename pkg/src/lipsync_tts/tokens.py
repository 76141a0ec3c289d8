"""Character-level text tokenizer and a k-means audio codebook.

The codebook plays the part of a discrete audio tokenizer: each mel frame is
replaced by the id of its nearest centroid, and the id ``K`` is reserved as
the stop token.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    InsufficientData,
    InvalidInput,
    InvalidLanguage,
    MalformedSequence,
    ShapeError,
    UnsupportedFormat,
)

DEFAULT_ALPHABET = "abcdefghijklmno "
UNK_CHAR = "?"

DEFAULT_K = 64
DEFAULT_D_MEL = 16
DEFAULT_TOKEN_RATE_HZ = 50.0

CODEBOOK_MAGIC = b"LSCB"
CODEBOOK_VERSION = 1


@dataclass(frozen=True)
class TextSequence:
    ids: tuple[int, ...]
    language_id: int
    raw: str

    def __len__(self):
        return len(self.ids)


class CharTokenizer:
    """Fixed character table; id ``len(alphabet)`` is UNK."""

    def __init__(self, alphabet: str = DEFAULT_ALPHABET, n_langs: int = 2):
        if len(set(alphabet)) != len(alphabet):
            raise InvalidInput("alphabet contains duplicate characters")
        if UNK_CHAR in alphabet:
            raise InvalidInput(f"{UNK_CHAR!r} is reserved for UNK")
        self.alphabet = alphabet
        self.n_langs = n_langs
        self._index = {c: i for i, c in enumerate(alphabet)}
        self.unk_id = len(alphabet)

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet) + 1

    def encode(self, text: str, language_id: int = 0) -> TextSequence:
        if not text:
            raise InvalidInput("cannot encode an empty string")
        if not 0 <= language_id < self.n_langs:
            raise InvalidLanguage(f"language id {language_id} not in [0, {self.n_langs})")
        ids = tuple(self._index.get(c, self.unk_id) for c in text)
        return TextSequence(ids=ids, language_id=language_id, raw=text)

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.alphabet[i] if i < self.unk_id else UNK_CHAR for i in ids)


def encode_text(text: str, language_id: int = 0, tokenizer: CharTokenizer | None = None) -> TextSequence:
    return (tokenizer or CharTokenizer()).encode(text, language_id)


@dataclass(frozen=True)
class AudioCodebook:
    centroids: np.ndarray  # (K, D_mel) float32

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float32)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ShapeError(f"centroids must be a non-empty matrix, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise InvalidInput("codebook centroids must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def d_mel(self) -> int:
        return self.centroids.shape[1]

    @property
    def stop_id(self) -> int:
        return self.K

    @property
    def vocab_size(self) -> int:
        return self.K + 1

    def hash(self) -> str:
        return hashlib.sha256(self.centroids.astype("<f4").tobytes()).hexdigest()


@dataclass(frozen=True)
class AudioTokenSequence:
    ids: tuple[int, ...]
    stop_id: int
    token_rate_hz: float = DEFAULT_TOKEN_RATE_HZ

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if len(ids) < 1:
            raise MalformedSequence("audio token sequence must be non-empty")
        for pos, i in enumerate(ids):
            if not 0 <= i <= self.stop_id:
                raise MalformedSequence(f"token {i} at {pos} outside [0, {self.stop_id}]")
            if i == self.stop_id and pos != len(ids) - 1:
                raise MalformedSequence(f"stop token at interior position {pos}")

    def __len__(self):
        return len(self.ids)

    @property
    def has_stop(self) -> bool:
        return self.ids[-1] == self.stop_id

    @property
    def content(self) -> tuple[int, ...]:
        """Ids with the terminal stop removed."""
        return self.ids[:-1] if self.has_stop else self.ids

    @property
    def duration_s(self) -> float:
        return len(self.content) / self.token_rate_hz


def fit_codebook(mel_frames: np.ndarray, K: int = DEFAULT_K, seed: int = 0, n_iter: int = 50) -> AudioCodebook:
    """Lloyd's k-means; init samples K distinct frame indices with ``seed``.

    Empty clusters keep their previous centroid.
    """
    x = np.asarray(mel_frames, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"mel_frames must be N x D, got shape {x.shape}")
    if K < 1:
        raise InvalidInput("K must be >= 1")
    if x.shape[0] < K:
        raise InsufficientData(f"need at least K={K} frames, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("mel frames must be finite")

    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(x.shape[0], size=K, replace=False)].copy()
    for _ in range(n_iter):
        labels = _nearest(x, centroids)
        new = centroids.copy()
        for k in range(K):
            members = x[labels == k]
            if len(members):
                new[k] = members.mean(axis=0)
        if np.array_equal(new, centroids):
            break
        centroids = new
    return AudioCodebook(centroids.astype(np.float32))


def _nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, so ties resolve to the lowest id
    d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1)


def tokenize_audio(mel_frames: np.ndarray, cb: AudioCodebook, append_stop: bool = True,
                   token_rate_hz: float = DEFAULT_TOKEN_RATE_HZ) -> AudioTokenSequence:
    x = np.asarray(mel_frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cb.d_mel:
        raise ShapeError(f"expected T x {cb.d_mel} frames, got shape {x.shape}")
    ids = _nearest(x, cb.centroids.astype(np.float64)).tolist()
    if append_stop:
        ids.append(cb.stop_id)
    return AudioTokenSequence(tuple(ids), stop_id=cb.stop_id, token_rate_hz=token_rate_hz)


def detokenize_audio(seq: AudioTokenSequence | Sequence[int], cb: AudioCodebook) -> np.ndarray:
    ids = list(seq.ids if isinstance(seq, AudioTokenSequence) else seq)
    if ids and ids[-1] == cb.stop_id:
        ids = ids[:-1]
    for pos, i in enumerate(ids):
        if i == cb.stop_id:
            raise MalformedSequence(f"stop token at interior position {pos}")
        if not 0 <= i < cb.K:
            raise MalformedSequence(f"token {i} outside codebook range")
    return cb.centroids[np.asarray(ids, dtype=np.int64)].copy() if ids else np.zeros((0, cb.d_mel), np.float32)


def save_codebook(cb: AudioCodebook, path) -> None:
    header = CODEBOOK_MAGIC + struct.pack("<HII", CODEBOOK_VERSION, cb.K, cb.d_mel)
    Path(path).write_bytes(header + cb.centroids.astype("<f4").tobytes())


def load_codebook(path) -> AudioCodebook:
    raw = Path(path).read_bytes()
    if raw[:4] != CODEBOOK_MAGIC:
        raise UnsupportedFormat(f"{path}: not a codebook file")
    version, K, D = struct.unpack_from("<HII", raw, 4)
    if version != CODEBOOK_VERSION:
        raise UnsupportedFormat(f"{path}: codebook version {version}, expected {CODEBOOK_VERSION}")
    payload = raw[14:]
    if len(payload) != K * D * 4:
        raise UnsupportedFormat(f"{path}: payload size {len(payload)} does not match {K}x{D}")
    return AudioCodebook(np.frombuffer(payload, dtype="<f4").reshape(K, D).astype(np.float32))
