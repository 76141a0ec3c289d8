"""Synthetic audiovisual corpus with exactly known text/audio/viseme alignment.

Every character is spoken as a run of ``tokens_per_char`` identical audio
tokens drawn from a speaker-specific character-to-token map. Pauses are runs
of a reserved silence token. The lip track carries one viseme class per
character (letters share classes, as real visemes do) and a neutral class for
spaces and pauses, sampled at the video frame rate.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import CorruptDataset, InvalidInput, UnsupportedFormat
from .tokens import (
    DEFAULT_ALPHABET,
    AudioCodebook,
    AudioTokenSequence,
    CharTokenizer,
    TextSequence,
    detokenize_audio,
    fit_codebook,
    load_codebook,
    save_codebook,
)

DATASET_VERSION = 1
VIDEO_FPS = 25.0


@dataclass
class CorpusConfig:
    alphabet: str = DEFAULT_ALPHABET
    # letters each language draws its words from
    language_letters: tuple[str, ...] = ("abcdefgh", "ijklmno")
    n_speakers: int = 4
    n_visemes: int = 6
    K: int = 64
    d_mel: int = 16
    token_rate_hz: float = 50.0
    video_fps: float = VIDEO_FPS
    tokens_per_char: tuple[int, int] = (2, 4)
    n_words: tuple[int, int] = (2, 4)
    word_len: tuple[int, int] = (2, 3)
    max_pauses: int = 2
    pause_len: tuple[int, int] = (4, 10)
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.language_letters = tuple(self.language_letters)
        for name in ("tokens_per_char", "n_words", "word_len", "pause_len"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise InvalidInput(f"{name} must be an increasing pair of positive integers")
            setattr(self, name, (int(lo), int(hi)))
        for letters in self.language_letters:
            if not set(letters) <= set(self.alphabet):
                raise InvalidInput("language letters must come from the alphabet")
        ratio = self.token_rate_hz / self.video_fps
        if ratio != int(ratio) or ratio < 1:
            raise InvalidInput("token_rate_hz must be an integer multiple of video_fps")
        if self.K < self.n_alphabet + 1:
            raise InvalidInput("codebook too small for per-speaker character maps plus silence")

    @property
    def n_alphabet(self) -> int:
        return len(self.alphabet)

    @property
    def rate_ratio(self) -> int:
        return int(self.token_rate_hz / self.video_fps)

    @property
    def d_video(self) -> int:
        return self.n_visemes + 1

    @property
    def n_langs(self) -> int:
        return len(self.language_letters)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["language_letters"] = list(self.language_letters)
        for k in ("tokens_per_char", "n_words", "word_len", "pause_len"):
            d[k] = list(d[k])
        return d


@dataclass(frozen=True)
class UtteranceSpec:
    text: str
    speaker_id: int
    tokens_per_char: int
    pause_positions: tuple[tuple[int, int], ...] = ()
    noise_std: float = 0.0
    language_id: int = 0

    def __post_init__(self):
        if self.tokens_per_char < 1:
            raise InvalidInput("tokens_per_char must be >= 1")
        if self.noise_std < 0:
            raise InvalidInput("noise_std must be nonnegative")
        for pos, length in self.pause_positions:
            # a pause at index len(text) trails the utterance
            if not 0 <= pos <= len(self.text) or length < 1:
                raise InvalidInput(f"pause ({pos}, {length}) out of bounds")


@dataclass
class AVExample:
    text_seq: TextSequence
    audio_tokens: AudioTokenSequence
    mel: np.ndarray
    lip_video: np.ndarray
    speaker_ref_mel: np.ndarray
    ground_truth_duration_s: float
    speaker_id: int

    @property
    def video_duration_s(self) -> float:
        return self.lip_video.shape[0] / VIDEO_FPS

    def __eq__(self, other):
        if not isinstance(other, AVExample):
            return NotImplemented
        return (
            self.text_seq == other.text_seq
            and self.audio_tokens == other.audio_tokens
            and self.speaker_id == other.speaker_id
            and self.ground_truth_duration_s == other.ground_truth_duration_s
            and all(
                a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)
                for a, b in (
                    (self.mel, other.mel),
                    (self.lip_video, other.lip_video),
                    (self.speaker_ref_mel, other.speaker_ref_mel),
                )
            )
        )


@dataclass
class Corpus:
    """Everything needed to generate, decode and recognise examples."""

    config: CorpusConfig
    codebook: AudioCodebook
    silence_token: int
    speaker_maps: np.ndarray  # (n_speakers, n_alphabet) audio token per character
    speaker_ref_text: tuple[str, ...]
    tokenizer: CharTokenizer = field(init=False)

    def __post_init__(self):
        self.speaker_maps = np.asarray(self.speaker_maps, dtype=np.int64)
        self.tokenizer = CharTokenizer(self.config.alphabet, n_langs=self.config.n_langs)

    def viseme_of(self, char: str) -> int:
        if char == " ":
            return self.config.n_visemes
        return self.config.alphabet.index(char) % self.config.n_visemes

    @property
    def neutral_viseme(self) -> int:
        return self.config.n_visemes

    def recognize(self, tokens: Sequence[int], speaker_id: int) -> str:
        """Invert the character map: collapse runs, drop silence, map tokens to characters.

        Tokens outside the speaker's map become the UNK character.
        """
        inverse = {int(t): c for c, t in zip(self.config.alphabet, self.speaker_maps[speaker_id])}
        out = []
        prev = None
        for t in tokens:
            t = int(t)
            if t == self.codebook.stop_id:
                break
            if t != prev and t != self.silence_token:
                out.append(inverse.get(t, "?"))
            prev = t
        return "".join(out)

    def to_manifest(self) -> dict:
        return {
            "corpus_config": self.config.to_dict(),
            "silence_token": int(self.silence_token),
            "speaker_maps": self.speaker_maps.tolist(),
            "speaker_ref_text": list(self.speaker_ref_text),
            "codebook_hash": self.codebook.hash(),
        }


def build_corpus(config: CorpusConfig | None = None) -> Corpus:
    """Fit the codebook on prototype mel frames and draw the speaker maps."""
    config = config or CorpusConfig()
    rng = np.random.default_rng(config.seed)
    protos = rng.normal(0.0, 1.0, size=(config.K, config.d_mel))
    protos[0] = -3.0  # low-energy frame; its cluster becomes the silence token
    frames = np.repeat(protos, 16, axis=0) + rng.normal(0.0, 0.05, size=(config.K * 16, config.d_mel))
    cb = fit_codebook(frames, config.K, seed=config.seed)
    silence = int(np.argmin(((cb.centroids - protos[0]) ** 2).sum(axis=1)))

    usable = np.array([k for k in range(config.K) if k != silence])
    maps = np.stack([rng.choice(usable, size=config.n_alphabet, replace=False) for _ in range(config.n_speakers)])
    letters = [c for c in config.alphabet if c != " "]
    ref_text = tuple("".join(rng.permutation(letters)) for _ in range(config.n_speakers))
    return Corpus(config, cb, silence, maps, ref_text)


def random_text(rng: np.random.Generator, config: CorpusConfig, language_id: int, n_words: int | None = None) -> str:
    """Words of ``word_len`` letters without adjacent repeats, so runs decode unambiguously."""
    letters = config.language_letters[language_id]
    if n_words is None:
        n_words = int(rng.integers(config.n_words[0], config.n_words[1] + 1))
    words = []
    for _ in range(n_words):
        n = int(rng.integers(config.word_len[0], config.word_len[1] + 1))
        w = [letters[int(rng.integers(len(letters)))]]
        while len(w) < n:
            c = letters[int(rng.integers(len(letters)))]
            if c != w[-1]:
                w.append(c)
        words.append("".join(w))
    return " ".join(words)


def random_spec(rng: np.random.Generator, corpus: Corpus, language_id: int | None = None,
                text: str | None = None) -> UtteranceSpec:
    cfg = corpus.config
    if language_id is None:
        language_id = int(rng.integers(cfg.n_langs))
    if text is None:
        text = random_text(rng, cfg, language_id)
    n_pauses = int(rng.integers(cfg.max_pauses + 1))
    pauses = tuple(sorted(
        (int(rng.integers(len(text) + 1)), int(rng.integers(cfg.pause_len[0], cfg.pause_len[1] + 1)))
        for _ in range(n_pauses)
    ))
    return UtteranceSpec(
        text=text,
        speaker_id=int(rng.integers(cfg.n_speakers)),
        tokens_per_char=int(rng.integers(cfg.tokens_per_char[0], cfg.tokens_per_char[1] + 1)),
        pause_positions=pauses,
        noise_std=cfg.noise_std,
        language_id=language_id,
    )


def _speak(text: str, speaker_id: int, tpc: int, pauses, corpus: Corpus) -> tuple[list[int], list[int]]:
    """Audio token ids and per-token viseme labels."""
    cfg = corpus.config
    pause_at: dict[int, int] = {}
    for pos, length in pauses:
        pause_at[pos] = pause_at.get(pos, 0) + length
    tokens: list[int] = []
    visemes: list[int] = []
    for i in range(len(text) + 1):
        if i in pause_at:
            tokens += [corpus.silence_token] * pause_at[i]
            visemes += [corpus.neutral_viseme] * pause_at[i]
        if i == len(text):
            break
        c = text[i]
        if c not in cfg.alphabet:
            raise InvalidInput(f"character {c!r} outside the corpus alphabet")
        tokens += [int(corpus.speaker_maps[speaker_id, cfg.alphabet.index(c)])] * tpc
        visemes += [corpus.viseme_of(c)] * tpc
    return tokens, visemes


def generate_example(spec: UtteranceSpec, corpus: Corpus, seed: int = 0) -> AVExample:
    cfg = corpus.config
    if not spec.text:
        raise InvalidInput("utterance text must be non-empty")
    if not 0 <= spec.speaker_id < cfg.n_speakers:
        raise InvalidInput(f"speaker {spec.speaker_id} not in corpus")
    rng = np.random.default_rng(seed)
    tokens, visemes = _speak(spec.text, spec.speaker_id, spec.tokens_per_char, spec.pause_positions, corpus)
    # clips end on a video-frame boundary; trailing silence fills the last frame
    r = cfg.rate_ratio
    while len(tokens) % r:
        tokens.append(corpus.silence_token)
        visemes.append(corpus.neutral_viseme)

    cb = corpus.codebook
    audio = AudioTokenSequence(tuple(tokens) + (cb.stop_id,), stop_id=cb.stop_id, token_rate_hz=cfg.token_rate_hz)
    mel = detokenize_audio(audio, cb)

    t_a = len(tokens)
    t_v = math.ceil(t_a / r)
    frame_labels = [visemes[min(f * r, t_a - 1)] for f in range(t_v)]
    lip = np.zeros((t_v, cfg.d_video), dtype=np.float32)
    lip[np.arange(t_v), frame_labels] = 1.0
    if spec.noise_std > 0:
        lip += rng.normal(0.0, spec.noise_std, size=lip.shape).astype(np.float32)

    ref_tokens, _ = _speak(corpus.speaker_ref_text[spec.speaker_id], spec.speaker_id, 2, (), corpus)
    ref_mel = detokenize_audio(ref_tokens, cb)

    return AVExample(
        text_seq=corpus.tokenizer.encode(spec.text, spec.language_id),
        audio_tokens=audio,
        mel=mel,
        lip_video=lip,
        speaker_ref_mel=ref_mel,
        ground_truth_duration_s=t_a / cfg.token_rate_hz,
        speaker_id=spec.speaker_id,
    )


def generate_corpus(corpus: Corpus, n: int, seed: int) -> list[AVExample]:
    rng = np.random.default_rng(seed)
    specs = [random_spec(rng, corpus) for _ in range(n)]
    seeds = rng.integers(0, 2**31 - 1, size=n)
    return [generate_example(s, corpus, int(k)) for s, k in zip(specs, seeds)]


class Dataset:
    """A corpus definition plus its examples."""

    def __init__(self, corpus: Corpus, examples: Sequence[AVExample]):
        self.corpus = corpus
        self.examples = list(examples)

    def __len__(self):
        return len(self.examples)

    def __iter__(self) -> Iterator[AVExample]:
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]


# -- persistence -----------------------------------------------------------

_REC_HEAD = struct.Struct("<iiiiiiiiid")


def _pack_example(ex: AVExample) -> bytes:
    text = ex.text_seq.raw.encode("utf-8")
    ids = np.asarray(ex.audio_tokens.ids, dtype="<i4")
    mel = np.ascontiguousarray(ex.mel, dtype="<f4")
    lip = np.ascontiguousarray(ex.lip_video, dtype="<f4")
    ref = np.ascontiguousarray(ex.speaker_ref_mel, dtype="<f4")
    head = _REC_HEAD.pack(
        len(text), ex.text_seq.language_id, ex.speaker_id, len(ids),
        mel.shape[0], mel.shape[1], lip.shape[0], lip.shape[1], ref.shape[0],
        ex.ground_truth_duration_s,
    )
    return head + text + ids.tobytes() + mel.tobytes() + lip.tobytes() + ref.tobytes()


def _unpack_examples(raw: bytes, corpus: Corpus, count: int) -> list[AVExample]:
    out = []
    off = 0
    cb = corpus.codebook
    try:
        for _ in range(count):
            n_text, lang, spk, n_ids, t_a, d_mel, t_v, d_v, t_r, dur = _REC_HEAD.unpack_from(raw, off)
            off += _REC_HEAD.size

            def take(nbytes):
                nonlocal off
                chunk = raw[off:off + nbytes]
                if len(chunk) != nbytes:
                    raise CorruptDataset("record truncated")
                off += nbytes
                return chunk

            text = take(n_text).decode("utf-8")
            ids = np.frombuffer(take(4 * n_ids), dtype="<i4")
            mel = np.frombuffer(take(4 * t_a * d_mel), dtype="<f4").reshape(t_a, d_mel).astype(np.float32)
            lip = np.frombuffer(take(4 * t_v * d_v), dtype="<f4").reshape(t_v, d_v).astype(np.float32)
            ref = np.frombuffer(take(4 * t_r * d_mel), dtype="<f4").reshape(t_r, d_mel).astype(np.float32)
            out.append(AVExample(
                text_seq=corpus.tokenizer.encode(text, lang),
                audio_tokens=AudioTokenSequence(tuple(ids.tolist()), stop_id=cb.stop_id,
                                                token_rate_hz=corpus.config.token_rate_hz),
                mel=mel, lip_video=lip, speaker_ref_mel=ref,
                ground_truth_duration_s=dur, speaker_id=spk,
            ))
    except struct.error as exc:
        raise CorruptDataset(f"record table truncated: {exc}") from exc
    if off != len(raw):
        raise CorruptDataset("trailing bytes after last record")
    return out


def write_dataset(examples: Sequence[AVExample], path, corpus: Corpus) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = b"".join(_pack_example(ex) for ex in examples)
    save_codebook(corpus.codebook, path / "codebook.bin")
    (path / "records.bin").write_bytes(records)
    manifest = {
        "format_version": DATASET_VERSION,
        "count": len(examples),
        "alphabet": corpus.config.alphabet,
        "records_sha256": hashlib.sha256(records).hexdigest(),
        **corpus.to_manifest(),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise CorruptDataset(f"{path}: unreadable manifest") from exc
    if manifest.get("format_version") != DATASET_VERSION:
        raise UnsupportedFormat(f"{path}: dataset version {manifest.get('format_version')}, expected {DATASET_VERSION}")
    records = (path / "records.bin").read_bytes()
    if hashlib.sha256(records).hexdigest() != manifest["records_sha256"]:
        raise CorruptDataset(f"{path}: records checksum mismatch")
    cb = load_codebook(path / "codebook.bin")
    if cb.hash() != manifest["codebook_hash"]:
        raise CorruptDataset(f"{path}: codebook hash mismatch")
    corpus = Corpus(
        CorpusConfig(**manifest["corpus_config"]),
        cb,
        manifest["silence_token"],
        np.asarray(manifest["speaker_maps"]),
        tuple(manifest["speaker_ref_text"]),
    )
    return Dataset(corpus, _unpack_examples(records, corpus, manifest["count"]))
