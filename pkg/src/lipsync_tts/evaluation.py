"""Objective metrics, the WSOLA time-stretch baseline and batch evaluation reports.

AV offset here is an envelope cross-correlation stand-in; it is not a SyncNet
LSE score and reports label it accordingly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import median
from typing import Optional, Sequence

import numpy as np
from scipy.signal import correlate, get_window

from .corpus import Corpus, CorpusConfig, Dataset, random_text
from .errors import EmptyAudio, InvalidConfig, InvalidInput
from .inference import (
    SAMPLE_RATE,
    VIDEO_FPS,
    GenerationConfig,
    dub,
    synthesize_waveform,
    waveform_to_mel,
)
from .tokens import AudioTokenSequence, tokenize_audio

REPORT_VERSION = 1
SCENARIOS = ("same_text", "different_text", "cross_lingual_stub")
BASELINES = ("none", "wsola_stretch")


# -- duration --------------------------------------------------------------------

def _check_durations(synth_s, ref_s):
    if not (synth_s > 0 and ref_s > 0):
        raise InvalidInput(f"durations must be positive, got synth={synth_s}, ref={ref_s}")


def duration_ratio(synth_s: float, ref_s: float) -> float:
    _check_durations(synth_s, ref_s)
    return synth_s / ref_s


def duration_difference(synth_s: float, ref_s: float) -> float:
    _check_durations(synth_s, ref_s)
    return abs(synth_s - ref_s)


# -- error rates -------------------------------------------------------------------

def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution/deletion/insertion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def wer(ref, hyp) -> float:
    ref = ref.split() if isinstance(ref, str) else list(ref)
    hyp = hyp.split() if isinstance(hyp, str) else list(hyp)
    if not ref:
        raise InvalidInput("reference must contain at least one word")
    return edit_distance(ref, hyp) / len(ref)


def cer(ref: str, hyp: str) -> float:
    if not ref:
        raise InvalidInput("reference must be non-empty")
    return edit_distance(list(ref), list(hyp)) / len(ref)


# -- AV offset -----------------------------------------------------------------------

def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else 0.0


def lag_correlations(audio_env, video_env, max_lag: int) -> dict[int, float]:
    """Normalised correlation of ``audio[t]`` with ``video[t - lag]`` over their overlap."""
    a = np.asarray(audio_env, dtype=np.float64)
    v = np.asarray(video_env, dtype=np.float64)
    out = {}
    for lag in range(-max_lag, max_lag + 1):
        lo = max(0, lag)
        hi = min(len(a), len(v) + lag)
        out[lag] = _ncc(a[lo:hi], v[lo - lag:hi - lag]) if hi - lo >= 2 else 0.0
    return out


def av_offset(audio_env, video_env, max_lag: int = 10) -> int:
    """Lag (in frames) by which audio trails video; ties go to the smallest |lag|, negative first."""
    if max_lag < 0:
        raise InvalidInput("max_lag must be >= 0")
    if min(len(audio_env), len(video_env)) < max_lag + 1:
        raise InvalidInput(f"envelopes need at least {max_lag + 1} frames")
    corr = lag_correlations(audio_env, video_env, max_lag)
    best, best_val = 0, -math.inf
    for lag in sorted(corr, key=lambda x: (abs(x), x)):
        if corr[lag] > best_val + 1e-12:
            best, best_val = lag, corr[lag]
    return best


def audio_envelope(tokens: Sequence[int], silence_token: int, ratio: int = 2) -> np.ndarray:
    """Fraction of non-silent audio tokens per video frame."""
    voiced = np.array([t != silence_token for t in tokens], dtype=np.float64)
    n = math.ceil(len(voiced) / ratio)
    voiced = np.pad(voiced, (0, n * ratio - len(voiced)))
    return voiced.reshape(n, ratio).mean(axis=1)


def video_envelope(lip_video: np.ndarray, neutral_index: int) -> np.ndarray:
    """1 where the strongest viseme channel is not the neutral (closed-mouth) one."""
    return (np.argmax(np.asarray(lip_video), axis=1) != neutral_index).astype(np.float64)


# -- WSOLA ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WsolaConfig:
    frame_len: int = 1024
    hop_synthesis: int = 512
    tolerance: int = 256
    rate: float = 1.0

    def __post_init__(self):
        if not 0 < self.hop_synthesis <= self.frame_len:
            raise InvalidConfig("need 0 < hop_synthesis <= frame_len")
        if self.frame_len % self.hop_synthesis:
            raise InvalidConfig("frame_len must be a multiple of hop_synthesis")
        if not 0 <= self.tolerance < self.hop_synthesis:
            raise InvalidConfig("need 0 <= tolerance < hop_synthesis")
        if not self.rate > 0:
            raise InvalidConfig("rate must be > 0")


def synthesis_window(cfg: WsolaConfig) -> np.ndarray:
    """Periodic Hann scaled so copies spaced ``hop_synthesis`` apart sum to one."""
    overlap = cfg.frame_len // cfg.hop_synthesis
    if overlap == 1:
        return np.ones(cfg.frame_len)
    return get_window("hann", cfg.frame_len, fftbins=True) * (2.0 / overlap)


def wsola(waveform, wcfg: WsolaConfig) -> np.ndarray:
    """Waveform-similarity overlap-add; ``rate > 1`` shortens, ``rate < 1`` lengthens.

    Frame ``m`` is taken near analysis position ``m * hop_synthesis * rate``, shifted
    within ``±tolerance`` to best match the natural continuation of the previously
    copied frame, then overlap-added at ``m * hop_synthesis``.
    """
    x = np.asarray(waveform, dtype=np.float64)
    L, Hs, tol = wcfg.frame_len, wcfg.hop_synthesis, wcfg.tolerance
    if len(x) < L + tol:
        raise InvalidInput(f"waveform needs at least frame_len + tolerance = {L + tol} samples")
    Ha = Hs * wcfg.rate
    target = int(round(len(x) / wcfg.rate))
    n_frames = max(1, math.ceil(max(target - L, 0) / Hs) + 1)
    win = synthesis_window(wcfg)

    # padding lets the search and the continuation run past both ends
    pad = tol + L + Hs
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad + int(math.ceil(n_frames * Ha)))])
    out = np.zeros((n_frames - 1) * Hs + L)
    norm = np.zeros_like(out)
    prev = None
    for m in range(n_frames):
        nominal = pad + int(round(m * Ha))
        if prev is None:
            start = nominal
        else:
            template = xp[prev + Hs: prev + Hs + L]
            region = xp[nominal - tol: nominal + tol + L]
            scores = correlate(region, template, mode="valid")
            start = nominal - tol + int(np.argmax(scores))
        out[m * Hs: m * Hs + L] += win * xp[start: start + L]
        norm[m * Hs: m * Hs + L] += win
        prev = start
    # edge frames lack full overlap; divide out the window sum there
    out = np.where(norm > 1e-3, out / np.maximum(norm, 1e-3), 0.0)
    return out[:target].astype(np.float32)


# -- scenarios ----------------------------------------------------------------------

def perturb_word_count(text: str, index: int, config: CorpusConfig, language_id: int, seed: int = 0) -> str:
    """Fresh text with 1.5x (even ``index``) or 0.5x (odd) the word count."""
    n = len(text.split())
    factor = 1.5 if index % 2 == 0 else 0.5
    n_new = max(1, int(math.floor(n * factor + 0.5)))
    rng = np.random.default_rng([seed, index])
    return random_text(rng, config, language_id, n_new)


def substitute_words(text: str, language_id: int, config: CorpusConfig) -> tuple[str, int]:
    """Deterministic word-for-word substitution into the other language, changing word lengths.

    A stand-in for translation: each word maps to a fixed word of length ``len(w) + 1``
    or ``len(w) - 1`` (never below one) from the other language's letters.
    """
    target = (language_id + 1) % config.n_langs
    letters = config.language_letters[target]
    words = []
    for w in text.split():
        h = hashlib.sha256(f"{language_id}:{w}".encode()).digest()
        n = max(1, len(w) + (1 if h[0] % 2 else -1))
        out = []
        for i in range(n):
            choices = [c for c in letters if not out or c != out[-1]]
            out.append(choices[h[1 + i % 31] % len(choices)])
        words.append("".join(out))
    return " ".join(words), target


def scenario_text(example, index: int, scenario: str, corpus: Corpus, seed: int = 0) -> tuple[str, int]:
    text, lang = example.text_seq.raw, example.text_seq.language_id
    if scenario == "same_text":
        return text, lang
    if scenario == "different_text":
        return perturb_word_count(text, index, corpus.config, lang, seed), lang
    if scenario == "cross_lingual_stub":
        return substitute_words(text, lang, corpus.config)
    raise InvalidInput(f"unknown scenario {scenario!r}")


# -- reports ---------------------------------------------------------------------------

@dataclass
class ExampleRow:
    index: int
    text: str
    recognized: str
    synth_s: float
    ref_s: float
    dr: float
    dd: float
    wer: float
    cer: float
    av_offset_frames: int
    stopped_naturally: bool


METRIC_COLUMNS = ("dr", "abs_dr_minus_1", "dd", "wer", "cer", "av_offset_frames")


@dataclass
class MetricsReport:
    scenario: str
    baseline: str
    rows: list[ExampleRow] = field(default_factory=list)

    def _values(self, name):
        if name == "abs_dr_minus_1":
            return [abs(r.dr - 1) for r in self.rows]
        if name == "av_offset_frames":
            return [abs(r.av_offset_frames) for r in self.rows]
        return [getattr(r, name) for r in self.rows]

    @property
    def aggregates(self) -> dict[str, dict[str, float]]:
        if not self.rows:
            return {}
        return {m: {"mean": float(np.mean(self._values(m))), "median": float(median(self._values(m)))}
                for m in METRIC_COLUMNS}

    @property
    def dr(self) -> float:
        return self.aggregates["dr"]["mean"]

    @property
    def dd(self) -> float:
        return self.aggregates["dd"]["mean"]

    @property
    def wer(self) -> float:
        return self.aggregates["wer"]["mean"]

    @property
    def cer(self) -> float:
        return self.aggregates["cer"]["mean"]

    @property
    def av_offset_frames(self) -> int:
        return int(round(self.aggregates["av_offset_frames"]["median"]))

    def median(self, metric: str) -> float:
        return self.aggregates[metric]["median"]

    def to_dict(self) -> dict:
        return {
            "report_version": REPORT_VERSION,
            "scenario": self.scenario,
            "baseline": self.baseline,
            "av_offset_note": "envelope cross-correlation lag in video frames; not a SyncNet LSE score",
            "dd_unit": "seconds",
            "count": len(self.rows),
            "aggregates": self.aggregates,
            "rows": [asdict(r) for r in self.rows],
        }

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        json_path = stem.with_suffix(".json")
        tsv_path = stem.with_suffix(".tsv")
        json_path.write_text(json.dumps(self.to_dict(), indent=2))
        cols = list(ExampleRow.__dataclass_fields__)
        with open(tsv_path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([getattr(r, c) for c in cols])
            for stat in ("mean", "median"):
                agg = self.aggregates
                w.writerow([stat] + [agg[c][stat] if c in agg else "" for c in cols[1:]])
        return json_path, tsv_path


def score_example(corpus: Corpus, example, index: int, text: str, tokens: Sequence[int], synth_s: float,
                  stopped_naturally: bool = True) -> ExampleRow:
    """Metrics for one synthesized utterance against its reference clip."""
    ref_s = example.lip_video.shape[0] / VIDEO_FPS
    recognized = corpus.recognize(tokens, example.speaker_id)
    a_env = audio_envelope(tokens, corpus.silence_token, corpus.config.rate_ratio)
    v_env = video_envelope(example.lip_video, corpus.neutral_viseme)
    max_lag = max(0, min(10, len(a_env) - 1, len(v_env) - 1))
    return ExampleRow(
        index=index,
        text=text,
        recognized=recognized,
        synth_s=synth_s,
        ref_s=ref_s,
        dr=duration_ratio(synth_s, ref_s),
        dd=duration_difference(synth_s, ref_s),
        wer=wer(text, recognized),
        cer=cer(text, recognized),
        av_offset_frames=av_offset(a_env, v_env, max_lag),
        stopped_naturally=stopped_naturally,
    )


def evaluate(model, dataset: Dataset, scenario: str = "same_text", baseline: str = "none",
             gcfg: Optional[GenerationConfig] = None, wsola_cfg: WsolaConfig = WsolaConfig(),
             seed: int = 0, limit: Optional[int] = None) -> MetricsReport:
    """Synthesize every example under ``scenario`` and score it.

    With ``baseline="wsola_stretch"`` the synthesized waveform is time-stretched to the
    reference clip length and re-tokenized before scoring.
    """
    if scenario not in SCENARIOS:
        raise InvalidInput(f"unknown scenario {scenario!r}")
    if baseline not in BASELINES:
        raise InvalidInput(f"unknown baseline {baseline!r}")
    corpus = dataset.corpus
    report = MetricsReport(scenario, baseline)
    examples = list(dataset)[:limit] if limit else list(dataset)
    for i, ex in enumerate(examples):
        text, lang = scenario_text(ex, i, scenario, corpus, seed)
        try:
            res = dub(model, corpus.tokenizer, corpus.codebook, text, lang, ex.speaker_ref_mel, ex.lip_video, gcfg)
        except EmptyAudio:
            # an immediate stop is scored as one silent token rather than dropped
            silent = AudioTokenSequence((corpus.silence_token, corpus.codebook.stop_id), corpus.codebook.stop_id)
            res = synthesize_waveform(silent, corpus.codebook)
        tokens = list(res.tokens.content)
        synth_s = res.duration_s
        if baseline == "wsola_stretch":
            ref_s = ex.lip_video.shape[0] / VIDEO_FPS
            wav = res.waveform
            min_len = wsola_cfg.frame_len + wsola_cfg.tolerance
            if len(wav) < min_len:
                wav = np.pad(wav, (0, min_len - len(wav)))
            rate = len(wav) / (ref_s * res.sample_rate)
            stretched = wsola(wav, WsolaConfig(wsola_cfg.frame_len, wsola_cfg.hop_synthesis, wsola_cfg.tolerance, rate))
            synth_s = len(stretched) / res.sample_rate
            mel = waveform_to_mel(stretched, corpus.config.d_mel)
            tokens = list(tokenize_audio(mel, corpus.codebook, append_stop=False).ids) if len(mel) else []
        report.rows.append(score_example(corpus, ex, i, text, tokens, synth_s, res.stopped_naturally))
    return report


def comparison_table(reports: dict[str, MetricsReport], path) -> Path:
    """One row per variant: median and mean of every metric column."""
    path = Path(path)
    cols = [f"{m}_{s}" for m in METRIC_COLUMNS for s in ("median", "mean")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["variant"] + cols)
        for name, rep in reports.items():
            agg = rep.aggregates
            w.writerow([name] + [agg[m][s] for m in METRIC_COLUMNS for s in ("median", "mean")])
    return path
