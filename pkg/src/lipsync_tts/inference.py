"""Autoregressive generation, a sinusoid-bank vocoder stub and the end-to-end dubbing call."""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .decoder import DubModel, Prompt, assemble_prompt, step
from .errors import EmptyAudio, InvalidConfig, MalformedSequence
from .tokens import AudioCodebook, AudioTokenSequence, CharTokenizer, detokenize_audio
from .videopath import (
    ExpandedVideoMemory,
    embed_speaker,
    encode_lips,
    expand_features,
    fuse_style,
)

SAMPLE_RATE = 16000
TOKEN_RATE_HZ = 50.0
HOP = int(SAMPLE_RATE / TOKEN_RATE_HZ)
VIDEO_FPS = 25.0


@dataclass
class GenerationConfig:
    max_tokens: int = 256
    strategy: str = "greedy"
    k: int = 8
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_tokens < 1:
            raise InvalidConfig("max_tokens must be >= 1")
        if self.strategy not in ("greedy", "top_k"):
            raise InvalidConfig(f"unknown strategy {self.strategy!r}")
        if self.k < 1:
            raise InvalidConfig("k must be >= 1")
        if not self.temperature > 0:
            raise InvalidConfig("temperature must be > 0")


@dataclass
class SynthesisResult:
    tokens: AudioTokenSequence
    mel: np.ndarray
    waveform: np.ndarray
    stopped_naturally: bool
    duration_s: float
    sample_rate: int = SAMPLE_RATE
    reference_duration_s: Optional[float] = None

    def sidecar(self) -> dict:
        return {
            "tokens": list(self.tokens.ids),
            "duration_s": self.duration_s,
            "stopped_naturally": self.stopped_naturally,
            "reference_duration_s": self.reference_duration_s,
            "sample_rate": self.sample_rate,
        }


@torch.no_grad()
def generate(model: DubModel, prompt: Prompt, memory: Optional[ExpandedVideoMemory] = None,
             gcfg: Optional[GenerationConfig] = None) -> AudioTokenSequence:
    """Decode until the stop token or ``max_tokens``; the stop token, if emitted, is the last id."""
    gcfg = gcfg or GenerationConfig()
    stop = model.cfg.stop_id
    cap = min(gcfg.max_tokens, model.cfg.max_seq_len - len(prompt))
    if cap < 1:
        raise InvalidConfig("prompt leaves no room for audio tokens")
    gen = torch.Generator().manual_seed(gcfg.seed)
    ids: list[int] = []
    probs, state = step(model, prompt, None, None, memory)
    while True:
        if gcfg.strategy == "greedy":
            tok = int(torch.argmax(probs))
        else:
            logits = probs.clamp_min(1e-30).log() / gcfg.temperature
            top = torch.topk(logits, min(gcfg.k, logits.shape[0]))
            choice = torch.multinomial(top.values.softmax(dim=-1), 1, generator=gen)
            tok = int(top.indices[choice])
        ids.append(tok)
        if tok == stop or len(ids) >= cap:
            break
        probs, state = step(model, prompt, state, tok, memory)
    return AudioTokenSequence(tuple(ids), stop_id=stop, token_rate_hz=TOKEN_RATE_HZ)


# -- vocoder stub -------------------------------------------------------------------

def bank_bins(d_mel: int) -> np.ndarray:
    """DFT bins (of a HOP-sample frame) carrying each mel channel: 100 Hz, 250 Hz, ..."""
    return 2 + 3 * np.arange(d_mel)


def mel_to_waveform(mel: np.ndarray, sample_rate: int = SAMPLE_RATE, hop: int = HOP) -> np.ndarray:
    """Each mel row sets the amplitudes ``exp(mel) / D`` of a fixed sinusoid bank for ``hop`` samples.

    Bank frequencies are whole multiples of ``sample_rate / hop``, so every frame holds
    whole periods and the phase stays continuous across frames.
    """
    mel = np.asarray(mel, dtype=np.float64)
    T, D = mel.shape
    freqs = bank_bins(D) * sample_rate / hop
    n = np.arange(T * hop)
    carriers = np.sin(2 * np.pi * freqs[:, None] * n[None, :] / sample_rate)  # (D, N)
    amps = np.repeat(np.exp(mel) / D, hop, axis=0)  # (N, D)
    return (amps * carriers.T).sum(axis=1).astype(np.float32)


def waveform_to_mel(waveform: np.ndarray, d_mel: int, hop: int = HOP, floor: float = 1e-6) -> np.ndarray:
    """Inverse of :func:`mel_to_waveform` on whole frames: read bank amplitudes off a per-frame DFT."""
    x = np.asarray(waveform, dtype=np.float64)
    T = len(x) // hop
    frames = x[: T * hop].reshape(T, hop)
    spec = np.fft.rfft(frames, axis=1)
    amps = 2.0 * np.abs(spec[:, bank_bins(d_mel)]) / hop
    return np.log(np.maximum(amps * d_mel, floor)).astype(np.float32)


def synthesize_waveform(tokens: AudioTokenSequence, cb: AudioCodebook, stopped_naturally: Optional[bool] = None,
                        sample_rate: int = SAMPLE_RATE) -> SynthesisResult:
    if not isinstance(tokens, AudioTokenSequence):
        try:
            tokens = AudioTokenSequence(tuple(tokens), stop_id=cb.stop_id)
        except MalformedSequence:
            raise
    mel = detokenize_audio(tokens, cb)
    if mel.shape[0] == 0:
        raise EmptyAudio("no audio tokens before the stop token")
    hop = int(sample_rate / tokens.token_rate_hz)
    wav = mel_to_waveform(mel, sample_rate, hop)
    return SynthesisResult(
        tokens=tokens,
        mel=mel,
        waveform=wav,
        stopped_naturally=tokens.has_stop if stopped_naturally is None else stopped_naturally,
        duration_s=len(tokens.content) / tokens.token_rate_hz,
        sample_rate=sample_rate,
    )


# -- end to end -------------------------------------------------------------------

@torch.no_grad()
def build_conditioning(model: DubModel, tokenizer: CharTokenizer, text: str, lang_id: int, ref_mel,
                       lip_video=None):
    """Prompt and (in cross-attention mode) expanded video memory for one utterance."""
    text_seq = tokenizer.encode(text, lang_id)
    spk = embed_speaker(model.speaker_encoder, ref_mel)
    feats = None
    if model.mode != "none" and lip_video is not None:
        feats = encode_lips(model.lip_encoder, lip_video)
    gv = feats.global_features() if (feats is not None and model.uses_style_video()) else None
    style = fuse_style(model.style, spk, gv)
    memory = expand_features(model.expansion, feats) if model.mode == "cross_attention" and feats is not None else None
    prompt = assemble_prompt(model, lang_id, style, text_seq, feats if model.mode == "concat" else None)
    return prompt, memory


def dub(model: DubModel, tokenizer: CharTokenizer, cb: AudioCodebook, text: str, lang_id: int, ref_mel,
        lip_video=None, gcfg: Optional[GenerationConfig] = None) -> SynthesisResult:
    """Text + reference voice + lip video -> speech tokens -> waveform."""
    model.eval()
    prompt, memory = build_conditioning(model, tokenizer, text, lang_id, ref_mel, lip_video)
    tokens = generate(model, prompt, memory, gcfg)
    if len(tokens.content) == 0:
        raise EmptyAudio("model stopped before emitting any audio")
    result = synthesize_waveform(tokens, cb)
    if lip_video is not None:
        result.reference_duration_s = np.asarray(lip_video).shape[0] / VIDEO_FPS
    return result


def write_wav(path, waveform: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """16-bit PCM mono; peak-normalised only if the signal would clip."""
    x = np.asarray(waveform, dtype=np.float64)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 1.0:
        x = x / peak
    pcm = np.round(x * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def write_synthesis(result: SynthesisResult, wav_path) -> Path:
    wav_path = Path(wav_path)
    write_wav(wav_path, result.waveform, result.sample_rate)
    sidecar = wav_path.with_suffix(".json")
    sidecar.write_text(json.dumps(result.sidecar(), indent=2))
    return sidecar
