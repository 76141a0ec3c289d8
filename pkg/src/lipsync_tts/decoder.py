"""Decoder-only audio-token language model conditioned on a multimodal prompt.

The input sequence is ``[LANG, STYLE x n_style, (VIDEO x T_v), TEXT x T_text, BOS, a_0, ...]``.
Row ``i`` of the audio logits is read at the audio-stream position holding ``BOS``
(``i = 0``) or ``a_{i-1}`` and scores token ``a_i``. Prompt and audio stream carry
separate position counters, so audio position ``i`` always has the same encoding
regardless of prompt length; the cross-attention blocks rely on that to line audio
positions up with rows of the expanded video memory.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfig, InvalidState, MissingModality, SequenceTooLong
from .tokens import AudioTokenSequence, TextSequence
from .videopath import (
    ExpandedVideoMemory,
    ExpansionNet,
    LipEncoder,
    LipFeatureSequence,
    SpeakerEncoder,
    StyleEmbedding,
    StyleFusion,
)

MODES = ("none", "concat", "cross_attention")
LANG, STYLE, VIDEO, TEXT = "LANG", "STYLE", "VIDEO", "TEXT"


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    cross_attn_every: int = 1
    integration_mode: str = "none"
    text_vocab_size: int = 17
    audio_vocab_size: int = 65
    max_seq_len: int = 512
    n_style: int = 4
    seed: int = 0
    n_langs: int = 2
    d_mel: int = 16
    d_video_raw: int = 7
    d_video: int = 32
    d_speaker: int = 64
    rate_ratio: int = 2
    use_style_video: bool = True
    ff_mult: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.integration_mode not in MODES:
            raise InvalidConfig(f"integration_mode must be one of {MODES}, got {self.integration_mode!r}")
        if self.d_model % self.n_heads:
            raise InvalidConfig("d_model must be divisible by n_heads")
        if self.cross_attn_every < 1:
            raise InvalidConfig("cross_attn_every must be >= 1")
        if self.d_model % 2:
            raise InvalidConfig("d_model must be even for sinusoidal positions")
        if self.audio_vocab_size < 2:
            raise InvalidConfig("audio vocabulary needs at least one code plus stop")

    @property
    def stop_id(self) -> int:
        return self.audio_vocab_size - 1

    @property
    def bos_id(self) -> int:
        return self.audio_vocab_size

    def to_dict(self) -> dict:
        return asdict(self)

    def with_mode(self, mode: str, **kw) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), "integration_mode": mode, **kw})


def sinusoid_table(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe.to(dtype)


@dataclass
class Prompt:
    embeddings: torch.Tensor  # (T_p, D_model)
    segment_labels: list[str]
    text_ids: torch.Tensor  # (T_text,) for the text loss

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def text_start(self) -> int:
        return self.segment_labels.index(TEXT)


@dataclass
class Logits:
    scores: torch.Tensor  # (L, audio_vocab_size)

    def __len__(self):
        return self.scores.shape[0]


# -- layers ----------------------------------------------------------------

class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def _split(self, x):
        B, T, D = x.shape
        return x.view(B, T, self.n_heads, D // self.n_heads).transpose(1, 2)

    def forward(self, x, mask, cache: Optional[dict] = None):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        if cache is not None:
            if "k" in cache:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        B, H, T, dh = y.shape
        return self.out(y.transpose(1, 2).reshape(B, T, H * dh))


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ff_mult: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(nn.Linear(d_model, ff_mult * d_model), nn.GELU(), nn.Linear(ff_mult * d_model, d_model))

    def forward(self, x, mask, cache=None):
        x = x + self.attn(self.ln1(x), mask, cache)
        return x + self.mlp(self.ln2(x))


class CrossAttentionBlock(nn.Module):
    """Audio positions attend over the whole expanded video memory.

    Queries get the audio-position encoding and keys the memory-row encoding, so a
    position can find "its" memory row. On top of that each head subtracts
    ``slope_h * |i - j|`` from its scores (learned slopes, ALiBi-style), so attention starts
    out aligned with the token-rate memory; positions past the end fall onto the end
    marker, the nearest valid row. Both output projections start at zero: a freshly
    inserted block is an exact identity on the residual stream.
    """

    def __init__(self, d_model: int, n_heads: int, ff_mult: int = 4):
        super().__init__()
        self.n_heads = n_heads
        self.ln_q = nn.LayerNorm(d_model)
        self.ln_kv = nn.LayerNorm(d_model)
        self.q = nn.Linear(d_model, d_model)
        self.kv = nn.Linear(d_model, 2 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.ln_ff = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_mult * d_model), nn.GELU(), nn.Linear(ff_mult * d_model, d_model))
        self.align_slope = nn.Parameter(2.0 ** -torch.arange(n_heads, dtype=torch.float32))
        for lin in (self.out, self.ff[2]):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def _split(self, x):
        B, T, D = x.shape
        return x.view(B, T, self.n_heads, D // self.n_heads).transpose(1, 2)

    def memory_kv(self, memory, memory_pe):
        k, v = self.kv(self.ln_kv(memory) + memory_pe).chunk(2, dim=-1)
        return self._split(k), self._split(v)

    def forward(self, x, query_pe, kv, memory_mask, row_mask, query_pos):
        """``row_mask`` (B, T, 1) selects the audio-stream rows that receive the update;
        ``query_pos`` (B, T) holds each row's audio position."""
        k, v = kv
        q = self._split(self.q(self.ln_q(x) + query_pe))
        mem_pos = torch.arange(k.shape[2], device=x.device)
        dist = (query_pos.unsqueeze(-1) - mem_pos).abs().to(x.dtype)  # (B, T, M)
        bias = -self.align_slope.view(1, -1, 1, 1) * dist.unsqueeze(1)
        bias = bias.masked_fill(~memory_mask[:, None, None, :], float("-inf"))
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=bias)
        B, H, T, dh = y.shape
        h = x + self.out(y.transpose(1, 2).reshape(B, T, H * dh)) * row_mask
        return h + self.ff(self.ln_ff(h)) * row_mask


class DubModel(nn.Module):
    """All trainable components: prompt encoders, video path and the decoder stack."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        D = cfg.d_model
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.text_emb = nn.Embedding(cfg.text_vocab_size, D)
            self.lang_emb = nn.Embedding(cfg.n_langs, D)
            self.audio_emb = nn.Embedding(cfg.audio_vocab_size + 1, D)  # + BOS
            self.speaker_encoder = SpeakerEncoder(cfg.d_mel, cfg.d_speaker)
            self.style = StyleFusion(cfg.d_speaker, cfg.d_video, D, cfg.n_style)
            self.lip_encoder = LipEncoder(cfg.d_video_raw, cfg.d_video)
            self.expansion = ExpansionNet(cfg.d_video, D, cfg.rate_ratio)
            self.video_prompt_proj = nn.Linear(cfg.d_video, D)
            self.blocks = nn.ModuleList(Block(D, cfg.n_heads, cfg.ff_mult) for _ in range(cfg.n_layers))
            self.cross_blocks = nn.ModuleDict({
                str(i): CrossAttentionBlock(D, cfg.n_heads, cfg.ff_mult)
                for i in range(cfg.n_layers) if (i + 1) % cfg.cross_attn_every == 0
            })
            self.ln_f = nn.LayerNorm(D)
            self.audio_head = nn.Linear(D, cfg.audio_vocab_size)
            self.text_head = nn.Linear(D, cfg.text_vocab_size)
        self.register_buffer("pe", sinusoid_table(cfg.max_seq_len + 1, D), persistent=False)

    @property
    def mode(self) -> str:
        return self.cfg.integration_mode

    @property
    def dtype(self):
        return self.audio_head.weight.dtype

    def _apply(self, fn, *args, **kwargs):
        # keep the positional table in the parameter dtype after .double()
        out = super()._apply(fn, *args, **kwargs)
        self.pe = sinusoid_table(self.cfg.max_seq_len + 1, self.cfg.d_model, self.audio_head.weight.dtype).to(
            self.audio_head.weight.device)
        return out

    # -- conditioning ---------------------------------------------------------

    def uses_style_video(self) -> bool:
        return self.mode != "none" and self.cfg.use_style_video

    def condition(self, ref_mel, ref_lens, lip, lip_lens):
        """Batched speaker/style/lip encoding.

        Returns style latents (B, n_style, D), lip features (B, T_v, D_v) or None,
        and the expanded memory with its mask, or (None, None).
        """
        spk = self.speaker_encoder(ref_mel, ref_lens)
        feats = None
        if lip is not None and self.mode != "none":
            feats = self.lip_encoder(lip, lip_lens)
        gv = None
        if self.uses_style_video() and feats is not None:
            gv = feats.sum(dim=1) / lip_lens.unsqueeze(-1).to(feats.dtype)
        style = self.style(spk, gv)
        memory = mem_mask = None
        if self.mode == "cross_attention":
            if feats is None:
                raise MissingModality("cross_attention mode needs lip video")
            memory, mem_mask = self.expansion(feats, lip_lens)
        return style, feats, memory, mem_mask

    # -- decoder core ---------------------------------------------------------

    def _embed(self, prompts: Sequence[Prompt], audio_in: Sequence[torch.Tensor]):
        rows, starts = [], []
        for p, a in zip(prompts, audio_in):
            tp, la = len(p), a.shape[0]
            if tp + la > self.cfg.max_seq_len:
                raise SequenceTooLong(f"prompt {tp} + audio {la} exceeds max_seq_len {self.cfg.max_seq_len}")
            rows.append(torch.cat([p.embeddings + self.pe[:tp], self.audio_emb(a) + self.pe[:la]]))
            starts.append(tp)
        x = nn.utils.rnn.pad_sequence(rows, batch_first=True)
        return x, starts

    def run(self, prompts: Sequence[Prompt], audio_in: Sequence[torch.Tensor],
            memory: Optional[torch.Tensor] = None, memory_mask: Optional[torch.Tensor] = None):
        """Full-sequence pass; returns final hidden states (B, T, D) and audio start offsets."""
        if self.mode == "cross_attention" and memory is None:
            raise MissingModality("cross_attention mode needs video memory")
        x, starts = self._embed(prompts, audio_in)
        B, T, _ = x.shape
        causal = torch.ones(T, T, dtype=torch.bool, device=x.device).tril()

        query_pe = row_mask = None
        if self.mode == "cross_attention":
            idx = torch.zeros(B, T, dtype=torch.long)
            row_mask = torch.zeros(B, T, 1, dtype=x.dtype)
            for b, (s, a) in enumerate(zip(starts, audio_in)):
                idx[b, s:s + a.shape[0]] = torch.arange(a.shape[0])
                row_mask[b, s:s + a.shape[0]] = 1.0
            query_pe = self.pe[idx]
            mem_pe = self.pe[: memory.shape[1]].unsqueeze(0)

        for i, block in enumerate(self.blocks):
            x = block(x, causal)
            if self.mode == "cross_attention" and str(i) in self.cross_blocks:
                cb = self.cross_blocks[str(i)]
                x = cb(x, query_pe, cb.memory_kv(memory, mem_pe), memory_mask, row_mask, idx)
        return self.ln_f(x), starts

    def forward_batch(self, batch: "Batch"):
        """Teacher-forced audio logits (B, L, V) and text logits (B, T_text - 1, V_text), zero-padded."""
        style, feats, memory, mem_mask = self.condition(batch.ref_mel, batch.ref_lens, batch.lip, batch.lip_lens)
        prompts = []
        for b in range(batch.size):
            text = batch.text_ids[b, : batch.text_lens[b]]
            f = feats[b, : batch.lip_lens[b]] if feats is not None else None
            prompts.append(_assemble(self, batch.lang[b], style[b], text, f))
        audio_in = [batch.audio_in[b, : batch.audio_lens[b]] for b in range(batch.size)]
        h, starts = self.run(prompts, audio_in, memory, mem_mask)

        L = batch.audio_in.shape[1]
        Tt = batch.text_ids.shape[1] - 1
        a_rows = torch.zeros(batch.size, L, dtype=torch.long)
        t_rows = torch.zeros(batch.size, max(Tt, 0), dtype=torch.long)
        for b, (p, s) in enumerate(zip(prompts, starts)):
            la = int(batch.audio_lens[b])
            a_rows[b, :la] = torch.arange(s, s + la)
            n_t = int(batch.text_lens[b]) - 1
            t_rows[b, :n_t] = torch.arange(p.text_start, p.text_start + n_t)
        bidx = torch.arange(batch.size).unsqueeze(1)
        audio_logits = self.audio_head(h[bidx, a_rows])
        text_logits = self.text_head(h[bidx, t_rows])
        return audio_logits, text_logits


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    lang: torch.Tensor
    text_ids: torch.Tensor
    text_lens: torch.Tensor
    ref_mel: torch.Tensor
    ref_lens: torch.Tensor
    lip: torch.Tensor
    lip_lens: torch.Tensor
    audio_in: torch.Tensor  # BOS-shifted inputs
    audio_targets: torch.Tensor  # padded with -1
    audio_lens: torch.Tensor
    text_targets: torch.Tensor  # padded with -1

    @property
    def size(self) -> int:
        return self.lang.shape[0]


def collate(examples, cfg: ModelConfig, dtype=torch.float32) -> Batch:
    def pad_int(seqs, value):
        return nn.utils.rnn.pad_sequence([torch.as_tensor(s, dtype=torch.long) for s in seqs],
                                         batch_first=True, padding_value=value)

    def pad_float(mats):
        return nn.utils.rnn.pad_sequence([torch.as_tensor(np.asarray(m), dtype=dtype) for m in mats], batch_first=True)

    targets = [list(ex.audio_tokens.ids) for ex in examples]
    inputs = [[cfg.bos_id] + t[:-1] for t in targets]
    texts = [list(ex.text_seq.ids) for ex in examples]
    return Batch(
        lang=torch.tensor([ex.text_seq.language_id for ex in examples]),
        text_ids=pad_int(texts, 0),
        text_lens=torch.tensor([len(t) for t in texts]),
        ref_mel=pad_float([ex.speaker_ref_mel for ex in examples]),
        ref_lens=torch.tensor([ex.speaker_ref_mel.shape[0] for ex in examples]),
        lip=pad_float([ex.lip_video for ex in examples]),
        lip_lens=torch.tensor([ex.lip_video.shape[0] for ex in examples]),
        audio_in=pad_int(inputs, 0),
        audio_targets=pad_int(targets, -1),
        audio_lens=torch.tensor([len(t) for t in targets]),
        text_targets=pad_int([t[1:] for t in texts], -1),
    )


# -- single-example API ----------------------------------------------------------

def _assemble(model: DubModel, lang_id, style_latents, text_ids, f: Optional[torch.Tensor]) -> Prompt:
    lang_id = torch.as_tensor(lang_id, dtype=torch.long).reshape(1)
    parts = [model.lang_emb(lang_id), style_latents]
    labels = [LANG] + [STYLE] * style_latents.shape[0]
    if model.mode == "concat":
        if f is None:
            raise MissingModality("concat mode needs lip features in the prompt")
        parts.append(model.video_prompt_proj(f))
        labels += [VIDEO] * f.shape[0]
    text_ids = torch.as_tensor(text_ids, dtype=torch.long)
    parts.append(model.text_emb(text_ids))
    labels += [TEXT] * text_ids.shape[0]
    return Prompt(torch.cat(parts), labels, text_ids)


def assemble_prompt(model: DubModel, lang_id: int, style: StyleEmbedding, text: TextSequence,
                    f: Optional[LipFeatureSequence] = None) -> Prompt:
    """Ordered [language, style latents, (lip features in concat mode), text] prompt."""
    return _assemble(model, lang_id, style.latents, list(text.ids), None if f is None else f.features)


def _check_memory(model: DubModel, memory: Optional[ExpandedVideoMemory]):
    if model.mode == "cross_attention" and memory is None:
        raise MissingModality("cross_attention mode needs video memory")


def _audio_ids(audio) -> list[int]:
    return list(audio.ids) if isinstance(audio, AudioTokenSequence) else [int(i) for i in audio]


def forward_teacher_forced(model: DubModel, prompt: Prompt, audio_in, memory: Optional[ExpandedVideoMemory] = None) -> Logits:
    """One logits row per audio token, row ``i`` scoring token ``i`` given tokens ``< i``."""
    _check_memory(model, memory)
    ids = _audio_ids(audio_in)
    stream = torch.tensor([model.cfg.bos_id] + ids[:-1], dtype=torch.long)
    mem = mask = None
    if model.mode == "cross_attention":
        mem = memory.memory.unsqueeze(0)
        mask = torch.ones(1, mem.shape[1], dtype=torch.bool)
    h, starts = model.run([prompt], [stream], mem, mask)
    s = starts[0]
    return Logits(model.audio_head(h[0, s:s + len(ids)]))


def log_prob_sequence(model: DubModel, prompt: Prompt, audio, memory: Optional[ExpandedVideoMemory] = None) -> torch.Tensor:
    ids = _audio_ids(audio)
    logits = forward_teacher_forced(model, prompt, ids, memory).scores
    lp = logits.log_softmax(dim=-1)
    return lp[torch.arange(len(ids)), torch.tensor(ids)].sum()


@dataclass
class DecodeState:
    """KV cache for one generation stream; never share between streams."""

    mode: str
    n_layers: int
    prompt_len: int
    n_audio: int = 0  # audio-stream positions consumed, BOS included
    layers: list = field(default_factory=list)
    memory_kv: dict = field(default_factory=dict)
    memory_mask: Optional[torch.Tensor] = None

    def __len__(self):
        return self.prompt_len + self.n_audio


def step(model: DubModel, prompt: Prompt, state: Optional[DecodeState] = None, next_token: Optional[int] = None,
         memory: Optional[ExpandedVideoMemory] = None):
    """Incremental decoding.

    With ``state=None`` the prompt and BOS are consumed and the distribution of audio
    token 0 is returned. Each later call feeds ``next_token`` and returns the
    distribution of the following token. Returns ``(probs, new_state)``.
    """
    cfg = model.cfg
    if state is None:
        _check_memory(model, memory)
        state = DecodeState(model.mode, cfg.n_layers, len(prompt), layers=[{} for _ in range(cfg.n_layers)])
        if model.mode == "cross_attention":
            mem = memory.memory.unsqueeze(0)
            mem_pe = model.pe[: mem.shape[1]].unsqueeze(0)
            state.memory_kv = {k: blk.memory_kv(mem, mem_pe) for k, blk in model.cross_blocks.items()}
            state.memory_mask = torch.ones(1, mem.shape[1], dtype=torch.bool)
        tp = len(prompt)
        x = torch.cat([prompt.embeddings + model.pe[:tp],
                       model.audio_emb(torch.tensor([cfg.bos_id])) + model.pe[:1]]).unsqueeze(0)
        T_past = 0
    else:
        if state.mode != model.mode or state.n_layers != cfg.n_layers or len(state.layers) != cfg.n_layers:
            raise InvalidState("decode state does not match this model configuration")
        if state.prompt_len != len(prompt):
            raise InvalidState("decode state was built for a different prompt")
        if next_token is None or not 0 <= int(next_token) < cfg.stop_id:
            raise InvalidState(f"next_token must be a non-stop audio id, got {next_token}")
        if len(state) + 1 > cfg.max_seq_len:
            raise SequenceTooLong("decode state is full")
        pos = state.n_audio
        x = (model.audio_emb(torch.tensor([int(next_token)])) + model.pe[pos:pos + 1]).unsqueeze(0)
        T_past = len(state)

    T_new = x.shape[1]
    mask = torch.ones(T_new, T_past + T_new, dtype=torch.bool).tril(diagonal=T_past)
    # only the last new row belongs to the audio stream
    row_mask = torch.zeros(1, T_new, 1, dtype=x.dtype)
    row_mask[0, -1] = 1.0
    query_idx = torch.zeros(T_new, dtype=torch.long)
    query_idx[-1] = state.n_audio
    query_pe = model.pe[query_idx].unsqueeze(0)
    query_idx = query_idx.unsqueeze(0)

    for i, block in enumerate(model.blocks):
        x = block(x, mask, state.layers[i])
        if model.mode == "cross_attention" and str(i) in model.cross_blocks:
            x = model.cross_blocks[str(i)](x, query_pe, state.memory_kv[str(i)], state.memory_mask, row_mask, query_idx)
    state.n_audio += 1
    logits = model.audio_head(model.ln_f(x[0, -1]))
    return logits.softmax(dim=-1), state
