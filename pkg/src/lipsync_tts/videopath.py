"""Video side of the model: lip encoder, temporal expansion, speaker and style fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyInput


@dataclass
class LipFeatureSequence:
    features: torch.Tensor  # (T_v, D_v)
    fps: float = 25.0

    def __len__(self):
        return self.features.shape[0]

    def global_features(self) -> torch.Tensor:
        """Temporal mean, used as the clip-level scene summary."""
        return self.features.mean(dim=0)


@dataclass
class ExpandedVideoMemory:
    memory: torch.Tensor  # (T_m, D_model), last row is the end marker

    @property
    def end_marker_index(self) -> int:
        return self.memory.shape[0] - 1

    def __len__(self):
        return self.memory.shape[0]


@dataclass
class SpeakerEmbedding:
    vector: torch.Tensor  # (D_spk,)


@dataclass
class StyleEmbedding:
    latents: torch.Tensor  # (n_style, D_model)
    attention: Optional[torch.Tensor] = None  # (n_style, n_inputs)


def _length_mask(lengths: torch.Tensor, t_max: int) -> torch.Tensor:
    return torch.arange(t_max, device=lengths.device)[None, :] < lengths[:, None]


class LipEncoder(nn.Module):
    """Stride-1 temporal convolution stack with "same" padding."""

    def __init__(self, d_raw: int, d_v: int, n_layers: int = 2, kernel_size: int = 3, bias: bool = True):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd for same-length output")
        dims = [d_raw] + [d_v] * n_layers
        self.convs = nn.ModuleList(
            nn.Conv1d(a, b, kernel_size, padding=kernel_size // 2, bias=bias) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, x: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, T, D_raw) -> (B, T, D_v); frames past ``lengths`` are zeroed between layers."""
        mask = None if lengths is None else _length_mask(lengths, x.shape[1]).unsqueeze(1).to(x.dtype)
        h = x.transpose(1, 2)
        for i, conv in enumerate(self.convs):
            if mask is not None:
                h = h * mask
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.gelu(h)
        if mask is not None:
            h = h * mask
        return h.transpose(1, 2)


class ExpansionNet(nn.Module):
    """Convolution then stride-``ratio`` transposed convolution, projected to the model width.

    The output of a clip with ``T`` frames has exactly ``T * ratio`` rows, followed by
    a learned end-marker row.
    """

    def __init__(self, d_v: int, d_model: int, ratio: int = 2):
        super().__init__()
        self.ratio = ratio
        if ratio % 2 == 0:
            kernel, padding = 2 * ratio, ratio // 2
        else:
            kernel, padding = ratio, 0
        self.conv = nn.Conv1d(d_v, d_v, 3, padding=1)
        self.tconv = nn.ConvTranspose1d(d_v, d_v, kernel, stride=ratio, padding=padding)
        self.proj = nn.Linear(d_v, d_model)
        self.end_marker = nn.Parameter(torch.randn(d_model) * 0.02)

    def upsample_len(self, t_v: int) -> int:
        return t_v * self.ratio

    def forward(self, feats: torch.Tensor, lengths: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T_v, D_v) -> memory (B, T_m, D_model) and a validity mask (B, T_m).

        Example ``b`` occupies rows ``[0, ratio * lengths[b]]``, the last being the end marker.
        """
        B, T, _ = feats.shape
        in_mask = _length_mask(lengths, T).unsqueeze(1).to(feats.dtype)
        h = feats.transpose(1, 2) * in_mask
        h = F.gelu(self.conv(h)) * in_mask
        h = self.tconv(h)  # (B, D_v, T * ratio)
        h = self.proj(h.transpose(1, 2))

        out_len = lengths * self.ratio
        t_m = T * self.ratio + 1
        memory = torch.cat([h, h.new_zeros(B, 1, h.shape[-1])], dim=1)
        valid = _length_mask(out_len, t_m)
        memory = memory * valid.unsqueeze(-1).to(memory.dtype)
        # place the end marker right after each example's expanded rows
        end_pos = F.one_hot(out_len, t_m).to(memory.dtype).unsqueeze(-1)
        memory = memory + end_pos * self.end_marker
        return memory, valid | end_pos.squeeze(-1).bool()


class SpeakerEncoder(nn.Module):
    """Mean over frames of a learned per-frame projection."""

    def __init__(self, d_mel: int, d_spk: int):
        super().__init__()
        self.proj = nn.Linear(d_mel, d_spk)

    def forward(self, mel: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = torch.tanh(self.proj(mel))
        if lengths is None:
            return h.mean(dim=1)
        mask = _length_mask(lengths, mel.shape[1]).unsqueeze(-1).to(h.dtype)
        return (h * mask).sum(dim=1) / lengths.unsqueeze(-1).to(h.dtype)


class StyleFusion(nn.Module):
    """Perceiver-style resampler: ``n_style`` learned queries attend over speaker and video tokens.

    The video token is the speaker token shifted by a projection of the global video
    features. That projection starts at zero, so the two inputs coincide and the
    fusion reduces exactly to speaker-only attention until it is trained.
    """

    def __init__(self, d_spk: int, d_v: int, d_model: int, n_style: int = 4):
        super().__init__()
        self.n_style = n_style
        self.d_model = d_model
        self.spk_proj = nn.Linear(d_spk, d_model)
        self.video_proj = nn.Linear(d_v, d_model, bias=False)
        nn.init.zeros_(self.video_proj.weight)
        self.latents = nn.Parameter(torch.randn(n_style, d_model) * 0.02)
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, spk: torch.Tensor, global_video: Optional[torch.Tensor] = None,
                return_attention: bool = False):
        """(B, D_spk), (B, D_v) or None -> (B, n_style, D_model)."""
        s = self.spk_proj(spk).unsqueeze(1)
        inputs = s if global_video is None else torch.cat([s, s + self.video_proj(global_video).unsqueeze(1)], dim=1)
        q = self.q(self.latents).unsqueeze(0)
        scores = q @ self.k(inputs).transpose(1, 2) / math.sqrt(self.d_model)
        attn = scores.softmax(dim=-1)  # (B, n_style, n_inputs)
        v_s = self.v(s)
        if global_video is None:
            mixed = attn @ v_s
        else:
            # attn[0] v_s + attn[1] v_g written as v_s + attn[1] (v_g - v_s): equal since the
            # weights sum to one, and bit-exact speaker-only output while the projection is zero.
            # Each token is projected on its own so both paths hit identical kernels.
            v_g = self.v(inputs[:, 1:])
            mixed = v_s + attn[..., 1:] * (v_g - v_s)
        out = self.latents.unsqueeze(0) + self.out(mixed)
        return (out, attn) if return_attention else out


# -- single-example wrappers -------------------------------------------------

def encode_lips(encoder: LipEncoder, lip_video, fps: float = 25.0) -> LipFeatureSequence:
    x = torch.as_tensor(lip_video, dtype=next(encoder.parameters()).dtype)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInput("lip video must have at least one frame")
    return LipFeatureSequence(encoder(x.unsqueeze(0))[0], fps)


def expand_features(net: ExpansionNet, f: LipFeatureSequence) -> ExpandedVideoMemory:
    t = len(f)
    memory, _ = net(f.features.unsqueeze(0), torch.tensor([t]))
    return ExpandedVideoMemory(memory[0])


def embed_speaker(encoder: SpeakerEncoder, ref_mel) -> SpeakerEmbedding:
    x = torch.as_tensor(ref_mel, dtype=encoder.proj.weight.dtype)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInput("reference mel must have at least one frame")
    return SpeakerEmbedding(encoder(x.unsqueeze(0))[0])


def fuse_style(fusion: StyleFusion, spk: SpeakerEmbedding, global_video: Optional[torch.Tensor] = None) -> StyleEmbedding:
    gv = None if global_video is None else global_video.unsqueeze(0)
    out, attn = fusion(spk.vector.unsqueeze(0), gv, return_attention=True)
    return StyleEmbedding(out[0], attn[0])
