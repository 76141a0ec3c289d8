"""Composite loss, parameter freezing, the training loop and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Corpus
from .decoder import DubModel, ModelConfig, collate
from .errors import (
    ConfigMismatch,
    CorruptCheckpoint,
    DivergenceError,
    InsufficientData,
    InvalidConfig,
    InvalidDistribution,
    ShapeError,
    UnsupportedFormat,
)
from .tokens import AudioTokenSequence

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LSCK"
CHECKPOINT_VERSION = 1
VARIANTS = ("hard", "soft")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01
    beta: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvalidConfig(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    ce_audio: torch.Tensor
    ce_text: torch.Tensor
    duration: torch.Tensor
    total: torch.Tensor
    alpha: float
    beta: float

    def as_row(self) -> dict:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("ce_audio", "ce_text", "duration", "total")}


def combine(ce_audio, ce_text, duration, w: LossWeights) -> torch.Tensor:
    """``ce_audio + alpha * ce_text + beta * duration`` in the tensors' own precision."""
    ce_audio, ce_text, duration = (torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x
                                   for x in (ce_audio, ce_text, duration))
    a = torch.tensor(w.alpha, dtype=ce_audio.dtype)
    b = torch.tensor(w.beta, dtype=ce_audio.dtype)
    return ce_audio + a * ce_text + b * duration


# -- duration terms --------------------------------------------------------------

def _stop_index(seq, stop_id: Optional[int] = None) -> int:
    if isinstance(seq, AudioTokenSequence):
        ids, stop_id = seq.ids, seq.stop_id
    else:
        ids = list(seq)
    for i, t in enumerate(ids):
        if t == stop_id:
            return i
    return len(ids)


def duration_loss_hard(pred_tokens, gt_tokens, stop_id: Optional[int] = None) -> int:
    """Absolute difference of first stop indices; a missing stop counts as the sequence length."""
    return abs(_stop_index(pred_tokens, stop_id) - _stop_index(gt_tokens, stop_id))


def stopping_distribution(stop_probs: torch.Tensor) -> torch.Tensor:
    """q_l = p_l * prod_{j<l} (1 - p_j); leftover mass goes to the last position."""
    survive = torch.cumprod(1 - stop_probs, dim=-1)
    before = torch.cat([torch.ones_like(stop_probs[..., :1]), survive[..., :-1]], dim=-1)
    q = stop_probs * before
    return torch.cat([q[..., :-1], q[..., -1:] + survive[..., -1:]], dim=-1)


def duration_loss_soft(stop_probs, gt_end_index) -> torch.Tensor:
    """|E[stop index] - gt_end_index| under the stopping-time distribution of ``stop_probs``."""
    p = torch.as_tensor(stop_probs)
    if not torch.is_floating_point(p):
        p = p.double()
    if p.numel() == 0:
        raise InvalidDistribution("need at least one position")
    if torch.any(p < 0) or torch.any(p > 1) or not torch.all(torch.isfinite(p)):
        raise InvalidDistribution("stop probabilities must lie in [0, 1]")
    q = stopping_distribution(p)
    idx = torch.arange(p.shape[-1], dtype=p.dtype)
    return ((q * idx).sum(dim=-1) - torch.as_tensor(gt_end_index, dtype=p.dtype)).abs()


# -- composite loss ---------------------------------------------------------------

def compute_loss(logits, audio_targets, text_logits, text_targets, w: LossWeights,
                 variant: str = "soft", stop_id: Optional[int] = None) -> LossBreakdown:
    """Audio/text cross-entropy plus the duration term.

    Batched inputs are zero/-1 padded: ``logits`` (B, L, V), ``audio_targets`` (B, L);
    ``text_logits`` (B, T, V_t), ``text_targets`` (B, T). Unbatched 2-D inputs are
    accepted too. Padding targets are -1. Both CE terms are means over real positions.
    """
    if variant not in VARIANTS:
        raise InvalidConfig(f"duration variant must be one of {VARIANTS}")
    logits = getattr(logits, "scores", logits)
    audio_targets = torch.as_tensor(audio_targets, dtype=torch.long)
    text_targets = torch.as_tensor(text_targets, dtype=torch.long)
    if logits.ndim == 2:
        logits, audio_targets = logits.unsqueeze(0), audio_targets.unsqueeze(0)
    if text_logits.ndim == 2:
        text_logits, text_targets = text_logits.unsqueeze(0), text_targets.unsqueeze(0)
    if logits.shape[:2] != audio_targets.shape or text_logits.shape[:2] != text_targets.shape:
        raise ShapeError("logits and targets disagree in shape")
    V = logits.shape[-1]
    stop_id = V - 1 if stop_id is None else stop_id

    ce_audio = F.cross_entropy(logits.reshape(-1, V), audio_targets.reshape(-1), ignore_index=-1)
    if (text_targets >= 0).any():
        ce_text = F.cross_entropy(text_logits.reshape(-1, text_logits.shape[-1]), text_targets.reshape(-1),
                                  ignore_index=-1)
    else:
        ce_text = logits.new_zeros(())

    valid = audio_targets >= 0
    lengths = valid.sum(dim=1)
    gt_end = torch.stack([_first_or_len(audio_targets[b, :lengths[b]] == stop_id) for b in range(len(lengths))])
    if variant == "soft":
        p = logits.softmax(dim=-1)[..., stop_id]
        # past the end: certain stop, so padding never moves the expectation
        p = torch.where(valid, p, torch.ones_like(p))
        terms = []
        for b in range(p.shape[0]):
            terms.append(duration_loss_soft(p[b, :lengths[b]], gt_end[b]))
        duration = torch.stack(terms).mean()
    else:
        with torch.no_grad():
            pred = logits.argmax(dim=-1) == stop_id
            d = [(_first_or_len(pred[b, :lengths[b]]) - gt_end[b]).abs() for b in range(len(lengths))]
            duration = torch.stack(d).to(logits.dtype).mean()
    total = combine(ce_audio, ce_text, duration, w)
    return LossBreakdown(ce_audio, ce_text, duration, total, w.alpha, w.beta)


def _first_or_len(flags: torch.Tensor) -> torch.Tensor:
    hits = torch.nonzero(flags)
    return hits[0, 0] if len(hits) else torch.tensor(flags.shape[0])


# -- freezing -----------------------------------------------------------------

ADAPTER_PREFIXES = ("cross_blocks.", "expansion.", "style.video_proj.")


def trainable_mask(model: DubModel) -> dict[str, bool]:
    """Adapters only in cross-attention mode; everything otherwise."""
    if model.mode == "cross_attention":
        return {n: n.startswith(ADAPTER_PREFIXES) for n, _ in model.named_parameters()}
    return {n: True for n, _ in model.named_parameters()}


def apply_mask(model: DubModel, mask: dict[str, bool]) -> list[torch.nn.Parameter]:
    params = []
    for n, p in model.named_parameters():
        p.requires_grad_(bool(mask[n]))
        if mask[n]:
            params.append(p)
    return params


# -- checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    codebook_hash: str = ""

    @classmethod
    def from_model(cls, model: DubModel, optimizer=None, step=0, seed=0, codebook_hash="") -> "Checkpoint":
        params = {n: p.detach().cpu().numpy().astype(np.float32).copy() for n, p in model.named_parameters()}
        opt_state = {}
        if optimizer is not None:
            names = {id(p): n for n, p in model.named_parameters()}
            for p, st in optimizer.state.items():
                opt_state[names[id(p)]] = {
                    "exp_avg": st["exp_avg"].detach().numpy().astype(np.float32).copy(),
                    "exp_avg_sq": st["exp_avg_sq"].detach().numpy().astype(np.float32).copy(),
                    "step": np.array([float(st["step"])], dtype=np.float32),
                }
        return cls(model.cfg, params, opt_state, step, seed, codebook_hash)

    def build_model(self, dtype=torch.float32) -> DubModel:
        model = DubModel(ModelConfig(**self.config.to_dict()))
        state = {n: torch.from_numpy(a.copy()) for n, a in self.params.items()}
        missing = set(dict(model.named_parameters())) ^ set(state)
        if missing:
            raise ConfigMismatch(f"parameter names differ from the model: {sorted(missing)[:5]}")
        with torch.no_grad():
            for n, p in model.named_parameters():
                if tuple(p.shape) != state[n].shape:
                    raise ConfigMismatch(f"{n}: shape {tuple(state[n].shape)} vs model {tuple(p.shape)}")
                p.copy_(state[n])
        return model.to(dtype)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Header JSON + little-endian float32 payload + trailing SHA-256 of everything before it."""
    payload = io.BytesIO()
    table = []

    def put(name, arr):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": payload.tell()})
        payload.write(arr.tobytes())

    for n in sorted(ckpt.params):
        put(f"param/{n}", ckpt.params[n])
    for n in sorted(ckpt.optimizer):
        for k in sorted(ckpt.optimizer[n]):
            put(f"optim/{n}/{k}", ckpt.optimizer[n][k])
    header = json.dumps({
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "seed": ckpt.seed,
        "codebook_hash": ckpt.codebook_hash,
        "tensors": table,
    }, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + payload.getvalue()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 + 32 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint or truncated")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedFormat(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint(f"{path}: checksum mismatch (truncated or modified)")
    header = json.loads(body[12:12 + hlen])
    payload = body[12 + hlen:]
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        chunk = payload[t["offset"]:t["offset"] + 4 * n]
        if len(chunk) != 4 * n:
            raise CorruptCheckpoint(f"{path}: tensor {t['name']} truncated")
        arrays[t["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(t["shape"]).astype(np.float32)
    config = ModelConfig(**header["config"])
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        diff = sorted(k for k, v in expected_config.to_dict().items() if header["config"].get(k) != v)
        raise ConfigMismatch(f"{path}: model config differs in {diff}")
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    optim: dict[str, dict[str, np.ndarray]] = {}
    for k, v in arrays.items():
        if k.startswith("optim/"):
            name, slot = k[len("optim/"):].rsplit("/", 1)
            optim.setdefault(name, {})[slot] = v
    return Checkpoint(config, params, optim, header["step"], header["seed"], header["codebook_hash"])


# -- training loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    model: DubModel
    initial_params: dict[str, np.ndarray]


def model_config_for(corpus: Corpus, **overrides) -> ModelConfig:
    """Model vocabularies and input sizes that match a corpus."""
    c = corpus.config
    base = dict(
        text_vocab_size=corpus.tokenizer.vocab_size,
        audio_vocab_size=corpus.codebook.vocab_size,
        n_langs=c.n_langs,
        d_mel=c.d_mel,
        d_video_raw=c.d_video,
        rate_ratio=c.rate_ratio,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _restore_optimizer(optimizer, model, state):
    names = dict(model.named_parameters())
    for group in optimizer.param_groups:
        for p in group["params"]:
            n = next(k for k, v in names.items() if v is p)
            if n in state:
                optimizer.state[p] = {
                    "step": torch.tensor(float(state[n]["step"][0])),
                    "exp_avg": torch.from_numpy(state[n]["exp_avg"].copy()).to(p.dtype),
                    "exp_avg_sq": torch.from_numpy(state[n]["exp_avg_sq"].copy()).to(p.dtype),
                }


def train(examples: Sequence, config: ModelConfig, weights: LossWeights = LossWeights(), steps: int = 1000,
          seed: int = 0, *, variant: str = "soft", mask: Optional[dict[str, bool]] = None,
          init: Optional[Checkpoint] = None, resume: bool = False, batch_size: int = 16, lr: float = 3e-4,
          codebook_hash: str = "", log_every: int = 0, log_path=None) -> TrainResult:
    """Adam at a fixed learning rate over seeded shuffles of ``examples``.

    ``init`` supplies starting parameters (e.g. a speech-only base for adapter
    fine-tuning); otherwise the model is freshly initialised from ``config.seed``.
    Parameters outside ``mask`` are never handed to the optimiser.
    """
    examples = list(examples)
    if not examples:
        raise InsufficientData("training needs at least one example")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    model = DubModel(config)
    if init is not None:
        loaded = init.build_model()
        model.load_state_dict(loaded.state_dict())
    mask = trainable_mask(model) if mask is None else mask
    params = apply_mask(model, mask)
    initial = {n: p.detach().numpy().copy() for n, p in model.named_parameters()}
    optimizer = torch.optim.Adam(params, lr=lr, foreach=False)
    if resume and init is not None:
        _restore_optimizer(optimizer, model, init.optimizer)
    start = init.step if (resume and init is not None) else 0

    rows: list[dict] = []
    order: list[int] = []
    last_good = Checkpoint.from_model(model, optimizer, start, seed, codebook_hash)
    log_file = open(log_path, "w") if log_path is not None else None
    if log_file:
        log_file.write("step\tce_audio\tce_text\tduration\ttotal\n")
    try:
        model.train()
        for step in range(start + 1, start + steps + 1):
            if len(order) < batch_size:
                order += rng.permutation(len(examples)).tolist()
            idx, order = order[:batch_size], order[batch_size:]
            batch = collate([examples[i] for i in idx], config)
            audio_logits, text_logits = model.forward_batch(batch)
            loss = compute_loss(audio_logits, batch.audio_targets, text_logits, batch.text_targets, weights, variant,
                                stop_id=config.stop_id)
            if not torch.isfinite(loss.total):
                raise DivergenceError(f"non-finite loss at step {step}", checkpoint=last_good)
            optimizer.zero_grad(set_to_none=True)
            loss.total.backward()
            optimizer.step()
            row = {"step": step, **loss.as_row()}
            rows.append(row)
            if log_file:
                log_file.write("{step}\t{ce_audio!r}\t{ce_text!r}\t{duration!r}\t{total!r}\n".format(**row))
            if log_every and step % log_every == 0:
                log.info("step %d total %.4f ce_audio %.4f duration %.3f", step, row["total"], row["ce_audio"],
                         row["duration"])
                last_good = Checkpoint.from_model(model, optimizer, step, seed, codebook_hash)
    finally:
        if log_file:
            log_file.close()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    ckpt = Checkpoint.from_model(model, optimizer, start + steps, seed, codebook_hash)
    return TrainResult(ckpt, rows, model, initial)
