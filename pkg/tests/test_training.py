import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lipsync_tts.decoder import DubModel, collate
from lipsync_tts.errors import ConfigMismatch, CorruptCheckpoint, InsufficientData, InvalidConfig, InvalidDistribution, UnsupportedFormat
from lipsync_tts.tokens import AudioTokenSequence
from lipsync_tts.training import (
    Checkpoint,
    LossWeights,
    combine,
    compute_loss,
    duration_loss_hard,
    duration_loss_soft,
    load_checkpoint,
    model_config_for,
    save_checkpoint,
    stopping_distribution,
    train,
    trainable_mask,
)

MICRO = dict(d_model=8, n_layers=1, n_heads=2, n_style=2, d_video=4, d_speaker=4, ff_mult=2)
TINY = dict(d_model=32, n_layers=2, n_heads=2, n_style=2, d_video=8, d_speaker=16)


# -- duration terms --------------------------------------------------------------

def test_hard_duration_examples():
    stop = 64
    assert duration_loss_hard([1, 2, 3, 4, 5, stop], [1] * 8 + [stop], stop) == 3
    assert duration_loss_hard([1] * 10, [1] * 8 + [stop], stop) == 2
    assert duration_loss_hard([1, stop], [2, stop], stop) == 0
    a = AudioTokenSequence((1, 2, stop), stop)
    b = AudioTokenSequence((1, stop), stop)
    assert duration_loss_hard(a, b) == 1


def brute_force_expected_stop(p):
    """Enumerate all stop/continue outcomes; the walk is forced to end at the last position."""
    L = len(p)
    expected = 0.0
    for outcome in itertools.product([0, 1], repeat=L):
        prob = 1.0
        for pj, o in zip(p, outcome):
            prob *= pj if o else 1 - pj
        first = outcome.index(1) if 1 in outcome else L - 1
        expected += prob * first
    return expected


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.integers(0, 10))
def test_soft_duration_matches_enumeration(p, gt):
    got = float(duration_loss_soft(torch.tensor(p, dtype=torch.float64), gt))
    assert got == pytest.approx(abs(brute_force_expected_stop(p) - gt), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_stopping_distribution_is_a_distribution(p):
    q = stopping_distribution(torch.tensor(p, dtype=torch.float64))
    assert torch.all(q >= -1e-15)
    assert float(q.sum()) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("L,k,gt", [(6, 3, 5), (5, 0, 0), (9, 8, 2)])
def test_soft_equals_hard_for_one_hot(L, k, gt):
    stop = 64
    p = torch.zeros(L, dtype=torch.float64)
    p[k] = 1.0
    pred = [1] * k + [stop]
    target = [1] * gt + [stop]
    assert float(duration_loss_soft(p, gt)) == duration_loss_hard(pred, target, stop)


def test_soft_duration_rejects_bad_probabilities():
    with pytest.raises(InvalidDistribution):
        duration_loss_soft(torch.tensor([0.5, 1.2]), 1)
    with pytest.raises(InvalidDistribution):
        duration_loss_soft(torch.tensor([float("nan")]), 1)
    with pytest.raises(InvalidDistribution):
        duration_loss_soft(torch.tensor([]), 0)


# -- composite loss -----------------------------------------------------------------

def test_combine_example():
    total = combine(torch.tensor(2.0), torch.tensor(3.0), torch.tensor(3.0), LossWeights(0.01, 0.1))
    assert float(total) == pytest.approx(2.33, abs=1e-6)


def test_beta_zero_drops_duration():
    total = combine(torch.tensor(2.0), torch.tensor(3.0), torch.tensor(1e6), LossWeights(0.01, 0.0))
    assert float(total) == pytest.approx(2.03, abs=1e-6)


def test_loss_weights_validation():
    with pytest.raises(InvalidConfig):
        LossWeights(-1, 0.1)
    with pytest.raises(InvalidConfig):
        LossWeights(0.01, float("nan"))


def test_perfect_prediction():
    V, stop = 65, 64
    targets = torch.tensor([3, 9, 1, stop])
    logits = torch.full((4, V), -50.0)
    logits[torch.arange(4), targets] = 50.0
    tt = torch.tensor([2, 5])
    tl = torch.full((2, 17), -50.0)
    tl[torch.arange(2), tt] = 50.0
    for variant in ("soft", "hard"):
        out = compute_loss(logits, targets, tl, tt, LossWeights(), variant)
        assert float(out.ce_audio) < 1e-6
        assert float(out.ce_text) < 1e-6
        assert float(out.duration) < 1e-6


def _np_ce(logits, targets):
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(-1))
    keep = targets >= 0
    picked = logits[np.nonzero(keep)[0], targets[keep]] if logits.ndim == 2 else None
    return float(np.mean(lse[keep] - picked))


def test_composite_decomposition_float32():
    rng = np.random.default_rng(0)
    V, stop = 65, 64
    logits = torch.tensor(rng.normal(size=(2, 6, V)), dtype=torch.float32)
    targets = torch.tensor([[1, 2, 3, 4, 5, stop], [7, 8, stop, -1, -1, -1]])
    tl = torch.tensor(rng.normal(size=(2, 3, 17)), dtype=torch.float32)
    tt = torch.tensor([[1, 2, 3], [4, -1, -1]])
    w = LossWeights(0.01, 0.1)
    out = compute_loss(logits, targets, tl, tt, w, "soft")
    assert out.total.dtype == torch.float32
    ce_a = _np_ce(logits.numpy().reshape(-1, V), targets.numpy().reshape(-1))
    ce_t = _np_ce(tl.numpy().reshape(-1, 17), tt.numpy().reshape(-1))
    probs = torch.softmax(logits.double(), -1)[..., stop].numpy()
    d = np.mean([abs(brute_force_expected_stop(probs[0, :6]) - 5), abs(brute_force_expected_stop(probs[1, :3]) - 2)])
    assert float(out.ce_audio) == pytest.approx(ce_a, rel=1e-5)
    assert float(out.ce_text) == pytest.approx(ce_t, rel=1e-5)
    assert float(out.duration) == pytest.approx(d, rel=1e-5)
    assert float(out.total) == pytest.approx(ce_a + 0.01 * ce_t + 0.1 * d, rel=1e-5)


# -- gradients ---------------------------------------------------------------------

def test_gradients_match_finite_differences(corpus, small_examples):
    torch.manual_seed(0)
    cfg = model_config_for(corpus, **MICRO, integration_mode="cross_attention")
    model = DubModel(cfg).double()
    for p in model.parameters():  # no zero-initialised shortcuts
        torch.nn.init.normal_(p, std=0.3)
    batch = collate(small_examples[:2], cfg, dtype=torch.float64)
    w = LossWeights(0.5, 0.1)

    def loss_fn():
        a, t = model.forward_batch(batch)
        return compute_loss(a, batch.audio_targets, t, batch.text_targets, w, "soft", cfg.stop_id).total

    grads = dict(zip([n for n, _ in model.named_parameters()],
                     torch.autograd.grad(loss_fn(), list(model.parameters()), allow_unused=True)))
    rng = np.random.default_rng(0)
    h = 1e-6
    checked = 0
    with torch.no_grad():
        for n, p in model.named_parameters():
            g = grads[n]
            if g is None:
                assert n.startswith("video_prompt_proj."), n  # only used in concat mode
                continue
            flat = p.view(-1)
            for i in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                an = g.view(-1)[i].item()
                assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd)) + 1e-8, (n, an, fd)
                checked += 1
    assert checked > 50


# -- freezing and the loop ------------------------------------------------------------

def test_trainable_mask_by_mode(corpus):
    cross = DubModel(model_config_for(corpus, **MICRO, integration_mode="cross_attention"))
    mask = trainable_mask(cross)
    assert mask["cross_blocks.0.q.weight"] and mask["expansion.end_marker"] and mask["style.video_proj.weight"]
    assert not mask["audio_head.weight"] and not mask["blocks.0.attn.qkv.weight"] and not mask["lip_encoder.convs.0.weight"]
    for mode in ("none", "concat"):
        assert all(trainable_mask(DubModel(model_config_for(corpus, **MICRO, integration_mode=mode))).values())


def test_frozen_parameters_do_not_move(corpus, small_examples):
    cfg = model_config_for(corpus, **MICRO)
    base = train(small_examples, cfg, steps=2, seed=0, batch_size=4)
    ft = train(small_examples, cfg.with_mode("cross_attention"), steps=3, seed=0, batch_size=4, init=base.checkpoint)
    mask = trainable_mask(ft.model)
    moved = 0
    for n, p in ft.model.named_parameters():
        before = base.checkpoint.params[n]
        if mask[n]:
            moved += not np.array_equal(before, p.detach().numpy())
        else:
            assert np.array_equal(before, p.detach().numpy()), n
    assert moved > 0


def test_zero_steps_is_noop(corpus, small_examples):
    cfg = model_config_for(corpus, **MICRO)
    res = train(small_examples, cfg, steps=0, seed=0)
    assert res.log == []
    for n, p in res.model.named_parameters():
        assert np.array_equal(res.initial_params[n], p.detach().numpy())


def test_empty_training_set(corpus):
    with pytest.raises(InsufficientData):
        train([], model_config_for(corpus, **MICRO), steps=1)


def test_same_seed_reproducible(corpus, small_examples):
    cfg = model_config_for(corpus, **MICRO)
    a = train(small_examples, cfg, steps=4, seed=5, batch_size=4)
    b = train(small_examples, cfg, steps=4, seed=5, batch_size=4)
    assert [r["total"] for r in a.log] == [r["total"] for r in b.log]
    for n in a.checkpoint.params:
        assert np.array_equal(a.checkpoint.params[n], b.checkpoint.params[n])


def test_loss_decreases(corpus, small_examples):
    cfg = model_config_for(corpus, **TINY)
    res = train(small_examples[:8], cfg, steps=200, seed=0, batch_size=8, lr=3e-3)
    first = np.mean([r["total"] for r in res.log[:10]])
    last = np.mean([r["total"] for r in res.log[-10:]])
    assert last < 0.5 * first


def test_training_log_file(corpus, small_examples, tmp_path):
    cfg = model_config_for(corpus, **MICRO)
    path = tmp_path / "log.tsv"
    train(small_examples, cfg, steps=3, seed=0, batch_size=4, log_path=path)
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == ["step", "ce_audio", "ce_text", "duration", "total"]
    assert len(lines) == 4


# -- checkpoints -------------------------------------------------------------------

@pytest.fixture
def trained(corpus, small_examples):
    cfg = model_config_for(corpus, **MICRO)
    return train(small_examples, cfg, steps=2, seed=0, batch_size=4, codebook_hash=corpus.codebook.hash())


def test_checkpoint_round_trip(trained, small_examples, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained.checkpoint, path)
    back = load_checkpoint(path, trained.checkpoint.config)
    assert back.step == 2 and back.codebook_hash == trained.checkpoint.codebook_hash
    for n, a in trained.checkpoint.params.items():
        assert np.array_equal(a, back.params[n])
    for n, slots in trained.checkpoint.optimizer.items():
        for k, v in slots.items():
            assert np.array_equal(v, back.optimizer[n][k])
    batch = collate(small_examples[:2], back.config)
    with torch.no_grad():
        a, _ = trained.model.forward_batch(batch)
        b, _ = back.build_model().forward_batch(batch)
    assert torch.equal(a, b)


def test_checkpoint_truncated(trained, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained.checkpoint, path)
    raw = path.read_bytes()
    for cut in (len(raw) // 2, 10, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)


def test_checkpoint_bitflip(trained, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained.checkpoint, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_version_and_config(trained, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained.checkpoint, path)
    with pytest.raises(ConfigMismatch):
        load_checkpoint(path, trained.checkpoint.config.with_mode("concat"))
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedFormat):
        load_checkpoint(path)


def test_resume_continues_step_count(trained, small_examples):
    res = train(small_examples, trained.checkpoint.config, steps=3, seed=0, batch_size=4,
                init=trained.checkpoint, resume=True)
    assert res.checkpoint.step == 5
    assert [r["step"] for r in res.log] == [3, 4, 5]
