import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from avth import lipsync as L
from avth.audio import AudioError, MelSpectrogram
from avth.media import AudioClip, FrameSequence, constant_frame
from avth.nets import ShapeError, frame_to_tensor, frames_to_batch
from avth.synthetic import synthetic_talking_head
from avth.training import grad_check, train_autoencoder


def _features(n, d=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return L.AudioFeatureSequence(torch.randn((n, d), generator=g))


@pytest.fixture(scope="module")
def trained64():
    """Toy Stage II nets with the VAE fitted on even frames; odd frames are held out."""
    seq, clip = synthetic_talking_head(16, 64, 64, seed=0)
    nets = L.LipSyncNets(L.LipSyncConfig(frame_width=64, frame_height=64))
    train_autoencoder(nets.vae, frames_to_batch(seq.frames[::2]), steps=300, lr=3e-3)
    return nets, seq, clip


def test_audio_encoder_rate_and_length():
    net = L.AudioEncoder(16, 1)
    feats = L.audio_encode(MelSpectrogram(np.random.default_rng(0).normal(size=(101, 80))), net)
    assert feats.features.shape == (50, 16) and feats.rate == 50
    const = L.audio_encode(MelSpectrogram(np.full((20, 80), -3.0)), net).features
    assert torch.allclose(const, const[:1].expand_as(const))
    with pytest.raises(AudioError):
        L.audio_encode(MelSpectrogram(np.zeros((1, 80))), net)


def test_one_second_clip_gives_fifty_features():
    clip = AudioClip(np.random.default_rng(3).integers(-3000, 3000, 16000).astype(np.int16), 16000)
    assert len(L.clip_features(clip, L.AudioEncoder(16, 1))) == 50


@pytest.mark.parametrize("i, rows", [
    (2, list(range(0, 10))),
    (0, [0, 0, 0, 0, 0, 1, 2, 3, 4, 5]),
    (10, list(range(16, 26))),
])
def test_window_rows_examples(i, rows):
    win = L.window_for_frame(_features(100), i)
    assert list(win.rows) == rows
    assert win.features.shape == (10, 16)
    assert torch.equal(win.features, _features(100).features[rows])


def test_window_clamps_at_end_and_rejects_empty():
    assert list(L.window_for_frame(_features(12), 5).rows) == [6, 7, 8, 9, 10, 11, 11, 11, 11, 11]
    with pytest.raises(AudioError):
        L.window_for_frame(L.AudioFeatureSequence(torch.zeros((0, 16))), 0)


@given(st.integers(0, 10000))
def test_window_arithmetic(i):
    assert L.window_rows(i) == list(range(2 * i - 4, 2 * i + 6))


def test_mask_lower_half():
    f = constant_frame(512, 512, (200, 100, 50))
    m = L.mask_lower_half(f)
    assert not m.planes[0][256:].any() and (m.planes[0][:256] == 200).all()
    assert not m.planes[1][128:].any() and (m.planes[1][:128] == 100).all()
    assert L.mask_lower_half(m).same_as(m)
    odd = L.mask_lower_half(constant_frame(4, 5, 9, "rgb"))
    assert (odd.planes[0][:2] == 9).all() and not odd.planes[0][2:].any()


def test_vae_latent_shape_512():
    nets = L.LipSyncNets(L.LipSyncConfig())
    z = L.vae_encode(constant_frame(512, 512), nets.vae)
    assert z.dims == (8, 64, 64)
    out = L.vae_decode(z, nets.vae)
    assert out.dims == (512, 512)
    assert L.vae_decode(L.vae_encode(constant_frame(512, 512), nets.vae), nets.vae).same_as(out)
    with pytest.raises(ShapeError):
        L.vae_encode(constant_frame(256, 256), nets.vae)


def test_trained_vae_reconstructs_held_out_frames(trained64):
    nets, seq, _ = trained64
    scores = []
    for f in seq.frames[1::2]:
        rec = L.vae_decode(L.vae_encode(f, nets.vae), nets.vae)
        ref = frame_to_tensor(f)
        out = frame_to_tensor(rec)
        scores.append(10 * np.log10(1.0 / ((out - ref) ** 2).mean().item()))
    assert np.mean(scores) >= 20


def test_stage2_keeps_upper_half(trained64):
    nets, seq, clip = trained64
    tr = seq.derive(seq.frames[1::2])
    out = L.stage2_reconstruct(tr, clip, nets, frame_indices=range(1, 16, 2))
    assert len(out) == len(tr)
    a = frames_to_batch(out.frames)[..., :32, :]
    b = frames_to_batch(tr.frames)[..., :32, :]
    assert 10 * np.log10(1.0 / ((a - b) ** 2).mean().item()) >= 25
    again = L.stage2_reconstruct(tr, clip, nets, frame_indices=range(1, 16, 2))
    assert all(x.same_as(y) for x, y in zip(out, again))


def test_stage2_errors(trained64):
    nets, seq, _ = trained64
    with pytest.raises(AudioError):
        L.stage2_reconstruct(seq.derive(seq.frames[:2]), L.AudioFeatureSequence(torch.zeros((0, 16))), nets)
    with pytest.raises(ValueError):
        L.stage2_reconstruct(seq.derive(seq.frames[:2]), _features(50), nets, frame_indices=[0])


def _latents(nets, seed=0):
    g = torch.Generator().manual_seed(seed)
    shape = nets.cfg.latent_shape
    return L.LatentFeature(torch.randn(shape, generator=g)), L.LatentFeature(torch.randn(shape, generator=g))


def test_attention_weights_sum_to_one():
    nets = L.LipSyncNets(L.LipSyncConfig(frame_width=64, frame_height=64))
    v_ref, v_mask = _latents(nets)
    _, w = nets.unet(v_ref.data[None], v_mask.data[None], _features(10).features[None], return_weights=True)
    assert w.shape[-1] == 10
    assert (w.sum(-1) - 1).abs().max() < 1e-6


def test_zeroed_key_value_branch_ignores_audio():
    nets = L.LipSyncNets(L.LipSyncConfig(frame_width=64, frame_height=64))
    nets.unet.zero_(nets.unet.attn.to_k)
    nets.unet.zero_(nets.unet.attn.to_v)
    v_ref, v_mask = _latents(nets)
    zero = L.AudioWindow(torch.zeros((10, 16)), tuple(range(10)))
    a = L.unet_fuse(v_ref, v_mask, zero, nets.unet).data
    b = L.unet_fuse(v_ref, v_mask, _features(10, seed=4).features, nets.unet).data
    assert torch.equal(a, b)


def test_row_order_matters():
    nets = L.LipSyncNets(L.LipSyncConfig(frame_width=64, frame_height=64))
    v_ref, v_mask = _latents(nets)
    win = _features(10, seed=2).features
    a = L.unet_fuse(v_ref, v_mask, win, nets.unet).data
    b = L.unet_fuse(v_ref, v_mask, win.flip(0), nets.unet).data
    assert not torch.allclose(a, b, atol=1e-7)
    assert L.unet_fuse(v_ref, v_mask, win, nets.unet).dims == v_ref.dims
    bad = L.LatentFeature(torch.zeros(8, 4, 4))
    with pytest.raises(ShapeError):
        L.unet_fuse(v_ref, bad, win, nets.unet)


def test_unet_gradient_wrt_audio_window():
    nets = L.LipSyncNets(L.LipSyncConfig(frame_width=64, frame_height=64))
    unet = nets.unet.double()
    v_ref, v_mask = (x.data.double()[None] for x in _latents(nets, 5))
    win = _features(10, seed=6).features.double()[None].clone()
    target = torch.randn(v_ref.shape, generator=torch.Generator().manual_seed(9), dtype=torch.float64)
    err = grad_check(lambda: ((unet(v_ref, v_mask, win) - target) ** 2).mean(), [win], h=1e-4, n_samples=64)
    assert err < 1e-3


def test_seeded_nets_are_reproducible():
    a = L.LipSyncNets(L.LipSyncConfig(frame_width=64, frame_height=64))
    b = L.LipSyncNets(L.LipSyncConfig(frame_width=64, frame_height=64))
    assert all(x.parameter_bytes() == y.parameter_bytes() for x, y in zip(a.all(), b.all()))
    c = L.LipSyncNets(L.LipSyncConfig(frame_width=64, frame_height=64))
    c.load_state_dict(a.state_dict())
    assert all(x.parameter_bytes() == y.parameter_bytes() for x, y in zip(a.all(), c.all()))
