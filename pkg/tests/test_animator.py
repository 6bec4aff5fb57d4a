import numpy as np
import pytest
import torch

from avth import motion
from avth.animator import (AnimatorConfig, AnimatorNets, FeatureVolume, Stage1Trace, extract_appearance,
                           extract_motion, facial_sr, generate, grid_coords, keypoint_flow, keypoint_sidecar,
                           stage1_reconstruct, trilinear_sample, warp)
from avth.basecodec import downsample, resize
from avth.media import FrameSequence, constant_frame, to_rgb
from avth.nets import ShapeError, frame_to_tensor
from avth.training import grad_check


@pytest.fixture(scope="module")
def nets64():
    return AnimatorNets(AnimatorConfig(frame_width=64, frame_height=64))


@pytest.fixture(scope="module")
def nets512():
    return AnimatorNets(AnimatorConfig())


def _volume(seed, shape=(4, 4, 16, 16)):
    g = torch.Generator().manual_seed(seed)
    return FeatureVolume(torch.randn(shape, generator=g, dtype=torch.float64))


def _points(seed, k=21, scale=0.6):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand((k, 3), generator=g, dtype=torch.float64) * 2 - 1) * scale


def test_same_seed_same_parameters():
    a, b = AnimatorNets(AnimatorConfig(64, 64)), AnimatorNets(AnimatorConfig(64, 64))
    for x, y in zip(a.all(), b.all()):
        assert x.parameter_bytes() == y.parameter_bytes()
    c = AnimatorNets(AnimatorConfig(64, 64, seed=5))
    assert a.motion.parameter_bytes() != c.motion.parameter_bytes()


def test_facial_sr_dims_and_determinism(nets512):
    low = constant_frame(128, 128, (120, 110, 140))
    out = facial_sr(low, (512, 512), nets512.enhance)
    assert out.dims == (512, 512)
    assert out.same_as(facial_sr(low, (512, 512), nets512.enhance))
    with pytest.raises(ShapeError):
        facial_sr(low, (64, 64), nets512.enhance)


def test_facial_sr_with_zeroed_enhancer_is_bicubic(head64):
    nets = AnimatorNets(AnimatorConfig(64, 64))
    nets.enhance.zero_(nets.enhance.conv2)
    low = downsample(head64[0][5], 4)
    assert facial_sr(low, (64, 64), nets.enhance).same_as(to_rgb(resize(low, 64, 64)))


def test_appearance_volume_shape_and_bounds(nets512, head128):
    key = resize(head128[0][0], 512, 512)
    vol = extract_appearance(key, nets512.appearance)
    assert vol.dims == (4, 4, 16, 16)
    assert torch.isfinite(vol.data).all() and vol.data.abs().max() < 1e3


def test_zero_image_volume_is_constant_per_channel(nets64):
    vol = extract_appearance(constant_frame(64, 64, 0, "rgb"), nets64.appearance).data
    flat = vol.reshape(vol.shape[0] * vol.shape[1], -1)
    assert torch.allclose(flat, flat[:, :1].expand_as(flat), atol=1e-5)


def test_appearance_dim_mismatch(nets64):
    with pytest.raises(ShapeError):
        extract_appearance(constant_frame(32, 32), nets64.appearance)


def test_motion_params_are_valid_deterministic_and_input_dependent(nets64, head64):
    a = extract_motion(head64[0][0], nets64.motion)
    a.validate()
    assert float(a.scale) > 0
    b = extract_motion(head64[0][0], nets64.motion)
    assert np.array_equal(a.to_array(), b.to_array())
    c = extract_motion(head64[0][20], nets64.motion)
    assert not np.array_equal(a.to_array(), c.to_array())


def test_identity_warp_is_exact():
    for seed in range(5):
        vol = _volume(seed)
        x = _points(seed + 10)
        assert torch.equal(warp(vol, x, x.clone()).data, vol.data)


def test_single_keypoint_flow_is_uniform():
    grid = grid_coords(4, 8, 8, torch.float64)
    xk = torch.tensor([[0.1, -0.2, 0.3]], dtype=torch.float64)
    xt = torch.tensor([[0.4, 0.0, -0.1]], dtype=torch.float64)
    u = keypoint_flow(xk, xt, grid, 0.3)
    assert torch.equal(u, (xt - xk).expand_as(u))


def test_constant_shift_flow_and_integer_voxel_shift():
    vol = _volume(3)
    x = _points(4)
    c, d, h, w = vol.dims
    # one voxel in x, two in y, in normalized units
    v = torch.tensor([2 / (w - 1), 4 / (h - 1), 0.0], dtype=torch.float64)
    u = keypoint_flow(x, x + v, grid_coords(d, h, w, torch.float64), 0.3)
    assert (u - v).abs().max() < 1e-6
    out = warp(vol, x, x + v).data
    assert (out[:, :, 2:, 1:] - vol.data[:, :, :-2, :-1]).abs().max() < 1e-6


def test_constant_shift_on_linear_volume_fractional():
    d, h, w = 4, 16, 16
    zz, yy, xx = torch.meshgrid(torch.arange(d), torch.arange(h), torch.arange(w), indexing="ij")
    lin = (0.3 * xx + 0.7 * yy - 0.2 * zz + 1.0).to(torch.float64)[None]
    x = _points(9)
    v = torch.tensor([0.05, -0.03, 0.0], dtype=torch.float64)
    out = warp(FeatureVolume(lin), x, x + v).data[0]
    shift = v * torch.tensor([(w - 1) / 2, (h - 1) / 2, (d - 1) / 2], dtype=torch.float64)
    expect = lin[0] - (0.3 * shift[0] + 0.7 * shift[1] - 0.2 * shift[2])
    assert (out[:, 2:-2, 2:-2] - expect[:, 2:-2, 2:-2]).abs().max() < 1e-6


def test_trilinear_zero_padding_outside():
    vol = torch.ones((1, 2, 2, 2), dtype=torch.float64)
    pos = torch.tensor([[-1.0, 0.0, 0.0], [0.5, 0.0, 0.0], [3.0, 3.0, 3.0]], dtype=torch.float64)
    assert trilinear_sample(vol, pos)[0].tolist() == [0.0, 1.0, 0.0]


def test_warp_k_mismatch():
    with pytest.raises(ShapeError):
        warp(_volume(0), _points(0, 3), _points(1, 4))


def _half_voxel_targets(vol, k=32, seed=8):
    """Keypoints whose flow offsets every sample by about half a voxel.

    Trilinear sampling has slope jumps on lattice planes; keeping all sample
    positions well inside cells makes the function smooth over +-h.
    """
    c, d, h, w = vol.dims
    x_key = _points(seed, k=k)
    half = torch.tensor([0.5 / ((w - 1) / 2), 0.5 / ((h - 1) / 2), 0.5 / ((d - 1) / 2)], dtype=torch.float64)
    x_trg = (x_key + half + 0.01 * _points(seed + 1, k=k, scale=1.0)).clone()
    u = keypoint_flow(x_key, x_trg, grid_coords(d, h, w, torch.float64), 0.3)
    frac = (u * torch.tensor([(w - 1) / 2, (h - 1) / 2, (d - 1) / 2], dtype=torch.float64)) % 1.0
    assert (frac - 0.5).abs().max() < 0.2  # at least 0.3 voxel from every lattice plane
    return x_key, x_trg


def test_warp_gradient_matches_finite_differences():
    vol = _volume(7)
    x_key, x_trg = _half_voxel_targets(vol)
    err = grad_check(lambda: warp(vol, x_key, x_trg).data.mean(), [x_trg], h=1e-4, n_samples=64)
    assert err < 1e-3


def test_warp_gradient_weighted_readout():
    vol = _volume(11)
    x_key, x_trg = _half_voxel_targets(vol, seed=20)
    wts = _volume(12).data
    err = grad_check(lambda: (warp(vol, x_key, x_trg).data * wts).sum(), [x_trg], h=1e-4, n_samples=64)
    assert err < 1e-3


def test_generate_range_dims_determinism(nets512):
    vol = FeatureVolume(_volume(2).data.float())
    a = generate(vol, nets512.generator)
    assert a.dims == (512, 512)
    arr = a.to_array()
    assert arr.min() >= 0 and arr.max() <= 255
    assert a.same_as(generate(vol, nets512.generator))
    with pytest.raises(ShapeError):
        generate(FeatureVolume(torch.zeros(4, 4, 8, 8)), nets512.generator)


def test_stage1_constant_motion_gives_identical_tr(nets64, head64):
    key = head64[0][0]
    aux = [head64[0][7]] * 4
    tr = stage1_reconstruct(key, FrameSequence(aux), nets64)
    assert len(tr) == 4
    assert all(f.same_as(tr[0]) for f in tr)


def test_stage1_length_determinism_and_trace(nets64, head64):
    frames = list(head64[0])
    sr = [facial_sr(downsample(f, 4), (64, 64), nets64.enhance) for f in frames[1:60]]
    trace = Stage1Trace()
    tr = stage1_reconstruct(frames[0], FrameSequence(sr), nets64, trace)
    assert len(tr) == 59 and len(trace.x_targets) == 59
    again = stage1_reconstruct(frames[0], FrameSequence(sr), nets64)
    assert all(a.same_as(b) for a, b in zip(tr, again))
    # reference target: relative motion cancels, leaving the unscaled expression term,
    # so it differs from x_key by (S_key - 1) * delta_key; mouth points are pulled onto x_key
    p_key = extract_motion(frames[0], nets64.motion)
    expect = trace.x_key - (p_key.scale - 1) * p_key.expression
    mouth = list(nets64.cfg.mouth_indices)
    expect[mouth] = trace.x_key[mouth]
    assert torch.allclose(trace.x_targets[0], expect, atol=1e-5)
    blob = keypoint_sidecar(trace.x_key, trace.x_targets)
    assert len(blob) == 4 * 21 * 3 * 60


def test_stage1_requires_sr_dims(nets64, head64):
    with pytest.raises(ShapeError):
        stage1_reconstruct(head64[0][0], [downsample(head64[0][1], 4)], nets64)


def test_tensor_conversion_range(head64):
    x = frame_to_tensor(head64[0][0])
    assert x.shape == (3, 64, 64) and 0 <= x.min() and x.max() <= 1
