"""Acceptance criteria AC1-AC9, each timed and reported on its own line."""

import contextlib
import math
import time

import numpy as np
import pytest
import torch

from avth import basecodec as bc
from avth import container as C
from avth import lipsync as L
from avth.animator import FeatureVolume, grid_coords, keypoint_flow, warp
from avth.audio import log_mel, resample_audio
from avth.config import Config
from avth.evaluate import bd_rate, calibrated_scorer, rd_sweep, sync_confidence, sync_from_embeddings
from avth.gop import partition
from avth.media import AudioClip, FrameSequence, constant_frame
from avth.motion import MotionParams, compose_key, compose_target, rotation_from_euler
from avth.pipeline import decode_stream, encode_stream
from avth.synthetic import synthetic_talking_head
from avth.training import (LossWeights, SyncScorer, build_dataset, finetune, grad_check, loss_sync, loss_total,
                           sync_loss_from_similarity)


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def run(n, desc, limit_s):
        t0 = time.perf_counter()
        try:
            yield
            elapsed = time.perf_counter() - t0
            assert elapsed < limit_s, f"took {elapsed:.2f} s, limit {limit_s} s"
        except BaseException as exc:
            with capsys.disabled():
                print(f"\nAC{n} FAIL ({time.perf_counter() - t0:.2f} s / {limit_s} s) {desc}: {exc}")
            raise
        with capsys.disabled():
            print(f"\nAC{n} PASS ({elapsed:.2f} s / {limit_s} s) {desc}")

    return run


def test_ac1_bd_rate_oracles(criterion):
    anchor = [(100.0, 30.0), (200.0, 33.0), (400.0, 35.5), (800.0, 37.2)]
    with criterion(1, "BD-rate analytic oracles", 1.0):
        assert bd_rate(anchor, anchor) == 0.0
        assert abs(bd_rate(anchor, [(2 * r, q) for r, q in anchor]) - 100.0) <= 0.1
        assert abs(bd_rate(anchor, [(0.5 * r, q) for r, q in anchor]) + 50.0) <= 0.1


def _random_params(rng, k):
    r = rotation_from_euler(*rng.uniform(-np.pi, np.pi, 3))
    return MotionParams(rng.uniform(0.5, 2.0), r, rng.normal(size=(k, 3)) * 0.2, rng.normal(size=3))


def _with(p, scale=None, expression=None, translation=None):
    return MotionParams(p.scale if scale is None else scale, p.rotation,
                        p.expression if expression is None else expression,
                        p.translation if translation is None else translation)


def test_ac2_keypoint_algebra(criterion):
    rng = np.random.default_rng(2024)
    with criterion(2, "keypoint identity case and relativity invariants, 1000 instances", 5.0):
        worst_id = worst_inv = 0.0
        for _ in range(1000):
            k = int(rng.integers(1, 32))
            x_c = rng.normal(size=(k, 3))
            pk = _with(_random_params(rng, k), expression=np.zeros((k, 3)))
            p0 = _random_params(rng, k)
            x_trg = compose_target(x_c, pk, p0, p0, np.zeros((k, 3)))
            worst_id = max(worst_id, np.abs(x_trg - compose_key(x_c, pk)).max())

            pk, pi = _random_params(rng, k), _random_params(rng, k)
            base = compose_target(x_c, pk, p0, pi)
            c, f, d = rng.normal(size=3), rng.uniform(0.1, 10), rng.normal(size=(k, 3))
            variants = [
                compose_target(x_c, pk, _with(p0, translation=p0.translation + c), _with(pi, translation=pi.translation + c)),
                compose_target(x_c, pk, _with(p0, scale=p0.scale * f), _with(pi, scale=pi.scale * f)),
                compose_target(x_c, pk, _with(p0, expression=p0.expression + d), _with(pi, expression=pi.expression + d)),
            ]
            worst_inv = max(worst_inv, max(np.abs(v - base).max() for v in variants))
        assert worst_id < 1e-12, f"identity error {worst_id}"
        assert worst_inv < 1e-9, f"invariant error {worst_inv}"


def test_ac3_warp_properties(criterion):
    g = torch.Generator().manual_seed(3)
    vol = FeatureVolume(torch.randn((4, 4, 16, 16), generator=g, dtype=torch.float64))
    c, d, h, w = vol.dims
    half_voxel = torch.tensor([1 / (w - 1), 1 / (h - 1), 1 / (d - 1)], dtype=torch.float64)
    to_voxels = torch.tensor([(w - 1) / 2, (h - 1) / 2, (d - 1) / 2], dtype=torch.float64)
    with criterion(3, "identity warp, constant shift, keypoint gradient check", 30.0):
        x = (torch.rand((21, 3), generator=g, dtype=torch.float64) * 2 - 1) * 0.6
        assert torch.equal(warp(vol, x, x.clone()).data, vol.data)

        v = torch.tensor([2 / (w - 1), 4 / (h - 1), 0.0], dtype=torch.float64)
        u = keypoint_flow(x, x + v, grid_coords(d, h, w, torch.float64), 0.3)
        assert (u - v).abs().max() < 1e-6
        shifted = warp(vol, x, x + v).data
        assert (shifted[:, :, 2:, 1:] - vol.data[:, :, :-2, :-1]).abs().max() < 1e-6

        # samples about half a voxel off the lattice keep trilinear interpolation smooth over +-h
        x_key = (torch.rand((32, 3), generator=g, dtype=torch.float64) * 2 - 1) * 0.6
        x_trg = x_key + half_voxel + 0.01 * (torch.rand((32, 3), generator=g, dtype=torch.float64) * 2 - 1)
        flow = keypoint_flow(x_key, x_trg, grid_coords(d, h, w, torch.float64), 0.3)
        assert ((flow * to_voxels) % 1.0 - 0.5).abs().max() < 0.2
        err = grad_check(lambda: warp(vol, x_key, x_trg).data.mean(), [x_trg], h=1e-4, n_samples=64)
        assert err < 1e-3, f"relative error {err}"


def test_ac4_loss_suite(criterion):
    with criterion(4, "loss composition, sync closed forms, gradient checks", 60.0):
        assert loss_total(1.0, 1.0, 1.0, LossWeights(0.01, 0.03)) == 1.04
        for s, expect in ((1.0, 0.0), (0.0, math.log(2)), (-1.0, 6 * math.log(10))):
            got = sync_loss_from_similarity(torch.tensor([s], dtype=torch.float64)).item()
            assert abs(got - expect) < 1e-9, (s, got)

        nets = L.LipSyncNets(L.LipSyncConfig(frame_width=64, frame_height=64))
        unet = nets.unet.double()
        g = torch.Generator().manual_seed(4)
        v_ref, v_mask = (torch.randn((1, 8, 8, 8), generator=g, dtype=torch.float64) for _ in range(2))
        win = torch.randn((1, 10, 16), generator=g, dtype=torch.float64)
        target = torch.randn((1, 8, 8, 8), generator=g, dtype=torch.float64)
        err = grad_check(lambda: ((unet(v_ref, v_mask, win) - target) ** 2).mean(), [win], h=1e-4, n_samples=64)
        assert err < 1e-3, f"unet_fuse relative error {err}"

        scorer = SyncScorer().double()
        frames = torch.rand((3, 3, 32, 32), generator=g, dtype=torch.float64)
        windows = torch.randn((3, 10, 16), generator=g, dtype=torch.float64)
        for param in (frames, windows):
            err = grad_check(lambda: loss_sync(frames, windows, scorer), [param], h=1e-4, n_samples=64)
            assert err < 1e-3, f"loss_sync relative error {err}"


def test_ac5_audio_pipeline(criterion):
    rng = np.random.default_rng(5)
    clip = AudioClip(rng.integers(-8000, 8000, 16000).astype(np.int16), 16000)
    with criterion(5, "1 s audio -> 101x80 mel -> 50 features; frame windows", 5.0):
        mel = log_mel(resample_audio(clip, 16000))
        assert mel.frames.shape == (101, 80)
        feats = L.audio_encode(mel, L.AudioEncoder(16, 1))
        assert feats.features.shape == (50, 16)
        expected = {0: [0, 0, 0, 0, 0, 1, 2, 3, 4, 5], 2: list(range(0, 10)), 10: list(range(16, 26))}
        long = L.AudioFeatureSequence(torch.arange(100.0)[:, None].repeat(1, 16))
        for i, rows in expected.items():
            win = L.window_for_frame(long, i)
            assert list(win.rows) == rows
            assert win.features[:, 0].tolist() == [float(r) for r in rows]


def test_ac6_codec_and_container(criterion, head128):
    seq, clip = head128
    with criterion(6, "container round trip, rate vs QP, constant intra, 60-frame 128x128 decode", 60.0):
        data = encode_stream(seq, clip, Config())
        assert C.mux_stream(C.demux(data)) == data

        frames = list(seq)[:3] + [bc.downsample(f, 4) for f in list(seq)[:2]]
        for f in frames:
            sizes = [len(bc.encode_intra(f, qp).payload) for qp in range(0, 52, 6)]
            assert all(a >= b for a, b in zip(sizes, sizes[1:])), sizes
            assert sizes[0] > sizes[-1]

        flat = constant_frame(128, 128)
        assert bc.decode_intra(bc.encode_intra(flat, 30)).same_as(flat)

        res = decode_stream(data, Config())
        assert len(res.frames) == len(seq) == 60
        stream = C.demux(data)
        for g, group in enumerate(stream.plan.groups):
            ref = bc.decode_intra(bc.CodedChunk.from_bytes(stream.key_chunks[g]))
            assert res.frames[group.keyframe_index].same_as(ref)


def test_ac7_gop_sweep(criterion):
    with criterion(7, "GOP sweep 15/30/45/60 at QP 30 gives 4 rows, video kbps decreasing", 300.0):
        seq, clip = synthetic_talking_head(180, 128, 128, seed=0)
        rows = rd_sweep(seq, clip, Config(keyframe_qp=30), gops=[15, 30, 45, 60])
        assert [r.setting for r in rows] == ["gop=15", "gop=30", "gop=45", "gop=60"]
        kbps = [r.kbps_video for r in rows]
        assert all(a > b for a, b in zip(kbps, kbps[1:])), kbps
        assert all(math.isfinite(r.psnr) and math.isfinite(r.sync_confidence) for r in rows)


def _finetune_run(seq, clip):
    nets = L.LipSyncNets(L.LipSyncConfig(frame_width=64, frame_height=64, seed=100))
    ds = build_dataset(seq.frames[:4], seq.frames[4:8], clip, nets, SyncScorer(), indices=range(4))
    return finetune(nets, ds, steps=200, lr=0.005)


def test_ac8_finetune_smoke(criterion, head64):
    seq, clip = head64
    with criterion(8, "200 fine-tuning steps lower the total loss, deterministically", 120.0):
        a = _finetune_run(seq, clip)
        b = _finetune_run(seq, clip)
        assert len(a) == 200
        assert a[-1].total < a[0].total, (a[0].total, a[-1].total)
        assert [r.total for r in a] == [r.total for r in b]


def test_ac9_sync_confidence(criterion):
    with criterion(9, "aligned clip peaks at shift 0; 5-frame video delay peaks at -5", 30.0):
        scorer = calibrated_scorer(Config())
        seq, clip = synthetic_talking_head(100, 64, 64, seed=0)
        aligned = sync_confidence(seq, clip, scorer)
        assert aligned.best_shift == 0 and aligned.confidence > 0, aligned.best_shift
        delayed = FrameSequence([seq[0]] * 5 + list(seq)[:-5], seq.fps)
        moved = sync_confidence(delayed, clip, scorer)
        assert moved.best_shift == aligned.best_shift - 5, moved.best_shift

        rng = np.random.default_rng(9)
        emb = rng.normal(size=(100, 16))
        assert sync_from_embeddings(emb, emb).best_shift == 0
        assert sync_from_embeddings(emb, np.roll(emb, 5, axis=0)).best_shift == -5
