"""Encoder and two-stage decoder for whole talking-head streams."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import basecodec as bc
from .animator import AnimatorNets, facial_sr, stage1_reconstruct
from .audio import TARGET_RATE, AudioError, resample_audio
from .config import Config
from .container import (AUDIO_PCM16, ContainerError, Stream, StreamMeta, demux, mux, pack_chunk_list,
                        unpack_chunk_list)
from .gop import partition
from .lipsync import LipSyncNets, clip_features, stage2_reconstruct
from .media import AudioClip, Frame, FrameSequence, to_yuv420

log = logging.getLogger(__name__)


def audio_span(group, fps, rate: int, n_samples: int, last: bool) -> tuple[int, int]:
    """Sample range carried with a GOP; the final GOP takes any remainder."""
    start = group.keyframe_index * rate * fps.denominator // fps.numerator
    end = (group.keyframe_index + len(group)) * rate * fps.denominator // fps.numerator
    start, end = min(start, n_samples), min(end, n_samples)
    return start, n_samples if last else end


def _encode_key(frame: Frame, cfg: Config) -> bytes:
    if cfg.intra_command:
        return bc.external_codec([frame], "intra", cfg.keyframe_qp, cfg.intra_command).to_bytes()
    return bc.encode_intra(frame, cfg.keyframe_qp).to_bytes()


def _encode_aux(frames: list[Frame], cfg: Config) -> bytes:
    if not frames:
        return b""
    low = [bc.downsample(f, cfg.downsample_factor) for f in frames]
    if cfg.lowdelay_command:
        chunks = [bc.external_codec(low, "lowdelay", cfg.aux_qp, cfg.lowdelay_command)]
    else:
        chunks = bc.encode_lowdelay(low, cfg.aux_qp)
    return pack_chunk_list([c.to_bytes() for c in chunks])


def encode_stream(seq: FrameSequence, clip: AudioClip | None, cfg: Config = Config()) -> bytes:
    if clip is None or len(clip) == 0:
        raise AudioError("audio required: the decoder's lip syncer is driven by the audio track")
    cfg.qp  # validates QP/factor combination and logs the aux-QP warning
    frames = [to_yuv420(f) for f in seq]
    plan = partition(len(frames), cfg.gop_size)
    audio = resample_audio(clip, TARGET_RATE) if clip.sample_rate != TARGET_RATE else clip
    if audio.duration < seq.duration - 1e-9:
        log.warning("audio (%.3f s) is shorter than video (%.3f s); trailing windows are clamped",
                    audio.duration, seq.duration)
    pcm = np.ascontiguousarray(audio.samples, dtype="<i2")
    keys, auxes, sounds = [], [], []
    for g, group in enumerate(plan.groups):
        keys.append(_encode_key(frames[group.keyframe_index], cfg))
        auxes.append(_encode_aux([frames[i] for i in group.target_indices], cfg))
        a, b = audio_span(group, seq.fps, TARGET_RATE, len(pcm), g == len(plan.groups) - 1)
        sounds.append(pcm[a:b].tobytes())
    meta = StreamMeta(seq.width, seq.height, seq.fps, len(frames), cfg.gop_size, cfg.keyframe_qp,
                      cfg.aux_qp, cfg.downsample_factor, TARGET_RATE, AUDIO_PCM16)
    return mux(plan, keys, auxes, sounds, meta)


# --- decoding ------------------------------------------------------------------------------


@dataclass(eq=False)
class DecoderNets:
    animator: AnimatorNets
    lipsync: LipSyncNets

    @classmethod
    def build(cls, cfg: Config, width: int, height: int) -> "DecoderNets":
        return cls(AnimatorNets(cfg.animator(width, height)), LipSyncNets(cfg.lipsync(width, height)))


@dataclass(eq=False)
class DecodeResult:
    frames: FrameSequence
    keyframes: dict[int, Frame] = field(default_factory=dict)  # intra decodes by frame index
    tr_frames: list[Frame] = field(default_factory=list)  # Stage I outputs in target order
    stream: Stream | None = None


def _decode_key(data: bytes, cfg: Config) -> Frame:
    chunk = bc.CodedChunk.from_bytes(data)
    if chunk.kind is bc.ChunkKind.EXTERNAL_INTRA:
        if not cfg.intra_decode_command:
            raise bc.CodecError("stream uses an external intra codec but no intra_decode_command is configured")
        return bc.external_decode(chunk, cfg.intra_decode_command)[0]
    return bc.decode_intra(chunk)


def _decode_aux(data: bytes, cfg: Config) -> list[Frame]:
    chunks = [bc.CodedChunk.from_bytes(c) for c in unpack_chunk_list(data)]
    if chunks and chunks[0].kind is bc.ChunkKind.EXTERNAL_LOWDELAY:
        if not cfg.lowdelay_decode_command:
            raise bc.CodecError("stream uses an external low-delay codec but no lowdelay_decode_command is configured")
        return [f for c in chunks for f in bc.external_decode(c, cfg.lowdelay_decode_command)]
    return bc.decode_lowdelay(chunks)


def stream_audio(stream: Stream) -> AudioClip:
    if stream.meta.audio_codec != AUDIO_PCM16:
        raise ContainerError("only PCM16 audio chunks can be decoded by the built-in decoder")
    samples = np.frombuffer(b"".join(stream.audio_chunks), dtype="<i2").astype(np.int16)
    return AudioClip(samples, stream.meta.audio_rate)


def decode_stream(data: bytes, cfg: Config = Config(), nets: DecoderNets | None = None) -> DecodeResult:
    stream = demux(data)
    meta = stream.meta
    nets = nets or DecoderNets.build(cfg, meta.width, meta.height)
    out: list[Frame | None] = [None] * meta.total_frames
    result = DecodeResult(FrameSequence([], meta.fps), stream=stream)
    feats = None
    if any(g.target_indices for g in stream.plan.groups):
        clip = stream_audio(stream)
        if len(clip) < 1:
            raise AudioError("audio required: stream carries no audio samples for its target frames")
        feats = clip_features(clip, nets.lipsync.audio_encoder)
    for g, group in enumerate(stream.plan.groups):
        key = _decode_key(stream.key_chunks[g], cfg)
        if key.dims != (meta.width, meta.height):
            raise ContainerError(f"GOP {g}: keyframe is {key.dims}, header says {(meta.width, meta.height)}")
        out[group.keyframe_index] = key
        result.keyframes[group.keyframe_index] = key
        if not group.target_indices:
            continue
        aux = _decode_aux(stream.aux_chunks[g], cfg)
        if len(aux) != len(group.target_indices):
            raise ContainerError(f"GOP {g}: {len(aux)} auxiliary frames for {len(group.target_indices)} targets")
        sr = [facial_sr(a, key.dims, nets.animator.enhance) for a in aux]
        tr = stage1_reconstruct(key, FrameSequence(sr, meta.fps), nets.animator)
        final = stage2_reconstruct(tr, feats, nets.lipsync, frame_indices=group.target_indices, fps=float(meta.fps))
        for i, f in zip(group.target_indices, final):
            out[i] = to_yuv420(f)
        result.tr_frames.extend(to_yuv420(f) for f in tr)
    result.frames = FrameSequence(out, meta.fps)
    return result


def load_lipsync_weights(nets: DecoderNets, path) -> None:
    nets.lipsync.load_state_dict(torch.load(path, weights_only=True))


def save_lipsync_weights(nets: DecoderNets, path) -> None:
    torch.save(nets.lipsync.state_dict(), path)
