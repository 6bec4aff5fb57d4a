"""AVTH stream container: fixed header followed by per-GOP keyframe/aux/audio chunks.

All integers are little-endian. See docs/FORMAT.md for an annotated example.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction

from .gop import GopPlan, partition

MAGIC = b"AVTH"
VERSION = 1
HEADER = struct.Struct("<4sBHHHHIHBBBIBI")
LEN = struct.Struct("<I")
PER_GOP_OVERHEAD = 3 * LEN.size

AUDIO_PCM16 = 0
AUDIO_EXTERNAL = 1


class ContainerError(ValueError):
    pass


class BadMagic(ContainerError):
    pass


class VersionMismatch(ContainerError):
    pass


class LengthOverrun(ContainerError):
    def __init__(self, message: str, gop_index: int | None = None):
        super().__init__(message)
        self.gop_index = gop_index


@dataclass(frozen=True)
class StreamMeta:
    width: int
    height: int
    fps: Fraction
    total_frames: int
    gop_size: int
    keyframe_qp: int
    aux_qp: int
    downsample_factor: int
    audio_rate: int
    audio_codec: int = AUDIO_PCM16

    @property
    def gop_count(self) -> int:
        return -(-self.total_frames // self.gop_size) if self.total_frames else 0

    @property
    def duration(self) -> float:
        return self.total_frames / float(self.fps)


@dataclass(eq=False)
class Stream:
    meta: StreamMeta
    plan: GopPlan
    key_chunks: list[bytes] = field(default_factory=list)
    aux_chunks: list[bytes] = field(default_factory=list)
    audio_chunks: list[bytes] = field(default_factory=list)

    def __eq__(self, other):
        return (
            isinstance(other, Stream)
            and self.meta == other.meta
            and self.plan == other.plan
            and self.key_chunks == other.key_chunks
            and self.aux_chunks == other.aux_chunks
            and self.audio_chunks == other.audio_chunks
        )


def mux(plan: GopPlan, key_chunks, aux_chunks, audio_chunks, meta: StreamMeta) -> bytes:
    n = meta.gop_count
    if plan.total_frames != meta.total_frames or plan.gop_size != meta.gop_size:
        raise ContainerError("plan does not match header frame count / GOP size")
    for name, chunks in (("key", key_chunks), ("aux", aux_chunks), ("audio", audio_chunks)):
        if len(chunks) != n:
            raise ContainerError(f"{len(chunks)} {name} chunks for {n} GOPs")
    fps = Fraction(meta.fps)
    try:
        out = [HEADER.pack(MAGIC, VERSION, meta.width, meta.height, fps.numerator, fps.denominator,
                           meta.total_frames, meta.gop_size, meta.keyframe_qp, meta.aux_qp,
                           meta.downsample_factor, meta.audio_rate, meta.audio_codec, n)]
    except struct.error as exc:
        raise ContainerError(f"header field out of range: {exc}") from exc
    for key, aux, audio in zip(key_chunks, aux_chunks, audio_chunks):
        for payload in (key, aux, audio):
            out.append(LEN.pack(len(payload)))
            out.append(bytes(payload))
    return b"".join(out)


def mux_stream(stream: Stream) -> bytes:
    return mux(stream.plan, stream.key_chunks, stream.aux_chunks, stream.audio_chunks, stream.meta)


def demux(data: bytes) -> Stream:
    view = memoryview(data)
    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise BadMagic("bad magic: not an AVTH stream")
    if len(view) < HEADER.size:
        raise LengthOverrun("length overrun: truncated header")
    (_, version, width, height, fps_num, fps_den, total, gop_size, kqp, aqp, factor,
     audio_rate, audio_codec, gop_count) = HEADER.unpack_from(view)
    if version != VERSION:
        raise VersionMismatch(f"version mismatch: stream is v{version}, reader supports v{VERSION}")
    if fps_den == 0 or fps_num == 0:
        raise ContainerError("header has a zero frame rate")
    meta = StreamMeta(width, height, Fraction(fps_num, fps_den), total, gop_size, kqp, aqp, factor,
                      audio_rate, audio_codec)
    if gop_count != meta.gop_count:
        raise ContainerError(f"gop_count {gop_count} inconsistent with {total} frames at GOP {gop_size}")
    plan = partition(total, gop_size)
    pos = HEADER.size
    chunks: list[list[bytes]] = [[], [], []]
    for g in range(gop_count):
        for slot in chunks:
            if pos + LEN.size > len(view):
                raise LengthOverrun(f"length overrun in GOP {g}: missing chunk length", g)
            (n,) = LEN.unpack_from(view, pos)
            pos += LEN.size
            if pos + n > len(view):
                raise LengthOverrun(f"length overrun in GOP {g}: chunk needs {n} bytes, {len(view) - pos} left", g)
            slot.append(bytes(view[pos : pos + n]))
            pos += n
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after last GOP")
    return Stream(meta, plan, *chunks)


def expected_size(key_chunks, aux_chunks, audio_chunks) -> int:
    payload = sum(len(c) for c in (*key_chunks, *aux_chunks, *audio_chunks))
    return HEADER.size + PER_GOP_OVERHEAD * len(key_chunks) + payload


def pack_chunk_list(chunks) -> bytes:
    """Aux payload: u32 count, then (u32 length, bytes) per coded frame. Empty list -> b''."""
    if not chunks:
        return b""
    out = [LEN.pack(len(chunks))]
    for c in chunks:
        out.append(LEN.pack(len(c)))
        out.append(bytes(c))
    return b"".join(out)


def unpack_chunk_list(data: bytes) -> list[bytes]:
    if not data:
        return []
    view = memoryview(data)
    if len(view) < LEN.size:
        raise LengthOverrun("length overrun: aux chunk list header")
    (count,) = LEN.unpack_from(view)
    pos, out = LEN.size, []
    for i in range(count):
        if pos + LEN.size > len(view):
            raise LengthOverrun(f"length overrun: aux frame {i} length")
        (n,) = LEN.unpack_from(view, pos)
        pos += LEN.size
        if pos + n > len(view):
            raise LengthOverrun(f"length overrun: aux frame {i} payload")
        out.append(bytes(view[pos : pos + n]))
        pos += n
    if pos != len(view):
        raise ContainerError("trailing bytes in aux chunk list")
    return out


@dataclass(frozen=True)
class BitrateReport:
    total_bytes: int
    video_bytes: int
    audio_bytes: int
    duration_s: float

    @property
    def kbps_total(self) -> float:
        return kbps(self.total_bytes, self.duration_s)

    @property
    def kbps_video(self) -> float:
        return kbps(self.video_bytes, self.duration_s)

    @property
    def kbps_audio(self) -> float:
        return kbps(self.audio_bytes, self.duration_s)


def kbps(n_bytes: int, duration_s: float) -> float:
    return 8.0 * n_bytes / (1000.0 * duration_s)


def bitrate_report(stream: Stream) -> BitrateReport:
    """Video counts the header, key/aux payloads and their length fields; audio its payload and length field."""
    audio = sum(len(c) for c in stream.audio_chunks) + LEN.size * len(stream.audio_chunks)
    total = expected_size(stream.key_chunks, stream.aux_chunks, stream.audio_chunks)
    return BitrateReport(total, total - audio, audio, stream.meta.duration)
