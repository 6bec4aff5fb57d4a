"""Raw media containers: YUV4MPEG2 video, PCM16 WAV audio, PGM/PPM stills.

Frames carry 8-bit planes. Y'CbCr <-> RGB conversion uses the BT.601
full-range matrix.
"""

from __future__ import annotations

import enum
import wave
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np


class MediaError(ValueError):
    pass


class ColorTag(str, enum.Enum):
    YUV420 = "yuv420"
    YUV444 = "yuv444"
    RGB = "rgb"


def plane_shapes(width: int, height: int, color: ColorTag) -> list[tuple[int, int]]:
    """(rows, cols) of each plane for the given layout."""
    if color is ColorTag.YUV420:
        ch, cw = (height + 1) // 2, (width + 1) // 2
        return [(height, width), (ch, cw), (ch, cw)]
    return [(height, width)] * 3


@dataclass(frozen=True, eq=False)
class Frame:
    width: int
    height: int
    planes: tuple[np.ndarray, ...]
    color: ColorTag = ColorTag.YUV420

    def __post_init__(self):
        color = ColorTag(self.color)
        object.__setattr__(self, "color", color)
        shapes = plane_shapes(self.width, self.height, color)
        if len(self.planes) != len(shapes):
            raise MediaError(f"{color.value} frame needs {len(shapes)} planes, got {len(self.planes)}")
        planes = []
        for p, shape in zip(self.planes, shapes):
            p = np.asarray(p)
            if p.shape != shape:
                raise MediaError(f"plane shape {p.shape} does not match {shape} for {self.width}x{self.height}")
            if p.dtype != np.uint8:
                if p.size and (p.min() < 0 or p.max() > 255):
                    raise MediaError("samples outside [0, 255]")
                p = p.astype(np.uint8)
            p = np.ascontiguousarray(p)
            p.setflags(write=False)
            planes.append(p)
        object.__setattr__(self, "planes", tuple(planes))

    @classmethod
    def from_rgb(cls, rgb: np.ndarray) -> "Frame":
        """Build an RGB frame from an (H, W, 3) uint8 array."""
        rgb = np.asarray(rgb)
        h, w = rgb.shape[:2]
        return cls(w, h, tuple(rgb[..., c] for c in range(3)), ColorTag.RGB)

    def to_array(self) -> np.ndarray:
        """Stack full-resolution planes as (H, W, 3); 4:2:0 is rejected."""
        if self.color is ColorTag.YUV420:
            raise MediaError("to_array needs a 4:4:4 or RGB frame")
        return np.stack(self.planes, axis=-1)

    @property
    def dims(self) -> tuple[int, int]:
        return self.width, self.height

    def same_as(self, other: "Frame") -> bool:
        return (
            self.dims == other.dims
            and self.color is other.color
            and all(np.array_equal(a, b) for a, b in zip(self.planes, other.planes))
        )

    def tobytes(self) -> bytes:
        return b"".join(p.tobytes() for p in self.planes)


def constant_frame(width: int, height: int, value=(128, 128, 128), color=ColorTag.YUV420) -> Frame:
    color = ColorTag(color)
    if np.isscalar(value):
        value = (value,) * 3
    planes = tuple(np.full(s, v, dtype=np.uint8) for s, v in zip(plane_shapes(width, height, color), value))
    return Frame(width, height, planes, color)


_DEFAULT_Y4M_PARAMS = ("Ip", "A1:1", "C420jpeg")


@dataclass(eq=False)
class FrameSequence:
    frames: list[Frame]
    fps: Fraction = Fraction(25)
    # Header tokens other than W/H/F, in file order; kept for byte-exact rewrites.
    y4m_params: tuple[str, ...] = field(default=_DEFAULT_Y4M_PARAMS)

    def __post_init__(self):
        self.fps = Fraction(self.fps)
        if self.fps <= 0:
            raise MediaError("fps must be positive")
        self.frames = list(self.frames)
        if self.frames:
            first = self.frames[0]
            for f in self.frames[1:]:
                if f.dims != first.dims or f.color is not first.color:
                    raise MediaError("all frames must share dimensions and color tag")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def duration(self) -> float:
        return len(self.frames) / float(self.fps)

    def derive(self, frames: Sequence[Frame]) -> "FrameSequence":
        return FrameSequence(list(frames), self.fps, self.y4m_params)


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise MediaError("sample_rate must be positive")
        s = np.asarray(self.samples)
        if s.ndim != 1:
            raise MediaError("AudioClip is mono; downmix before constructing")
        object.__setattr__(self, "samples", s.astype(np.int16, copy=False))

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


# --- YUV4MPEG2 -------------------------------------------------------------

_Y4M_MAGIC = b"YUV4MPEG2"
_Y4M_420 = {"420", "420jpeg", "420paldv", "420mpeg2"}


def _parse_fps(token: str) -> Fraction:
    try:
        num, den = token.split(":")
        return Fraction(int(num), int(den))
    except (ValueError, ZeroDivisionError) as exc:
        raise MediaError(f"malformed frame rate {token!r}") from exc


def parse_y4m(data: bytes) -> FrameSequence:
    nl = data.find(b"\n")
    if not data.startswith(_Y4M_MAGIC + b" ") or nl < 0:
        raise MediaError("malformed header: missing YUV4MPEG2 signature")
    tokens = data[len(_Y4M_MAGIC) + 1 : nl].decode("ascii").split(" ")
    width = height = None
    fps = None
    params = []
    for tok in tokens:
        if not tok:
            raise MediaError("malformed header: empty token")
        key, val = tok[0], tok[1:]
        if key == "W":
            width = int(val)
        elif key == "H":
            height = int(val)
        elif key == "F":
            fps = _parse_fps(val)
        else:
            if key == "C" and val not in _Y4M_420:
                raise MediaError(f"unsupported chroma tag C{val}; only 4:2:0 is accepted")
            params.append(tok)
    if not width or not height or fps is None:
        raise MediaError("malformed header: W, H and F are required")
    if fps <= 0:
        raise MediaError("malformed header: frame rate must be positive")

    frame_size = sum(r * c for r, c in plane_shapes(width, height, ColorTag.YUV420))
    shapes = plane_shapes(width, height, ColorTag.YUV420)
    frames = []
    pos = nl + 1
    while pos < len(data):
        end = data.find(b"\n", pos)
        if end < 0 or not data.startswith(b"FRAME", pos):
            raise MediaError(f"malformed frame header at byte {pos}")
        pos = end + 1
        if pos + frame_size > len(data):
            raise MediaError(f"truncated frame payload in frame {len(frames)}")
        buf = np.frombuffer(data, dtype=np.uint8, count=frame_size, offset=pos)
        planes, off = [], 0
        for r, c in shapes:
            planes.append(buf[off : off + r * c].reshape(r, c))
            off += r * c
        frames.append(Frame(width, height, tuple(planes), ColorTag.YUV420))
        pos += frame_size
    return FrameSequence(frames, fps, tuple(params))


def read_y4m(path) -> FrameSequence:
    return parse_y4m(Path(path).read_bytes())


def format_y4m(seq: FrameSequence, width: int | None = None, height: int | None = None) -> bytes:
    if seq.frames:
        width, height = seq.width, seq.height
        if seq.frames[0].color is not ColorTag.YUV420:
            raise MediaError("Y4M output requires yuv420 frames")
    if width is None or height is None:
        raise MediaError("empty sequence needs explicit dimensions")
    fps = seq.fps
    head = f"YUV4MPEG2 W{width} H{height} F{fps.numerator}:{fps.denominator}"
    if seq.y4m_params:
        head += " " + " ".join(seq.y4m_params)
    out = [head.encode("ascii") + b"\n"]
    for f in seq.frames:
        out.append(b"FRAME\n")
        out.append(f.tobytes())
    return b"".join(out)


def write_y4m(path, seq: FrameSequence) -> None:
    Path(path).write_bytes(format_y4m(seq))


# --- WAV ---------------------------------------------------------------------


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def downmix(channels: np.ndarray) -> np.ndarray:
    """Average interleaved channels (N, C) to mono, rounding half away from zero."""
    if channels.shape[1] == 1:
        return channels[:, 0].astype(np.int16)
    total = channels.astype(np.int64).sum(axis=1)
    n = channels.shape[1]
    # exact integer round-half-away of total / n
    q = (2 * np.abs(total) + n) // (2 * n)
    return (np.sign(total) * q).astype(np.int16)


def read_wav(path) -> AudioClip:
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise MediaError(f"only PCM 16-bit is supported, got {8 * w.getsampwidth()}-bit")
            nch, rate, nframes = w.getnchannels(), w.getframerate(), w.getnframes()
            raw = w.readframes(nframes)
    except wave.Error as exc:
        raise MediaError(f"unsupported WAV: {exc}") from exc
    except EOFError as exc:
        raise MediaError("truncated WAV header") from exc
    if len(raw) != nframes * nch * 2:
        raise MediaError(f"truncated data chunk: expected {nframes * nch * 2} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<i2").reshape(-1, nch)
    return AudioClip(downmix(data), rate)


def write_wav(path, clip: AudioClip) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(clip.sample_rate))
        w.writeframes(clip.samples.astype("<i2").tobytes())


# --- PGM / PPM -----------------------------------------------------------------


def write_pnm(path, frame: Frame, plane: int | None = None) -> None:
    """Write an RGB frame as P6, or a single plane as P5."""
    if plane is not None:
        img = frame.planes[plane]
        magic = b"P5"
    else:
        if frame.color is not ColorTag.RGB:
            frame = yuv_to_rgb(frame)
        img = frame.to_array()
        magic = b"P6"
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise MediaError("only 8-bit P5/P6 images are supported")
    ch = 3 if magic == b"P6" else 1
    n = w * h * ch
    if len(data) - pos < n:
        raise MediaError("truncated PNM payload")
    img = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
    return img.reshape(h, w, ch) if ch == 3 else img.reshape(h, w)


# --- color conversion ------------------------------------------------------------

# BT.601; full range by default, studio (16-235/240) range on request
_KR, _KB = 0.299, 0.114
_KG = 1.0 - _KR - _KB
_RGB2YUV = np.array(
    [
        [_KR, _KG, _KB],
        [-0.5 * _KR / (1 - _KB), -0.5 * _KG / (1 - _KB), 0.5],
        [0.5, -0.5 * _KG / (1 - _KR), -0.5 * _KB / (1 - _KR)],
    ]
)
_YUV2RGB = np.linalg.inv(_RGB2YUV)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def upsample_chroma(frame: Frame) -> Frame:
    """4:2:0 -> 4:4:4 by sample replication."""
    if frame.color is not ColorTag.YUV420:
        return frame
    h, w = frame.height, frame.width
    planes = [frame.planes[0]]
    for p in frame.planes[1:]:
        planes.append(np.repeat(np.repeat(p, 2, axis=0), 2, axis=1)[:h, :w])
    return Frame(w, h, tuple(planes), ColorTag.YUV444)


def subsample_chroma(frame: Frame) -> Frame:
    """4:4:4 -> 4:2:0 by 2x2 averaging (edge-replicated for odd sizes)."""
    if frame.color is ColorTag.YUV420:
        return frame
    if frame.color is not ColorTag.YUV444:
        raise MediaError("subsample_chroma expects a yuv444 frame")
    h, w = frame.height, frame.width
    planes = [frame.planes[0]]
    for p in frame.planes[1:]:
        p = np.pad(p.astype(np.float64), ((0, h % 2), (0, w % 2)), mode="edge")
        avg = (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2]) / 4.0
        planes.append(_quantize(avg))
    return Frame(w, h, tuple(planes), ColorTag.YUV420)


def _range_scale(full_range: bool):
    """Per-component (scale, offset) mapping normalized Y'PbPr to 8-bit codes."""
    if full_range:
        return np.array([255.0, 255.0, 255.0]), np.array([0.0, 128.0, 128.0])
    return np.array([219.0, 224.0, 224.0]), np.array([16.0, 128.0, 128.0])


def yuv_to_rgb(frame: Frame, full_range: bool = True) -> Frame:
    if frame.color is ColorTag.RGB:
        raise MediaError("frame is already RGB")
    f = upsample_chroma(frame)
    scale, offset = _range_scale(full_range)
    yuv = (np.stack(f.planes, axis=-1).astype(np.float64) - offset) / scale
    rgb = yuv @ _YUV2RGB.T * 255.0
    return Frame.from_rgb(_quantize(rgb))


def rgb_to_yuv(frame: Frame, color: ColorTag = ColorTag.YUV420, full_range: bool = True) -> Frame:
    if frame.color is not ColorTag.RGB:
        raise MediaError(f"expected an RGB frame, got {frame.color.value}")
    rgb = frame.to_array().astype(np.float64) / 255.0
    scale, offset = _range_scale(full_range)
    q = _quantize(rgb @ _RGB2YUV.T * scale + offset)
    out = Frame(frame.width, frame.height, tuple(q[..., c] for c in range(3)), ColorTag.YUV444)
    return subsample_chroma(out) if ColorTag(color) is ColorTag.YUV420 else out


def to_rgb(frame: Frame) -> Frame:
    return frame if frame.color is ColorTag.RGB else yuv_to_rgb(frame)


def to_yuv420(frame: Frame) -> Frame:
    if frame.color is ColorTag.RGB:
        return rgb_to_yuv(frame, ColorTag.YUV420)
    return subsample_chroma(frame)
