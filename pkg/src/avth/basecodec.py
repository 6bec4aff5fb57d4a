"""Stand-in base codec for keyframes (intra) and auxiliary frames (low-delay).

Intra coding: level shift, 8x8 orthonormal DCT-II, uniform quantization
with round-half-away-from-zero, zigzag scan, (run, level) pairs per block
and ue/se exp-Golomb words. Low-delay coding sends frame 0 intra and each
later frame as a biased residual against the previous reconstruction.

An external reference encoder can be plugged in via command templates.
"""

from __future__ import annotations

import enum
import logging
import shlex
import struct
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import expgolomb
from .expgolomb import BitstreamError
from .media import ColorTag, Frame, FrameSequence, MediaError, format_y4m, parse_y4m, plane_shapes

log = logging.getLogger(__name__)

BLOCK = 8
CHUNK_HEADER = struct.Struct("<BBHHBB")


class CodecError(ValueError):
    pass


class ChunkKind(enum.IntEnum):
    INTRA = 0
    LOWDELAY = 1
    EXTERNAL_INTRA = 2
    EXTERNAL_LOWDELAY = 3


@dataclass(frozen=True)
class QpConfig:
    keyframe_qp: int = 30
    aux_qp: int = 40
    downsample_factor: int = 4

    def __post_init__(self):
        for name in ("keyframe_qp", "aux_qp"):
            qp = getattr(self, name)
            if not 0 <= qp <= 51:
                raise CodecError(f"{name} must be in 0..51, got {qp}")
        if self.downsample_factor < 1:
            raise CodecError("downsample_factor must be >= 1")
        if self.aux_qp < self.keyframe_qp:
            log.warning("aux_qp %d is below keyframe_qp %d; keyframes usually get the finer quantizer",
                        self.aux_qp, self.keyframe_qp)


@dataclass(frozen=True, eq=False)
class CodedChunk:
    payload: bytes
    kind: ChunkKind
    width: int
    height: int
    qp: int
    pad_right: int = 0
    pad_bottom: int = 0

    @property
    def source_dims(self) -> tuple[int, int]:
        return self.width, self.height

    def to_bytes(self) -> bytes:
        head = CHUNK_HEADER.pack(int(self.kind), self.qp, self.width, self.height, self.pad_right, self.pad_bottom)
        return head + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodedChunk":
        if len(data) < CHUNK_HEADER.size:
            raise CodecError("chunk shorter than its header")
        kind, qp, w, h, pr, pb = CHUNK_HEADER.unpack_from(data)
        try:
            kind = ChunkKind(kind)
        except ValueError as exc:
            raise CodecError(f"unknown chunk kind {kind}") from exc
        return cls(bytes(data[CHUNK_HEADER.size :]), kind, w, h, qp, pr, pb)


def quant_step(qp: int) -> float:
    if not 0 <= qp <= 51:
        raise CodecError(f"qp must be in 0..51, got {qp}")
    return 2.0 ** ((qp - 4) / 6.0)


def _dct_matrix(n: int = BLOCK) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    m[0] /= np.sqrt(2.0)
    return m


DCT = _dct_matrix()


def _zigzag_order(n: int = BLOCK) -> np.ndarray:
    cells = sorted(((r, c) for r in range(n) for c in range(n)),
                   key=lambda rc: (rc[0] + rc[1], rc[1] if (rc[0] + rc[1]) % 2 == 0 else rc[0]))
    return np.array([r * n + c for r, c in cells])


ZIGZAG = _zigzag_order()
UNZIGZAG = np.argsort(ZIGZAG)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _padded(n: int) -> int:
    return -(-n // BLOCK) * BLOCK


def _to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ph, pw = _padded(h), _padded(w)
    p = np.pad(plane, ((0, ph - h), (0, pw - w)), mode="edge")
    return p.reshape(ph // BLOCK, BLOCK, pw // BLOCK, BLOCK).transpose(0, 2, 1, 3).reshape(-1, BLOCK, BLOCK)


def _from_blocks(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    ph, pw = _padded(h), _padded(w)
    p = blocks.reshape(ph // BLOCK, pw // BLOCK, BLOCK, BLOCK).transpose(0, 2, 1, 3).reshape(ph, pw)
    return p[:h, :w]


def _quantize_plane(plane: np.ndarray, step: float) -> np.ndarray:
    blocks = _to_blocks(plane.astype(np.float64) - 128.0)
    coeffs = DCT @ blocks @ DCT.T
    q = round_half_away(coeffs / step).astype(np.int64)
    return q.reshape(-1, BLOCK * BLOCK)[:, ZIGZAG]


def _dequantize_plane(levels: np.ndarray, step: float, h: int, w: int) -> np.ndarray:
    coeffs = (levels[:, UNZIGZAG] * step).reshape(-1, BLOCK, BLOCK)
    pix = DCT.T @ coeffs @ DCT + 128.0
    return np.clip(round_half_away(_from_blocks(pix, h, w)), 0, 255).astype(np.uint8)


def _block_symbols(levels: np.ndarray) -> np.ndarray:
    """Per block: ue(nonzero count), then (ue(run), se(level)) per nonzero in scan order."""
    nz = levels != 0
    counts = nz.sum(axis=1)
    blk, pos = np.nonzero(nz)
    vals = levels[blk, pos]
    first = np.ones(len(blk), dtype=bool)
    first[1:] = blk[1:] != blk[:-1]
    prev = np.where(first, -1, np.concatenate([[-1], pos[:-1]]))
    runs = pos - prev - 1

    nblocks = len(levels)
    out = np.empty(nblocks + 2 * len(blk), dtype=np.int64)
    block_start = np.arange(nblocks) + 2 * (np.cumsum(counts) - counts)
    out[block_start] = counts
    # rank of each nonzero within its block
    rank = np.arange(len(blk)) - (np.cumsum(counts) - counts)[blk]
    pair = block_start[blk] + 1 + 2 * rank
    out[pair] = runs
    out[pair + 1] = expgolomb.signed_to_code(vals)
    return out


def _parse_blocks(reader: expgolomb.SymbolReader, nblocks: int) -> np.ndarray:
    levels = np.zeros((nblocks, BLOCK * BLOCK), dtype=np.int64)
    for b in range(nblocks):
        (count,) = reader.take()
        if count > BLOCK * BLOCK:
            raise BitstreamError(f"block {b}: {count} nonzero coefficients")
        if not count:
            continue
        words = reader.take(2 * count)
        pos = -1
        for run, code in zip(words[0::2], words[1::2]):
            pos += run + 1
            if pos >= BLOCK * BLOCK:
                raise BitstreamError(f"block {b}: run past end of block")
            levels[b, pos] = code
    nonzero = levels != 0
    levels[nonzero] = expgolomb.code_to_signed(levels[nonzero])
    return levels


def _check_yuv420(frame: Frame):
    if frame.color is not ColorTag.YUV420:
        raise CodecError(f"base codec codes yuv420 frames, got {frame.color.value}")


def encode_intra(frame: Frame, qp: int, kind: ChunkKind = ChunkKind.INTRA) -> CodedChunk:
    _check_yuv420(frame)
    step = quant_step(qp)
    symbols = [_block_symbols(_quantize_plane(p, step)) for p in frame.planes]
    payload = expgolomb.encode_ue(np.concatenate(symbols))
    return CodedChunk(payload, kind, frame.width, frame.height, qp,
                      _padded(frame.width) - frame.width, _padded(frame.height) - frame.height)


def decode_intra(chunk: CodedChunk, expect_dims: tuple[int, int] | None = None) -> Frame:
    if chunk.kind not in (ChunkKind.INTRA, ChunkKind.LOWDELAY):
        raise CodecError(f"built-in decoder cannot decode {chunk.kind.name} chunks")
    if expect_dims is not None and tuple(expect_dims) != chunk.source_dims:
        raise CodecError(f"dimension mismatch: chunk is {chunk.source_dims}, expected {tuple(expect_dims)}")
    w, h = chunk.width, chunk.height
    if w == 0 or h == 0:
        raise CodecError("chunk has empty dimensions")
    step = quant_step(chunk.qp)
    codes, _ = expgolomb.decode_ue(chunk.payload)
    reader = expgolomb.SymbolReader(codes)
    planes = []
    for r, c in plane_shapes(w, h, ColorTag.YUV420):
        nblocks = (_padded(r) // BLOCK) * (_padded(c) // BLOCK)
        planes.append(_dequantize_plane(_parse_blocks(reader, nblocks), step, r, c))
    if reader.pos != len(codes):
        raise BitstreamError("corrupt payload: trailing symbols after last block")
    return Frame(w, h, tuple(planes), ColorTag.YUV420)


def _residual(frame: Frame, ref: Frame) -> Frame:
    planes = tuple(np.clip(a.astype(np.int16) - b + 128, 0, 255).astype(np.uint8)
                   for a, b in zip(frame.planes, ref.planes))
    return Frame(frame.width, frame.height, planes, frame.color)


def _apply_residual(res: Frame, ref: Frame) -> Frame:
    planes = tuple(np.clip(a.astype(np.int16) + b - 128, 0, 255).astype(np.uint8)
                   for a, b in zip(res.planes, ref.planes))
    return Frame(res.width, res.height, planes, res.color)


def encode_lowdelay(frames, qp: int) -> list[CodedChunk]:
    frames = list(frames)
    if not frames:
        raise CodecError("low-delay coding needs at least one frame")
    chunks = [encode_intra(frames[0], qp)]
    recon = decode_intra(chunks[0])
    for f in frames[1:]:
        chunk = encode_intra(_residual(f, recon), qp, ChunkKind.LOWDELAY)
        chunks.append(chunk)
        recon = _apply_residual(decode_intra(chunk), recon)
    return chunks


def decode_lowdelay(chunks) -> list[Frame]:
    out = []
    recon = None
    for i, chunk in enumerate(chunks):
        if chunk.kind is ChunkKind.INTRA:
            recon = decode_intra(chunk)
        elif chunk.kind is ChunkKind.LOWDELAY:
            if recon is None:
                raise CodecError(f"chunk {i}: residual chunk without a preceding intra chunk")
            recon = _apply_residual(decode_intra(chunk, recon.dims), recon)
        else:
            raise CodecError(f"chunk {i}: unexpected kind {chunk.kind.name}")
        out.append(recon)
    return out


# --- resampling ------------------------------------------------------------------


def _cubic_weights(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom (a = -0.5) weights for taps at offsets -1, 0, 1, 2."""
    a = -0.5
    d = np.stack([1 + t, t, 1 - t, 2 - t], axis=-1)
    near = ((a + 2) * d - (a + 3)) * d * d + 1
    far = ((a * d - 5 * a) * d + 8 * a) * d - 4 * a
    return np.where(d <= 1, near, far)


def _resize_axis(x: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = x.shape[axis]
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(pos).astype(np.int64)
    w = _cubic_weights(pos - base)
    idx = np.clip(base[:, None] + np.arange(-1, 3)[None, :], 0, n_in - 1)
    x = np.moveaxis(x, axis, 0)
    out = np.einsum("ok,ok...->o...", w, x[idx])
    return np.moveaxis(out, 0, axis)


def resize_plane(plane: np.ndarray, rows: int, cols: int) -> np.ndarray:
    p = plane.astype(np.float64)
    p = _resize_axis(p, rows, 0)
    p = _resize_axis(p, cols, 1)
    return p


def downsample(frame: Frame, factor: int) -> Frame:
    if factor < 1:
        raise CodecError("downsample factor must be >= 1")
    if factor == 1:
        return frame
    if frame.width % factor or frame.height % factor:
        raise CodecError(f"{frame.width}x{frame.height} is not divisible by {factor}")
    w, h = frame.width // factor, frame.height // factor
    planes = []
    for p, (r, c) in zip(frame.planes, plane_shapes(w, h, frame.color)):
        src = p.astype(np.float64)
        f = p.shape[0] // r if r else factor
        if p.shape[0] % r or p.shape[1] % c:
            raise CodecError(f"plane {p.shape} is not divisible by {factor}")
        box = src.reshape(r, f, c, p.shape[1] // c).mean(axis=(1, 3))
        planes.append(np.clip(round_half_away(box), 0, 255).astype(np.uint8))
    return Frame(w, h, tuple(planes), frame.color)


def resize(frame: Frame, width: int, height: int) -> Frame:
    """Catmull-Rom bicubic resize of every plane to the target frame size."""
    if (width, height) == frame.dims:
        return frame
    planes = []
    for p, (r, c) in zip(frame.planes, plane_shapes(width, height, frame.color)):
        planes.append(np.clip(round_half_away(resize_plane(p, r, c)), 0, 255).astype(np.uint8))
    return Frame(width, height, tuple(planes), frame.color)


def upsample(frame: Frame, factor: int) -> Frame:
    if factor < 1:
        raise CodecError("upsample factor must be >= 1")
    return resize(frame, frame.width * factor, frame.height * factor)


# --- external encoder hook ----------------------------------------------------------


class ExternalCodecError(CodecError):
    pass


def _run_template(template: str, mapping: dict[str, str]) -> list[str]:
    for key in ("input", "output"):
        if "{" + key + "}" not in template:
            raise ExternalCodecError(f"command template is missing the {{{key}}} placeholder: {template!r}")
    argv = [tok.format(**mapping) for tok in shlex.split(template)]
    try:
        proc = subprocess.run(argv, capture_output=True)
    except OSError as exc:
        raise ExternalCodecError(f"cannot spawn {shlex.join(argv)}: {exc}") from exc
    if proc.returncode != 0:
        raise ExternalCodecError(
            f"{shlex.join(argv)} exited with status {proc.returncode}: {proc.stderr.decode(errors='replace').strip()}"
        )
    return argv


def external_codec(frames, role: str, qp: int, command_template: str) -> CodedChunk:
    """Encode ``frames`` by running an external tool on a temporary Y4M file.

    Placeholders: {input} (Y4M path), {output} (bitstream path), {qp}.
    """
    if "{qp}" not in command_template:
        raise ExternalCodecError(f"command template is missing the {{qp}} placeholder: {command_template!r}")
    kind = {"intra": ChunkKind.EXTERNAL_INTRA, "lowdelay": ChunkKind.EXTERNAL_LOWDELAY}.get(role)
    if kind is None:
        raise ExternalCodecError(f"unknown role {role!r}")
    seq = frames if isinstance(frames, FrameSequence) else FrameSequence(list(frames))
    if not seq.frames:
        raise ExternalCodecError("no frames to encode")
    with tempfile.TemporaryDirectory(prefix="avth-ext-") as tmp:
        src, dst = Path(tmp) / "input.y4m", Path(tmp) / "output.bin"
        src.write_bytes(format_y4m(seq))
        _run_template(command_template, {"input": str(src), "output": str(dst), "qp": str(qp)})
        payload = dst.read_bytes() if dst.exists() else b""
    if not payload:
        raise ExternalCodecError("external encoder produced no output")
    return CodedChunk(payload, kind, seq.width, seq.height, qp)


def external_decode(chunk: CodedChunk, command_template: str) -> list[Frame]:
    """Run the paired decode template; it must write a Y4M file to {output}."""
    with tempfile.TemporaryDirectory(prefix="avth-ext-") as tmp:
        src, dst = Path(tmp) / "input.bin", Path(tmp) / "output.y4m"
        src.write_bytes(chunk.payload)
        _run_template(command_template, {"input": str(src), "output": str(dst), "qp": str(chunk.qp)})
        if not dst.exists() or dst.stat().st_size == 0:
            raise ExternalCodecError("external decoder produced no output")
        try:
            seq = parse_y4m(dst.read_bytes())
        except MediaError as exc:
            raise ExternalCodecError(f"external decoder output is not valid Y4M: {exc}") from exc
    if seq.frames and seq.frames[0].dims != chunk.source_dims:
        raise ExternalCodecError(f"external decoder returned {seq.frames[0].dims}, expected {chunk.source_dims}")
    return seq.frames
