"""Order-0 exponential-Golomb codes over numpy arrays.

Encoding is vectorized; decoding walks the bit string once.
"""

from __future__ import annotations

import numpy as np


class BitstreamError(ValueError):
    pass


def signed_to_code(v: np.ndarray) -> np.ndarray:
    """se(v) mapping: 0, 1, -1, 2, -2 ... -> 0, 1, 2, 3, 4 ..."""
    v = np.asarray(v, dtype=np.int64)
    return np.where(v > 0, 2 * v - 1, -2 * v)


def code_to_signed(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.int64)
    return np.where(c % 2 == 1, (c + 1) // 2, -(c // 2))


def encode_ue(codes: np.ndarray) -> bytes:
    """Pack unsigned code numbers as ue(v) words, zero-padded to a byte boundary."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size == 0:
        return b""
    if codes.min() < 0:
        raise ValueError("ue(v) needs non-negative values")
    word = codes + 1
    nbits = np.floor(np.log2(word)).astype(np.int64) + 1
    # log2 can be off by one for large words; fix exactly.
    nbits += (word >> nbits) > 0
    nbits -= (word >> (nbits - 1)) == 0
    length = 2 * nbits - 1
    starts = np.cumsum(length) - length
    owner = np.repeat(np.arange(codes.size), length)
    offset = np.arange(owner.size) - starts[owner]
    shift = length[owner] - 1 - offset
    bits = ((word[owner] >> np.minimum(shift, 62)) & 1) * (shift < nbits[owner])
    return np.packbits(bits.astype(np.uint8)).tobytes()


def decode_ue(data: bytes, count: int | None = None) -> tuple[list[int], int]:
    """Read ue(v) words. With ``count`` set, stop after that many.

    Returns (codes, bits consumed). Trailing zero padding (< 8 bits) is
    allowed when ``count`` is None.
    """
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8)).tobytes().translate(_BIT_CHARS).decode("ascii")
    total = len(bits)
    out = []
    pos = 0
    while count is None or len(out) < count:
        one = bits.find("1", pos)
        if one < 0:
            if count is None and total - pos < 8:
                break
            raise BitstreamError(f"exp-Golomb overrun at bit {pos}")
        zeros = one - pos
        end = one + zeros + 1
        if end > total:
            raise BitstreamError(f"exp-Golomb overrun at bit {pos}")
        out.append(int(bits[one:end], 2) - 1)
        pos = end
    return out, pos


_BIT_CHARS = bytes.maketrans(b"\x00\x01", b"01")


class SymbolReader:
    """Sequential cursor over a decoded ue(v) code list."""

    def __init__(self, codes):
        self.codes = codes
        self.pos = 0

    def take(self, n: int = 1) -> list[int]:
        if self.pos + n > len(self.codes):
            raise BitstreamError("exp-Golomb overrun: stream ended early")
        out = self.codes[self.pos : self.pos + n]
        self.pos += n
        return out
