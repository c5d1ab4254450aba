"""Grayscale baseline-JPEG transform path without entropy coding.

Images are compressed to quantized 8x8 block DCT coefficients and decompressed
back to *real-valued* pixels: the inverse transform is neither rounded nor
clamped, so sub-integer embedding traces survive to the detector input.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ndtensor import ContractError

# Annex K luminance table
BASE_LUMINANCE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)


def dct_matrix(n=8):
    """Orthonormal DCT-II matrix ``C`` so that ``C @ x`` is the 1-D transform."""
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    c = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * m + 1) / (2 * n))
    c[0] /= np.sqrt(2.0)
    return c


_C8 = dct_matrix(8)


class PGMError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ContainerError(ValueError):
    pass


@dataclass
class CoefficientImage:
    coeffs: np.ndarray  # (h/8, w/8, 8, 8) int
    qtable: np.ndarray  # (8, 8) int

    @property
    def h(self):
        return self.coeffs.shape[0] * 8

    @property
    def w(self):
        return self.coeffs.shape[1] * 8

    def copy(self):
        return CoefficientImage(self.coeffs.copy(), self.qtable.copy())


def quality_to_qtable(qf):
    if not 1 <= int(qf) <= 100 or int(qf) != qf:
        raise ContractError(f"quality factor must be an integer in 1..100, got {qf}")
    qf = int(qf)
    # integer arithmetic as in the IJG reference encoder
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    q = (BASE_LUMINANCE * scale + 50) // 100
    return np.clip(q, 1, 255)


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def blockify(pixels):
    h, w = pixels.shape
    return pixels.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def unblockify(blocks):
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)


def block_dct(blocks):
    return _C8 @ blocks @ _C8.T


def block_idct(blocks):
    return _C8.T @ blocks @ _C8


def compress(img, qtable):
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] % 8 or img.shape[1] % 8:
        raise ContractError(f"image dimensions must be multiples of 8, got {img.shape}")
    qtable = np.asarray(qtable)
    blocks = block_dct(blockify(img.astype(np.float64) - 128.0))
    coeffs = round_half_away(blocks / qtable).astype(np.int32)
    return CoefficientImage(coeffs, qtable.astype(np.int64).copy())


def decompress_real(ci):
    """Dequantize and inverse-transform; no rounding, no clamping."""
    blocks = block_idct(ci.coeffs.astype(np.float64) * ci.qtable)
    return unblockify(blocks) + 128.0


def to_pixels(real):
    """Round and clamp a real-valued decompression to 8-bit pixels."""
    return np.clip(round_half_away(real), 0, 255).astype(np.uint8)


def recompress(ci):
    """One pixel-domain round trip: decompress, round, clamp, compress again."""
    return compress(to_pixels(decompress_real(ci)), ci.qtable)


def stabilize(ci, max_rounds=64):
    """Recompress until the coefficients stop changing.

    A single round is usually, but not always, a fixpoint: rounding and
    clamping can make a few coefficients wander for several rounds. Returns
    ``(ci, rounds)``; raises ``ContractError`` if no fixpoint is reached.
    """
    for rounds in range(max_rounds + 1):
        nxt = recompress(ci)
        if np.array_equal(nxt.coeffs, ci.coeffs):
            return ci, rounds
        ci = nxt
    raise ContractError(f"no recompression fixpoint within {max_rounds} rounds")


def nonzero_ac_count(ci):
    nz = ci.coeffs != 0
    return int(nz.sum() - nz[:, :, 0, 0].sum())


def crop_to_blocks(pixels):
    h, w = pixels.shape
    return pixels[: h - h % 8, : w - w % 8]


# --------------------------------------------------------------------------
# binary PGM


def _pgm_token(data, pos):
    """Return ``(token, next_pos)`` skipping whitespace and ``#`` comments."""
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PGMError("unexpected end of header", start)
    return data[start:pos], pos


def parse_pgm(data):
    if data[:2] != b"P5":
        raise PGMError(f"not a binary PGM (magic {data[:2]!r})", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _pgm_token(data, pos)
        if not tok.isdigit():
            raise PGMError(f"bad {name} {tok!r}", pos - len(tok))
        fields.append(int(tok))
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise PGMError(f"bad dimensions {w}x{h}", 2)
    if maxval != 255:
        raise PGMError(f"maxval must be 255, got {maxval}", pos)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PGMError("missing whitespace after maxval", pos)
    pos += 1
    if len(data) - pos < w * h:
        raise PGMError(f"truncated raster: need {w * h} bytes, have {len(data) - pos}", pos)
    return np.frombuffer(data, np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def read_pgm(path):
    return parse_pgm(Path(path).read_bytes())


def write_pgm(path, pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
        raise ContractError("pixels must be a 2-D array of values in [0, 255]")
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.astype(np.uint8).tobytes())


# --------------------------------------------------------------------------
# STGC coefficient container

STGC_MAGIC = b"STGC"
STGC_VERSION = 1
_STGC_HEADER = struct.Struct("<4sHII")


def dumps_coefficients(ci):
    if ci.coeffs.min(initial=0) < -32768 or ci.coeffs.max(initial=0) > 32767:
        raise ContainerError("coefficient outside int16 range")
    if ci.qtable.min() < 1 or ci.qtable.max() > 255:
        raise ContainerError("quantization table entries must be in 1..255")
    return (
        _STGC_HEADER.pack(STGC_MAGIC, STGC_VERSION, ci.h, ci.w)
        + ci.qtable.astype(np.uint8).tobytes()
        + ci.coeffs.astype("<i2").tobytes()
    )


def loads_coefficients(data):
    if len(data) < _STGC_HEADER.size + 64:
        raise ContainerError("truncated STGC header")
    magic, version, h, w = _STGC_HEADER.unpack_from(data)
    if magic != STGC_MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != STGC_VERSION:
        raise ContainerError(f"unsupported STGC version {version}")
    if h % 8 or w % 8 or h == 0 or w == 0:
        raise ContainerError(f"bad dimensions {h}x{w}")
    off = _STGC_HEADER.size
    qtable = np.frombuffer(data, np.uint8, 64, off).reshape(8, 8).astype(np.int64)
    off += 64
    count = h * w
    if len(data) - off != 2 * count:
        raise ContainerError(f"coefficient payload is {len(data) - off} bytes, expected {2 * count}")
    coeffs = np.frombuffer(data, "<i2", count, off).reshape(h // 8, w // 8, 8, 8).astype(np.int32)
    return CoefficientImage(coeffs, qtable)


def save_coefficients(path, ci):
    Path(path).write_bytes(dumps_coefficients(ci))


def load_coefficients(path):
    return loads_coefficients(Path(path).read_bytes())
