"""Gabor filter residual (GFR-family) features for decompressed JPEG images.

Each kernel of an even-symmetric Gabor bank is applied to the real-valued
decompression; residuals are quantized, truncated to ``[-T, T]`` and
histogrammed separately for every JPEG phase ``(i mod 8, j mod 8)``. The 64
phases are folded to 25 classes using ``a -> min(a, 8 - a)`` on each axis,
which is the symmetry a point-symmetric kernel induces on the block grid.

The selection-channel-aware version weights every residual sample by the
embedding change probability it is exposed to instead of counting it once.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .jpeg import dct_matrix
from .ndtensor import ContractError

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25)
DEFAULT_ORIENTATIONS = 16
DEFAULT_T = 4
SUPPORT = 8
N_CLASSES = 25

_FOLD = np.array([min(a, (8 - a) % 8) for a in range(8)])


@dataclass(frozen=True)
class GaborBank:
    kernels: np.ndarray  # (n_kernels, 8, 8)
    scales: tuple
    n_orient: int

    def __len__(self):
        return len(self.kernels)


def gabor_kernel(sigma, theta, support=SUPPORT, aspect=0.5, wavelength=None):
    """Even-symmetric real Gabor kernel on a ``support x support`` grid
    centred between pixels; L2-normalized then mean-subtracted."""
    lam = sigma / 0.56 if wavelength is None else wavelength
    r = np.arange(support) - (support - 1) / 2.0
    y, x = np.meshgrid(r, r, indexing="ij")
    u = x * np.cos(theta) + y * np.sin(theta)
    v = -x * np.sin(theta) + y * np.cos(theta)
    k = np.exp(-(u**2 + aspect**2 * v**2) / (2 * sigma**2)) * np.cos(2 * np.pi * u / lam)
    k = 0.5 * (k + k[::-1, ::-1])  # exact point symmetry
    k /= np.linalg.norm(k)
    return k - k.mean()


def build_gabor_bank(scales=DEFAULT_SCALES, n_orient=DEFAULT_ORIENTATIONS):
    if n_orient < 1:
        raise ContractError(f"n_orient must be >= 1, got {n_orient}")
    scales = tuple(float(s) for s in scales)
    if not scales or min(scales) <= 0:
        raise ContractError(f"scales must be positive, got {scales}")
    kernels = [gabor_kernel(s, np.pi * j / n_orient) for s in scales for j in range(n_orient)]
    return GaborBank(np.stack(kernels), scales, int(n_orient))


def feature_dim(bank, T=DEFAULT_T):
    return len(bank) * N_CLASSES * (2 * T + 1)


def default_q(qtable):
    return 2.0 * float(np.median(qtable)) / 8.0


def _residuals(img, bank):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] % 8 or img.shape[1] % 8:
        raise ContractError(f"image dimensions must be multiples of 8, got {np.shape(img)}")
    win = sliding_window_view(img, (SUPPORT, SUPPORT))
    oh, ow = win.shape[:2]
    r = win.reshape(oh * ow, -1) @ bank.kernels.reshape(len(bank), -1).T
    return r.T.reshape(len(bank), oh, ow)


def _phase_classes(oh, ow):
    ci = _FOLD[np.arange(oh) % 8]
    cj = _FOLD[np.arange(ow) % 8]
    return (ci[:, None] * 5 + cj[None, :]).ravel()


def _quantize(r, q, T):
    v = np.sign(r) * np.floor(np.abs(r) / q + 0.5)
    return np.clip(v, -T, T).astype(np.int64)


def _histograms(r, q, T, weights=None):
    """Raw (unnormalized) per-kernel, per-class histograms and class counts."""
    n_k, oh, ow = r.shape
    bins = 2 * T + 1
    cls = _phase_classes(oh, ow)
    v = _quantize(r.reshape(n_k, -1), q, T) + T
    idx = (np.arange(n_k)[:, None] * N_CLASSES + cls[None, :]) * bins + v
    w = None if weights is None else weights.reshape(n_k, -1).ravel()
    hist = np.bincount(idx.ravel(), weights=w, minlength=n_k * N_CLASSES * bins)
    counts = np.bincount(cls, minlength=N_CLASSES)
    return hist.reshape(n_k, N_CLASSES, bins), counts


def raw_histograms(img, bank, q, T=DEFAULT_T):
    """Unnormalized histograms ``(n_kernels, 25, 2T+1)`` and per-class sample counts."""
    return _histograms(_residuals(img, bank), q, T)


def extract(img, bank, q, T=DEFAULT_T):
    """GFR feature vector of length ``len(bank) * 25 * (2T+1)``."""
    hist, counts = raw_histograms(img, bank, q, T)
    return (hist / counts[None, :, None]).ravel()


def pixel_change_map(change_probs, qtable=None):
    """Spread per-coefficient change probabilities to pixels.

    Each pixel receives the average of its block's coefficient probabilities
    weighted by the pixel-domain amplitude ``q_kl * |basis_kl(m, n)|`` of a
    unit change, so a uniform probability ``c`` maps to ``c`` everywhere.
    """
    p = np.asarray(change_probs, dtype=np.float64)
    if p.ndim != 4 or p.shape[2:] != (8, 8):
        raise ContractError(f"change_probs must have shape (h/8, w/8, 8, 8), got {p.shape}")
    if p.min(initial=0) < 0 or p.max(initial=0) > 1:
        raise ContractError("change probabilities must lie in [0, 1]")
    q = np.ones((8, 8)) if qtable is None else np.asarray(qtable, dtype=np.float64)
    c = dct_matrix(8)
    # amp[k, l, m, n] = q_kl |C[k, m] C[l, n]|
    amp = q[:, :, None, None] * np.abs(c[:, None, :, None] * c[None, :, None, :])
    pix = np.einsum("abkl,klmn->abmn", p, amp) / amp.sum(axis=(0, 1))
    bh, bw = p.shape[:2]
    return pix.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)


def extract_sca(img, bank, q, T, change_probs, qtable=None):
    """Selection-channel-aware GFR features.

    A residual sample's weight is the ``|kernel|``-weighted mean of the pixel
    change probabilities under its support. Histograms are divided by the
    class sample counts (not by their weight sums), so the feature scales
    linearly with the change probabilities.
    """
    img = np.asarray(img, dtype=np.float64)
    pix = pixel_change_map(change_probs, qtable)
    if pix.shape != img.shape:
        raise ContractError(f"change_probs cover {pix.shape} pixels, image is {img.shape}")
    absk = np.abs(bank.kernels)
    absk = absk / absk.sum(axis=(1, 2), keepdims=True)
    win = sliding_window_view(pix, (SUPPORT, SUPPORT))
    oh, ow = win.shape[:2]
    weights = (win.reshape(oh * ow, -1) @ absk.reshape(len(bank), -1).T).T.reshape(len(bank), oh, ow)
    hist, counts = _histograms(_residuals(img, bank), q, T, weights)
    return (hist / counts[None, :, None]).ravel()


# --------------------------------------------------------------------------
# feature files
#
# "STGF" | u16 version | u32 dim | u32 count | u64 config hash | f32 rows
# labels live in a companion text file, one 0/1 per line.

STGF_MAGIC = b"STGF"
STGF_VERSION = 1
_STGF_HEADER = struct.Struct("<4sHIIQ")


class FeatureFileError(ValueError):
    pass


def config_hash(config):
    """64-bit hash of a JSON-able configuration mapping."""
    import json

    raw = json.dumps(config, sort_keys=True, default=str).encode()
    return int.from_bytes(hashlib.sha256(raw).digest()[:8], "little")


def save_features(path, features, config_hash_value=0, labels=None):
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    count, dim = feats.shape
    Path(path).write_bytes(
        _STGF_HEADER.pack(STGF_MAGIC, STGF_VERSION, dim, count, int(config_hash_value))
        + feats.astype("<f4").tobytes()
    )
    if labels is not None:
        save_labels(label_path(path), labels)


def load_features(path):
    """Returns ``(features float32 (count, dim), config_hash)``."""
    data = Path(path).read_bytes()
    if len(data) < _STGF_HEADER.size:
        raise FeatureFileError(f"{path}: truncated header")
    magic, version, dim, count, h = _STGF_HEADER.unpack_from(data)
    if magic != STGF_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if version != STGF_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    if len(data) - _STGF_HEADER.size != 4 * dim * count:
        raise FeatureFileError(f"{path}: payload size does not match {count}x{dim}")
    feats = np.frombuffer(data, "<f4", dim * count, _STGF_HEADER.size).reshape(count, dim)
    return feats.astype(np.float32), h


def label_path(path):
    path = Path(path)
    return path.with_suffix(".labels")


def save_labels(path, labels):
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def load_labels(path):
    vals = [int(line) for line in Path(path).read_text().split()]
    if any(v not in (0, 1) for v in vals):
        raise FeatureFileError(f"{path}: labels must be 0 or 1")
    return np.array(vals, dtype=np.int64)
