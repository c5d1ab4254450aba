"""Synthetic covers, image preparation and paired cover/stego datasets."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import jpeg
from .ndtensor import ContractError
from .stego import EmbedConfig, embed


def synthetic_textures(count, size=64, seed=0):
    """Smoothed random textures as uint8 images of shape ``(count, size, size)``.

    Each image mixes a coarse and a fine Gaussian-filtered noise field with
    per-image smoothing widths, contrast and brightness.
    """
    rng = np.random.default_rng(seed)
    out = np.empty((count, size, size), np.uint8)
    for i in range(count):
        coarse = ndimage.gaussian_filter(rng.normal(size=(size, size)), rng.uniform(2.0, 6.0), mode="wrap")
        fine = ndimage.gaussian_filter(rng.normal(size=(size, size)), rng.uniform(0.6, 1.5), mode="wrap")
        field_ = coarse / coarse.std() + rng.uniform(0.2, 1.0) * fine / fine.std()
        img = rng.uniform(90, 165) + rng.uniform(12, 40) * field_ / field_.std()
        out[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return out


def resize_bilinear(pixels, size):
    """Resize a grayscale image to ``size x size`` with bilinear interpolation."""
    pixels = np.asarray(pixels, dtype=np.float64)
    h, w = pixels.shape
    if (h, w) == (size, size):
        return np.asarray(pixels).astype(np.uint8)
    resized = ndimage.zoom(pixels, (size / h, size / w), order=1, mode="nearest", grid_mode=True)
    return np.clip(np.rint(resized[:size, :size]), 0, 255).astype(np.uint8)


def prepare_cover(pixels, size=None, qf=75):
    """Grayscale pixels -> (optionally resized) block-aligned -> JPEG coefficients.

    The result is recompressed until stable so that covers are fixpoints of
    the codec's pixel-domain round trip.
    """
    if size is not None:
        pixels = resize_bilinear(pixels, size)
    pixels = jpeg.crop_to_blocks(np.asarray(pixels))
    if pixels.shape[0] == 0 or pixels.shape[1] == 0:
        raise ContractError("image smaller than one 8x8 block")
    return jpeg.stabilize(jpeg.compress(pixels, jpeg.quality_to_qtable(qf)))[0]


@dataclass
class PairedDataset:
    """Index-aligned cover and stego real-valued decompressions."""

    covers: np.ndarray  # (n, h, w) float
    stegos: np.ndarray
    names: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.covers) != len(self.stegos):
            raise ContractError(f"{len(self.covers)} covers but {len(self.stegos)} stegos")
        if len(self.covers) and self.covers[0].shape != self.stegos[0].shape:
            raise ContractError("cover and stego shapes differ")

    def __len__(self):
        return len(self.covers)

    def subset(self, idx):
        idx = np.asarray(idx)
        names = [self.names[i] for i in idx] if self.names else []
        return PairedDataset(self.covers[idx], self.stegos[idx], names)


def make_benchmark(n_images=400, size=64, alpha=0.8, qf=75, seed=0):
    """Synthetic cover/stego benchmark.

    Returns ``(dataset, cover_coeffs, stego_coeffs)``; the coefficient lists
    are kept for feature extractors that need them.
    """
    textures = synthetic_textures(n_images, size, seed)
    ss = np.random.SeedSequence(seed)
    embed_seeds = ss.spawn(n_images)
    covers, stegos, cov_ci, st_ci = [], [], [], []
    for img, s in zip(textures, embed_seeds):
        ci = prepare_cover(img, None, qf)
        st = embed(ci, EmbedConfig(alpha, int(s.generate_state(1, np.uint64)[0])))
        cov_ci.append(ci)
        st_ci.append(st)
        covers.append(jpeg.decompress_real(ci))
        stegos.append(jpeg.decompress_real(st))
    names = [f"img{i:05d}" for i in range(n_images)]
    return PairedDataset(np.stack(covers), np.stack(stegos), names), cov_ci, st_ci


def read_pair_manifest(path):
    """Parse ``cover_path,stego_path,split`` lines (relative to the manifest)."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ContractError(f"{path}:{lineno}: expected 'cover_path,stego_path,split'")
        if parts == ["cover_path", "stego_path", "split"]:
            continue
        cover, stego, split = parts
        rows.append((path.parent / cover, path.parent / stego, split))
    return rows


def write_pair_manifest(path, rows):
    path = Path(path)
    lines = ["cover_path,stego_path,split"]
    for cover, stego, split in rows:
        lines.append(f"{cover},{stego},{split}")
    path.write_text("\n".join(lines) + "\n")


def load_pairs(manifest, split=None):
    """Load a :class:`PairedDataset` from a pair manifest of STGC files."""
    covers, stegos, names = [], [], []
    for cover, stego, sp in read_pair_manifest(manifest):
        if split is not None and sp != split:
            continue
        covers.append(jpeg.decompress_real(jpeg.load_coefficients(cover)))
        stegos.append(jpeg.decompress_real(jpeg.load_coefficients(stego)))
        names.append(Path(cover).stem)
    if not covers:
        return PairedDataset(np.zeros((0, 0, 0)), np.zeros((0, 0, 0)), [])
    return PairedDataset(np.stack(covers), np.stack(stegos), names)
