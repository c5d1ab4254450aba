"""CNN + classical feature fusion.

Pooled 160-dim features of several trained CNN snapshots are concatenated and
fed to ``k`` independently seeded FLD ensembles; one more ensemble is trained
on classical Gabor-residual features. The ``k + 1`` vote fractions are
averaged and the image is called stego when the mean exceeds 0.5.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fld
from .dctnet import POOLED_FEATURES
from .ndtensor import ContractError


@dataclass(frozen=True)
class FusionConfig:
    n_cnn_models: int = 9
    n_cnn_classifiers: int = 6
    threshold: float = 0.5
    d_sub: int | None = None
    L: int = fld.DEFAULT_L

    @property
    def n_probabilities(self):
        return self.n_cnn_classifiers + 1


@dataclass
class FusionModel:
    cfg: FusionConfig
    cnn_models: list  # n_cnn_classifiers EnsembleModels -> P0..P(k-1)
    classical_model: fld.EnsembleModel  # -> P(k)


def concat_cnn_features(per_model, n_models=9):
    """Concatenate per-model pooled features in the given model order.

    Accepts vectors of length 160 or ``(n, 160)`` batches.
    """
    if len(per_model) != n_models:
        raise ContractError(f"expected features from {n_models} models, got {len(per_model)}")
    arrs = [np.asarray(f, dtype=np.float64) for f in per_model]
    for j, a in enumerate(arrs):
        if a.shape[-1] != POOLED_FEATURES:
            raise ContractError(f"model {j}: feature length {a.shape[-1]}, expected {POOLED_FEATURES}")
        if a.shape != arrs[0].shape:
            raise ContractError(f"model {j}: shape {a.shape} differs from model 0 {arrs[0].shape}")
    return np.concatenate(arrs, axis=-1)


def derive_seeds(seed, count):
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def train_fusion(cnn_features, classical_features, labels, cfg=FusionConfig(), seed=0, seeds=None):
    """Train ``cfg.n_cnn_classifiers`` ensembles on the CNN features and one on
    the classical features. ``seeds`` (length ``k + 1``) overrides the seeds
    derived from ``seed``."""
    cnn = np.asarray(cnn_features, dtype=np.float64)
    cls = np.asarray(classical_features, dtype=np.float64)
    labels = np.asarray(labels)
    if not (len(cnn) == len(cls) == len(labels)):
        raise ContractError(
            f"misaligned datasets: {len(cnn)} CNN rows, {len(cls)} classical rows, {len(labels)} labels")
    expected = cfg.n_cnn_models * POOLED_FEATURES
    if cnn.shape[1] != expected:
        raise ContractError(f"CNN features have {cnn.shape[1]} dims, expected {expected}")
    k = cfg.n_cnn_classifiers
    seeds = derive_seeds(seed, k + 1) if seeds is None else list(seeds)
    if len(seeds) != k + 1:
        raise ContractError(f"need {k + 1} seeds, got {len(seeds)}")
    cnn_models = [fld.train_fld(cnn, labels, cfg.d_sub, cfg.L, seed=s) for s in seeds[:k]]
    classical = fld.train_fld(cls, labels, cfg.d_sub, cfg.L, seed=seeds[k])
    return FusionModel(cfg, cnn_models, classical)


def probabilities(fm, cnn_features, classical_features):
    """``(n, k+1)`` matrix of P0..Pk (CNN-side classifiers first)."""
    cnn = np.atleast_2d(np.asarray(cnn_features, dtype=np.float64))
    cls = np.atleast_2d(np.asarray(classical_features, dtype=np.float64))
    if len(cnn) != len(cls):
        raise ContractError(f"{len(cnn)} CNN rows vs {len(cls)} classical rows")
    cols = [fld.predict_proba(m, cnn) for m in fm.cnn_models]
    cols.append(fld.predict_proba(fm.classical_model, cls))
    return np.stack(cols, axis=1)


def fuse(probs, threshold=0.5):
    """Mean probability and label (1 = stego iff mean > threshold)."""
    probs = np.asarray(probs, dtype=np.float64)
    p = probs.mean(axis=-1)
    return p, (p > threshold).astype(np.int64)


def predict(fm, cnn_features, classical_features, include_classical=True):
    """Fused ``(probability, label)``; scalars for a single sample."""
    single = np.ndim(cnn_features) == 1
    probs = probabilities(fm, cnn_features, classical_features)
    if not include_classical:
        probs = probs[:, :-1]
    p, label = fuse(probs, fm.cfg.threshold)
    return (float(p[0]), int(label[0])) if single else (p, label)


# --------------------------------------------------------------------------
# files
#
# "STGU" | u16 version | u32 n_cnn_models | u32 n_cnn_classifiers |
# f64 threshold | (k+1) x (u32 length, STGE model bytes)

STGU_MAGIC = b"STGU"
STGU_VERSION = 1
_HEAD = struct.Struct("<4sHIId")


def save_fusion(path, fm):
    parts = [_HEAD.pack(STGU_MAGIC, STGU_VERSION, fm.cfg.n_cnn_models,
                        fm.cfg.n_cnn_classifiers, fm.cfg.threshold)]
    for m in [*fm.cnn_models, fm.classical_model]:
        blob = fld.model_bytes(m)
        parts.append(struct.pack("<I", len(blob)) + blob)
    Path(path).write_bytes(b"".join(parts))


def load_fusion(path):
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise fld.ModelFileError("truncated fusion model")
    magic, version, n_models, k, threshold = _HEAD.unpack_from(data)
    if magic != STGU_MAGIC:
        raise fld.ModelFileError(f"bad magic {magic!r}")
    if version != STGU_VERSION:
        raise fld.ModelFileError(f"unsupported version {version}")
    pos = _HEAD.size
    models = []
    for _ in range(k + 1):
        if pos + 4 > len(data):
            raise fld.ModelFileError("truncated fusion model")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        models.append(fld.model_from_bytes(data[pos : pos + n]))
        pos += n
    if pos != len(data):
        raise fld.ModelFileError("trailing bytes after embedded models")
    cfg = FusionConfig(n_models, k, threshold, models[0].d_sub, models[0].L)
    return FusionModel(cfg, models[:k], models[k])


def write_report(path, names, probs, threshold=0.5):
    probs = np.asarray(probs)
    fused, labels = fuse(probs, threshold)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", *[f"P{j}" for j in range(probs.shape[1])], "fused", "label"])
        for name, row, p, lab in zip(names, probs, fused, labels):
            w.writerow([name, *[repr(float(v)) for v in row], repr(float(p)), int(lab)])
