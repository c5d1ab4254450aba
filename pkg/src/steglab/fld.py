"""Random-subspace Fisher linear discriminant ensemble.

Each base learner sees a uniformly drawn subset of the feature indices, fits a
regularized FLD direction on it and places a threshold minimizing its own
training error. The ensemble's probability is the fraction of stego votes.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ndtensor import ContractError

DEFAULT_L = 51
DEFAULT_D_SUB = 300


class FLDNumericError(ArithmeticError):
    def __init__(self, learner, message):
        super().__init__(f"learner {learner}: {message}")
        self.learner = learner


class ModelFileError(ValueError):
    pass


@dataclass
class EnsembleModel:
    dim: int
    d_sub: int
    lam: float  # configured lambda; NaN means the per-learner trace rule
    subsets: np.ndarray  # (L, d_sub) int
    weights: np.ndarray  # (L, d_sub) float64
    thresholds: np.ndarray  # (L,) float64
    learner_lams: np.ndarray  # (L,) float64 lambda actually used

    @property
    def L(self):
        return len(self.thresholds)

    def projections(self, X):
        X = _as_2d(X, self.dim)
        return np.einsum("nld,ld->nl", X[:, self.subsets], self.weights)

    def votes(self, X):
        return self.projections(X) > self.thresholds[None, :]


def _as_2d(X, dim):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise ContractError(f"feature dimension {X.shape[-1]} does not match model dimension {dim}")
    return X


def fit_fld(X, y, lam=None):
    """Regularized FLD on one subspace: ``w = (S_w + lam I)^-1 (mu_1 - mu_0)``.

    ``S_w`` is the summed within-class scatter. ``lam=None`` uses
    ``1e-6 * trace(S_w) / d``. Returns ``(w, lam_used)``.
    """
    X0 = X[y == 0]
    X1 = X[y == 1]
    mu0 = X0.mean(axis=0)
    mu1 = X1.mean(axis=0)
    D0 = X0 - mu0
    D1 = X1 - mu1
    sw = D0.T @ D0 + D1.T @ D1
    d = X.shape[1]
    if lam is None:
        lam = 1e-6 * np.trace(sw) / d
    a = sw + lam * np.eye(d)
    w = np.linalg.solve(a, mu1 - mu0)
    return w, float(lam)


def best_threshold(proj, y):
    """Threshold ``t`` minimizing training error of ``proj > t -> stego``.

    Candidates are midpoints between consecutive distinct sorted projections
    plus one point below and one above the range; the lowest-error candidate
    wins, earliest first on ties.
    """
    order = np.argsort(proj, kind="stable")
    p = proj[order]
    lab = y[order]
    n = len(p)
    # cut after position i (i = -1..n-1): first i+1 called cover
    stego_below = np.concatenate([[0], np.cumsum(lab)])
    cover_above = np.concatenate([[0], np.cumsum((1 - lab)[::-1])])[::-1]
    errors = stego_below + cover_above
    valid = np.ones(n + 1, bool)
    valid[1:n] = p[1:] > p[:-1]
    errors = np.where(valid, errors, n + 1)
    i = int(np.argmin(errors))
    if i == 0:
        return float(p[0] - 1.0), errors[i] / n
    if i == n:
        return float(p[-1] + 1.0), errors[i] / n
    return float(0.5 * (p[i - 1] + p[i])), errors[i] / n


def train_fld(features, labels, d_sub=None, L=DEFAULT_L, lam=None, seed=0):
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ContractError(f"features {X.shape} and labels {y.shape} are misaligned")
    if set(np.unique(y)) != {0, 1}:
        raise ContractError("training needs both classes (labels 0 and 1)")
    if not np.all(np.isfinite(X)):
        raise ContractError("features contain non-finite values")
    dim = X.shape[1]
    d_sub = min(dim, DEFAULT_D_SUB) if d_sub is None else int(d_sub)
    if not 1 <= d_sub <= dim:
        raise ContractError(f"d_sub must be in 1..{dim}, got {d_sub}")
    if L < 1:
        raise ContractError(f"L must be >= 1, got {L}")
    rng = np.random.Generator(np.random.PCG64(seed))
    subsets = np.empty((L, d_sub), np.int64)
    weights = np.empty((L, d_sub))
    thresholds = np.empty(L)
    lams = np.empty(L)
    for j in range(L):
        sub = rng.choice(dim, size=d_sub, replace=False)
        try:
            w, used = fit_fld(X[:, sub], y, lam)
        except np.linalg.LinAlgError as exc:
            raise FLDNumericError(j, f"singular scatter matrix ({exc})") from exc
        if not np.all(np.isfinite(w)):
            raise FLDNumericError(j, "non-finite discriminant")
        subsets[j] = sub
        weights[j] = w
        lams[j] = used
        thresholds[j] = best_threshold(X[:, sub] @ w, y)[0]
    return EnsembleModel(dim, d_sub, math.nan if lam is None else float(lam),
                         subsets, weights, thresholds, lams)


def predict_proba(model, features):
    """Fraction of base learners voting stego; a float for one sample, an
    array for a 2-D batch."""
    single = np.ndim(features) == 1
    p = model.votes(features).mean(axis=1)
    return float(p[0]) if single else p


def training_error(model, features, labels):
    pred = predict_proba(model, features) > 0.5
    return float(np.mean(pred != np.asarray(labels).astype(bool)))


def learner_errors(model, features, labels):
    """Training error of every base learner individually."""
    votes = model.votes(features)
    return np.mean(votes != np.asarray(labels).astype(bool)[:, None], axis=0)


# --------------------------------------------------------------------------
# model files
#
# "STGE" | u16 version | u32 dim | u32 L | u32 d_sub | f64 lambda |
# L x (f64 lambda_used, f64 threshold, u32 x d_sub indices, f64 x d_sub weights) |
# u32 CRC32

STGE_MAGIC = b"STGE"
STGE_VERSION = 1
_HEAD = struct.Struct("<4sHIIId")


def model_bytes(m):
    parts = [_HEAD.pack(STGE_MAGIC, STGE_VERSION, m.dim, m.L, m.d_sub, m.lam)]
    for j in range(m.L):
        parts.append(struct.pack("<dd", m.learner_lams[j], m.thresholds[j]))
        parts.append(m.subsets[j].astype("<u4").tobytes())
        parts.append(m.weights[j].astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data):
    if len(data) < _HEAD.size + 4:
        raise ModelFileError("truncated ensemble model")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ModelFileError("CRC mismatch")
    magic, version, dim, L, d_sub, lam = _HEAD.unpack_from(data)
    if magic != STGE_MAGIC:
        raise ModelFileError(f"bad magic {magic!r}")
    if version != STGE_VERSION:
        raise ModelFileError(f"unsupported version {version}")
    rec = 16 + 12 * d_sub
    if len(data) - 4 - _HEAD.size != L * rec:
        raise ModelFileError("learner records do not match header")
    subsets = np.empty((L, d_sub), np.int64)
    weights = np.empty((L, d_sub))
    thresholds = np.empty(L)
    lams = np.empty(L)
    pos = _HEAD.size
    for j in range(L):
        lams[j], thresholds[j] = struct.unpack_from("<dd", data, pos)
        pos += 16
        subsets[j] = np.frombuffer(data, "<u4", d_sub, pos)
        pos += 4 * d_sub
        weights[j] = np.frombuffer(data, "<f8", d_sub, pos)
        pos += 8 * d_sub
    if subsets.size and subsets.max() >= dim:
        raise ModelFileError("feature index out of range")
    return EnsembleModel(dim, d_sub, lam, subsets, weights, thresholds, lams)


def save_model(path, m):
    Path(path).write_bytes(model_bytes(m))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())
