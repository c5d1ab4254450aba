"""Payload-rate ±1 embedding simulator over nonzero AC DCT coefficients.

Stands in for a content-adaptive JPEG scheme: every nonzero AC coefficient is
changed independently with the probability that an optimal ternary code needs
for the requested payload in bits per nonzero AC (bpnzAC).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .jpeg import CoefficientImage
from .ndtensor import ContractError

RNG_ALGORITHM = "numpy.PCG64"
MAX_PAYLOAD = math.log2(3)


@dataclass(frozen=True)
class EmbedConfig:
    alpha: float  # bpnzAC
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha <= MAX_PAYLOAD:
            raise ContractError(f"alpha must be in [0, log2(3)], got {self.alpha}")


def ternary_entropy(beta):
    """Bits carried per coefficient when it changes with total probability
    ``beta`` split evenly between +1 and -1."""
    if beta <= 0:
        return 0.0
    h = -beta * math.log2(beta / 2)
    if beta < 1:
        h -= (1 - beta) * math.log2(1 - beta)
    return h


def payload_to_change_rate(alpha, tol=1e-10):
    if not 0 <= alpha <= MAX_PAYLOAD + 1e-15:
        raise ContractError(f"alpha must be in [0, log2(3)], got {alpha}")
    if alpha == 0:
        return 0.0
    lo, hi = 0.0, 2.0 / 3.0
    if alpha >= MAX_PAYLOAD:
        return hi
    # entropy is increasing on [0, 2/3]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        h = ternary_entropy(mid)
        if abs(h - alpha) < tol:
            return mid
        if h < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def ac_mask(shape):
    mask = np.ones(shape, dtype=bool)
    mask[..., 0, 0] = False
    return mask


def embed(ci, cfg, return_changes=False):
    """Simulate embedding; deterministic given ``cfg.seed``.

    A change that would turn a coefficient into 0 is applied with the opposite
    sign, so the set of nonzero ACs never shrinks.
    """
    beta = payload_to_change_rate(cfg.alpha)
    out = ci.copy()
    if beta == 0:
        return (out, 0) if return_changes else out
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    coeffs = out.coeffs
    sites = np.flatnonzero(ac_mask(coeffs.shape) & (coeffs != 0))
    chosen = rng.random(sites.size) < beta
    step = np.where(rng.random(sites.size) < 0.5, 1, -1)
    flat = coeffs.reshape(-1)
    values = flat[sites]
    step = np.where(values + step == 0, -step, step)
    flat[sites[chosen]] = values[chosen] + step[chosen]
    n_changed = int(chosen.sum())
    return (out, n_changed) if return_changes else out


def change_probability_map(ci, alpha):
    """Per-coefficient change probability of the simulator (beta on nonzero
    ACs, 0 elsewhere), shaped like ``ci.coeffs``."""
    beta = payload_to_change_rate(alpha)
    return np.where(ac_mask(ci.coeffs.shape) & (ci.coeffs != 0), beta, 0.0)
