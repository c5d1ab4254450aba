"""SGD-with-momentum training, paired augmentation and ensemble evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import dctnet
from .ndtensor import ContractError
from .stego import RNG_ALGORITHM

log = logging.getLogger(__name__)

REFERENCE_ITERS = 120_000
DCT_PARAM = "g1.dct.weight"


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, loss):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    lr_divisor: float = 5.0
    lr_step: int = 30_000
    momentum: float = 0.9
    batch_pairs: int = 16
    max_iters: int = REFERENCE_ITERS
    checkpoint_every: int = 5_000
    seed: int = 0
    val_every: int = 0  # 0: validate at checkpoints only
    # LR multiplier for the DCT preprocessing kernels (Caffe-style lr_mult)
    dct_lr_mult: float = 1.0

    @property
    def batch_size(self):
        return 2 * self.batch_pairs

    @property
    def scale(self):
        return self.max_iters / REFERENCE_ITERS

    def scaled(self, max_iters, **overrides):
        """Same schedule shrunk to ``max_iters``: the LR step and checkpoint
        interval keep their proportion of the run."""
        s = max_iters / REFERENCE_ITERS
        cfg = replace(
            self,
            max_iters=max_iters,
            lr_step=max(1, round(30_000 * s)),
            checkpoint_every=max(1, round(5_000 * s)),
        )
        return replace(cfg, **overrides)


def learning_rate(cfg, iteration):
    return cfg.lr0 / cfg.lr_divisor ** (iteration // cfg.lr_step)


# --------------------------------------------------------------------------
# augmentation


def augment(image, draw):
    """One of the 8 dihedral transforms: ``draw % 4`` quarter turns, mirrored
    left-right first when ``draw >= 4``."""
    image = np.asarray(image)
    if image.shape[-1] != image.shape[-2]:
        raise ContractError(f"augmentation needs a square image, got {image.shape[-2:]}")
    if not 0 <= draw < 8:
        raise ContractError(f"draw must be in 0..7, got {draw}")
    if draw >= 4:
        image = image[..., ::-1]
    return np.rot90(image, draw % 4, axes=(-2, -1))


class PairBatcher:
    """Yields ``(images, labels)`` batches of matched cover/stego pairs.

    Pair order is reshuffled once per epoch; cover and stego of a pair share
    one augmentation draw. Layout is ``[c0, s0, c1, s1, ...]``.
    """

    def __init__(self, data, batch_pairs, rng, augment_data=True):
        if len(data) == 0:
            raise ContractError("empty dataset")
        self.data = data
        self.batch_pairs = batch_pairs
        self.rng = rng
        self.augment_data = augment_data
        self._order = np.empty(0, np.int64)
        self._pos = 0

    def _take(self, k):
        out = []
        while k:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(len(self.data))
                self._pos = 0
            chunk = self._order[self._pos : self._pos + k]
            self._pos += len(chunk)
            out.append(chunk)
            k -= len(chunk)
        return np.concatenate(out)

    def next(self):
        idx = self._take(self.batch_pairs)
        draws = self.rng.integers(0, 8, size=len(idx)) if self.augment_data else np.zeros(len(idx), int)
        h, w = self.data.covers.shape[1:]
        images = np.empty((2 * len(idx), 1, h, w), np.float32)
        for j, (i, d) in enumerate(zip(idx, draws)):
            images[2 * j, 0] = augment(self.data.covers[i], d)
            images[2 * j + 1, 0] = augment(self.data.stegos[i], d)
        labels = np.tile([0, 1], len(idx))
        return images, labels, idx, draws


# --------------------------------------------------------------------------
# optimisation


@dataclass
class TrainState:
    iteration: int
    velocity: dict


def new_state(g):
    return TrainState(0, {k: np.zeros_like(g.params[k]) for k in g.trainable})


def sgd_step(params, grads, state, cfg):
    """``v <- momentum*v - lr*grad; p <- p + v`` with the step-schedule LR."""
    base_lr = learning_rate(cfg, state.iteration)
    for name, grad in grads.items():
        lr = base_lr * cfg.dct_lr_mult if name == DCT_PARAM else base_lr
        v = state.velocity.get(name)
        if v is None:
            raise ContractError(f"no velocity buffer for parameter {name}")
        if v.shape != grad.shape:
            raise ContractError(f"{name}: velocity {v.shape} vs grad {grad.shape}")
        v *= cfg.momentum
        v -= lr * grad.astype(v.dtype, copy=False)
        params[name] += v
    state.iteration += 1
    return state


def train_step(g, images, labels, state, cfg):
    probs, loss, grads = dctnet.forward_backward(g, images, labels)
    if not math.isfinite(loss):
        raise TrainingDiverged(state.iteration, loss)
    sgd_step(g.params, grads, state, cfg)
    return loss


# --------------------------------------------------------------------------
# evaluation


def stego_probabilities(models, images, batch=32):
    """Mean softmax stego-probability over ``models`` for ``(n, h, w)`` images."""
    if not models:
        raise ContractError("need at least one model")
    images = np.asarray(images, dtype=np.float32)
    total = np.zeros(len(images))
    for g in models:
        for s in range(0, len(images), batch):
            total[s : s + batch] += dctnet.forward(g, images[s : s + batch, None], training=False)[:, 1]
    return total / len(models)


def error_rate(p_cover, p_stego):
    """Detection error with ``stego iff p > 0.5`` (a tie predicts cover)."""
    false_alarms = np.sum(np.asarray(p_cover) > 0.5)
    misses = np.sum(np.asarray(p_stego) <= 0.5)
    return float(false_alarms + misses) / (len(p_cover) + len(p_stego))


def evaluate(models, data):
    if isinstance(models, dctnet.NetGraph):
        models = [models]
    return error_rate(stego_probabilities(models, data.covers), stego_probabilities(models, data.stegos))


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    log: list
    checkpoints: list
    state: TrainState


def checkpoint_name(iteration):
    return f"ckpt_{iteration:07d}.stgn"


def train(g, data, cfg, out_dir=None, val=None, progress=None):
    """Train ``g`` in place.

    Writes ``train_log.csv`` and a checkpoint every ``cfg.checkpoint_every``
    iterations into ``out_dir`` when given. Returns a :class:`TrainResult`
    whose ``checkpoints`` lists ``(iteration, bytes or path)``.
    """
    if len(data) == 0:
        raise ContractError("empty dataset")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    batcher = PairBatcher(data, cfg.batch_pairs, rng)
    state = new_state(g)
    rows = []
    checkpoints = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    val_every = cfg.val_every or cfg.checkpoint_every
    while state.iteration < cfg.max_iters:
        lr = learning_rate(cfg, state.iteration)
        images, labels, _, _ = batcher.next()
        loss = train_step(g, images, labels, state, cfg)
        it = state.iteration
        val_error = None
        if val is not None and len(val) and (it % val_every == 0 or it == cfg.max_iters):
            val_error = evaluate([g], val)
        rows.append((it, lr, loss, val_error))
        if it % cfg.checkpoint_every == 0 or it == cfg.max_iters:
            meta = {"rng_algorithm": RNG_ALGORITHM, "train_config": asdict(cfg)}
            blob = dctnet.checkpoint_bytes(g, it, rng.bit_generator.state, meta)
            if out is not None:
                path = out / checkpoint_name(it)
                path.write_bytes(blob)
                checkpoints.append((it, path))
            else:
                checkpoints.append((it, blob))
        if progress is not None:
            progress(it, loss, val_error)
    if out is not None:
        write_log(out / "train_log.csv", rows, cfg)
    return TrainResult(rows, checkpoints, state)


def write_log(path, rows, cfg):
    with open(path, "w", newline="") as fh:
        fh.write(f"# scale={cfg.scale:.6g} lr_step={cfg.lr_step} checkpoint_every={cfg.checkpoint_every} "
                 f"dct_lr_mult={cfg.dct_lr_mult:g} seed={cfg.seed} rng={RNG_ALGORITHM}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "lr", "loss", "val_error"])
        for it, lr, loss, val_error in rows:
            w.writerow([it, repr(lr), repr(loss), "" if val_error is None else repr(val_error)])


def read_log(path):
    rows = []
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for rec in csv.DictReader(lines):
        rows.append((int(rec["iter"]), float(rec["lr"]), float(rec["loss"]),
                     None if rec["val_error"] == "" else float(rec["val_error"])))
    return rows
