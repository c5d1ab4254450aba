"""Densely connected JPEG steganalysis CNN built on :mod:`steglab.ndtensor`.

The network is a flat list of nodes evaluated in order. It has nine groups:
DCT high-pass filtering, truncation, two plain Conv-BN-ReLU
layers, four dense blocks with bottleneck/transition layers, a final dense
block with global average pooling, and a two-way softmax classifier.

Variants 1-5 are the ablations: addition instead of concatenation, no 1x1
layers, 3x3 instead of 1x1, frozen DCT kernels, and an absolute-value layer
after the filters.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndtensor as nd
from .ndtensor import ContractError

DEFAULT_TLU_THRESHOLD = 8.0
POOLED_FEATURES = 160
VARIANTS = (1, 2, 3, 4, 5)


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# preprocessing: DCT kernels, truncation, absolute value


def init_dct_kernels(literal=False):
    """The 16 4x4 DCT basis patterns, shape ``(16, 4, 4)``, index ``4*k + l``.

    ``B[k,l][m,n] = w_k w_l / 4 * cos(k pi (2m+1) / 8) cos(l pi (2n+1) / 8)``
    with ``w_0 = 1`` and ``w_x = 1/sqrt(2)`` otherwise. By default ``k, l, m, n``
    run over 0..3. ``literal=True`` uses 1..4 for all four indices; every
    kernel with ``k = 4`` or ``l = 4`` is then identically zero.
    """
    idx = np.arange(1, 5) if literal else np.arange(4)
    wk = np.where(idx == 0, 1.0, 1.0 / math.sqrt(2.0))
    cos = np.cos(np.pi * idx[:, None] * (2 * idx[None, :] + 1) / 8)  # (k, m)
    bank = (wk[:, None, None, None] * wk[None, :, None, None] / 4.0
            * cos[:, None, :, None] * cos[None, :, None, :])
    return bank.reshape(16, 4, 4)


def tlu(x, threshold=DEFAULT_TLU_THRESHOLD):
    """Truncated linear unit: clamp to ``[-T, T]``."""
    if threshold <= 0:
        raise ContractError(f"TLU threshold must be positive, got {threshold}")
    return np.clip(x, -threshold, threshold)


def tlu_grad(x, grad_out, threshold=DEFAULT_TLU_THRESHOLD):
    # the boundary |x| == T belongs to the linear region
    return grad_out * (np.abs(x) <= threshold)


def absolute(x):
    return np.abs(x)


def absolute_grad(x, grad_out):
    return grad_out * np.sign(x)


def add_into(state, update):
    """Add ``update`` into the leading channels of ``state``."""
    out = state.copy()
    out[:, : update.shape[1]] += update
    return out


# --------------------------------------------------------------------------
# graph


@dataclass
class Node:
    name: str
    kind: str
    inputs: tuple = ()
    group: int = 0
    attrs: dict = field(default_factory=dict)


@dataclass
class NetGraph:
    nodes: list
    params: dict
    buffers: dict
    frozen: set
    input_hw: tuple
    variant: int | None = None
    tlu_threshold: float = DEFAULT_TLU_THRESHOLD

    def node_index(self, name):
        for i, node in enumerate(self.nodes):
            if node.name == name:
                return i
        raise KeyError(name)

    @property
    def trainable(self):
        return [k for k in self.params if k not in self.frozen]

    def arch_hash(self):
        """64-bit hash of the architecture (independent of input size)."""
        desc = {
            "nodes": [[n.name, n.kind, list(n.inputs), sorted(
                (k, v if not isinstance(v, tuple) else list(v)) for k, v in n.attrs.items())]
                for n in self.nodes],
            "params": {k: list(v.shape) for k, v in self.params.items()},
            "buffers": {k: list(v.shape) for k, v in self.buffers.items()},
            "frozen": sorted(self.frozen),
            "tlu": self.tlu_threshold,
        }
        digest = hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).digest()
        return int.from_bytes(digest[:8], "little")


class _Builder:
    def __init__(self, rng, variant):
        self.rng = rng
        self.variant = variant
        self.nodes = []
        self.params = {}
        self.buffers = {}
        self.frozen = set()
        self.channels = []

    def add(self, name, kind, inputs, group, channels, **attrs):
        self.nodes.append(Node(name, kind, tuple(inputs), group, attrs))
        self.channels.append(channels)
        return len(self.nodes) - 1

    def conv_bn_relu(self, name, src, out_c, k, stride, group):
        in_c = self.channels[src]
        pad = (k - 1) // 2
        w = f"{name}.weight"
        self.params[w] = self.rng.normal(0.0, 0.01, (out_c, in_c, k, k)).astype(np.float32)
        b = None
        if k == 3:
            b = f"{name}.bias"
            self.params[b] = np.full(out_c, 0.2, np.float32)
        i = self.add(f"{name}.conv", "conv", [src], group, out_c,
                     weight=w, bias=b, stride=stride, pad=pad)
        self.params[f"{name}.bn.gamma"] = np.ones(out_c, np.float32)
        self.params[f"{name}.bn.beta"] = np.zeros(out_c, np.float32)
        self.buffers[f"{name}.bn.running_mean"] = np.zeros(out_c, np.float32)
        self.buffers[f"{name}.bn.running_var"] = np.ones(out_c, np.float32)
        i = self.add(f"{name}.bn", "bn", [i], group, out_c, prefix=f"{name}.bn")
        return self.add(f"{name}.relu", "relu", [i], group, out_c)

    def dense_block(self, src, group, layers=2):
        """Bottleneck + 3x3 layers whose input is the concatenation of the block
        input and all earlier 3x3 outputs."""
        v = self.variant
        members = [src]
        state = src
        for j in range(1, layers + 1):
            pre = f"g{group}.dense{j}"
            h = state
            if v != 2:
                k = 3 if v == 3 else 1
                h = self.conv_bn_relu(f"{pre}.bottleneck", state, 96, k, 1, group)
            y = self.conv_bn_relu(f"{pre}.conv", h, 32, 3, 1, group)
            if v == 1:
                state = self.add(f"{pre}.add", "add_into", [state, y], group, self.channels[state])
            else:
                members.append(y)
                width = sum(self.channels[m] for m in members)
                state = self.add(f"{pre}.concat", "concat", members, group, width)
        return state

    def transition(self, src, group):
        h = src
        if self.variant != 2:
            k = 3 if self.variant == 3 else 1
            h = self.conv_bn_relu(f"g{group}.transition", src, 128, k, 1, group)
        return self.conv_bn_relu(f"g{group}.down", h, 96, 3, 2, group)


def _build(h, w, variant, seed, tlu_threshold, literal_dct):
    if h % 32 or w % 32 or h < 32 or w < 32:
        raise ContractError(f"input size must be a positive multiple of 32, got {h}x{w}")
    if variant is not None and variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    b = _Builder(np.random.default_rng(seed), variant)
    x = b.add("input", "input", [], 0, 1)

    b.params["g1.dct.weight"] = init_dct_kernels(literal_dct)[:, None].astype(np.float32)
    if variant == 4:
        b.frozen.add("g1.dct.weight")
    x = b.add("g1.dct", "conv", [x], 1, 16, weight="g1.dct.weight", bias=None, stride=1, pad=(1, 2))
    if variant == 5:
        x = b.add("g1.abs", "abs", [x], 1, 16)
    x = b.add("g2.tlu", "tlu", [x], 2, 16, threshold=float(tlu_threshold))

    x = b.conv_bn_relu("g3.conv1", x, 32, 3, 1, 3)
    x = b.conv_bn_relu("g3.conv2", x, 64, 3, 2, 3)

    for group in (4, 5, 6, 7):
        x = b.dense_block(x, group)
        x = b.transition(x, group)

    x = b.dense_block(x, 8)
    x = b.add("g8.pool", "pool", [x], 8, b.channels[x])

    n_in = b.channels[x]
    limit = math.sqrt(3.0 / n_in)  # Caffe "xavier" filler, fan-in
    b.params["g9.fc.weight"] = b.rng.uniform(-limit, limit, (n_in, 2)).astype(np.float32)
    b.params["g9.fc.bias"] = np.zeros(2, np.float32)
    b.add("g9.fc", "dense", [x], 9, 2, weight="g9.fc.weight", bias="g9.fc.bias")
    return NetGraph(b.nodes, b.params, b.buffers, b.frozen, (h, w), variant, float(tlu_threshold))


def build_proposed(h=256, w=256, seed=0, tlu_threshold=DEFAULT_TLU_THRESHOLD, literal_dct=False):
    return _build(h, w, None, seed, tlu_threshold, literal_dct)


def build_variant(variant, h=256, w=256, seed=0, tlu_threshold=DEFAULT_TLU_THRESHOLD):
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return _build(h, w, variant, seed, tlu_threshold, False)


def build(variant=None, h=256, w=256, seed=0, tlu_threshold=DEFAULT_TLU_THRESHOLD):
    if variant is None:
        return build_proposed(h, w, seed, tlu_threshold)
    return build_variant(variant, h, w, seed, tlu_threshold)


def astype(g, dtype):
    """Cast all parameters and buffers in place (float64 for gradient checks)."""
    for store in (g.params, g.buffers):
        for k in store:
            store[k] = store[k].astype(dtype)
    return g


def parameter_count(g, trainable_only=True):
    names = g.trainable if trainable_only else list(g.params)
    return int(sum(g.params[k].size for k in names))


# --------------------------------------------------------------------------
# shape inference


def infer_shapes(g, n=1, hw=None):
    h, w = hw or g.input_hw
    shapes = []
    for node in g.nodes:
        if node.kind == "input":
            s = (n, 1, h, w)
        elif node.kind == "conv":
            src = shapes[node.inputs[0]]
            p = _conv_params(g, node)
            if src[1] != p.kernels.shape[1]:
                raise ContractError(f"{node.name}: channels {src[1]} != {p.kernels.shape[1]}")
            s = (n, p.kernels.shape[0], *p.output_hw(*src[2:]))
        elif node.kind == "concat":
            parts = [shapes[i] for i in node.inputs]
            if len({p[2:] for p in parts}) != 1:
                raise ContractError(f"{node.name}: spatial mismatch {parts}")
            s = (n, sum(p[1] for p in parts), *parts[0][2:])
        elif node.kind == "pool":
            s = (*shapes[node.inputs[0]][:2], 1, 1)
        elif node.kind == "dense":
            s = (n, g.params[node.attrs["weight"]].shape[1], 1, 1)
        else:
            s = shapes[node.inputs[0]]
        shapes.append(s)
    return shapes


def group_output_shapes(g, hw=None):
    """``{group: (channels, h, w)}`` of the last node of each group."""
    out = {}
    for node, s in zip(g.nodes, infer_shapes(g, 1, hw)):
        if node.group:
            out[node.group] = s[1:]
    return out


# --------------------------------------------------------------------------
# forward / backward


def _conv_params(g, node):
    a = node.attrs
    return nd.ConvParams(
        g.params[a["weight"]],
        None if a["bias"] is None else g.params[a["bias"]],
        a["stride"],
        tuple(a["pad"]) if isinstance(a["pad"], (list, tuple)) else a["pad"],
    )


def _bn_params(g, node):
    pre = node.attrs["prefix"]
    return nd.BatchNormParams(
        g.params[f"{pre}.gamma"], g.params[f"{pre}.beta"],
        g.buffers[f"{pre}.running_mean"], g.buffers[f"{pre}.running_var"],
    )


def _check_batch(g, batch):
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise ContractError(f"batch must have shape (n, 1, h, w), got {batch.shape}")
    if tuple(batch.shape[2:]) != tuple(g.input_hw):
        raise ContractError(
            f"input is {batch.shape[2]}x{batch.shape[3]}, graph was built for "
            f"{g.input_hw[0]}x{g.input_hw[1]}")


def run(g, batch, training, keep=False, stop=None):
    """Evaluate nodes in order. Returns the list of activations (and the
    per-node backward caches when ``keep``). ``stop`` ends evaluation after the
    named node."""
    _check_batch(g, batch)
    acts = []
    caches = [] if keep else None
    for node in g.nodes:
        cache = None
        k = node.kind
        if k == "input":
            y = batch
        else:
            x = acts[node.inputs[0]]
            if k == "conv":
                y, cache = nd.conv2d_forward(x, _conv_params(g, node))
            elif k == "bn":
                y, cache = nd.batch_norm_forward(x, _bn_params(g, node), training)
            elif k == "relu":
                y = nd.relu(x)
            elif k == "tlu":
                y = tlu(x, node.attrs["threshold"])
            elif k == "abs":
                y = absolute(x)
            elif k == "concat":
                y = nd.concat_channels([acts[i] for i in node.inputs])
            elif k == "add_into":
                y = add_into(x, acts[node.inputs[1]])
            elif k == "pool":
                y = nd.global_avg_pool(x)
            elif k == "dense":
                w = g.params[node.attrs["weight"]]
                b = g.params[node.attrs["bias"]]
                y = (x.reshape(x.shape[0], -1) @ w + b)[:, :, None, None]
            else:  # pragma: no cover
                raise ValueError(f"unknown node kind {k}")
        acts.append(y)
        if keep:
            caches.append(cache)
        if stop is not None and node.name == stop:
            break
    return (acts, caches) if keep else acts


def _dtype(g):
    return g.params["g9.fc.weight"].dtype


def forward(g, batch, training=False):
    """Per-sample ``[P(cover), P(stego)]`` of shape ``(n, 2)``."""
    batch = np.asarray(batch, dtype=_dtype(g))
    logits = run(g, batch, training)[-1][:, :, 0, 0]
    return nd.softmax(logits.astype(np.float64))


def forward_backward(g, batch, labels):
    """Training-mode forward pass plus backward pass.

    Returns ``(probabilities, loss, grads)`` with ``grads`` keyed by parameter
    name (frozen parameters get no entry).
    """
    batch = np.asarray(batch, dtype=_dtype(g))
    acts, caches = run(g, batch, training=True, keep=True)
    fc = g.nodes[-1]
    pooled = acts[fc.inputs[0]]
    probs, loss, dg = nd.dense_softmax_xent(
        pooled, g.params[fc.attrs["weight"]], labels, g.params[fc.attrs["bias"]])
    grads = {fc.attrs["weight"]: dg.weights, fc.attrs["bias"]: dg.bias}
    gacts = [None] * len(g.nodes)
    gacts[fc.inputs[0]] = dg.input

    def push(i, gx):
        gacts[i] = gx if gacts[i] is None else gacts[i] + gx

    for idx in range(len(g.nodes) - 2, 0, -1):
        node = g.nodes[idx]
        gy = gacts[idx]
        gacts[idx] = None
        if gy is None:
            continue
        k = node.kind
        src = node.inputs[0]
        x = acts[src]
        if k == "conv":
            p = _conv_params(g, node)
            need_input = g.nodes[src].kind != "input"
            if not need_input and node.attrs["weight"] in g.frozen:
                continue
            gx, gk, gb = nd.conv2d_grad(x, p, gy, cols=caches[idx], need_input=need_input)
            if node.attrs["weight"] not in g.frozen:
                grads[node.attrs["weight"]] = gk
                if gb is not None:
                    grads[node.attrs["bias"]] = gb
            if need_input:
                push(src, gx)
        elif k == "bn":
            p = _bn_params(g, node)
            gx, gg, gb = nd.batch_norm_grad(x, p, gy, cache=caches[idx])
            pre = node.attrs["prefix"]
            grads[f"{pre}.gamma"] = gg
            grads[f"{pre}.beta"] = gb
            push(src, gx)
        elif k == "relu":
            push(src, nd.relu_grad(acts[idx], gy))
        elif k == "tlu":
            push(src, tlu_grad(x, gy, node.attrs["threshold"]))
        elif k == "abs":
            push(src, absolute_grad(x, gy))
        elif k == "concat":
            sizes = [acts[i].shape[1] for i in node.inputs]
            for i, part in zip(node.inputs, nd.concat_channels_grad(sizes, gy)):
                push(i, part)
        elif k == "add_into":
            push(src, gy)
            upd = node.inputs[1]
            push(upd, gy[:, : acts[upd].shape[1]])
        elif k == "pool":
            push(src, nd.global_avg_pool_grad(x.shape, gy))
        else:  # pragma: no cover
            raise ValueError(f"no backward for {k}")
    return probs, loss, grads


def extract_features(g, image):
    """160-dim global-average-pool features in inference mode.

    ``image`` may be a single ``(h, w)`` real image or a ``(n, 1, h, w)``
    batch; the result is ``(160,)`` or ``(n, 160)`` accordingly.
    """
    arr = np.asarray(image, dtype=_dtype(g))
    single = arr.ndim == 2
    if single:
        arr = arr[None, None]
    acts = run(g, arr, training=False, stop="g8.pool")
    feats = acts[-1][:, :, 0, 0].astype(np.float64)
    return feats[0] if single else feats


def classify_features(g, features):
    """Apply the final dense + softmax layer to pooled features."""
    fc = g.nodes[-1]
    feats = np.atleast_2d(features).astype(_dtype(g))
    logits = feats @ g.params[fc.attrs["weight"]] + g.params[fc.attrs["bias"]]
    return nd.softmax(logits.astype(np.float64))


# --------------------------------------------------------------------------
# checkpoints
#
# layout: "STGN" | u16 version | u64 arch hash | u32 meta length | meta JSON |
#         u32 array count | per array: u16 name length, name, u8 ndim,
#         u32 dims..., f32 data | u32 CRC32 of everything before it

STGN_MAGIC = b"STGN"
STGN_VERSION = 1


def _write_array(buf, name, arr):
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_bytes(g, iteration=0, rng_state=None, extra=None):
    meta = {
        "iteration": int(iteration),
        "rng_state": rng_state,
        "variant": g.variant,
        "tlu_threshold": g.tlu_threshold,
        "input_hw": list(g.input_hw),
        "frozen": sorted(g.frozen),
    }
    if extra:
        meta.update(extra)
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(STGN_MAGIC + struct.pack("<HQ", STGN_VERSION, g.arch_hash()))
    buf.write(struct.pack("<I", len(meta_raw)) + meta_raw)
    arrays = [(f"param/{k}", v) for k, v in g.params.items()]
    arrays += [(f"buffer/{k}", v) for k, v in g.buffers.items()]
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        _write_array(buf, name, arr)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(g, path, iteration=0, rng_state=None, extra=None):
    Path(path).write_bytes(checkpoint_bytes(g, iteration, rng_state, extra))


def parse_checkpoint(data):
    """Decode a checkpoint into ``(arch_hash, meta, {name: array})``."""
    if len(data) < 4 + 2 + 8 + 4 + 4:
        raise CheckpointError("truncated checkpoint")
    if data[:4] != STGN_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("CRC mismatch (file truncated or corrupted)")
    version, arch = struct.unpack_from("<HQ", data, 4)
    if version != STGN_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {STGN_VERSION})")
    pos = 14
    try:
        (mlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        meta = json.loads(data[pos : pos + mlen])
        pos += mlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(data) - 4:
                raise CheckpointError(f"array {name} runs past end of file")
            arrays[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint at byte {pos}: {exc}") from exc
    if pos != len(data) - 4:
        raise CheckpointError(f"{len(data) - 4 - pos} trailing bytes before CRC")
    return arch, meta, arrays


def load_checkpoint(g, path_or_bytes):
    """Load parameters and running statistics into ``g`` in place; returns the
    metadata dict (iteration, RNG state, ...)."""
    data = path_or_bytes if isinstance(path_or_bytes, bytes) else Path(path_or_bytes).read_bytes()
    arch, meta, arrays = parse_checkpoint(data)
    expected = [(f"param/{k}", v) for k, v in g.params.items()]
    expected += [(f"buffer/{k}", v) for k, v in g.buffers.items()]
    for name, arr in expected:
        if name not in arrays:
            raise CheckpointError(f"layer {name.split('/', 1)[1]}: missing from checkpoint")
        if arrays[name].shape != arr.shape:
            raise CheckpointError(
                f"layer {name.split('/', 1)[1]}: shape mismatch, checkpoint "
                f"{arrays[name].shape} vs graph {arr.shape}")
    extra = set(arrays) - {n for n, _ in expected}
    if extra:
        raise CheckpointError(f"layer {sorted(extra)[0].split('/', 1)[1]}: not present in graph")
    if arch != g.arch_hash():
        raise CheckpointError("architecture hash mismatch (different variant or TLU threshold)")
    for name, arr in expected:
        arr[...] = arrays[name]
    return meta
