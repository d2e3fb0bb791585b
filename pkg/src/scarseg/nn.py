"""A small dense-tensor U-net engine with hand-written backpropagation.

Tensors are numpy arrays laid out (n, c, h, w). Convolution kernels are
stored (c_in, c_out, kh, kw). Every layer has a ``*_fwd`` and ``*_bwd``
function; the backward functions return exact gradients of their forward
counterparts, which the test suite checks against finite differences.

Functions are dtype-preserving: training runs in float32, gradient checks
run the same code in float64.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

BCE_EPS = 1e-7


class ShapeError(ValueError):
    pass


def _check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return a


# -- layers -------------------------------------------------------------------
#
# Cores work channels-last (n, h, w, c): a 3x3 "same" convolution over a
# zero-padded image flattened to rows is then nine matmuls over contiguous
# row-offset slices, with no im2col copy. The public (n, c, h, w) functions
# below wrap the cores.


def _pad_flat(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    return xp.reshape(-1, c)


def _conv3_fwd(x, k, b):
    """x (n,h,w,ci), k (3,3,ci,co) -> (out (n,h,w,co), padded flat input)."""
    n, h, w, _ = x.shape
    row = w + 2
    xf = _pad_flat(x)
    m = xf.shape[0] - (2 * row + 2)
    acc = np.zeros((xf.shape[0], k.shape[-1]), dtype=x.dtype)
    tmp = np.empty((m, k.shape[-1]), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            o = i * row + j
            np.matmul(xf[o:o + m], k[i, j], out=tmp)
            acc[:m] += tmp
    out = acc.reshape(n, h + 2, w + 2, -1)[:, :h, :w] + b
    return out, xf


def _conv3_bwd(g, xf, k, x_shape):
    """Return (grad_x, grad_k, grad_b) for ``_conv3_fwd``."""
    n, h, w, ci = x_shape
    co = k.shape[-1]
    row = w + 2
    lead = 2 * row + 2
    # gradient laid out on the padded grid, shifted down by `lead` rows
    gp = np.zeros((lead + n * (h + 2) * row, co), dtype=g.dtype)
    gp[lead:].reshape(n, h + 2, row, co)[:, :h, :w] = g
    total = xf.shape[0]
    m = total - lead
    gm = gp[lead:lead + m]
    grad_k = np.empty_like(k)
    for i in range(3):
        for j in range(3):
            o = i * row + j
            np.matmul(xf[o:o + m].T, gm, out=grad_k[i, j])
    kt = k.transpose(0, 1, 3, 2)
    gx = np.empty((total, ci), dtype=g.dtype)
    tmp = np.empty_like(gx)
    first = True
    for i in range(3):
        for j in range(3):
            o = lead - (i * row + j)
            if first:
                np.matmul(gp[o:o + total], kt[i, j], out=gx)
                first = False
            else:
                np.matmul(gp[o:o + total], kt[i, j], out=tmp)
                gx += tmp
    gx = gx.reshape(n, h + 2, row, ci)[:, 1:-1, 1:-1]
    return gx, grad_k, g.sum(axis=(0, 1, 2))


def _pool_fwd(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
    return x.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))


def _pool_bwd(g, x):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    first = blocks.reshape(n, h // 2, w // 2, c, 4).argmax(axis=-1)
    onehot = first[..., None] == np.arange(4)
    out = (onehot * g[..., None]).reshape(n, h // 2, w // 2, c, 2, 2)
    return out.transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


def _up_fwd(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up_bwd(g):
    n, h, w, c = g.shape
    return g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def _nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _k_internal(kernel):
    return np.ascontiguousarray(kernel.transpose(2, 3, 0, 1))


def _k_external(k):
    return np.ascontiguousarray(k.transpose(2, 3, 0, 1))


def conv2d_3x3_same_fwd(x, kernel, bias):
    """3x3 cross-correlation, stride 1, zero padding 1. x (n,c,h,w), kernel (c_in,c_out,3,3)."""
    if x.ndim != 4 or kernel.shape[0] != x.shape[1] or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"kernel {kernel.shape} does not match input {x.shape}")
    out, _ = _conv3_fwd(_nhwc(x), _k_internal(kernel), bias)
    return _nchw(out)


def conv2d_3x3_same_bwd(grad_out, saved_x, kernel):
    """Return (grad_x, grad_kernel, grad_bias)."""
    xs = _nhwc(saved_x)
    gx, gk, gb = _conv3_bwd(_nhwc(grad_out), _pad_flat(xs), _k_internal(kernel), xs.shape)
    return _nchw(gx), _k_external(gk), gb


def conv1x1_fwd(x, kernel, bias):
    if kernel.shape[0] != x.shape[1]:
        raise ShapeError(f"kernel {kernel.shape} does not match input channels {x.shape[1]}")
    return np.einsum("nchw,co->nohw", x, kernel[:, :, 0, 0]) + bias[None, :, None, None]


def conv1x1_bwd(grad_out, saved_x, kernel):
    grad_x = np.einsum("nohw,co->nchw", grad_out, kernel[:, :, 0, 0])
    grad_k = np.einsum("nchw,nohw->co", saved_x, grad_out)[:, :, None, None]
    return grad_x, grad_k, grad_out.sum(axis=(0, 2, 3))


def relu_fwd(x):
    return np.maximum(x, 0)


def relu_bwd(grad_out, saved_out):
    """Gradient of relu given its forward *output* (zero where output is 0)."""
    return grad_out * (saved_out > 0)


def maxpool2x2_fwd(x):
    return _nchw(_pool_fwd(_nhwc(x)))


def maxpool2x2_bwd(grad_out, saved_x):
    """Route each gradient to the first argmax cell of its 2x2 block."""
    return _nchw(_pool_bwd(_nhwc(grad_out), _nhwc(saved_x)))


def upsample2x2_nearest_fwd(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x2_nearest_bwd(grad_out):
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_channels_fwd(skip, up):
    """Stack channels, encoder skip first."""
    if skip.shape[0] != up.shape[0] or skip.shape[2:] != up.shape[2:]:
        raise ShapeError(f"cannot concatenate {skip.shape} and {up.shape}")
    return np.concatenate([skip, up], axis=1)


def concat_channels_bwd(grad_out, skip_channels):
    return grad_out[:, :skip_channels], grad_out[:, skip_channels:]


def sigmoid_fwd(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def sigmoid_bwd(grad_out, saved_out):
    return grad_out * saved_out * (1 - saved_out)


def bce_loss(probs, targets):
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps].

    Returns (loss as Python float, gradient w.r.t. ``probs``). The gradient
    is zero where the clamp is active.
    """
    if probs.shape != targets.shape:
        raise ShapeError(f"probs {probs.shape} vs targets {targets.shape}")
    p64 = probs.astype(np.float64)
    y = targets.astype(np.float64)
    pc = np.clip(p64, BCE_EPS, 1 - BCE_EPS)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    inside = (p64 > BCE_EPS) & (p64 < 1 - BCE_EPS)
    grad = (-(y / pc) + (1 - y) / (1 - pc)) * inside / p64.size
    return float(loss), grad.astype(probs.dtype)


# -- network ------------------------------------------------------------------


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    init_filters: int = 16
    depth: int = 4
    out_channels: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.init_filters < 1 or self.depth < 0:
            raise ValueError(f"invalid UNetConfig {self}")
        if self.out_channels != 1:
            raise ValueError("only single-channel (binary) output is supported")

    def filters(self, level: int) -> int:
        return self.init_filters * 2 ** level

    def check_input(self, shape) -> None:
        if len(shape) != 4:
            raise ShapeError(f"expected (n, c, h, w) input, got {shape}")
        _, c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"input has {c} channels, model expects {self.in_channels}")
        m = 2 ** self.depth
        if h % m or w % m:
            raise ShapeError(f"spatial dims {h}x{w} not divisible by 2^depth={m}")

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c_in = self.in_channels
        for lvl in range(self.depth + 1):
            f = self.filters(lvl)
            shapes[f"enc{lvl}.conv1.w"] = (c_in, f, 3, 3)
            shapes[f"enc{lvl}.conv1.b"] = (f,)
            shapes[f"enc{lvl}.conv2.w"] = (f, f, 3, 3)
            shapes[f"enc{lvl}.conv2.b"] = (f,)
            c_in = f
        for lvl in reversed(range(self.depth)):
            f = self.filters(lvl)
            shapes[f"dec{lvl}.conv1.w"] = (f + self.filters(lvl + 1), f, 3, 3)
            shapes[f"dec{lvl}.conv1.b"] = (f,)
            shapes[f"dec{lvl}.conv2.w"] = (f, f, 3, 3)
            shapes[f"dec{lvl}.conv2.b"] = (f,)
        shapes["out.w"] = (self.init_filters, self.out_channels, 1, 1)
        shapes["out.b"] = (self.out_channels,)
        return shapes


UNetWeights = dict  # name -> np.ndarray, ordered as UNetConfig.weight_shapes()


def glorot_limit(shape) -> float:
    c_in, c_out, kh, kw = shape
    return math.sqrt(6.0 / (c_in * kh * kw + c_out * kh * kw))


def init_weights(cfg: UNetConfig, seed: int = 0, dtype=np.float32) -> UNetWeights:
    """Glorot-uniform kernels in (-a, a), zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    w = {}
    for name, shape in cfg.weight_shapes().items():
        if name.endswith(".b"):
            w[name] = np.zeros(shape, dtype=dtype)
            continue
        a = glorot_limit(shape)
        vals = rng.uniform(-a, a, size=shape).astype(dtype)
        hi = np.nextafter(dtype(a), dtype(0))
        w[name] = np.clip(vals, -hi, hi)
    return w


def zero_weights(cfg: UNetConfig, dtype=np.float32) -> UNetWeights:
    return {k: np.zeros(s, dtype=dtype) for k, s in cfg.weight_shapes().items()}


def _conv_relu(x, w, prefix, cache):
    k = _k_internal(w[prefix + ".w"])
    z, xf = _conv3_fwd(x, k, w[prefix + ".b"])
    a = np.maximum(z, 0, out=z)
    cache[prefix] = (x.shape, xf, k, a)
    return a


def unet_forward(cfg: UNetConfig, w: UNetWeights, x: np.ndarray, cache: dict | None = None):
    """Probabilities of shape (n, 1, h, w). Fills ``cache`` for backward if given."""
    cfg.check_input(x.shape)
    c = {} if cache is None else cache
    skips = []
    h = _nhwc(x)
    for lvl in range(cfg.depth):
        h = _conv_relu(h, w, f"enc{lvl}.conv1", c)
        h = _conv_relu(h, w, f"enc{lvl}.conv2", c)
        skips.append(h)
        h = _pool_fwd(h)
    h = _conv_relu(h, w, f"enc{cfg.depth}.conv1", c)
    h = _conv_relu(h, w, f"enc{cfg.depth}.conv2", c)
    for lvl in reversed(range(cfg.depth)):
        h = np.concatenate([skips[lvl], _up_fwd(h)], axis=-1)
        h = _conv_relu(h, w, f"dec{lvl}.conv1", c)
        h = _conv_relu(h, w, f"dec{lvl}.conv2", c)
    c["out.x"] = h
    c["skips"] = skips
    logits = h @ w["out.w"][:, :, 0, 0] + w["out.b"]
    probs = sigmoid_fwd(_nchw(logits))
    c["probs"] = probs
    return _check_finite(probs, "unet output")


def _conv_relu_bwd(g, prefix, cache, grads):
    x_shape, xf, k, a = cache[prefix]
    g = g * (a > 0)
    gx, gk, grads[prefix + ".b"] = _conv3_bwd(g, xf, k, x_shape)
    grads[prefix + ".w"] = _k_external(gk)
    return gx


def unet_backward(cfg: UNetConfig, w: UNetWeights, cache: dict, grad_probs: np.ndarray) -> dict:
    """Gradients of a scalar loss w.r.t. every weight (and ``"input"``), given d loss / d probs."""
    grads: dict[str, np.ndarray] = {}
    g = _nhwc(sigmoid_bwd(grad_probs, cache["probs"]))
    hx = cache["out.x"]
    grads["out.w"] = np.einsum("nhwc,nhwo->co", hx, g)[:, :, None, None]
    grads["out.b"] = g.sum(axis=(0, 1, 2))
    g = g @ w["out.w"][:, :, 0, 0].T
    skip_grads = [None] * cfg.depth
    # decoder levels run from the output inward
    for lvl in range(cfg.depth):
        g = _conv_relu_bwd(g, f"dec{lvl}.conv2", cache, grads)
        g = _conv_relu_bwd(g, f"dec{lvl}.conv1", cache, grads)
        skip_grads[lvl] = g[..., :cfg.filters(lvl)]
        g = _up_bwd(g[..., cfg.filters(lvl):])
    g = _conv_relu_bwd(g, f"enc{cfg.depth}.conv2", cache, grads)
    g = _conv_relu_bwd(g, f"enc{cfg.depth}.conv1", cache, grads)
    for lvl in reversed(range(cfg.depth)):
        g = _pool_bwd(g, cache["skips"][lvl]) + skip_grads[lvl]
        g = _conv_relu_bwd(g, f"enc{lvl}.conv2", cache, grads)
        g = _conv_relu_bwd(g, f"enc{lvl}.conv1", cache, grads)
    grads["input"] = _nchw(g)
    return grads


def loss_and_grads(cfg: UNetConfig, w: UNetWeights, x: np.ndarray, y: np.ndarray):
    cache: dict = {}
    probs = unet_forward(cfg, w, x, cache)
    loss, gp = bce_loss(probs, y)
    grads = unet_backward(cfg, w, cache, gp)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, grads


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    @classmethod
    def for_weights(cls, w: UNetWeights) -> AdamState:
        return cls({k: np.zeros_like(a) for k, a in w.items()}, {k: np.zeros_like(a) for k, a in w.items()})


def adam_step(w: UNetWeights, grads: dict, s: AdamState, lr: float):
    """One bias-corrected Adam update, in place. Returns (w, s)."""
    for k in w:
        if grads[k].shape != w[k].shape:
            raise ShapeError(f"gradient {k} has shape {grads[k].shape}, weight has {w[k].shape}")
    s.t += 1
    c1 = 1 - s.beta1 ** s.t
    c2 = 1 - s.beta2 ** s.t
    for k, a in w.items():
        g = grads[k]
        m, v = s.m[k], s.v[k]
        m *= s.beta1
        m += (1 - s.beta1) * g
        v *= s.beta2
        v += (1 - s.beta2) * g * g
        a -= (lr * (m / c1) / (np.sqrt(v / c2) + s.eps)).astype(a.dtype)
    return w, s


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(directory, cfg: UNetConfig, w: UNetWeights, **meta) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors, offset, chunks = [], 0, []
    for name in cfg.weight_shapes():
        a = np.ascontiguousarray(w[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
        chunks.append(a.tobytes())
    (d / "weights.bin").write_bytes(b"".join(chunks))
    manifest = {"config": asdict(cfg), "tensors": tensors, "total_bytes": offset, **meta}
    (d / "weights.json").write_text(json.dumps(manifest, indent=1))
    return d


def load_checkpoint(directory) -> tuple[UNetConfig, UNetWeights, dict]:
    """Return (config, weights, manifest). Raises ValueError on payload mismatch."""
    d = Path(directory)
    manifest = json.loads((d / "weights.json").read_text())
    raw = (d / "weights.bin").read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise ValueError(f"checkpoint payload is {len(raw)} bytes, manifest says {manifest['total_bytes']}")
    cfg = UNetConfig(**manifest["config"])
    expected = cfg.weight_shapes()
    w = {}
    for t in manifest["tensors"]:
        if tuple(t["shape"]) != expected.get(t["name"]):
            raise ValueError(f"tensor {t['name']} has shape {t['shape']}, config implies {expected.get(t['name'])}")
        buf = raw[t["offset"]:t["offset"] + t["nbytes"]]
        w[t["name"]] = np.frombuffer(buf, dtype="<f4").reshape(t["shape"]).astype(np.float32)
    if set(w) != set(expected):
        raise ValueError("checkpoint tensors do not match the configured architecture")
    return cfg, w, manifest


@contextlib.contextmanager
def sequential():
    """Pin BLAS to one thread so results are bit-reproducible."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield
