"""The fixed primitive vocabulary used by the three networks.

Layout is NCHW. No broadcasting beyond scalar-with-tensor.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, active_tape

_BCE_EPS = 1e-7


def _result(op: str, inputs: tuple, data: np.ndarray, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite output")
    out = Tensor(data, dtype=data.dtype)
    out.is_leaf = False
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


def _need_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _shifted_columns(xflat: np.ndarray, k: int, wp: int, length: int) -> np.ndarray:
    # xflat is (C, N, L'): each kernel tap (i, j) is one contiguous slice of a padded row-flattened image
    c, n = xflat.shape[:2]
    taps = [xflat[:, :, i * wp + j: i * wp + j + length] for i in range(k) for j in range(k)]
    return np.stack(taps).reshape(k * k * c, n * length)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with zero 'same' padding (odd square kernels)."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError(f"conv2d: expected x(N,C,H,W), w(O,C,k,k), b(O,); "
                         f"got {x.shape}, {weight.shape}, {bias.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2 or k % 2 == 0 or bias.shape[0] != o:
        raise ShapeError(f"conv2d: incompatible shapes x{x.shape}, w{weight.shape}, b{bias.shape}")
    p = k // 2
    wp = w + 2 * p
    hp = h + 2 * p + (1 if p else 0)  # spare bottom row keeps the last tap in bounds
    xp = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x.data.transpose(1, 0, 2, 3)
    xflat = xp.reshape(c, n, hp * wp)
    length = h * wp
    cols = _shifted_columns(xflat, k, wp, length)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    wide = wmat @ cols
    out = wide.reshape(o, n, h, wp)[..., :w].transpose(1, 0, 2, 3) + bias.data[:, None, None]

    def backward_fn(g, needs):
        gx = gw = gb = None
        if needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        if needs[0] or needs[1]:
            gwide = np.zeros((o, n, h, wp), dtype=g.dtype)
            gwide[..., :w] = g.transpose(1, 0, 2, 3)
            gwide = gwide.reshape(o, n * length)
        if needs[1]:
            gw = (gwide @ cols.T).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        if needs[0]:
            dcols = (wmat.T @ gwide).reshape(k * k, c, n, length)
            gflat = np.zeros_like(xflat)
            for t in range(k * k):
                i, j = divmod(t, k)
                gflat[:, :, i * wp + j: i * wp + j + length] += dcols[t]
            gx = gflat.reshape(c, n, hp, wp)[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)
        return gx, gw, gb

    return _result("conv2d", (x, weight, bias), np.ascontiguousarray(out), backward_fn)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2. Ties route gradient to the first maximum."""
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"max_pool2d: needs (N,C,H,W) with even H,W; got {x.shape}")
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g, needs):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _result("max_pool2d", (x,), np.ascontiguousarray(out), backward_fn)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2x: needs (N,C,H,W); got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g, needs):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result("upsample2x", (x,), out, backward_fn)


def concat(tensors: list, axis: int = 1) -> Tensor:
    """Concatenate along the channel axis."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", tensors, out, backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def backward_fn(g, needs):
        return (g * mask,)

    return _result("relu", (x,), out, backward_fn)


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)

    def backward_fn(g, needs):
        return (g * s * (1 - s),)

    return _result("sigmoid", (x,), s, backward_fn)


def _reduce(op: str, per_elem: np.ndarray, reduction: str):
    if reduction == "mean":
        return np.asarray(per_elem.mean(), dtype=per_elem.dtype), 1.0 / per_elem.size
    if reduction == "sum":
        return np.asarray(per_elem.sum(), dtype=per_elem.dtype), 1.0
    raise ValueError(f"{op}: unknown reduction {reduction!r}")


def bce(prob: Tensor, target, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on probabilities (clipped away from 0 and 1)."""
    target = _as_tensor(target)
    _need_same_shape("bce", prob, target)
    p = np.clip(prob.data, _BCE_EPS, 1 - _BCE_EPS)
    y = target.data.astype(p.dtype)
    per = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    out, scale = _reduce("bce", per, reduction)

    def backward_fn(g, needs):
        gp = (p - y) / (p * (1 - p)) * (g * scale)
        return gp.astype(prob.dtype), None

    return _result("bce", (prob, target), out, backward_fn)


def bce_with_logits(logits: Tensor, target, reduction: str = "mean", weight=None) -> Tensor:
    """Fused sigmoid + binary cross-entropy, numerically stable for large logits.

    ``weight`` is an optional constant per-element weight array.
    """
    target = _as_tensor(target)
    _need_same_shape("bce_with_logits", logits, target)
    z = logits.data
    y = target.data.astype(z.dtype)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    if weight is not None:
        weight = np.asarray(weight, dtype=z.dtype)
        if weight.shape != z.shape:
            raise ShapeError(f"bce_with_logits: weight shape {weight.shape} vs {z.shape}")
        per = per * weight
    out, scale = _reduce("bce_with_logits", per, reduction)

    def backward_fn(g, needs):
        gz = (stable_sigmoid(z) - y) * (g * scale)
        if weight is not None:
            gz = gz * weight
        return gz.astype(z.dtype), None

    return _result("bce_with_logits", (logits, target), out, backward_fn)


def hinge(score: Tensor, target, reduction: str = "mean") -> Tensor:
    """Margin loss max(0, 1 - y*s) with labels y in {-1, +1}."""
    target = _as_tensor(target)
    _need_same_shape("hinge", score, target)
    y = target.data.astype(score.dtype)
    margin = 1 - y * score.data
    active = margin > 0
    per = np.where(active, margin, 0).astype(score.dtype)
    out, scale = _reduce("hinge", per, reduction)

    def backward_fn(g, needs):
        return (-y * active * (g * scale)).astype(score.dtype), None

    return _result("hinge", (score, target), out, backward_fn)


def mean(x: Tensor, axis=None) -> Tensor:
    """Mean over all elements, or over the given axes."""
    out = np.asarray(x.data.mean(axis=axis), dtype=x.dtype)
    count = x.size // max(out.size, 1)

    def backward_fn(g, needs):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, x.shape).astype(x.dtype),)

    return _result("mean", (x,), out, backward_fn)


def total(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward_fn(g, needs):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result("sum", (x,), out, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("add", a, b)

    def backward_fn(g, needs):
        return g, g

    return _result("add", (a, b), a.data + b.data, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward_fn(g, needs):
        return g * bd, g * ad

    return _result("mul", (a, b), ad * bd, backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    c = float(c)

    def backward_fn(g, needs):
        return ((g * c).astype(x.dtype),)

    return _result("scale", (x,), (x.data * c).astype(x.dtype), backward_fn)


PRIMITIVES = {
    "conv2d": conv2d,
    "max_pool2d": max_pool2d,
    "upsample2x": upsample2x,
    "concat": lambda *ts, **kw: concat(list(ts), **kw),
    "relu": relu,
    "sigmoid": sigmoid,
    "bce": bce,
    "bce_with_logits": bce_with_logits,
    "hinge": hinge,
    "mean": mean,
    "sum": total,
    "add": add,
    "mul": mul,
    "scale": scale,
}


def forward_primitive(op_kind: str, inputs, **params) -> Tensor:
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}; known: {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **params)
