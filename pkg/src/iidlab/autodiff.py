"""Minimal reverse-mode autodiff over NCHW tensors.

Covers exactly the layer set the encoder/decoder stacks use (convolution,
transposed convolution, batch normalization, ReLU/sigmoid, concat, 2x area
downsampling) plus the elementary pointwise/reduction ops the training
objectives are composed from. Every backward pass is validated against
central finite differences by `gradcheck` (see the test suite and the
`gradcheck` CLI subcommand).

Conventions: tensors default to float32; gradient checks run in float64.
Gradients accumulate additively when a tensor is used more than once.
Backward functions return freshly derived arrays and never mutate their
inputs, so the accumulation driver can alias them safely.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import (
    DegenerateBatch,
    IoFailure,
    MissingFile,
    MissingGrad,
    ShapeMismatch,
    TruncatedPayload,
)


class Tensor:
    """N-d value with an optional gradient and a link into the backward graph."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable `grad`.

        Without a seed the tensor must be scalar. Gradients from multiple
        uses of the same tensor sum.
        """
        if not self.requires_grad:
            raise MissingGrad("backward() on a tensor that does not require grad")
        if seed is None:
            if self.values.size != 1:
                raise ValueError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.values)
        else:
            seed = np.asarray(seed, dtype=self.values.dtype)
            if seed.shape != self.values.shape:
                raise ShapeMismatch("backward seed shape mismatch")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(topo):
            if node._backward_fn is None or node.grad is None:
                continue
            grads = node._backward_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def _result(values, parents, backward_fn) -> Tensor:
    out = Tensor(values, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def as_tensor(values, dtype=np.float32) -> Tensor:
    """Constant (non-differentiable) tensor from array data."""
    return Tensor(np.asarray(values, dtype=dtype))


def _require_nchw(t: Tensor, name: str) -> None:
    if t.values.ndim != 4:
        raise ShapeMismatch(f"{name}: expected NCHW tensor, got shape {t.values.shape}")


# ---------------------------------------------------------------------------
# convolution kernels (plain-ndarray helpers shared by conv2d and deconv2d)


def _pad_nchw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*k*k, ho*wo) patch matrix."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, c * k * k, ho * wo)


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv_forward(xv: np.ndarray, wv: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n = xv.shape[0]
    cout, _, k, _ = wv.shape
    ho = _conv_out_size(xv.shape[2], k, stride, pad)
    wo = _conv_out_size(xv.shape[3], k, stride, pad)
    cols = _im2col(_pad_nchw(xv, pad), k, stride, ho, wo)
    y = np.matmul(wv.reshape(cout, -1), cols)
    return y.reshape(n, cout, ho, wo)


def _conv_backward_input(gyv: np.ndarray, wv: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    n, cin, h, w = x_shape
    cout, _, k, _ = wv.shape
    ho, wo = gyv.shape[2], gyv.shape[3]
    colsg = np.matmul(wv.reshape(cout, -1).T, gyv.reshape(n, cout, ho * wo))
    colsg = colsg.reshape(n, cin, k, k, ho, wo)
    hp, wp = h + 2 * pad, w + 2 * pad
    gxp = np.zeros((n, cin, hp, wp), dtype=gyv.dtype)
    for ki in range(k):
        hend = ki + stride * (ho - 1) + 1
        for kj in range(k):
            wend = kj + stride * (wo - 1) + 1
            gxp[:, :, ki:hend:stride, kj:wend:stride] += colsg[:, :, ki, kj]
    if pad:
        return gxp[:, :, pad:hp - pad, pad:wp - pad]
    return gxp


def _conv_backward_weight(gyv: np.ndarray, xv: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, cout = gyv.shape[0], gyv.shape[1]
    cin = xv.shape[1]
    ho, wo = gyv.shape[2], gyv.shape[3]
    cols = _im2col(_pad_nchw(xv, pad), k, stride, ho, wo)
    gw = np.matmul(gyv.reshape(n, cout, ho * wo), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(cout, cin, k, k)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding; weight layout (Cout, Cin, k, k)."""
    _require_nchw(x, "conv2d")
    if w.values.ndim != 4 or w.values.shape[2] != w.values.shape[3]:
        raise ShapeMismatch(f"conv2d: bad weight shape {w.values.shape}")
    k = w.values.shape[2]
    if k % 2 == 0 and k != 4:
        raise ShapeMismatch(f"conv2d: kernel size {k} (need odd or 4)")
    if w.values.shape[1] != x.values.shape[1]:
        raise ShapeMismatch(
            f"conv2d: input has {x.values.shape[1]} channels, weight expects {w.values.shape[1]}")
    if _conv_out_size(x.values.shape[2], k, stride, pad) < 1 \
            or _conv_out_size(x.values.shape[3], k, stride, pad) < 1:
        raise ShapeMismatch("conv2d: output would be empty")
    if b is not None and b.values.shape != (w.values.shape[0],):
        raise ShapeMismatch("conv2d: bias shape mismatch")

    y = _conv_forward(x.values, w.values, stride, pad)
    if b is not None:
        y = y + b.values.reshape(1, -1, 1, 1)

    x_shape = x.values.shape

    def backward(gy):
        gx = _conv_backward_input(gy, w.values, x_shape, stride, pad) if x.requires_grad else None
        gw = _conv_backward_weight(gy, x.values, k, stride, pad) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = gy.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(y, parents, backward)


def deconv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed convolution; weight layout (Cin, Cout, k, k).

    The forward map is the exact adjoint of `conv2d` with the same kernel:
    output spatial size is stride*(H-1) + k - 2*pad.
    """
    _require_nchw(x, "deconv2d")
    if w.values.ndim != 4 or w.values.shape[2] != w.values.shape[3]:
        raise ShapeMismatch(f"deconv2d: bad weight shape {w.values.shape}")
    cin, cout, k, _ = w.values.shape
    if x.values.shape[1] != cin:
        raise ShapeMismatch(
            f"deconv2d: input has {x.values.shape[1]} channels, weight expects {cin}")
    n, _, h, wd = x.values.shape
    ho = stride * (h - 1) + k - 2 * pad
    wo = stride * (wd - 1) + k - 2 * pad
    if ho < 1 or wo < 1:
        raise ShapeMismatch("deconv2d: output would be empty")
    if b is not None and b.values.shape != (cout,):
        raise ShapeMismatch("deconv2d: bias shape mismatch")

    y = _conv_backward_input(x.values, w.values, (n, cout, ho, wo), stride, pad)
    if b is not None:
        y = y + b.values.reshape(1, -1, 1, 1)

    def backward(gy):
        gx = _conv_forward(gy, w.values, stride, pad) if x.requires_grad else None
        gw = _conv_backward_weight(x.values, gy, k, stride, pad) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = gy.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(y, parents, backward)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running statistics; updated in train mode, used in eval mode."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                mode: str = "train", momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization; biased variance in both the normalization
    and the running updates. Backward goes through the batch statistics;
    running stats are a detached side effect."""
    _require_nchw(x, "batchnorm2d")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d: bad mode {mode!r}")
    xv = x.values
    n, c, h, w = xv.shape
    if gamma.values.shape != (c,) or beta.values.shape != (c,):
        raise ShapeMismatch("batchnorm2d: gamma/beta shape mismatch")

    if mode == "train":
        count = n * h * w
        if count < 2:
            raise DegenerateBatch("batchnorm2d: need N*H*W >= 2 in train mode")
        mu = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        state.mean = ((1.0 - momentum) * state.mean
                      + momentum * mu.astype(state.mean.dtype))
        state.var = ((1.0 - momentum) * state.var
                     + momentum * var.astype(state.var.dtype))
    else:
        mu = state.mean.astype(xv.dtype)
        var = state.var.astype(xv.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = gamma.values.reshape(1, c, 1, 1) * xhat + beta.values.reshape(1, c, 1, 1)

    def backward(gy):
        ggamma = (gy * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = gy.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        if not x.requires_grad:
            return None, ggamma, gbeta
        gscaled = gy * gamma.values.reshape(1, c, 1, 1)
        if mode == "eval":
            gx = gscaled * inv.reshape(1, c, 1, 1)
        else:
            mean_g = gscaled.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            mean_gx = (gscaled * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gx = inv.reshape(1, c, 1, 1) * (gscaled - mean_g - xhat * mean_gx)
        return gx, ggamma, gbeta

    return _result(y, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# pointwise / structural ops


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.values, 0)

    def backward(gy):
        return (gy * (x.values > 0),)

    return _result(y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.values)

    def backward(gy):
        return (gy * y * (1.0 - y),)

    return _result(y, (x,), backward)


def _broadcast_ok(a_shape, b_shape) -> bool:
    if a_shape == b_shape:
        return True
    if len(a_shape) == len(b_shape) == 4:
        # allow a single-channel operand to broadcast across channels
        return (a_shape[0], a_shape[2], a_shape[3]) == (b_shape[0], b_shape[2], b_shape[3]) \
            and 1 in (a_shape[1], b_shape[1])
    return False


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=1, keepdims=True)


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product; one operand may have a single broadcast channel."""
    if not _broadcast_ok(x.values.shape, y.values.shape):
        raise ShapeMismatch(f"mul: shapes {x.values.shape} vs {y.values.shape}")
    out = x.values * y.values

    def backward(gy):
        gx = _reduce_to(gy * y.values, x.values.shape) if x.requires_grad else None
        gyy = _reduce_to(gy * x.values, y.values.shape) if y.requires_grad else None
        return gx, gyy

    return _result(out, (x, y), backward)


def div(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise quotient; the denominator may broadcast a single channel."""
    if not (x.values.shape == y.values.shape or
            (_broadcast_ok(x.values.shape, y.values.shape) and y.values.shape[1] == 1)):
        raise ShapeMismatch(f"div: shapes {x.values.shape} vs {y.values.shape}")
    out = x.values / y.values

    def backward(gy):
        gx = gy / y.values if x.requires_grad else None
        gyy = None
        if y.requires_grad:
            gyy = _reduce_to(-gy * x.values / (y.values * y.values), y.values.shape)
        return gx, gyy

    return _result(out, (x, y), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.values.shape != y.values.shape:
        raise ShapeMismatch(f"add: shapes {x.values.shape} vs {y.values.shape}")
    out = x.values + y.values

    def backward(gy):
        return (gy if x.requires_grad else None, gy if y.requires_grad else None)

    return _result(out, (x, y), backward)


def sub(x: Tensor, y: Tensor) -> Tensor:
    if x.values.shape != y.values.shape:
        raise ShapeMismatch(f"sub: shapes {x.values.shape} vs {y.values.shape}")
    out = x.values - y.values

    def backward(gy):
        return (gy if x.requires_grad else None, -gy if y.requires_grad else None)

    return _result(out, (x, y), backward)


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = x.values + float(c)

    def backward(gy):
        return (gy,)

    return _result(out, (x,), backward)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.values * c

    def backward(gy):
        return (gy * c,)

    return _result(out, (x,), backward)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    out = np.maximum(x.values, floor)

    def backward(gy):
        return (gy * (x.values > floor),)

    return _result(out, (x,), backward)


def abs_t(x: Tensor) -> Tensor:
    out = np.abs(x.values)

    def backward(gy):
        return (gy * np.sign(x.values),)

    return _result(out, (x,), backward)


def concat(xs, axis: int = 1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeMismatch("concat: no inputs")
    shapes = [t.values.shape for t in xs]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(s[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ShapeMismatch(f"concat: incompatible shapes {shapes}")
    out = np.concatenate([t.values for t in xs], axis=axis)
    sizes = [s[axis] for s in shapes]
    bounds = np.cumsum([0] + sizes)

    def backward(gy):
        pieces = []
        for i, t in enumerate(xs):
            if t.requires_grad:
                sl = [slice(None)] * gy.ndim
                sl[axis] = slice(bounds[i], bounds[i + 1])
                pieces.append(gy[tuple(sl)])
            else:
                pieces.append(None)
        return tuple(pieces)

    return _result(out, tuple(xs), backward)


def channel_sum(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, 1, H, W) channel total."""
    _require_nchw(x, "channel_sum")
    out = x.values.sum(axis=1, keepdims=True)
    c = x.values.shape[1]

    def backward(gy):
        return (np.broadcast_to(gy, x.values.shape).copy() if c > 1 else gy,)

    return _result(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.values.sum(), dtype=x.values.dtype)

    def backward(gy):
        return (np.full(x.values.shape, float(gy), dtype=x.values.dtype),)

    return _result(out, (x,), backward)


def downsample2x(x: Tensor) -> Tensor:
    """Average 2x2 blocks; spatial dims must be even."""
    _require_nchw(x, "downsample2x")
    n, c, h, w = x.values.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"downsample2x: odd spatial size {h}x{w}")
    out = x.values.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(gy):
        up = np.repeat(np.repeat(gy, 2, axis=2), 2, axis=3)
        return (up * 0.25,)

    return _result(out, (x,), backward)


def forward_diff(x: Tensor, axis: str) -> Tensor:
    """Forward difference along 'w' or 'h'; trailing row/column is zero."""
    _require_nchw(x, "forward_diff")
    if axis not in ("h", "w"):
        raise ValueError("forward_diff: axis must be 'h' or 'w'")
    out = np.zeros_like(x.values)
    if axis == "w":
        out[:, :, :, :-1] = x.values[:, :, :, 1:] - x.values[:, :, :, :-1]
    else:
        out[:, :, :-1, :] = x.values[:, :, 1:, :] - x.values[:, :, :-1, :]

    def backward(gy):
        gx = np.zeros_like(gy)
        if axis == "w":
            gx[:, :, :, 1:] += gy[:, :, :, :-1]
            gx[:, :, :, :-1] -= gy[:, :, :, :-1]
        else:
            gx[:, :, 1:, :] += gy[:, :, :-1, :]
            gx[:, :, :-1, :] -= gy[:, :, :-1, :]
        return (gx,)

    return _result(out, (x,), backward)


def mse(x: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over all elements (scalar tensor)."""
    if x.values.shape != target.values.shape:
        raise ShapeMismatch(f"mse: shapes {x.values.shape} vs {target.values.shape}")
    diff = x.values - target.values
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=x.values.dtype)

    def backward(gy):
        g = (2.0 / n) * diff * float(gy)
        return (g if x.requires_grad else None,
                -g if target.requires_grad else None)

    return _result(out, (x, target), backward)


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints


class Param:
    """Trainable tensor plus its Adam state."""

    def __init__(self, values, dtype=np.float32):
        arr = np.array(values, dtype=dtype)
        self.tensor = Tensor(arr, requires_grad=True)
        self.m = np.zeros_like(arr)
        self.v = np.zeros_like(arr)
        self.step = 0

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    @values.setter
    def values(self, arr) -> None:
        self.tensor.values = arr

    @property
    def grad(self):
        return self.tensor.grad


def adam_step(params, lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update; clears gradients afterwards."""
    params = list(params.values()) if isinstance(params, dict) else list(params)
    for p in params:
        if p.tensor.grad is None:
            raise MissingGrad("adam_step: parameter has no gradient")
    for p in params:
        g = p.tensor.grad
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.tensor.values = p.tensor.values - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.tensor.grad = None


# Checkpoint file: one JSON header line, then little-endian float32 payload.
_CKPT_FORMAT = "iidlab-checkpoint-1"


def save_checkpoint(path, params: "OrderedDict[str, Param]", buffers: dict, meta: dict) -> None:
    entries = []
    buffer_entries = []
    offset = 0
    blobs = []

    def push(arr) -> int:
        nonlocal offset
        flat = np.ascontiguousarray(arr, dtype="<f4")
        blobs.append(flat)
        start = offset
        offset += flat.size
        return start

    for name, p in params.items():
        entries.append({
            "name": name,
            "shape": list(p.values.shape),
            "step": p.step,
            "values": push(p.values),
            "m": push(p.m),
            "v": push(p.v),
        })
    for name, arr in buffers.items():
        buffer_entries.append({"name": name, "shape": list(arr.shape), "offset": push(arr)})

    header = {
        "format": _CKPT_FORMAT,
        "meta": meta,
        "params": entries,
        "buffers": buffer_entries,
        "payload_floats": offset,
    }
    try:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
            for blob in blobs:
                fh.write(blob.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such checkpoint: {path}")
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise TruncatedPayload(f"{path}: bad checkpoint header") from exc
        if header.get("format") != _CKPT_FORMAT:
            raise TruncatedPayload(f"{path}: unknown checkpoint format")
        payload = np.frombuffer(fh.read(), dtype="<f4")
    if payload.size != header["payload_floats"]:
        raise TruncatedPayload(
            f"{path}: expected {header['payload_floats']} floats, got {payload.size}")

    def take(offset, shape):
        size = int(np.prod(shape)) if shape else 1
        return payload[offset:offset + size].reshape(shape).astype(np.float32)

    params = {}
    for e in header["params"]:
        params[e["name"]] = {
            "values": take(e["values"], e["shape"]),
            "m": take(e["m"], e["shape"]),
            "v": take(e["v"], e["shape"]),
            "step": int(e["step"]),
        }
    buffers = {e["name"]: take(e["offset"], e["shape"]) for e in header["buffers"]}
    return {"meta": header["meta"], "params": params, "buffers": buffers}


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def gradcheck(fn, arrays, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between backward() and central finite differences.

    `fn` maps Tensors to a single Tensor. Inputs are lifted to float64,
    the output is projected onto a fixed random functional, and each input
    coordinate is perturbed by +-h. The error is
        max |analytic - numeric| / max(1, max|numeric|).
    """
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = rng.standard_normal(out.values.shape)
    out.backward(seed=proj)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in tensors]

    worst = 0.0
    for idx, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = base.ravel()
        num_flat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = float((fn(*[Tensor(a) for a in arrays]).values * proj).sum())
            flat[i] = orig - h
            minus = float((fn(*[Tensor(a) for a in arrays]).values * proj).sum())
            flat[i] = orig
            num_flat[i] = (plus - minus) / (2.0 * h)
        denom = max(1.0, float(np.abs(numeric).max()))
        err = float(np.abs(analytic[idx] - numeric).max()) / denom
        worst = max(worst, err)
    return worst
