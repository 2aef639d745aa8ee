"""Reverse-mode automatic differentiation over dense numpy tensors.

Deliberately minimal: exactly the operator set the residual network needs
(conv2d, batchnorm2d, relu, add, global average pool, linear, sigmoid,
weighted BCE). Each operator records a backward closure on its output;
backward() walks the implicit graph in reverse topological order and
accumulates gradients, summing over fan-out.

Convolution follows the cross-correlation convention (no kernel flip).
Forward dtype follows the input arrays: float32 for training, float64 for
finite-difference checks.
"""

import struct

import numpy as np

from .errors import DegenerateBatch, NonScalarLoss, ShapeMismatch

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    out._parents = tuple(parents)
    out._backward = backward_fn
    return out


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every reachable tensor."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has {loss.data.size} elements")

    # iterative post-order topological sort over the parent DAG
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# --- convolution ---

def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]            # n, c, oh, ow, kh, kw
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(gcols, x_shape, kh, kw, stride, padding):
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    g = gcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    gx = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g[..., i, j]
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,Cin,H,W) with (Cout,Cin,k,k), no bias."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-d input and kernel")
    cout, cin, kh, kw = kernel.shape
    if x.shape[1] != cin:
        raise ShapeMismatch(f"input channels {x.shape[1]} != kernel channels {cin}")
    oh = (x.shape[2] + 2 * padding - kh) // stride + 1
    ow = (x.shape[3] + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch("spatial output would be empty")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).transpose(0, 2, 1).reshape(x.shape[0], cout, oh, ow)

    def bw(g):
        gmat = g.reshape(x.shape[0], cout, oh * ow).transpose(0, 2, 1)  # n,p,cout
        kernel._accumulate(
            np.einsum("npo,npk->ok", gmat, cols, optimize=True)
            .reshape(kernel.shape))
        gcols = gmat @ wmat                                             # n,p,ckk
        x._accumulate(_col2im(gcols, x.shape, kh, kw, stride, padding))

    return _make(out, (x, kernel), bw)


# --- batch normalization ---

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, mode: str,
                running_mean: np.ndarray, running_var: np.ndarray,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N,H,W); running stats updated in train mode."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch("gamma/beta must have one entry per channel")

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise DegenerateBatch("train-mode batch norm needs >= 2 elements per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    elif mode == "eval":
        mean = running_mean
        var = running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    if mode == "train":
        def bw(g):
            gxhat = g * gamma.data[None, :, None, None]
            mean_g = gxhat.mean(axis=(0, 2, 3))
            mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3))
            gx = (inv_std[None, :, None, None]
                  * (gxhat - mean_g[None, :, None, None]
                     - xhat * mean_gx[None, :, None, None]))
            x._accumulate(gx.astype(x.data.dtype))
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            beta._accumulate(g.sum(axis=(0, 2, 3)))
    else:
        def bw(g):
            gx = g * (gamma.data * inv_std)[None, :, None, None]
            x._accumulate(gx.astype(x.data.dtype))
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            beta._accumulate(g.sum(axis=(0, 2, 3)))

    return _make(out.astype(x.data.dtype), (x, gamma, beta), bw)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def bw(g):
        x._accumulate(g * mask)

    return _make(out, (x,), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")

    def bw(g):
        a._accumulate(g)
        b._accumulate(g)

    return _make(a.data + b.data, (a, b), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        x._accumulate(np.broadcast_to(
            g[:, :, None, None] / (h * w), x.shape).astype(x.data.dtype))

    return _make(out, (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """(N,D) @ (D,K) + (K,)"""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeMismatch("linear: incompatible shapes")
    out = x.data @ weight.data + bias.data

    def bw(g):
        x._accumulate(g @ weight.data.T)
        weight._accumulate(x.data.T @ g)
        bias._accumulate(g.sum(axis=0))

    return _make(out, (x, weight, bias), bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def bw(g):
        x._accumulate(g.reshape(x.data.shape))

    return _make(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # numerically stable on both tails
    out = np.where(x.data >= 0,
                   1.0 / (1.0 + np.exp(-np.clip(x.data, 0, None))),
                   np.exp(np.clip(x.data, None, 0))
                   / (1.0 + np.exp(np.clip(x.data, None, 0))))

    def bw(g):
        x._accumulate((g * out * (1.0 - out)).astype(x.data.dtype))

    return _make(out.astype(x.data.dtype), (x,), bw)


PROB_CLAMP = 1e-7


def weighted_bce(prob: Tensor, label: np.ndarray,
                 w_pos: float = 1.0, w_neg: float = 1.0) -> Tensor:
    """Mean of -[w_pos*y*log p + w_neg*(1-y)*log(1-p)] over the batch.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log; the clamp
    blocks gradient flow where it is active.
    """
    prob = _as_tensor(prob)
    y = np.asarray(label, dtype=prob.data.dtype)
    if prob.shape != y.shape:
        raise ShapeMismatch(f"prob {prob.shape} vs label {y.shape}")
    inside = (prob.data > PROB_CLAMP) & (prob.data < 1.0 - PROB_CLAMP)
    p = np.clip(prob.data.astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = p.size
    loss = -(w_pos * y * np.log(p) + w_neg * (1.0 - y) * np.log1p(-p)).mean()

    def bw(g):
        gp = (-w_pos * y / p + w_neg * (1.0 - y) / (1.0 - p)) / n
        prob._accumulate((g * gp * inside).astype(prob.data.dtype))

    return _make(np.asarray(loss, dtype=prob.data.dtype), (prob,), bw)


# --- parameter checkpoint container ---

def save_checkpoint(path, tensors: dict) -> None:
    """Serialize named arrays: magic, version, count, then per-tensor records."""
    with open(str(path), "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            a = np.asarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())


def load_checkpoint(path) -> dict:
    with open(str(path), "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos)
        pos += 4 * size
        out[name] = arr.reshape(dims).astype(np.float32)
    return out
