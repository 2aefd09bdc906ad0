"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Covers exactly the op set needed by the patch detector and the diffusion
sandbox: elementwise arithmetic, matmul, 3x3 conv, 2x2 maxpool, relu,
exp/log/clip, softmax, reductions, concat/slice/reshape and 2x nearest
upsampling. Values default to float32; reductions accumulate in float64.
"""

from __future__ import annotations

import struct

import numpy as np


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A node in the autodiff graph. The graph is built eagerly and is
    acyclic; ``backward`` visits each node once in reverse topological order."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    # -- graph plumbing -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    @staticmethod
    def _make(data, parents, backward):
        rg = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=rg, dtype=data.dtype)
        if rg:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- elementwise --------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other
        try:
            data = a.data + b.data
        except ValueError:
            raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(data, (a, b), bwd)

    __radd__ = __add__

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other
        try:
            data = a.data * b.data
        except ValueError:
            raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(data, (a, b), bwd)

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def relu(self):
        a = self
        mask = a.data > 0

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * mask)

        return Tensor._make(np.where(mask, a.data, 0).astype(a.dtype), (a,), bwd)

    def exp(self):
        a = self
        data = np.exp(a.data)

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * data)

        return Tensor._make(data, (a,), bwd)

    def log(self):
        a = self

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g / a.data)

        return Tensor._make(np.log(a.data), (a,), bwd)

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient passes through only inside the range."""
        a = self
        inside = (a.data >= lo) & (a.data <= hi)

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * inside)

        return Tensor._make(np.clip(a.data, lo, hi), (a,), bwd)

    # -- linear algebra -----------------------------------------------------

    def matmul(self, other):
        other = self._lift(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        data = a.data @ b.data

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._make(data, (a, b), bwd)

    __matmul__ = matmul

    def transpose(self):
        a = self

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g.T)

        return Tensor._make(a.data.T.copy(), (a,), bwd)

    def reshape(self, *shape):
        a = self
        old = a.shape

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g.reshape(old))

        return Tensor._make(a.data.reshape(*shape), (a,), bwd)

    def __getitem__(self, key):
        a = self
        data = a.data[key]

        def bwd(g):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                np.add.at(full, key, g)
                a._accumulate(full)

        return Tensor._make(np.array(data, copy=True), (a,), bwd)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

        def bwd(g):
            if not a.requires_grad:
                return
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype))

        return Tensor._make(np.asarray(data), (a,), bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- nonlinear blocks ---------------------------------------------------

    def softmax(self, axis: int = -1):
        a = self
        z = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        data = e / e.sum(axis=axis, keepdims=True)

        def bwd(g):
            if a.requires_grad:
                # fused Jacobian-vector product: y * (g - sum(g*y))
                dot = np.sum(g * data, axis=axis, keepdims=True)
                a._accumulate((data * (g - dot)).astype(a.dtype))

        return Tensor._make(data.astype(a.dtype), (a,), bwd)

    # -- structural ---------------------------------------------------------

    @staticmethod
    def concat(tensors, axis: int = 0):
        tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
        data = np.concatenate([t.data for t in tensors], axis=axis)
        sizes = [t.shape[axis] for t in tensors]

        def bwd(g):
            offset = 0
            for t, s in zip(tensors, sizes):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(offset, offset + s)
                    t._accumulate(g[tuple(idx)])
                offset += s

        return Tensor._make(data, tuple(tensors), bwd)

    # -- spatial ops (NCHW) -------------------------------------------------

    def conv2d(self, weight: "Tensor", bias: "Tensor" = None):
        """3x3 convolution, stride 1, zero padding 1, NCHW layout."""
        a, w = self, weight
        if a.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3):
            raise ShapeError(f"conv2d: need (N,C,H,W) x (O,C,3,3), got {a.shape} x {w.shape}")
        if a.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: channel mismatch {a.shape} vs {w.shape}")
        n, c, h, wd = a.shape
        xp = np.pad(a.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros((n, w.shape[0], h, wd), dtype=a.dtype)
        for ki in range(3):
            for kj in range(3):
                part = np.tensordot(
                    w.data[:, :, ki, kj], xp[:, :, ki : ki + h, kj : kj + wd], axes=([1], [1])
                )  # (O, N, H, W)
                out += part.transpose(1, 0, 2, 3)
        if bias is not None:
            out += bias.data.reshape(1, -1, 1, 1)
        parents = (a, w) if bias is None else (a, w, bias)

        def bwd(g):
            if a.requires_grad:
                dxp = np.zeros_like(xp)
                for ki in range(3):
                    for kj in range(3):
                        part = np.tensordot(w.data[:, :, ki, kj], g, axes=([0], [1]))
                        dxp[:, :, ki : ki + h, kj : kj + wd] += part.transpose(1, 0, 2, 3)
                a._accumulate(dxp[:, :, 1 : 1 + h, 1 : 1 + wd])
            if w.requires_grad:
                dw = np.zeros_like(w.data)
                for ki in range(3):
                    for kj in range(3):
                        dw[:, :, ki, kj] = np.tensordot(
                            g, xp[:, :, ki : ki + h, kj : kj + wd], axes=([0, 2, 3], [0, 2, 3])
                        )
                w._accumulate(dw)
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))

        return Tensor._make(out, parents, bwd)

    def maxpool2d(self):
        """2x2 max pooling, stride 2; gradient routes to the first maximum."""
        a = self
        if a.data.ndim != 4 or a.shape[2] % 2 or a.shape[3] % 2:
            raise ShapeError(f"maxpool2d: need (N,C,2i,2j), got {a.shape}")
        n, c, h, w = a.shape
        win = a.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = np.argmax(win, axis=-1)
        data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

        def bwd(g):
            if not a.requires_grad:
                return
            dwin = np.zeros_like(win)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            da = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            a._accumulate(da.reshape(n, c, h, w))

        return Tensor._make(data, (a,), bwd)

    def upsample2(self):
        """2x nearest-neighbor upsampling, NCHW."""
        a = self
        if a.data.ndim != 4:
            raise ShapeError(f"upsample2: need (N,C,H,W), got {a.shape}")
        data = a.data.repeat(2, axis=2).repeat(2, axis=3)

        def bwd(g):
            if a.requires_grad:
                n, c, h2, w2 = g.shape
                a._accumulate(
                    g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)).astype(a.dtype)
                )

        return Tensor._make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Decoupled weight-decay Adam with bias correction."""

    def __init__(self, params, lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-2):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {i} at step {t}")
            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * g * g
            m_hat = self._m[i] / (1 - self.beta1**t)
            v_hat = self._v[i] / (1 - self.beta2**t)
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(f"non-finite parameter {i} after step {t}")


# ---------------------------------------------------------------------------
# checkpoint format: magic, format version, op-set version, named params

_CKPT_MAGIC = b"LDCKPT\x00"
CHECKPOINT_VERSION = 1
OPSET_VERSION = 1


def save_checkpoint(path, params: dict) -> None:
    """Write named parameters as a versioned little-endian binary blob."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, OPSET_VERSION))
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            arr = np.ascontiguousarray(p.data if isinstance(p, Tensor) else p, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint back as {name: float32 ndarray}."""
    with open(path, "rb") as f:
        if f.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, opset = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION or opset > OPSET_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}/opset {opset}")
        (count,) = struct.unpack("<I", f.read(4))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}q", f.read(8 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(4 * size), dtype="<f4").reshape(shape)
            out[name] = data.astype(np.float32)
    return out
