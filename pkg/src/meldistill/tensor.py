"""Reverse-mode automatic differentiation on numpy arrays.

Small, single-threaded by design: every operation the training pipeline
needs is implemented here with an explicit backward rule, and a central
finite-difference checker (`grad_check`) serves as the independent oracle
for all of them. 64-bit arrays are used in tests; 32-bit is fine for
training runs.
"""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericalAbort, ShapeError

log = logging.getLogger(__name__)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / frozen forwards)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if not np.issubdtype(data.dtype, np.floating):
            return data.astype(np.float64)
        return data
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A dense array plus an optional gradient slot and a recorded backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic properties ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autograd machinery ----------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate grads of every reachable tensor with d(self)/d(tensor).

        `self` must be scalar. Leaf gradients accumulate across calls;
        interior gradients are reset at the start of each call.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in topo:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _wrap(other, self.dtype)
        out_data = self.data + other.data
        a, b = self, other

        def bwd(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))

        return _node(out_data, (a, b), bwd)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = _wrap(other, self.dtype)
        out_data = self.data * other.data
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return _node(out_data, (a, b), bwd)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        a = self

        def bwd(g):
            a._accum(-g)

        return _node(-self.data, (a,), bwd)

    def __sub__(self, other) -> "Tensor":
        return self + (-_wrap(other, self.dtype))

    def __rsub__(self, other) -> "Tensor":
        return _wrap(other, self.dtype) + (-self)

    def __truediv__(self, other) -> "Tensor":
        other = _wrap(other, self.dtype)
        return self * other.pow(-1.0)

    def __rtruediv__(self, other) -> "Tensor":
        return _wrap(other, self.dtype) * self.pow(-1.0)

    def pow(self, exponent: float) -> "Tensor":
        a = self
        p = float(exponent)
        out_data = self.data**p

        def bwd(g):
            a._accum(g * p * a.data ** (p - 1.0))

        return _node(out_data, (a,), bwd)

    __pow__ = pow

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if self.ndim != 2 or other.ndim != 2:
            raise ShapeError(f"matmul needs 2-D operands, got {self.shape} @ {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {self.shape} @ {other.shape}")
        a, b = self, other
        out_data = a.data @ b.data

        def bwd(g):
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)

        return _node(out_data, (a, b), bwd)

    # -- unary math ---------------------------------------------------------

    def relu(self) -> "Tensor":
        a = self
        mask = self.data > 0

        def bwd(g):
            a._accum(g * mask)

        return _node(np.where(mask, self.data, 0.0), (a,), bwd)

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(self.data)

        def bwd(g):
            a._accum(g * out_data)

        return _node(out_data, (a,), bwd)

    def log(self) -> "Tensor":
        a = self

        def bwd(g):
            a._accum(g / a.data)

        return _node(np.log(self.data), (a,), bwd)

    def sqrt(self) -> "Tensor":
        # Subgradient 0 at the origin so norms of identical vectors stay differentiable.
        a = self
        out_data = np.sqrt(self.data)

        def bwd(g):
            safe = np.where(a.data > 1e-30, out_data, np.inf)
            a._accum(g * 0.5 / safe)

        return _node(out_data, (a,), bwd)

    def clip(self, lo: float, hi: float) -> "Tensor":
        a = self
        inside = (self.data >= lo) & (self.data <= hi)

        def bwd(g):
            a._accum(g * inside)

        return _node(np.clip(self.data, lo, hi), (a,), bwd)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                a._accum(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.dtype))
                return
            gg = g
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                for ax in sorted(ax % a.ndim for ax in axes):
                    gg = np.expand_dims(gg, ax)
            a._accum(np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False) + np.zeros(a.shape, dtype=a.dtype))

        return _node(np.asarray(out_data), (a,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= self.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def std(self, axis: int, eps: float = 0.0) -> "Tensor":
        """Population standard deviation along one axis (length must be >= 2)."""
        if self.shape[axis] < 2:
            raise ContractError(f"std needs axis length >= 2, got {self.shape[axis]}")
        mu = self.mean(axis=axis, keepdims=True)
        var = ((self - mu) ** 2.0).mean(axis=axis)
        return (var + eps).sqrt()

    # -- shape manipulation ----------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = self.data.reshape(shape)

        def bwd(g):
            a._accum(g.reshape(a.shape))

        return _node(out_data, (a,), bwd)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)

        def bwd(g):
            a._accum(g.transpose(inv))

        return _node(self.data.transpose(axes), (a,), bwd)

    def slice_axis(self, axis: int, start: int, stop: int) -> "Tensor":
        a = self
        sl = [slice(None)] * self.ndim
        sl[axis] = slice(start, stop)
        sl = tuple(sl)

        def bwd(g):
            if a.requires_grad:
                buf = np.zeros(a.shape, dtype=a.dtype)
                buf[sl] = g
                a._accum(buf)

        return _node(self.data[sl].copy(), (a,), bwd)

    # -- softmax family ----------------------------------------------------------

    def log_softmax(self) -> "Tensor":
        """Numerically stable log-softmax along the last axis."""
        a = self
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out_data = shifted - lse
        soft = np.exp(out_data)

        def bwd(g):
            a._accum(g - soft * g.sum(axis=-1, keepdims=True))

        return _node(out_data, (a,), bwd)

    def softmax(self) -> "Tensor":
        """Numerically stable softmax along the last axis."""
        a = self
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=-1, keepdims=True)

        def bwd(g):
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            a._accum(out_data * (g - inner))

        return _node(out_data, (a,), bwd)

    def gather_rows(self, indices: np.ndarray) -> "Tensor":
        """Pick one column per row of a 2-D tensor: out[i] = self[i, indices[i]]."""
        if self.ndim != 2:
            raise ShapeError(f"gather_rows needs a 2-D tensor, got {self.shape}")
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.shape[0] != self.shape[0]:
            raise ShapeError(f"need one index per row: {idx.shape[0]} != {self.shape[0]}")
        if idx.min() < 0 or idx.max() >= self.shape[1]:
            raise IndexError(f"class index out of range [0, {self.shape[1]})")
        a = self
        rows = np.arange(self.shape[0])

        def bwd(g):
            if a.requires_grad:
                buf = np.zeros(a.shape, dtype=a.dtype)
                buf[rows, idx] = g
                a._accum(buf)

        return _node(self.data[rows, idx].copy(), (a,), bwd)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bwd
    return out


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- multi-tensor ops ------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an axis; gradients split back to each operand."""
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    parts = list(tensors)
    out_data = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                t._accum(g[tuple(sl)])

    return _node(out_data, tuple(parts), bwd)


def roll_axis(t: Tensor, axis: int, shift: int) -> Tensor:
    """Circular shift along an axis, built from slices so gradients flow."""
    n = t.shape[axis]
    shift = shift % n
    if shift == 0:
        return t.slice_axis(axis, 0, n)
    head = t.slice_axis(axis, n - shift, n)
    tail = t.slice_axis(axis, 0, n - shift)
    return concat([head, tail], axis=axis)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> Tensor:
    """2-D convolution (cross-correlation) of [B,C,H,W] with [F,C,KH,KW] kernels."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]} vs kernel {w.shape[1]}")
    sh, sw = stride
    ph, pw = padding
    bsz, cin, hin, win_ = x.shape
    fout, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty: input {x.shape}, kernel {w.shape}, stride {stride}")

    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]  # [B, C, OH, OW, KH, KW]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * oh * ow, cin * kh * kw)
    wmat = w.data.reshape(fout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data.reshape(1, fout)
    out_data = out.reshape(bsz, oh, ow, fout).transpose(0, 3, 1, 2)

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bsz * oh * ow, fout)
        if w.requires_grad:
            w._accum((gmat.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accum(gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(bsz, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros((bsz, cin, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += dcols[:, :, :, :, i, j]
            x._accum(dxp[:, :, ph : ph + hin, pw : pw + win_] if (ph or pw) else dxp)

    return _node(out_data, parents, bwd)


# -- losses -------------------------------------------------------------------


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared elementwise difference."""
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    return ((a - b) ** 2.0).mean()


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    Near-zero vectors (norm < 1e-12) yield a constant 0 instead of NaN;
    the degenerate case is logged at debug level.
    """
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine_sim needs equal-length vectors, got {a.shape}, {b.shape}")
    norm_a = float(np.linalg.norm(a.data))
    norm_b = float(np.linalg.norm(b.data))
    if norm_a < 1e-12 or norm_b < 1e-12:
        log.debug("cosine_sim: degenerate near-zero vector, returning 0")
        return Tensor(np.asarray(0.0, dtype=a.dtype))
    dot = (a * b).sum()
    na = (a * a).sum().sqrt()
    nb = (b * b).sum().sqrt()
    return (dot / (na * nb)).clip(-1.0, 1.0)


def kld(p_logits: Tensor, q_logits: Tensor, tau: float) -> Tensor:
    """Temperature-scaled KL divergence KL(softmax(p/tau) || softmax(q/tau)), batch mean."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"kld shapes differ: {p_logits.shape} vs {q_logits.shape}")
    p = p_logits if p_logits.ndim == 2 else p_logits.reshape(1, -1)
    q = q_logits if q_logits.ndim == 2 else q_logits.reshape(1, -1)
    lp = (p * (1.0 / tau)).log_softmax()
    lq = (q * (1.0 / tau)).log_softmax()
    probs = lp.exp()
    return (probs * (lp - lq)).sum(axis=-1).mean()


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer class labels under the logits."""
    two_d = logits if logits.ndim == 2 else logits.reshape(1, -1)
    idx = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    return -(two_d.log_softmax().gather_rows(idx).mean())


# -- parameters, RNG, optimizer -----------------------------------------------


class Parameter:
    """A named trainable tensor."""

    def __init__(self, data: np.ndarray, name: str):
        self.tensor = Tensor(data, requires_grad=True)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = value

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.tensor.shape})"


class RngState:
    """Deterministic random stream: same seed and call sequence, same outputs.

    `derive` spawns statistically independent child streams keyed by integers,
    so separate pipeline phases never share draws.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = tuple(_key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self._key)))

    def derive(self, *subkeys: int) -> "RngState":
        return RngState(self.seed, self._key + tuple(int(k) for k in subkeys))

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=dtype)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray | float:
        out = self._gen.uniform(low, high, size=shape)
        return out

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high] inclusive."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


class Adam:
    """Adam with bias correction; grads are cleared after each step."""

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate parameter names in optimizer: {names}")
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self) -> None:
        self._t += 1
        bc1 = 1.0 - self.beta1**self._t
        bc2 = 1.0 - self.beta2**self._t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericalAbort(f"non-finite gradient in parameter '{p.name}'")
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype, copy=False)
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# -- finite-difference oracle ----------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: int
    analytic: float
    numeric: float

    def __str__(self) -> str:
        return (
            f"max_rel_err={self.max_rel_err:.3e} at {self.worst_param}[{self.worst_index}] "
            f"(analytic={self.analytic:.6e}, numeric={self.numeric:.6e})"
        )


def grad_check(
    build_loss: Callable[[], Tensor],
    wrt: Sequence[Tensor | Parameter],
    eps: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `build_loss` must rebuild the forward graph from the current values of
    `wrt` on every call. Relative error uses max(|analytic|, |numeric|, 1)
    as denominator so differencing noise on near-zero gradients is judged
    on an absolute scale.
    """
    leaves = [w.tensor if isinstance(w, Parameter) else w for w in wrt]
    names = [w.name if isinstance(w, Parameter) else f"tensor{i}" for i, w in enumerate(wrt)]
    total = sum(leaf.size for leaf in leaves)
    if total > 10_000:
        raise ContractError(f"grad_check limited to 1e4 parameters, got {total}")
    for leaf in leaves:
        leaf.grad = None
    loss = build_loss()
    loss.backward()
    analytic = [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy() for leaf in leaves]

    report = GradCheckReport(0.0, "", -1, 0.0, 0.0)
    for leaf, name, ana in zip(leaves, names, analytic):
        flat = leaf.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = build_loss().item()
            flat[idx] = orig - eps
            f_minus = build_loss().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(ana_flat[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            if rel > report.max_rel_err:
                report = GradCheckReport(rel, name, idx, a, numeric)
    return report
