"""Dense rank-<=3 float64 tensors with reverse-mode autodiff over a tape.

Operations record themselves on the innermost active :class:`Tape` whenever
at least one input requires a gradient. Outside any tape nothing is
recorded, which is how inference runs.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tsum(mul(x, x))
    ...     tape.backward(loss)
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, DimensionError

MAX_RANK = 3

_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "tapes", None)
    if st is None:
        st = _local.tapes = []
    return st


def active_tape() -> Optional["Tape"]:
    st = _stack()
    return st[-1] if st else None


class Rng:
    """Seeded PCG64 generator.

    PCG64 output is defined bit-for-bit by its algorithm, so equal seeds give
    equal draws on every platform. ``spawn`` derives independent child
    streams from a key without disturbing this stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))


class Tensor:
    """Immutable-by-convention float64 array of rank <= 3.

    ``grad`` is filled on leaf tensors that require gradients when a tape
    runs backward; gradients accumulate across backward calls until
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
        if 0 in arr.shape:
            raise DimensionError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node_id = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One recorded operation: output value, input node references, VJP."""

    __slots__ = ("id", "op", "inputs", "value", "grad", "vjp")

    def __init__(self, id: int, op: str, inputs: tuple, value: Tensor, vjp: Callable):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.vjp = vjp

    @property
    def input_ids(self) -> list:
        return [t.node_id for t in self.inputs]


class Tape:
    """Operation log for one forward pass; ``backward`` may run once."""

    def __init__(self, keep_grads: bool = False):
        self.nodes: list[Node] = []
        self.keep_grads = keep_grads
        self._consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        if st and st[-1] is self:
            st.pop()

    def record(self, op: str, inputs: tuple, out: Tensor, vjp: Callable) -> None:
        if self._consumed:
            raise ContractError("cannot record onto a tape after backward; start a new Tape")
        out.requires_grad = True
        out.node_id = len(self.nodes)
        self.nodes.append(Node(out.node_id, op, inputs, out, vjp))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) to every leaf reached from ``loss``.

        Nodes are visited in reverse recording order, so accumulation order
        is fixed for a given op sequence.
        """
        if self._consumed:
            raise ContractError("backward already ran on this tape; build a new Tape")
        if loss.data.size != 1 or loss.ndim != 0:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        if loss.node_id is None or loss.node_id >= len(self.nodes) or self.nodes[loss.node_id].value is not loss:
            raise ContractError("loss was not produced on this tape")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if self.keep_grads:
                node.grad = g
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                nid = inp.node_id
                if nid is not None and nid < len(self.nodes) and self.nodes[nid].value is inp:
                    prev = grads.get(nid)
                    grads[nid] = ig if prev is None else prev + ig
                else:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
        for node in self.nodes:
            node.vjp = None


def _make(op: str, arr: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make("mul", ad * bd, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    return _make("scale", a.data * s, (a,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    xd = x.data
    return _make("relu", np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


# --------------------------------------------------------------- linear algebra


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of the last two axes.

    Supported operand ranks: 2x2, 3x3 (batched) and 3x2 (the right operand
    shared across the batch).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or (bd.ndim == 3 and ad.ndim != 3):
        raise DimensionError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    if bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise DimensionError(f"matmul batch mismatch: {ad.shape} x {bd.shape}")

    if ad.ndim == 3 and bd.ndim == 2:
        bsz, n, p = ad.shape
        out = (ad.reshape(bsz * n, p) @ bd).reshape(bsz, n, bd.shape[1])

        def vjp(g):
            g2 = g.reshape(bsz * n, -1)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = ad.reshape(bsz * n, p).T @ g2 if b.requires_grad else None
            return ga, gb

        return _make("matmul", out, (a, b), vjp)

    def vjp(g):
        ga = g @ _swap(bd) if a.requires_grad else None
        gb = _swap(ad) @ g if b.requires_grad else None
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got shape {x.shape}")
    return _make("transpose", np.ascontiguousarray(_swap(x.data)), (x,), lambda g: (np.ascontiguousarray(_swap(g)),))


# -------------------------------------------------------------------- softmax


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable boolean, True = keep) sends excluded logits to
    -inf before normalizing; their probabilities and gradients are zero.
    """
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    y = kernels.softmax_fwd(np.ascontiguousarray(xd))
    return _make("softmax", y, (x,), lambda g: (kernels.softmax_bwd(y, np.ascontiguousarray(g)),))


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make("log_softmax", out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def masked_nll(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask``.

    ``logits`` is ``[batch, length, vocab]``; ``targets``/``mask`` are
    ``[batch, length]``.
    """
    n = int(mask.sum())
    if n == 0:
        raise ContractError("every position is masked; the mean is undefined")
    xd = logits.data
    m = xd.max(axis=-1, keepdims=True)
    z = xd - m
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    logp = z - np.log(s)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = mask.astype(np.float64)
    loss = -float(np.sum(picked * w)) / n

    def vjp(g):
        p = e / s
        grad = p * (w / n)[..., None]
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - (w / n)[..., None], axis=-1)
        return (grad * g,)

    return _make("masked_nll", np.asarray(loss), (logits,), vjp)


# ----------------------------------------------------------------- structural


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (depth by default)."""
    if len(ts) == 1:
        return ts[0]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in ts]}") from e

    def vjp(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)) for i in range(len(ts))
        )

    return _make("concat", out, tuple(ts), vjp)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def depth_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        gx[..., start:stop] = g
        return (gx,)

    return _make("depth_slice", np.ascontiguousarray(x.data[..., start:stop]), (x,), vjp)


def split(x: Tensor, groups: int) -> list:
    """Split the depth axis into ``groups`` equal contiguous segments."""
    c = x.shape[-1]
    if groups < 1 or c % groups:
        raise ConfigurationError(f"{groups} groups do not divide depth {c}")
    if groups == 1:
        return [x]
    w = c // groups
    return [depth_slice(x, i * w, (i + 1) * w) for i in range(groups)]


def pad_length(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad axis 1 (sequence length) of a ``[batch, length, depth]`` tensor."""
    if left == 0 and right == 0:
        return x
    b, n, c = x.shape
    out = np.zeros((b, n + left + right, c))
    out[:, left : left + n, :] = x.data
    return _make("pad", out, (x,), lambda g: (np.ascontiguousarray(g[:, left : left + n, :]),))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` (``[vocab, depth]``) at integer ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        gw = np.zeros(weight.shape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make("embedding", weight.data[ids], (weight,), vjp)


def dropout(x: Tensor, p: float, rng: Rng) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    if p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) * (1.0 / (1.0 - p))
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ----------------------------------------------------------- fused nn kernels


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over depth with scalar gain/bias: gain * (x - mu) / sigma + bias."""
    out, xhat, inv_sigma = kernels.layernorm_fwd(np.ascontiguousarray(x.data), float(gain.data), float(bias.data), eps)

    def vjp(g):
        dx, dgain, dbias = kernels.layernorm_bwd(np.ascontiguousarray(g), xhat, inv_sigma, float(gain.data))
        return dx, np.asarray(dgain), np.asarray(dbias)

    return _make("layer_norm", out, (x, gain, bias), vjp)


def depthwise_conv1d(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Valid per-channel convolution of a padded ``[b, n, c]`` input with ``w[k, c]``."""
    xd, wd = np.ascontiguousarray(x.data), np.ascontiguousarray(w.data)
    if xd.ndim != 3 or wd.ndim != 2 or xd.shape[2] != wd.shape[1]:
        raise DimensionError(f"depthwise conv: input {xd.shape} vs kernel {wd.shape}")
    if xd.shape[1] - (wd.shape[0] - 1) * dilation < 1:
        raise DimensionError(f"input length {xd.shape[1]} too short for k={wd.shape[0]}, d={dilation}")
    out = kernels.depthwise_fwd(xd, wd, dilation)

    def vjp(g):
        return kernels.depthwise_bwd(xd, wd, dilation, np.ascontiguousarray(g))

    return _make("depthwise_conv", out, (x, w), vjp)


def conv1d(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Valid full convolution of a padded ``[b, n, c_in]`` input with ``w[k, c_in, c_out]``."""
    xd, wd = np.ascontiguousarray(x.data), np.ascontiguousarray(w.data)
    if xd.ndim != 3 or wd.ndim != 3 or xd.shape[2] != wd.shape[1]:
        raise DimensionError(f"conv: input {xd.shape} vs kernel {wd.shape}")
    if xd.shape[1] - (wd.shape[0] - 1) * dilation < 1:
        raise DimensionError(f"input length {xd.shape[1]} too short for k={wd.shape[0]}, d={dilation}")
    out = kernels.conv_fwd(xd, wd, dilation)

    def vjp(g):
        return kernels.conv_bwd(xd, wd, dilation, np.ascontiguousarray(g))

    return _make("conv", out, (x, w), vjp)


# ------------------------------------------------------------- gradient check


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    coords: Optional[Iterable[int]] = None,
    analytic: Optional[np.ndarray] = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``x`` is either an array (wrapped in a fresh leaf tensor) or an existing
    tensor, which is perturbed in place so ``f`` may also reach it through a
    closure, e.g. a model parameter. ``coords`` restricts the check to some
    flat indices. ``analytic`` overrides the tape gradient, which lets the
    checker itself be tested against a wrong gradient.
    """
    if isinstance(x, Tensor):
        t = x
    else:
        t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    t.requires_grad = True
    t.data = np.asarray(t.data, order="C")
    if analytic is None:
        saved = t.grad
        t.grad = None
        with Tape() as tape:
            loss = f(t)
            tape.backward(loss)
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        t.grad = saved
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = t.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f(t).item()
        flat[i] = orig - step
        fm = f(t).item()
        flat[i] = orig
        num = (fp - fm) / (2.0 * step)
        err = abs(analytic[i] - num) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
