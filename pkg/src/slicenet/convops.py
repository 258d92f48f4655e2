"""1D convolutions in four separability modes, their cost model, and
receptive-field / coverage analysis.

Functional ops (``conv_full``, ``depthwise_conv``, ``sep_conv`` ...) take an
input that is already padded and return the "valid" result. ``conv_layer``
pads according to the spec and dispatches on the mode.

Parameter counts for a square ``c -> c`` layer with window ``k``:

==================  ====================
mode                parameters
==================  ====================
full                ``k*c*c``
separable           ``k*c + c*c``
sub (g groups)      ``k*c*c/g + c*c``
super (g groups)    ``k*c + c*c/g``
==================  ====================
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Rng, Tensor


class Mode(str, enum.Enum):
    FULL = "full"
    SEPARABLE = "separable"
    SUB_SEPARABLE = "sub"
    SUPER_SEPARABLE = "super"


class Padding(str, enum.Enum):
    SAME = "same"
    CAUSAL = "causal"


_MODE_ALIASES = {
    "full": Mode.FULL,
    "none": Mode.FULL,
    "separable": Mode.SEPARABLE,
    "sep": Mode.SEPARABLE,
    "sub": Mode.SUB_SEPARABLE,
    "subseparable": Mode.SUB_SEPARABLE,
    "sub-separable": Mode.SUB_SEPARABLE,
    "super": Mode.SUPER_SEPARABLE,
    "superseparable": Mode.SUPER_SEPARABLE,
    "super-separable": Mode.SUPER_SEPARABLE,
}


def parse_mode(value) -> Mode:
    if isinstance(value, Mode):
        return value
    try:
        return _MODE_ALIASES[str(value).lower()]
    except KeyError:
        raise ConfigurationError(f"unknown separability mode {value!r}; expected one of {sorted(_MODE_ALIASES)}")


def parse_padding(value) -> Padding:
    if isinstance(value, Padding):
        return value
    try:
        return Padding(str(value).lower())
    except ValueError:
        raise ConfigurationError(f"unknown padding {value!r}; expected 'same' or 'causal'")


@dataclass(frozen=True)
class ConvSpec:
    """One convolution step: window ``k``, dilation ``d``, mode, groups, channels, padding."""

    k: int
    c_in: int
    c_out: int
    d: int = 1
    mode: Mode = Mode.SEPARABLE
    g: int = 1
    padding: Padding = Padding.SAME

    def __post_init__(self):
        object.__setattr__(self, "mode", parse_mode(self.mode))
        object.__setattr__(self, "padding", parse_padding(self.padding))
        if self.k < 1:
            raise ConfigurationError(f"filter size must be >= 1, got k={self.k}")
        if self.d < 1:
            raise ConfigurationError(f"dilation must be >= 1, got d={self.d}")
        if self.c_in < 1 or self.c_out < 1:
            raise ConfigurationError(f"channel counts must be >= 1, got {self.c_in}->{self.c_out}")
        if self.g < 1:
            raise ConfigurationError(f"group count must be >= 1, got g={self.g}")
        if self.mode in (Mode.SUB_SEPARABLE, Mode.SUPER_SEPARABLE):
            if self.c_in % self.g or self.c_out % self.g:
                raise ConfigurationError(
                    f"g={self.g} must divide both c_in={self.c_in} and c_out={self.c_out} for mode {self.mode.value}"
                )

    @property
    def span(self) -> int:
        """Input positions covered by one output, minus one: (k - 1) * d."""
        return (self.k - 1) * self.d

    def with_(self, **kw) -> "ConvSpec":
        return replace(self, **kw)


# ----------------------------------------------------------------- kernels


def _glorot(rng: Rng, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


@dataclass
class Kernels:
    """Learnable tensors for one ``ConvSpec``; only the fields its mode needs are set.

    ``depthwise``/``pointwise``/``full`` hold one tensor per group (a single
    entry when the mode is ungrouped). ``merge`` is the trailing ``c_out x
    c_out`` projection of the sub-separable mode.
    """

    spec: ConvSpec
    depthwise: list = field(default_factory=list)
    pointwise: list = field(default_factory=list)
    full: list = field(default_factory=list)
    merge: Optional[Tensor] = None

    @classmethod
    def init(cls, spec: ConvSpec, rng: Optional[Rng] = None, zero: bool = False) -> "Kernels":
        """Allocate kernels for ``spec``: Glorot-uniform from ``rng``, or zeros."""

        def make(shape, fan_in, fan_out):
            if zero or rng is None:
                return Tensor(np.zeros(shape), requires_grad=True)
            return Tensor(_glorot(rng, shape, fan_in, fan_out), requires_grad=True)

        k, ci, co, g = spec.k, spec.c_in, spec.c_out, spec.g
        kern = cls(spec)
        if spec.mode is Mode.FULL:
            kern.full = [make((k, ci, co), k * ci, k * co)]
        elif spec.mode is Mode.SEPARABLE:
            kern.depthwise = [make((k, ci), k, k)]
            kern.pointwise = [make((ci, co), ci, co)]
        elif spec.mode is Mode.SUB_SEPARABLE:
            gi, go = ci // g, co // g
            kern.full = [make((k, gi, go), k * gi, k * go) for _ in range(g)]
            kern.merge = make((co, co), co, co)
        else:
            gi, go = ci // g, co // g
            kern.depthwise = [make((k, gi), k, k) for _ in range(g)]
            kern.pointwise = [make((gi, go), gi, go) for _ in range(g)]
        return kern

    def named(self) -> list:
        """``[(name, tensor)]`` in a fixed order."""
        out = []
        grouped = self.spec.mode in (Mode.SUB_SEPARABLE, Mode.SUPER_SEPARABLE)
        for label, ts in (("depthwise", self.depthwise), ("pointwise", self.pointwise), ("full", self.full)):
            for i, t in enumerate(ts):
                out.append((f"{label}{i}" if grouped else label, t))
        if self.merge is not None:
            out.append(("merge", self.merge))
        return out

    def num_params(self) -> int:
        return sum(t.data.size for _, t in self.named())


# --------------------------------------------------------------- functional


def _check_depth(y: Tensor, c: int, what: str) -> None:
    if y.ndim != 3 or y.shape[-1] != c:
        raise DimensionError(f"{what}: input shape {y.shape} does not end in depth {c}")


def pad(y: Tensor, spec: ConvSpec) -> Tensor:
    """Zero-pad the length axis so the valid convolution keeps the length.

    Causal puts all ``(k-1)*d`` zeros on the left, so output ``t`` sees only
    inputs ``<= t``. Same splits them, the extra one (if odd) going right.
    """
    total = spec.span
    if spec.padding is Padding.CAUSAL:
        return T.pad_length(y, total, 0)
    left = total // 2
    return T.pad_length(y, left, total - left)


def conv_full(W: Tensor, y: Tensor, spec: ConvSpec) -> Tensor:
    """Direct dilated convolution, ``out[t, o] = sum_{j, i} W[j, i, o] * y[t + j*d, i]``."""
    _check_depth(y, W.shape[1], "conv_full")
    return T.conv1d(y, W, spec.d)


def pointwise_conv(W: Tensor, y: Tensor) -> Tensor:
    """Per-position channel projection with ``W[c_in, c_out]``."""
    _check_depth(y, W.shape[0], "pointwise_conv")
    return T.matmul(y, W)


def depthwise_conv(W: Tensor, y: Tensor, spec: ConvSpec) -> Tensor:
    """Each channel convolved with its own length-k filter ``W[:, c]``."""
    _check_depth(y, W.shape[1], "depthwise_conv")
    return T.depthwise_conv1d(y, W, spec.d)


def sep_conv(W_p: Tensor, W_d: Tensor, y: Tensor, spec: ConvSpec) -> Tensor:
    """Depthwise convolution followed by a pointwise projection."""
    return pointwise_conv(W_p, depthwise_conv(W_d, y, spec))


def group_conv(group_kernels: Sequence[Tensor], merge: Tensor, y: Tensor, spec: ConvSpec) -> Tensor:
    """Sub-separable convolution: per-group full convolutions, concat, pointwise merge."""
    g = len(group_kernels)
    if y.shape[-1] % g:
        raise ConfigurationError(f"{g} groups do not divide depth {y.shape[-1]}")
    parts = T.split(y, g)
    mixed = T.concat([conv_full(W, x, spec) for W, x in zip(group_kernels, parts)])
    return pointwise_conv(merge, mixed)


def super_sep_conv(W_ps: Sequence[Tensor], W_ds: Sequence[Tensor], y: Tensor, spec: ConvSpec) -> Tensor:
    """Super-separable convolution: split depth, separable conv per group, concat."""
    g = len(W_ps)
    if len(W_ds) != g:
        raise ConfigurationError(f"{len(W_ds)} depthwise vs {g} pointwise group kernels")
    if y.shape[-1] % g:
        raise ConfigurationError(f"{g} groups do not divide depth {y.shape[-1]}")
    parts = T.split(y, g)
    return T.concat([sep_conv(Wp, Wd, x, spec) for Wp, Wd, x in zip(W_ps, W_ds, parts)])


def apply_padded(kern: Kernels, y: Tensor) -> Tensor:
    """Dispatch on ``kern.spec.mode`` for an already padded input."""
    spec = kern.spec
    if spec.mode is Mode.FULL:
        return conv_full(kern.full[0], y, spec)
    if spec.mode is Mode.SEPARABLE:
        return sep_conv(kern.pointwise[0], kern.depthwise[0], y, spec)
    if spec.mode is Mode.SUB_SEPARABLE:
        return group_conv(kern.full, kern.merge, y, spec)
    return super_sep_conv(kern.pointwise, kern.depthwise, y, spec)


def conv_layer(kern: Kernels, y: Tensor) -> Tensor:
    """Pad per the spec, then convolve; output length equals input length."""
    _check_depth(y, kern.spec.c_in, "conv_layer")
    return apply_padded(kern, pad(y, kern.spec))


# -------------------------------------------------------------- cost model


def _square(spec: ConvSpec) -> int:
    if spec.c_in != spec.c_out:
        raise ConfigurationError(
            f"parameter-count analysis covers the c->c case only, got {spec.c_in}->{spec.c_out}"
        )
    return spec.c_in


def table1_params(mode, k: int, c: int, g: int = 1) -> int:
    """Closed-form parameter count of a square ``c -> c`` layer (see the module table).

    Works without building a ``ConvSpec``, so ``g`` need not divide ``c`` as
    long as the count itself is a whole number (e.g. k=3, c=1000, g=16).
    """
    mode = parse_mode(mode)
    if mode is Mode.FULL:
        n = Fraction(k * c * c)
    elif mode is Mode.SEPARABLE:
        n = Fraction(k * c + c * c)
    elif mode is Mode.SUB_SEPARABLE:
        n = Fraction(k * c * c, g) + c * c
    else:
        n = k * c + Fraction(c * c, g)
    if n.denominator != 1:
        raise ConfigurationError(f"mode {mode.value} with k={k}, c={c}, g={g} has a fractional parameter count {n}")
    return int(n)


def param_count(spec: ConvSpec) -> int:
    """Closed-form parameter count of a square layer described by ``spec``."""
    return table1_params(spec.mode, spec.k, _square(spec), spec.g)


def allocated_count(spec: ConvSpec) -> int:
    """Parameter count for any channel shape, matching what ``Kernels.init`` allocates."""
    k, ci, co, g = spec.k, spec.c_in, spec.c_out, spec.g
    if spec.mode is Mode.FULL:
        return k * ci * co
    if spec.mode is Mode.SEPARABLE:
        return k * ci + ci * co
    if spec.mode is Mode.SUB_SEPARABLE:
        return k * ci * co // g + co * co
    return k * ci + ci * co // g


def flops_per_position(spec: ConvSpec) -> int:
    """Approximate multiply-adds per output position; equal to the parameter count."""
    return allocated_count(spec)


# ------------------------------------------------------- receptive field


def receptive_field(stack: Iterable[ConvSpec]) -> int:
    """``1 + sum((k - 1) * d)``; an empty stack gives 1."""
    return 1 + sum(s.span for s in stack)


def _tap_offsets(spec: ConvSpec) -> np.ndarray:
    """Input offsets (relative to the output position) read by each tap."""
    base = spec.span if spec.padding is Padding.CAUSAL else spec.span // 2
    return np.arange(spec.k) * spec.d - base


@dataclass
class CoverageProfile:
    """Number of tap paths from each input offset to one output position."""

    offsets: list
    counts: list

    @property
    def dead_zones(self) -> list:
        return [o for o, n in zip(self.offsets, self.counts) if n == 0]

    def as_dict(self) -> dict:
        return dict(zip(self.offsets, self.counts))


def coverage_profile(stack: Sequence[ConvSpec]) -> CoverageProfile:
    """Enumerate tap paths through the stack and histogram their total offsets."""
    lo = 0
    counts = np.ones(1, dtype=object)
    for spec in stack:
        offs = _tap_offsets(spec)
        taps = np.zeros(spec.span + 1, dtype=object)
        taps[offs - offs[0]] = 1
        counts = np.convolve(counts, taps)
        lo += int(offs[0])
    offsets = list(range(lo, lo + len(counts)))
    return CoverageProfile(offsets, [int(n) for n in counts])


def probe_receptive_field(stack: Sequence[ConvSpec], rng: Optional[Rng] = None) -> tuple:
    """Measure the receptive field by backpropagating from one output position.

    Each layer is run as a single-channel depthwise convolution with strictly
    positive random taps, so no two paths can cancel; the gradient of the
    probed output is then nonzero exactly at covered input offsets.
    Returns ``(extent, nonzero_offsets)``.
    """
    rng = rng or Rng(0)
    rf = receptive_field(stack)
    n = 2 * rf + 1
    centre = rf
    x = Tensor(np.ones((1, n, 1)), requires_grad=True)
    with T.Tape() as tape:
        h = x
        for spec in stack:
            one = spec.with_(c_in=1, c_out=1, mode=Mode.SEPARABLE, g=1)
            w = Tensor(rng.uniform(0.5, 1.5, (spec.k, 1)))
            h = depthwise_conv(w, pad(h, one), one)
        probe = T.tsum(T.depth_slice(T.transpose(h), centre, centre + 1))
        tape.backward(probe)
    nz = np.nonzero(x.grad[0, :, 0])[0] - centre
    if nz.size == 0:
        return 0, []
    return int(nz.max() - nz.min() + 1), [int(v) for v in nz]


def undilated_alternative(stack: Sequence[ConvSpec]) -> list:
    """Same number of layers, dilation 1, windows grown to match the receptive field.

    The extra span is spread as evenly as possible, earlier layers getting
    the remainder. Modes, groups, channels and padding are kept.
    """
    if not stack:
        return []
    span = receptive_field(stack) - 1
    n = len(stack)
    base, rem = divmod(span, n)
    return [s.with_(k=base + (1 if i < rem else 0) + 1, d=1) for i, s in enumerate(stack)]
