"""Building blocks: layer norm, convolution steps and modules, timing signal,
inner-product attention and the attention module."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .convops import ConvSpec, Kernels, conv_layer
from .errors import ConfigurationError, DimensionError
from .tensor import Rng, Tensor

LN_EPS = 1e-6


@dataclass
class LayerNormParams:
    """Scalar gain and bias shared by every position and channel of one site."""

    gain: Tensor = field(default_factory=lambda: Tensor(1.0, requires_grad=True))
    bias: Tensor = field(default_factory=lambda: Tensor(0.0, requires_grad=True))

    def named(self) -> list:
        return [("ln_gain", self.gain), ("ln_bias", self.bias)]


def layer_norm(x: Tensor, params: LayerNormParams, eps: float = LN_EPS) -> Tensor:
    """``gain * (x - mean) / sqrt(var + eps) + bias`` over the depth axis.

    The variance is the population one (divide by depth).
    """
    if x.ndim == 3:
        return T.layer_norm(x, params.gain, params.bias, eps)
    shape = x.shape
    out = T.layer_norm(T.reshape(x, (1, -1, shape[-1])), params.gain, params.bias, eps)
    return T.reshape(out, shape)


class ConvStep:
    """``LN(conv(ReLU(x)))`` with the convolution chosen by the spec's mode."""

    def __init__(self, spec: ConvSpec, rng: Optional[Rng] = None, zero: bool = False):
        self.spec = spec
        self.kernels = Kernels.init(spec, rng, zero=zero)
        self.norm = LayerNormParams()

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        if x.shape[-1] != self.spec.c_in:
            raise DimensionError(f"conv step expects depth {self.spec.c_in}, got shape {x.shape}")
        h = T.relu(x)
        if mask is not None:
            h = T.mul(h, Tensor._wrap(mask))
        return layer_norm(conv_layer(self.kernels, h), self.norm)

    def named(self) -> list:
        return self.kernels.named() + self.norm.named()


@dataclass
class ConvModuleConfig:
    """Step windows/dilations, residual positions (1-based) and dropout rate."""

    steps: list = field(default_factory=lambda: [(3, 1), (3, 1), (15, 1), (15, 8)])
    residual_after: tuple = (2, 4)
    dropout_p: float = 0.5

    def __post_init__(self):
        self.steps = [tuple(int(v) for v in s) for s in self.steps]
        self.residual_after = tuple(sorted(int(i) for i in self.residual_after))
        if not self.steps:
            raise ConfigurationError("a conv module needs at least one step")
        for k, d in self.steps:
            if k < 1 or d < 1:
                raise ConfigurationError(f"step (k={k}, d={d}) needs k >= 1 and d >= 1")
        if any(i < 1 or i > len(self.steps) for i in self.residual_after):
            raise ConfigurationError(
                f"residual indices {self.residual_after} must lie in 1..{len(self.steps)}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")


class ConvModule:
    """Stack of conv steps with residual adds of the module input.

    With the default wiring this is::

        h1 = step1(x);  h2 = x + step2(h1);  h3 = step3(h2);  h4 = x + step4(h3)

    followed by dropout of ``h4`` while training.
    """

    def __init__(self, specs: Sequence[ConvSpec], cfg: ConvModuleConfig, rng: Optional[Rng] = None, zero=False):
        for s in specs:
            if s.c_in != s.c_out or s.c_in != specs[0].c_in:
                raise ConfigurationError(
                    f"conv module steps must preserve depth for the residuals, got {s.c_in}->{s.c_out}"
                )
        if len(specs) != len(cfg.steps):
            raise ConfigurationError(f"{len(specs)} specs for {len(cfg.steps)} configured steps")
        self.cfg = cfg
        self.steps = [ConvStep(s, rng, zero=zero) for s in specs]

    def __call__(
        self,
        x: Tensor,
        training: bool = False,
        rng: Optional[Rng] = None,
        mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        h = x
        for i, step in enumerate(self.steps, start=1):
            h = step(h, mask)
            if i in self.cfg.residual_after:
                h = T.add(x, h)
        if training and self.cfg.dropout_p > 0.0:
            if rng is None:
                raise ConfigurationError("training-mode dropout needs an Rng")
            h = T.dropout(h, self.cfg.dropout_p, rng)
        return h

    def named(self) -> list:
        return [(f"step{i}/{n}", t) for i, s in enumerate(self.steps, start=1) for n, t in s.named()]


@lru_cache(maxsize=64)
def _timing(length: int, depth: int) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)[:, None]
    pair = np.arange(depth // 2, dtype=np.float64)[None, :]
    angle = t / np.power(10000.0, 2.0 * pair / depth)
    out = np.empty((length, depth))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    out.flags.writeable = False
    return out


def timing_signal(length: int, depth: int) -> np.ndarray:
    """Sinusoidal position signal ``[length, depth]``.

    Channel ``2i`` holds ``sin(t / 10000**(2i/depth))`` and channel ``2i+1``
    the matching cosine.
    """
    if depth % 2:
        raise ConfigurationError(f"timing signal needs an even depth, got {depth}")
    if length < 1:
        raise ConfigurationError(f"timing signal needs length >= 1, got {length}")
    return _timing(int(length), int(depth))


def add_timing(x: Tensor) -> Tensor:
    return T.add(x, Tensor._wrap(timing_signal(x.shape[-2], x.shape[-1])))


def attention_weights(source: Tensor, target: Tensor, source_mask=None, scale_inside: bool = False) -> Tensor:
    """Softmax over source positions of ``target . source^T``."""
    if source.shape[-1] != target.shape[-1]:
        raise DimensionError(f"attend: source depth {source.shape[-1]} != target depth {target.shape[-1]}")
    logits = T.matmul(target, T.transpose(source))
    if scale_inside:
        logits = T.scale(logits, 1.0 / math.sqrt(source.shape[-1]))
    mask = None
    if source_mask is not None:
        mask = np.asarray(source_mask, dtype=bool)
        mask = mask[..., None, :]
    return T.softmax(logits, mask)


def attend(
    source: Tensor,
    target: Tensor,
    source_mask: Optional[np.ndarray] = None,
    scale_inside: bool = False,
) -> Tensor:
    """Inner-product attention: ``softmax(target . source^T) . source / sqrt(depth)``.

    By default the ``1/sqrt(depth)`` factor multiplies the attended vectors
    after the softmax; ``scale_inside=True`` moves it onto the logits.
    ``source_mask`` is ``[batch, m]`` (True = real position).
    """
    w = attention_weights(source, target, source_mask, scale_inside)
    out = T.matmul(w, source)
    if scale_inside:
        return out
    return T.scale(out, 1.0 / math.sqrt(source.shape[-1]))


class AttentionModule:
    """``attend(source, step2(step1(target + timing)))``.

    ``share_kernels`` reuses the first step's parameters for the second.
    """

    def __init__(
        self,
        specs: Sequence[ConvSpec],
        rng: Optional[Rng] = None,
        zero: bool = False,
        share_kernels: bool = False,
        scale_inside: bool = False,
    ):
        if len(specs) != 2:
            raise ConfigurationError(f"the attention module has two conv steps, got {len(specs)}")
        self.steps = [ConvStep(specs[0], rng, zero=zero)]
        if share_kernels:
            if specs[0].with_(d=specs[1].d) != specs[1]:
                raise ConfigurationError("shared attention kernels need identical specs up to dilation")
            second = ConvStep.__new__(ConvStep)
            second.spec = specs[1]
            second.kernels = Kernels(specs[1], **{
                "depthwise": self.steps[0].kernels.depthwise,
                "pointwise": self.steps[0].kernels.pointwise,
                "full": self.steps[0].kernels.full,
                "merge": self.steps[0].kernels.merge,
            })
            second.norm = self.steps[0].norm
            self.steps.append(second)
        else:
            self.steps.append(ConvStep(specs[1], rng, zero=zero))
        self.shared = share_kernels
        self.scale_inside = scale_inside

    def query(self, target: Tensor) -> Tensor:
        return self.steps[1](self.steps[0](add_timing(target)))

    def __call__(self, source: Tensor, target: Tensor, source_mask=None) -> Tensor:
        return attend(source, self.query(target), source_mask, self.scale_inside)

    def named(self) -> list:
        steps = self.steps[:1] if self.shared else self.steps
        return [(f"step{i}/{n}", t) for i, s in enumerate(steps, start=1) for n, t in s.named()]
