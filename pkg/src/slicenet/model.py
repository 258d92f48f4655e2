"""The SliceNet encoder / IO-mixer / decoder stack, parameter store and checkpoints.

Token id conventions: 0 = pad, 1 = start, 2 = end; payload ids follow.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .convops import ConvSpec, Mode, Padding, allocated_count, parse_mode
from .errors import ConfigurationError, InputError
from .layers import AttentionModule, ConvModule, ConvModuleConfig, ConvStep, add_timing
from .tensor import Rng, Tensor

PAD, START, END = 0, 1, 2
NUM_RESERVED = 3

CHECKPOINT_MAGIC = b"SLICENET1\n"


@dataclass
class ModelConfig:
    depth: int = 64
    vocab_src: int = 16
    vocab_tgt: int = 16
    encoder_modules: int = 6
    decoder_modules: int = 4
    module: ConvModuleConfig = field(default_factory=ConvModuleConfig)
    attention_steps: list = field(default_factory=lambda: [(5, 1), (5, 4)])
    mixer_k: int = 3
    mixer_d: int = 1
    mode: Mode = Mode.SEPARABLE
    groups: list = field(default_factory=lambda: [1])
    share_attention_kernels: bool = False
    attention_scale_inside: bool = False
    tie_projection: bool = True
    # multiplier on the output logits; None means 1/sqrt(depth), which keeps
    # the initial prediction close to uniform
    logit_scale: Optional[float] = None

    def __post_init__(self):
        self.mode = parse_mode(self.mode)
        if isinstance(self.module, dict):
            self.module = ConvModuleConfig(**self.module)
        self.attention_steps = [tuple(int(v) for v in s) for s in self.attention_steps]
        self.groups = [int(g) for g in self.groups]
        if self.depth < 2 or self.depth % 2:
            raise ConfigurationError(f"depth must be even and >= 2 (timing signal), got {self.depth}")
        for name in ("vocab_src", "vocab_tgt"):
            if getattr(self, name) < NUM_RESERVED + 1:
                raise ConfigurationError(f"{name} must be >= {NUM_RESERVED + 1} (pad, start, end + payload)")
        if self.encoder_modules < 0 or self.decoder_modules < 0:
            raise ConfigurationError("module counts must be >= 0")
        if len(self.attention_steps) != 2:
            raise ConfigurationError("attention_steps needs exactly two (k, d) pairs")
        if not self.groups or any(g < 1 for g in self.groups):
            raise ConfigurationError(f"groups schedule must be a non-empty list of positive ints, got {self.groups}")
        if self.mode is Mode.SUPER_SEPARABLE and len(self.groups) > 1:
            for a, b in zip(self.groups, self.groups[1:] + self.groups[:1]):
                if math.gcd(a, b) != 1:
                    raise ConfigurationError(
                        f"super-separable group schedule must alternate coprime values, got {self.groups}"
                    )
        if self.logit_scale is not None and not (self.logit_scale > 0 and math.isfinite(self.logit_scale)):
            raise ConfigurationError(f"logit_scale must be a positive finite number, got {self.logit_scale}")
        # every spec of the plan validates divisibility
        layer_plan(self)


def _group_for(cfg: ModelConfig, index: int) -> int:
    if cfg.mode in (Mode.FULL, Mode.SEPARABLE):
        return 1
    return cfg.groups[index % len(cfg.groups)]


def layer_plan(cfg: ModelConfig) -> list:
    """Every convolution step of the model as ``(name, ConvSpec)``, in build order.

    Group counts of grouped modes follow ``cfg.groups`` cyclically along
    this order, so consecutive steps alternate for a two-entry schedule.
    Encoder steps use Same padding; everything on the target side is Causal.
    """
    c = cfg.depth
    plan = []

    def add(name, k, d, c_in, padding):
        g = _group_for(cfg, len(plan))
        try:
            spec = ConvSpec(k=k, d=d, c_in=c_in, c_out=c, mode=cfg.mode, g=g, padding=padding)
        except ConfigurationError as e:
            raise ConfigurationError(f"{name}: {e}") from None
        plan.append((name, spec))

    for m in range(1, cfg.encoder_modules + 1):
        for s, (k, d) in enumerate(cfg.module.steps, start=1):
            add(f"encoder/module{m}/step{s}", k, d, c, Padding.SAME)
    (k1, d1), (k2, d2) = cfg.attention_steps
    add("mixer/attention/step1", k1, d1, c, Padding.CAUSAL)
    add("mixer/attention/step2", k2, d2, c, Padding.CAUSAL)
    add("mixer/step", cfg.mixer_k, cfg.mixer_d, 2 * c, Padding.CAUSAL)
    for m in range(1, cfg.decoder_modules + 1):
        for s, (k, d) in enumerate(cfg.module.steps, start=1):
            add(f"decoder/module{m}/conv/step{s}", k, d, c, Padding.CAUSAL)
        add(f"decoder/module{m}/attention/step1", k1, d1, c, Padding.CAUSAL)
        add(f"decoder/module{m}/attention/step2", k2, d2, c, Padding.CAUSAL)
    return plan


def expected_counts(cfg: ModelConfig) -> tuple:
    """``(embedding, non_embedding)`` parameter counts computed from the plan alone."""
    plan = layer_plan(cfg)
    if cfg.share_attention_kernels:
        plan = [(n, s) for n, s in plan if not n.endswith("attention/step2")]
    non_emb = sum(allocated_count(s) + 2 for _, s in plan)
    emb = (cfg.vocab_src + cfg.vocab_tgt) * cfg.depth
    if not cfg.tie_projection:
        non_emb += cfg.depth * cfg.vocab_tgt
    return emb, non_emb


class ParamStore:
    """Ordered, uniquely named learnable tensors."""

    EMBEDDING_PREFIX = "embedding/"

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count_parameters(self) -> tuple:
        emb = sum(t.data.size for n, t in self.items() if n.startswith(self.EMBEDDING_PREFIX))
        total = sum(t.data.size for t in self._params.values())
        return emb, total - emb

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self.items())

    def load_state(self, state: dict) -> None:
        """Copy values in; names and shapes must match exactly."""
        mine, theirs = list(self._params), list(state)
        for a, b in zip(mine, theirs):
            if a != b:
                raise ConfigurationError(f"parameter mismatch: model has {a!r}, checkpoint has {b!r}")
        if len(mine) != len(theirs):
            extra = mine[len(theirs)] if len(mine) > len(theirs) else theirs[len(mine)]
            raise ConfigurationError(f"parameter mismatch: {extra!r} present on one side only")
        for n in mine:
            if self._params[n].shape != state[n].shape:
                raise ConfigurationError(
                    f"parameter mismatch: {n!r} has shape {self._params[n].shape}, checkpoint {state[n].shape}"
                )
        for n in mine:
            self._params[n].data = np.array(state[n], dtype=np.float64)


def count_parameters(store: ParamStore) -> tuple:
    """``(embedding, non_embedding)`` scalar counts."""
    return store.count_parameters()


def shift_right(tgt: np.ndarray) -> np.ndarray:
    """Decoder input: a start token, then the targets without their last position."""
    tgt = np.asarray(tgt, dtype=np.int64)
    out = np.empty_like(tgt)
    out[..., 0] = START
    out[..., 1:] = tgt[..., :-1]
    return out


class SliceNet:
    """Autoregressive convolutional seq2seq model.

    ``logits = project(Decoder(IOMixer(InputEncoder(src), OutputEmbedding(shifted tgt))))``
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, zero: bool = False):
        self.cfg = cfg
        rng = Rng(seed)
        c = cfg.depth
        plan = dict(layer_plan(cfg))
        self.params = ParamStore()

        def emb(name, vocab):
            lim = math.sqrt(6.0 / (vocab + c))
            data = np.zeros((vocab, c)) if zero else rng.uniform(-lim, lim, (vocab, c))
            return self.params.add(name, Tensor(data, requires_grad=True))

        self.src_embedding = emb("embedding/source", cfg.vocab_src)
        self.tgt_embedding = emb("embedding/target", cfg.vocab_tgt)

        def specs(prefix, n):
            return [plan[f"{prefix}{i}"] for i in range(1, n + 1)]

        self.encoder = []
        for m in range(1, cfg.encoder_modules + 1):
            mod = ConvModule(specs(f"encoder/module{m}/step", len(cfg.module.steps)), cfg.module, rng, zero)
            self.encoder.append(mod)
            self._register(f"encoder/module{m}", mod)

        self.mixer_attention = self._attention("mixer/attention", plan, rng, zero)
        self.mixer_step = ConvStep(plan["mixer/step"], rng, zero)
        self._register("mixer/step", self.mixer_step)

        self.decoder = []
        for m in range(1, cfg.decoder_modules + 1):
            conv = ConvModule(specs(f"decoder/module{m}/conv/step", len(cfg.module.steps)), cfg.module, rng, zero)
            self._register(f"decoder/module{m}/conv", conv)
            attn = self._attention(f"decoder/module{m}/attention", plan, rng, zero)
            self.decoder.append((conv, attn))

        self.projection: Optional[Tensor] = None
        if not cfg.tie_projection:
            lim = math.sqrt(6.0 / (c + cfg.vocab_tgt))
            data = np.zeros((c, cfg.vocab_tgt)) if zero else rng.uniform(-lim, lim, (c, cfg.vocab_tgt))
            self.projection = self.params.add("projection", Tensor(data, requires_grad=True))

    def _attention(self, prefix, plan, rng, zero) -> AttentionModule:
        mod = AttentionModule(
            [plan[f"{prefix}/step1"], plan[f"{prefix}/step2"]],
            rng,
            zero,
            share_kernels=self.cfg.share_attention_kernels,
            scale_inside=self.cfg.attention_scale_inside,
        )
        self._register(prefix, mod)
        return mod

    def _register(self, prefix: str, module) -> None:
        for name, t in module.named():
            self.params.add(f"{prefix}/{name}", t)

    # ------------------------------------------------------------ forward

    def _check_ids(self, ids: np.ndarray, vocab: int, what: str) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise InputError(f"{what} ids must be [batch, length] with length >= 1, got shape {ids.shape}")
        if ids.min() < 0 or ids.max() >= vocab:
            bad = int(ids[(ids < 0) | (ids >= vocab)][0])
            raise InputError(f"{what} id {bad} outside vocabulary of size {vocab}")
        return ids

    def encode(
        self,
        src: np.ndarray,
        src_mask: Optional[np.ndarray] = None,
        training: bool = False,
        rng: Optional[Rng] = None,
    ) -> Tensor:
        """InputEncoder: embed, add timing, run the encoder modules (Same padding)."""
        src = self._check_ids(src, self.cfg.vocab_src, "source")
        x = add_timing(T.embedding(self.src_embedding, src))
        step_mask = None
        if src_mask is not None and not np.all(src_mask):
            step_mask = np.asarray(src_mask, dtype=np.float64)[..., None]
        for mod in self.encoder:
            x = mod(x, training, rng, step_mask)
        return x

    def embed_targets(self, tgt_in: np.ndarray) -> Tensor:
        tgt_in = self._check_ids(tgt_in, self.cfg.vocab_tgt, "target")
        return T.embedding(self.tgt_embedding, tgt_in)

    def io_mixer(self, encoded: Tensor, out_emb: Tensor, src_mask=None) -> Tensor:
        """Causal k=3 step over ``[attention(encoded, out_emb); out_emb]`` (depth 2c)."""
        joined = T.concat([self.mixer_attention(encoded, out_emb, src_mask), out_emb])
        return self.mixer_step(joined)

    def attn_conv_module(self, index: int, x: Tensor, source: Tensor, training=False, rng=None, src_mask=None):
        """ConvModule(x) + attention(source, x)."""
        conv, attn = self.decoder[index]
        return T.add(conv(x, training, rng), attn(source, x, src_mask))

    def decode_states(self, encoded: Tensor, tgt_in: np.ndarray, src_mask=None, training=False, rng=None) -> Tensor:
        h = self.io_mixer(encoded, self.embed_targets(tgt_in), src_mask)
        for i in range(len(self.decoder)):
            h = self.attn_conv_module(i, h, encoded, training, rng, src_mask)
        return h

    def project(self, h: Tensor) -> Tensor:
        w = T.transpose(self.tgt_embedding) if self.projection is None else self.projection
        scale = self.cfg.logit_scale
        if scale is None:
            scale = 1.0 / math.sqrt(self.cfg.depth)
        return T.scale(T.matmul(h, w), scale)

    def decoder_forward(
        self,
        src: np.ndarray,
        tgt_in: np.ndarray,
        src_mask: Optional[np.ndarray] = None,
        training: bool = False,
        rng: Optional[Rng] = None,
    ) -> Tensor:
        """Logits ``[batch, tgt_len, vocab_tgt]`` for already shifted decoder inputs."""
        enc = self.encode(src, src_mask, training, rng)
        return self.project(self.decode_states(enc, tgt_in, src_mask, training, rng))

    def logits(self, src, tgt, src_mask=None, training=False, rng=None) -> Tensor:
        """Teacher-forced logits predicting ``tgt`` (shifting is done here)."""
        return self.decoder_forward(src, shift_right(tgt), src_mask, training, rng)

    def next_log_probs(self, encoded: Tensor, prefixes: np.ndarray, src_mask=None) -> np.ndarray:
        """Log-distribution over the next token for each decoder-input prefix.

        ``prefixes`` is ``[batch, t]`` and starts with the start token;
        ``encoded`` must have the same batch size (or 1, then broadcast).
        """
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if encoded.shape[0] != prefixes.shape[0]:
            encoded = Tensor._wrap(np.repeat(encoded.data, prefixes.shape[0], axis=0))
            if src_mask is not None:
                src_mask = np.repeat(np.asarray(src_mask), prefixes.shape[0], axis=0)
        last = self.project(self.decode_states(encoded, prefixes, src_mask)).data[:, -1, :]
        m = last.max(axis=-1, keepdims=True)
        z = last - m
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def count_parameters(self) -> tuple:
        return self.params.count_parameters()


# --------------------------------------------------------------- checkpoints


def encode_checkpoint(store) -> bytes:
    """Serialize ``store`` (a ParamStore or ``{name: array}``) to checkpoint bytes."""
    items = store.items()
    parts = [CHECKPOINT_MAGIC]
    n = 0
    for name, value in items:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
        n += 1
    parts.append(struct.pack("<Q", n))
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ConfigurationError("not a SLICENET1 checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    end = len(blob) - 8
    try:
        while pos < end:
            (ln,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            out[name] = arr.astype(np.float64)
        (count,) = struct.unpack_from("<Q", blob, end)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise ConfigurationError(f"truncated or corrupt checkpoint: {e}") from None
    if pos != end or count != len(out):
        raise ConfigurationError(f"corrupt checkpoint: trailer says {count} parameters, read {len(out)}")
    return out


def save_checkpoint(store, path) -> None:
    Path(path).write_bytes(encode_checkpoint(store))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes())
