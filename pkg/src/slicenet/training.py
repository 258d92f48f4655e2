"""Loss/metrics, Adam with warmup, synthetic tasks, corpora and the training loop."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DataExhaustedError, InputError, NonFiniteError
from .model import END, NUM_RESERVED, PAD, ParamStore, SliceNet, save_checkpoint
from .tensor import Rng

log = logging.getLogger(__name__)

TASKS = ("copy", "reverse", "toy-translate")


@dataclass
class Batch:
    src: np.ndarray
    tgt: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray

    @classmethod
    def from_sequences(cls, srcs: Sequence[Sequence[int]], tgts: Sequence[Sequence[int]]) -> "Batch":
        """Right-pad with the pad id; masks mark the non-pad positions."""
        if len(srcs) != len(tgts) or not srcs:
            raise InputError(f"need equally many (>= 1) sources and targets, got {len(srcs)} and {len(tgts)}")
        src = _pad(srcs)
        tgt = _pad(tgts)
        return cls(src, tgt, src != PAD, tgt != PAD)

    def __len__(self) -> int:
        return self.src.shape[0]


def _pad(seqs) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


# ------------------------------------------------------------------ metrics


def _log_probs(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _n_unmasked(mask) -> int:
    n = int(np.asarray(mask).sum())
    if n == 0:
        raise ContractError("every position is masked; the metric is undefined")
    return n


def neg_log_perplexity(logits, targets: np.ndarray, mask: np.ndarray) -> float:
    """Mean log-probability of the true token over unmasked positions (<= 0)."""
    lg = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    n = _n_unmasked(mask)
    lp = np.take_along_axis(_log_probs(lg), np.asarray(targets)[..., None], axis=-1)[..., 0]
    return float(np.sum(lp * mask)) / n


def per_token_accuracy(logits, targets: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of unmasked positions whose argmax (lowest id on ties) is the target."""
    lg = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    n = _n_unmasked(mask)
    hit = (np.argmax(lg, axis=-1) == np.asarray(targets)) & np.asarray(mask, dtype=bool)
    return float(hit.sum()) / n


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamConfig:
    lr: float = 2e-3
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    def rate(self, step: int) -> float:
        """Linear warmup to ``lr`` over ``warmup`` steps, then ``lr * sqrt(warmup / step)``."""
        s = step + 1
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(s / self.warmup, math.sqrt(self.warmup / s))


class Adam:
    """Adam over a ParamStore, with the schedule of ``AdamConfig.rate``."""

    def __init__(self, store: ParamStore, cfg: AdamConfig):
        self.store = store
        self.cfg = cfg
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.t = 0

    def step(self) -> None:
        """Apply one update from the gradients currently stored on the parameters."""
        cfg = self.cfg
        for name, p in self.store.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in parameter {name!r} at step {self.t}")
        lr = cfg.rate(self.t)
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - lr * (m / corr1) / (np.sqrt(v / corr2) + cfg.eps)


def optimizer_step(opt: Adam) -> None:
    opt.step()


# ------------------------------------------------------------ synthetic data


def _bigram_table(vocab: int, grammar_seed: int) -> np.ndarray:
    """``table[prev, cur]``: output payload id for each (previous, current) source pair.

    Row ``PAD`` is used for the first position, which has no predecessor.
    """
    rng = Rng(grammar_seed).spawn(0x7A5C)
    return rng.integers(NUM_RESERVED, vocab, size=(vocab, vocab))


def _translate(src: np.ndarray, table: np.ndarray) -> np.ndarray:
    prev = np.concatenate([np.full((src.shape[0], 1), PAD), src[:, :-1]], axis=1)
    return table[prev, src]


def synth_task(
    name: str,
    vocab: int,
    max_len: int,
    seed: int,
    batch_size: int = 32,
    min_len: int = 1,
    grammar_seed: int = 0,
) -> Iterator[Batch]:
    """Endless stream of batches for a synthetic task.

    Every batch draws one source length in ``[min_len, max_len]`` shared by
    all its rows, so sources need no padding. Targets end with the end id.

    * ``copy``: target = source
    * ``reverse``: target = reversed source
    * ``toy-translate``: target[i] = table[source[i-1], source[i]], a fixed
      bigram substitution determined by ``grammar_seed`` only
    """
    if name not in TASKS:
        raise ConfigurationError(f"unknown task {name!r}; expected one of {TASKS}")
    if vocab < NUM_RESERVED + 1:
        raise ConfigurationError(f"vocab must be >= {NUM_RESERVED + 1} (pad, start, end + payload), got {vocab}")
    if not 1 <= min_len <= max_len:
        raise ConfigurationError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    rng = Rng(seed)
    table = _bigram_table(vocab, grammar_seed) if name == "toy-translate" else None
    end_col = np.full((batch_size, 1), END, dtype=np.int64)
    while True:
        n = int(rng.integers(min_len, max_len + 1))
        src = rng.integers(NUM_RESERVED, vocab, size=(batch_size, n)).astype(np.int64)
        if name == "copy":
            out = src
        elif name == "reverse":
            out = src[:, ::-1]
        else:
            out = _translate(src, table)
        tgt = np.concatenate([out, end_col], axis=1)
        yield Batch(src, tgt, np.ones(src.shape, bool), np.ones(tgt.shape, bool))


def task_target(name: str, src: Sequence[int], vocab: int, grammar_seed: int = 0) -> list:
    """Reference target payload for one source (without the end id)."""
    s = np.asarray([src], dtype=np.int64)
    if name == "copy":
        return list(s[0])
    if name == "reverse":
        return list(s[0, ::-1])
    if name == "toy-translate":
        return list(_translate(s, _bigram_table(vocab, grammar_seed))[0])
    raise ConfigurationError(f"unknown task {name!r}")


def fixed_batches(stream: Iterator[Batch], n: int) -> list:
    return [next(stream) for _ in range(n)]


# ------------------------------------------------------------------ corpora


RESERVED_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")
UNK = 3


@dataclass
class Vocabulary:
    tokens: list

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, lines: Iterable[str], min_count: int = 1) -> "Vocabulary":
        """Reserved tokens, then words with count >= ``min_count`` by falling frequency (ties alphabetical)."""
        counts = Counter(tok for line in lines for tok in line.split())
        words = sorted((w for w, c in counts.items() if c >= min_count and w not in RESERVED_TOKENS),
                       key=lambda w: (-counts[w], w))
        return cls(list(RESERVED_TOKENS) + words)

    @classmethod
    def numeric(cls, size: int) -> "Vocabulary":
        """Vocabulary for synthetic tasks: payload id ``i`` is spelled ``str(i)``."""
        return cls(list(RESERVED_TOKENS[:NUM_RESERVED]) + [str(i) for i in range(NUM_RESERVED, size)])

    def encode(self, line: str) -> list:
        unk = self.index.get("<unk>")
        out = []
        for tok in line.split():
            i = self.index.get(tok, unk)
            if i is None:
                raise InputError(f"token {tok!r} is not in the vocabulary")
            out.append(i)
        return out

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i not in (PAD, 1, END))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def corpus_stream(
    src_path,
    tgt_path,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    batch_size: int,
    seed: int,
    repeat: bool = True,
) -> Iterator[Batch]:
    """Batches from two aligned one-sequence-per-line files.

    Each epoch shuffles the pairs with ``seed``. With ``repeat=False`` the
    stream raises :class:`DataExhaustedError` once an epoch is used up.
    """
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise InputError(f"corpus files are not aligned: {len(src_lines)} vs {len(tgt_lines)} lines")
    pairs = [
        (src_vocab.encode(s), tgt_vocab.encode(t) + [END])
        for s, t in zip(src_lines, tgt_lines)
        if s.split()
    ]
    if not pairs:
        raise InputError("corpus is empty")
    rng = Rng(seed)
    epoch = 0
    while True:
        order = rng.permutation(len(pairs))
        for i in range(0, len(order), batch_size):
            chunk = [pairs[j] for j in order[i : i + batch_size]]
            yield Batch.from_sequences([p[0] for p in chunk], [p[1] for p in chunk])
        epoch += 1
        if not repeat:
            raise DataExhaustedError(f"corpus exhausted after {epoch} epoch(s) and repeat is off")


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    dropout: bool = True
    eval_every: int = 100
    eval_batches: int = 4
    target_accuracy: Optional[float] = None
    optimizer: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = AdamConfig(**self.optimizer)
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1 or self.eval_batches < 1:
            raise ConfigurationError("steps, batch_size, eval_every and eval_batches must all be >= 1")


@dataclass
class EvalRecord:
    step: int
    loss: float
    neg_log_ppl: float
    accuracy: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


@dataclass
class TrainResult:
    losses: list
    evals: list
    best_step: int
    best_neg_log_ppl: float

    @property
    def final(self) -> EvalRecord:
        return self.evals[-1]


def train_step(model: SliceNet, opt: Adam, batch: Batch, training: bool, rng: Optional[Rng]) -> float:
    model.params.zero_grad()
    with T.Tape() as tape:
        logits = model.logits(batch.src, batch.tgt, batch.src_mask, training=training, rng=rng)
        loss = T.masked_nll(logits, batch.tgt, batch.tgt_mask)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"non-finite loss {value} at step {opt.t}")
        tape.backward(loss)
    opt.step()
    return value


def evaluate(model: SliceNet, batches: Sequence[Batch]) -> tuple:
    """``(neg_log_ppl, accuracy)`` over all batches, dropout off, pooled over tokens."""
    total_lp, total_hit, total_n = 0.0, 0, 0
    for b in batches:
        lg = model.logits(b.src, b.tgt, b.src_mask).data
        mask = np.asarray(b.tgt_mask, dtype=bool)
        lp = np.take_along_axis(_log_probs(lg), b.tgt[..., None], axis=-1)[..., 0]
        total_lp += float(np.sum(lp * mask))
        total_hit += int(((np.argmax(lg, axis=-1) == b.tgt) & mask).sum())
        total_n += int(mask.sum())
    return total_lp / total_n, total_hit / total_n


def train_loop(
    model: SliceNet,
    stream: Iterator[Batch],
    cfg: TrainConfig,
    eval_set: Sequence[Batch],
    out_dir=None,
    progress: Optional[Callable[[EvalRecord], None]] = None,
) -> TrainResult:
    """Train for ``cfg.steps`` steps, evaluating every ``cfg.eval_every``.

    With ``out_dir`` set, eval records are appended to ``metrics.jsonl``,
    ``best.ckpt`` is rewritten whenever the eval log-perplexity improves and
    ``final.ckpt`` is written at the end. Stops early once eval accuracy
    reaches ``cfg.target_accuracy`` (when set).
    """
    opt = Adam(model.params, cfg.optimizer)
    drop_rng = Rng(cfg.seed).spawn(0xD80)
    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = (out / "metrics.jsonl").open("a", encoding="utf-8")
    losses: list = []
    evals: list = []
    best = (-1, -math.inf)
    try:
        for step in range(cfg.steps):
            try:
                batch = next(stream)
            except StopIteration:
                raise DataExhaustedError(f"data stream ended at step {step}") from None
            losses.append(train_step(model, opt, batch, cfg.dropout, drop_rng))
            done = step + 1
            if done % cfg.eval_every == 0 or done == cfg.steps:
                nlp, acc = evaluate(model, eval_set)
                rec = EvalRecord(done, losses[-1], nlp, acc)
                evals.append(rec)
                if metrics is not None:
                    metrics.write(rec.to_json() + "\n")
                    metrics.flush()
                if nlp > best[1]:
                    best = (done, nlp)
                    if out is not None:
                        save_checkpoint(model.params, out / "best.ckpt")
                if progress is not None:
                    progress(rec)
                if cfg.target_accuracy is not None and acc >= cfg.target_accuracy:
                    break
    finally:
        if metrics is not None:
            metrics.close()
    if not evals or evals[-1].step != len(losses):
        nlp, acc = evaluate(model, eval_set)
        evals.append(EvalRecord(len(losses), losses[-1], nlp, acc))
    if out is not None:
        save_checkpoint(model.params, out / "final.ckpt")
    return TrainResult(losses, evals, best[0], best[1])
