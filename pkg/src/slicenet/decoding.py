"""Greedy and beam-search generation with a GNMT-style length penalty.

Sequences returned here are the generated tokens, so they include the end
id when the hypothesis finished and exclude the start id. Every search step
runs a full forward pass over the current prefixes; there is no cached
incremental state to get out of sync.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, InputError
from .model import END, PAD, START, SliceNet
from .tensor import Tensor

# never proposed during search
_FORBIDDEN = (PAD, START)


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 4
    alpha: float = 0.0
    # None: 2 * source length + 8
    max_len: Optional[int] = None

    def __post_init__(self):
        if int(self.beam) != self.beam or self.beam < 1:
            raise ConfigurationError(f"beam size must be an integer >= 1, got {self.beam}")
        if not self.alpha >= 0.0:
            raise ConfigurationError(f"length penalty alpha must be >= 0, got {self.alpha}")
        if self.max_len is not None and self.max_len < 1:
            raise ConfigurationError(f"max_len must be >= 1, got {self.max_len}")

    def limit(self, src_len: int) -> int:
        return self.max_len if self.max_len is not None else 2 * src_len + 8


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tuple[int, ...]
    log_prob: float
    finished: bool = False

    def __len__(self) -> int:
        return len(self.tokens)


def length_penalty(length: int, alpha: float) -> float:
    """``((5 + length) / 6) ** alpha``."""
    return ((5.0 + length) / 6.0) ** alpha


def normalized_score(hyp: Hypothesis, alpha: float) -> float:
    return hyp.log_prob / length_penalty(len(hyp), alpha)


def _rank_key(hyp: Hypothesis, alpha: float):
    # best first: higher score, then shorter, then lexicographically smaller
    return (-normalized_score(hyp, alpha), len(hyp), hyp.tokens)


def _source(src) -> np.ndarray:
    arr = np.asarray(src, dtype=np.int64)
    if arr.ndim == 2 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 1 or arr.size == 0:
        raise InputError(f"decode expects one non-empty source sequence, got shape {arr.shape}")
    return arr


def _prefix_array(hyps: Sequence[Hypothesis]) -> np.ndarray:
    t = len(hyps[0])
    out = np.empty((len(hyps), t + 1), dtype=np.int64)
    out[:, 0] = START
    for i, h in enumerate(hyps):
        out[i, 1:] = h.tokens
    return out


def beam_search(model: SliceNet, src, cfg: DecodeConfig = DecodeConfig()) -> Hypothesis:
    """Best hypothesis under ``log_prob / ((5+|Y|)/6)**alpha``.

    Each live hypothesis proposes its top-``beam`` next tokens; proposals and
    already finished hypotheses then compete for the ``beam`` slots of the
    next step. A hypothesis that reaches the length limit without the end
    token is kept as finished (truncated).
    """
    src = _source(src)
    limit = cfg.limit(src.size)
    encoded = model.encode(src[None, :])
    beam: List[Hypothesis] = [Hypothesis((), 0.0)]
    while True:
        live = [h for h in beam if not h.finished]
        if not live:
            break
        # all live hypotheses share one length, so they batch without padding
        logp = model.next_log_probs(encoded, _prefix_array(live))
        logp[:, list(_FORBIDDEN)] = -np.inf
        pool = [h for h in beam if h.finished]
        n_take = min(cfg.beam, logp.shape[1] - len(_FORBIDDEN))
        for h, row in zip(live, logp):
            # stable sort on -row keeps lower token ids first among ties
            for tok in np.argsort(-row, kind="stable")[:n_take]:
                tok = int(tok)
                tokens = h.tokens + (tok,)
                pool.append(Hypothesis(tokens, h.log_prob + float(row[tok]), tok == END or len(tokens) >= limit))
        pool.sort(key=lambda h: _rank_key(h, cfg.alpha))
        beam = pool[: cfg.beam]
    return min(beam, key=lambda h: _rank_key(h, cfg.alpha))


def greedy_decode(model: SliceNet, src, max_len: Optional[int] = None) -> List[int]:
    """Append the arg-max token until the end id or the length limit."""
    src = _source(src)
    limit = max_len if max_len is not None else 2 * src.size + 8
    encoded = model.encode(src[None, :])
    out: List[int] = []
    while len(out) < limit:
        logp = model.next_log_probs(encoded, np.array([[START] + out], dtype=np.int64))[0]
        logp[list(_FORBIDDEN)] = -np.inf
        tok = int(np.argmax(logp))
        out.append(tok)
        if tok == END:
            break
    return out


def score_sequence(model: SliceNet, src, tgt: Sequence[int]) -> float:
    """Teacher-forced sum of log-probabilities of ``tgt`` (generated tokens)."""
    src = _source(src)
    tgt = np.asarray(tgt, dtype=np.int64)
    if tgt.ndim != 1 or tgt.size == 0:
        raise InputError(f"score_sequence needs a non-empty 1-D target, got shape {tgt.shape}")
    logits = model.logits(src[None, :], tgt[None, :]).data[0]
    m = logits.max(axis=-1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    return float(logp[np.arange(tgt.size), tgt].sum())


def enumerate_best(model: SliceNet, src, alpha: float, max_len: int) -> Hypothesis:
    """Exhaustive search over every sequence beam search could produce.

    Only practical for tiny vocabularies; used as an oracle.
    """
    src = _source(src)
    payload = [t for t in range(model.cfg.vocab_tgt) if t not in _FORBIDDEN and t != END]
    cands = []
    frontier: List[Tuple[int, ...]] = [()]
    for length in range(1, max_len + 1):
        nxt = []
        for p in frontier:
            cands.append(p + (END,))
            nxt.extend(p + (t,) for t in payload)
        if length == max_len:
            cands.extend(nxt)
        frontier = nxt
    # all candidates of one length are scored in a single batched call
    hyps = []
    by_len = {}
    for c in cands:
        by_len.setdefault(len(c), []).append(c)
    for n, group in sorted(by_len.items()):
        tgt = np.asarray(group, dtype=np.int64)
        srcs = np.repeat(src[None, :], len(group), axis=0)
        logits = model.logits(srcs, tgt).data
        m = logits.max(axis=-1, keepdims=True)
        logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
        scores = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0].sum(axis=1)
        hyps.extend(Hypothesis(c, float(s), True) for c, s in zip(group, scores))
    return min(hyps, key=lambda h: _rank_key(h, alpha))


def strip_end(tokens: Sequence[int]) -> List[int]:
    out = list(tokens)
    if out and out[-1] == END:
        out.pop()
    return out


def decode_lines(
    model: SliceNet,
    sources: Iterable[Sequence[int]],
    cfg: DecodeConfig = DecodeConfig(),
    workers: int = 1,
    progress: Optional[Callable[[int], None]] = None,
) -> List[Hypothesis]:
    """Beam-decode many sources; results keep the input order.

    Searches are independent, so with ``workers > 1`` they run on a thread
    pool over the shared read-only model.
    """
    sources = [list(s) for s in sources]

    def one(i_src):
        i, s = i_src
        hyp = beam_search(model, s, cfg)
        if progress is not None:
            progress(i)
        return hyp

    if workers <= 1 or len(sources) <= 1:
        return [one(x) for x in enumerate(sources)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, enumerate(sources)))
