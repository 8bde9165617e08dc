"""Suffix generation: argmax, random sampling and (length-normalized) beam search.

Strategies work with any object exposing the inference protocol of
:class:`aston.model.AstonModel`:

* ``begin(prefix_features) -> (state, first_fed_id)``
* ``advance(state, prev_ids) -> (logits (B, C), state)``
* ``state.select(indices) -> state``
* ``n_activities`` and ``max_trace_len``

PAD and UNK are never emitted; probabilities are renormalised over the
remaining ids. A hypothesis holding ``max_len`` activities can only be closed
with EOC, so every search result is EOC-terminated with at most ``max_len``
activities.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import EOC_ID, PAD, UNK

STRATEGIES = ("argmax", "random", "beam", "beam_norm")


@dataclass
class DecodeConfig:
    strategy: str = "beam_norm"
    beam_width: int = 5
    alpha: float = 0.65
    max_len: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGIES)}")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


def masked_log_probs(logits: np.ndarray) -> np.ndarray:
    """Log-softmax over all ids except PAD and UNK (which get -inf)."""
    x = np.array(logits, dtype=np.float64, copy=True)
    x[..., PAD] = -np.inf
    x[..., UNK] = -np.inf
    m = np.max(x, axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return x - m - np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True))


def normalization_factor(i: int, alpha: float) -> float:
    """Length penalty ``(5 + 1)^alpha / (5 + i)^alpha`` for ``i`` predicted symbols."""
    if i < 1:
        raise ValueError("i must be >= 1")
    return (6.0**alpha) / ((5.0 + i) ** alpha)


def _max_len(model, max_len: int | None) -> int:
    return int(max_len if max_len is not None else model.max_trace_len)


def _greedy(model, prefix_features, max_len, pick) -> list[int]:
    state, fed = model.begin(prefix_features)
    out: list[int] = []
    while len(out) < max_len:
        logits, state = model.advance(state, np.array([fed]))
        nxt = pick(masked_log_probs(logits[0]))
        if nxt == EOC_ID:
            break
        out.append(nxt)
        fed = nxt
    return out


def predict_argmax(model, prefix_features: np.ndarray, max_len: int | None = None) -> list[int]:
    """Greedy decoding; returns activity ids without EOC."""
    return _greedy(model, prefix_features, _max_len(model, max_len), lambda lp: int(np.argmax(lp)))


def predict_random(model, prefix_features: np.ndarray, seed: int = 0, max_len: int | None = None) -> list[int]:
    """Sample each next activity from the model distribution (seeded)."""
    rng = np.random.default_rng(seed)

    def pick(lp):
        p = np.exp(lp)
        return int(rng.choice(p.size, p=p / p.sum()))

    return _greedy(model, prefix_features, _max_len(model, max_len), pick)


@dataclass
class BeamHypothesis:
    ids: tuple[int, ...]
    log_prob: float
    score: float
    state_index: int = -1
    finished: bool = False

    @property
    def n_symbols(self) -> int:
        """Predicted symbols so far, EOC included."""
        return len(self.ids) + (1 if self.finished else 0)

    def sort_key(self):
        # best score first; ties: lower ids, then shorter
        return (-self.score, self.ids, len(self.ids))


def _score(log_prob: float, n_symbols: int, normalized: bool, alpha: float) -> float:
    if not normalized:
        return log_prob
    return normalization_factor(n_symbols, alpha) * log_prob


def beam_search(
    model,
    prefix_features: np.ndarray,
    width: int = 5,
    normalized: bool = True,
    alpha: float = 0.65,
    max_len: int | None = None,
) -> list[BeamHypothesis]:
    """Run beam search and return the final beam, best first.

    Finished hypotheses stay in the beam and occupy a slot. Pruning uses the
    same score as the final ranking (normalised by the current number of
    predicted symbols when ``normalized``).
    """
    if width < 1:
        raise ValueError("width must be >= 1")
    limit = _max_len(model, max_len)
    state, fed = model.begin(prefix_features)
    beam = [BeamHypothesis((), 0.0, 0.0, state_index=0)]
    last_fed = {0: fed}
    while any(not h.finished for h in beam):
        live = [h for h in beam if not h.finished]
        rows = [h.state_index for h in live]
        step_state = state.select(rows)
        prev = np.array([last_fed[h.state_index] for h in live], dtype=np.int64)
        logits, next_state = model.advance(step_state, prev)
        logp = masked_log_probs(logits)
        candidates = [h for h in beam if h.finished]
        for row, h in enumerate(live):
            if len(h.ids) >= limit:
                choices = [EOC_ID]
            else:
                choices = [c for c in range(logp.shape[1]) if np.isfinite(logp[row, c])]
            for c in choices:
                lp = h.log_prob + float(logp[row, c])
                done = c == EOC_ID
                ids = h.ids if done else h.ids + (c,)
                n_sym = len(ids) + (1 if done else 0)
                candidates.append(BeamHypothesis(ids, lp, _score(lp, n_sym, normalized, alpha), row, done))
        candidates.sort(key=BeamHypothesis.sort_key)
        beam = candidates[:width]
        # re-index the surviving live hypotheses onto the new state rows
        survivors = [h for h in beam if not h.finished]
        if survivors:
            state = next_state.select([h.state_index for h in survivors])
            last_fed = {}
            for new_idx, h in enumerate(survivors):
                h.state_index = new_idx
                last_fed[new_idx] = h.ids[-1]
    beam.sort(key=BeamHypothesis.sort_key)
    return beam


def predict_beam(
    model,
    prefix_features: np.ndarray,
    width: int = 5,
    normalized: bool = True,
    alpha: float = 0.65,
    max_len: int | None = None,
) -> list[int]:
    return list(beam_search(model, prefix_features, width, normalized, alpha, max_len)[0].ids)


def predict(model, prefix_features: np.ndarray, config: DecodeConfig) -> list[int]:
    if config.strategy == "argmax":
        return predict_argmax(model, prefix_features, config.max_len)
    if config.strategy == "random":
        return predict_random(model, prefix_features, config.seed, config.max_len)
    return predict_beam(
        model, prefix_features, config.beam_width, config.strategy == "beam_norm", config.alpha, config.max_len
    )


# ---------------------------------------------------------------------------
# exhaustive oracle (tests)
# ---------------------------------------------------------------------------


def sequence_log_prob(model, prefix_features: np.ndarray, ids: Sequence[int]) -> float:
    """Joint log-probability of ``ids`` followed by EOC, scored one step at a time."""
    state, fed = model.begin(prefix_features)
    total = 0.0
    for c in list(ids) + [EOC_ID]:
        logits, state = model.advance(state, np.array([fed]))
        total += float(masked_log_probs(logits[0])[c])
        fed = c
    return total


@dataclass
class OracleResult:
    best_log_prob: tuple[tuple[int, ...], float]
    best_normalized: tuple[tuple[int, ...], float]
    n_sequences: int
    scores: dict[tuple[int, ...], float] = field(repr=False, default_factory=dict)


def exhaustive_oracle(
    model, prefix_features: np.ndarray, max_len: int | None = None, alpha: float = 0.65, cap: int = 20000
) -> OracleResult:
    """Score every EOC-terminated sequence of up to ``max_len`` activities."""
    limit = _max_len(model, max_len)
    activities = [c for c in range(model.n_activities) if c not in (PAD, UNK, EOC_ID)]
    total = sum(len(activities) ** L for L in range(limit + 1))
    if total > cap:
        raise ValueError(f"search space of {total} sequences exceeds cap {cap}")
    scores: dict[tuple[int, ...], float] = {}
    for L in range(limit + 1):
        for seq in itertools.product(activities, repeat=L):
            scores[seq] = sequence_log_prob(model, prefix_features, seq)
    finite = {s: v for s, v in scores.items() if math.isfinite(v)}
    best_lp = min(finite.items(), key=lambda kv: (-kv[1], kv[0], len(kv[0])))
    normed = {s: normalization_factor(len(s) + 1, alpha) * v for s, v in finite.items()}
    best_norm = min(normed.items(), key=lambda kv: (-kv[1], kv[0], len(kv[0])))
    return OracleResult(best_lp, best_norm, len(scores), scores)
