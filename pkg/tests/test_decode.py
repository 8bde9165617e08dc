import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aston import decode as D
from aston.features import EOC_ID, PAD, UNK

from test_model import events, tiny

A, B, C = 3, 4, 5


class TableState:
    def __init__(self, histories):
        self.histories = histories

    def select(self, index):
        return TableState([self.histories[i] for i in index])


class TableModel:
    """Next-activity distributions keyed by the activities emitted so far."""

    def __init__(self, table, n_activities=6, max_trace_len=2, default=None):
        self.table = table
        self.n_activities = n_activities
        self.max_trace_len = max_trace_len
        self.default = default or {EOC_ID: 1.0}
        self.calls = 0

    def begin(self, prefix_features):
        return TableState([None]), A

    def advance(self, state, prev_ids):
        self.calls += 1
        out, hist = [], []
        for h, prev in zip(state.histories, prev_ids):
            h = () if h is None else h + (int(prev),)
            dist = self.table.get(h, self.default)
            row = np.full(self.n_activities, -np.inf)
            for k, p in dist.items():
                row[k] = math.log(p)
            out.append(row)
            hist.append(h)
        return np.array(out), TableState(hist)


# step 1: A 0.5, C 0.4, B 0.1; step 2 conditional on the first activity
WORKED = {
    (): {A: 0.5, C: 0.4, B: 0.1},
    (A,): {A: 0.6, B: 0.3, C: 0.1},
    (C,): {A: 0.9, B: 0.05, C: 0.05},
    (B,): {A: 0.4, B: 0.3, C: 0.3},
}


def test_argmax_takes_aa_with_joint_point_three():
    m = TableModel(WORKED)
    assert D.predict_argmax(m, None) == [A, A]
    assert math.exp(D.sequence_log_prob(m, None, [A, A])) == pytest.approx(0.3)


def test_beam_two_recovers_best_joint():
    m = TableModel(WORKED)
    beam = D.beam_search(m, None, width=2, normalized=False)
    assert list(beam[0].ids) == [C, A]
    assert math.exp(beam[0].log_prob) == pytest.approx(0.36)
    assert beam[0].log_prob > D.sequence_log_prob(m, None, D.predict_argmax(m, None))
    # B (0.1) is never expanded with width 2
    assert all(h.ids[0] != B for h in beam)


def test_first_step_eoc_gives_empty_suffix():
    m = TableModel({(): {EOC_ID: 0.7, A: 0.3}})
    assert D.predict_argmax(m, None) == []
    assert D.predict_beam(m, None, 3, normalized=False) == []
    assert D.predict_random(m, None, seed=0) in ([], [A])


def test_masked_log_probs_excludes_pad_and_unk():
    lp = D.masked_log_probs(np.array([9.0, 0.0, 9.0, 0.0]))
    assert lp[PAD] == -np.inf and lp[UNK] == -np.inf
    assert np.allclose(np.exp(lp[[1, 3]]), [0.5, 0.5])


def test_pad_favoured_model_never_emits_pad():
    m = tiny(0)
    for p in (m.out_weight, m.out_bias):
        p.data[...] = 0.0
    m.out_bias.data[PAD] = 10.0
    m.out_bias.data[UNK] = 10.0
    m.out_bias.data[4] = 1.0
    out = D.predict_argmax(m, m.featurize(events("ab")), max_len=3)
    assert out == [4, 4, 4]


# -- normalization ------------------------------------------------------------------


@pytest.mark.parametrize("alpha", [0.0, 0.65, 1.0])
def test_normalization_factor_first_symbol(alpha):
    assert D.normalization_factor(1, alpha) == 1.0


def test_normalization_factor_values():
    assert abs(D.normalization_factor(5, 0.65) - (6 / 10) ** 0.65) < 1e-9
    assert D.normalization_factor(5, 0.65) == pytest.approx(0.7175, abs=1e-4)
    assert all(D.normalization_factor(i, 0.0) == 1.0 for i in range(1, 30))
    with pytest.raises(ValueError):
        D.normalization_factor(0, 0.65)


@given(st.floats(-50, -1e-6), st.floats(0.01, 2.0), st.integers(1, 40))
def test_normalized_score_grows_with_length(log_prob, alpha, i):
    shorter = D.normalization_factor(i, alpha) * log_prob
    longer = D.normalization_factor(i + 1, alpha) * log_prob
    assert longer > shorter


def test_stored_scores_match_direct_evaluation():
    m = tiny(4, hidden=6)
    m.out_weight.data *= 6
    beam = D.beam_search(m, m.featurize(events("abc")), width=4, normalized=True, alpha=0.65, max_len=4)
    for h in beam:
        assert h.log_prob <= 0
        assert h.score == pytest.approx(D.normalization_factor(len(h.ids) + 1, 0.65) * h.log_prob, abs=1e-12)
    keys = [(-h.score, h.ids) for h in beam]
    assert keys == sorted(keys)


def test_normalization_prefers_long_suffix_when_unnormalized_would_not():
    # stop now with 0.6, or take A and continue almost surely for 15 steps
    table = {(): {EOC_ID: 0.6, A: 0.4}}
    for n in range(1, 15):
        table[(A,) * n] = {A: 0.99, EOC_ID: 0.01}
    table[(A,) * 15] = {EOC_ID: 1.0}
    m = TableModel(table, n_activities=4, max_trace_len=15)
    oracle = D.exhaustive_oracle(m, None)
    assert oracle.best_log_prob[0] == ()
    assert oracle.best_normalized[0] == (A,) * 15
    assert D.predict_beam(m, None, 4, normalized=False) == []
    assert D.predict_beam(m, None, 4, normalized=True, alpha=0.65) == [A] * 15


# -- random sampling --------------------------------------------------------------------


def test_random_is_seeded():
    m = tiny(2, hidden=6)
    f = m.featurize(events("abc"))
    assert D.predict_random(m, f, seed=11) == D.predict_random(m, f, seed=11)
    runs = {tuple(D.predict_random(m, f, seed=s)) for s in range(20)}
    assert len(runs) > 1


def test_random_degenerate_equals_argmax():
    table = {(): {B: 1.0}, (B,): {C: 1.0}, (B, C): {EOC_ID: 1.0}}
    m = TableModel(table, max_trace_len=5)
    assert D.predict_random(m, None, seed=3) == D.predict_argmax(m, None) == [B, C]


def test_random_first_step_frequencies():
    m = tiny(5, hidden=6)
    m.out_weight.data *= 3
    f = m.featurize(events("ab"))
    state, fed = m.begin(f)
    logits, _ = m.advance(state, np.array([fed]))
    p = np.exp(D.masked_log_probs(logits[0]))
    counts = np.zeros_like(p)
    for s in range(10_000):
        first = D.predict_random(m, f, seed=s, max_len=1)
        counts[first[0] if first else EOC_ID] += 1
    assert np.max(np.abs(counts / counts.sum() - p)) < 0.02


# -- beam vs argmax and oracle -------------------------------------------------------------


def peaky(seed, acts=("a", "b", "c"), max_len=4, sharp=5.0):
    m = tiny(seed, hidden=5, emb=3, acts=acts, max_len=max_len)
    m.out_weight.data *= sharp
    m.out_bias.data[...] = np.random.default_rng(seed).normal(0, 1.0, size=m.out_bias.shape)
    return m


@pytest.mark.parametrize("seed", range(10))
def test_beam_one_equals_argmax(seed):
    m = peaky(seed)
    rng = np.random.default_rng(seed)
    for _ in range(10):
        f = m.featurize(events("".join(rng.choice(list("abc"), size=int(rng.integers(1, 5))))))
        assert D.predict_beam(m, f, 1, normalized=False) == D.predict_argmax(m, f)


@pytest.mark.parametrize("seed", range(5))
def test_full_width_beam_matches_oracle(seed):
    m = peaky(100 + seed)
    f = m.featurize(events("ab"))
    oracle = D.exhaustive_oracle(m, f, max_len=4)
    best = D.beam_search(m, f, width=3**4, normalized=False)[0]
    assert best.log_prob == pytest.approx(oracle.best_log_prob[1], abs=1e-9)
    norm = D.beam_search(m, f, width=3**4 + 40, normalized=True, alpha=0.65)[0]
    assert norm.score == pytest.approx(oracle.best_normalized[1], abs=1e-9)


def test_oracle_counts_sequences():
    m = peaky(0, acts=("a", "b"), max_len=3)
    assert D.exhaustive_oracle(m, m.featurize(events("a"))).n_sequences == 15
    with pytest.raises(ValueError):
        D.exhaustive_oracle(m, m.featurize(events("a")), max_len=20)


def test_oracle_on_degenerate_model_equals_argmax():
    table = {(): {B: 1.0}, (B,): {A: 1.0}, (B, A): {EOC_ID: 1.0}}
    m = TableModel(table, max_trace_len=3)
    assert list(D.exhaustive_oracle(m, None).best_log_prob[0]) == D.predict_argmax(m, None) == [B, A]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_oracle_bounds_every_beam(seed):
    m = peaky(seed)
    f = m.featurize(events("ca"))
    best = D.exhaustive_oracle(m, f).best_log_prob[1]
    for w in (1, 2, 3, 5, 8):
        assert D.beam_search(m, f, w, normalized=False)[0].log_prob <= best + 1e-12


@pytest.mark.parametrize("seed", range(30))
def test_beam_monotone_in_width(seed):
    m = peaky(seed, sharp=3.0)
    f = m.featurize(events("bca"))
    scores = [D.beam_search(m, f, w, normalized=False)[0].log_prob for w in (1, 2, 3, 4, 6, 9)]
    assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:])), scores


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(D.STRATEGIES), st.integers(1, 6))
def test_outputs_are_clean(seed, strategy, max_len):
    m = peaky(seed)
    f = m.featurize(events("ab"))
    out = D.predict(m, f, D.DecodeConfig(strategy, beam_width=3, max_len=max_len, seed=seed))
    assert len(out) <= max_len
    assert not {PAD, UNK, EOC_ID} & set(out)


def test_max_len_defaults_to_model():
    table = {}
    m = TableModel(table, max_trace_len=3, default={A: 1.0})
    assert D.predict_argmax(m, None) == [A, A, A]
    assert D.predict_beam(m, None, 2) == [A, A, A]


def test_decode_config_validation():
    with pytest.raises(ValueError, match="argmax, random, beam, beam_norm"):
        D.DecodeConfig("sampling")
    for bad in ({"beam_width": 0}, {"max_len": 0}, {"alpha": -0.1}):
        with pytest.raises(ValueError):
            D.DecodeConfig(**bad)
