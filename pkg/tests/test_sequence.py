import itertools
import math
import warnings
from datetime import date

import numpy as np
import pytest
from hypothesis import given, strategies as st

from upapp.annotate import Status, annotate_all, annotate_stop
from upapp.exceptions import EmptySequence, NoTransitions
from upapp.ingest import N_CATEGORIES, PlaceCategory, PlaceIndex
from upapp.sequence import (
    StopSequence,
    TransitionAccumulator,
    TransitionMatrix,
    build_sequences,
    decode_all,
    learn_transitions,
    path_log_score,
    read_transitions,
    uniform_transitions,
    viterbi_annotate,
    viterbi_path,
)
from upapp.stops import attach_candidates

from conftest import make_stop, poi

from test_annotate import flat_priors

D, SC, L = PlaceCategory.DINING.index, PlaceCategory.SCHOOL.index, PlaceCategory.LEISURE.index


def site_index():
    # one dining site, one school site, one mixed site; far apart
    return PlaceIndex([
        poi("d1", "dining", 0, 0), poi("s1", "school", 2000, 0),
        poi("m_d", "dining", 4000, 0), poi("m_s", "school", 4000, 30), poi("m_l", "leisure", 4030, 0),
        poi("g1", "residential", 9000, 0), poi("g2", "working", 9000, 50),
    ])


def seq_at(idx, easts, user="u", start=1_709_542_800):
    stops = [attach_candidates(make_stop(f"{user}-{k:04d}", e, start=start + 3600 * k, user=user), idx)
             for k, e in enumerate(easts)]
    return build_sequences(stops)


class TestSequences:
    def test_grouping_and_order(self):
        idx = site_index()
        a = [attach_candidates(make_stop("u-1", 0, start=1_709_542_800 + 7200), idx),
             attach_candidates(make_stop("u-0", 0), idx),
             attach_candidates(make_stop("u-2", 0, start=1_709_542_800 + 86_400), idx),
             attach_candidates(make_stop("v-0", 0, user="v"), idx)]
        seqs = build_sequences(a)
        assert [(s.user_id, s.day, [x.stop.stop_id for x in s.stops]) for s in seqs] == [
            ("u", date(2024, 3, 4), ["u-0", "u-1"]), ("u", date(2024, 3, 5), ["u-2"]), ("v", date(2024, 3, 4), ["v-0"])]

    def test_validation(self):
        idx = site_index()
        s0 = attach_candidates(make_stop("a", start=100), idx)
        s1 = attach_candidates(make_stop("b", start=50), idx)
        with pytest.raises(ValueError):
            StopSequence("u", date(2024, 3, 4), (s0, s1))
        with pytest.raises(ValueError):
            StopSequence("other", date(2024, 3, 4), (s1,))


class TestLearn:
    def test_single_pair(self):
        idx = site_index()
        seqs = seq_at(idx, [0, 2000])
        m = learn_transitions(seqs, idx)
        w1 = math.log(7 / 2)  # dining: 2 of 7 places
        w2 = math.log(7 / 2)  # school: 2 of 7
        assert m.raw[D, SC] == pytest.approx(w1 * w2, rel=1e-12)
        assert np.count_nonzero(m.raw) == 1 and m.pairs == 1
        assert m.probs[D, SC] == pytest.approx((w1 * w2 + 1e-3) / (w1 * w2 + 7e-3), rel=1e-12)
        assert np.argmax(m.probs[D]) == SC
        assert np.allclose(m.probs.sum(axis=1), 1, atol=1e-9)
        assert np.allclose(m.probs[L], 1 / 7)  # zero-mass row: smoothing alone

    def test_no_pairs_uniform(self):
        idx = site_index()
        with pytest.warns(NoTransitions):
            m = learn_transitions(seq_at(idx, [0]), idx)
        assert np.allclose(m.probs, 1 / 7) and m.pairs == 0

    def test_alpha_zero_zero_row_is_uniform(self):
        idx = site_index()
        m = learn_transitions(seq_at(idx, [0, 2000]), idx, alpha=0.0)
        assert m.probs[D, SC] == 1.0 and np.allclose(m.probs[SC], 1 / 7)

    def test_no_candidate_stop_breaks_chain(self):
        idx = site_index()
        m = learn_transitions(seq_at(idx, [0, 20_000, 2000]), idx)
        assert np.count_nonzero(m.raw) == 0 and m.pairs == 2

    def test_duplicate_corpus_and_reorder(self):
        idx = site_index()
        rng = np.random.default_rng(0)
        seqs = []
        for u in range(20):
            seqs += seq_at(idx, rng.choice([0, 2000, 4000], size=int(rng.integers(2, 6))).tolist(), user=f"u{u}")
        a = learn_transitions(seqs, idx, alpha=0)
        b = learn_transitions(seqs + seqs, idx, alpha=0)
        c = learn_transitions(list(reversed(seqs)), idx, alpha=0)
        assert np.allclose(a.probs, b.probs, rtol=1e-12, atol=0)
        assert np.allclose(a.probs, c.probs, rtol=1e-12, atol=0)
        acc1, acc2 = TransitionAccumulator(), TransitionAccumulator()
        for s in seqs[:7]:
            acc1.add_sequence(s, idx)
        for s in seqs[7:]:
            acc2.add_sequence(s, idx)
        assert np.allclose(acc1.merge(acc2).finish(1e-3).probs, learn_transitions(seqs, idx).probs, rtol=1e-12)

    def test_round_trip(self, tmp_path):
        idx = site_index()
        m = learn_transitions(seq_at(idx, [0, 2000, 4000, 0]), idx)
        from upapp.sequence import write_transitions
        write_transitions(m, tmp_path / "t.csv")
        back = read_transitions(tmp_path / "t.csv")
        assert np.allclose(back.probs, m.probs, rtol=1e-8) and np.allclose(back.raw, m.raw, rtol=1e-8)
        assert back.alpha == m.alpha and back.pairs == m.pairs


def random_instance(rng, n_stops, n_cands, ties=False):
    trans = rng.uniform(0.01, 1, (7, 7))
    trans /= trans.sum(axis=1, keepdims=True)
    em, cats = [], []
    for _ in range(n_stops):
        k = int(rng.integers(1, n_cands + 1))
        e = rng.choice([0.2, 0.5], size=k) if ties else rng.uniform(0.01, 1, k)
        em.append(np.log(e / e.sum()))
        cats.append(rng.integers(0, 7, k))
    if ties:
        trans = np.full((7, 7), 1 / 7)
    return em, cats, np.log(trans)


def brute_force(em, cats, log_t):
    best, best_path = -math.inf, None
    for path in itertools.product(*[range(len(e)) for e in em]):  # lexicographic order
        s = path_log_score(em, cats, log_t, path)
        if s > best + 1e-12:
            best, best_path = s, list(path)
    return best_path, best


class TestViterbi:
    def test_three_by_three(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            em, cats, log_t = random_instance(rng, 3, 3)
            em = [np.log(rng.dirichlet(np.ones(3))) for _ in range(3)]
            cats = [rng.integers(0, 7, 3) for _ in range(3)]
            path, score = viterbi_path(em, cats, log_t)
            bp, bs = brute_force(em, cats, log_t)
            assert path == bp and abs(score - bs) <= 1e-12

    @given(st.integers(0, 100_000), st.integers(1, 5), st.integers(1, 5))
    def test_optimal(self, seed, n, k):
        em, cats, log_t = random_instance(np.random.default_rng(seed), n, k)
        path, score = viterbi_path(em, cats, log_t)
        bp, bs = brute_force(em, cats, log_t)
        assert abs(score - bs) <= 1e-12
        assert abs(path_log_score(em, cats, log_t, path) - bs) <= 1e-12

    @given(st.integers(0, 100_000), st.integers(1, 4), st.integers(1, 4))
    def test_ties_pick_lexicographically_smallest(self, seed, n, k):
        em, cats, log_t = random_instance(np.random.default_rng(seed), n, k, ties=True)
        path, _ = viterbi_path(em, cats, log_t)
        scores = {p: path_log_score(em, cats, log_t, p) for p in itertools.product(*[range(len(e)) for e in em])}
        best = max(scores.values())
        assert tuple(path) == min(p for p, s in scores.items() if s >= best - 1e-12)

    def test_empty(self):
        with pytest.raises(EmptySequence):
            viterbi_path([], [], np.zeros((7, 7)))
        with pytest.raises(EmptySequence):
            viterbi_annotate([], uniform_transitions())


def annotations_for(idx, easts, user="u"):
    (seq,) = seq_at(idx, easts, user=user)
    return annotate_all(seq.stops, flat_priors(), idx)


class TestViterbiAnnotate:
    def test_single_stop(self):
        idx = site_index()
        anns = annotations_for(idx, [4000])
        (out,) = viterbi_annotate(anns, uniform_transitions())
        assert out.chosen is anns[0].chosen

    def test_uniform_is_independent_argmax(self):
        idx = site_index()
        anns = annotations_for(idx, [4000, 0, 4000, 2000, 4000])
        out = viterbi_annotate(anns, uniform_transitions())
        assert [a.chosen.place_id for a in out] == [a.chosen.place_id for a in anns]

    def test_transitions_override_emission(self):
        idx = site_index()
        anns = annotations_for(idx, [0, 4000])
        probs = np.full((7, 7), 1e-4)
        probs[D, L] = 1.0
        probs /= probs.sum(axis=1, keepdims=True)
        out = viterbi_annotate(anns, TransitionMatrix(probs, np.zeros((7, 7))))
        assert out[1].chosen.category is PlaceCategory.LEISURE
        assert out[1].ranked == anns[1].ranked and out[0].chosen is anns[0].chosen

    def test_no_candidate_stop_splits(self):
        idx = site_index()
        anns = annotations_for(idx, [0, 20_000, 4000])
        probs = np.full((7, 7), 1e-4)
        probs[D, L] = 1.0
        probs /= probs.sum(axis=1, keepdims=True)
        out = viterbi_annotate(anns, TransitionMatrix(probs, np.zeros((7, 7))))
        assert out[1].status is Status.NO_CANDIDATES and out[1] is anns[1]
        assert out[2].chosen is anns[2].chosen  # no transition across the gap

    def test_decode_all_order_and_parallel(self):
        from concurrent.futures import ThreadPoolExecutor
        idx = site_index()
        rng = np.random.default_rng(2)
        anns = []
        for u in range(10):
            anns += annotations_for(idx, rng.choice([0, 2000, 4000], 4).tolist(), user=f"u{u}")
        shuffled = [anns[i] for i in rng.permutation(len(anns))]
        trans = learn_transitions(build_sequences([a.stop for a in anns]), idx)
        serial = decode_all(shuffled, trans)
        with ThreadPoolExecutor(3) as pool:
            par = decode_all(shuffled, trans, pool=pool)
        assert [a.stop.stop.stop_id for a in serial] == [a.stop.stop.stop_id for a in shuffled]
        assert [a.chosen.place_id for a in serial] == [a.chosen.place_id for a in par]

    def test_diagonal_transitions_reduce_switches(self):
        rng = np.random.default_rng(3)
        diag = np.full((7, 7), 0.01)
        np.fill_diagonal(diag, 1.0)
        log_t = np.log(diag / diag.sum(axis=1, keepdims=True))
        fewer = 0
        for _ in range(300):
            n = int(rng.integers(2, 7))
            em = [np.log(rng.dirichlet(np.ones(3))) for _ in range(n)]
            cats = [rng.choice(3, 3, replace=False) for _ in range(n)]
            path, _ = viterbi_path(em, cats, log_t)
            greedy = [int(np.argmax(e)) for e in em]
            switches = lambda p: sum(cats[i][p[i]] != cats[i + 1][p[i + 1]] for i in range(n - 1))
            assert switches(path) <= switches(greedy)
            fewer += switches(path) < switches(greedy)
        assert fewer > 0
