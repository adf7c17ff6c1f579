import itertools

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from zdc.corpus import Corpus, Topic
from zdc.engine import BASELINE, forward, important_sets
from zdc.metrics import degradation_D, layer_outputs_over
from zdc.model import RotationSet, gen_model, load_rotations, save_rotations
from zdc.offline import (InsufficientSamples, collect_activations, compute_rotation_qk, compute_rotation_vl,
                         fold_parameters, group_agreement, identify_layer_groups, kmeans_reduce,
                         repetition_ratio, rotations_from_bank, build_rotations, singular_value_profile)
from zdc.plan import CompressionPlan
from zdc.tensor import random_orthogonal

from conftest import rel_err


class TestCollect:
    def test_row_counts(self):
        m = gen_model(seed=0, n_layers=2, n_heads=2, head_dim=4, vocab=10)
        bank = collect_activations(m, Corpus(10, [Topic("t", [[1, 2, 3, 4]])]))
        for grid in (bank.q, bank.k, bank.v):
            assert all(mat.shape == (4, 4) for heads in grid for mat in heads)

    def test_empty_corpus(self):
        m = gen_model(seed=0, vocab=10)
        with pytest.raises(ValueError, match="no tokens"):
            collect_activations(m, Corpus(10, [Topic("t", [[]])]))

    def test_vocab_mismatch(self):
        m = gen_model(seed=0, vocab=10)
        with pytest.raises(ValueError, match="vocabulary"):
            collect_activations(m, Corpus(20, [Topic("t", [[1]])]))

    def test_layer0_rows_equal_direct_projection(self, small_model, small_corpus):
        bank = collect_activations(small_model, small_corpus)
        e = np.vstack([small_model.embed[s] for s in small_corpus.sequences()])
        for h in range(small_model.n_heads):
            assert np.allclose(bank.q[0][h], e @ small_model.wq[0][h], rtol=0, atol=1e-12)
            assert np.allclose(bank.v[0][h], e @ small_model.wv[0][h], rtol=0, atol=1e-12)


class TestKMeans:
    def test_k_equals_n_returns_the_points(self):
        x = np.random.default_rng(0).standard_normal((6, 3))
        c = kmeans_reduce(x, 6, seed=1)
        assert sorted(map(tuple, c)) == sorted(map(tuple, x))

    def test_k_one_is_the_mean(self):
        x = np.random.default_rng(1).standard_normal((20, 4))
        assert np.allclose(kmeans_reduce(x, 1), x.mean(0))

    def test_separated_blobs(self):
        rng = np.random.default_rng(2)
        n, sigma = 200, 0.5
        means = np.array([[10.0, 0.0], [-10.0, 0.0]])
        blobs = [m + sigma * rng.standard_normal((n, 2)) for m in means]
        c = kmeans_reduce(np.vstack(blobs), 2, seed=0)
        for blob in blobs:
            nearest = c[np.argmin(np.linalg.norm(c - blob.mean(0), axis=1))]
            assert np.linalg.norm(nearest - blob.mean(0)) <= 3 * sigma / np.sqrt(n)

    def test_duplicate_points_keep_k_centroids(self):
        x = np.vstack([np.zeros((5, 2)), np.ones((5, 2))])
        c = kmeans_reduce(x, 3, seed=0)
        assert c.shape == (3, 2) and np.all(np.isfinite(c))

    def test_bad_k(self):
        with pytest.raises(ValueError):
            kmeans_reduce(np.zeros((3, 2)), 4)

    def test_seeded(self):
        x = np.random.default_rng(3).standard_normal((50, 3))
        assert np.array_equal(kmeans_reduce(x, 5, seed=9), kmeans_reduce(x, 5, seed=9))


class TestRotations:
    def test_rank_two_subspace(self):
        rng = np.random.default_rng(0)
        basis = rng.standard_normal((2, 4))
        rows = rng.standard_normal((30, 2)) @ basis
        r, sv = compute_rotation_qk(rows, rows)
        assert sv[2] < 1e-8 * sv[0] and sv[3] < 1e-8 * sv[0]
        assert np.abs(r.T @ r - np.eye(4)).max() < 1e-8

    def test_isotropic_spread(self):
        rng = np.random.default_rng(1)
        q, k = rng.standard_normal((4000, 6)), rng.standard_normal((4000, 6))
        _, sv = compute_rotation_qk(q, k)
        assert sv.min() >= 0.8 * sv.max()

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamples, match="insufficient samples"):
            compute_rotation_qk(np.ones((1, 4)), np.ones((2, 4)))

    def test_column_mismatch(self):
        with pytest.raises(ValueError):
            compute_rotation_qk(np.ones((5, 4)), np.ones((5, 3)))

    def test_zero_wl_matches_qk_of_values(self):
        rng = np.random.default_rng(2)
        v = rng.standard_normal((20, 5))
        r_vl, sv_vl = compute_rotation_vl(v, np.zeros((8, 5)))
        r_qk, sv_qk = compute_rotation_qk(v, np.zeros((0, 5)))
        assert np.allclose(sv_vl, sv_qk)
        assert np.allclose(np.abs(r_vl), np.abs(r_qk), atol=1e-10)

    def test_without_values_spans_wl_row_space(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((12, 3)) @ rng.standard_normal((3, 8))
        r, _ = compute_rotation_vl(np.zeros((0, 8)), w)
        lead = r[:, :3]
        oracle = scipy.linalg.orth(w.T)
        assert np.linalg.norm(lead @ lead.T - oracle @ oracle.T) < 1e-8
        assert np.abs(r.T @ r - np.eye(8)).max() < 1e-8

    def test_parallel_heads_are_deterministic(self, small_model, small_corpus):
        bank = collect_activations(small_model, small_corpus)
        a = rotations_from_bank(bank, small_model, k=10, seed=4, workers=1)
        b = rotations_from_bank(bank, small_model, k=10, seed=4, workers=4)
        for x, y in zip(a.r_qk + a.r_vl, b.r_qk + b.r_vl):
            assert all(np.array_equal(p, q) for p, q in zip(x, y))

    def test_round_trip(self, tmp_path, small_folded):
        rot = small_folded.rotations
        save_rotations(rot, tmp_path / "r")
        back = load_rotations(tmp_path / "r")
        assert np.array_equal(back.r_vl[1][0], rot.r_vl[1][0])
        assert np.array_equal(back.sv_qk[0][1], rot.sv_qk[0][1])


class TestFold:
    def test_identity_rotations_leave_weights(self, small_model):
        rot = RotationSet.identity(small_model.n_layers, small_model.n_heads, small_model.head_dim)
        f = fold_parameters(small_model, rot)
        for l, h in itertools.product(range(2), range(2)):
            assert np.array_equal(f.wq_r[l][h], small_model.wq[l][h])
            assert np.array_equal(f.wv_r[l][h], small_model.wv[l][h])
        assert np.array_equal(f.wl_r[0], small_model.wl[0])

    def test_random_rotations_keep_zero_drop_exact(self, small_model):
        rng = np.random.default_rng(5)
        dh = small_model.head_dim
        grid = lambda: [[random_orthogonal(dh, rng) for _ in range(2)] for _ in range(2)]
        ones = [[np.ones(dh)] * 2] * 2
        f = fold_parameters(small_model, RotationSet(grid(), grid(), ones, ones))
        toks = [1, 5, 9, 2, 7]
        base = forward(small_model, toks, mode=BASELINE).logits
        assert rel_err(forward(f, toks, CompressionPlan.zero(2)).logits, base) <= 1e-8

    def test_head_count_mismatch(self, small_model):
        with pytest.raises(ValueError, match="rotations cover"):
            fold_parameters(small_model, RotationSet.identity(2, 3, small_model.head_dim))

    def test_non_orthogonal_rejected(self, small_model):
        rot = RotationSet.identity(2, 2, small_model.head_dim)
        rot.r_qk[1][0] = 2.0 * rot.r_qk[1][0]
        with pytest.raises(ValueError, match="not orthogonal"):
            fold_parameters(small_model, rot)


def pairwise_group_oracle_holds(sets, group_map, threshold):
    """Checks the greedy map against direct pairwise ratios."""
    for l, rep in enumerate(group_map):
        if group_map[rep] != rep or rep > l:
            return False
        if not repetition_ratio(sets[rep], sets[l]) > threshold and rep != l:
            return False
        if l > 0 and rep == l and repetition_ratio(sets[group_map[l - 1]], sets[l]) > threshold:
            return False
        if l > 0 and rep != l and group_map[l - 1] != rep:
            return False
    return True


class TestGroups:
    def test_identical_sets(self):
        s = set(range(10))
        assert identify_layer_groups([s] * 5) == [0] * 5

    def test_alternating_disjoint(self):
        a, b = set(range(10)), set(range(10, 20))
        assert identify_layer_groups([a, b, a, b]) == [0, 1, 2, 3]

    def test_drifting_sets_form_mid_sized_groups(self):
        # each layer swaps 4 of 100 members (96% adjacent overlap)
        sets, cur, fresh = [], set(range(100)), iter(range(100, 10_000))
        for _ in range(8):
            sets.append(set(cur))
            out = sorted(cur)[:4]
            cur = (cur - set(out)) | {next(fresh) for _ in range(4)}
        gm = identify_layer_groups(sets)
        sizes = [gm.count(r) for r in set(gm)]
        assert max(sizes) > 1 and max(sizes) < len(sets)
        assert pairwise_group_oracle_holds(sets, gm, 0.95)

    @settings(max_examples=60)
    @given(st.lists(st.sets(st.integers(0, 30), min_size=1, max_size=20), min_size=1, max_size=8),
           st.floats(0.0, 0.99))
    def test_greedy_map_satisfies_pairwise_oracle(self, sets, threshold):
        gm = identify_layer_groups(sets, threshold)
        assert len(gm) == len(sets) and gm[0] == 0
        assert pairwise_group_oracle_holds(sets, gm, threshold)

    def test_agreement_is_one_without_reuse(self, small_model):
        assert group_agreement(small_model, [[1, 2, 3, 4]], [0, 1]) == 1.0

    def test_agreement_counts_mismatches(self, small_model):
        seq = list(range(10))
        res = forward(small_model, seq, mode=BASELINE)
        s0, s1 = important_sets(res.state, 0.5)
        expected = (10 - len(s0 ^ s1)) / 10
        assert group_agreement(small_model, [seq], [0, 0]) == expected


class TestSingularValueProfile:
    def rot(self, sv):
        eye = np.eye(len(sv))
        return RotationSet([[eye]], [[eye]], [[np.asarray(sv, float)]], [[np.asarray(sv, float)]])

    def test_all_zero(self):
        assert singular_value_profile(self.rot([0, 0, 0]), 1.0) == {"qk": 1.0, "vl": 1.0}

    def test_all_above(self):
        assert singular_value_profile(self.rot([5, 4, 3]), 1.0) == {"qk": 0.0, "vl": 0.0}

    def test_half_rank_activations(self):
        rng = np.random.default_rng(0)
        dh = 8
        rows = 10 * rng.standard_normal((200, dh // 2)) @ rng.standard_normal((dh // 2, dh))
        rows += 1e-6 * rng.standard_normal(rows.shape)
        r, sv = compute_rotation_qk(rows, rows)
        frac = singular_value_profile(self.rot(sv), 1.0)["qk"]
        assert abs(frac - 0.5) <= 1 / dh


class TestRotationQuality:
    def test_pruned_rotations_degrade_like_full(self, wide_model, wide_corpus):
        """Rotations fit on a half-pruned corpus are about as good as full-corpus ones."""
        eval_set = [s[:16] for s in wide_corpus.sequences()[1::3]]
        full = fold_parameters(wide_model, build_rotations(wide_model, wide_corpus, prune=0.0, kmeans_k=None))
        half = fold_parameters(wide_model, build_rotations(wide_model, wide_corpus, prune=0.5, kmeans_k=None))
        base = layer_outputs_over(wide_model, eval_set, mode=BASELINE)
        for p in (0.25, 0.5):
            plan = CompressionPlan.uniform(wide_model.n_layers, p)
            d_full = degradation_D(base, layer_outputs_over(full, eval_set, plan))
            d_half = degradation_D(base, layer_outputs_over(half, eval_set, plan))
            assert abs(d_half - d_full) <= 0.3 * d_full
