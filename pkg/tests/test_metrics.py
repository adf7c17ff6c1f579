import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zdc.engine import ZDC, forward, generate
from zdc.metrics import (SCHEMA_VERSION, baseline_head_outputs, baseline_log_probs, build_report, degradation_D,
                         degradation_detail, emit_report, empty_report, head_degradation, load_report,
                         perplexity_proxy, validate_report)
from zdc.model import gen_model
from zdc.plan import CompressionPlan


def loop_D(us, vs, eps=1e-12):
    total, count = 0.0, 0
    for u, v in zip(us, vs):
        for a, b in zip(np.ravel(u), np.ravel(v)):
            if abs(a) < eps:
                continue
            total += abs(b - a) / abs(a)
            count += 1
    return total / count


class TestDegradation:
    def test_identical(self):
        u = [np.random.default_rng(0).standard_normal((4, 6))]
        assert degradation_D(u, u) == 0.0

    def test_uniform_scale(self):
        u = [np.random.default_rng(1).standard_normal((5, 3)) for _ in range(2)]
        assert degradation_D(u, [1.1 * x for x in u]) == pytest.approx(0.1, abs=1e-12)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(2)
        u = [rng.standard_normal((3, 4)), rng.standard_normal((2, 4))]
        u[0][1, 2] = 0.0
        v = [x + 0.05 * rng.standard_normal(x.shape) for x in u]
        d, skipped = degradation_detail(u, v)
        assert skipped == 1
        assert d == pytest.approx(loop_D(u, v), rel=1e-12)

    def test_all_excluded(self):
        with pytest.raises(ValueError, match="exclusion"):
            degradation_D([np.zeros((2, 2))], [np.ones((2, 2))])

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            degradation_D([np.ones((2, 2))], [np.ones((2, 3))])
        with pytest.raises(ValueError):
            degradation_D([np.ones((2, 2))], [])

    @given(arrays(np.float64, (3, 4), elements=st.floats(0.5, 10)), st.floats(0.0, 2.0))
    def test_nonnegative(self, u, scale):
        assert degradation_D([u], [scale * u]) >= 0.0

    def test_head_outputs_vanish_without_compression(self, small_folded, small_corpus):
        assert head_degradation(small_folded, small_corpus.sequences()[:2], CompressionPlan.zero(2)) < 1e-9

    def test_cached_head_baseline(self, small_folded, small_corpus):
        seqs = small_corpus.sequences()[:2]
        plan = CompressionPlan.uniform(2, 0.5)
        cached = baseline_head_outputs(small_folded, seqs)
        assert head_degradation(small_folded, seqs, plan, cached) == head_degradation(small_folded, seqs, plan)
        with pytest.raises(ValueError):
            head_degradation(small_folded, seqs, plan, cached[:-1])


class TestPerplexity:
    def test_uniform_logits(self):
        model = gen_model(seed=0, n_layers=1, n_heads=2, head_dim=4, vocab=256)
        flat = dataclasses.replace(model, out_head=np.zeros_like(model.out_head))
        seqs = [list(range(10)), list(range(50, 70))]
        assert perplexity_proxy(flat, None, seqs) == pytest.approx(256.0, rel=1e-12)

    def test_zero_plan_matches_baseline(self, small_model, small_folded, small_corpus):
        seqs = small_corpus.sequences()[:3]
        base = perplexity_proxy(small_model, None, seqs)
        assert perplexity_proxy(small_folded, CompressionPlan.zero(2), seqs) == pytest.approx(base, rel=1e-9)

    def test_empty_eval_set(self, small_model):
        with pytest.raises(ValueError):
            perplexity_proxy(small_model, None, [])

    def test_grows_along_p_grid(self, wide_folded, wide_corpus):
        seqs = wide_corpus.sequences()[1::3]
        ref = baseline_log_probs(wide_folded.base, seqs)
        soft = [perplexity_proxy(wide_folded, CompressionPlan.uniform(3, p), seqs, reference=ref)
                for p in (0.0, 0.2, 0.4, 0.6)]
        assert soft[0] == pytest.approx(perplexity_proxy(wide_folded.base, None, seqs, reference=ref), rel=1e-9)
        assert all(a <= b + 1e-9 for a, b in zip(soft, soft[1:]))


class TestReport:
    def test_skeleton_is_valid(self):
        assert validate_report(empty_report()) == []
        assert empty_report()["schema_version"] == SCHEMA_VERSION

    def test_round_trip(self, tmp_path):
        report = build_report(flops={"zdc": {"qkv": np.int64(3), "attn": 4, "total": 7}},
                              degradation={"p": [0.0, 0.5], "D": [0.0, np.float64(0.2)], "q_d": [0.0, 0.1]})
        emitted = emit_report(report, tmp_path / "r.json")
        assert load_report(tmp_path / "r.json") == emitted == report

    def test_stable_key_order(self, tmp_path):
        emit_report({"b": 1, "a": 2}, tmp_path / "one.json")
        emit_report({"a": 2, "b": 1}, tmp_path / "two.json")
        assert (tmp_path / "one.json").read_bytes() == (tmp_path / "two.json").read_bytes()

    def test_detects_bad_totals(self):
        report = build_report(flops={"zdc": {"qkv": 3, "total": 4}},
                              comm={"w2": {"a2a1_bytes": 1, "a2a2_bytes": 2, "denom_bytes": 0, "total_bytes": 4}})
        problems = validate_report(report)
        assert len(problems) == 2
        assert validate_report({"schema_version": 0})

    def test_zdc_flops_from_real_run(self, small_folded):
        _, stats = generate(small_folded, [1, 2, 3, 4, 5, 6], 3, CompressionPlan.uniform(2, 0.5, 0.5), ZDC,
                            return_stats=True)
        report = build_report(flops={"zdc": stats["flops"]}, kvc_floats=stats["kvc_floats"])
        assert report["flops"]["zdc"]["compress"] == 0
        assert validate_report(report) == []

    def test_layer_outputs_vanish_at_zero(self, small_model, small_folded):
        tokens = [3, 1, 4, 1, 5, 9, 2, 6]
        base = forward(small_model, tokens, mode="baseline").layer_outputs
        zdc = forward(small_folded, tokens, CompressionPlan.zero(2), ZDC).layer_outputs
        assert degradation_D(base, zdc) < 1e-9
