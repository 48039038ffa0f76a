import json

import numpy as np
import pytest

from sketchkv.core import ConfigError, StoreConfig
from sketchkv.sim import (
    DP_EDGES,
    ErrorReport,
    SimConfig,
    full_attention,
    generate_stream,
    merge_histograms,
    run_comparison,
)
from sketchkv.store import Part


def small(n=64, d=16, **kw):
    store_kw = {
        k: kw.pop(k) for k in list(kw) if k in StoreConfig.__dataclass_fields__ and k != "seed"
    }
    store_kw.setdefault("total_budget", max(30, n // 4))
    return SimConfig(n_tokens=n, d_k=d, store=StoreConfig(d=d, **store_kw), **kw)


def test_stream_deterministic():
    a = generate_stream(small(seed=3))
    b = generate_stream(small(seed=3))
    c = generate_stream(small(seed=4))
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1].key, y[1].key) for x, y in zip(a, b))
    assert not np.array_equal(a[0][1].key, c[0][1].key)


def test_stream_key_std():
    stream = generate_stream(small(n=100_000, d=8, sigma_k=1.0))
    keys = np.stack([t.key for _, t in stream])
    std = keys.std(axis=0)
    assert np.all((std > 0.99) & (std < 1.01))


def test_stream_scaled_sigmas():
    stream = generate_stream(small(n=20_000, d=4, sigma_q=0.5, sigma_v=3.0))
    q = np.stack([x[0] for x in stream])
    v = np.stack([t.value for _, t in stream])
    assert q.std() == pytest.approx(0.5, rel=0.02) and v.std() == pytest.approx(3.0, rel=0.02)


def test_planted_prior():
    stream = generate_stream(small(planted_heavy=[(5, 10.0)]))
    scores = [t.score for _, t in stream]
    assert scores[5] == 10.0 and max(scores[:5] + scores[6:]) < 10.0


def test_config_validation():
    with pytest.raises(ConfigError):
        small(sigma_q=0.0)
    with pytest.raises(ConfigError):
        small(planted_heavy=[(64, 1.0)])
    with pytest.raises(ConfigError):
        SimConfig(d_k=16)  # store still at d=128


def test_config_round_trip(tmp_path):
    cfg = small(seed=9, planted_heavy=[(2, 5.0)], budget_fraction=0.5)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert SimConfig.load(path) == SimConfig.from_dict(cfg.to_dict())
    assert SimConfig.load(path).store.total_budget == 32


def test_config_rejects_unknown_fields():
    with pytest.raises(ConfigError, match="unknown"):
        SimConfig.from_dict({"n_tokens": 8, "dk": 4})


def test_full_attention_single_token():
    v = np.array([[1.0, -2.0]])
    out, p = full_attention([[3.0, 4.0]], [[0.5, 0.5]], v)
    assert p.tolist() == [[1.0]] and np.array_equal(out, v)


def test_full_attention_identical_keys():
    _, p = full_attention([[0.0, 0.0], [1.0, 2.0]], [[1.0, 1.0], [1.0, 1.0]], np.eye(2))
    assert np.allclose(p[1], [0.5, 0.5])
    assert p[0].tolist() == [1.0, 0.0]  # causal mask


def test_full_attention_against_brute_force():
    from decimal import Decimal, getcontext

    getcontext().prec = 40
    rng = np.random.default_rng(0)
    q, k, v = rng.standard_normal((3, 8, 5))
    out, p = full_attention(q, k, v)
    for t in range(8):
        logits = [sum(Decimal(q[t, c]) * Decimal(k[j, c]) for c in range(5)) / Decimal(5).sqrt() for j in range(t + 1)]
        e = [x.exp() for x in logits]
        z = sum(e)
        ref_p = [float(x / z) for x in e]
        ref_out = [float(sum(x / z * Decimal(v[j, c]) for j, x in enumerate(e))) for c in range(5)]
        assert np.allclose(p[t, : t + 1], ref_p, rtol=0, atol=1e-6)
        assert np.allclose(out[t], ref_out, rtol=0, atol=1e-6)
        assert p[t, t + 1:].sum() == 0


def test_full_attention_rows_normalized():
    rng = np.random.default_rng(1)
    q, k, v = rng.standard_normal((3, 50, 8)) * 5
    _, p = full_attention(q, k, v)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_exact_capacity_makes_pipeline_an_identity():
    # exact tiers hold 32 + 34 >= 64 tokens, so nothing ever reaches the sketch
    trace, report = run_comparison(small(n=64, total_budget=72))
    assert report.occupancy["recent_budget"] + report.occupancy["candidate_budget"] >= 64
    assert len(trace.vague_indices) == 0
    assert np.array_equal(trace.p_compressed, trace.p_full)
    assert np.array_equal(trace.out_compressed, trace.out_full)
    assert report.passed


def test_budget_equal_to_tokens_still_spills():
    # the sketch's slots count against the budget, leaving fewer exact slots than tokens
    trace, report = run_comparison(small(n=64, total_budget=64))
    assert report.occupancy["recent_budget"] + report.occupancy["candidate_budget"] < 64
    assert len(trace.vague_indices) > 0


def test_vague_heavy_store_perturbs_every_vague_key():
    cfg = small(n=64, total_budget=9, recent_ratio=1 / 9, candidate_ratio=2 / 9, vague_ratio=6 / 9)
    trace, report = run_comparison(cfg)
    assert report.occupancy["recent_budget"] == 1
    assert len(trace.vague_indices) > 0
    assert trace.delta_k.shape == (len(trace.vague_indices), 16)
    assert np.all(np.any(trace.delta_k != 0, axis=1))
    assert np.allclose(trace.p_compressed.sum(axis=1), 1.0, atol=1e-5)
    assert report.pass_flags["rows_normalized"] and report.pass_flags["memory_ceiling"]


def test_membership_matches_delta_coverage():
    trace, _ = run_comparison(small(n=96))
    vague = [i for i, m in enumerate(trace.membership) if m is Part.VAGUE]
    assert vague == trace.vague_indices.tolist()


def test_report_fields_and_json_round_trip():
    _, report = run_comparison(small(n=96, seed=2))
    for key in ("var_dk", "var_dv", "var_dp", "var_dp_overall", "max_abs_dp", "swaps"):
        assert key in report.empirical
    for key in ("var_dk_bound", "var_dv_bound", "var_dp_first_order", "var_dp_bound_derived"):
        assert key in report.predicted
    assert len(report.empirical["var_dp"]) == len(DP_EDGES) - 1
    doc = json.loads(json.dumps(report.to_dict()))
    back = ErrorReport.from_dict(doc)
    assert back.pass_flags == report.pass_flags
    assert [b.count for b in back.dp_histogram()] == [b.count for b in report.dp_histogram()]


def test_deterministic_runs():
    _, a = run_comparison(small(n=80, seed=5))
    _, b = run_comparison(small(n=80, seed=5))
    assert a.empirical == b.empirical and a.predicted == b.predicted


def test_tail_bound_flags_hold_in_steady_state():
    _, report = run_comparison(small(n=256, d=32, total_budget=64))
    occ = report.occupancy
    assert occ["a"] > occ["N"]
    assert report.pass_flags["key_tail_bound"] and report.pass_flags["value_tail_bound"]


def test_first_order_variance_agrees_in_small_noise_regime():
    # small logit noise (sigma_q=0.5, a/N ~ 3.4) keeps the linearisation valid
    hists = []
    for seed in range(4):
        cfg = small(
            n=256, d=64, seed=seed, sigma_q=0.5, budget_fraction=0.5,
            recent_ratio=0.3, candidate_ratio=0.3, vague_ratio=0.4,
        )
        _, report = run_comparison(cfg)
        hists.append(report.dp_histogram())
    _, overall = merge_histograms(hists)
    assert overall.count > 1000
    ratio = overall.var_dp / overall.predicted
    assert 0.5 <= ratio <= 2.0, ratio


def test_planted_heavy_hitters_stay_exact():
    planted = [(3, 1000.0), (40, 1000.0), (77, 1000.0)]
    for seed in range(4):
        cfg = small(n=128, d=32, seed=seed, planted_heavy=planted, total_budget=32)
        trace, _ = run_comparison(cfg)
        stream = generate_stream(cfg)
        for i, _ in planted:
            assert trace.membership[i] is Part.CANDIDATE
            assert np.array_equal(trace.keys[i], stream[i][1].key)
            assert np.array_equal(trace.values[i], stream[i][1].value)
