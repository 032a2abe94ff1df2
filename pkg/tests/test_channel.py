import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pblab.channel import (
    Channel,
    ChannelConfig,
    ChannelError,
    QueryResponse,
    apply_topk,
    green_list,
    log_softmax_np,
    quantized_query,
    statistic_from_channel,
    watermark_logits,
    write_responses_csv,
)
from pblab.mia import classifier_statistic, loss_attack_score
from pblab.models import quantize_dequantize

from conftest import blob_set, seq_set


# --- top-k ---


def test_topk_full_equals_dense():
    lp = log_softmax_np(np.array([0.3, -1.0, 2.0, 0.5]))
    ids, vals = apply_topk(lp, 4)
    np.testing.assert_array_equal(np.sort(ids), np.arange(4))
    np.testing.assert_array_equal(vals, lp[ids])


def test_topk_one_is_argmax():
    ids, vals = apply_topk([0.1, 5.0, -2.0], 1)
    assert ids.tolist() == [1] and vals.tolist() == [5.0]


def test_topk_hand_case():
    lp = log_softmax_np(np.array([3.0, 1.0, 2.0, 0.0]))
    ids, vals = apply_topk(lp, 2)
    assert ids.tolist() == [0, 2]
    lse = math.log(math.e**3 + math.e + math.e**2 + 1)
    np.testing.assert_allclose(vals, [3 - lse, 2 - lse])


def test_topk_too_large():
    with pytest.raises(ChannelError):
        apply_topk([0.0, 1.0], 3)


def test_topk_ties_prefer_lower_id():
    ids, _ = apply_topk([1.0, 2.0, 2.0, 2.0], 2)
    assert ids.tolist() == [1, 2]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.integers(-5, 5).map(float)), st.data())
def test_topk_matches_brute_force(v, data):
    k = data.draw(st.integers(1, len(v)))
    ids, vals = apply_topk(v, k)
    oracle = sorted(range(len(v)), key=lambda i: (-v[i], i))[:k]
    assert ids.tolist() == oracle
    assert np.all(np.diff(vals) <= 0)


# --- watermark ---


def test_watermark_delta_zero_identity():
    z = np.array([0.5, -1.0, 2.0, 3.0])
    np.testing.assert_array_equal(watermark_logits(z, 1, delta=0.0), z)


@pytest.mark.parametrize("gamma", [0.25, 0.5, 0.7])
def test_green_set_size(gamma):
    for prev in range(64):
        assert len(green_list(64, prev, gamma, 123)) == math.floor(gamma * 64)


def test_watermark_deterministic_and_token_dependent():
    v = 64
    assert np.array_equal(green_list(v, 5, 0.5, 42), green_list(v, 5, 0.5, 42))
    parts = {tuple(green_list(v, p, 0.5, 42)) for p in range(v)}
    assert len(parts) == v
    big = {tuple(green_list(128, p, 0.5, 42)) for p in range(100)}
    assert len(big) == 100


def test_watermark_bias_signs():
    z = np.zeros(16)
    out = watermark_logits(z, 3, gamma=0.5, delta=2.0, hash_seed=7)
    green = green_list(16, 3, 0.5, 7)
    assert np.all(out[green] == 2.0)
    assert np.all(np.delete(out, green) == -2.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.sampled_from([8, 16, 64]), elements=st.floats(-10, 10)), st.integers(0, 7), st.floats(0, 5))
def test_watermark_preserves_sum_for_half_split(z, prev, delta):
    out = watermark_logits(z, prev, gamma=0.5, delta=delta)
    assert out.sum() == pytest.approx(z.sum(), abs=1e-9)


def test_watermark_prev_token_range():
    with pytest.raises(ChannelError):
        watermark_logits(np.zeros(4), 4)


# --- quantized serving ---


def test_quantized_on_grid_equals_full(tiny_lm):
    for p in tiny_lm.parameters():
        if p.ndim == 2:
            p.data = quantize_dequantize(p.data, 8)
    seq = np.arange(1, 10)
    full = Channel(tiny_lm).query(seq).dense
    np.testing.assert_allclose(quantized_query(tiny_lm, 8, seq).dense, full, atol=1e-6)


def test_eight_bit_closer_than_four(tiny_lm):
    rng = np.random.default_rng(0)
    c8, c4, full = Channel(tiny_lm, ChannelConfig(quant_bits=8)), Channel(tiny_lm, ChannelConfig(quant_bits=4)), Channel(tiny_lm)
    wins = 0
    for _ in range(20):
        x = rng.integers(0, 12, 10)
        f = full._logits(x[None, :])
        wins += np.abs(c8._logits(x[None, :]) - f).max() < np.abs(c4._logits(x[None, :]) - f).max()
    assert wins >= 16


def test_quantized_repeatable(tiny_lm):
    seq = np.arange(1, 8)
    np.testing.assert_array_equal(quantized_query(tiny_lm, 8, seq).dense, quantized_query(tiny_lm, 8, seq).dense)


# --- statistic recovery ---


def test_full_channel_matches_direct_statistic(tiny_lm, tiny_clf):
    seqs = seq_set(n=6, length=9)
    np.testing.assert_allclose(Channel(tiny_lm).statistics(seqs), loss_attack_score(tiny_lm, seqs), rtol=1e-5)
    data = blob_set(n=10)
    np.testing.assert_allclose(Channel(tiny_clf).statistics(data), classifier_statistic(tiny_clf, data.x, data.y), rtol=1e-5)


def test_topk_statistic_exact_when_present():
    resp = QueryResponse(sparse=[(np.array([4, 1]), np.array([-0.5, -1.5]))])
    assert statistic_from_channel(resp, [1]) == -1.5


def test_topk_floor_when_absent():
    ids = np.array([0, 1, 2, 3, 4])
    lps = np.array([-0.1, -0.5, -1.0, -1.5, -2.0])
    resp = QueryResponse(sparse=[(ids, lps)])
    assert statistic_from_channel(resp, [9]) == pytest.approx(-2 - math.log(5))
    assert statistic_from_channel(resp, [9]) == pytest.approx(-3.609, abs=1e-3)


def test_empty_response_rejected():
    with pytest.raises(ChannelError):
        statistic_from_channel(QueryResponse(sparse=[]), [])


def test_topk_of_whole_vocab_matches_full(tiny_lm):
    seqs = seq_set(n=5, length=9)
    full = Channel(tiny_lm).statistics(seqs)
    np.testing.assert_allclose(Channel(tiny_lm, ChannelConfig(topk=12)).statistics(seqs), full, rtol=1e-12)


# --- channel contract ---


@pytest.mark.parametrize("kind", ["full_logits", "topk5", "watermark", "quant4", "quant8+watermark+topk5"])
def test_channels_deterministic_and_non_mutating(tiny_lm, kind):
    before = {n: a.copy() for n, a in tiny_lm.state_dict().items()}
    ch = Channel(tiny_lm, ChannelConfig.parse(kind))
    seqs = seq_set(n=4, length=8)
    np.testing.assert_array_equal(ch.statistics(seqs), ch.statistics(seqs))
    np.testing.assert_array_equal(Channel(tiny_lm, ChannelConfig.parse(kind)).statistics(seqs), ch.statistics(seqs))
    for n, a in before.items():
        np.testing.assert_array_equal(tiny_lm.params[n].data, a)


def test_parse_and_validation():
    c = ChannelConfig.parse("quant4+watermark+topk5")
    assert (c.quant_bits, c.watermark, c.topk) == (4, True, 5)
    assert c.kind == "quantized(4)+watermark(0.5,2.0)+topk(5)"
    with pytest.raises(ChannelError):
        ChannelConfig(quant_bits=2)
    with pytest.raises(ChannelError):
        ChannelConfig(gamma=1.0)
    with pytest.raises(ChannelError):
        ChannelConfig.parse("blur")


def test_sparse_responses_sorted_and_csv(tiny_lm, tmp_path):
    resp = Channel(tiny_lm, ChannelConfig(topk=5)).query(np.arange(1, 6))
    assert len(resp) == 5
    for ids, lps in resp.sparse:
        assert len(ids) == 5 and np.all(np.diff(lps) <= 0)
    write_responses_csv({"q0": resp}, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "query_id,token_id,logprob" and len(lines) == 26
