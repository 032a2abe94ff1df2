import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pblab.data import VOCAB, decode, CanarySet, generate_canaries
from pblab.models import CausalLMModel, ModelConfig
from pblab.optim import TrainConfig
from pblab.probes import (
    ProbeError,
    amplify_neuron,
    calibrate_threshold,
    coarse_set,
    exposure,
    exposure_candidates,
    exposure_from_rank,
    find_leaking_params,
    jaccard,
    neuron_scores,
    overlap_across_seeds,
    phone_prompts,
    refine_neurons,
    relative_param_change,
    run_neuron_probe,
    run_param_probe,
    scaled_activation_logits,
    threshold_from_percentiles,
)
from pblab.rng import make_rng

from conftest import blob_set


# --- parameter-change probe ---


def test_relative_change_values():
    a = {"w": np.array([1.0, 0.0, 2.0])}
    assert relative_param_change(a, a).r.max() == 0.0
    r = relative_param_change(a, {"w": np.array([1.1, 0.001, 2.0])}).r
    assert r[0] == pytest.approx(0.1)
    assert r[1] == pytest.approx(1e5, rel=1e-4)
    assert r[2] == 0.0


def test_relative_change_shape_checks():
    with pytest.raises(ProbeError):
        relative_param_change({"w": np.zeros(2)}, {"v": np.zeros(2)})
    with pytest.raises(ProbeError):
        relative_param_change({"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_locate_maps_back_to_tensor():
    p = relative_param_change({"a": np.zeros(3), "b": np.zeros((2, 2))}, {"a": np.zeros(3), "b": np.zeros((2, 2))})
    assert p.locate(0) == ("a", 0)
    assert p.locate(4) == ("b", 1)


def test_threshold_is_mean_of_percentiles():
    assert threshold_from_percentiles([0.1, 0.3]) == pytest.approx(0.2)
    with pytest.raises(ProbeError):
        threshold_from_percentiles([])


def test_calibrate_identical_runs(tiny_clf):
    m = tiny_clf.clone()
    m.params["head.w"].data[...] *= 1.5
    assert calibrate_threshold(tiny_clf, [m, m.clone()]) == pytest.approx(
        relative_param_change(tiny_clf, m).percentile(99.9))
    with pytest.raises(ProbeError, match="2 runs"):
        calibrate_threshold(tiny_clf, [m])


def test_find_leaking_edge_cases(tiny_clf):
    m = tiny_clf.clone()
    m.params["head.w"].data[...] += 1.0
    assert find_leaking_params(m, m, tiny_clf, 0.0) == set()
    assert find_leaking_params(m, tiny_clf, tiny_clf, math.inf) == set()
    assert len(find_leaking_params(m, tiny_clf, tiny_clf, 0.0)) == m.params["head.w"].data.size


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 2), st.floats(0, 2))
def test_leaking_set_shrinks_as_tau_grows(seed, t1, t2):
    rng = np.random.default_rng(seed)
    base = {"w": rng.normal(size=50)}
    sec = {"w": base["w"] + rng.normal(0, 0.5, 50)}
    ref = {"w": base["w"] + rng.normal(0, 0.5, 50)}
    lo, hi = sorted((t1, t2))
    assert find_leaking_params(sec, ref, base, hi) <= find_leaking_params(sec, ref, base, lo)


def test_jaccard_cases():
    assert jaccard({1, 2}, {1, 2}) == 1.0
    assert jaccard({1}, {2}) == 0.0
    assert jaccard({1, 2, 3}, {2, 3, 4}) == 0.5
    assert jaccard(set(), set()) == 1.0


def test_overlap_across_seeds():
    jac, inter = overlap_across_seeds([{1, 2, 3}, {2, 3, 4}])
    np.testing.assert_allclose(jac, [[1, 0.5], [0.5, 1]])
    assert inter == 2
    with pytest.raises(ProbeError):
        overlap_across_seeds([{1}])


def test_param_probe_report(tiny_clf):
    data = blob_set(n=40)
    secrets = blob_set(n=3, seed=9, id_offset=500)
    cfg = TrainConfig(steps=5, batch_size=8, lr=1e-2)
    rep = run_param_probe(tiny_clf, data, secrets, blob_set(n=4, seed=8, id_offset=900), cfg, n_calib=2)
    assert len(rep.set_sizes) == 3 and rep.jaccard.shape == (3, 3)
    assert np.all(np.diag(rep.jaccard) == 1)
    assert rep.rows()[0][:2] == ["run", "set_size"]
    assert "intersection" in rep.summary()


def test_fixed_randomness_with_same_data_finds_nothing(tiny_clf):
    # identical seeds and an empty secret contribution leave the two runs equal
    data = blob_set(n=40)
    cfg = TrainConfig(steps=5, batch_size=8, lr=1e-2)
    secrets = data.subset([0, 1])
    rep = run_param_probe(tiny_clf, data, secrets, data, cfg, n_calib=2, fixed_randomness=True)
    assert rep.fixed_randomness
    assert all(s >= 0 for s in rep.set_sizes)


# --- knowledge neurons ---


def _lm(**kw):
    base = dict(d=16, ctx=64, layers=2, heads=2, vocab=VOCAB, seed=4)
    return CausalLMModel.init(ModelConfig.lm_default(**{**base, **kw}))


def test_zero_outgoing_weights_give_zero_attribution():
    m = _lm()
    m.params["b1.ff.w2"].data[:, 5] = 0
    sc = neuron_scores(m, [1, 2, 3], 7, layer=1, steps=8)
    assert sc[5] == 0.0
    assert sc.shape == (64,)


def test_duplicated_neuron_gets_equal_attribution():
    m = _lm()
    m.params["b0.ff.w1"].data[3] = m.params["b0.ff.w1"].data[2]
    m.params["b0.ff.b1"].data[3] = m.params["b0.ff.b1"].data[2]
    m.params["b0.ff.w2"].data[:, 3] = m.params["b0.ff.w2"].data[:, 2]
    sc = neuron_scores(m, [5, 9, 11, 2], 4, layer=0, steps=10)
    assert sc[2] == pytest.approx(sc[3], rel=1e-4, abs=1e-9)


def test_attribution_completeness_is_close():
    # sum of IG scores approximates p(full) - p(layer's last-position activations zeroed)
    m = _lm(seed=7)
    prompt, ans, layer = np.array([3, 1, 4, 1, 5]), 9, 1
    sc = neuron_scores(m, prompt, ans, layer, steps=64)
    from pblab import tensor as T

    def p(alpha):
        s = np.ones((len(prompt), 64), np.float32)
        s[-1] = alpha
        with T.no_grad():
            z = m.forward_batch(prompt[None], act_scale={layer: T.Tensor(s)}).data[-1]
        e = np.exp(z - z.max())
        return e[ans] / e.sum()

    assert sc.sum() == pytest.approx(p(1.0) - p(0.0), abs=5e-3)


def test_riemann_sum_converges():
    m = _lm(seed=7)
    prompt, ans = np.array([3, 1, 4, 1, 5, 9]), 2
    coarse = neuron_scores(m, prompt, ans, 1, steps=20)
    fine = neuron_scores(m, prompt, ans, 1, steps=200)
    assert np.linalg.norm(coarse - fine) <= 0.05 * np.linalg.norm(fine)


def test_amplify_is_local_to_active_neurons():
    from pblab import tensor as T

    m = _lm(seed=5)
    m.params["b0.ff.w1"].data[7] = 0
    m.params["b0.ff.b1"].data[7] = 0  # gelu(0) = 0 at every position
    toks = np.array([[1, 2, 3, 4]])
    with T.no_grad():
        base = m.forward_batch(toks).data
        dead = amplify_neuron(m, 0, 7, 10.0).forward_batch(toks).data
        live = amplify_neuron(m, 0, 8, 10.0).forward_batch(toks).data
    np.testing.assert_array_equal(dead, base)
    assert np.abs(live - base).max() > 1e-6


def test_layer_out_of_range():
    with pytest.raises(ProbeError):
        neuron_scores(_lm(), [1, 2], 3, layer=2)


def test_coarse_and_refine():
    assert coarse_set(np.arange(100.0), 98.0) == {98, 99}  # 98th percentile is 97.02
    sets = [{1, 2, 3}, {2, 3}, {3, 4}]
    assert refine_neurons(sets, 1.0) == {3}
    assert refine_neurons(sets, 0.6) == {2, 3}
    assert refine_neurons([{7, 8}], 0.7) == {7, 8}
    with pytest.raises(ProbeError):
        refine_neurons([])


def test_amplify_identity_and_bounds():
    m = _lm()
    out = amplify_neuron(m, 0, 3, 1.0)
    for n in m.params:
        np.testing.assert_array_equal(out.params[n].data, m.params[n].data)
    for bad in (0.5, 21):
        with pytest.raises(ProbeError):
            amplify_neuron(m, 0, 3, bad)
    with pytest.raises(ProbeError):
        amplify_neuron(m, 0, 64, 2.0)


def test_amplify_matches_scaled_activation():
    m = _lm(seed=2)
    toks = np.array([4, 8, 15, 16, 23, 42])
    a = amplify_neuron(m, 1, 10, 5.0)
    from pblab import tensor as T

    with T.no_grad():
        got = a.forward_batch(toks[None]).data
    np.testing.assert_allclose(got, scaled_activation_logits(m, toks, 1, 10, 5.0), atol=1e-5)
    # the original is untouched
    assert not np.array_equal(m.params["b1.ff.w2"].data, a.params["b1.ff.w2"].data)


def test_amplify_composes():
    m = _lm(seed=3)
    ab = amplify_neuron(amplify_neuron(m, 0, 1, 2.0), 0, 1, 3.0)
    np.testing.assert_allclose(ab.params["b0.ff.w2"].data, amplify_neuron(m, 0, 1, 6.0).params["b0.ff.w2"].data, rtol=1e-6)


# --- exposure ---


def test_exposure_from_rank_values():
    assert exposure_from_rank(1, 256) == 8.0
    assert exposure_from_rank(256, 256) == 0.0
    assert exposure_from_rank(64, 256) == 2.0
    with pytest.raises(ProbeError):
        exposure_from_rank(0, 10)


@settings(max_examples=50)
@given(st.integers(1, 4096), st.data())
def test_exposure_bounds_and_monotone(r, data):
    k = data.draw(st.integers(1, r))
    e = exposure_from_rank(k, r)
    assert 0 <= e <= math.log2(r) + 1e-12
    if k < r:
        assert exposure_from_rank(k + 1, r) < e


def _canary():
    return generate_canaries(CanarySet(n=1, reps=1, pool_size=20), make_rng(0))[0]


def test_exposure_on_tiny_model():
    rec = _canary()
    cands, k = exposure_candidates(rec, 16, np.random.default_rng(0))
    assert len(cands) == 16 and len({c.tobytes() for c in cands}) == 16
    np.testing.assert_array_equal(cands[k], rec.tokens)
    rep = exposure(cands[k], cands, _lm())
    assert 1 <= rep.rank <= 16
    assert rep.exposure == pytest.approx(4 - math.log2(rep.rank))
    with pytest.raises(ProbeError):
        exposure(np.array([1, 2, 3]), cands, _lm())


def test_phone_prompts_end_before_digits():
    rec = _canary()
    prompts, ans = phone_prompts(rec)
    assert len(prompts) == 5
    phone_start = rec.text.index("phone ") + len("phone ")
    for p in prompts:
        assert rec.text[:phone_start].endswith(decode(p))
    assert ans == int(rec.tokens[phone_start])


def test_run_neuron_probe_smoke():
    rep = run_neuron_probe(_lm(), _canary(), layer=1, steps=4, r=16)
    assert len(rep.coarse) == 5
    assert np.isfinite(rep.exposure_before) and np.isfinite(rep.exposure_after)
    assert "fine set" in rep.summary()
