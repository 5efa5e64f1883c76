import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icontrast.contrast import (ContrastConfig, DegenerateMask, KeyIndices, MLCConfig,
                                compute_queries, icon_forward_backward, icon_grad, icon_loss,
                                info_nce, info_nce_grad, layer_weights, multi_level_icon,
                                total_loss)
from icontrast.numerics import Rng, finite_diff_grad, relative_error
from icontrast.sampler import fps_oracle


def scalar_info_nce(q, pos, neg, tau, normalize):
    """Per-key loop over the InfoNCE definition, plain floats."""
    def unit(v):
        n = math.sqrt(sum(x * x for x in v))
        return [x / n for x in v]

    def dot(a, b):
        return sum(x * y for x, y in zip(a, b))

    q = list(q)
    pos = [list(k) for k in pos]
    neg = [list(k) for k in neg]
    if normalize:
        q, pos, neg = unit(q), [unit(k) for k in pos], [unit(k) for k in neg]
    total = 0.0
    for kp in pos:
        num = math.exp(dot(q, kp) / tau)
        den = num + sum(math.exp(dot(q, kn) / tau) for kn in neg)
        total += -math.log(num / den)
    return total / len(pos)


def test_info_nce_equal_dots_is_ln2():
    q = np.array([1.0, 0.0])
    assert info_nce(q, [[0.5, 1.0]], [[0.5, -1.0]], 1.0, normalize=False) == pytest.approx(math.log(2), abs=1e-15)


def test_info_nce_closed_form_value():
    expected = float(mpmath.log(1 + mpmath.e ** -1))
    assert expected == pytest.approx(0.313262, abs=1e-6)
    got = info_nce(np.array([1.0, 0.0]), [[1.0, 0.0]], [[0.0, 1.0]], 1.0, normalize=False)
    assert got == pytest.approx(expected, abs=1e-15)


def test_info_nce_duplicate_positives_average():
    q = np.array([1.0, 2.0])
    single = info_nce(q, [[1.0, 0.0]], [[0.0, 1.0]], 0.5, normalize=False)
    double = info_nce(q, [[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0]], 0.5, normalize=False)
    assert double == pytest.approx(single, abs=1e-15)


@pytest.mark.parametrize("n", [1, 3, 10, 50])
def test_info_nce_all_equal_dots(n):
    q = np.array([1.0, 0.0, 0.0])
    keys = np.tile([0.7, 0.3, -0.2], (n + 2, 1))
    loss = info_nce(q, keys[:2], keys[2:], 0.1, normalize=True)
    assert abs(loss - math.log(1 + n)) <= 1e-12


def test_info_nce_matches_scalar_loop():
    rng = Rng(31)
    for trial in range(100):
        d = 2 + rng.randbelow(8)
        q = rng.normal_array(d)
        pos = rng.normal_array((1 + rng.randbelow(6), d))
        neg = rng.normal_array((rng.randbelow(8), d))
        tau = 0.05 + rng.uniform()
        norm = bool(trial % 2)
        got = info_nce(q, pos, neg, tau, norm)
        assert abs(got - scalar_info_nce(q, pos, neg, tau, norm)) <= 1e-12 * max(1.0, abs(got))


def test_info_nce_errors():
    with pytest.raises(ValueError):
        info_nce(np.ones(2), np.zeros((0, 2)), np.ones((1, 2)), 1.0)
    with pytest.raises(ValueError):
        info_nce(np.ones(2), np.ones((1, 2)), np.ones((1, 2)), 0.0)
    with pytest.raises(ValueError):
        info_nce(np.array([1e308, 1e308]), np.array([[1e308, 1e308]]), np.ones((1, 2)), 1e-3,
                 normalize=False)


@pytest.mark.parametrize("normalize", [True, False])
def test_info_nce_gradients(normalize):
    rng = Rng(4)
    q, pos, neg = rng.normal_array(5), rng.normal_array((3, 5)), rng.normal_array((4, 5))
    _, dq, dpos, dneg = info_nce_grad(q, pos, neg, 0.3, normalize)
    assert relative_error(dq, finite_diff_grad(lambda x: info_nce(x, pos, neg, 0.3, normalize), q)) < 1e-7
    assert relative_error(dpos, finite_diff_grad(lambda x: info_nce(q, x, neg, 0.3, normalize), pos)) < 1e-7
    assert relative_error(dneg, finite_diff_grad(lambda x: info_nce(q, pos, x, 0.3, normalize), neg)) < 1e-7


def test_queries():
    fmap = np.zeros((2, 2, 3))
    fmap[0, 0] = [1.0, 2.0, 3.0]
    fmap[1, 1] = [1.0, 2.0, 3.0]
    tmask = np.array([[1, 0], [0, 1]])
    qa, qe = compute_queries(fmap, tmask)
    np.testing.assert_array_equal(qa, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(qe, [0.0, 0.0, 0.0])
    single = np.array([[0, 0], [1, 0]])
    fmap2 = np.arange(12.0).reshape(2, 2, 3)
    np.testing.assert_array_equal(compute_queries(fmap2, single)[0], fmap2[1, 0])
    with pytest.raises(DegenerateMask):
        compute_queries(fmap, np.ones((2, 2)))
    with pytest.raises(DegenerateMask):
        compute_queries(fmap, np.zeros((2, 2)))


def _instance(seed, h=4, w=4, d=8, p=0.4):
    rng = Rng(seed)
    fmap = rng.normal_array((h, w, d))
    while True:
        tmask = (rng.uniform_array((h, w)) < p).astype(np.uint8)
        if 0 < tmask.sum() < tmask.size:
            return fmap, tmask


def test_icon_label_swap_symmetry_fixed_keys():
    fmap, tmask = _instance(1)
    cfg = ContrastConfig(n_agent=3, n_env=6)
    res = icon_loss(fmap, tmask, cfg, Rng(2))
    swapped_keys = KeyIndices(res.keys.env, res.keys.agent)
    swapped, _ = icon_forward_backward(fmap, 1 - tmask, swapped_keys, cfg, want_grad=False)
    assert swapped == pytest.approx(res.loss, abs=1e-13)


def test_icon_label_swap_symmetry_exhaustive_keys():
    fmap, tmask = _instance(2)
    n = tmask.size
    cfg = ContrastConfig(n_agent=n, n_env=n)
    a = icon_loss(fmap, tmask, cfg, Rng(0)).loss
    b = icon_loss(fmap, 1 - tmask, cfg, Rng(99)).loss
    assert a == pytest.approx(b, abs=1e-12)


def test_icon_clamps_key_counts():
    fmap, _ = _instance(3)
    tmask = np.zeros((4, 4), np.uint8)
    tmask[1, 2] = 1
    tmask[3, 0] = 1
    res = icon_loss(fmap, tmask, ContrastConfig(n_agent=10, n_env=50), Rng(0))
    assert np.isfinite(res.loss) and not res.skipped
    assert len(res.keys.agent) == 2 and len(res.keys.env) == 14


def test_icon_degenerate_mask_is_skipped():
    fmap, _ = _instance(3)
    res = icon_loss(fmap, np.ones((4, 4)), ContrastConfig(), Rng(0))
    assert res.skipped and res.loss == 0.0


def test_icon_matches_step_by_step_oracle():
    fmap, tmask = _instance(10)
    cfg = ContrastConfig(tau=0.2, n_agent=3, n_env=5, normalize=True)
    res = icon_loss(fmap, tmask, cfg, Rng(123))
    # keys: same starts through the recompute-all sampler
    a_start = divmod(int(res.keys.agent[0]), 4)
    e_start = divmod(int(res.keys.env[0]), 4)
    ka = fps_oracle(tmask, 3, a_start)
    ke = fps_oracle(1 - tmask, 5, e_start)
    assert [divmod(int(i), 4) for i in res.keys.agent] == ka
    assert [divmod(int(i), 4) for i in res.keys.env] == ke
    # queries: plain averages
    agent_cells = [(k, l) for k in range(4) for l in range(4) if tmask[k, l]]
    env_cells = [(k, l) for k in range(4) for l in range(4) if not tmask[k, l]]
    qa = [sum(fmap[k, l, c] for k, l in agent_cells) / len(agent_cells) for c in range(8)]
    qe = [sum(fmap[k, l, c] for k, l in env_cells) / len(env_cells) for c in range(8)]
    Ka = [fmap[k, l] for k, l in ka]
    Ke = [fmap[k, l] for k, l in ke]
    expected = scalar_info_nce(qa, Ka, Ke, 0.2, True) + scalar_info_nce(qe, Ke, Ka, 0.2, True)
    assert res.loss == pytest.approx(expected, abs=1e-12)


def test_layer_weights_cases():
    np.testing.assert_allclose(layer_weights(4, 0.0), [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(layer_weights(2, math.log(2)), [1 / 3, 2 / 3], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 24), st.floats(0.01, 5.0))
def test_layer_weights_sum_and_increase(n, gamma):
    w = layer_weights(n, gamma)
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.all(np.diff(w) > 0)


def test_multi_level_single_layer_equals_icon_loss():
    fmap, tmask = _instance(6)
    cfg = ContrastConfig(n_agent=2, n_env=4)
    rng = Rng(55)
    ml = multi_level_icon([fmap], tmask, cfg, MLCConfig(gamma=1.0), rng)
    single = icon_loss(fmap, tmask, cfg, Rng(55).spawn(1))
    assert ml.loss == pytest.approx(single.loss, abs=1e-15)


def test_multi_level_weighted_sum():
    fmaps = [_instance(s)[0] for s in range(3)]
    tmask = _instance(0)[1]
    cfg = ContrastConfig(n_agent=2, n_env=4)
    ml = multi_level_icon(fmaps, tmask, cfg, MLCConfig(gamma=0.7), Rng(1))
    w = layer_weights(3, 0.7)
    assert ml.loss == pytest.approx(float(np.dot(w, ml.layer_losses)), abs=1e-13)
    for i in range(3):
        direct, _ = icon_forward_backward(fmaps[i], tmask, ml.keys[i], cfg, want_grad=False)
        assert direct == ml.layer_losses[i]


def test_mlc_disabled_uses_final_layer_only():
    fmaps = [_instance(s)[0] for s in range(3)]
    tmask = _instance(0)[1]
    ml = multi_level_icon(fmaps, tmask, ContrastConfig(), MLCConfig(enabled=False), Rng(1))
    assert ml.loss == ml.layer_losses[-1]
    assert ml.layer_losses[:2] == [0.0, 0.0]


def test_total_loss():
    assert total_loss(0.7, 3.0, 0.0) == 0.7
    assert total_loss(0.7, 0.0, 1.0) == 0.7
    t, c, lam = 0.3, 1.7, 0.4
    assert total_loss(t, c, 2 * lam) - total_loss(t, c, lam) == pytest.approx(lam * c, abs=1e-15)
    with pytest.raises(ValueError):
        total_loss(float("inf"), 0.0, 1.0)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("normalize", [True, False])
def test_icon_grad_matches_finite_differences(seed, normalize):
    rng = Rng(100 + seed)
    fmaps = [rng.normal_array((4, 4, 8)) for _ in range(3)]
    tmask = _instance(seed)[1]
    cfg = ContrastConfig(tau=0.5, n_agent=3, n_env=5, normalize=normalize)
    rec = multi_level_icon(fmaps, tmask, cfg, MLCConfig(gamma=1.0), Rng(seed))
    grads = icon_grad(fmaps, tmask, cfg, rec)
    for i in range(3):
        def f(x, i=i):
            fs = list(fmaps)
            fs[i] = x
            return sum(w * icon_forward_backward(fm, tmask, ks, cfg, want_grad=False)[0]
                       for w, fm, ks in zip(rec.weights, fs, rec.keys))
        assert relative_error(grads[i], finite_diff_grad(f, fmaps[i], 1e-6)) <= 1e-5


def test_every_token_receives_gradient():
    fmap, tmask = _instance(12)
    cfg = ContrastConfig(n_agent=2, n_env=3)
    rec = multi_level_icon([fmap], tmask, cfg, MLCConfig(), Rng(0))
    g = icon_grad([fmap], tmask, cfg, rec)[0]
    assert np.all(np.linalg.norm(g, axis=-1) > 0)


def test_icon_grad_rejects_mismatched_record():
    fmap, tmask = _instance(12)
    cfg = ContrastConfig(n_agent=2, n_env=3)
    rec = multi_level_icon([fmap, fmap], tmask, cfg, MLCConfig(), Rng(0))
    with pytest.raises(ValueError):
        icon_grad([fmap], tmask, cfg, rec)
    with pytest.raises(ValueError):
        icon_grad([fmap[:2], fmap[:2]], tmask[:2], cfg, rec)


def test_normalized_loss_invariant_to_positive_scaling():
    fmap, tmask = _instance(21)
    cfg = ContrastConfig(n_agent=4, n_env=4, normalize=True)
    res = icon_loss(fmap, tmask, cfg, Rng(3))
    again, _ = icon_forward_backward(fmap * 3.0, tmask, res.keys, cfg, want_grad=False)
    assert again == pytest.approx(res.loss, abs=1e-12)
    # a token that is alone in its class is both the query and the key of that class
    lone = np.zeros((4, 4), np.uint8)
    lone[2, 1] = 1
    res = icon_loss(fmap, lone, cfg, Rng(3))
    scaled = fmap.copy()
    scaled[2, 1] *= 7.5
    again, _ = icon_forward_backward(scaled, lone, res.keys, cfg, want_grad=False)
    assert again == pytest.approx(res.loss, abs=1e-12)
