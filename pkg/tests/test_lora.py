import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayespeft.errors import ContractError
from bayespeft.lora import DEFAULT_GAMMA, DEFAULT_RANK, LoraAdapter, attach_lora, delta_weight, merge, trainable_fraction
from bayespeft.model import LinearLayer, Network, char_lm_spec, classifier_spec
from bayespeft.oracle import finite_diff_grad
from bayespeft.fisher import estimate_identity
from bayespeft.penalty import PenaltyConfig, penalty_gradients, penalty_value

from conftest import adapted_net, batch, small_net


def test_defaults_match_paper_setting():
    assert (DEFAULT_RANK, DEFAULT_GAMMA) == (16, 2.0)


def test_attach_keeps_outputs():
    net = small_net()
    x, _ = batch()
    before = net.predict(x)
    for i, lay in enumerate(net.layers):
        attach_lora(lay, 2, 2.0, seed=i)
    assert np.array_equal(net.predict(x), before)
    assert not net.layers[0].adapter.B.any()


def test_attach_contracts():
    lay = LinearLayer("fc", np.ones((3, 4)))
    with pytest.raises(ContractError):
        attach_lora(lay, 4)
    with pytest.raises(ContractError):
        attach_lora(lay, 0)
    attach_lora(lay, 3)
    with pytest.raises(ContractError):
        attach_lora(lay, 1)


@pytest.mark.parametrize("spec", [classifier_spec(), char_lm_spec()])
def test_trainable_fraction_matches_parameter_count(spec):
    net = Network.init(spec, 0)
    for lay in net.layers:
        r = min(16, lay.d_out, lay.d_in)
        attach_lora(lay, r)
        counted = lay.adapter.A.size + lay.adapter.B.size
        assert counted / lay.weight.size == pytest.approx(trainable_fraction(lay.d_out, lay.d_in, r), rel=1e-15)
        assert counted == r * (lay.d_out + lay.d_in)


def test_delta_weight_hand_example():
    lay = LinearLayer("fc", np.zeros((2, 2)))
    lay.adapter = LoraAdapter(np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]]), 2.0, 1)
    assert np.array_equal(delta_weight(lay), [[6.0, 8.0], [12.0, 16.0]])


def test_delta_weight_zero_factor():
    lay = LinearLayer("fc", np.ones((3, 3)))
    attach_lora(lay, 2)
    assert not delta_weight(lay).any()
    with pytest.raises(ContractError):
        delta_weight(LinearLayer("bare", np.ones((2, 2))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(4, 9), st.integers(4, 9), st.integers(0, 10_000))
def test_delta_rank_bounded(r, d_out, d_in, seed):
    rng = np.random.default_rng(seed)
    lay = LinearLayer("fc", np.zeros((d_out, d_in)))
    lay.adapter = LoraAdapter(rng.normal(size=(d_out, r)), rng.normal(size=(d_in, r)), 1.5, r)
    s = np.linalg.svd(delta_weight(lay), compute_uv=False)
    assert np.sum(s > 1e-9 * s[0]) <= r


def test_forward_equivalence_factored_form():
    net = adapted_net()
    x, _ = batch()
    lay = net.layers[0]
    ad = lay.adapter
    full = x @ (lay.weight + ad.gamma * ad.A @ ad.B.T).T
    factored = x @ lay.weight.T + ad.gamma * (x @ ad.B) @ ad.A.T
    assert np.allclose(full, factored, rtol=0, atol=1e-12)


def test_merge_preserves_outputs():
    net = adapted_net()
    x, _ = batch(20)
    before = net.predict(x)
    for lay in net.layers:
        merge(lay)
    assert np.abs(net.predict(x) - before).max() < 1e-12
    with pytest.raises(ContractError):
        merge(net.layers[0])


def test_merge_zero_adapter_is_noop():
    lay = LinearLayer("fc", np.arange(6.0).reshape(2, 3))
    w0 = lay.weight.copy()
    attach_lora(lay, 1)
    merge(lay)
    assert np.array_equal(lay.weight, w0)


def test_penalty_gradient_through_factors_matches_finite_differences():
    net = adapted_net(rank=2)
    fisher = estimate_identity(net)
    cfg = PenaltyConfig("l2sp", 0.7)
    params = net.parameters()
    analytic = penalty_gradients(net, fisher, cfg)

    def f(p):
        for k, v in p.items():
            net.set_parameter(k, v)
        return penalty_value(net, fisher, cfg)

    numeric = finite_diff_grad(f, {k: v.copy() for k, v in params.items()}, 1e-5)
    for k in params:
        rel = np.linalg.norm(analytic[k] - numeric[k]) / np.linalg.norm(numeric[k])
        assert rel < 1e-5, k
