import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedc2a.embedding import (
    compose_client_embedding,
    context_embedding,
    example_features,
    inference_label_distribution,
    init_embed_params,
    label_embedding,
    one_hot,
)
from fedc2a.errors import ConfigurationError, ContractError
from fedc2a.tensor import Tensor

from _util import analytic_grads, gradcheck, tiny_config


@pytest.fixture
def params():
    cfg = tiny_config()
    p = init_embed_params(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for k in p:
        p[k].data = rng.normal(size=p[k].shape)
    return p


def test_single_class_batch_picks_row(params):
    W = params["embed.W_L"].data
    params["embed.b_L"].data = np.zeros_like(params["embed.b_L"].data)
    out = label_embedding(one_hot([0, 0, 0], W.shape[0]), params).data
    assert np.array_equal(out, W[0])


def test_uniform_and_balanced_batch_agree(params):
    C = params["embed.W_L"].shape[0]
    uniform = label_embedding(inference_label_distribution(C), params).data
    expected = params["embed.W_L"].data.T @ np.full(C, 1 / C) + params["embed.b_L"].data
    assert np.allclose(uniform, expected, atol=1e-14)
    balanced = label_embedding(one_hot(np.arange(C), C), params).data
    assert np.allclose(uniform, balanced, atol=1e-14)


def test_label_embedding_oracle(params):
    C = params["embed.W_L"].shape[0]
    labels = np.random.default_rng(3).integers(0, C, size=7)
    mean = np.zeros(C)
    for y in labels:
        mean[y] += 1 / len(labels)
    expected = mean @ params["embed.W_L"].data + params["embed.b_L"].data
    assert np.max(np.abs(label_embedding(one_hot(labels, C), params).data - expected)) < 1e-12


def test_label_embedding_rejects_non_distributions(params):
    C = params["embed.W_L"].shape[0]
    with pytest.raises(ContractError):
        label_embedding(np.full(C, 0.5), params)
    bad = np.zeros(C)
    bad[0], bad[1] = 1.5, -0.5
    with pytest.raises(ContractError):
        label_embedding(bad, params)


@pytest.mark.parametrize("C", [2, 3, 7, 100])
def test_inference_distribution(C):
    p = inference_label_distribution(C)
    assert abs(p.sum() - 1) < 1e-12 and np.all(p == p[0])
    if C == 4:
        assert list(p) == [0.25] * 4


def test_context_single_example(params):
    h = np.random.default_rng(4).normal(size=(1, 4, 8))
    f = h[0].mean(0)
    f /= np.linalg.norm(f)
    expected = f @ params["embed.W_F"].data + params["embed.b_F"].data
    assert np.allclose(context_embedding(Tensor(h), params).data, expected, atol=1e-14)


def test_context_step_by_step_oracle(params):
    h = np.random.default_rng(5).normal(size=(3, 4, 8))
    feats = []
    for j in range(3):
        m = sum(h[j, i] for i in range(4)) / 4
        feats.append(m / np.sqrt(np.sum(m * m)))
    pooled = np.array([max(feats[j][k] for j in range(3)) for k in range(8)])
    expected = pooled @ params["embed.W_F"].data + params["embed.b_F"].data
    assert np.max(np.abs(context_embedding(Tensor(h), params).data - expected)) < 1e-12


def test_context_invariant_to_duplication_and_order(params):
    h = np.random.default_rng(6).normal(size=(3, 4, 8))
    base = context_embedding(Tensor(h), params).data
    assert np.array_equal(context_embedding(Tensor(np.concatenate([h, h])), params).data, base)
    assert np.array_equal(context_embedding(Tensor(h[[2, 0, 1]]), params).data, base)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_example_features_unit_norm(seed):
    h = np.random.default_rng(seed).normal(size=(4, 3, 8))
    norms = np.linalg.norm(example_features(Tensor(h)).data, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_label_embedding_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = init_embed_params(tiny_config(), rng)
    labels = rng.integers(0, 3, size=6)
    a = label_embedding(one_hot(labels, 3), p).data
    b = label_embedding(one_hot(rng.permutation(labels), 3), p).data
    assert np.allclose(a, b, atol=1e-15)


def test_compose_zero_terms_is_layer_embedding(params):
    zero = Tensor(np.zeros(4))
    for site, idx in (((0, "attn"), 0), ((0, "ffn"), 1), ((1, "ffn"), 3)):
        I = compose_client_embedding(zero, zero, site, params).I.data
        assert np.array_equal(I, params["embed.E_layer"].data[idx])


def test_compose_sites_differ_by_layer_embedding(params):
    rng = np.random.default_rng(7)
    le, ce = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    a = compose_client_embedding(le, ce, (0, "attn"), params).I.data
    b = compose_client_embedding(le, ce, (1, "attn"), params).I.data
    E = params["embed.E_layer"].data
    assert np.allclose(a - b, E[0] - E[2], atol=1e-14)


def test_compose_unknown_site(params):
    zero = Tensor(np.zeros(4))
    with pytest.raises(ConfigurationError):
        compose_client_embedding(zero, zero, (7, "attn"), params)
    with pytest.raises(ConfigurationError):
        compose_client_embedding(zero, zero, (0, "cross"), params)


def test_gradient_reaches_all_summands(params):
    h = Tensor(np.random.default_rng(8).normal(size=(3, 4, 8)))
    labels = one_hot([0, 2, 2], 3)
    w = Tensor(np.random.default_rng(9).normal(size=4))

    def fn():
        le = label_embedding(labels, params)
        ce = context_embedding(h, params)
        I = compose_client_embedding(le, ce, (1, "ffn"), params).I
        return (I * I * w).sum()

    errs = gradcheck(fn, params)
    assert max(errs.values()) < 1e-6
    grads = analytic_grads(fn, params)
    assert all(np.any(grads[k] != 0) for k in ("embed.W_L", "embed.W_F", "embed.b_L", "embed.b_F"))
    assert np.any(grads["embed.E_layer"][3] != 0) and np.all(grads["embed.E_layer"][:3] == 0)
