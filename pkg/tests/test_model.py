import numpy as np
import pytest

from almaforge import autograd as ag
from almaforge.autograd import Tape, Tensor
from almaforge.model import ModelConfig, causal_mask, forward, init_params, param_count, param_shapes
from almaforge.objectives import build_prefix_mask
from conftest import numeric_grad

TINY = ModelConfig(vocab_size=11, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_len=8)


def test_closed_form_count_matches_init():
    for cfg in (ModelConfig(), TINY, ModelConfig(vocab_size=256, d_model=64, n_layers=2, n_heads=4, d_ff=256)):
        params = init_params(cfg, seed=0)
        assert sum(t.size for t in params.values()) == param_count(cfg)
        assert {n: t.shape for n, t in params.items()} == param_shapes(cfg)


def test_frozen_counts():
    assert param_count(ModelConfig()) == 922_368
    assert param_count(ModelConfig(vocab_size=256, d_model=64, n_layers=2, n_heads=4, d_ff=256)) == 148_736


def test_init_is_seeded():
    a, b = init_params(TINY, 3), init_params(TINY, 3)
    c = init_params(TINY, 4)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)
    assert not np.array_equal(a["tok_emb"].data, c["tok_emb"].data)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(d_model=16, d_ff=8)


def test_forward_shape_and_length_check():
    params = init_params(TINY, 0)
    logits = forward(params, np.array([[1, 2, 3], [4, 5, 6]]), causal_mask(3), TINY)
    assert logits.shape == (2, 3, TINY.vocab_size)
    with pytest.raises(ValueError):
        forward(params, np.zeros((1, 9), dtype=int), causal_mask(9), TINY)


def test_causal_prefix_invariance(rng):
    params = init_params(TINY, 1)
    ids = rng.integers(0, TINY.vocab_size, size=(1, 6))
    full = forward(params, ids, causal_mask(6), TINY).data
    prefix = forward(params, ids[:, :4], causal_mask(4), TINY).data
    np.testing.assert_allclose(full[:, :4], prefix, rtol=1e-5, atol=1e-6)


def test_batch_rows_independent(rng):
    params = init_params(TINY, 2)
    ids = rng.integers(0, TINY.vocab_size, size=(3, 5))
    batched = forward(params, ids, causal_mask(5), TINY).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], forward(params, ids[b:b + 1], causal_mask(5), TINY).data[0],
                                   rtol=1e-5, atol=1e-6)


def test_full_model_gradcheck_float64(rng):
    params = init_params(TINY, 5, dtype=np.float64)
    for t in params.values():
        t.data += rng.normal(scale=0.1, size=t.shape)  # leave the symmetric init point
    ids = rng.integers(0, TINY.vocab_size, size=(2, 6))
    targets = rng.integers(0, TINY.vocab_size, size=(2, 6))
    mask = (rng.random((2, 6)) < 0.7).astype(float)
    mask[0, 0] = 1
    names = sorted(params)

    def loss_of(arrs):
        ps = {n: Tensor(a) for n, a in zip(names, arrs)}
        return float(ag.masked_cross_entropy(forward(ps, ids, causal_mask(6), TINY), targets, mask)[0].data.item())

    with Tape() as tape:
        loss, _ = ag.masked_cross_entropy(forward(params, ids, causal_mask(6), TINY), targets, mask)
    tape.backward(loss)
    arrays = [params[n].data.copy() for n in names]
    numeric = numeric_grad(lambda *a: loss_of(a), arrays, eps=1e-6)
    for n, gn in zip(names, numeric):
        ga = params[n].grad
        err = np.abs(ga - gn).max() / max(np.abs(gn).max(), 1e-8)
        assert err < 1e-4, (n, err)


def test_prefix_mask_makes_prefix_bidirectional(rng):
    params = init_params(TINY, 2)
    ids = rng.integers(0, TINY.vocab_size, size=(1, 6))
    edited = ids.copy()
    edited[0, 2] = (ids[0, 2] + 1) % TINY.vocab_size
    prefix = build_prefix_mask(4, 6)
    # under the prefix mask, position 0 sees token 2; under the causal mask it cannot
    moved = np.abs(forward(params, ids, prefix, TINY).data[0, 0] - forward(params, edited, prefix, TINY).data[0, 0])
    assert moved.max() > 1e-6
    causal = causal_mask(6)
    np.testing.assert_array_equal(forward(params, ids, causal, TINY).data[0, :2],
                                  forward(params, edited, causal, TINY).data[0, :2])
    # positions past the prefix stay causal under both masks
    late = edited.copy()
    late[0, 5] = (ids[0, 5] + 1) % TINY.vocab_size
    np.testing.assert_array_equal(forward(params, edited, prefix, TINY).data[0, :5],
                                  forward(params, late, prefix, TINY).data[0, :5])
