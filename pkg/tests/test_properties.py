"""Hypothesis invariants that cut across modules."""

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nco_scaling import autodiff as ad
from nco_scaling.instances import canonical_order, generate, held_karp, nn_two_opt, tour_cost
from nco_scaling.model import Model, ModelConfig, row_order, step_probs

MODEL = Model.create(ModelConfig.tiny(), 10, seed=3)
for _name, _t in MODEL.params:
    if _name.endswith(("alpha1", "alpha2")):
        _t.values = np.asarray(0.7)

seeds = st.integers(0, 2**31 - 1)


@settings(max_examples=60)
@given(seed=seeds, n=st.integers(4, 30), shift=st.integers(0, 29), flip=st.booleans())
def test_tour_cost_invariant_to_rotation_and_reversal(seed, n, shift, flip):
    inst = generate("uniform", n, seed)
    order = np.random.default_rng(seed).permutation(n)
    other = np.roll(order, shift % n)
    if flip:
        other = other[::-1]
    assert abs(tour_cost(inst, order) - tour_cost(inst, other)) < 1e-12
    if not flip:
        assert np.array_equal(canonical_order(order), canonical_order(other))


@settings(max_examples=30, deadline=None)
@given(seed=seeds, n=st.integers(5, 10))
def test_exact_optimum_lower_bounds_heuristic(seed, n):
    inst = generate("uniform", n, seed)
    assert held_karp(inst).cost <= nn_two_opt(inst, seed).cost + 1e-12


@settings(max_examples=60)
@given(seed=seeds, a=st.integers(1, 12))
def test_step_probs_normalised(seed, a):
    rng = np.random.default_rng(seed)
    p = step_probs(MODEL.params, rng.random((3, 2)), rng.random((3, a, 2)), rng.random((3, 2))).values
    assert np.all(p[:, [0, -1]] == 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p >= 0)


@settings(max_examples=60)
@given(seed=seeds, a=st.integers(1, 12))
def test_row_order_ignores_label_order(seed, a):
    rng = np.random.default_rng(seed)
    coords = rng.random((1, 20, 2))
    ids = rng.choice(20, size=a, replace=False)[None]
    shuffled = rng.permutation(ids[0])[None]
    assert np.array_equal(row_order(coords, ids), row_order(coords, shuffled))


@settings(max_examples=40)
@given(x=arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_softmax_rows_sum_to_one(x):
    mask = np.zeros((3, 4), dtype=bool)
    mask[:, 0] = True
    p = ad.masked_softmax(ad.Tensor(x), mask).values
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p[:, 0] == 0)
