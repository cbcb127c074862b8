import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sharpzo.core import FunctionObjective, RngStream
from sharpzo.objectives import make_prompt_task, make_quadratic
from sharpzo.pruning import build_mask, fisher_diag, magnitude_mask, zscore

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_zscore_example():
    # population std of (1,2,3) is sqrt(2/3)
    np.testing.assert_allclose(zscore([1, 2, 3]), [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_zscore_constant():
    assert np.array_equal(zscore([5, 5, 5]), np.zeros(3))


@given(arrays(np.float64, st.integers(2, 30), elements=finite))
def test_zscore_standardizes(v):
    assume(np.std(v) > 1e-6 * max(1.0, np.abs(v).max()))
    z = zscore(v)
    assert abs(z.mean()) < 1e-10
    assert abs(z.std() - 1.0) < 1e-10
    np.testing.assert_allclose(zscore(z), z, atol=1e-10)


def test_fisher_diag_on_quadratic():
    obj = FunctionObjective(lambda w: 0.5 * float(w @ np.diag([1.0, 4.0]) @ w), 2)
    f1 = fisher_diag(obj, np.array([1.0, 1.0]), 1e-5, 1)
    f3 = fisher_diag(obj, np.array([1.0, 1.0]), 1e-5, 3)
    np.testing.assert_allclose(f1, [1.0, 16.0], rtol=1e-8)
    assert np.array_equal(f1, f3)


def test_fisher_diag_constant():
    obj = FunctionObjective(lambda w: 2.0, 3)
    assert np.array_equal(fisher_diag(obj, np.ones(3), 1e-5, 2), np.zeros(3))


def test_fisher_query_count():
    obj = make_prompt_task(d=8, m=32, K=3, n_samples=64, seed=0, nuisance_dims=16)
    fisher_diag(obj, np.zeros(8), 1e-3, 4, RngStream(1))
    assert obj.counter.total_evals == 4 * 2 * 8


def test_fisher_batches_use_distinct_minibatches():
    obj = make_prompt_task(d=8, m=32, K=3, n_samples=64, seed=0, nuisance_dims=16)
    w = 0.3 * np.ones(8)
    one = fisher_diag(obj, w, 1e-4, 1, RngStream(1))
    many = fisher_diag(obj, w, 1e-4, 4, RngStream(1))
    assert not np.allclose(one, many)


def test_build_mask_sparsity_zero():
    m = build_mask(np.ones(4), np.arange(4.0), 0.0)
    assert m.active.all()


def test_build_mask_example():
    m = build_mask(np.ones(4), np.array([1.0, 2.0, 3.0, 4.0]), 0.5)
    np.testing.assert_allclose(zscore([1, 2, 3, 4]), [-1.342, -0.447, 0.447, 1.342], atol=1e-3)
    assert m.active.tolist() == [False, False, True, True]


def test_build_mask_negative_zscore_is_pruned_first():
    w = np.array([0.0, 5.0, 5.0, 5.0])
    fisher = np.array([100.0, 1.0, 2.0, 3.0])
    m = build_mask(w, fisher, 0.25)
    # brute force: scores = w^2 * z(fisher), prune the minimum
    z = (fisher - fisher.mean()) / fisher.std()
    scores = w * w * z
    np.testing.assert_allclose(m.scores, scores, rtol=1e-12)
    assert int(np.argmin(scores)) == 1
    assert m.active.tolist() == [True, False, True, True]


def test_literal_eq5_differs():
    w = np.array([1.0, 2.0, 3.0, 4.0])
    g = np.array([1.0, -3.0, 0.5, 2.0])
    lit = build_mask(w, g * g, 0.5, literal_eq5=True, grad_mean=g)
    np.testing.assert_allclose(lit.scores, w * w * (g * g - g.mean()) / g.std())


def test_magnitude_mask_examples():
    assert magnitude_mask(np.array([-3.0, 1.0, 2.0]), 1 / 3).active.tolist() == [True, False, True]
    assert magnitude_mask(np.array([1.0, -2.0]), 0.0).active.all()
    assert magnitude_mask(np.ones(4), 0.5).active.tolist() == [False, False, True, True]


def test_invalid_sparsity():
    with pytest.raises(ValueError):
        magnitude_mask(np.ones(3), 1.0)


@given(arrays(np.float64, st.integers(1, 40), elements=finite),
       st.floats(0.0, 0.99))
def test_exact_sparsity(w, sparsity):
    fisher = np.abs(w[::-1]) + 1.0
    for m in (build_mask(w, fisher, sparsity), magnitude_mask(w, sparsity)):
        assert np.count_nonzero(~m.active) == round(sparsity * w.size)


@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-10, 10)),
       arrays(np.float64, 30, elements=st.floats(0.0, 100.0)),
       st.floats(0.05, 0.95), st.sampled_from([0.5, 2.0, 1e3]))
def test_selection_is_scale_invariant(w, fisher_full, sparsity, c):
    fisher = fisher_full[: w.size]
    assume(np.std(fisher) > 1e-3)
    base = build_mask(w, fisher, sparsity)
    # exact float ties can flip under rescaling; only compare well-separated score sets
    s = np.sort(base.scores)
    k = round(sparsity * w.size)
    assume(k == 0 or k == w.size or s[k] - s[k - 1] > 1e-6 * (1 + np.abs(s).max()))
    assert np.array_equal(build_mask(w, c * fisher, sparsity).active, base.active)
    assert np.array_equal(build_mask(c * w, fisher, sparsity).active, base.active)


def test_build_mask_is_pure():
    w = np.array([0.3, -1.2, 2.0, 0.1])
    f = np.array([4.0, 1.0, 0.5, 9.0])
    a, b = build_mask(w, f, 0.5), build_mask(w, f, 0.5)
    assert np.array_equal(a.active, b.active) and np.array_equal(a.scores, b.scores)


def test_mask_on_quadratic_objective_keeps_exact_count():
    obj = make_quadratic(10, 50.0, seed=2)
    w = np.linspace(-2, 2, 10)
    m = build_mask(w, fisher_diag(obj, w), 0.3)
    assert m.n_active == 7
