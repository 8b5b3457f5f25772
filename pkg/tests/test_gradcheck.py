import numpy as np
import pytest

from trident import tensor as T
from trident.gradcheck import gradient_check, primitive_cases, run_suite
from trident.tensor import Tensor


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def test_sum_of_squares_is_exact():
    x = t64(np.random.default_rng(0).normal(size=(4, 3)))
    r = gradient_check(lambda x: (x * x).sum(), [x])
    assert r.max_rel_err < 1e-8
    assert r.n_checked == 12


def test_three_layer_network():
    rng = np.random.default_rng(1)
    x = t64(rng.normal(size=(5, 6)))
    w1, w2, w3 = (t64(rng.normal(size=s) * 0.5) for s in [(6, 6), (6, 4), (4, 3)])
    g, b = t64(np.ones(6)), t64(np.zeros(6))

    def net(x, w1, w2, w3, g, b):
        h = T.gelu(T.linear(x, w1))
        h = T.layer_norm(h, g, b)
        h = T.tanh(T.linear(h, w2))
        h = T.sigmoid(T.linear(h, w3))
        return (T.softmax(h, axis=-1) * t64(rng_w)).sum()

    rng_w = np.random.default_rng(2).normal(size=(5, 3))
    r = gradient_check(net, [x, w1, w2, w3, g, b])
    assert r.max_rel_err < 1e-4


def test_relu_kink_is_excluded_and_reported():
    x = t64([[-1.0, 0.0, 2.0]])
    r = gradient_check(lambda x: T.relu(x).sum(), [x])
    assert r.excluded == [(0, 1)]
    assert r.n_checked == 2 and r.max_rel_err < 1e-8


def test_non_scalar_rejected():
    with pytest.raises(ValueError, match="scalar"):
        gradient_check(lambda x: x * 2.0, [t64([1.0, 2.0])])


def test_wrong_gradient_is_detected():
    # forward is exp, backward pretends the derivative is 1
    def fake(x):
        return T._make("fake_exp", np.exp(x.data), [x], lambda g: (g,)).sum()

    r = gradient_check(fake, [t64([0.5, 1.5])])
    assert r.max_rel_err > 0.1


def test_primitive_shapes_are_small():
    for name, (_, inputs) in primitive_cases(3).items():
        if name == "istft":
            continue
        assert all(s <= 6 for t in inputs for s in t.shape), name


def test_suite_without_block():
    results = run_suite(seed=1, max_coords=8, include_block=False)
    assert len(results) >= 25
    assert max(r.max_rel_err for r in results.values()) < 1e-4
