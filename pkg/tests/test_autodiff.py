import numpy as np
import pytest

from fedforge import autodiff as ad
from fedforge.autodiff import NonFiniteError, ShapeError, Tensor

from conftest import central_difference


def rel_err(analytic, fd):
    return abs(analytic - fd) / (abs(analytic) + 1e-8)


def check_grad(build, arrays, coords=100, seed=0, tol=1e-4):
    """Compare backward() against central differences on random coordinates of every input."""
    rng = np.random.default_rng(seed)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    out.backward()
    for leaf, arr in zip(leaves, arrays):
        picks = rng.choice(arr.size, size=min(coords, arr.size), replace=False)
        f = lambda: float(build(*[Tensor(a) for a in arrays]).data)
        for idx in picks:
            fd = central_difference(f, arr, idx)
            assert rel_err(leaf.grad.flat[idx], fd) < tol, (idx, leaf.grad.flat[idx], fd)
    return leaves


def weighted_sum(t, w):
    return ad.matmul(ad.reshape(t, (1, -1)), Tensor(w.reshape(-1, 1)))


def scalar(t):
    return ad.reshape(t, ())


def test_add_mul_broadcast_gradients(rng):
    a = rng.normal(size=(12, 10))
    b = rng.normal(size=(10,))
    w = rng.normal(size=120)
    check_grad(lambda x, y: scalar(weighted_sum(ad.mul(ad.add(x, y), x), w)), [a, b])


def test_matmul_gradient_over_100_coordinates(rng):
    a = rng.normal(size=(12, 15))
    b = rng.normal(size=(15, 9))
    w = rng.normal(size=12 * 9)
    check_grad(lambda x, y: scalar(weighted_sum(ad.matmul(x, y), w)), [a, b], coords=100)


def test_relu_gradient_away_from_kinks(rng):
    a = rng.normal(size=(200,))
    a[np.abs(a) < 1e-3] = 0.5
    w = rng.normal(size=200)
    check_grad(lambda x: scalar(weighted_sum(ad.relu(x), w)), [a], coords=150)


def test_conv3x3_gradient(rng):
    x = rng.normal(size=(2, 5, 6, 3))
    k = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=(4,))
    w = rng.normal(size=2 * 5 * 6 * 4)
    check_grad(lambda a, c, d: scalar(weighted_sum(ad.conv3x3(a, c, d), w)), [x, k, b], coords=100)


def test_conv3x3_matches_direct_sum(rng):
    x = rng.normal(size=(1, 4, 4, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=(3,))
    out = ad.conv3x3(Tensor(x), Tensor(k), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for i in range(4):
        for j in range(4):
            ref = b + np.einsum("abc,abcd->d", xp[0, i:i + 3, j:j + 3, :], k)
            np.testing.assert_allclose(out[0, i, j], ref, rtol=1e-12, atol=1e-12)


def test_avgpool2_gradient_with_odd_size(rng):
    x = rng.normal(size=(3, 7, 6, 2))
    w = rng.normal(size=3 * 3 * 3 * 2)
    check_grad(lambda a: scalar(weighted_sum(ad.avgpool2(a), w)), [x], coords=120)


def test_blend_gradient_reaches_pattern_only_through_mask(rng):
    x = rng.uniform(size=(4, 6, 6, 1))
    mask = np.zeros((6, 6, 1))
    mask[:3, :3] = 1
    pattern = rng.uniform(size=(6, 6, 1))
    w = rng.normal(size=4 * 36)
    build = lambda a, p: scalar(weighted_sum(ad.blend(a, Tensor(mask), p), w))
    xs, ps = check_grad(build, [x, pattern], coords=100)
    assert np.all(ps.grad[mask == 0] == 0)
    assert np.all(xs.grad[:, :3, :3] == 0)


def test_cross_entropy_gradient(rng):
    logits = rng.normal(size=(20, 7))
    labels = rng.integers(0, 7, size=20)
    check_grad(lambda z: ad.cross_entropy(z, labels)[0], [logits], coords=140)


def test_cross_entropy_uniform_logits_is_log_k():
    loss, per = ad.cross_entropy(Tensor(np.zeros((5, 10))), np.arange(5))
    assert float(loss.data) == pytest.approx(np.log(10), abs=1e-12)
    np.testing.assert_allclose(per, np.log(10))


def test_cross_entropy_decreases_with_margin():
    losses = []
    for margin in (0.0, 1.0, 4.0, 16.0, 64.0):
        z = np.zeros((1, 3))
        z[0, 1] = margin
        losses.append(float(ad.cross_entropy(Tensor(z), [1])[0].data))
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-20


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ad.mul(x, x)
    z = ad.add(y, y)
    scalar(z).backward()
    assert x.grad[0] == pytest.approx(12.0)


def test_external_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        Tensor.external([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor.external([np.inf])


def test_shape_errors_name_expected_and_actual():
    with pytest.raises(ShapeError) as err:
        ad.conv3x3(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))), Tensor(np.zeros(1)))
    assert "(3, 3, 2, 1)" in str(err.value) and "(3, 3, 3, 1)" in str(err.value)


def test_backward_needs_scalar_without_seed():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.mul(t, t).backward()


def test_operator_sugar_matches_functions(rng):
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    ta, tb = Tensor(a), Tensor(b)
    np.testing.assert_array_equal((ta + tb).data, a + b)
    np.testing.assert_array_equal((ta - tb).data, a - b)
    np.testing.assert_array_equal((ta * 2.0).data, a * 2.0)
    np.testing.assert_array_equal((ta @ tb).data, a @ b)
