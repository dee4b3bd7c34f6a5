import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from odegan import autodiff as ad
from odegan.games import MLPSpec, mlp_expr

from .oracles import central_diff, rel_err

finite = st.floats(-3, 3, allow_nan=False)


def test_square_forward():
    x = ad.inp("x")
    assert float(ad.evaluate(ad.square(x), {"x": 3.0})) == 9.0


def test_sigmoid_at_zero():
    x = ad.inp("x")
    assert float(ad.evaluate(ad.sigmoid(x), {"x": 0.0})) == 0.5


def test_matmul_identity():
    a = ad.inp("a", (2, 2))
    out = ad.evaluate(ad.matmul(a, ad.const(np.eye(2))), {"a": np.array([[1.0, 2.0], [3.0, 4.0]])})
    np.testing.assert_array_equal(out, [[1, 2], [3, 4]])


def test_unbound_input():
    x = ad.inp("x")
    with pytest.raises(ad.UnboundInputError):
        ad.evaluate(x + 1.0, {})


def test_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.inp("a", (2, 3)), ad.inp("b", (2, 3)))
    with pytest.raises(ad.ShapeError):
        ad.add(ad.inp("a", (2,)), ad.inp("b", (3,)))


def test_binding_shape_checked():
    x = ad.inp("x", (2,))
    with pytest.raises(ad.ShapeError):
        ad.evaluate(ad.esum(x), {"x": np.ones(3)})


def test_nonfinite_reports_node():
    x = ad.inp("x")
    with pytest.raises(ad.NonFiniteError) as err:
        ad.evaluate(ad.exp(ad.exp(x)), {"x": 800.0})
    assert "exp" in str(err.value)


def test_log_is_clamped():
    x = ad.inp("x")
    val = float(ad.evaluate(ad.log(x), {"x": 0.0}))
    assert val == pytest.approx(np.log(ad.LOG_FLOOR))


def test_power_rule():
    x = ad.inp("x")
    g = ad.gradient(ad.square(x), {"x": 3.0}, ["x"])
    assert float(g["x"]) == 6.0


def test_sigmoid_derivative():
    x = ad.inp("x")
    g = ad.gradient(ad.sigmoid(x), {"x": 0.0}, ["x"])
    assert float(g["x"]) == pytest.approx(0.25, abs=1e-15)


def test_relu_derivative_at_kink_is_zero():
    x = ad.inp("x")
    assert float(ad.gradient(ad.relu(x), {"x": 0.0}, ["x"])["x"]) == 0.0
    assert float(ad.gradient(ad.leaky_relu(x, 0.2), {"x": 0.0}, ["x"])["x"]) == pytest.approx(0.2)


def test_grad_of_grad_norm_bilinear():
    th, ph = ad.inp("th"), ad.inp("ph")
    g = ad.grad_of_grad_norm(ad.mul(th, ph), {"th": 3.0, "ph": 0.5}, ["ph"], ["th"])
    assert float(g["th"]) == pytest.approx(6.0)


def test_grad_of_grad_norm_cubic():
    th, ph = ad.inp("th"), ad.inp("ph")
    f = ad.mul(ad.square(th), ph)
    g = ad.grad_of_grad_norm(f, {"th": 2.0, "ph": -1.0}, ["ph"], ["th"])
    assert float(g["th"]) == pytest.approx(32.0)


def test_grad_of_grad_norm_needs_disjoint_sets():
    th = ad.inp("th")
    with pytest.raises(ad.AutodiffError):
        ad.grad_of_grad_norm(ad.square(th), {"th": 1.0}, ["th"], ["th"])


def test_hessian_small_cases():
    x = ad.inp("x", (1,))
    np.testing.assert_allclose(ad.hessian(ad.esum(ad.square(x)), {"x": np.array([1.3])}, "x"), [[2.0]])
    th, ph = ad.inp("th", (1,)), ad.inp("ph", (1,))
    h = ad.hessian(ad.esum(ad.mul(th, ph)), {"th": np.array([0.3]), "ph": np.array([-2.0])}, ["th", "ph"])
    np.testing.assert_allclose(h, [[0, 1], [1, 0]])


def test_hessian_dimension_guard():
    x = ad.inp("x", (ad.HESSIAN_MAX_DIM + 1,))
    with pytest.raises(ad.DimensionGuardError):
        ad.hessian(ad.esum(ad.square(x)), {"x": np.zeros(ad.HESSIAN_MAX_DIM + 1)}, "x")


def _mlp_loss(seed, activation="relu", hidden=(5, 4), n=7):
    rng = np.random.default_rng(seed)
    spec = MLPSpec(3, 1, hidden, activation, seed=seed)
    params = [ad.inp(f"p{i}", s) for i, s in enumerate(spec.shapes)]
    x = ad.const(rng.standard_normal((n, 3)))
    ones = ad.const(np.ones((n, 1)))
    out = mlp_expr(spec, params, x, ones)
    loss = ad.neg(ad.mean(ad.log(ad.sigmoid(out))))
    flat = spec.init_params() + 0.1 * rng.standard_normal(spec.n_params)
    return spec, params, loss, flat


def _bind(params, flat):
    out, i = {}, 0
    for p in params:
        out[p.name] = flat[i:i + p.size].reshape(p.shape)
        i += p.size
    return out


@pytest.mark.parametrize("activation", ["relu", "leaky_relu", "sigmoid"])
def test_mlp_gradient_matches_finite_differences(activation):
    _, params, loss, flat = _mlp_loss(3, activation)
    g = ad.gradient(loss, _bind(params, flat), params)
    got = np.concatenate([g[p.name].ravel() for p in params])
    want = central_diff(lambda v: float(ad.evaluate(loss, _bind(params, v))), flat)
    assert rel_err(got, want) < 1e-6


def test_mlp_grad_of_grad_norm_matches_finite_differences():
    rng = np.random.default_rng(5)
    spec_d = MLPSpec(2, 1, (4,), "leaky_relu", seed=1)
    spec_g = MLPSpec(2, 2, (3,), "leaky_relu", seed=2)
    th = [ad.inp(f"d{i}", s) for i, s in enumerate(spec_d.shapes)]
    ph = [ad.inp(f"g{i}", s) for i, s in enumerate(spec_g.shapes)]
    n = 6
    ones = ad.const(np.ones((n, 1)))
    fake = mlp_expr(spec_g, ph, ad.const(rng.standard_normal((n, 2))), ones)
    l_g = ad.neg(ad.mean(ad.log(ad.sigmoid(mlp_expr(spec_d, th, fake, ones)))))
    t0, p0 = spec_d.init_params(), spec_g.init_params()
    bind = {**_bind(th, t0), **_bind(ph, p0)}
    got = ad.grad_of_grad_norm(l_g, bind, ph, th)
    got = np.concatenate([got[p.name].ravel() for p in th])

    def norm_sq(tv):
        g = ad.gradient(l_g, {**_bind(th, tv), **_bind(ph, p0)}, ph)
        return sum(float((a**2).sum()) for a in g.values())

    want = central_diff(norm_sq, t0, 1e-5)
    assert rel_err(got, want) < 1e-4


def test_relu_hessian_matches_finite_differences():
    spec, params, loss, flat = _mlp_loss(11, "relu", hidden=(4,))
    h = ad.hessian(loss, _bind(params, flat), params)

    def grad(v):
        g = ad.gradient(loss, _bind(params, v), params)
        return np.concatenate([g[p.name].ravel() for p in params])

    from .oracles import fd_jacobian

    assert np.abs(h - fd_jacobian(grad, flat)).max() < 1e-4
    np.testing.assert_allclose(h, h.T, atol=1e-12)


@given(arrays(np.float64, (3,), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_gradient_is_linear_in_the_output(a, b):
    x = ad.inp("x", (3,))
    ca = ad.const(a)
    f = ad.esum(ad.add(ad.mul(ca, ad.square(x)), ad.exp(ad.mul(0.1, x))))
    g = ad.gradient(f, {"x": b}, ["x"])["x"]
    np.testing.assert_allclose(g, 2 * a * b + 0.1 * np.exp(0.1 * b), rtol=1e-12, atol=1e-12)


@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_matmul_forward_matches_numpy(a, b):
    out = ad.evaluate(ad.matmul(ad.inp("a", (2, 3)), ad.inp("b", (3, 2))), {"a": a, "b": b})
    np.testing.assert_allclose(out, a @ b)


@given(st.floats(-40, 40))
def test_sigmoid_stable_and_symmetric(x):
    v = ad.inp("v")
    s = float(ad.evaluate(ad.sigmoid(v), {"v": x}))
    t = float(ad.evaluate(ad.sigmoid(v), {"v": -x}))
    assert 0.0 <= s <= 1.0
    assert s + t == pytest.approx(1.0, abs=1e-15)


def test_evaluation_is_repeatable():
    _, params, loss, flat = _mlp_loss(2)
    a = ad.gradient(loss, _bind(params, flat), params)
    b = ad.gradient(loss, _bind(params, flat), params)
    for k in a:
        assert np.array_equal(a[k], b[k])
