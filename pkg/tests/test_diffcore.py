import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhh import diffcore as dc


def test_evaluate_simple_graphs():
    x = dc.var("x")
    assert dc.evaluate(x * x, {"x": 3.0})[0] == 9.0
    assert dc.evaluate(dc.tanh(x), {"x": 0.0})[0] == 0.0
    k = dc.var("k")
    potential = 0.5 * k * dc.square(x)
    assert dc.evaluate(potential, {"x": 1.0, "k": 2.0})[0] == 1.0


def test_evaluate_errors():
    x = dc.var("x", (2,))
    g = dc.ComputeGraph(dc.total(x))
    with pytest.raises(dc.UnboundLeafError):
        g.evaluate({})
    with pytest.raises(dc.ShapeError):
        g.evaluate({"x": np.zeros(3)})
    with pytest.raises(dc.ShapeError):
        dc.matmul(dc.var("a", (2, 3)), dc.var("b", (2, 3)))


def test_evaluate_is_bit_deterministic():
    rng = np.random.default_rng(0)
    W = dc.var("W", (5, 4))
    x = dc.var("x", (4,))
    g = dc.ComputeGraph(dc.total(dc.tanh(W @ x)))
    b = {"W": rng.normal(size=(5, 4)), "x": rng.normal(size=4)}
    assert g.evaluate(b)[0].tobytes() == g.evaluate(b)[0].tobytes()


def test_derive_power_rule():
    x = dc.var("x")
    dg = dc.derive(dc.ComputeGraph(dc.square(x)), dc.GradientRequest(dc.square(x), [x]))
    # the request carries its own target
    assert dg.evaluate({"x": 3.0})[0] == 6.0
    f = x * x
    assert dc.derive(f, [x]).evaluate({"x": 3.0})[0] == 6.0


def test_derive_twice_cross_derivative():
    theta, x = dc.var("theta"), dc.var("x")
    g = theta * dc.square(x)
    (dgdx,) = dc.grad(g, [x])                  # 2 theta x
    assert dc.evaluate(dgdx, {"theta": 1.5, "x": 2.0})[0] == pytest.approx(6.0)
    (d2,) = dc.grad(dgdx, [theta])             # 2 x
    assert dc.evaluate(d2, {"theta": 1.5, "x": 2.0})[0] == pytest.approx(4.0)


def test_tanh_second_derivative_at_zero():
    x = dc.var("x")
    (d1,) = dc.grad(dc.tanh(x), [x])
    (d2,) = dc.grad(d1, [x])
    assert dc.evaluate(d2, {"x": 0.0})[0] == 0.0


def test_non_scalar_target_rejected():
    x = dc.var("x", (3,))
    with pytest.raises(dc.GraphError):
        dc.grad(dc.tanh(x), [x])


def test_finite_difference_check_examples():
    x = dc.var("x")
    assert dc.finite_difference_check(x * x, [x], {"x": 3.0}, 1e-5) < 1e-6
    c = dc.const(4.0) + 0.0 * x
    assert dc.finite_difference_check(c, [x], {"x": 1.0}, 1e-5) == 0.0
    assert dc.finite_difference_check(x * x, [], {"x": 1.0}) == 0.0


def test_finite_difference_check_two_layer_net():
    rng = np.random.default_rng(3)
    W0, b0 = dc.var("W0", (6, 3)), dc.var("b0", (6,))
    W1, b1 = dc.var("W1", (1, 6)), dc.var("b1", (1,))
    x = dc.var("x", (3,))
    out = dc.total(W1 @ dc.tanh(W0 @ x + b0) + b1)
    bind = {"W0": rng.normal(size=(6, 3)), "b0": rng.normal(size=6),
            "W1": rng.normal(size=(1, 6)), "b1": rng.normal(size=1), "x": rng.normal(size=3)}
    assert dc.finite_difference_check(out, [W0, b0, W1, b1, x], bind, 1e-5) < 1e-4


# ---------------------------------------------------------------- per-primitive oracles

def _unary_cases():
    x = dc.var("x", (3,))
    return x, {
        "neg": dc.total(-x * x),
        "tanh": dc.total(dc.tanh(x)),
        "sin": dc.total(dc.sin(x)),
        "cos": dc.total(dc.cos(x)),
        "square": dc.total(dc.square(x)),
        "pow3": dc.total(dc.power(x, 3)),
        "div": dc.total(1.0 / (2.5 + dc.square(x))),
        "sum_to": dc.total(dc.sin(dc.sum_to(x, (1,)))),
        "broadcast": dc.total(dc.sin(dc.broadcast_to(x, (2, 3)) * dc.const([[1.0], [2.0]]))),
        "reshape": dc.total(dc.sin(dc.reshape(x, (3, 1)) @ dc.const([[1.0, -2.0]]))),
        "slice": dc.total(dc.cos(dc.slice_(x, 0, 1, 3))),
        "pad": dc.total(dc.sin(dc.pad(x, 0, 1, 5) + 0.3)),
        "concat": dc.total(dc.sin(dc.concat([x, dc.square(x)], 0))),
        "matvec": dc.total(dc.tanh(dc.const(np.arange(6.0).reshape(2, 3) / 5) @ x)),
        "vecmat": dc.total(dc.tanh(x @ dc.const(np.arange(6.0).reshape(3, 2) / 5))),
        "transpose": dc.total(dc.sin(dc.transpose(dc.reshape(x, (3, 1))) @ dc.const(np.ones((3, 2))))),
        "sub_add": dc.total(dc.square(x - 1.0) + x),
        "mul_dot": x @ dc.sin(x),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()[1]))
def test_primitive_first_and_second_derivatives(name):
    x, cases = _unary_cases()
    f = cases[name]
    (g,) = dc.grad(f, [x])
    fg = dc.ComputeGraph(f)
    gg = dc.ComputeGraph(g)
    # second derivative: Hessian-vector product with a fixed direction
    v = np.array([0.3, -0.7, 0.5])
    (hv,) = dc.grad(dc.total(g * dc.const(v)), [x])
    hg = dc.ComputeGraph(hv)
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    h = 1e-5
    for _ in range(100):
        x0 = rng.uniform(-1.5, 1.5, size=3)
        a = gg.evaluate({"x": x0})[0]
        fd = np.array([(fg.evaluate({"x": x0 + h * e})[0] - fg.evaluate({"x": x0 - h * e})[0]) / (2 * h)
                       for e in np.eye(3)])
        np.testing.assert_allclose(a, fd, rtol=1e-4, atol=1e-6)
        a2 = hg.evaluate({"x": x0})[0]
        fd2 = (gg.evaluate({"x": x0 + h * v})[0] - gg.evaluate({"x": x0 - h * v})[0]) / (2 * h)
        np.testing.assert_allclose(a2, fd2, rtol=1e-3, atol=1e-5)


def test_every_primitive_is_covered():
    x, cases = _unary_cases()
    seen = set()
    for f in cases.values():
        order = dc.ComputeGraph(f).order
        seen |= {n.op for n in order}
    assert set(dc.PRIMITIVES) - seen == set()


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), x0=st.floats(-2, 2))
def test_linearity_of_derive(a, b, x0):
    x = dc.var("x")
    f = dc.tanh(x) * x
    g = dc.sin(x)
    (lhs,) = dc.grad(a * f + b * g, [x])
    (df,) = dc.grad(f, [x])
    (dg,) = dc.grad(g, [x])
    val = dc.ComputeGraph([lhs, df, dg]).evaluate({"x": x0})
    assert abs(val[0] - (a * val[1] + b * val[2])) <= 1e-12 * max(1.0, abs(val[0]))


def test_grad_wrt_interior_node():
    # d/ds of H(s) with s = t^2 treats s as independent
    t = dc.var("t")
    s = dc.square(t)
    H = dc.power(s, 3)
    (dHds,) = dc.grad(H, [s])
    assert dc.evaluate(dHds, {"t": 2.0})[0] == pytest.approx(3 * 4.0 ** 2)
    # and the result stays differentiable through s
    (dd,) = dc.grad(dHds, [t])
    assert dc.evaluate(dd, {"t": 2.0})[0] == pytest.approx(6 * 4.0 * 2 * 2.0)


def test_graph_is_reusable_concurrently():
    from concurrent.futures import ThreadPoolExecutor
    x = dc.var("x", (4,))
    g = dc.ComputeGraph(dc.total(dc.tanh(x) * x))
    inputs = [np.full(4, i / 10) for i in range(20)]
    with ThreadPoolExecutor(4) as pool:
        out = list(pool.map(lambda v: g.evaluate({"x": v})[0], inputs))
    assert out == [g.evaluate({"x": v})[0] for v in inputs]
