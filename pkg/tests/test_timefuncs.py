import itertools
import zlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import max_rel_error
from tpconv.errors import ConfigError, NumericsError
from tpconv.numerics import Rng, finite_diff_grad
from tpconv.timefuncs import (
    ALL_FUNCTIONS, ActivationId, KernelParams, TimeFunctionId, activate, activate_deriv, eval_h, eval_h_deriv,
    init_kernel, kernel_value, kernel_value_grads,
)

CONFIG_NAMES = ["lin", "sin", "cos", "tan", "exp", "sq", "cube", "sinh", "cosh", "tanh"]


def test_ten_functions_with_config_names():
    assert [f.value for f in TimeFunctionId] == CONFIG_NAMES
    assert len(ALL_FUNCTIONS) == 10
    with pytest.raises(ConfigError):
        TimeFunctionId.parse("gauss")


@pytest.mark.parametrize("fid,x,expected", [
    ("sin", 0.0, 0.0), ("exp", 0.0, 1.0), ("sq", 3.0, 9.0), ("lin", -2.5, -2.5), ("cos", 0.0, 1.0),
    ("tan", math.pi / 4, 1.0), ("cube", -2.0, -8.0), ("sinh", 0.0, 0.0), ("cosh", 0.0, 1.0), ("tanh", 0.0, 0.0),
])
def test_eval_h_values(fid, x, expected):
    assert eval_h(fid, x) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("fid,x,expected", [
    ("sin", 0.0, 1.0), ("cube", 2.0, 12.0), ("exp", 25.0, 0.0), ("sq", 1.5, 3.0), ("sinh", -21.0, 0.0),
    ("cosh", 30.0, 0.0), ("lin", 7.0, 1.0), ("cos", 0.0, 0.0),
])
def test_eval_h_deriv_values(fid, x, expected):
    assert eval_h_deriv(fid, x) == pytest.approx(expected, abs=1e-15)


def test_exp_clamp_saturates():
    assert eval_h("exp", 25.0) == eval_h("exp", 20.0) == pytest.approx(math.exp(20.0))
    assert eval_h("sinh", -50.0) == pytest.approx(math.sinh(-20.0))


def test_tan_pole_is_an_error():
    with pytest.raises(NumericsError):
        eval_h("tan", math.pi / 2)
    with pytest.raises(NumericsError):
        eval_h_deriv("tan", np.array([0.0, 3 * math.pi / 2 + 1e-7]))
    assert np.isfinite(eval_h("tan", math.pi / 2 - 1e-3))


@pytest.mark.parametrize("fid", [f for f in CONFIG_NAMES])
def test_h_deriv_matches_finite_difference(fid):
    xs = np.linspace(-2.3, 2.3, 17) + 0.013  # away from tan poles
    for x in xs:
        fd = finite_diff_grad(lambda v: float(eval_h(fid, v[0])), [x])[0]
        assert max_rel_error(eval_h_deriv(fid, x), fd) < 1e-6


@pytest.mark.parametrize("aid", list(ActivationId))
def test_activation_deriv(aid):
    for x in np.linspace(-3, 3, 13) + 0.01:
        fd = finite_diff_grad(lambda v: float(activate(aid, v[0])), [x])[0]
        assert max_rel_error(activate_deriv(aid, x), fd) < 1e-6
    assert activate_deriv("relu", 0.0) == 0.0


def test_sigmoid_is_stable():
    out = activate("sigmoid", np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_kernel_value_examples():
    p = KernelParams([1.0], [0.0], [1.0], [0.0], h="lin", sigma="sigmoid")
    np.testing.assert_allclose(kernel_value(p, 0.0), [0.5], rtol=0, atol=1e-15)
    p = KernelParams([0.0], [3.0], [-2.0], [0.7], h="exp", sigma="tanh")
    np.testing.assert_array_equal(kernel_value(p, 1.3), [0.0])
    # 2 * (sigmoid(sin(pi/2)) + 0.5), evaluated with mpmath at 30 digits
    p = KernelParams([2.0], [0.5], [1.0], [0.0], h="sin", sigma="sigmoid")
    np.testing.assert_allclose(kernel_value(p, math.pi / 2), [2.46211715726000975850], rtol=0, atol=1e-12)


def test_kernel_value_grads_examples():
    p = KernelParams([0.3, -1.2], [0.1, 0.2], [0.9, 1.1], [0.05, -0.02], h="cos", sigma="sigmoid")
    for g in kernel_value_grads(p, 0.4, np.zeros(2)):
        np.testing.assert_array_equal(g, np.zeros(2))
    p = KernelParams([1.0], [0.0], [1.0], [0.0], h="lin", sigma="identity")
    grads = kernel_value_grads(p, 2.0, np.ones(1))
    assert grads[2][0] == pytest.approx(2.0)


def _params_vector(p):
    return np.concatenate(p.thetas())


@pytest.mark.parametrize("fid,aid", list(itertools.product(CONFIG_NAMES, [a.value for a in ActivationId])))
def test_kernel_grads_vs_finite_differences(fid, aid):
    rng = Rng(zlib.crc32(f"{fid}-{aid}".encode()))
    m = 3
    for trial in range(4):
        # u = theta3*dt + theta4 stays in [0.3, 1.1]: clear of tan poles and of points
        # where the partials vanish and central differences become roundoff-limited
        p = KernelParams(
            theta1=rng.uniform(0.5, 2.0, (m,)) * np.array([1, -1, 1]),
            theta2=rng.uniform(-0.5, 0.5, (m,)),
            theta3=rng.uniform(0.5, 1.0, (m,)),
            theta4=rng.uniform(0.2, 0.4, (m,)),
            h=fid,
            sigma=aid,
        )
        dt = float(rng.uniform(0.2, 0.7))
        up = rng.normal(0, 1, (m,))

        def f(vec):
            q = KernelParams(*vec.reshape(4, m), h=fid, sigma=aid)
            return float(kernel_value(q, dt) @ up)

        fd = finite_diff_grad(f, _params_vector(p)).reshape(4, m)
        an = np.stack(kernel_value_grads(p, dt, up))
        assert max_rel_error(an, fd) < 1e-6, (fid, aid, trial)


@pytest.mark.parametrize("z", [1, 2, 4, 8])
def test_parameter_count_is_4m(z):
    for m in (1, 5, 37):
        p = init_kernel(Rng(z), m, z)
        assert p.parameters().size == 4 * m


@settings(max_examples=50)
@given(st.floats(-10, 10), st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.sampled_from(list(ActivationId)))
def test_sin_kernel_periodic_in_dt(dt, th, aid):
    p = KernelParams([th[0]], [th[1]], [1.0], [0.0], h="sin", sigma=aid)
    np.testing.assert_allclose(kernel_value(p, dt + 2 * math.pi), kernel_value(p, dt), rtol=0, atol=1e-12)


@settings(max_examples=50)
@given(st.floats(0.1, 5), st.floats(0.1, 5), st.floats(-1, 1), st.sampled_from(["lin", "cube"]),
       st.floats(-3, 3), st.floats(1e-3, 2))
def test_trend_functions_are_monotone(t1, t3, t4, fid, dt, step):
    p = KernelParams([t1], [0.0], [t3], [t4], h=fid, sigma="identity")
    assert kernel_value(p, dt + step)[0] > kernel_value(p, dt)[0]
