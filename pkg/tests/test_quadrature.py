import math

import numpy as np
import pytest

from ddpm_lab.quadrature import QuadratureError, QuadratureSpec, integrate, simpson_nodes, tensor_nodes


def test_simpson_exact_for_cubics():
    x, w = simpson_nodes(-1.0, 2.0, 5)
    assert w @ (x**3 - x + 2) == pytest.approx((16 / 4 - 2 + 4) - (1 / 4 - 1 / 2 - 2), rel=1e-14)


def test_simpson_needs_odd_nodes():
    with pytest.raises(ValueError):
        simpson_nodes(0.0, 1.0, 4)


@pytest.mark.parametrize("rule", ["simpson", "trapezoid"])
def test_gaussian_integral(rule):
    spec = QuadratureSpec(rule=rule)
    v = integrate(lambda z: np.exp(-0.5 * z[:, 0] ** 2), [-12.0], [12.0], spec)
    assert v == pytest.approx(math.sqrt(2 * math.pi), rel=1e-12)


def test_two_dimensional_integral():
    v = integrate(lambda z: np.exp(-0.5 * np.sum(z**2, axis=1)) * z[:, 0] ** 2, [-12.0, -12.0], [12.0, 12.0])
    assert v == pytest.approx(2 * math.pi, rel=1e-10)


def test_non_convergence_reported():
    spec = QuadratureSpec(max_points_1d=129)
    with pytest.raises(QuadratureError, match="did not converge"):
        integrate(lambda z: np.abs(np.sin(300 * z[:, 0])), [0.0], [1.0], spec)


def test_tensor_nodes_shape():
    nodes, w = tensor_nodes([0, 0], [1, 2], 5)
    assert nodes.shape == (25, 2) and w.sum() == pytest.approx(2.0)
