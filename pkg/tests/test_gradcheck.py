import numpy as np
import pytest

from dadt import gradcheck


@pytest.mark.parametrize("component", gradcheck.COMPONENTS)
def test_component_passes(component):
    (r,) = gradcheck.run(seed=3, instances=3, components=(component,))
    assert r.ok and r.instances == 3 and r.entries > 0


@pytest.mark.parametrize("component", gradcheck.COMPONENTS)
def test_corruption_is_caught(component):
    (r,) = gradcheck.run(seed=3, instances=2, corrupt=component, components=(component,))
    assert not r.ok and r.max_rel_error > 1e-3


def test_central_difference_of_quadratic():
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    g = gradcheck.central_difference(lambda v: float((v ** 2).sum()), x, 1e-3)
    assert np.allclose(g, 2 * x, rtol=0, atol=1e-9)


def test_relative_error_floor():
    a = np.array([1.0, 1e-9])
    n = np.array([1.0, 0.0])
    # tiny entries are judged against the gradient's overall scale
    assert gradcheck.rel_error(a, n) <= 1e-5
