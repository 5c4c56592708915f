import pytest

from grad_suite import CHECKS


@pytest.mark.parametrize("name", sorted(CHECKS))
def test_finite_difference(name):
    fn, tol = CHECKS[name]
    assert fn() < tol
