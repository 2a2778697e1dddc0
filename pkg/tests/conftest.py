import numpy as np
import pytest

from resboost.core_math import finite_diff_grad, grad_check


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def numeric_param_grad(objective, param, h=1e-3, order=4):
    """Finite-difference gradient of ``objective()`` w.r.t. an array edited in place."""

    def f(values):
        saved = param.copy()
        param[...] = values
        try:
            return objective()
        finally:
            param[...] = saved

    return finite_diff_grad(f, param.copy(), h=h, order=order)


def assert_gradient(analytic, numeric, tol=1e-5, zero_atol=1e-10, label=""):
    """Relative-error check, except for (near-)zero analytic entries.

    Entries with ``|analytic| <= zero_atol`` (dead units, F^0 = 0 terms,
    cancellations) sit below the rounding noise of any difference quotient,
    so they are checked in absolute terms instead.
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    zero = np.abs(analytic) <= zero_atol
    assert np.all(np.abs(numeric[zero]) <= 2 * zero_atol), (label, np.max(np.abs(numeric[zero])))
    rep = grad_check(analytic[~zero], numeric[~zero], tol)
    assert rep.passed, (label, rep)
    return rep
