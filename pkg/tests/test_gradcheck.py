import time

import numpy as np

from trimtrain.gradcheck import (TOLERANCE, corrupted_conv_backward, numeric_grad,
                                 relative_error, run_suite)


def test_suite_passes_quickly():
    t0 = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    assert elapsed < 60
    cases = {r.case for r in results}
    for c in ("conv s=1 p=0", "conv s=1 p=1", "conv s=2 p=0", "conv s=2 p=1",
              "fc", "relu", "maxpool", "softmax-ce", "lenet5"):
        assert c in cases
    bad = [str(r) for r in results if not r.passed]
    assert not bad, bad


def test_suite_other_seed():
    assert all(r.passed for r in run_suite(seed=5, include_network=False))


def test_corrupted_backward_is_caught():
    case = "conv s=1 p=1"
    results = run_suite(seed=0, backward_override={case: corrupted_conv_backward},
                        include_network=False)
    bad = [r for r in results if not r.passed]
    assert bad and all(r.case == case and r.tensor == "input" for r in bad)
    assert min(r.error for r in bad) > 100 * TOLERANCE


def test_numeric_grad_of_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = numeric_grad(lambda: float(np.sum(x ** 2)), x)
    assert relative_error(2 * x, g) < 1e-8
    assert np.array_equal(x, [1.0, -2.0, 0.5])


def test_relative_error_zero_reference():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.ones(2), np.zeros(2)) > 1e6
