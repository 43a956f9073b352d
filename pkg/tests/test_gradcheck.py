import numpy as np

from ssclab import tensor as T
from ssclab.gradcheck import grad_check


def _square(x, wrong=False):
    scale = 3.0 if wrong else 2.0
    return T.custom_op("square", x.data ** 2, (x,), lambda g: (scale * x.data * g,))


def test_correct_gradient_passes():
    rep = grad_check(lambda x: T.reduce(_square(x)), np.array([0.3, -1.2, 2.0]))
    assert rep.passed and rep.max_rel_error < 1e-8
    assert rep.checked == 3 and rep.skipped_kinks == 0


def test_wrong_gradient_is_caught():
    rep = grad_check(lambda x: T.reduce(_square(x, wrong=True)), np.array([0.3, -1.2, 2.0]))
    assert not rep.passed
    assert abs(rep.max_rel_error - 1 / 3) < 1e-6
    assert "FAIL" in str(rep)


def test_kinks_are_skipped_not_failed():
    x = np.array([0.0, 1.0, -2.0])
    rep = grad_check(lambda t: T.reduce(T.relu(t)), x)
    assert rep.passed
    assert rep.skipped_kinks == 1 and rep.checked == 2


def test_inputs_promoted_to_float64():
    seen = []

    def f(x):
        seen.append(x.dtype)
        return T.reduce(T.mul(x, x))

    grad_check(f, np.array([1.0, 2.0], dtype=np.float32))
    assert seen and all(d == np.float64 for d in seen)


def test_per_input_errors_reported():
    rep = grad_check(lambda a, b: T.reduce(T.mul(a, _square(b, wrong=True))),
                     [np.array([1.0, 2.0]), np.array([0.5, 1.5])])
    assert len(rep.per_input) == 2
    assert rep.per_input[0] < 1e-8 < rep.per_input[1]


def test_unused_input_has_zero_gradient():
    rep = grad_check(lambda a, b: T.reduce(T.mul(a, a)), [np.array([1.0]), np.array([3.0])])
    assert rep.passed
