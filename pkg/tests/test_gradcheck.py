import numpy as np

from deltanets import tensor as T
from deltanets.gradcheck import composite_suite, grad_check, op_suite, relative_error
from deltanets.tensor import Tensor, _finish


def test_quadratic_at_three():
    rep = grad_check(lambda x: T.sum_all(T.mul(x, x)), [np.array([3.0])])
    assert rep.tape_grads[0][0] == 6.0
    assert abs(rep.fd_grads[0][0] - 6.0) < 1e-9
    assert rep.max_rel_error < 1e-9 and rep.passed


def test_op_suite_passes():
    results = op_suite(trials=5, seed=3)
    assert len(results) >= 14
    for name, reps in results.items():
        assert all(r.passed for r in reps), (name, max(r.max_rel_error for r in reps))


def test_composite_cases_pass():
    for name, reps in composite_suite(trials=2, seed=4).items():
        assert all(r.passed for r in reps), name


def test_wrong_backward_is_reported_not_raised(rng):
    def doubled_wrong(x):
        return _finish("square", x.data ** 2, (x,), lambda g: (g * 4.0 * x.data,))

    rep = grad_check(lambda x: T.sum_all(doubled_wrong(x)), [rng.normal(size=5)])
    assert not rep.passed
    assert rep.max_rel_error > 0.3


def test_subsampled_coordinates(rng):
    w = rng.normal(size=(20, 30))
    rep = grad_check(lambda a: T.sum_all(T.linear(a, Tensor(w))), [rng.normal(size=(4, 30))],
                     max_coords=10, rng=rng)
    assert len(rep.fd_grads[0]) == 10 and rep.passed


def test_relative_error_scale_free():
    a = np.array([1e-3, 2e-3])
    assert relative_error(a, a * (1 + 1e-6)) < 2e-6
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0


def test_corner_straddling_coordinate_is_skipped():
    x = np.array([1.0, -2.0, 3e-7, 0.5])
    fn = lambda t: T.sum_all(T.relu(t))
    naive = grad_check(fn, [x], skip_kinks=False)
    safe = grad_check(fn, [x])
    assert not naive.passed
    assert safe.passed and safe.skipped == 1 and len(safe.fd_grads[0]) == 3


def test_all_coordinates_on_corners_fails():
    rep = grad_check(lambda t: T.sum_all(T.relu(t)), [np.zeros(3)])
    assert rep.skipped == 3 and not rep.passed


def test_record_kinks_sees_every_relu():
    from deltanets.tensor import record_kinks
    with record_kinks() as rec:
        T.relu(T.relu(Tensor(np.array([-1.0, 2.0]))))
    assert len(rec.masks) == 2 and rec.masks[0].tolist() == [False, True]
    T.relu(Tensor(np.ones(2)))
    assert len(rec.masks) == 2
