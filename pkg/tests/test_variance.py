import csv
import math

import numpy as np
import pytest

from deltanets.variance import (PropagationSpec, covariance_scaling, doubling_depth_curve, propagate_variance,
                                variance_decomposition, write_variance_csv)


def test_plain_stack_preserves_variance():
    rep = propagate_variance(PropagationSpec(depth=8, width=64, skip_mode="none", samples=10_000))
    assert np.all((rep.ratios >= 0.9) & (rep.ratios <= 1.1)), rep.ratios


def test_residual_block_doubles():
    rep = propagate_variance(PropagationSpec(depth=1, width=64, skip_mode="residual", samples=10_000))
    assert 1.8 <= rep.ratios[0] <= 2.2
    # input and branch are nearly uncorrelated
    assert abs(rep.layers[1].cov_mean) < 0.05


def test_all_pairs_with_bn_stays_unit():
    rep = propagate_variance(PropagationSpec(depth=4, width=64, skip_mode="all_pairs", bn=True, samples=5000))
    assert np.all((rep.variances[1:] >= 0.8) & (rep.variances[1:] <= 1.2))


def test_residual_depth_four_compounds():
    rep = propagate_variance(PropagationSpec(depth=4, width=64, skip_mode="residual", samples=5000))
    assert 16 * 0.6 <= rep.cumulative_ratio <= 16 * 1.7
    bn = propagate_variance(PropagationSpec(depth=4, width=64, skip_mode="residual", bn=True, samples=5000))
    assert 0.7 <= bn.cumulative_ratio <= 1.4


def test_half_width_shrinks_like_root_n():
    small = propagate_variance(PropagationSpec(depth=1, width=32, skip_mode="residual", samples=2000))
    large = propagate_variance(PropagationSpec(depth=1, width=32, skip_mode="residual", samples=8000))
    ratio = small.layers[1].var_ci / large.layers[1].var_ci
    assert 1.5 <= ratio <= 2.7
    assert all(math.isfinite(s.var_mean) and math.isfinite(s.var_ci) for s in large.layers)


def test_conv_realization_runs():
    rep = propagate_variance(PropagationSpec(depth=1, width=8, skip_mode="residual", samples=400, realization="conv"))
    assert rep.ratios[0] > 1.2


def test_covariance_shrinks_with_width():
    est = covariance_scaling([16, 256], samples=100_000)
    factor = est[0].abs_cov / est[1].abs_cov
    assert 2.0 <= factor <= 8.0
    for e in est:
        assert abs(e.abs_cov / e.theory - 1) < 0.25
        assert abs(e.offdiag_input_cov) <= max(e.offdiag_input_ci, 1e-12) * 1.5


def test_zero_diagonal_kills_covariance():
    est = covariance_scaling([16, 64], samples=20_000, zero_diagonal=True)
    for e in est:
        assert e.abs_cov < 0.25 * e.theory


def test_variance_identity_has_factor_two(rng):
    a = rng.normal(size=5000)
    b = 0.6 * a + rng.normal(size=5000)
    d = variance_decomposition(a, b)
    assert d["rel_residual"] < 1e-12
    without_two = d["var_a"] + d["var_b"] + d["cov"]
    assert abs(without_two - d["var_sum"]) > 0.5


def test_depth_curve_slopes():
    no_bn = doubling_depth_curve(PropagationSpec(width=64, samples=5000), [1, 2, 3, 4, 5, 6])
    assert abs(no_bn.slope / math.log(2) - 1) < 0.2
    bn = doubling_depth_curve(PropagationSpec(width=64, samples=5000, bn=True), [1, 2, 3, 4, 5, 6])
    assert abs(bn.slope) < 0.05
    with pytest.raises(ValueError):
        doubling_depth_curve(PropagationSpec(), [3, 1])


def test_csv_layout(tmp_path):
    rep = propagate_variance(PropagationSpec(depth=2, width=16, skip_mode="residual", samples=500))
    write_variance_csv(tmp_path / "v.csv", rep)
    rows = list(csv.DictReader(open(tmp_path / "v.csv")))
    assert list(rows[0]) == ["layer", "var_mean", "var_ci", "cov_mean", "cov_ci", "ratio"]
    assert [r["layer"] for r in rows] == ["0", "1", "2"]


@pytest.mark.parametrize("kw", [dict(skip_mode="dense"), dict(realization="sparse"), dict(width=1)])
def test_bad_spec(kw):
    with pytest.raises(ValueError):
        PropagationSpec(**kw)
