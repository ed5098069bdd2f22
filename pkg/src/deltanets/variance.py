"""Monte-Carlo signal-variance propagation through Kaiming-initialized stacks.

Three topologies are simulated on unit-variance, zero-mean symmetric inputs:

* ``none``      plain stack, y_l = W_l relu(y_{l-1})
* ``residual``  chain of blocks, h_j = F(h_{j-1}) + h_{j-1}
* ``all_pairs`` one block of sub-blocks, f_t = F(f_{t-1}) + sum_{s<t} f_s

where F(h) = W_2 relu(W_1 relu(h)). With ``bn`` every aggregate is
standardized per coordinate over the batch. Weights are redrawn for every
chunk of samples, so estimates average over weight realizations as well.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .init import kaiming_std, make_rng

Z95 = 1.959963984540054


@dataclass
class PropagationSpec:
    depth: int = 8
    width: int = 64
    skip_mode: str = "none"
    bn: bool = False
    samples: int = 10_000
    seed: int = 0
    realization: str = "dense"
    chunk: int = 100
    spatial: int = 6

    def __post_init__(self):
        if self.skip_mode not in ("none", "residual", "all_pairs"):
            raise ValueError(f"skip_mode must be none, residual or all_pairs, got {self.skip_mode!r}")
        if self.realization not in ("dense", "conv"):
            raise ValueError(f"realization must be dense or conv, got {self.realization!r}")
        if self.width < 2 or self.depth < 1 or self.samples < 2:
            raise ValueError("need width >= 2, depth >= 1, samples >= 2")

    @property
    def fan_in(self) -> int:
        return self.width if self.realization == "dense" else 9 * self.width


@dataclass
class LayerStat:
    layer: int
    var_mean: float
    var_ci: float
    cov_mean: float = float("nan")
    cov_ci: float = float("nan")
    ratio: float = float("nan")


@dataclass
class VarianceReport:
    spec: PropagationSpec
    layers: list[LayerStat] = field(default_factory=list)

    @property
    def variances(self) -> np.ndarray:
        return np.array([s.var_mean for s in self.layers])

    @property
    def ratios(self) -> np.ndarray:
        return np.array([s.ratio for s in self.layers[1:]])

    @property
    def cumulative_ratio(self) -> float:
        return self.layers[-1].var_mean / self.layers[0].var_mean

    def rows(self) -> list[dict]:
        return [vars(s).copy() for s in self.layers]


CSV_HEADER = ["layer", "var_mean", "var_ci", "cov_mean", "cov_ci", "ratio"]


def write_variance_csv(path, report: VarianceReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_HEADER)
        w.writeheader()
        for row in report.rows():
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


class _Stream:
    """Accumulates per-sample statistics so CI half-widths come from the sample spread."""

    def __init__(self):
        self.values: list[np.ndarray] = []

    def add(self, per_sample: np.ndarray) -> None:
        self.values.append(per_sample)

    def summary(self) -> tuple[float, float]:
        v = np.concatenate(self.values)
        return float(v.mean()), Z95 * float(v.std(ddof=1)) / math.sqrt(len(v))


def _flatten(h: np.ndarray) -> np.ndarray:
    # conv maps: every spatial position is another coordinate of the same sample
    return h.reshape(h.shape[0], -1)


# Moments are taken over the joint weight/input ensemble, so every coordinate is
# centred on the chunk-wide mean. Centring per coordinate would drop the spread of
# W E[relu(x)] across units, which the fan-in argument counts as variance.

def _per_sample_var(h: np.ndarray) -> np.ndarray:
    h = _flatten(h)
    c = h - h.mean()
    return (c * c).mean(axis=1)


def _per_sample_cov(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = _flatten(a), _flatten(b)
    return ((a - a.mean()) * (b - b.mean())).mean(axis=1)


def _standardize(h: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    axes = (0,) if h.ndim == 2 else (0, 2, 3)
    mu = h.mean(axis=axes, keepdims=True)
    var = h.var(axis=axes, keepdims=True)
    return (h - mu) / np.sqrt(var + eps)


class _Layers:
    def __init__(self, spec: PropagationSpec, rng: np.random.Generator):
        self.spec, self.rng = spec, rng
        self.std = kaiming_std(spec.fan_in)

    def linear(self, x: np.ndarray) -> np.ndarray:
        d = self.spec.width
        if self.spec.realization == "dense":
            w = self.rng.standard_normal((d, d)) * self.std
            return x @ w.T
        w = self.rng.standard_normal((d, d, 3, 3)) * self.std
        # circular padding keeps every output at the full k*k*c fan-in
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="wrap")
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
        return np.einsum("ncxyij,ocij->noxy", win, w, optimize=True)

    def residual_fn(self, h: np.ndarray) -> np.ndarray:
        return self.linear(np.maximum(self.linear(np.maximum(h, 0.0)), 0.0))

    def input(self, n: int) -> np.ndarray:
        d = self.spec.width
        if self.spec.realization == "dense":
            return self.rng.standard_normal((n, d))
        s = self.spec.spatial
        return self.rng.standard_normal((n, d, s, s))


def propagate_variance(spec: PropagationSpec) -> VarianceReport:
    """Per-layer Var and input/branch Cov estimates with 95% half-widths.

    Layer 0 is the input. For ``none`` the covariance column is empty; for the
    skip topologies it is Cov(block input, residual branch output).
    """
    rng = make_rng(spec.seed, 17)
    L = spec.depth
    var_streams = [_Stream() for _ in range(L + 1)]
    cov_streams = [_Stream() for _ in range(L + 1)]
    done = 0
    while done < spec.samples:
        n = min(spec.chunk, spec.samples - done)
        if n < 2:
            break
        layers = _Layers(spec, rng)
        x = layers.input(n)
        var_streams[0].add(_per_sample_var(x))
        if spec.skip_mode == "none":
            h = x
            for l in range(1, L + 1):
                h = layers.linear(np.maximum(h, 0.0))
                var_streams[l].add(_per_sample_var(h))
        elif spec.skip_mode == "residual":
            h = x
            for l in range(1, L + 1):
                branch = layers.residual_fn(h)
                cov_streams[l].add(_per_sample_cov(h, branch))
                h = branch + h
                if spec.bn:
                    h = _standardize(h)
                var_streams[l].add(_per_sample_var(h))
        else:
            feats = [x]
            for t in range(1, L + 1):
                branch = layers.residual_fn(feats[-1])
                cov_streams[t].add(_per_sample_cov(feats[-1], branch))
                agg = branch + sum(feats)
                if spec.bn:
                    agg = _standardize(agg)
                feats.append(agg)
                var_streams[t].add(_per_sample_var(agg))
        done += n
    report = VarianceReport(spec)
    prev = None
    for l in range(L + 1):
        vm, vci = var_streams[l].summary()
        cm, cci = cov_streams[l].summary() if cov_streams[l].values else (float("nan"), float("nan"))
        report.layers.append(LayerStat(l, vm, vci, cm, cci, vm / prev if prev else float("nan")))
        prev = vm
    return report


@dataclass
class CovarianceEstimate:
    width: int
    abs_cov: float
    ci: float
    theory: float
    offdiag_input_cov: float
    offdiag_input_ci: float
    offdiag_branch_cov: float
    offdiag_branch_ci: float


def covariance_scaling(widths, samples: int = 100_000, seed: int = 0, draws: int = 10,
                       zero_diagonal: bool = False) -> list[CovarianceEstimate]:
    """|Cov(x_i, (Wx)_i)| for a single layer with w_ij ~ N(0, 1/d), x_i iid N(0, 1).

    The expected value is E|w_ii| Var(x_i) = sqrt(2 / (pi d)). ``samples`` are
    split evenly over ``draws`` independent weight matrices.
    """
    widths = list(widths)
    if len(set(widths)) < 2 or min(widths) < 2:
        raise ValueError("need at least two distinct widths >= 2")
    out = []
    for d in widths:
        rng = make_rng(seed, 23, d)
        per = max(samples // draws, 2)
        absc, offx, offf = [], [], []
        for _ in range(draws):
            w = rng.standard_normal((d, d)) / math.sqrt(d)
            if zero_diagonal:
                np.fill_diagonal(w, 0.0)
            x = rng.standard_normal((per, d))
            y = x @ w.T
            xc, yc = x - x.mean(axis=0), y - y.mean(axis=0)
            cov = (xc.T @ yc) / (per - 1)           # cov[i, j] = Cov(x_i, y_j)
            absc.append(np.abs(np.diag(cov)))
            xx = (xc.T @ xc) / (per - 1)
            mask = ~np.eye(d, dtype=bool)
            offx.append(xx[mask])
            offf.append(cov[mask])
        absc, offx, offf = np.concatenate(absc), np.concatenate(offx), np.concatenate(offf)

        def ci(v):
            return Z95 * float(v.std(ddof=1)) / math.sqrt(len(v))

        out.append(CovarianceEstimate(d, float(absc.mean()), ci(absc), math.sqrt(2.0 / (math.pi * d)),
                                      float(offx.mean()), ci(offx), float(offf.mean()), ci(offf)))
    return out


def variance_decomposition(a: np.ndarray, b: np.ndarray) -> dict:
    """Var[a+b], Var[a], Var[b], Cov[a,b] from the same samples (ddof=1)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n = len(a)
    ac, bc = a - a.mean(), b - b.mean()
    s = a + b
    sc = s - s.mean()
    var_a, var_b = ac @ ac / (n - 1), bc @ bc / (n - 1)
    cov = ac @ bc / (n - 1)
    var_sum = sc @ sc / (n - 1)
    return {"var_sum": var_sum, "var_a": var_a, "var_b": var_b, "cov": cov,
            "rel_residual": abs(var_sum - (var_a + var_b + 2 * cov)) / max(var_sum, 1e-300)}


@dataclass
class DepthCurve:
    depths: list[int]
    variances: list[float]
    cumulative: list[float]
    slope: float


def doubling_depth_curve(spec: PropagationSpec, depths) -> DepthCurve:
    """Variance after each of ``depths`` residual blocks and the fitted log-variance slope."""
    depths = list(depths)
    if depths != sorted(depths):
        raise ValueError("depths must be ascending")
    run = propagate_variance(PropagationSpec(**{**vars(spec), "depth": max(depths), "skip_mode": "residual"}))
    v0 = run.layers[0].var_mean
    variances = [run.layers[d].var_mean for d in depths]
    slope = float(np.polyfit(depths, np.log(variances), 1)[0]) if len(depths) > 1 else float("nan")
    return DepthCurve(depths, variances, [v / v0 for v in variances], slope)
