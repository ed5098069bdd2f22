"""Central finite-difference checks of tape gradients, plus the per-op suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor, no_grad, record_kinks


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)
    tape_grads: list[np.ndarray] = field(default_factory=list)
    fd_grads: list[np.ndarray] = field(default_factory=list)
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||); absolute when both are ~0."""
    diff = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    return diff / scale if scale > 1e-10 else diff


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5, tol: float = 1e-4,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               name: str = "fn", skip_kinks: bool = True) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn(*inputs)`` with (f(x+h)-f(x-h))/2h.

    Inputs are promoted to float64. With ``max_coords`` set, only that many
    randomly chosen coordinates per input are differenced. With ``skip_kinks``
    a coordinate whose two probes see different ReLU masks is dropped (the
    central difference straddles a corner there) and, when sampling, replaced
    by another. Failures are reported through ``passed``, never raised.
    """
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    ts = [Tensor(x, requires_grad=True) for x in xs]
    with Tape() as tape:
        out = fn(*ts)
        if out.size != 1:
            raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        tape.backward(out)
    tape_grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    def f_at(i, flat_idx, delta):
        probe = list(t.data for t in ts)
        probe[i] = probe[i].copy()
        probe[i].flat[flat_idx] += delta
        with no_grad(), record_kinks() as rec:
            val = float(fn(*[Tensor(p) for p in probe]).data)
        return val, rec.masks

    def central(i, c):
        (fp, mp), (fm, mm) = f_at(i, c, h), f_at(i, c, -h)
        smooth = len(mp) == len(mm) and all(np.array_equal(a, b) for a, b in zip(mp, mm))
        return (fp - fm) / (2 * h), smooth or not skip_kinks

    per_input, fd_grads, picked, skipped = [], [], [], 0
    for i, x in enumerate(xs):
        n = x.size
        sampled = max_coords is not None and n > max_coords
        order = (rng if rng is not None else np.random.default_rng(0)).permutation(n) if sampled else np.arange(n)
        want = max_coords if sampled else n
        coords, fd = [], []
        for c in order:
            g, ok = central(i, int(c))
            if ok:
                coords.append(int(c))
                fd.append(g)
            else:
                skipped += 1
            if len(coords) == want:
                break
        coords, fd = np.array(coords, dtype=np.int64), np.array(fd)
        tg = tape_grads[i].ravel()[coords]
        # every probe landing on a corner is no evidence of correctness
        per_input.append(relative_error(tg, fd) if len(coords) or not n else float("inf"))
        fd_grads.append(fd)
        picked.append(tg)
    return GradCheckReport(name=name, max_rel_error=max(per_input) if per_input else 0.0, tol=tol,
                           per_input=per_input, tape_grads=picked, fd_grads=fd_grads, skipped=skipped)


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_all(T.mul(y, Tensor(w)))


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One randomized scalar-valued test case per differentiable op."""
    cases = {}
    n, c, h = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(3, 7))
    x4 = rng.standard_normal((n, c, h, h))

    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((1, 4))
    wa = rng.standard_normal((3, 4))
    cases["add"] = (lambda p, q: _weighted_sum(T.add(p, q), wa), [a, b])
    cases["mul"] = (lambda p, q: _weighted_sum(T.mul(p, q), wa), [a, b])

    o = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    wk = rng.standard_normal((o, c, k, k))
    bk = rng.standard_normal(o)
    ho = (h + 2 * pad - k) // stride + 1
    rw = rng.standard_normal((n, o, ho, ho))
    cases["conv2d"] = (lambda x, w, bb: _weighted_sum(T.conv2d(x, w, bb, stride, pad), rw), [x4, wk, bk])

    nb = max(n, 2)
    xb = rng.standard_normal((nb, c, h, h)) * 2 + 0.5
    gam, bet = rng.standard_normal(c), rng.standard_normal(c)
    rb = rng.standard_normal((nb, c, h, h))

    def bn_train(x, g, be):
        return _weighted_sum(T.batch_norm(x, g, be, np.zeros(c), np.ones(c), training=True), rb)

    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

    def bn_eval(x, g, be):
        return _weighted_sum(T.batch_norm(x, g, be, rm.copy(), rv.copy(), training=False), rb)

    cases["batch_norm_train"] = (bn_train, [xb, gam, bet])
    cases["batch_norm_eval"] = (bn_eval, [xb, gam, bet])

    r4 = rng.standard_normal(x4.shape)
    cases["relu"] = (lambda x: _weighted_sum(T.relu(x), r4), [_away_from_zero(rng, x4.shape)])
    cases["sigmoid"] = (lambda x: _weighted_sum(T.sigmoid(x), r4), [x4 * 3])

    fi, fo = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    xl, wl, bl = rng.standard_normal((n, fi)), rng.standard_normal((fo, fi)), rng.standard_normal(fo)
    rl = rng.standard_normal((n, fo))
    cases["linear"] = (lambda x, w, bb: _weighted_sum(T.linear(x, w, bb), rl), [xl, wl, bl])

    rg = rng.standard_normal((n, c))
    cases["global_avg_pool"] = (lambda x: _weighted_sum(T.global_avg_pool(x), rg), [x4])

    f = int(rng.integers(2, 4))
    hp = -(-h // f)
    rp = rng.standard_normal((n, c, hp, hp))
    cases["avg_pool2d"] = (lambda x: _weighted_sum(T.avg_pool2d(x, f), rp), [x4])

    oc = c * 2 + 1
    rt = rng.standard_normal((n, oc, h, h))
    cases["tile_channels"] = (lambda x: _weighted_sum(T.tile_channels(x, oc), rt), [x4])

    ncls = int(rng.integers(2, 6))
    logits = rng.standard_normal((4, ncls)) * 2
    labels = rng.integers(0, ncls, 4)
    cases["softmax_cross_entropy"] = (lambda z: T.softmax_cross_entropy(z, labels), [logits])

    ri = rng.standard_normal(3)
    cases["index"] = (lambda x: _weighted_sum(x[:, 1], ri), [a])
    rr = rng.standard_normal((4, 3))
    cases["reshape"] = (lambda x: _weighted_sum(T.reshape(x, (4, 3)), rr), [a])
    return cases


def op_suite(trials: int = 50, seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> dict[str, list[GradCheckReport]]:
    rng = np.random.default_rng(seed)
    results: dict[str, list[GradCheckReport]] = {}
    for _ in range(trials):
        for name, (fn, inputs) in op_cases(rng).items():
            results.setdefault(name, []).append(grad_check(fn, inputs, h=h, tol=tol, name=name))
    return results


def _swap(store: dict, name: str, t: Tensor) -> None:
    store[name] = t


def composite_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """Sub-block + loss and the whole patched forward pass on a narrow float64 network.

    Gradients flow to the input and to every kind of trainable patch tensor;
    the backbone stays frozen (eval-mode BN) exactly as during patching.
    """
    from .delta import build_topology, forward_patched, new_patch
    from .nets import build_backbone, sub_block

    bb = build_backbone("narrow", (1, 16, 16), 3, rng, dtype=np.float64, widths=(4, 4, 4, 4), depths=(2, 2, 2, 2))
    for name in bb.buffers:
        if name.endswith(".mean"):
            bb.buffers[name] = rng.normal(0.0, 0.1, bb.buffers[name].shape)
        else:
            bb.buffers[name] = rng.uniform(0.5, 1.5, bb.buffers[name].shape)
    bb.freeze()
    topo = build_topology(bb)
    n = 3
    labels = rng.integers(0, 3, n)
    x = rng.normal(size=(n, 1, 16, 16))

    def sub_block_loss(h, w1, w2, hw):
        _swap(bb.params, "block1.0.conv1.conv", w1)
        _swap(bb.params, "block1.0.conv2.conv", w2)
        y = sub_block(bb, 1, 0, h, False)
        return T.softmax_cross_entropy(T.linear(T.global_avg_pool(y), hw, Tensor(np.zeros(3))), labels)

    cases = {"sub_block+loss": (sub_block_loss, [rng.normal(size=(n, 4, 16, 16)),
                                                 bb.params["block1.0.conv1.conv"].data.copy(),
                                                 bb.params["block1.0.conv2.conv"].data.copy(),
                                                 rng.normal(size=(3, 4))])}

    for label, skip_bn, training in (("patched_forward", False, False), ("patched_forward+skip_bn", True, True)):
        patch = new_patch(bb, topo, "t", 3, rng, n_modules=2, skip_bn=skip_bn)
        b = patch.placement[0]
        mod = patch.blocks[b].module
        mod.params["fc.bias"].data = rng.normal(0.0, 0.5, mod.params["fc.bias"].shape)

        def patched_loss(xin, dconv, dfc, hw, hb, patch=patch, mod=mod, training=training):
            _swap(mod.params, "conv1.conv", dconv)
            _swap(mod.params, "fc.weight", dfc)
            patch.head.weight, patch.head.bias = hw, hb
            return T.softmax_cross_entropy(forward_patched(bb, topo, patch, xin, training=training), labels)

        cases[label] = (patched_loss, [x.copy(), mod.params["conv1.conv"].data.copy(),
                                       mod.params["fc.weight"].data.copy(), patch.head.weight.data.copy(),
                                       patch.head.bias.data.copy()])
    return cases


def composite_suite(trials: int = 50, seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                    max_coords: int = 12) -> dict[str, list[GradCheckReport]]:
    rng = np.random.default_rng(seed)
    results: dict[str, list[GradCheckReport]] = {}
    for _ in range(trials):
        for name, (fn, inputs) in composite_cases(rng).items():
            results.setdefault(name, []).append(
                grad_check(fn, inputs, h=h, tol=tol, max_coords=max_coords, rng=rng, name=name))
    return results
