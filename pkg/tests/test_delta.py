import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltanets import tensor as T
from deltanets.config import ConfigError, TrainConfig
from deltanets.delta import (PLACEMENTS, PatchState, base_pattern, build_topology, connection_pairs, delta_forward,
                             forward_base_via_patched_model, forward_patched, lambda_statistics, make_delta_module,
                             new_patch, placement, trainable_params, write_lambda_csv)
from deltanets.engine import build_variant
from deltanets.init import make_rng
from deltanets.nets import attach_head, build_backbone, digest, features, forward_base, head_forward, shape_adapter, stage
from deltanets.tensor import Tape, Tensor


def test_pairs_for_k2_and_k3():
    assert connection_pairs(2) == [(0, 1), (0, 2), (1, 2)]
    assert len(connection_pairs(3)) == 6


@given(st.integers(1, 12))
def test_pair_count_and_order(k):
    pairs = connection_pairs(k)
    assert len(pairs) == k * (k + 1) // 2 == len(set(pairs))
    assert all(0 <= s < t <= k for s, t in pairs)
    assert pairs == sorted(pairs, key=lambda p: (p[1], p[0]))


def test_tiny_topology():
    bb = build_backbone("tiny", (1, 28, 28), 5, make_rng(0))
    topo = build_topology(bb)
    assert topo.total == 12
    for b, conns in enumerate(topo.blocks):
        for c in conns:
            assert c.block == b
            stride = 1 if b == 0 else 2
            assert c.pool == (stride if c.src == 0 else 1)
        assert [c.is_residual for c in conns] == [True, False, True]


def test_delta_module_param_formula():
    for c_in, p in [(1, 3), (3, 3), (3, 6), (16, 10)]:
        mod = make_delta_module(c_in, p, make_rng(0))
        assert mod.num_params() == 72 * c_in + 16 + 576 + 16 + 9 * p


def test_delta_output_range_and_conditioning(rng):
    mod = make_delta_module(1, 3, make_rng(0))
    x = rng.normal(size=(2, 1, 16, 16)).astype(np.float32) * 3
    lam = delta_forward(mod, x).data
    assert lam.shape == (2, 3) and np.all((lam >= 0) & (lam <= 1))
    assert not np.array_equal(lam[0], lam[1])


def test_delta_zero_fc_gives_half(rng):
    mod = make_delta_module(1, 3, make_rng(0), dtype=np.float64)
    mod.params["fc.weight"].data[:] = 0
    assert np.array_equal(delta_forward(mod, rng.normal(size=(4, 1, 16, 16))).data, np.full((4, 3), 0.5))
    mod.params["fc.bias"].data[:] = 30.0
    assert np.allclose(delta_forward(mod, rng.normal(size=(4, 1, 16, 16))).data, 1.0, atol=1e-9)


def test_delta_pools_large_inputs(rng):
    mod = make_delta_module(3, 6, make_rng(0))
    assert delta_forward(mod, rng.normal(size=(2, 3, 96, 96)).astype(np.float32)).shape == (2, 6)


def test_placements():
    assert placement(1) == (3,) and placement(2) == (2, 3) and placement(4) == (0, 1, 2, 3)
    assert set(PLACEMENTS) == {0, 1, 2, 4}
    with pytest.raises(ConfigError):
        placement(3)


def test_base_pattern_recovers_base_logits_bit_exactly(narrow_bb, rng):
    topo = build_topology(narrow_bb)
    patch = new_patch(narrow_bb, topo, "t", 5, make_rng(1), n_modules=4)
    patch.head = narrow_bb.head
    x = rng.normal(size=(6, 1, 16, 16)).astype(np.float32)
    lambdas = {b: np.tile(base_pattern(topo, b), (6, 1)) for b in range(4)}
    got = forward_patched(narrow_bb, topo, patch, x, lambdas=lambdas).data
    assert got.tobytes() == forward_base(narrow_bb, x).data.tobytes()


def test_head_only_patch_equals_fc_baseline(narrow_bb, rng):
    topo = build_topology(narrow_bb)
    head = attach_head(narrow_bb, 4, make_rng(2))
    x = rng.normal(size=(3, 1, 16, 16)).astype(np.float32)
    got = forward_patched(narrow_bb, topo, PatchState("t", head), x).data
    assert got.tobytes() == head_forward(head, features(narrow_bb, x)).data.tobytes()


def test_injected_lambdas_match_manual_unroll(narrow_bb, rng):
    """Block 1 (k=2, stride 2, 4->8 channels) recomputed by hand from stages and adapters."""
    bb = narrow_bb
    topo = build_topology(bb)
    patch = new_patch(bb, topo, "t", 5, make_rng(1), n_modules=4)
    x = rng.normal(size=(3, 1, 16, 16)).astype(np.float32)
    lams = {b: rng.uniform(size=(3, 3)).astype(np.float32) for b in range(4)}
    got = forward_patched(bb, topo, patch, x, lambdas=lams).data

    from deltanets.nets import stem_forward
    h = stem_forward(bb, Tensor(x)).data
    for b in range(4):
        lam = lams[b]
        f0 = h
        pool = 1 if b == 0 else 2
        cout = bb.blocks[b].out_channels

        def adapt(v, p):
            return shape_adapter(Tensor(v), p, cout).data

        def w(j):
            return lam[:, j][:, None, None, None]

        f1 = stage(bb, b, 0, Tensor(f0)).data + w(0) * adapt(f0, pool)
        f2 = stage(bb, b, 1, Tensor(f1)).data + w(1) * adapt(f0, pool) + w(2) * f1
        h = f2
    manual = h.mean(axis=(2, 3)) @ patch.head.weight.data.T + patch.head.bias.data
    assert np.max(np.abs(got - manual)) <= 1e-6 * max(1.0, np.abs(manual).max())


def test_forward_patched_errors(narrow_bb):
    topo = build_topology(narrow_bb)
    patch = new_patch(narrow_bb, topo, "t", 5, make_rng(1), n_modules=1)
    patch.head = None
    with pytest.raises(ValueError):
        forward_patched(narrow_bb, topo, patch, np.zeros((1, 1, 16, 16), np.float32))
    patch = new_patch(narrow_bb, topo, "t", 5, make_rng(1), n_modules=1)
    patch.blocks[7] = patch.blocks.pop(3)
    with pytest.raises(ConfigError):
        forward_patched(narrow_bb, topo, patch, np.zeros((1, 1, 16, 16), np.float32))


def test_trainable_counts():
    bb = build_backbone("tiny", (1, 28, 28), 5, make_rng(0))
    topo = build_topology(bb)
    patch = new_patch(bb, topo, "t", 5, make_rng(1), n_modules=1)
    delta_part = 72 * 1 + 16 + 576 + 16 + 8 * 3 + 3
    head = 128 * 5 + 5
    assert trainable_params(patch) == delta_part + head == 1352
    fc = build_variant(bb, topo, "t", 7, TrainConfig(variant="fc_only", n_modules=0), make_rng(1))
    assert trainable_params(fc) == 128 * 7 + 7
    n4 = new_patch(bb, topo, "t", 5, make_rng(1), n_modules=4)
    assert trainable_params(n4) == 4 * delta_part + head


def test_patch_training_leaves_backbone_untouched(narrow_bb, rng):
    topo = build_topology(narrow_bb)
    before = digest(narrow_bb)
    patch = new_patch(narrow_bb, topo, "t", 5, make_rng(1), n_modules=2)
    x = rng.normal(size=(4, 1, 16, 16)).astype(np.float32)
    with Tape() as tape:
        tape.backward(T.softmax_cross_entropy(forward_patched(narrow_bb, topo, patch, x, training=True), [0, 1, 2, 3]))
    assert all(p.grad is None for p in narrow_bb.parameters())
    assert all(p.grad is not None for p in patch.parameters())
    assert digest(narrow_bb) == before


def test_base_via_patched_model_ignores_patches(narrow_bb, rng):
    topo = build_topology(narrow_bb)
    patches = [new_patch(narrow_bb, topo, f"t{i}", 5, make_rng(i), n_modules=4) for i in range(3)]
    x = rng.normal(size=(2, 1, 16, 16)).astype(np.float32)
    assert forward_base_via_patched_model(narrow_bb, patches, x).data.tobytes() == \
        forward_base(narrow_bb, x).data.tobytes()
    assert forward_base_via_patched_model(narrow_bb, [], x).data.tobytes() == forward_base(narrow_bb, x).data.tobytes()


def test_learnable_skip_starts_as_plain_residual(narrow_bb, rng):
    topo = build_topology(narrow_bb)
    patch = build_variant(narrow_bb, topo, "t", 5, TrainConfig(variant="learnable_skip", n_modules=0), make_rng(1))
    x = rng.normal(size=(3, 1, 16, 16)).astype(np.float32)
    expected = head_forward(patch.head, features(narrow_bb, x)).data
    assert forward_patched(narrow_bb, topo, patch, x).data.tobytes() == expected.tobytes()


def test_lambda_csv(narrow_bb, rng, tmp_path):
    topo = build_topology(narrow_bb)
    patch = new_patch(narrow_bb, topo, "t", 5, make_rng(1), n_modules=2)
    rows = lambda_statistics(narrow_bb, topo, patch, rng.normal(size=(10, 1, 16, 16)).astype(np.float32), batch_size=4)
    path = tmp_path / "lam.csv"
    write_lambda_csv(path, rows)
    with open(path) as f:
        read = list(csv.DictReader(f))
    assert list(read[0]) == ["block", "connection_src", "connection_dst", "mean_lambda", "std_lambda"]
    assert len(read) == 6 and {r["block"] for r in read} == {"3", "4"}
    assert all(0.0 <= float(r["mean_lambda"]) <= 1.0 for r in read)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.sampled_from([1, 2, 4]))
def test_delta_count_independent_of_backbone_size(depth, n):
    small = build_backbone("a", (1, 16, 16), 3, make_rng(0), widths=(4, 4, 4, 4), depths=(depth,) * 4)
    large = build_backbone("b", (1, 16, 16), 3, make_rng(0), widths=(8, 16, 16, 32), depths=(depth,) * 4)
    ps = new_patch(small, build_topology(small), "t", 3, make_rng(1), n_modules=n)
    pl = new_patch(large, build_topology(large), "t", 3, make_rng(1), n_modules=n)
    delta = lambda p: sum(bp.module.num_params() for bp in p.blocks.values())
    assert delta(ps) == delta(pl)
