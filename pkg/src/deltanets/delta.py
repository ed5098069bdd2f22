"""All-pairs skip topology, input-conditioned coefficient modules and the patched forward pass.

Inside a block with k sub-blocks the feature after sub-block t is

    f_t = stage_t(f_{t-1}) + sum_{s<t} lam[s, t] * adapt(f_s)

with f_0 the block input. That gives k(k+1)/2 connections per block; the
pre-existing residual skip is the (t-1 -> t) connection, so lam = 1 there
and 0 elsewhere reproduces the frozen network exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .init import kaiming_init, ones, zeros
from .nets import (BN_EPS, BN_MOMENTUM, Backbone, HeadSpec, attach_head, conv_bn_relu, features,
                   head_forward, shape_adapter, stage, stem_forward, sub_block)
from .optim import ConfigError
from .tensor import Tensor

DELTA_HIDDEN = 8
MAX_DELTA_INPUT = 32
# output-bias logit for a fresh module: sigmoid(+3) ~ 0.95 on residual links, sigmoid(-3) ~ 0.05 elsewhere,
# so a new patch starts close to the unpatched network
DELTA_BIAS_INIT = 3.0

PLACEMENTS = {0: (), 1: (3,), 2: (2, 3), 4: (0, 1, 2, 3)}


@dataclass(frozen=True)
class Connection:
    block: int
    src: int
    dst: int
    pool: int
    out_channels: int

    @property
    def is_residual(self) -> bool:
        return self.src == self.dst - 1


@dataclass
class SkipTopology:
    blocks: list[list[Connection]]

    @property
    def total(self) -> int:
        return sum(len(c) for c in self.blocks)

    def into(self, b: int, t: int) -> list[tuple[int, Connection]]:
        return [(j, c) for j, c in enumerate(self.blocks[b]) if c.dst == t]


def connection_pairs(k: int) -> list[tuple[int, int]]:
    """Every (src, dst) with 0 <= src < dst <= k, ordered by dst then src."""
    return [(s, t) for t in range(1, k + 1) for s in range(t)]


def build_topology(bb: Backbone) -> SkipTopology:
    blocks = []
    for b, block in enumerate(bb.blocks):
        conns = []
        for s, t in connection_pairs(block.k):
            pool = block.stride if s == 0 else 1
            conns.append(Connection(b, s, t, pool, block.out_channels))
        blocks.append(conns)
    return SkipTopology(blocks)


def placement(n_modules: int) -> tuple[int, ...]:
    """Blocks (0-based) that carry a module: 1 -> last, 2 -> last two, 4 -> all."""
    if n_modules not in PLACEMENTS:
        raise ConfigError(f"n_modules must be one of 1, 2, 4 (or 0 for head only), got {n_modules}")
    return PLACEMENTS[n_modules]


@dataclass
class DeltaModule:
    """Two conv-BN-ReLU layers, global pooling and a sigmoid-bounded linear readout."""
    in_channels: int
    n_out: int
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


def make_delta_module(in_channels: int, n_out: int, rng: np.random.Generator, dtype=np.float32) -> DeltaModule:
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    cin = in_channels
    for name in ("conv1", "conv2"):
        params[f"{name}.conv"] = kaiming_init((DELTA_HIDDEN, cin, 3, 3), 9 * cin, rng, dtype)
        params[f"{name}.bn.gamma"] = ones(DELTA_HIDDEN, dtype)
        params[f"{name}.bn.beta"] = zeros(DELTA_HIDDEN, dtype)
        buffers[f"{name}.bn.mean"] = np.zeros(DELTA_HIDDEN, dtype=dtype)
        buffers[f"{name}.bn.var"] = np.ones(DELTA_HIDDEN, dtype=dtype)
        cin = DELTA_HIDDEN
    params["fc.weight"] = kaiming_init((n_out, DELTA_HIDDEN), DELTA_HIDDEN, rng, dtype)
    params["fc.bias"] = zeros(n_out, dtype)
    return DeltaModule(in_channels, n_out, params, buffers)


def delta_forward(module: DeltaModule, x, training: bool = False) -> Tensor:
    """Coefficients in [0, 1], shape (batch, n_out), computed from the raw input."""
    x = T.as_tensor(x)
    h = x.shape[2]
    if h > MAX_DELTA_INPUT:
        x = T.avg_pool2d(x, -(-h // MAX_DELTA_INPUT))
    y = conv_bn_relu(module, "conv1", x, 1, training)
    y = conv_bn_relu(module, "conv2", y, 1, training)
    y = T.global_avg_pool(y)
    return T.sigmoid(T.linear(y, module.params["fc.weight"], module.params["fc.bias"]))


@dataclass
class SkipNorm:
    """Optional BN over the aggregated skip sum entering one sub-block."""
    gamma: Tensor
    beta: Tensor
    mean: np.ndarray
    var: np.ndarray

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def make_skip_norm(channels: int, dtype=np.float32) -> SkipNorm:
    return SkipNorm(ones(channels, dtype), zeros(channels, dtype),
                    np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


@dataclass
class BlockPatch:
    """How one block's skip coefficients are produced.

    ``source`` is one of:
      delta   -- per-sample coefficients from ``module``
      fixed   -- constant ``weights`` row, not trained
      learned -- trainable ``weights`` row, input-independent
      random  -- Uniform[0, 1] per sample per connection on every call
    ``connections`` indexes into the block's topology; connections not listed
    are absent (weight 0).
    """
    block: int
    connections: list[int]
    source: str
    module: DeltaModule | None = None
    weights: Tensor | None = None
    skip_norms: dict[int, SkipNorm] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        out = []
        if self.module is not None:
            out += self.module.parameters()
        if self.source == "learned":
            out.append(self.weights)
        for t in sorted(self.skip_norms):
            out += self.skip_norms[t].parameters()
        return out


@dataclass
class PatchState:
    task_id: str
    head: HeadSpec
    blocks: dict[int, BlockPatch] = field(default_factory=dict)
    variant: str = "delta"
    seed: int = 0
    rng: np.random.Generator | None = None

    def parameters(self) -> list[Tensor]:
        out = []
        for b in sorted(self.blocks):
            out += self.blocks[b].parameters()
        return out + self.head.parameters()

    @property
    def placement(self) -> tuple[int, ...]:
        return tuple(sorted(self.blocks))


def trainable_params(patch: PatchState) -> int:
    return sum(p.size for p in patch.parameters())


def new_patch(bb: Backbone, topo: SkipTopology, task_id: str, classes: int, rng: np.random.Generator,
              n_modules: int = 1, skip_bn: bool = False) -> PatchState:
    """Fresh head plus one module per block in the placement for ``n_modules``."""
    dtype = bb.head.weight.dtype
    head = attach_head(bb, classes, rng)
    patch = PatchState(task_id, head, variant="delta")
    for b in placement(n_modules):
        conns = list(range(len(topo.blocks[b])))
        module = make_delta_module(bb.input_shape[0], len(conns), rng, dtype)
        if DELTA_BIAS_INIT:
            pattern = base_pattern(topo, b)
            module.params["fc.bias"].data = (DELTA_BIAS_INIT * (2 * pattern - 1)).astype(dtype)
        bp = BlockPatch(b, conns, "delta", module=module)
        if skip_bn:
            bp.skip_norms = {t: make_skip_norm(bb.blocks[b].out_channels, dtype)
                             for t in range(1, bb.blocks[b].k + 1)}
        patch.blocks[b] = bp
    return patch


def base_pattern(topo: SkipTopology, b: int) -> np.ndarray:
    """1 on every residual (t-1 -> t) connection, 0 elsewhere."""
    return np.array([1.0 if c.is_residual else 0.0 for c in topo.blocks[b]])


def block_coefficients(bp: BlockPatch, x: Tensor, training: bool, rng: np.random.Generator | None) -> Tensor:
    if bp.source == "delta":
        return delta_forward(bp.module, x, training)
    if bp.source in ("fixed", "learned"):
        return bp.weights
    if bp.source == "random":
        if rng is None:
            raise RuntimeError("random coefficients need a generator")
        return Tensor(rng.uniform(0.0, 1.0, (x.shape[0], len(bp.connections))).astype(x.dtype))
    raise ConfigError(f"unknown coefficient source {bp.source!r}")


def patched_block(bb: Backbone, topo: SkipTopology, b: int, h: Tensor, bp: BlockPatch, lam: Tensor,
                  training: bool = False) -> Tensor:
    """Run block ``b`` with weighted skips; ``lam`` has one column per entry of ``bp.connections``."""
    block = bb.blocks[b]
    conns = topo.blocks[b]
    col = {j: i for i, j in enumerate(bp.connections)}
    feats = [h]
    n = lam.shape[0]
    for t in range(1, block.k + 1):
        out = stage(bb, b, t - 1, feats[t - 1], False)
        skip = None
        for j, c in topo.into(b, t):
            if j not in col:
                continue
            coeff = T.reshape(lam[:, col[j]], (n, 1, 1, 1))
            term = T.mul(coeff, shape_adapter(feats[c.src], c.pool, c.out_channels))
            skip = term if skip is None else T.add(skip, term)
        if skip is not None:
            norm = bp.skip_norms.get(t)
            if norm is not None:
                skip = T.batch_norm(skip, norm.gamma, norm.beta, norm.mean, norm.var,
                                    training=training, momentum=BN_MOMENTUM, eps=BN_EPS)
            out = T.add(out, skip)
        feats.append(out)
    return feats[-1]


def patched_features(bb: Backbone, topo: SkipTopology, patch: PatchState | None, x, training: bool = False,
                     lambdas: dict[int, Tensor] | None = None, record: dict | None = None) -> Tensor:
    """Pooled features with every patched block rerouted.

    ``lambdas`` overrides the coefficients of the given blocks (manual
    injection). ``record`` receives the coefficients actually used per block.
    """
    x = T.as_tensor(x)
    if patch is None or not patch.blocks:
        return features(bb, x)
    h = stem_forward(bb, x, False)
    for b, block in enumerate(bb.blocks):
        bp = patch.blocks.get(b)
        if bp is None:
            for i in range(block.k):
                h = sub_block(bb, b, i, h, False)
            continue
        if lambdas is not None and b in lambdas:
            lam = T.as_tensor(lambdas[b], like=h)
        else:
            lam = block_coefficients(bp, x, training, patch.rng)
        if record is not None:
            record[b] = lam.data
        h = patched_block(bb, topo, b, h, bp, lam, training)
    return T.global_avg_pool(h)


def forward_patched(bb: Backbone, topo: SkipTopology, patch: PatchState, x, training: bool = False,
                    lambdas: dict[int, Tensor] | None = None, record: dict | None = None) -> Tensor:
    if patch is None or patch.head is None:
        raise ValueError("forward_patched needs a patch with a classifier head")
    if any(b >= len(bb.blocks) for b in patch.blocks):
        raise ConfigError(f"patch placement {patch.placement} invalid for {len(bb.blocks)} blocks")
    return head_forward(patch.head, patched_features(bb, topo, patch, x, training, lambdas, record))


def forward_base_via_patched_model(bb: Backbone, patches: Iterable[PatchState], x) -> Tensor:
    """Base-task logits with every added skip dropped; patches are never read."""
    del patches
    return head_forward(bb.head, features(bb, x))


def lambda_statistics(bb: Backbone, topo: SkipTopology, patch: PatchState, images: np.ndarray,
                      batch_size: int = 256) -> list[dict]:
    """Mean and std of each connection's coefficient over a set of inputs (eval mode)."""
    collected: dict[int, list[np.ndarray]] = {}
    for start in range(0, len(images), batch_size):
        xb = T.Tensor(images[start:start + batch_size])
        for b, bp in sorted(patch.blocks.items()):
            lam = block_coefficients(bp, xb, False, patch.rng).data
            lam = np.broadcast_to(lam, (xb.shape[0], len(bp.connections)))
            collected.setdefault(b, []).append(np.asarray(lam, dtype=np.float64))
    rows = []
    for b, chunks in sorted(collected.items()):
        lam = np.concatenate(chunks)
        bp = patch.blocks[b]
        for col, j in enumerate(bp.connections):
            c = topo.blocks[b][j]
            rows.append({"block": b + 1, "connection_src": c.src, "connection_dst": c.dst,
                         "mean_lambda": float(lam[:, col].mean()), "std_lambda": float(lam[:, col].std())})
    return rows


LAMBDA_HEADER = ["block", "connection_src", "connection_dst", "mean_lambda", "std_lambda"]


def write_lambda_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LAMBDA_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in LAMBDA_HEADER})
