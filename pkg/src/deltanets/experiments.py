"""Desk-scale experiments shared by the scripts and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import TrainConfig
from .data import synth_tasks
from .delta import build_topology
from .engine import ablation_suite, patch_single, train_base
from .init import make_rng
from .nets import build_backbone


@dataclass
class DirectionalConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    preset: str = "tiny"
    image_size: int = 16
    classes: int = 5
    samples_per_class: int = 100
    test_per_class: int = 60
    base_epochs: int = 10
    patch_epochs: int = 20
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 64
    variants: tuple[tuple[str, int, bool], ...] = (("fc_only", 0, False), ("delta", 4, False),
                                                  ("random_lambda", 4, False))


@dataclass
class SeedResult:
    seed: int
    base_acc: float
    task_accs: dict[str, float] = field(default_factory=dict)
    wall_sec: float = 0.0


def _setup(cfg: DirectionalConfig, seed: int):
    (btr, bte), task = synth_tasks(seed, 2, cfg.classes, cfg.samples_per_class, cfg.image_size,
                                   test_per_class=cfg.test_per_class)
    bb = build_backbone(cfg.preset, btr.input_shape, cfg.classes, make_rng(seed, 1))
    base = train_base(bb, btr, bte, TrainConfig(epochs=cfg.base_epochs, optimizer=cfg.optimizer, lr=cfg.lr,
                                                batch_size=cfg.batch_size, seed=seed))
    return bb, build_topology(bb), task, bte, base.accuracy


def _train_cfg(cfg: DirectionalConfig, seed: int) -> TrainConfig:
    return TrainConfig(epochs=cfg.patch_epochs, optimizer=cfg.optimizer, lr=cfg.lr, batch_size=cfg.batch_size,
                       seed=seed)


def run_directional(cfg: DirectionalConfig, log=print) -> list[SeedResult]:
    """Base on one synthetic task, then each variant patched onto a disjoint one, per seed."""
    results = []
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        bb, topo, task, base_test, base_acc = _setup(cfg, seed)
        res = SeedResult(seed, base_acc)
        for variant, n, bn in cfg.variants:
            run = replace(_train_cfg(cfg, seed), variant=variant, n_modules=n, skip_bn=bn)
            _, rep = patch_single(bb, topo, task, base_test, run)
            res.task_accs[rep.variant] = rep.task_accs[0]
        res.wall_sec = time.perf_counter() - t0
        if log:
            log(f"seed {seed}: base {base_acc:.1f}  " +
                "  ".join(f"{k} {v:.1f}" for k, v in res.task_accs.items()) + f"  ({res.wall_sec:.0f}s)")
        results.append(res)
    return results


def mean_accuracies(results: list[SeedResult]) -> dict[str, float]:
    keys = results[0].task_accs
    return {k: float(np.mean([r.task_accs[k] for r in results])) for k in keys}


def run_ablation(cfg: DirectionalConfig, variants, log=print):
    """Every requested variant on the same base model and patch task, per seed."""
    out = []
    for seed in cfg.seeds:
        bb, topo, task, base_test, _ = _setup(cfg, seed)
        reports = ablation_suite(bb, topo, task, base_test, variants, _train_cfg(cfg, seed))
        if log:
            for r in reports:
                log(f"seed {seed}: {r.variant:24s} task {r.task_accs[0]:.1f}  hm {r.hm:.2f}")
        out.extend(reports)
    return out
