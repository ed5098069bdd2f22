"""Training and evaluation harness: base training, the three patching scenarios,
the ablation variants and the full-copy interpolation baseline."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import VARIANTS, TrainConfig
from .data import Dataset
from .delta import (BlockPatch, PatchState, SkipTopology, forward_patched, make_skip_norm, new_patch,
                    placement, trainable_params)
from .init import make_rng, ones
from .nets import (Backbone, HeadSpec, attach_head, backbone_params, clone_backbone, features, forward_base,
                   head_forward)
from .optim import SGD, Adam, ConfigError
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class RoutingError(KeyError):
    """No patch is registered under the requested task id."""


# -- metrics -----------------------------------------------------------------------------------

def harmonic_mean(accs: Sequence[float]) -> float:
    accs = list(accs)
    if not accs:
        raise ValueError("harmonic_mean of an empty list")
    if any(a < 0 or a > 100 for a in accs):
        raise ValueError(f"accuracies must lie in [0, 100], got {accs}")
    if any(a == 0 for a in accs):
        return 0.0
    return len(accs) / sum(1.0 / a for a in accs)


def arithmetic_mean(accs: Sequence[float]) -> float:
    accs = list(accs)
    if not accs:
        raise ValueError("arithmetic_mean of an empty list")
    return sum(accs) / len(accs)


def accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float(np.mean(preds == labels)) if len(labels) else 0.0


# -- reports -----------------------------------------------------------------------------------

CSV_HEADER = ["scenario", "variant", "n_modules", "seed", "base_acc", "task_accs", "hm", "mean",
              "trainable_params", "total_params", "wall_sec"]


@dataclass
class RunReport:
    scenario: str
    variant: str
    n_modules: int
    seed: int
    base_acc: float
    task_ids: list[str]
    task_accs: list[float]
    hm: float
    mean: float
    trainable_params: int
    total_params: int
    wall_sec: float
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    predictions: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    labels: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def csv_row(self) -> dict:
        return {
            "scenario": self.scenario, "variant": self.variant, "n_modules": self.n_modules, "seed": self.seed,
            "base_acc": f"{self.base_acc:.4f}", "task_accs": ";".join(f"{a:.4f}" for a in self.task_accs),
            "hm": f"{self.hm:.4f}", "mean": f"{self.mean:.4f}", "trainable_params": self.trainable_params,
            "total_params": self.total_params, "wall_sec": f"{self.wall_sec:.3f}",
        }

    def to_document(self) -> str:
        doc = {k: v for k, v in asdict(self).items() if k not in ("predictions", "labels")}
        doc["tasks"] = {tid: {"accuracy": acc} for tid, acc in zip(self.task_ids, self.task_accs)}
        return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable)

    def recompute(self) -> tuple[float, list[float]]:
        """(base accuracy, per-task accuracies) recomputed from stored predictions."""
        base = accuracy(self.predictions["base"], self.labels["base"])
        return base, [accuracy(self.predictions[t], self.labels[t]) for t in self.task_ids]


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_reports_csv(path, reports: Sequence[RunReport], append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_HEADER)
        if fresh:
            w.writeheader()
        for r in reports:
            w.writerow(r.csv_row())


def reports_csv_text(reports: Sequence[RunReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_HEADER)
    w.writeheader()
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def variant_label(cfg: TrainConfig) -> str:
    base = f"delta({cfg.n_modules})" if cfg.variant == "delta" else cfg.variant
    if cfg.variant == "random_lambda":
        base = f"random_lambda({cfg.n_modules})"
    return base + ("+bn" if cfg.skip_bn else "")


# -- generic loops -----------------------------------------------------------------------------

def predict(forward: Callable[[Tensor], Tensor], images: np.ndarray, batch_size: int = 256,
            class_slice: tuple[int, int] | None = None) -> np.ndarray:
    """Argmax predictions; ``class_slice`` restricts the argmax to logits [lo, hi)."""
    preds = []
    lo, hi = class_slice if class_slice is not None else (0, None)
    for start in range(0, len(images), batch_size):
        logits = forward(Tensor(images[start:start + batch_size])).data
        preds.append(logits[:, lo:hi].argmax(axis=1) + lo)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(forward: Callable[[Tensor], Tensor], ds: Dataset, batch_size: int = 256,
             label_offset: int = 0, class_slice: tuple[int, int] | None = None) -> tuple[float, np.ndarray]:
    preds = predict(forward, ds.images, batch_size, class_slice)
    return accuracy(preds, ds.labels + label_offset), preds


def _lr_at(cfg: TrainConfig, lr0: float, epoch: int) -> float:
    if cfg.schedule == "cosine":
        return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
    return lr0


def fit(params: list[Tensor], forward: Callable[[Tensor], Tensor], train: Dataset, cfg: TrainConfig,
        rng: np.random.Generator, lr: float | None = None, label_offset: int = 0,
        on_epoch: Callable[[int], None] | None = None) -> list[float]:
    """Minibatch cross-entropy training of ``params``; returns mean loss per epoch."""
    lr0 = cfg.lr if lr is None else lr
    if cfg.optimizer == "sgd":
        opt = SGD(params, lr=lr0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    else:
        opt = Adam(params, lr=lr0, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)
    history = []
    n = len(train)
    for epoch in range(cfg.epochs):
        lr_e = _lr_at(cfg, lr0, epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            with Tape() as tape:
                loss = T.softmax_cross_entropy(forward(Tensor(train.images[idx])), train.labels[idx] + label_offset)
                tape.backward(loss)
            opt.step(lr_e)
            total += float(loss.data) * len(idx)
        history.append(total / max(n, 1))
        if on_epoch is not None:
            on_epoch(epoch)
    opt.zero_grad()
    return history


# -- base model --------------------------------------------------------------------------------

@dataclass
class BaseResult:
    backbone: Backbone
    accuracy: float
    losses: list[float]
    warning: str | None = None


def train_base(bb: Backbone, train: Dataset, test: Dataset, cfg: TrainConfig, lr: float | None = None) -> BaseResult:
    """Train every backbone parameter end to end, then freeze."""
    if bb.frozen:
        raise RuntimeError("backbone is already frozen")
    if train.class_count != bb.head.classes:
        raise ConfigError(f"dataset has {train.class_count} classes, base head has {bb.head.classes}")
    rng = make_rng(cfg.seed, 101)
    losses = fit(bb.parameters(), lambda x: forward_base(bb, x, training=True), train, cfg, rng, lr=lr)
    bb.freeze()
    acc, _ = evaluate(lambda x: forward_base(bb, x), test)
    note = None
    chance = 100.0 / train.class_count
    if acc <= chance + 5.0:
        note = f"base model did not converge: accuracy {acc:.2f}% vs chance {chance:.2f}%"
        warnings.warn(note)
    return BaseResult(bb, acc, losses, note)


# -- variants ----------------------------------------------------------------------------------

def build_variant(bb: Backbone, topo: SkipTopology, task_id: str, classes: int, cfg: TrainConfig,
                  rng: np.random.Generator) -> PatchState:
    """A fresh PatchState for the configured variant."""
    cfg.validate()
    dtype = bb.head.weight.dtype
    if cfg.variant == "delta":
        patch = new_patch(bb, topo, task_id, classes, rng, cfg.n_modules, cfg.skip_bn)
    elif cfg.variant == "fc_only":
        patch = PatchState(task_id, attach_head(bb, classes, rng), variant="fc_only")
    else:
        patch = PatchState(task_id, attach_head(bb, classes, rng), variant=cfg.variant)
        blocks = placement(cfg.n_modules) if cfg.variant == "random_lambda" else range(len(bb.blocks))
        for b in blocks:
            conns = topo.blocks[b]
            if cfg.variant == "learnable_skip":
                idx = [j for j, c in enumerate(conns) if c.is_residual]
            else:
                idx = list(range(len(conns)))
            if cfg.variant == "random_lambda":
                bp = BlockPatch(b, idx, "random")
            else:
                learned = cfg.variant in ("learnable_skip", "all_skips_learnable")
                w = ones((1, len(idx)), dtype, requires_grad=learned)
                bp = BlockPatch(b, idx, "learned" if learned else "fixed", weights=w)
            if cfg.skip_bn:
                bp.skip_norms = {t: make_skip_norm(bb.blocks[b].out_channels, dtype)
                                 for t in range(1, bb.blocks[b].k + 1)}
            patch.blocks[b] = bp
        if cfg.variant == "random_lambda":
            patch.rng = make_rng(cfg.seed, 7)
    patch.variant = variant_label(cfg)
    patch.seed = cfg.seed
    return patch


def _check_frozen(bb: Backbone) -> None:
    if not bb.frozen:
        raise RuntimeError("patching requires a frozen backbone")


def _patch_forward(bb, topo, patch, training):
    return lambda x: forward_patched(bb, topo, patch, x, training=training)


def train_patch(bb: Backbone, topo: SkipTopology, patch: PatchState, train: Dataset, cfg: TrainConfig,
                stream: int = 0, label_offset: int = 0) -> list[float]:
    """Algorithm-1 loop: only the patch's modules, skip weights and head receive updates."""
    _check_frozen(bb)
    rng = make_rng(cfg.seed, 202, stream)
    return fit(patch.parameters(), _patch_forward(bb, topo, patch, True), train, cfg, rng,
               label_offset=label_offset)


def _report(scenario, cfg, base_acc, ids, accs, hm, mean, trainable, total, t0, preds, labels, **extra):
    return RunReport(scenario, variant_label(cfg), cfg.n_modules, cfg.seed, base_acc, list(ids), list(accs),
                     hm, mean, trainable, total, time.perf_counter() - t0, config=asdict(cfg), extra=extra,
                     predictions=preds, labels=labels)


def base_accuracy(bb: Backbone, base_test: Dataset) -> tuple[float, np.ndarray]:
    return evaluate(lambda x: forward_base(bb, x), base_test)


def patch_single(bb: Backbone, topo: SkipTopology, task: tuple[Dataset, Dataset], base_test: Dataset,
                 cfg: TrainConfig, task_id: str = "task1") -> tuple[PatchState, RunReport]:
    _check_frozen(bb)
    t0 = time.perf_counter()
    train, test = task
    patch = build_variant(bb, topo, task_id, train.class_count, cfg, make_rng(cfg.seed, 303))
    losses = train_patch(bb, topo, patch, train, cfg)
    acc, preds = evaluate(_patch_forward(bb, topo, patch, False), test)
    base_acc, base_preds = base_accuracy(bb, base_test)
    trainable = trainable_params(patch)
    return patch, _report("single", cfg, base_acc, [task_id], [acc], harmonic_mean([base_acc, acc]),
                          arithmetic_mean([base_acc, acc]), trainable, backbone_params(bb) + trainable, t0,
                          {"base": base_preds, task_id: preds}, {"base": base_test.labels, task_id: test.labels},
                          losses=losses)


def concat_tasks(tasks: Sequence[tuple[Dataset, Dataset]], ids: Sequence[str]) -> tuple[Dataset, list[int]]:
    """Joint training set over the concatenated label space, plus each task's label offset."""
    names = [t[0].name for t in tasks]
    if len(set(names)) != len(names) or len(set(ids)) != len(ids):
        raise ConfigError(f"joint patching needs distinct datasets, got {names}")
    offsets, total = [], 0
    for tr, _ in tasks:
        offsets.append(total)
        total += tr.class_count
    images = np.concatenate([tr.images for tr, _ in tasks])
    labels = np.concatenate([tr.labels + off for (tr, _), off in zip(tasks, offsets)])
    return Dataset("joint(" + ",".join(names) + ")", "train", images, labels, total), offsets


def patch_joint(bb: Backbone, topo: SkipTopology, tasks: Sequence[tuple[Dataset, Dataset]], base_test: Dataset,
                cfg: TrainConfig, ids: Sequence[str] | None = None) -> tuple[PatchState, RunReport]:
    """One shared set of modules and a single head over every task's classes."""
    _check_frozen(bb)
    if len(tasks) < 2:
        raise ConfigError("joint patching needs at least two tasks")
    ids = list(ids or [f"task{i + 1}" for i in range(len(tasks))])
    t0 = time.perf_counter()
    joint, offsets = concat_tasks(tasks, ids)
    patch = build_variant(bb, topo, "+".join(ids), joint.class_count, cfg, make_rng(cfg.seed, 303))
    losses = train_patch(bb, topo, patch, joint, cfg)
    fwd = _patch_forward(bb, topo, patch, False)
    accs, preds, labels = [], {}, {}
    for tid, (_, test), off in zip(ids, tasks, offsets):
        # task identity is known at test time, so each task is scored within its own classes
        acc, p = evaluate(fwd, test, label_offset=off, class_slice=(off, off + test.class_count))
        accs.append(acc)
        preds[tid], labels[tid] = p, test.labels + off
    base_acc, preds["base"] = base_accuracy(bb, base_test)
    labels["base"] = base_test.labels
    trainable = trainable_params(patch)
    return patch, _report("joint", cfg, base_acc, ids, accs, harmonic_mean([base_acc] + accs),
                          arithmetic_mean([base_acc] + accs), trainable, backbone_params(bb) + trainable, t0,
                          preds, labels, offsets=offsets, losses=losses)


def route(patches: dict[str, PatchState], task_id: str) -> PatchState:
    try:
        return patches[task_id]
    except KeyError:
        raise RoutingError(f"no patch registered for task {task_id!r}; known: {sorted(patches)}") from None


def evaluate_task(bb: Backbone, topo: SkipTopology, patches: dict[str, PatchState], task_id: str,
                  test: Dataset) -> tuple[float, np.ndarray]:
    """Task-id routing: pick the task's own patch (or the base head for ``"base"``)."""
    if task_id == "base":
        return base_accuracy(bb, test)
    return evaluate(_patch_forward(bb, topo, route(patches, task_id), False), test)


def patch_sequential(bb: Backbone, topo: SkipTopology, tasks: Sequence[tuple[Dataset, Dataset]],
                     base_test: Dataset, cfg: TrainConfig,
                     ids: Sequence[str] | None = None) -> tuple[dict[str, PatchState], RunReport]:
    """One new PatchState per arriving task; earlier states are never touched again."""
    _check_frozen(bb)
    ids = list(ids or [f"task{i + 1}" for i in range(len(tasks))])
    if len(set(ids)) != len(ids):
        raise ConfigError("task ids must be distinct")
    t0 = time.perf_counter()
    patches: dict[str, PatchState] = {}
    immediate: dict[str, float] = {}
    for k, (tid, (train, test)) in enumerate(zip(ids, tasks)):
        patch = build_variant(bb, topo, tid, train.class_count, cfg, make_rng(cfg.seed, 303, k))
        train_patch(bb, topo, patch, train, cfg, stream=k)
        patches[tid] = patch
        immediate[tid], _ = evaluate_task(bb, topo, patches, tid, test)
    accs, preds, labels = [], {}, {}
    for tid, (_, test) in zip(ids, tasks):
        acc, preds[tid] = evaluate_task(bb, topo, patches, tid, test)
        labels[tid] = test.labels
        accs.append(acc)
    base_acc, preds["base"] = base_accuracy(bb, base_test)
    labels["base"] = base_test.labels
    trainable = sum(trainable_params(p) for p in patches.values())
    return patches, _report("sequential", cfg, base_acc, ids, accs, harmonic_mean([base_acc] + accs),
                            arithmetic_mean([base_acc] + accs), trainable, backbone_params(bb) + trainable, t0,
                            preds, labels, immediate=immediate)


def ablation_suite(bb: Backbone, topo: SkipTopology, task: tuple[Dataset, Dataset], base_test: Dataset,
                   variants: Sequence[tuple[str, int, bool]], cfg: TrainConfig) -> list[RunReport]:
    """One single-task run per (variant, n_modules, skip_bn), sharing seed and data."""
    if not variants:
        raise ConfigError("ablation_suite needs at least one variant")
    reports = []
    for variant, n, bn in variants:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        run_cfg = TrainConfig(**{**asdict(cfg), "variant": variant, "n_modules": n, "skip_bn": bn})
        _, report = patch_single(bb, topo, task, base_test, run_cfg)
        reports.append(report)
    return reports


TABLE_VARIANTS = [
    ("fc_only", 0, False),
    ("learnable_skip", 0, False),
    ("all_skips_learnable", 0, False),
    ("all_skips_learnable", 0, True),
    ("all_skips", 0, False),
    ("all_skips", 0, True),
    ("random_lambda", 4, True),
    ("delta", 4, False),
]


# -- full fine-tune + weight interpolation baseline -------------------------------------------

def interpolate_backbone(base: Backbone, tuned: Backbone, alpha: float) -> Backbone:
    """theta_alpha = (1 - alpha) * theta_base + alpha * theta_tuned, BN statistics included."""
    if alpha == 0.0:
        return clone_backbone(base, requires_grad=False)
    if alpha == 1.0:
        return clone_backbone(tuned, requires_grad=False)
    out = clone_backbone(base, requires_grad=False)
    for k, t in out.params.items():
        t.data = ((1.0 - alpha) * base.params[k].data + alpha * tuned.params[k].data).astype(t.dtype)
    for k in out.buffers:
        out.buffers[k] = ((1.0 - alpha) * base.buffers[k] + alpha * tuned.buffers[k]).astype(base.buffers[k].dtype)
    for name in ("weight", "bias"):
        mixed = (1.0 - alpha) * getattr(base.head, name).data + alpha * getattr(tuned.head, name).data
        getattr(out.head, name).data = mixed.astype(getattr(base.head, name).dtype)
    return out


@dataclass
class InterpolationResult:
    reports: list[RunReport]
    best_alpha: float
    tuned: Backbone
    head: HeadSpec


def interpolation_baseline(bb: Backbone, task: tuple[Dataset, Dataset], base_test: Dataset,
                           alpha_grid: Sequence[float], cfg: TrainConfig, task_id: str = "task1") -> InterpolationResult:
    """Fine-tune a private copy of the whole network, then sweep the interpolation grid.

    The patch-task head is trained together with the copy and is used
    unchanged at every alpha; the base head is whatever the interpolated
    weights give (it is not trained, so it equals the original).
    """
    alphas = [float(a) for a in alpha_grid]
    if not alphas or min(alphas) < 0 or max(alphas) > 1 or 0.0 not in alphas or 1.0 not in alphas:
        raise ConfigError("alpha_grid must lie in [0, 1] and include both 0 and 1")
    _check_frozen(bb)
    t0 = time.perf_counter()
    train, test = task
    tuned = clone_backbone(bb, requires_grad=True)
    tuned.head.weight.requires_grad = False
    tuned.head.bias.requires_grad = False
    head = attach_head(tuned, train.class_count, make_rng(cfg.seed, 303))
    params = list(tuned.params.values()) + head.parameters()
    fit(params, lambda x: head_forward(head, features(tuned, x, training=True)), train, cfg, make_rng(cfg.seed, 202))
    tuned.freeze()
    head.weight.requires_grad = head.bias.requires_grad = False
    n_params = backbone_params(tuned) + head.num_params()
    reports = []
    for a in alphas:
        model = interpolate_backbone(bb, tuned, a)
        base_acc, bp = evaluate(lambda x: forward_base(model, x), base_test)
        acc, tp = evaluate(lambda x: head_forward(head, features(model, x)), test)
        reports.append(RunReport("single", "interpolation", 0, cfg.seed, base_acc, [task_id], [acc],
                                 harmonic_mean([base_acc, acc]), arithmetic_mean([base_acc, acc]),
                                 n_params, n_params, time.perf_counter() - t0, config=asdict(cfg),
                                 extra={"alpha": a}, predictions={"base": bp, task_id: tp},
                                 labels={"base": base_test.labels, task_id: test.labels}))
    best = max(range(len(reports)), key=lambda i: reports[i].hm)
    return InterpolationResult(reports, alphas[best], tuned, head)
