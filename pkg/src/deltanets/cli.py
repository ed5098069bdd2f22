"""Command-line runner.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 failed gradient check.
Every subcommand reads the same INI config (``--config``); ``--seed`` and the
``DPATCH_SEED`` environment variable override the seed it holds.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import engine as E
from .checkpoint import CheckpointError, load_backbone, load_patch, save_backbone, save_patch
from .config import ConfigError, RunConfig, apply_seed, dump_config, load_config
from .data import DataError, Dataset, load_idx, split_classes, standardize, synth_tasks
from .delta import build_topology, lambda_statistics, trainable_params, write_lambda_csv
from .gradcheck import composite_suite, op_suite
from .init import make_rng
from .nets import build_backbone, digest
from .variance import PropagationSpec, propagate_variance, write_variance_csv

log = logging.getLogger("deltanets")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_GRADCHECK = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; that code is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- data ----------------------------------------------------------------------------------------

def _parse_groups(spec: str) -> list[list[int]]:
    groups = []
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        members = []
        for tok in part.split(","):
            if "-" in tok:
                lo, hi = tok.split("-")
                members += list(range(int(lo), int(hi) + 1))
            else:
                members.append(int(tok))
        groups.append(members)
    if len(groups) < 2:
        raise ConfigError("class_groups needs a base group and at least one patch group")
    return groups


def load_tasks(cfg: RunConfig) -> list[tuple[Dataset, Dataset]]:
    """All (train, test) pairs; index 0 is the base task."""
    d = cfg.data
    if d.source == "synth":
        return synth_tasks(d.seed, d.task_count, d.classes_per_task, d.samples_per_class, d.image_size,
                           test_per_class=d.test_per_class, noise=d.noise)
    if d.source == "idx":
        paths = [d.train_images, d.train_labels, d.test_images, d.test_labels]
        if not all(paths):
            raise ConfigError("source = idx needs train/test image and label paths")
        try:
            train = load_idx(d.train_images, d.train_labels, split="train")
            test = load_idx(d.test_images, d.test_labels, split="test", class_count=train.class_count)
        except OSError as e:
            raise DataError(str(e)) from None
        try:
            groups = _parse_groups(d.class_groups)
        except ValueError as e:
            raise ConfigError(f"bad class_groups {d.class_groups!r}: {e}") from None
        train, test = standardize(train, test)
        return list(zip(split_classes(train, groups), split_classes(test, groups)))
    raise ConfigError(f"unknown data source {d.source!r}; use synth or idx")


def task_id(k: int) -> str:
    return f"task{k}"


# -- helpers -------------------------------------------------------------------------------------

def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        apply_seed(cfg, args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _backbone(args, out: Path):
    path = Path(args.backbone) if getattr(args, "backbone", None) else out / "backbone.dpck"
    if not path.exists():
        raise DataError(f"no backbone checkpoint at {path}; run train-base first")
    return load_backbone(path)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=E._jsonable))


def _patch_train_cfg(cfg: RunConfig, variant: str | None, n_modules: int | None):
    variant = variant or cfg.patch.variant
    n = cfg.patch.n_modules if n_modules is None else n_modules
    if variant in ("fc_only", "learnable_skip", "all_skips", "all_skips_learnable"):
        n = 0
    return replace(cfg.train, variant=variant, n_modules=n, skip_bn=cfg.patch.skip_bn).validate()


# -- subcommands ---------------------------------------------------------------------------------

def cmd_train_base(args) -> int:
    cfg = _resolve_config(args)
    out = _out(args)
    tasks = load_tasks(cfg)
    train, test = tasks[0]
    bb = build_backbone(cfg.backbone.preset, train.input_shape, train.class_count, make_rng(cfg.train.seed, 1))
    tcfg = replace(cfg.train, epochs=cfg.backbone.base_epochs).validate()
    res = E.train_base(bb, train, test, tcfg, lr=cfg.backbone.base_lr)
    save_backbone(out / "backbone.dpck", bb, base_accuracy=res.accuracy, seed=cfg.train.seed)
    dump_config(cfg, out / "config.ini")
    _write_json(out / "base.json", {"accuracy": res.accuracy, "losses": res.losses, "digest": digest(bb),
                                    "warning": res.warning, "seed": cfg.train.seed})
    print(f"base accuracy {res.accuracy:.2f}%  digest {digest(bb)[:16]}")
    return EXIT_OK


def cmd_patch(args) -> int:
    cfg = _resolve_config(args)
    tcfg = _patch_train_cfg(cfg, args.variant, args.n_modules)
    out = _out(args)
    scenario = args.scenario or cfg.patch.scenario
    indices = cfg.patch.task_indices()
    tasks = load_tasks(cfg)
    if not indices or min(indices) < 1 or max(indices) >= len(tasks):
        raise ConfigError(f"patch tasks {indices} must lie in 1..{len(tasks) - 1}")
    bb = _backbone(args, out)
    topo = build_topology(bb)
    base_test = tasks[0][1]
    chosen = [tasks[k] for k in indices]
    ids = [task_id(k) for k in indices]
    if scenario == "single":
        if len(indices) != 1:
            raise ConfigError("scenario single takes exactly one task")
        patch, report = E.patch_single(bb, topo, chosen[0], base_test, tcfg, ids[0])
        patches = {ids[0]: patch}
    elif scenario == "joint":
        patch, report = E.patch_joint(bb, topo, chosen, base_test, tcfg, ids)
        patches = {patch.task_id: patch}
    elif scenario == "sequential":
        patches, report = E.patch_sequential(bb, topo, chosen, base_test, tcfg, ids)
    else:
        raise ConfigError(f"unknown scenario {scenario!r}")
    for tid, p in patches.items():
        save_patch(out / f"patch_{tid}.dpck", p, scenario=scenario)
    E.write_reports_csv(out / "report.csv", [report], append=True)
    slug = report.variant.replace("(", "").replace(")", "").replace("+", "_")
    (out / f"report_{scenario}_{slug}.json").write_text(report.to_document())
    print(E.reports_csv_text([report]), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _out(args)
    tasks = load_tasks(cfg)
    bb = _backbone(args, out)
    if args.task_id == "base":
        acc, _ = E.base_accuracy(bb, tasks[0][1])
    else:
        path = out / f"patch_{args.task_id}.dpck"
        if not path.exists():
            raise E.RoutingError(f"no patch for task {args.task_id!r} at {path}")
        patch = load_patch(path)
        try:
            k = int(args.task_id.removeprefix("task"))
            test = tasks[k][1]
        except (ValueError, IndexError):
            raise ConfigError(f"task id {args.task_id!r} does not name a configured task") from None
        acc, _ = E.evaluate_task(bb, build_topology(bb), {args.task_id: patch}, args.task_id, test)
    _write_json(out / f"eval_{args.task_id}.json", {"task_id": args.task_id, "accuracy": acc})
    print(f"{args.task_id} accuracy {acc:.2f}%")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _out(args)
    tasks = load_tasks(cfg)
    bb = _backbone(args, out)
    k = cfg.patch.task_indices()[0]
    reports = E.ablation_suite(bb, build_topology(bb), tasks[k], tasks[0][1], E.TABLE_VARIANTS, cfg.train)
    E.write_reports_csv(out / "ablation.csv", reports)
    print(E.reports_csv_text(reports), end="")
    return EXIT_OK


def cmd_variance_sim(args) -> int:
    cfg = _resolve_config(args)
    out = _out(args)
    v = cfg.variance
    spec = PropagationSpec(depth=args.depth or v.depth, width=args.width or v.width,
                           skip_mode=args.skip_mode or v.skip_mode, bn=args.bn or v.bn,
                           samples=args.samples or v.samples, seed=v.seed, realization=v.realization)
    try:
        report = propagate_variance(spec)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    name = f"variance_{spec.skip_mode}{'_bn' if spec.bn else ''}.csv"
    write_variance_csv(out / name, report)
    print(f"{name}: cumulative ratio {report.cumulative_ratio:.4g} over {spec.depth} layers")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    out = _out(args)
    results = op_suite(trials=args.trials, seed=args.seed or 0)
    results.update(composite_suite(trials=args.composite_trials, seed=args.seed or 0))
    failed = []
    with open(out / "gradcheck.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["op", "trials", "max_rel_error", "passed"])
        for name, reps in results.items():
            worst = max(r.max_rel_error for r in reps)
            ok = all(r.passed for r in reps)
            w.writerow([name, len(reps), f"{worst:.3e}", ok])
            print(f"{'ok  ' if ok else 'FAIL'} {name:28s} {worst:.3e}")
            if not ok:
                failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_dump_lambdas(args) -> int:
    cfg = _resolve_config(args)
    out = _out(args)
    tasks = load_tasks(cfg)
    bb = _backbone(args, out)
    path = out / f"patch_{args.task_id}.dpck"
    if not path.exists():
        raise E.RoutingError(f"no patch for task {args.task_id!r} at {path}")
    patch = load_patch(path)
    try:
        k = int(args.task_id.removeprefix("task"))
        images = tasks[k][1].images
    except (ValueError, IndexError):
        raise ConfigError(f"task id {args.task_id!r} does not name a configured task") from None
    rows = lambda_statistics(bb, build_topology(bb), patch, images)
    write_lambda_csv(out / f"lambdas_{args.task_id}.csv", rows)
    print(f"{len(rows)} connections written, {trainable_params(patch)} trainable parameters")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deltanets", description="Input-conditioned skip-connection patching of frozen CNNs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, backbone=True):
        sp.add_argument("--config", metavar="PATH", help="INI run configuration")
        sp.add_argument("--seed", type=int, metavar="N", help="overrides the configured seed")
        sp.add_argument("--out", metavar="DIR", default="runs", help="output directory (default: runs)")
        if backbone:
            sp.add_argument("--backbone", metavar="PATH", help="backbone checkpoint (default: OUT/backbone.dpck)")
        return sp

    sp = common(sub.add_parser("train-base", help="train and freeze the base network"), backbone=False)
    sp.set_defaults(func=cmd_train_base)

    sp = common(sub.add_parser("patch", help="train a patch for one or more new tasks"))
    sp.add_argument("--scenario", choices=["single", "joint", "sequential"])
    sp.add_argument("--variant", choices=list(E.VARIANTS))
    sp.add_argument("--n-modules", type=int, choices=[1, 2, 4])
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_patch)

    sp = common(sub.add_parser("eval", help="accuracy of the base model or a stored patch"))
    sp.add_argument("--task-id", required=True, help="base or taskK")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("ablate", help="run every skip-topology variant on one task"))
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = common(sub.add_parser("variance-sim", help="Monte-Carlo variance propagation"), backbone=False)
    sp.add_argument("--skip-mode", choices=["none", "residual", "all_pairs"])
    sp.add_argument("--depth", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--samples", type=int)
    sp.add_argument("--bn", action="store_true")
    sp.set_defaults(func=cmd_variance_sim)

    sp = common(sub.add_parser("gradcheck", help="finite-difference check of every op"), backbone=False)
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--composite-trials", type=int, default=50)
    sp.set_defaults(func=cmd_gradcheck)

    sp = common(sub.add_parser("dump-lambdas", help="per-connection coefficient statistics"))
    sp.add_argument("--task-id", required=True)
    sp.set_defaults(func=cmd_dump_lambdas)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, E.RoutingError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
