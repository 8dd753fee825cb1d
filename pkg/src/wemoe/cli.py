"""Command-line surface: pretrain -> finetune -> taskvec -> merge -> tta ->
eval -> analyze / landscape.

Stages communicate through checkpoints whose manifests carry the task
descriptors, so later stages regenerate the exact datasets deterministically.
Completed stages are skipped when rerun with identical inputs (digest match),
making every stage a byte-wise no-op on repetition.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis as A
from . import tensor as T
from .bench import (BenchConfig, METHODS, evaluate_accuracy, finetune,
                    prepare_suite, pretrain, run_merge_benchmark)
from .checkpoint import read_checkpoint, write_checkpoint
from .config import parse_config_file, resolve
from .data import (CORRUPTION_KINDS, Corruption, SyntheticTaskSpec,
                   generate_task_dataset)
from .errors import (CheckpointError, ConfigError, ContractError,
                     NumericalError, ShapeError, StructureError, WemoeError)
from .merging import (MergeConfig, MergedModel, merge_task_arithmetic,
                      merge_weight_average, upscale_to_wemoe)
from .taskvec import TaskVector, compute_task_vector, magnitude_quantiles
from .tensor import Tensor
from .tree import ParamTree
from .tta import TTAConfig, tta_train
from .vit import DESK, TaskHead, ViTConfig, config_with_tasks

_DATA_ERRORS = (CheckpointError, ConfigError, ContractError, ShapeError,
                StructureError, FileNotFoundError, IsADirectoryError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_global_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--precision", choices=["f32", "f64"], default=None)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", default=None, help="output directory (default: out)")


def build_parser() -> _Parser:
    parser = _Parser(prog="wemoe", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("pretrain", help="train the shared base encoder")
    _add_global_flags(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--train-size", type=int, default=None)

    p = sub.add_parser("finetune", help="fine-tune one expert from the base")
    _add_global_flags(p)
    p.add_argument("--base", required=True)
    p.add_argument("--task", required=True, help="task family name")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--train-size", type=int, default=None)
    p.add_argument("--test-size", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--task-seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)

    p = sub.add_parser("taskvec", help="expert minus base delta")
    _add_global_flags(p)
    p.add_argument("--base", required=True)
    p.add_argument("--expert", required=True)

    p = sub.add_parser("merge", help="build a merged model")
    _add_global_flags(p)
    p.add_argument("--base", required=True)
    p.add_argument("--experts", required=True, help="comma list of expert checkpoints")
    p.add_argument("--taskvecs", default=None, help="comma list of taskvec checkpoints")
    p.add_argument("--method", choices=["wemoe", "task-arithmetic", "weight-average"],
                   default="wemoe")
    p.add_argument("--strategy", choices=["mlp-only", "att-mlp", "entire-block"], default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--lfc", type=int, choices=[0, 1, 2], default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--shared-router", action="store_true", default=None)

    p = sub.add_parser("tta", help="adapt routers on unlabeled test data")
    _add_global_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)

    p = sub.add_parser("eval", help="run a benchmark protocol")
    _add_global_flags(p)
    p.add_argument("--protocol", choices=["standard", "generalization", "robustness"],
                   default="standard")
    p.add_argument("--methods", default=None, help="comma list; default all")
    p.add_argument("--tasks", default=None, help="comma list of task families")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--train-size", type=int, default=None)
    p.add_argument("--test-size", type=int, default=None)
    p.add_argument("--seen", type=int, default=None, help="seen-task count (generalization)")
    p.add_argument("--corruptions", default=None, help="kind:severity comma list")
    p.add_argument("--finetune-epochs", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--lfc", type=int, choices=[0, 1, 2], default=None)
    p.add_argument("--steps", type=int, default=None, help="TTA steps")
    p.add_argument("--lr", type=float, default=None, help="TTA learning rate")
    p.add_argument("--batch", type=int, default=None, help="TTA batch per task")

    p = sub.add_parser("analyze", help="diagnostics over checkpoints")
    _add_global_flags(p)
    p.add_argument("--drift", action="store_true")
    p.add_argument("--magnitudes", action="store_true")
    p.add_argument("--routing", action="store_true")
    p.add_argument("--firstchoice", action="store_true")
    p.add_argument("--base", default=None)
    p.add_argument("--experts", default=None, help="comma list (drift)")
    p.add_argument("--expert", default=None, help="single expert (magnitudes)")
    p.add_argument("--model", default=None, help="merged checkpoint (routing/firstchoice)")
    p.add_argument("--layers", default=None, help="comma list of layer indices")

    p = sub.add_parser("landscape", help="two-task interpolation loss grid")
    _add_global_flags(p)
    p.add_argument("--base", required=True)
    p.add_argument("--expert1", required=True)
    p.add_argument("--expert2", required=True)
    p.add_argument("--grid-min", type=float, default=-1.0)
    p.add_argument("--grid-max", type=float, default=1.0)
    p.add_argument("--grid-step", type=float, default=0.25)

    return parser


# ---------------------------------------------------------------------------
# shared helpers


def _out_dir(args) -> str:
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    return out


def _digest(paths: list[str], params: dict) -> str:
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as f:
            h.update(hashlib.sha256(f.read()).digest())
    h.update(repr(sorted(params.items())).encode())
    return h.hexdigest()


def _up_to_date(path: str, digest: str) -> bool:
    if not os.path.exists(path):
        return False
    from .checkpoint import read_manifest
    try:
        manifest = read_manifest(path)
    except CheckpointError:
        return False
    return manifest.get("inputs_digest") == digest


def _write_csv(path: str, rows: list[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        csv.writer(f).writerows(rows)


def _task_manifest(spec: SyntheticTaskSpec, prefix: str) -> dict[str, str]:
    return {
        f"{prefix}.family": spec.family,
        f"{prefix}.classes": str(spec.classes),
        f"{prefix}.train_size": str(spec.train_size),
        f"{prefix}.test_size": str(spec.test_size),
        f"{prefix}.noise": repr(spec.noise),
        f"{prefix}.seed": str(spec.seed),
        f"{prefix}.image_size": str(spec.image_size),
    }


def _spec_from_manifest(m: dict[str, str], prefix: str) -> SyntheticTaskSpec:
    try:
        return SyntheticTaskSpec(
            family=m[f"{prefix}.family"],
            classes=int(m[f"{prefix}.classes"]),
            train_size=int(m[f"{prefix}.train_size"]),
            test_size=int(m[f"{prefix}.test_size"]),
            noise=float(m[f"{prefix}.noise"]),
            seed=int(m[f"{prefix}.seed"]),
            image_size=int(m[f"{prefix}.image_size"]),
        )
    except KeyError as exc:
        raise ContractError(f"checkpoint manifest lacks task descriptor {exc}") from exc


def _config_from_tree_manifest(manifest: dict[str, str]) -> ViTConfig:
    from .checkpoint import _config_from_manifest
    return _config_from_manifest(manifest)


def _load_tree(path: str) -> tuple[ParamTree, dict[str, str]]:
    obj, manifest = read_checkpoint(path)
    if not isinstance(obj, dict):
        raise ContractError(f"{path} is not a plain tree checkpoint")
    return obj, manifest


def _split_expert(tree: ParamTree, manifest: dict[str, str], task_id: int) -> tuple[ParamTree, TaskHead]:
    encoder = {k: v for k, v in tree.items() if not k.startswith("head.")}
    if "head.w" not in tree or "head.b" not in tree:
        raise ContractError("expert checkpoint has no head tensors")
    head = TaskHead(task_id, tree["head.w"], tree["head.b"])
    return encoder, head


# ---------------------------------------------------------------------------
# stages


def _stage_pretrain(args, cfgfile) -> int:
    out = _out_dir(args)
    seed = resolve(args.seed, cfgfile, "seed", 0, int)
    epochs = resolve(args.epochs, cfgfile, "pretrain_epochs", 6, int)
    train_size = resolve(args.train_size, cfgfile, "pretrain_size", 768, int)
    path = os.path.join(out, "pretrained.wemc")
    digest = _digest([], {"seed": seed, "epochs": epochs, "train_size": train_size})
    if _up_to_date(path, digest):
        print(f"pretrain: {path} up to date")
        return 0
    cfg = BenchConfig(vit=DESK, seed=seed, pretrain_epochs=epochs, pretrain_size=train_size)
    config = config_with_tasks(DESK, (6,))
    tree = pretrain(config, cfg)
    write_checkpoint(tree, path, config=config,
                     extra_manifest={"stage": "pretrain", "seed": str(seed),
                                     "inputs_digest": digest})
    print(f"pretrain: wrote {path}")
    return 0


def _stage_finetune(args, cfgfile) -> int:
    out = _out_dir(args)
    seed = resolve(args.seed, cfgfile, "seed", 0, int)
    epochs = resolve(args.epochs, cfgfile, "finetune_epochs", 10, int)
    lr = resolve(args.lr, cfgfile, "finetune_lr", 1e-3, float)
    weight_decay = resolve(args.weight_decay, cfgfile, "weight_decay", 0.05, float)
    spec = SyntheticTaskSpec(
        family=args.task,
        classes=resolve(args.classes, cfgfile, "classes", 4, int),
        train_size=resolve(args.train_size, cfgfile, "train_size", 512, int),
        test_size=resolve(args.test_size, cfgfile, "test_size", 256, int),
        noise=resolve(args.noise, cfgfile, "noise", 0.08, float),
        seed=resolve(args.task_seed, cfgfile, "task_seed", 0, int),
    )
    path = os.path.join(out, f"expert-{spec.family}.wemc")
    params = {"spec": dataclasses.astuple(spec), "epochs": epochs, "lr": lr, "seed": seed,
              "weight_decay": weight_decay}
    digest = _digest([args.base], params)
    if _up_to_date(path, digest):
        print(f"finetune: {path} up to date")
        return 0
    base, base_manifest = _load_tree(args.base)
    config = config_with_tasks(_config_from_tree_manifest(base_manifest), (spec.classes,))
    ds = generate_task_dataset(spec)
    with threadpool_limits(limits=1, user_api="blas"):
        tree, head = finetune(base, ds, config, epochs, lr, seed=seed,
                              weight_decay=weight_decay)
    blob = dict(tree)
    blob["head.w"] = head.w
    blob["head.b"] = head.b
    manifest = {"stage": "finetune", "seed": str(seed), "inputs_digest": digest}
    manifest.update(_task_manifest(spec, "task"))
    write_checkpoint(blob, path, config=config, extra_manifest=manifest)
    print(f"finetune: wrote {path}")
    return 0


def _stage_taskvec(args, cfgfile) -> int:
    out = _out_dir(args)
    digest = _digest([args.base, args.expert], {})
    base, _ = _load_tree(args.base)
    expert, expert_manifest = _load_tree(args.expert)
    family = expert_manifest.get("task.family", "task")
    path = os.path.join(out, f"taskvec-{family}.wemc")
    if _up_to_date(path, digest):
        print(f"taskvec: {path} up to date")
        return 0
    encoder = {k: v for k, v in expert.items() if k in base}
    tv = compute_task_vector(encoder, base)
    manifest = {k: v for k, v in expert_manifest.items() if k.startswith("task.")}
    manifest.update({"stage": "taskvec", "inputs_digest": digest})
    write_checkpoint(tv, path, extra_manifest=manifest)
    print(f"taskvec: wrote {path}")
    return 0


def _stage_merge(args, cfgfile) -> int:
    out = _out_dir(args)
    seed = resolve(args.seed, cfgfile, "seed", 0, int)
    lam = resolve(args.lam, cfgfile, "lambda", 0.3, float)
    lfc = resolve(args.lfc, cfgfile, "l_fc", 2, int)
    rho = resolve(args.rho, cfgfile, "rho", 0.0, float)
    shared = resolve(args.shared_router, cfgfile, "shared_router", False, bool)
    strategy = resolve(args.strategy, cfgfile, "strategy", "mlp-only", str)
    expert_paths = [p for p in args.experts.split(",") if p]
    tv_paths = [p for p in (args.taskvecs or "").split(",") if p]

    path = os.path.join(out, f"merged-{args.method}.wemc")
    params = {"method": args.method, "lam": lam, "lfc": lfc, "rho": rho,
              "shared": shared, "strategy": strategy, "seed": seed}
    digest = _digest([args.base] + expert_paths + tv_paths, params)
    if _up_to_date(path, digest):
        print(f"merge: {path} up to date")
        return 0

    base, base_manifest = _load_tree(args.base)
    experts = []
    heads = []
    specs = []
    for i, p in enumerate(expert_paths):
        tree, manifest = _load_tree(p)
        encoder, head = _split_expert(tree, manifest, task_id=i)
        experts.append(encoder)
        heads.append(head)
        specs.append(_spec_from_manifest(manifest, "task"))
    if tv_paths:
        tvs = []
        for i, p in enumerate(tv_paths):
            obj, _ = read_checkpoint(p)
            if not isinstance(obj, TaskVector):
                raise ContractError(f"{p} is not a task-vector checkpoint")
            tvs.append(TaskVector(i, obj.tree))
    else:
        tvs = [compute_task_vector(e, base, task_id=i) for i, e in enumerate(experts)]

    config = config_with_tasks(_config_from_tree_manifest(base_manifest),
                               tuple(s.classes for s in specs))
    manifest = {"stage": "merge", "method": args.method, "inputs_digest": digest}
    for i, spec in enumerate(specs):
        manifest.update(_task_manifest(spec, f"task.{i}"))

    if args.method == "wemoe":
        merge = MergeConfig(strategy=strategy, lambda_init=lam, l_fc=lfc,
                            shared_router=shared, rho=rho, seed=seed)
        model = upscale_to_wemoe(base, tvs, config, merge, heads=heads)
        write_checkpoint(model, path, extra_manifest=manifest)
    else:
        if args.method == "weight-average":
            tree = merge_weight_average(experts)
        else:
            tree = merge_task_arithmetic(base, tvs, lam)
        blob = dict(tree)
        for i, head in enumerate(heads):
            blob[f"head.{i}.w"] = head.w
            blob[f"head.{i}.b"] = head.b
        write_checkpoint(blob, path, config=config, extra_manifest=manifest)
    print(f"merge: wrote {path}")
    return 0


def _load_merged(path: str) -> tuple[MergedModel, dict[str, str]]:
    obj, manifest = read_checkpoint(path)
    if not isinstance(obj, MergedModel):
        raise ContractError(f"{path} is not a merged-model checkpoint")
    return obj, manifest


def _tasks_of(manifest: dict[str, str]) -> list[SyntheticTaskSpec]:
    specs = []
    i = 0
    while f"task.{i}.family" in manifest:
        specs.append(_spec_from_manifest(manifest, f"task.{i}"))
        i += 1
    if not specs:
        raise ContractError("checkpoint manifest carries no task descriptors")
    return specs


def _stage_tta(args, cfgfile) -> int:
    out = _out_dir(args)
    seed = resolve(args.seed, cfgfile, "seed", 0, int)
    steps = resolve(args.steps, cfgfile, "tta_steps", 200, int)
    lr = resolve(args.lr, cfgfile, "tta_lr", 1e-3, float)
    batch = resolve(args.batch, cfgfile, "tta_batch", 16, int)
    path = os.path.join(out, "adapted.wemc")
    trace_path = os.path.join(out, "tta-trace.csv")
    digest = _digest([args.model], {"steps": steps, "lr": lr, "batch": batch, "seed": seed})
    if _up_to_date(path, digest):
        print(f"tta: {path} up to date")
        return 0
    model, manifest = _load_merged(args.model)
    specs = _tasks_of(manifest)
    test_sets = {i: generate_task_dataset(s).test_images for i, s in enumerate(specs)}
    with threadpool_limits(limits=1, user_api="blas"):
        model, trace = tta_train(model, test_sets,
                                 TTAConfig(steps=steps, lr=lr, batch_size=batch, seed=seed))
    manifest = dict(manifest)
    manifest.update({"stage": "tta", "inputs_digest": digest, "tta_steps": str(steps),
                     "tta_lr": repr(lr), "tta_batch": str(batch)})
    manifest.pop("kind", None)
    write_checkpoint(model, path, extra_manifest=manifest)
    _write_csv(trace_path, trace.rows())
    print(f"tta: wrote {path} and {trace_path}")
    return 0


def _parse_corruptions(text: str | None, seed: int) -> tuple[Corruption, ...]:
    if not text:
        return (Corruption("gaussian-noise", 3, seed), Corruption("contrast", 3, seed))
    out = []
    for item in text.split(","):
        if not item:
            continue
        if ":" not in item:
            raise ContractError(f"corruption spec {item!r} must be kind:severity")
        kind, sev = item.split(":", 1)
        out.append(Corruption(kind, int(sev), seed))
    return tuple(out)


def _stage_eval(args, cfgfile) -> int:
    out = _out_dir(args)
    seed = resolve(args.seed, cfgfile, "seed", 0, int)
    families = (args.tasks or resolve(None, cfgfile, "tasks",
                "stripe-orientation,blob-count,checker-frequency,ring-radius")).split(",")
    classes = resolve(args.classes, cfgfile, "classes", 4, int)
    train_size = resolve(args.train_size, cfgfile, "train_size", 384, int)
    test_size = resolve(args.test_size, cfgfile, "test_size", 192, int)
    methods = (args.methods.split(",") if args.methods
               else [m for m in METHODS if args.protocol != "generalization" or m != "individual"])
    specs = [SyntheticTaskSpec(f.strip(), classes=classes, train_size=train_size,
                               test_size=test_size, seed=i)
             for i, f in enumerate(families)]
    cfg = BenchConfig(
        vit=DESK,
        seed=seed,
        finetune_epochs=resolve(args.finetune_epochs, cfgfile, "finetune_epochs", 10, int),
        lam=resolve(args.lam, cfgfile, "lambda", 0.3, float),
        rho=resolve(args.rho, cfgfile, "rho", 0.9, float),
        l_fc=resolve(args.lfc, cfgfile, "l_fc", 2, int),
        tta=TTAConfig(
            steps=resolve(args.steps, cfgfile, "tta_steps", 200, int),
            lr=resolve(args.lr, cfgfile, "tta_lr", 1e-3, float),
            batch_size=resolve(args.batch, cfgfile, "tta_batch", 16, int),
            seed=seed,
        ),
        n_seen=resolve(args.seen, cfgfile, "n_seen", None, int),
        corruptions=_parse_corruptions(args.corruptions, seed) if args.protocol == "robustness" else (),
    )
    report = run_merge_benchmark(methods, specs, args.protocol, cfg)
    csv_path = os.path.join(out, f"report-{args.protocol}.csv")
    md_path = os.path.join(out, f"report-{args.protocol}.md")
    manifest_path = os.path.join(out, f"report-{args.protocol}.manifest")
    _write_csv(csv_path, report.to_csv_rows())
    with open(md_path, "w", encoding="utf-8") as f:
        f.write(report.to_markdown())
    with open(manifest_path, "w", encoding="utf-8") as f:
        for k in sorted(report.manifest):
            f.write(f"{k}={report.manifest[k]}\n")
    print(f"eval: wrote {csv_path}, {md_path}, {manifest_path}")
    return 0


def _stage_analyze(args, cfgfile) -> int:
    out = _out_dir(args)
    ran_any = False
    if args.drift:
        if not args.base or not args.experts:
            raise ContractError("--drift needs --base and --experts")
        base, base_manifest = _load_tree(args.base)
        config = _config_from_tree_manifest(base_manifest)
        experts = []
        for p in args.experts.split(","):
            tree, _ = _load_tree(p)
            experts.append({k: v for k, v in tree.items() if k in base})
        rows = A.drift_report(base, experts, config.n_blocks)
        _write_csv(os.path.join(out, "drift.csv"), A.drift_csv_rows(rows))
        print(f"analyze: wrote {os.path.join(out, 'drift.csv')}")
        ran_any = True
    if args.magnitudes:
        if not args.base or not args.expert:
            raise ContractError("--magnitudes needs --base and --expert")
        base, base_manifest = _load_tree(args.base)
        config = _config_from_tree_manifest(base_manifest)
        tree, _ = _load_tree(args.expert)
        tv = compute_task_vector({k: v for k, v in tree.items() if k in base}, base)
        qs = [0.05, 0.25, 0.5, 0.75, 0.95]
        rows = [("layer", "quantile", "abs_value")]
        for layer in range(config.n_blocks):
            vals = magnitude_quantiles(tv, layer, qs)
            rows.extend((layer, q, v) for q, v in zip(qs, vals))
        _write_csv(os.path.join(out, "magnitudes.csv"), rows)
        print(f"analyze: wrote {os.path.join(out, 'magnitudes.csv')}")
        ran_any = True
    if args.routing or args.firstchoice:
        if not args.model:
            raise ContractError("--routing/--firstchoice need --model")
        model, manifest = _load_merged(args.model)
        specs = _tasks_of(manifest)
        task_images = {i: generate_task_dataset(s).test_images for i, s in enumerate(specs)}
        with threadpool_limits(limits=1, user_api="blas"):
            if args.routing:
                layers = ([int(x) for x in args.layers.split(",")] if args.layers
                          else list(range(model.config.n_blocks)))
                rows = A.routing_distribution(model, task_images, layers)
                _write_csv(os.path.join(out, "routing.csv"), A.routing_csv_rows(rows))
                print(f"analyze: wrote {os.path.join(out, 'routing.csv')}")
            if args.firstchoice:
                fcm = A.first_choice_matrix(model, task_images)
                _write_csv(os.path.join(out, "firstchoice.csv"), A.first_choice_csv_rows(fcm))
                print(f"analyze: wrote {os.path.join(out, 'firstchoice.csv')}")
        ran_any = True
    if not ran_any:
        raise _UsageError("analyze needs at least one of --drift/--magnitudes/--routing/--firstchoice")
    return 0


def _stage_landscape(args, cfgfile) -> int:
    out = _out_dir(args)
    if args.grid_step <= 0:
        raise ContractError("--grid-step must be positive")
    base, base_manifest = _load_tree(args.base)
    config = _config_from_tree_manifest(base_manifest)
    evals = []
    tvs = []
    for i, path in enumerate((args.expert1, args.expert2)):
        tree, manifest = _load_tree(path)
        encoder, head = _split_expert(tree, manifest, task_id=i)
        tvs.append(compute_task_vector(encoder, base, task_id=i))
        spec = _spec_from_manifest(manifest, "task")
        ds = generate_task_dataset(spec)
        images, labels = ds.test()
        evals.append((images, labels, head))
    grid = np.arange(args.grid_min, args.grid_max + args.grid_step / 2, args.grid_step)
    with threadpool_limits(limits=1, user_api="blas"):
        points = A.loss_landscape_grid(base, tvs[0], tvs[1], evals[0], evals[1],
                                       config, grid, grid)
    _write_csv(os.path.join(out, "landscape.csv"), A.landscape_csv_rows(points))
    print(f"landscape: wrote {os.path.join(out, 'landscape.csv')}")
    return 0


_STAGES = {
    "pretrain": _stage_pretrain,
    "finetune": _stage_finetune,
    "taskvec": _stage_taskvec,
    "merge": _stage_merge,
    "tta": _stage_tta,
    "eval": _stage_eval,
    "analyze": _stage_analyze,
    "landscape": _stage_landscape,
}


def run_cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        cfgfile = parse_config_file(args.config) if args.config else {}
        precision = resolve(args.precision, cfgfile, "precision", "f32", str)
        T.set_default_dtype(precision)
        try:
            return _STAGES[args.command](args, cfgfile)
        finally:
            T.set_default_dtype("f32")
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
