#!/usr/bin/env python3
"""
Marketplace Graph LM - Command Line Entry Point

Generates synthetic member/job marketplaces, pretrains and finetunes the
graph-prompted language model, evaluates it on held-out splits, exports node
embeddings and checks gradients.

Usage:
    python3 main.py gen-data --config configs/desk.toml --out data/graph.jsonl
    python3 main.py pretrain --graph data/graph.jsonl --out runs/pretrain.ckpt
    python3 main.py finetune --graph data/graph.jsonl --checkpoint runs/pretrain.ckpt --out runs/final.ckpt
    python3 main.py evaluate --graph data/graph.jsonl --checkpoint runs/final.ckpt
"""

import argparse
import json
import os
import sys
from typing import Dict, List, Optional, Sequence

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

from checkpoint import load_checkpoint, restore_optimizer, restore_parameters, restore_rng, save_checkpoint
from config import RunConfig, config_hash, flatten_config, load_config
from errors import CheckpointShapeError, ConfigError, MarketplaceLMError, SkipInstance
from evaluation import EvalReport, Predictor, evaluate, export_embeddings, macro_f1, print_report
from gradcheck import gradient_check, tied_head_coords
from hetgraph import LINK_TASKS, EntityType, HetGraph, load_graph
from plotting import plot_losses
from prompts import render_prompt
from synth import generate_graph, write_marketplace
from trainer import Trainer, build_model, run_splits, task_kind, training_graph
from transformer import ParameterStore, instance_loss
from vocab import VocabLayout


GRAD_CHECK_TOLERANCE = 1e-4

# Tiny model and graph used by grad-check (run with untied and tied heads)
GRAD_CHECK_SETTINGS = {
    "model.layers": 2, "model.heads": 2, "model.d_model": 16, "model.d_ff": 32,
    "train.max_feature_bytes": 24, "train.fanout": 2,
    "synth.n_members": 10, "synth.n_jobs": 6, "synth.n_clusters": 2,
    "synth.p_in": 0.6, "synth.p_out": 0.05, "synth.p_uu": 0.5,
}


# Configuration and loading

def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    """Dotted-key overrides from --set and the dedicated flags."""
    overrides: Dict[str, object] = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    flags = {
        "workers": "train.workers", "log": "train.log_path", "tasks": "train.tasks",
        "precision": "model.precision", "seed": "train.seed",
    }
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "quiet", False):
        overrides["train.verbose"] = False
    return overrides


def _resolve_config(args: argparse.Namespace, saved: Optional[Dict] = None,
                    extra: Optional[Dict[str, object]] = None) -> RunConfig:
    """
    Config for a command: checkpoint-saved values (if any) under the config
    file, environment and flag layers.
    """
    overrides = dict(extra or {})
    overrides.update(_overrides(args))
    return load_config(getattr(args, "config", None), overrides, base=saved)


def _load_graph(path: str) -> HetGraph:
    g = load_graph(path)
    stats = g.get_stats()
    print(f"✓ Loaded graph: {stats['members']} members, {stats['jobs']} jobs, "
          f"{stats['member_job_edges'] + stats['member_member_edges']} edges")
    return g


def _train_setup(args: argparse.Namespace, config: RunConfig, extra_tasks: Sequence[str] = ()):
    g = _load_graph(args.graph)
    splits = run_splits(g, config, extra_tasks)
    g_train = training_graph(g, splits)
    heldout = g.num_edges() - g_train.num_edges()
    print(f"✓ Held out {heldout} validation/test links")
    return g_train, splits


def _check_layout(params: ParameterStore, g: HetGraph) -> None:
    expected = VocabLayout.for_graph(g)
    if (params.layout.n_members, params.layout.n_jobs) != (expected.n_members, expected.n_jobs):
        raise CheckpointShapeError(
            f"checkpoint was trained on {params.layout.n_members} members / {params.layout.n_jobs} jobs, "
            f"graph has {expected.n_members} / {expected.n_jobs}"
        )


def _save(path: str, trainer: Trainer, config: RunConfig, epoch: int, phase: str) -> None:
    save_checkpoint(path, trainer.params, config_hash(config), epoch, rng=trainer.rng,
                    optimizer=trainer.optimizer, extra={"phase": phase, "run_config": flatten_config(config)})
    print(f"✓ Saved checkpoint ({phase}, epoch {epoch}) to {path}")


def _resume(checkpoint, trainer: Trainer) -> None:
    """Continue the optimizer moments and the epoch-order stream of a saved run."""
    restore_optimizer(checkpoint, trainer.optimizer)
    rng = restore_rng(checkpoint)
    if rng is not None:
        trainer.rng = rng


def _maybe_plot(args: argparse.Namespace, config: RunConfig) -> None:
    if not getattr(args, "plot", None):
        return
    if not config.train.log_path:
        print("⚠ --plot needs a training log (--log or train.log_path); skipping plot")
        return
    n_series = plot_losses(config.train.log_path, args.plot)
    print(f"✓ Wrote {n_series} loss curves to {args.plot}")


# Commands

def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    write_marketplace(config.synth, args.out)
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    g_train, splits = _train_setup(args, config)
    params = build_model(g_train, config)
    trainer = Trainer(g_train, params, config, splits)
    trainer.pretrain()
    _save(args.out, trainer, config, config.train.warmup_epochs, "pretrain")
    _maybe_plot(args, config)
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    config = _resolve_config(args, checkpoint.manifest.get("run_config"))
    g_train, splits = _train_setup(args, config)

    params = restore_parameters(checkpoint)
    _check_layout(params, g_train)
    trainer = Trainer(g_train, params, config, splits)
    _resume(checkpoint, trainer)

    trainer.finetune(checkpoint.epoch, args.epochs)
    end = checkpoint.epoch + args.epochs if args.epochs is not None else config.train.epochs
    _save(args.out, trainer, config, end, "finetune")
    _maybe_plot(args, config)
    return 0


def _load_model(args: argparse.Namespace, extra_tasks: Sequence[str] = ()):
    checkpoint = load_checkpoint(args.checkpoint)
    config = _resolve_config(args, checkpoint.manifest.get("run_config"))
    g_train, splits = _train_setup(args, config, extra_tasks)
    params = restore_parameters(checkpoint)
    _check_layout(params, g_train)
    return config, g_train, splits, params


def cmd_evaluate(args: argparse.Namespace) -> int:
    tasks = args.tasks.split(",") if args.tasks else None
    config, g_train, splits, params = _load_model(args, tasks or ())
    tasks = tasks or list(config.train.tasks)
    if args.sweep_ng:
        config = config.with_overrides({"eval.sweep_ng": args.sweep_ng})

    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    reports: List[EvalReport] = []
    for task in tasks:
        report = evaluate(params, g_train, splits, task, config, split=args.split,
                          n_ego_samples=args.n_ego_samples, seeds=seeds)
        print_report(report)
        reports.append(report)

    summary = macro_f1(reports)
    if summary is not None and len([r for r in reports if r.kind == "node"]) > 1:
        print(f"✓ Macro F1 across node tasks: {summary:.4f}")

    payload = [json.loads(r.to_json()) for r in reports]
    print(json.dumps(payload, indent=2))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)
        print(f"✓ Wrote report to {args.report}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    config, g_train, _, params = _load_model(args)
    predictor = Predictor(params, g_train, config)
    n_ego = args.n_ego_samples or config.eval.n_ego_samples
    seed = args.seed if args.seed is not None else config.train.seed

    if task_kind(g_train, args.task) == "node":
        probs = predictor.class_probabilities(args.node, args.task, n_ego, seed)
        label = int(probs.argmax())
        print(f"✓ Node {args.node}, task {args.task}: class {label} "
              f"(p={probs[label]:.4f}, N_g={n_ego})")
        print(json.dumps({"node": args.node, "task": args.task, "class": label,
                          "probabilities": [float(p) for p in probs]}))
    else:
        ranked = predictor.predict_links(args.node, LINK_TASKS[args.task], args.top, n_ego, seed)
        print(f"✓ Node {args.node}, task {args.task}: top {len(ranked)} (N_g={n_ego})")
        print(json.dumps({"node": args.node, "task": args.task, "ranked": ranked}))
    return 0


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    params = restore_parameters(checkpoint)
    g = _load_graph(args.graph)
    _check_layout(params, g)
    rows = export_embeddings(params, g, args.out)
    print(f"✓ Wrote {rows} embeddings (d={params['Z'].shape[1]}) to {args.out}")
    return 0


def _grad_check_instances(trainer: Trainer, g: HetGraph, max_nodes: int = 3):
    """A few instances of every objective on low-id members."""
    instances = []
    tasks = ["jymbii"] + g.tasks()[:1]
    for k in g.node_ids(EntityType.MEMBER)[:max_nodes]:
        makers = [lambda k=k: [trainer.feature_instance(k, 0)],
                  lambda k=k: trainer.structure_instances(k, 0)]
        makers += [lambda k=k, task=task: [trainer.task_instance(k, 0, task)] for task in tasks]
        for make in makers:
            try:
                built = make()
            except SkipInstance:
                continue
            instances += [trainer.with_bias(item) for item in built if not isinstance(item, SkipInstance)]
    return instances


def _grad_check_mode(config: RunConfig, coords_per_tensor: int) -> bool:
    """Check one head mode; tied heads add Z rows read both as tokens and as head rows."""
    tied = config.model.tie_heads
    print(f"\n{'tied' if tied else 'untied'} link heads:")
    g = generate_graph(config.synth)
    params = build_model(g, config, precision=64)
    trainer = Trainer(g, params, config)
    params.set_trainable(params.names())
    instances = _grad_check_instances(trainer, g)
    if not instances:
        print("✗ No instance could be built on the check graph")
        return False

    def loss_fn():
        total = instance_loss(params, *instances[0])
        for instance, bias in instances[1:]:
            total = total + instance_loss(params, instance, bias)
        return total

    report = gradient_check(params, loss_fn, n_coords=coords_per_tensor, seed=config.train.seed)
    shared = tied_head_coords(params, instances, coords_per_tensor, seed=config.train.seed)
    if shared:
        shared_report = gradient_check(params, loss_fn, coords=shared)
        for entry in shared_report.entries:
            entry.name = f"{entry.name} (token+head)"
        report.entries += shared_report.entries
    elif tied:
        print("⚠ No node row is shared by a prompt and a tied head on the check graph")

    for entry in report.entries:
        marker = "·" if entry.frozen else ("✓" if entry.max_rel_error < GRAD_CHECK_TOLERANCE else "✗")
        print(f"  {marker} {entry.name:<24} {entry.max_rel_error:.3e}")
    print(f"max relative error: {report.max_rel_error:.3e} over {len(instances)} instances")
    return report.passed(GRAD_CHECK_TOLERANCE)


def cmd_grad_check(args: argparse.Namespace) -> int:
    config = _resolve_config(args, extra=GRAD_CHECK_SETTINGS)
    if config.model.precision != 64:
        print("✗ Gradient checks need --precision 64")
        return 1

    print(f"\n{'='*70}")
    print(f"Gradient check: L={config.model.layers}, H={config.model.heads}, "
          f"d={config.model.d_model}, 64-bit")
    print(f"{'='*70}")
    results = [_grad_check_mode(config.with_overrides({"model.tie_heads": tied}), args.coords)
               for tied in (False, True)]
    if not all(results):
        print(f"✗ Gradient check failed (tolerance {GRAD_CHECK_TOLERANCE:g})")
        return 1
    print("✓ Gradient check passed for untied and tied link heads")
    return 0


def cmd_dump_prompts(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    g_train, splits = _train_setup(args, config)
    params = build_model(g_train, config)
    trainer = Trainer(g_train, params, config, splits)

    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    written = 0
    try:
        for k in g_train.node_ids()[:args.limit]:
            built = []
            if args.kind in ("feature", "all"):
                built += trainer.wrap("feature", lambda: trainer.feature_instance(k, args.epoch))
            if args.kind in ("structure", "all"):
                built += trainer.wrap("structure", lambda: trainer.structure_instances(k, args.epoch))
            if args.kind in ("task", "all"):
                for task in config.train.tasks:
                    if task_kind(g_train, task) == "node" or g_train.entity_type(k) is EntityType.MEMBER:
                        built += trainer.wrap(f"task:{task}", lambda: trainer.task_instance(k, args.epoch, task))
            for objective, item in built:
                if isinstance(item, str):
                    continue
                record = render_prompt(item[0], params.layout)
                record["objective"] = objective
                out.write(json.dumps(record, ensure_ascii=False) + "\n")
                written += 1
    finally:
        if out is not sys.stdout:
            out.close()
    if args.out:
        print(f"✓ Wrote {written} prompts to {args.out}")
    return 0


# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py", description="Graph-prompted LM for job marketplaces")
    commands = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler, help_text: str, graph: bool = True) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.set_defaults(handler=handler)
        sub.add_argument("--config", help="flat key = value config file")
        sub.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sub.add_argument("--quiet", action="store_true", help="disable progress bars and epoch lines")
        if graph:
            sub.add_argument("--graph", required=True, help="graph file (JSON Lines)")
        return sub

    sub = add("gen-data", cmd_gen_data, "generate a synthetic marketplace graph", graph=False)
    sub.add_argument("--out", required=True)

    for name, handler, help_text in (("pretrain", cmd_pretrain, "stage-0 and warmup training"),
                                     ("finetune", cmd_finetune, "interleaved finetuning")):
        sub = add(name, handler, help_text)
        if name == "finetune":
            sub.add_argument("--checkpoint", required=True)
            sub.add_argument("--epochs", type=int, help="run this many interleaved epochs")
        sub.add_argument("--out", required=True, help="checkpoint to write")
        sub.add_argument("--tasks", help="comma-separated tasks")
        sub.add_argument("--workers", type=int)
        sub.add_argument("--seed", type=int)
        sub.add_argument("--log", help="JSON Lines training log")
        sub.add_argument("--plot", help="write an SVG of the loss curves here")

    sub = add("evaluate", cmd_evaluate, "evaluate on held-out splits")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--tasks", help="comma-separated tasks (default: train.tasks)")
    sub.add_argument("--split", choices=["valid", "test"])
    sub.add_argument("--n-ego-samples", type=int, help="N_g")
    sub.add_argument("--sweep-ng", help="comma-separated extra N_g values")
    sub.add_argument("--seeds", help="comma-separated evaluation seeds")
    sub.add_argument("--workers", type=int)
    sub.add_argument("--report", help="write the EvalReport JSON here")

    sub = add("predict", cmd_predict, "predict for one node")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--node", type=int, required=True)
    sub.add_argument("--task", required=True)
    sub.add_argument("--top", type=int, default=20, help="M for link tasks")
    sub.add_argument("--n-ego-samples", type=int, help="N_g")
    sub.add_argument("--seed", type=int)

    sub = add("export-embeddings", cmd_export_embeddings, "write node embeddings as TSV")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--out", required=True)

    sub = add("grad-check", cmd_grad_check, "finite-difference gradient check", graph=False)
    sub.add_argument("--precision", type=int, choices=[32, 64], default=64)
    sub.add_argument("--coords", type=int, default=6, help="coordinates checked per tensor")

    sub = add("dump-prompts", cmd_dump_prompts, "render prompt instances as JSON Lines")
    sub.add_argument("--out", help="output file (default: stdout)")
    sub.add_argument("--kind", choices=["feature", "structure", "task", "all"], default="all")
    sub.add_argument("--limit", type=int, default=10, help="number of center nodes")
    sub.add_argument("--epoch", type=int, default=0)
    return parser


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 1 on a handled error, 2 on usage errors, 130 on Ctrl-C
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        return args.handler(args)
    except KeyboardInterrupt:
        print("\n✗ Interrupted")
        return 130
    except MarketplaceLMError as e:
        print(f"✗ Error: {e}")
        return 1


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
