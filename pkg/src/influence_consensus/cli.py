"""Command-line front end.  Stages communicate only through files.

Typical synthetic run::

    influence-consensus gen-synth --out run/world
    influence-consensus warmup    --manifest run/world/manifest.json --out run/model
    influence-consensus grads     --manifest run/world/manifest.json --model run/model/model.json --out run/grads
    influence-consensus project   --manifest run/grads/manifest.json --proj-dim 64 --out run/proj
    influence-consensus influence --manifest run/proj/manifest.json --out run/scores
    influence-consensus select    --scores run/scores/scores.bin --ratio 0.2 --strategy vote --out run/sel
    influence-consensus eval      --manifest run/world/manifest.json --selection run/sel/vote_p0.2.ids --out run/eval

Exit codes: 0 success, 2 configuration/usage error, 3 validation error,
4 I/O error.  Errors are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import datastore as ds
from .aggregation import STRATEGIES, check_ratio
from .datastore import FeatureShard, Manifest, ShardRef, TaskRef
from .errors import InfluenceConsensusError, ValidationError
from .influence import build_all_task_scores
from .projection import DESK_OUT_DIM, ProjectionSpec, normalize_rows, project_block
from .results import SelectionResult, dump_json, read_ids
from .selection import BASELINES, aggregate, rel_metric, select, specialist_overlap, vote_distribution_stats
from .synthbench import (
    ModelParams,
    SyntheticSpec,
    TrainerConfig,
    World,
    generate_multitask,
    per_example_gradients,
    sgd_warmup,
    evaluate_subset,
)

log = logging.getLogger("influence_consensus")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_IO = 4

WORLD_FILE = "world.json"


class ConfigError(InfluenceConsensusError):
    pass


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ratio_tag(p: float) -> str:
    return f"p{p:g}"


# ---------------------------------------------------------------------------
# synthetic world <-> files


def save_world(world: World, out: Path) -> Manifest:
    spec = world.spec
    ds.write_shard(FeatureShard(world.pool_x), out / "pool.feat")
    tasks = []
    for name, vx, tx in zip(world.task_names, world.val_x, world.test_x):
        ds.write_shard(FeatureShard(vx), out / f"val_{name}.feat")
        ds.write_shard(FeatureShard(tx), out / f"test_{name}.feat")
        tasks.append(TaskRef(name, f"val_{name}.feat", vx.shape[0]))
    manifest = Manifest(
        feature_dim=spec.feature_dim,
        train_shards=[ShardRef("pool.feat", spec.pool_size, 0)],
        tasks=tasks,
        normalized=False,
        root=out,
    )
    manifest.save(out / "manifest.json")
    dump_json(
        {
            "spec": spec.to_dict(),
            "pool_labels": world.pool_y,
            "pool_true_labels": world.pool_true,
            "val_labels": dict(zip(world.task_names, world.val_y)),
            "test_shards": {n: f"test_{n}.feat" for n in world.task_names},
            "test_labels": dict(zip(world.task_names, world.test_y)),
        },
        out / WORLD_FILE,
    )
    return manifest


def load_world(manifest_path: str) -> World:
    manifest = Manifest.load(manifest_path)
    world_path = manifest.root / WORLD_FILE
    if not world_path.exists():
        raise ValidationError(f"{world_path} not found; this command needs a gen-synth manifest")
    with open(world_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    spec = SyntheticSpec(**meta["spec"])
    names = manifest.task_names
    pool = np.concatenate([ds.read_shard(manifest.resolve(s.path)).values for s in manifest.train_shards])
    return World(
        spec=spec,
        class_means=np.zeros((spec.n_classes, spec.feature_dim)),
        pool_x=pool.astype(np.float64),
        pool_y=np.asarray(meta["pool_labels"], dtype=np.int64),
        pool_true=np.asarray(meta["pool_true_labels"], dtype=np.int64),
        val_x=[manifest.read_val(n).values.astype(np.float64) for n in names],
        val_y=[np.asarray(meta["val_labels"][n], dtype=np.int64) for n in names],
        test_x=[ds.read_shard(manifest.resolve(meta["test_shards"][n])).values.astype(np.float64) for n in names],
        test_y=[np.asarray(meta["test_labels"][n], dtype=np.int64) for n in names],
        task_names=names,
    )


def _trainer(args) -> TrainerConfig:
    return TrainerConfig(
        learning_rate=args.lr, epochs=args.epochs, warmup_ratio=args.warmup_ratio, seed=args.seed, schedule=args.schedule
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> None:
    spec = SyntheticSpec(
        seed=args.seed,
        feature_dim=args.feature_dim,
        n_classes=args.classes,
        n_tasks=args.tasks,
        pool_size=args.pool_size,
        val_per_task=args.val_per_task,
        test_per_task=args.test_per_task,
        distractor_fraction=args.distractors,
    )
    out = _outdir(args.out)
    save_world(generate_multitask(spec), out)
    log.info("wrote synthetic world (N=%d, K=%d) to %s", spec.pool_size, spec.n_tasks, out)


def cmd_warmup(args) -> None:
    world = load_world(args.manifest)
    params = sgd_warmup(world, _trainer(args))
    out = _outdir(args.out)
    dump_json(params.to_dict(), out / "model.json")
    log.info("wrote warmup model to %s", out / "model.json")


def cmd_grads(args) -> None:
    world = load_world(args.manifest)
    with open(args.model, encoding="utf-8") as fh:
        params = ModelParams.from_dict(json.load(fh))
    out = _outdir(args.out)
    pool = per_example_gradients(params, world.pool_x, world.pool_y)
    ds.write_shard(FeatureShard(pool), out / "pool.grad")
    tasks = []
    for name, x, y in zip(world.task_names, world.val_x, world.val_y):
        ds.write_shard(FeatureShard(per_example_gradients(params, x, y)), out / f"val_{name}.grad")
        tasks.append(TaskRef(name, f"val_{name}.grad", x.shape[0]))
    Manifest(
        feature_dim=pool.shape[1],
        train_shards=[ShardRef("pool.grad", pool.shape[0], 0)],
        tasks=tasks,
        normalized=False,
        root=out,
    ).save(out / "manifest.json")
    log.info("wrote %d x %d gradient datastore to %s", pool.shape[0], pool.shape[1], out)


def cmd_project(args) -> None:
    src = Manifest.load(args.manifest)
    src.check_shards()
    spec = ProjectionSpec(seed=args.seed, in_dim=src.feature_dim, out_dim=args.proj_dim)
    out = _outdir(args.out)
    zero_rows = 0

    def project_file(path: Path, dest: Path, base_id: int) -> int:
        nonlocal zero_rows
        blocks = []
        for block in ds.stream_blocks(path, args.block_rows, base_id=base_id):
            normed, nz = normalize_rows(project_block(spec, block))
            zero_rows += nz
            blocks.append(normed)
        shard = ds.concat_shards(blocks) if blocks else FeatureShard(np.zeros((0, spec.out_dim)), base_id)
        ds.write_shard(shard, dest)
        return shard.count

    train = []
    for i, ref in enumerate(src.train_shards):
        name = f"train_{i:04d}.proj"
        train.append(ShardRef(name, project_file(src.resolve(ref.path), out / name, ref.base_id), ref.base_id))
    tasks = []
    for t in src.tasks:
        name = f"val_{t.name}.proj"
        tasks.append(TaskRef(t.name, name, project_file(src.resolve(t.val_shard), out / name, 0)))
    Manifest(
        feature_dim=spec.out_dim,
        train_shards=train,
        tasks=tasks,
        normalized=True,
        projection=spec.to_dict(),
        root=out,
    ).save(out / "manifest.json")
    if zero_rows:
        log.warning("%d zero gradient rows left unnormalized", zero_rows)
    log.info("projected %d -> %d dims into %s", spec.in_dim, spec.out_dim, out)


def cmd_influence(args) -> None:
    manifest = Manifest.load(args.manifest)
    manifest.check_shards()
    table = build_all_task_scores(manifest, block_rows=args.block_rows, raw=args.raw)
    out = _outdir(args.out)
    ds.write_score_table(table, out / "scores.bin")
    log.info("wrote %d x %d score table to %s", table.n, table.k, out / "scores.bin")


def _strategies(args) -> List[str]:
    return args.strategy or ["vote"]


def cmd_select(args) -> None:
    table = ds.read_score_table(args.scores)
    out = _outdir(args.out)
    for strategy in _strategies(args):
        for p in args.ratio:
            stem = f"{strategy}_{_ratio_tag(p)}"
            if args.dry_run:
                ranking = aggregate(table, strategy, p)
                dump_json(
                    {"strategy": strategy, "p": p, "keys": ranking.keys, "order": ranking.order},
                    out / f"{stem}.keys.json",
                )
                continue
            result = select(table, p, strategy, seed=args.seed)
            result.write(out / f"{stem}.ids", out / f"{stem}.json")
            log.info("%s p=%g: selected %d of %d", strategy, p, result.m, table.n)


def cmd_stats(args) -> None:
    table = ds.read_score_table(args.scores)
    stats = vote_distribution_stats(table, args.ratio)
    out = _outdir(args.out)
    dump_json(stats.to_dict(), out / "vote_stats.json")
    print(stats.format_table())


def cmd_overlap(args) -> None:
    table = ds.read_score_table(args.scores)
    ids = read_ids(args.selection)
    if ids.size and (ids.min() < 0 or ids.max() >= table.n):
        raise ValidationError("selection ids fall outside the score table")
    generalist = SelectionResult("external", None, ids)
    out = _outdir(args.out)
    reports = {_ratio_tag(p): specialist_overlap(table, p, generalist).to_dict() for p in args.ratio}
    dump_json(reports, out / "overlap.json")


def cmd_eval(args) -> None:
    world = load_world(args.manifest)
    trainer = _trainer(args)
    ids = read_ids(args.selection)
    sub = evaluate_subset(world, ids, trainer)
    full = evaluate_subset(world, np.arange(world.pool_x.shape[0]), trainer)
    report = rel_metric(sub, full, world.task_names)
    out = _outdir(args.out)
    dump_json(report.to_dict(), out / "eval.json")
    print(f"Rel. = {report.mean_rel:.4f}")


# ---------------------------------------------------------------------------
# parser


def _ratio(text: str) -> float:
    try:
        return check_ratio(float(text))
    except (ValueError, ValidationError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


class _Parser(argparse.ArgumentParser):
    """Usage errors go to stderr as JSON, like every other failure."""

    def error(self, message: str):
        _fail(EXIT_CONFIG, "config", ConfigError(f"{self.prog}: {message}"))
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="influence-consensus", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = _Parser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--block-rows", type=int, default=4096)

    trainer = _Parser(add_help=False)
    trainer.add_argument("--lr", type=float, default=0.1)
    trainer.add_argument("--epochs", type=int, default=3)
    trainer.add_argument("--warmup-ratio", type=float, default=0.05)
    trainer.add_argument("--schedule", choices=("linear", "constant"), default="linear")

    ratios = _Parser(add_help=False)
    ratios.add_argument("--ratio", type=_ratio, action="append", required=True, help="selection ratio in (0, 1]; repeatable")

    p = sub.add_parser("gen-synth", parents=[common], help="materialize a synthetic multitask world")
    p.add_argument("--feature-dim", type=int, default=20)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--tasks", type=int, default=5)
    p.add_argument("--pool-size", type=int, default=2000)
    p.add_argument("--val-per-task", type=int, default=50)
    p.add_argument("--test-per-task", type=int, default=200)
    p.add_argument("--distractors", type=float, default=0.2)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("warmup", parents=[common, trainer], help="SGD warmup on a random slice of the pool")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_warmup)

    p = sub.add_parser("grads", parents=[common], help="per-example gradients into a datastore")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_grads)

    p = sub.add_parser("project", parents=[common], help="random projection + row normalization")
    p.add_argument("--manifest", required=True)
    p.add_argument("--proj-dim", type=int, default=DESK_OUT_DIM)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("influence", parents=[common], help="per-task mean influence score table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--raw", action="store_true", help="allow unnormalized features (raw inner products)")
    p.set_defaults(func=cmd_influence)

    for name, dry in (("select", False), ("aggregate", True)):
        p = sub.add_parser(name, parents=[common, ratios], help="aggregate scores and select a subset" if not dry else "write per-example aggregate keys (select --dry-run)")
        p.add_argument("--scores", required=True)
        p.add_argument("--strategy", choices=STRATEGIES + (() if dry else BASELINES), action="append")
        p.add_argument("--dry-run", action="store_true", default=dry, help="write aggregate keys instead of a selection")
        p.set_defaults(func=cmd_select)

    p = sub.add_parser("stats", parents=[common, ratios], help="vote distribution across ratios")
    p.add_argument("--scores", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("overlap", parents=[common, ratios], help="specialist / generalist overlap")
    p.add_argument("--scores", required=True)
    p.add_argument("--selection", required=True)
    p.set_defaults(func=cmd_overlap)

    p = sub.add_parser("eval", parents=[common, trainer], help="retrain on a selection and report Rel.")
    p.add_argument("--manifest", required=True)
    p.add_argument("--selection", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "block_rows", 1) < 1:
        return _fail(EXIT_CONFIG, "config", ConfigError("--block-rows must be >= 1"))
    try:
        args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except ValidationError as exc:
        return _fail(EXIT_VALIDATION, "validation", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
