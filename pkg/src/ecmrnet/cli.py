"""Command-line front end.

    ecmrnet [--workdir DIR] [--config FILE] [--key=value ...] COMMAND [args]

Stateful commands (pretrain, add-task, prune, finetune) load the checkpoint
named by ``<model_path>/latest``, write a fresh checkpoint directory and then
swap the pointer. Exit codes: 0 success, 1 usage/config/ordering error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import ModelError, build_backbone, expand_for_task, pretrain
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .degradations import Dataset, make_sample_pool
from .records import EvalRecord, RecordError, read_records, render_markdown, write_records
from .sep import (GraphError, MAX_EXACT_N, detachment_cost, minimize_2dse_exact,
                  minimize_2dse_greedy, one_dim_entropy_terms, parse_edge_list, run_sep,
                  two_dim_se)
from .trainer import (continual_run, evaluate, finalize, finetune, make_data, train_task,
                      RunLog)

log = logging.getLogger("ecmrnet")

COMMANDS = ("pretrain", "add-task", "prune", "finetune", "eval", "run-all", "se-analyze", "report")


class UsageError(Exception):
    """Bad invocation or violated ordering; exit code 1."""


@dataclass
class CommandOutcome:
    code: int
    artifacts: list[Path] = field(default_factory=list)
    wall_time: float = 0.0


# ---------------------------------------------------------------------------
# checkpoint pointer


def _ckpt_root(cfg: RunConfig, workdir: Path) -> Path:
    return workdir / cfg.model_path


def _latest(cfg: RunConfig, workdir: Path) -> Path:
    root = _ckpt_root(cfg, workdir)
    pointer = root / "latest"
    if not pointer.is_file():
        raise CheckpointError(f"no checkpoint under {root} (run 'pretrain' first)")
    return root / pointer.read_text().strip()


def _commit(model, cfg: RunConfig, workdir: Path, label: str) -> Path:
    """Save into a new numbered directory, then atomically repoint ``latest``."""
    root = _ckpt_root(cfg, workdir)
    root.mkdir(parents=True, exist_ok=True)
    taken = [int(p.name.split("-", 1)[0]) for p in root.iterdir()
             if p.is_dir() and p.name.split("-", 1)[0].isdigit()]
    name = f"{max(taken, default=-1) + 1:04d}-{label}"
    save_checkpoint(model, root / name)
    tmp = root / "latest.tmp"
    tmp.write_text(name + "\n")
    os.replace(tmp, root / "latest")
    return root / name


def _new_model(cfg: RunConfig):
    return build_backbone(cfg.stages, seed=cfg.train.seed, dtype=cfg.dtype,
                          global_residual=cfg.global_residual, head_init=cfg.head_init,
                          skmm_dim=cfg.skmm_dim, skmm_rank=cfg.skmm_rank,
                          skmm_hidden=cfg.skmm_hidden)


def _task(cfg: RunConfig, tid: str):
    for t in cfg.sequence:
        if t.task_id == tid:
            return t
    raise UsageError(f"task {tid!r} is not in the configured sequence")


def _merge_records(path: Path, new: list[EvalRecord]) -> None:
    old = read_records(path) if path.is_file() else []
    keys = {(r.task_id, r.checkpoint_after) for r in new}
    write_records(path, [r for r in old if (r.task_id, r.checkpoint_after) not in keys] + new)


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg, workdir, args):
    model = _new_model(cfg)
    clean, _ = make_data(cfg.sequence, cfg.train)
    t = cfg.train
    curve = pretrain(model, clean, t.epochs_pretrain, t.batch, t.lr_init * 2, t.lr_final * 2, t.seed)
    log.info("pretrain loss %.5f -> %.5f", curve[0], curve[-1])
    return [_commit(model, cfg, workdir, "pretrain")]


def cmd_add_task(cfg, workdir, args):
    task = _task(cfg, args.task)
    model = load_checkpoint(_latest(cfg, workdir))
    missing = [c for c in task.constituents if c not in model.tasks]
    if missing:
        raise UsageError(f"cannot add {task.task_id}: constituent task(s) {', '.join(missing)} "
                         f"must be added first")
    if task.task_id in model.tasks:
        raise UsageError(f"task {task.task_id} already added")
    pending = [t for t, tp in model.tasks.items() if tp.phase != "final"]
    if pending:
        raise UsageError(f"task {pending[0]} must be pruned and fine-tuned before adding another")
    _, data = make_data([task], cfg.train)
    expand_for_task(model, task)
    curve = train_task(model, task, data[task.task_id].train, cfg.train)
    log.info("%s loss %.5f -> %.5f", task.task_id, curve[0], curve[-1])
    return [_commit(model, cfg, workdir, f"{task.task_id}-train")]


def _trained_task(model, tid):
    tp = model.tasks.get(tid)
    if tp is None:
        raise UsageError(f"task {tid} has not been added")
    if tp.phase == "final":
        raise UsageError(f"task {tid} is already finalized")
    return tp


def cmd_prune(cfg, workdir, args):
    task = _task(cfg, args.task)
    model = load_checkpoint(_latest(cfg, workdir))
    _trained_task(model, task.task_id)
    _, data = make_data([task], cfg.train)
    t = cfg.train
    pool = make_sample_pool(task, t.pool_size, t.seed, t.image_size,
                            clean=data[task.task_id].train.clean)
    _, report = run_sep(model, task.task_id, pool, t.rho)
    log.info("%s: path parameters %d -> %d", task.task_id, report.params_before, report.params_after)
    ck = _commit(model, cfg, workdir, f"{task.task_id}-prune")
    (ck / "sep_report.csv").write_text(report.to_csv())
    return [ck, ck / "sep_report.csv"]


def cmd_finetune(cfg, workdir, args):
    task = _task(cfg, args.task)
    model = load_checkpoint(_latest(cfg, workdir))
    _trained_task(model, task.task_id)
    _, data = make_data([task], cfg.train)
    ds = data[task.task_id]
    n = min(len(ds.train), 50)
    res = finetune(model, task.task_id, ds.train, cfg.train,
                   monitor=Dataset(ds.train.degraded[:n], ds.train.clean[:n]))
    log.info("%s: monitor PSNR %.3f -> %.3f (%s)", task.task_id, res.monitor_before,
             res.monitor_after, "accepted" if res.accepted else "reverted")
    finalize(model, task.task_id)
    return [_commit(model, cfg, workdir, f"{task.task_id}-final")]


def cmd_eval(cfg, workdir, args):
    model = load_checkpoint(_latest(cfg, workdir))
    done = [t for t, tp in model.tasks.items() if tp.phase == "final"]
    if not done:
        raise UsageError("no finalized task to evaluate")
    _, data = make_data([_task(cfg, t) for t in done], cfg.train)
    recs = evaluate(model, done, {t: data[t].test for t in done}, done[-1], cfg.train.eval_batch)
    for r in recs:
        print(f"{r.task_id}\t{r.psnr_db:.4f}\t{r.ssim:.5f}\t{r.params}\t{r.macs}")
    path = workdir / cfg.records_path
    _merge_records(path, recs)
    return [path]


def cmd_run_all(cfg, workdir, args):
    t = cfg.train
    model = _new_model(cfg)
    clean, data = make_data(cfg.sequence, t)
    pretrain(model, clean, t.epochs_pretrain, t.batch, t.lr_init * 2, t.lr_final * 2, t.seed)
    artifacts = [_commit(model, cfg, workdir, "pretrain")]
    run = RunLog()
    for task in cfg.sequence:
        continual_run(model, [task], data, t, run)
        artifacts.append(_commit(model, cfg, workdir, f"{task.task_id}-final"))
    rec_path = workdir / cfg.records_path
    write_records(rec_path, run.records)
    rep_path = workdir / cfg.report_path
    rep_path.write_text(render_markdown(run.records))
    return artifacts + [rec_path, rep_path]


def cmd_se_analyze(cfg, workdir, args):
    path = workdir / args.edges
    if not path.is_file():
        raise UsageError(f"edge list not found: {path}")
    graph = parse_edge_list(path.read_text())
    terms = one_dim_entropy_terms(graph)
    print(f"n = {graph.n}  volume = {graph.volume!r}")
    print(f"1D-SE = {float(terms.sum())!r}")
    results = [("greedy", minimize_2dse_greedy(graph))]
    if graph.n <= MAX_EXACT_N and graph.volume > 0:
        results.append(("exact", minimize_2dse_exact(graph)))
    for label, part in results:
        h = two_dim_se(graph, part) if graph.volume > 0 else 0.0
        print(f"{label} partition {list(part.assignment)}  clusters {part.clusters}  H = {h!r}")
    if graph.volume > 0:
        part = results[-1][1]
        costs = [detachment_cost(graph, part, o) for o in range(graph.n)]
        print("detachment costs: " + " ".join(repr(c) for c in costs))
    return []


def cmd_report(cfg, workdir, args):
    src = workdir / (args.records or cfg.records_path)
    if not src.is_file():
        raise UsageError(f"records file not found: {src}")
    md = render_markdown(read_records(src))
    out = workdir / (args.out or cfg.report_path)
    out.write_text(md)
    sys.stdout.write(md)
    return [out]


HANDLERS = {"pretrain": cmd_pretrain, "add-task": cmd_add_task, "prune": cmd_prune,
            "finetune": cmd_finetune, "eval": cmd_eval, "run-all": cmd_run_all,
            "se-analyze": cmd_se_analyze, "report": cmd_report}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecmrnet", description=__doc__.split("\n\n")[0],
                                epilog="Any config key can be overridden as --key=value "
                                       "(for example --rho=0.2 or --stage.0.width=16).")
    p.add_argument("--workdir", default=".", help="base directory for every relative path")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", help="build the backbone and pretrain it on clean images")
    for name, text in (("add-task", "expand and train one task"),
                       ("prune", "run structural-entropy pruning on a trained task"),
                       ("finetune", "fine-tune the pruned task and finalize it")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("task")
    sub.add_parser("eval", help="evaluate every finalized task at the latest checkpoint")
    sub.add_parser("run-all", help="pretrain and run the whole task sequence")
    sp = sub.add_parser("se-analyze", help="entropy analysis of an edge-list graph")
    sp.add_argument("edges")
    sp = sub.add_parser("report", help="render a records CSV to markdown")
    sp.add_argument("records", nargs="?")
    sp.add_argument("--out")
    return p


def _split_overrides(argv: list[str]) -> tuple[list[str], dict[str, str]]:
    """Pull ``--key=value`` pairs that are not parser options out of argv."""
    own = {"--workdir", "--config", "--out", "--verbose"}
    rest, overrides = [], {}
    for a in argv:
        if a.startswith("--") and "=" in a and a.split("=", 1)[0] not in own:
            k, v = a[2:].split("=", 1)
            overrides[k] = v
        else:
            rest.append(a)
    return rest, overrides


def run(argv: list[str] | None = None) -> CommandOutcome:
    start = time.time()
    argv = list(sys.argv[1:] if argv is None else argv)
    rest, overrides = _split_overrides(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(rest)
    except SystemExit as exc:
        return CommandOutcome(0 if exc.code == 0 else 1, wall_time=time.time() - start)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    workdir = Path(args.workdir)
    try:
        cfg = parse_config(workdir / args.config if args.config else None, overrides)
        log.info("resolved configuration:\n%s", cfg.echo().rstrip())
        artifacts = HANDLERS[args.command](cfg, workdir, args)
    except (ConfigError, UsageError, GraphError, RecordError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandOutcome(1, wall_time=time.time() - start)
    except (CheckpointError, ModelError, OSError, ValueError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return CommandOutcome(2, wall_time=time.time() - start)
    return CommandOutcome(0, artifacts, time.time() - start)


def main(argv: list[str] | None = None) -> int:
    return run(argv).code


if __name__ == "__main__":
    sys.exit(main())
