"""Per-task training, pruning/fine-tuning and the continual expand-compress-mine loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import (ModelError, ModelState, build_backbone, expand_for_task,
                       fit, forward_task, param_hashes, pretrain, set_trainable, stage_configs,
                       trainable_parameters)
from .degradations import Dataset, TaskSpec, clean_corpus, degrade_corpus, make_sample_pool
from .metrics import batch_metrics
from .records import EvalRecord
from .sep import SepReport, run_sep
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs_train: int = 100
    epochs_finetune: int = 20
    epochs_pretrain: int = 100
    batch: int = 24
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    finetune_lr_scale: float = 0.1
    finetune_candidates: int = 1
    pool_size: int = 300
    rho: float = 0.1
    image_size: int = 256
    n_train: int = 800
    n_test: int = 200
    eval_batch: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs_train", "epochs_finetune", "epochs_pretrain", "batch",
                     "pool_size", "n_train", "n_test", "eval_batch", "finetune_candidates"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.lr_final <= self.lr_init:
            raise ValueError("need 0 < lr_final <= lr_init")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")


# Small enough that the seven-task loop finishes in minutes on one core. The
# learning rates are raised with respect to the 1e-4 -> 1e-6 full-scale schedule
# because the desk runs take roughly 500 steps per task instead of ~100 epochs
# over full-size data.
DESK = TrainConfig(epochs_train=20, epochs_finetune=5, epochs_pretrain=40, batch=8,
                   lr_init=5e-3, lr_final=5e-5, pool_size=32, rho=0.1, image_size=32,
                   n_train=200, n_test=50, finetune_lr_scale=0.3, finetune_candidates=2)


def build_desk_model(seed: int = 0, **kwargs) -> ModelState:
    return build_backbone(stage_configs((8, 16, 16, 8), (2, 4, 4, 2), 2), seed=seed, **kwargs)


@dataclass
class TaskData:
    train: Dataset
    test: Dataset


def make_data(sequence: Sequence[TaskSpec], config: TrainConfig) -> tuple[np.ndarray, dict[str, TaskData]]:
    """Shared clean corpus (train split first, 8:2) and per-task degraded splits."""
    clean = clean_corpus(config.n_train + config.n_test, config.image_size, config.seed)
    tr, te = clean[:config.n_train], clean[config.n_train:]
    data = {}
    for task in sequence:
        data[task.task_id] = TaskData(degrade_corpus(tr, task, config.seed),
                                      degrade_corpus(te, task, config.seed + 1))
    return tr, data


# ---------------------------------------------------------------------------
# inference helpers


def predict(model: ModelState, task_id: str, inputs: np.ndarray, batch: int = 10,
            use_skmm: bool = True) -> np.ndarray:
    outs = []
    for start in range(0, inputs.shape[0], batch):
        out, _ = forward_task(model, inputs[start:start + batch], task_id, use_skmm=use_skmm)
        outs.append(out.data)
    return np.concatenate(outs)


def task_metrics(model: ModelState, task_id: str, ds: Dataset, batch: int = 10,
                 use_skmm: bool = True) -> tuple[float, float]:
    return batch_metrics(predict(model, task_id, ds.degraded, batch, use_skmm), ds.clean)


def count_active_cost(model: ModelState, task_id: str, size: tuple[int, int] = (32, 32)) -> tuple[int, int]:
    """Activated (parameters, multiply-accumulates) of one task's route.

    Counted from the registry arithmetic: shared ends, the task's surviving
    path, its constituents' paths and its mining bank. MACs cover
    convolutions, linear layers and the two matrix products of the mining
    step; norms and activations are excluded.
    """
    if task_id not in model.tasks:
        raise ModelError(f"unknown task {task_id!r}")
    h, w = size
    cfgs = model.configs
    n_stages = len(cfgs)

    def res(s):
        lvl = min(s, n_stages - 1 - s, model.n_down)
        return (h >> lvl) * (w >> lvl)

    c0, cl = cfgs[0].width, cfgs[-1].width
    cb = cfgs[model.n_down - 1].width if model.n_down else c0
    params = (c0 * 9 + c0) + (cb * cb * 9 + cb) + (cl * 9 + 1)
    macs = c0 * 9 * h * w + cb * cb * 9 * (h >> model.n_down) * (w >> model.n_down) + cl * 9 * h * w

    def path_cost(tid):
        p = mac = 0
        for s, cfg in enumerate(cfgs):
            n = len(model.tasks[tid].groups[s])
            m, hid, k = cfg.group_width, cfg.se_hidden, cfg.blocks
            cin = cfgs[max(s - 1, 0)].width
            hw = res(s)
            per_group = 2 * m + m * m * 9 + m + hid * m + hid + m * hid + m
            p += n * m * cin + n * m + n * k * per_group + cfg.width * n * m + cfg.width
            mac += n * m * cin * hw + k * (n * m * m * 9 * hw + n * 2 * hid * m) + cfg.width * n * m * hw
        return p, mac

    tp = model.tasks[task_id]
    for tid in (task_id,) + tuple(tp.constituents):
        p, mac = path_cost(tid)
        params += p
        macs += mac
    if tp.is_compound:
        dim, r, k = model.skmm_dim, model.skmm_rank, len(tp.constituents)
        hid = model.skmm_hidden or 4 * dim
        params += (dim * cl * 9 + dim) + (dim * k * cl * 9 + dim) + (hid * 2 * dim + hid)
        params += (2 * dim * r * hid + 2 * dim * r) + (cl * dim * 9 + cl)
        macs += (dim * cl * 9 + dim * k * cl * 9 + cl * dim * 9) * h * w
        macs += 2 * dim * hid + hid * 2 * dim * r + dim * dim * r + dim * dim * h * w
    return int(params), int(macs)


def evaluate(model: ModelState, tasks: Sequence[str], test_sets: dict[str, Dataset],
             checkpoint_after: str = "", batch: int = 10) -> list[EvalRecord]:
    """PSNR/SSIM of each task on its test split; never mutates the model."""
    records = []
    for tid in tasks:
        tp = model.tasks.get(tid)
        if tp is None:
            raise ModelError(f"unknown task {tid!r}")
        if tp.phase == "training":
            raise ModelError(f"task {tid!r} is not finalized")
        ds = test_sets[tid]
        psnr_db, ssim_v = task_metrics(model, tid, ds, batch)
        params, macs = count_active_cost(model, tid, ds.clean.shape[-2:])
        records.append(EvalRecord(tid, checkpoint_after, psnr_db, ssim_v, params, macs, time.time()))
    return records


# ---------------------------------------------------------------------------
# training


def _history_cache(model: ModelState, task_id: str, inputs: np.ndarray, batch: int) -> list[np.ndarray] | None:
    """Constituent features are frozen, so compute them once per input."""
    from .backbone import path_features, task_prefix

    tp = model.tasks[task_id]
    if not tp.is_compound:
        return None
    cache = []
    for c in model.registration_order(tp.constituents):
        chunks = []
        for start in range(0, inputs.shape[0], batch):
            x = Tensor(inputs[start:start + batch], copy=False)
            chunks.append(path_features(model, task_prefix(c), model.tasks[c].groups, x).data)
        cache.append(np.concatenate(chunks))
    return cache


def _task_loss_fn(model: ModelState, task_id: str, inputs: np.ndarray):
    from .backbone import path_features, reconstruct, task_prefix
    from .skmm import bank_from_model, skmm_forward

    tp = model.tasks[task_id]
    cache = _history_cache(model, task_id, inputs, 25)

    def loss_fn(idx, yb):
        x = Tensor(inputs[idx], copy=False)
        feats = path_features(model, task_prefix(task_id), tp.groups, x)
        if cache is not None:
            hist = [Tensor(c[idx], copy=False) for c in cache]
            feats = skmm_forward(feats, hist, bank_from_model(model, task_id))
        return T.l1_loss(reconstruct(model, feats, x), Tensor(yb, copy=False))

    return loss_fn


def _fit_task(model, task_id, ds: Dataset, epochs, batch, lr_init, lr_final, seed, on_epoch=None):
    ids = trainable_parameters(model, task_id)
    set_trainable(model, ids, True)
    loss_fn = _task_loss_fn(model, task_id, ds.degraded)
    positions = np.arange(len(ds))
    return fit(model, loss_fn, ids, positions, ds.clean, epochs, batch, lr_init, lr_final,
               seed, on_epoch)


def _check_history_frozen(model: ModelState, task_id: str) -> None:
    tp = model.tasks.get(task_id)
    if tp is None:
        raise ModelError(f"task {task_id!r} not expanded")
    if tp.phase != "training":
        raise ModelError(f"task {task_id!r} is finalized")
    for other in model.tasks.values():
        if other.task_id != task_id and other.phase == "training":
            raise ModelError(f"task {other.task_id!r} is not finalized")


def train_task(model: ModelState, task: TaskSpec | str, data: Dataset, config: TrainConfig) -> list[float]:
    """Train only the task's own parameters on its data, then freeze them."""
    tid = task if isinstance(task, str) else task.task_id
    _check_history_frozen(model, tid)
    curve = _fit_task(model, tid, data, config.epochs_train, config.batch,
                      config.lr_init, config.lr_final, config.seed)
    set_trainable(model, model.owned_by(tid), False)
    model.tasks[tid].phase = "trained"
    return curve


@dataclass
class FinetuneResult:
    loss_curve: list[float]
    psnr_curve: list[float]
    monitor_before: float
    monitor_after: float
    attempts: int
    accepted: bool


def finetune(model: ModelState, task_id: str, data: Dataset, config: TrainConfig,
             monitor: Dataset | None = None, test: Dataset | None = None) -> FinetuneResult:
    """Recover a pruned task path by a short cosine restart at a reduced rate.

    The surviving parameters are the trainable set. ``finetune_candidates``
    restarts run from the post-prune state at ``finetune_lr_scale`` times
    1, 1/3, 1/9, ... of ``lr_init``; the one with the best monitor PSNR is
    kept. If even that ends below the post-prune monitor value, one more
    run at a tenth of the smallest rate is tried, and failing that the
    post-prune parameters are restored. ``test`` (optional) is evaluated
    after every epoch for the recovery curve; it never influences the choice.
    """
    tp = model.tasks[task_id]
    if tp.phase == "final":
        raise ModelError(f"task {task_id!r} is finalized")
    monitor = monitor or data
    ids = model.owned_by(task_id)
    saved = {pid: model.params[pid].value for pid in ids}
    before = task_metrics(model, task_id, monitor, config.eval_batch)[0]
    lr0 = config.lr_init * config.finetune_lr_scale
    lr1 = min(config.lr_final, lr0)
    scales = [3.0 ** -k for k in range(config.finetune_candidates)]
    best = None      # (monitor psnr, values, loss curve, psnr curve)
    attempts = 0

    def attempt(scale):
        nonlocal attempts
        attempts += 1
        for pid, val in saved.items():
            model.params[pid].value = val
        psnr_curve: list[float] = []
        tp.phase = "training"

        def on_epoch(_epoch):
            if test is not None:
                psnr_curve.append(task_metrics(model, task_id, test, config.eval_batch)[0])

        loss_curve = _fit_task(model, task_id, data, config.epochs_finetune, config.batch,
                               lr0 * scale, lr1 * scale, config.seed + 1000 + attempts, on_epoch)
        set_trainable(model, ids, False)
        tp.phase = "trained"
        after = task_metrics(model, task_id, monitor, config.eval_batch)[0]
        return after, {pid: model.params[pid].value for pid in ids}, loss_curve, psnr_curve

    for scale in scales:
        res = attempt(scale)
        if best is None or res[0] > best[0]:
            best = res
    if best[0] < before:
        res = attempt(scales[-1] * 0.1)
        if res[0] > best[0]:
            best = res
    accepted = best[0] >= before
    for pid, val in (best[1] if accepted else saved).items():
        model.params[pid].value = val
    return FinetuneResult(best[2], best[3], before, best[0] if accepted else before,
                          attempts, accepted)


def finalize(model: ModelState, task_id: str) -> None:
    set_trainable(model, model.owned_by(task_id), False)
    model.tasks[task_id].phase = "final"


# ---------------------------------------------------------------------------
# the continual loop


@dataclass
class TaskLog:
    task_id: str
    loss_curve: list[float] = field(default_factory=list)
    psnr_degraded: float = 0.0
    psnr_pre_prune: float = 0.0
    psnr_post_prune: float = 0.0
    psnr_final: float = 0.0
    recovery_curve: list[float] = field(default_factory=list)
    finetune_accepted: bool = True
    sep: SepReport | None = None
    group_counts: list[int] = field(default_factory=list)
    expected_group_counts: list[int] = field(default_factory=list)


@dataclass
class RunLog:
    records: list[EvalRecord] = field(default_factory=list)
    tasks: dict[str, TaskLog] = field(default_factory=dict)
    hashes: dict[str, dict[str, str]] = field(default_factory=dict)
    pretrain_curve: list[float] = field(default_factory=list)


def expected_group_counts(model: ModelState, pruned: dict[str, list[int]]) -> list[int]:
    """Group growth: template plus G_ori per task, minus pruned groups."""
    t = len(model.tasks)
    return [(t + 1) * cfg.groups - sum(p[s] for p in pruned.values())
            for s, cfg in enumerate(model.configs)]


def continual_run(model: ModelState, sequence: Sequence[TaskSpec], data: dict[str, TaskData],
                  config: TrainConfig, log_: RunLog | None = None) -> tuple[ModelState, RunLog]:
    """expand -> train -> prune -> fine-tune -> finalize -> evaluate all, per task."""
    if not model.pretrained:
        raise ModelError("pretraining must come first")
    run = log_ or RunLog()
    done: list[str] = [t for t in model.tasks]
    pruned: dict[str, list[int]] = {}
    for task in sequence:
        tid = task.task_id
        tl = TaskLog(tid)
        ds = data[tid]
        tl.psnr_degraded = batch_metrics(ds.test.degraded, ds.test.clean)[0]
        expand_for_task(model, task)
        tl.loss_curve = train_task(model, task, ds.train, config)
        tl.psnr_pre_prune = task_metrics(model, tid, ds.test, config.eval_batch)[0]
        pool = make_sample_pool(task, config.pool_size, config.seed, config.image_size,
                                clean=ds.train.clean)
        before = [len(g) for g in model.tasks[tid].groups]
        _, tl.sep = run_sep(model, tid, pool, config.rho)
        pruned[tid] = [b - len(g) for b, g in zip(before, model.tasks[tid].groups)]
        tl.psnr_post_prune = task_metrics(model, tid, ds.test, config.eval_batch)[0]
        n_mon = min(len(ds.train), 50)
        monitor = Dataset(ds.train.degraded[:n_mon], ds.train.clean[:n_mon])
        ft = finetune(model, tid, ds.train, config, monitor=monitor, test=ds.test)
        tl.recovery_curve = ft.psnr_curve if ft.accepted else [tl.psnr_post_prune] * len(ft.psnr_curve)
        tl.finetune_accepted = ft.accepted
        finalize(model, tid)
        done.append(tid)
        tl.group_counts = model.group_counts()
        tl.expected_group_counts = expected_group_counts(model, pruned)
        recs = evaluate(model, done, {t: data[t].test for t in done}, tid, config.eval_batch)
        run.records.extend(recs)
        tl.psnr_final = next(r.psnr_db for r in recs if r.task_id == tid)
        run.hashes[tid] = param_hashes(model)
        run.tasks[tid] = tl
        log.info("task %s: degraded %.2f dB, pre-prune %.2f, post-prune %.2f, final %.2f, params %d -> %d",
                 tid, tl.psnr_degraded, tl.psnr_pre_prune, tl.psnr_post_prune, tl.psnr_final,
                 tl.sep.params_before, tl.sep.params_after)
    return model, run


def full_run(config: TrainConfig = DESK, sequence: Sequence[TaskSpec] | None = None,
             model: ModelState | None = None) -> tuple[ModelState, RunLog, dict[str, TaskData]]:
    """Pretrain on the clean train split, then run the whole sequence."""
    from .degradations import build_task_sequence

    sequence = list(sequence or build_task_sequence())
    model = model or build_desk_model(config.seed)
    clean_train, data = make_data(sequence, config)
    run = RunLog()
    run.pretrain_curve = pretrain(model, clean_train, config.epochs_pretrain, config.batch,
                                  config.lr_init * 2, config.lr_final * 2, config.seed)
    model, run = continual_run(model, sequence, data, config, run)
    return model, run, data
