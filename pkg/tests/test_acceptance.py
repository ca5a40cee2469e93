"""Acceptance criteria, one test per criterion.

The desk run (pretrain plus the seven-task sequence) is executed once per
session; criteria 2 and 5 to 11 read from it. Measured values are collected
in ``ACCEPTANCE`` and printed in the terminal summary.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from ecmrnet.backbone import expand_for_task, forward_task, param_hashes, path_features, task_prefix
from ecmrnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ecmrnet.degradations import build_task_sequence, clean_corpus, degrade_corpus, make_sample_pool
from ecmrnet.sep import (Partition, SimilarityGraph, detachment_cost, detachment_cost_incremental,
                         minimize_2dse_exact, minimize_2dse_greedy, one_dim_entropy_terms,
                         retention_for_sample, run_sep, two_dim_se)
from ecmrnet.skmm import bank_from_arrays, bank_from_model, hypernet_mining_matrix, project_features, skmm_forward
from ecmrnet.tensor import Tensor
from ecmrnet.trainer import DESK, count_active_cost, full_run, task_metrics, train_task
from gradcases import CASES, conditioned_seeds, worst_error
from helpers import one_stage_fixture, random_graph, span_residual, tiny_model

ACCEPTANCE: dict[str, object] = {}
COMPOUNDS = ("CB", "CN", "BN", "CBN")
ORDER = ("C", "B", "N", "CB", "CN", "BN", "CBN")


@pytest.fixture(scope="session")
def desk():
    t0 = time.perf_counter()
    model, run, data = full_run(DESK)
    elapsed = time.perf_counter() - t0
    ACCEPTANCE["desk run seconds"] = round(elapsed, 1)
    return model, run, data, elapsed


def test_criterion_01_autodiff_soundness():
    t0 = time.perf_counter()
    worst, rejected = {}, 0
    for name in sorted(CASES):
        seeds, rej = conditioned_seeds(name, 20)
        rejected += rej
        assert len(seeds) >= 20
        worst[name] = max(worst_error(name, s) for s in seeds)
    elapsed = time.perf_counter() - t0
    ACCEPTANCE["grad max rel err"] = f"{max(worst.values()):.2e} over {len(worst)} ops"
    ACCEPTANCE["grad ill-conditioned instances skipped"] = rejected
    assert max(worst.values()) < 1e-5, {k: v for k, v in worst.items() if v >= 1e-5}
    assert elapsed < 60


def test_criterion_02_zero_forgetting(desk):
    model, run, _, elapsed = desk
    at_final = {(r.task_id): (r.psnr_db, r.ssim) for r in run.records if r.task_id == r.checkpoint_after}
    assert set(at_final) == set(ORDER)
    later = [r for r in run.records if r.task_id != r.checkpoint_after]
    assert len(later) == 21
    for r in later:
        assert (r.psnr_db, r.ssim) == at_final[r.task_id], r
    ckpts = [run.hashes[t] for t in ORDER]
    for i, earlier in enumerate(ckpts):
        for after in ckpts[i + 1:]:
            assert {k: after.get(k) for k in earlier} == earlier
    assert param_hashes(model) == ckpts[-1]
    assert elapsed < 15 * 60


def test_criterion_03_2dse_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    for _ in range(100):
        g = random_graph(rng, int(rng.integers(2, 13)))
        assert abs(two_dim_se(g, Partition.singletons(g.n)) - one_dim_entropy_terms(g).sum()) <= 1e-12
    disjoint = SimilarityGraph(np.array([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], float))
    assert abs(two_dim_se(disjoint, minimize_2dse_exact(disjoint)) - math.log(2)) <= 1e-12
    assert abs(two_dim_se(disjoint, minimize_2dse_greedy(disjoint)) - math.log(2)) <= 1e-12
    rng = np.random.default_rng(1)
    close = 0
    for _ in range(200):
        g = random_graph(rng, int(rng.integers(2, 9)), density=float(rng.uniform(0.2, 1.0)))
        best = two_dim_se(g, minimize_2dse_exact(g))
        close += two_dim_se(g, minimize_2dse_greedy(g)) <= best * 1.05 + 1e-12
    ACCEPTANCE["greedy within 5% of exact"] = f"{close}/200"
    assert close >= 190
    assert time.perf_counter() - t0 < 120


def test_criterion_04_detachment_consistency():
    rng = np.random.default_rng(2)
    for _ in range(100):
        g = random_graph(rng, int(rng.integers(2, 10)))
        part = Partition(tuple(int(a) for a in rng.integers(0, 3, g.n)))
        for o in range(g.n):
            direct = detachment_cost(g, part, o)
            assert abs(direct - detachment_cost_incremental(g, part, o)) <= 1e-9
            if len(part.cluster_of(o)) == 1:
                assert direct == 0.0 and detachment_cost_incremental(g, part, o) == 0.0
        keeps = []
        for c in (0.1, 1.0, 10.0):
            gs = SimilarityGraph(g.weights * c)
            keeps.append(retention_for_sample(gs, part, [detachment_cost(gs, part, o)
                                                         for o in range(g.n)]))
        assert all(np.array_equal(keeps[0], k) for k in keeps[1:])


def _duplicate_group(model, tid, s, src, dst):
    m = model.configs[s].group_width
    pre = f"{task_prefix(tid)}/s{s}"
    for pid in [p for p in model.params if p.startswith(f"{pre}/g{src}/")]:
        model.params[pid.replace(f"/g{src}/", f"/g{dst}/")].value = model.params[pid].value.copy()
    for name in ("weight", "bias"):
        w = model.params[f"{pre}/head/{name}"]
        w.value = w.value.copy()
        w.value[dst * m:(dst + 1) * m] = w.value[src * m:(src + 1) * m]


def test_criterion_05_pruning_efficacy(desk):
    # engineered duplicate on a freshly trained task
    model = tiny_model()
    task = build_task_sequence()[0]
    expand_for_task(model, task)
    ds = degrade_corpus(clean_corpus(16, 16, 0), task, 0)
    train_task(model, task, ds, dataclasses.replace(DESK, epochs_train=2, batch=4, image_size=16))
    _duplicate_group(model, "C", 1, 0, 3)
    pool = make_sample_pool(task, 8, 0, 16, clean=ds.clean)
    _, rep = run_sep(model, "C", pool, 0.1)
    assert len(rep.retained[1]) < 4 and not {0, 3} <= set(rep.retained[1])

    _, run, _, _ = desk
    reduced = [t for t in ORDER if run.tasks[t].sep.params_after < run.tasks[t].sep.params_before]
    gaps = {t: run.tasks[t].psnr_pre_prune - run.tasks[t].psnr_final for t in ORDER}
    mean_gap = float(np.mean(list(gaps.values())))
    ACCEPTANCE["SEP reduced tasks"] = f"{len(reduced)}/7 ({', '.join(reduced)})"
    ACCEPTANCE["pre-prune minus final PSNR (dB)"] = {t: round(g, 3) for t, g in gaps.items()}
    ACCEPTANCE["mean pre-prune minus final PSNR (dB)"] = round(mean_gap, 3)
    assert len(reduced) >= 5
    assert mean_gap <= 0.5


def _recovered(tl, epoch):
    gap = tl.psnr_pre_prune - tl.psnr_post_prune
    if gap <= 0:
        return 1.0
    return min(1.0, (tl.recovery_curve[epoch - 1] - tl.psnr_post_prune) / gap)


def test_criterion_06_recovery_curve(desk):
    _, run, _, _ = desk
    at = {e: float(np.mean([_recovered(run.tasks[t], e) for t in ORDER])) for e in (2, 3, 4)}
    ACCEPTANCE["mean gap recovered at epochs 2/3/4"] = {e: round(v, 3) for e, v in at.items()}
    assert at[3] >= 0.9 or at[4] >= 0.9          # +-1 epoch tolerance


def test_criterion_07_skmm_value(desk):
    model, _, data, _ = desk
    gains = {}
    for t in COMPOUNDS:
        on = task_metrics(model, t, data[t].test, DESK.eval_batch)[0]
        off = task_metrics(model, t, data[t].test, DESK.eval_batch, use_skmm=False)[0]
        gains[t] = on - off
    ACCEPTANCE["SKMM on minus off (dB)"] = {t: round(g, 3) for t, g in gains.items()}
    ACCEPTANCE["SKMM mean improvement (dB)"] = round(float(np.mean(list(gains.values()))), 3)
    assert all(g > 0 for g in gains.values())
    assert np.mean(list(gains.values())) > 0


def test_criterion_08_skmm_structure(desk):
    model, _, data, _ = desk
    worst_rank = 0.0
    for t in COMPOUNDS:
        tp = model.tasks[t]
        bank = bank_from_model(model, t)
        x = Tensor(data[t].test.degraded[:4])
        f_c = path_features(model, task_prefix(t), tp.groups, x)
        hist = [path_features(model, task_prefix(c), model.tasks[c].groups, x)
                for c in model.registration_order(tp.constituents)]
        mm = hypernet_mining_matrix(*project_features(f_c, hist, bank), bank)
        a = mm.A.data
        assert np.all((a > 0) & (a < 1))
        for b in range(a.shape[0]):
            worst_rank = max(worst_rank, span_residual(mm.U.data[b] @ mm.V.data[b].T, bank.rank))
        arrays = {k: getattr(bank, k).data.copy() for k in bank.__dataclass_fields__ if k != "rank"}
        arrays["res_w"][:] = 0
        arrays["res_b"][:] = 0
        zeroed = bank_from_arrays(arrays, bank.rank)
        assert np.array_equal(skmm_forward(f_c, hist, zeroed).data, f_c.data)
    ACCEPTANCE["span residual beyond rank 8"] = f"{worst_rank:.1e}"
    assert model.skmm_rank == 8 and worst_rank < 1e-9


def test_criterion_09_restoration_and_bookkeeping(desk):
    model, run, _, _ = desk
    for t in ORDER:
        tl = run.tasks[t]
        ACCEPTANCE[f"{t} degraded/trained/pruned/final dB, params"] = (
            f"{tl.psnr_degraded:.2f} / {tl.psnr_pre_prune:.2f} / {tl.psnr_post_prune:.2f} / "
            f"{tl.psnr_final:.2f}, {tl.sep.params_before} -> {tl.sep.params_after}, "
            f"kept {tl.sep.retained}")
    gain = {t: run.tasks[t].psnr_pre_prune - run.tasks[t].psnr_degraded for t in ORDER}
    ACCEPTANCE["trained path over degraded input (dB)"] = {t: round(g, 2) for t, g in gain.items()}
    ACCEPTANCE["final path over degraded input (dB)"] = {
        t: round(run.tasks[t].psnr_final - run.tasks[t].psnr_degraded, 2) for t in ORDER}
    assert all(g >= 1.0 for g in gain.values())
    for t in ORDER:
        assert run.tasks[t].group_counts == run.tasks[t].expected_group_counts
    # C_s from parameter shapes: every head's rows across template and task paths
    for s, cfg in enumerate(model.configs):
        rows = sum(p.value.shape[0] for pid, p in model.params.items()
                   if pid.endswith(f"/s{s}/head/weight"))
        assert rows == model.channel_counts()[s] == model.group_counts()[s] * cfg.group_width


def test_criterion_10_cost_accounting(desk):
    fixture, params, macs = one_stage_fixture()
    assert count_active_cost(fixture, "C", (8, 8)) == (params, macs)
    model, _, _, _ = desk
    costs = {t: count_active_cost(model, t) for t in ORDER}
    ACCEPTANCE["activated params / MACs at 32x32"] = costs
    for comp in COMPOUNDS:
        for single in model.tasks[comp].constituents:
            assert costs[single][0] < costs[comp][0] and costs[single][1] < costs[comp][1]
    for t in ORDER:
        model._reads = set()
        forward_task(model, np.zeros((1, 1, 32, 32)), t)
        read = sum(model.params[p].size for p in model._reads)
        model._reads = None
        assert read == costs[t][0]


def test_criterion_11_persistence(desk, tmp_path):
    model, _, _, _ = desk
    path = save_checkpoint(model, tmp_path / "final")
    back = load_checkpoint(path)
    rng = np.random.default_rng(11)
    for _ in range(10):
        x = rng.random((1, 1, 32, 32))
        for t in ORDER:
            assert forward_task(model, x, t)[0].data.tobytes() == forward_task(back, x, t)[0].data.tobytes()
    blob = (path / "parameters.bin").read_bytes()
    (path / "parameters.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
