import numpy as np
import pytest

from ecmrnet import tensor as T
from ecmrnet.backbone import expand_for_task
from ecmrnet.degradations import build_task_sequence
from ecmrnet.skmm import (BANK_FIELDS, bank_from_arrays, bank_from_model, bank_shapes,
                          hypernet_mining_matrix, mix_and_inject, mix_channels,
                          project_features, skmm_forward)
from ecmrnet.tensor import Tensor
from helpers import span_residual, tiny_model

C, M, R = 4, 6, 2


def random_bank(seed=0, k=2, c=C, dim=M, rank=R, zero_res=False, scale=0.5):
    rng = np.random.default_rng(seed)
    arrays = {n: rng.normal(scale=scale, size=s)
              for n, s in bank_shapes(c, k, dim, rank, 4 * dim).items()}
    if zero_res:
        arrays["res_w"][:] = 0
        arrays["res_b"][:] = 0
    return arrays


def feats(seed, k=2, b=1, c=C, hw=4):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(b, c, hw, hw))), [Tensor(rng.normal(size=(b, c, hw, hw))) for _ in range(k)]


def test_identity_projection_passes_history_through():
    arrays = random_bank(k=1, dim=C)
    w = np.zeros((C, C, 3, 3))
    w[np.arange(C), np.arange(C), 1, 1] = 1.0
    arrays["proj_h_w"], arrays["proj_h_b"] = w, np.zeros(C)
    f_c, hist = feats(0, k=1)
    _, f_h = project_features(f_c, hist, bank_from_arrays(arrays, R))
    np.testing.assert_array_equal(f_h.data, hist[0].data)


def test_zero_projections_give_zero_maps():
    arrays = random_bank()
    for n in ("proj_c_w", "proj_c_b", "proj_h_w", "proj_h_b"):
        arrays[n][:] = 0
    fc_hat, f_h = project_features(*feats(1), bank_from_arrays(arrays, R))
    assert not fc_hat.data.any() and not f_h.data.any()


def test_history_count_mismatch():
    f_c, hist = feats(0, k=3)
    with pytest.raises(ValueError):
        project_features(f_c, hist, bank_from_arrays(random_bank(k=2), R))


def test_zero_hypernet_output_gives_half():
    arrays = random_bank()
    arrays["hyper2_w"][:] = 0
    arrays["hyper2_b"][:] = 0
    bank = bank_from_arrays(arrays, R)
    mm = hypernet_mining_matrix(*project_features(*feats(2), bank), bank)
    assert np.all(mm.A.data == 0.5)


def test_mining_matrix_range_and_rank():
    # weights at initialization scale; float64 sigmoid rounds to exactly 1.0
    # once a logit passes ~37, which no realistic bank reaches
    entries = []
    for seed in range(150):
        bank = bank_from_arrays(random_bank(seed, scale=0.3), R)
        mm = hypernet_mining_matrix(*project_features(*feats(seed, b=2), bank), bank)
        entries.append(mm.A.data.ravel())
        for b in range(2):
            uv = mm.U.data[b] @ mm.V.data[b].T
            assert span_residual(uv, R) < 1e-9
    a = np.concatenate(entries)
    assert a.size >= 10_000
    assert np.all((a > 0) & (a < 1))


def test_zero_residual_is_exact_identity():
    bank = bank_from_arrays(random_bank(zero_res=True), R)
    f_c, hist = feats(3)
    assert np.array_equal(skmm_forward(f_c, hist, bank).data, f_c.data)


def test_saturated_identity_mixing():
    f_h = Tensor(np.random.default_rng(0).normal(size=(1, M, 3, 3)))
    a = Tensor(np.where(np.eye(M, dtype=bool), 1 / (1 + np.exp(-30.0)), 1 / (1 + np.exp(30.0))))
    np.testing.assert_allclose(mix_channels(a, f_h).data, f_h.data, atol=1e-3)


def test_mix_linearity_and_envelope():
    rng = np.random.default_rng(1)
    a = Tensor(rng.random((M, M)))
    f = rng.normal(size=(1, M, 3, 3))
    g = rng.normal(size=(1, M, 3, 3))
    lhs = mix_channels(a, Tensor(f + g)).data
    rhs = mix_channels(a, Tensor(f)).data + mix_channels(a, Tensor(g)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    env = np.abs(f[0]).max(axis=(1, 2)).sum()
    assert np.abs(mix_channels(a, Tensor(f)).data).max() <= env


def test_mix_shape_mismatch():
    with pytest.raises(ValueError):
        mix_channels(Tensor(np.ones((3, 3))), Tensor(np.ones((1, 4, 2, 2))))


def test_end_to_end_gradient():
    arrays = random_bank(5, k=2, c=2, dim=3, rank=1, scale=0.7)
    f_c, hist = feats(6, k=2, c=2, hw=3)
    target = np.random.default_rng(7).normal(size=f_c.shape)
    names = list(BANK_FIELDS)

    def f(*vals):
        bank = bank_from_arrays(dict(zip(names, vals)), 1)
        return T.l1_loss(skmm_forward(f_c, hist, bank), target)
    assert T.finite_diff_check(f, [arrays[n] for n in names]) < 1e-4


def test_sample_adaptivity_and_order_sensitivity():
    bank = bank_from_arrays(random_bank(8, scale=1.0), R)
    a1 = hypernet_mining_matrix(*project_features(*feats(1), bank), bank).A.data
    a2 = hypernet_mining_matrix(*project_features(*feats(2), bank), bank).A.data
    assert np.abs(a1 - a2).max() > 0
    f_c, hist = feats(3)
    _, fh = project_features(f_c, hist, bank)
    _, fh_swapped = project_features(f_c, hist[::-1], bank)
    assert not np.array_equal(fh.data, fh_swapped.data)


def test_bank_registered_on_compound_expansion():
    model = tiny_model()
    seq = {t.task_id: t for t in build_task_sequence()}
    for tid in ("C", "B"):
        expand_for_task(model, seq[tid])
        model.tasks[tid].phase = "final"
        for pid in model.owned_by(tid):
            model.params[pid].trainable = False
    expand_for_task(model, seq["CB"])
    bank = bank_from_model(model, "CB")
    assert bank.constituents == 2 and bank.dim == model.skmm_dim
    assert not bank.res_w.data.any()
    assert all(model.params[f"skmm/CB/{n}"].owner == "CB" for n in BANK_FIELDS)
