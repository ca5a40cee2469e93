"""Sub-degradation knowledge mining.

The compound branch's final-stage features and the concatenated features of
its constituent branches are projected to a shared M-channel space. A small
hypernetwork reads their pooled descriptors and emits low-rank factors
U, V (M x R); ``A = sigmoid(U V^T)`` mixes the history channels, and the
mixed map is injected back into the compound features as a residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

BANK_FIELDS = ("proj_c_w", "proj_c_b", "proj_h_w", "proj_h_b",
               "hyper1_w", "hyper1_b", "hyper2_w", "hyper2_b", "res_w", "res_b")


@dataclass
class SkmmBank:
    proj_c_w: Tensor   # (M, C, 3, 3)
    proj_c_b: Tensor
    proj_h_w: Tensor   # (M, K*C, 3, 3)
    proj_h_b: Tensor
    hyper1_w: Tensor   # (hidden, 2M)
    hyper1_b: Tensor
    hyper2_w: Tensor   # (2*M*R, hidden)
    hyper2_b: Tensor
    res_w: Tensor      # (C, M, 3, 3)
    res_b: Tensor
    rank: int

    @property
    def dim(self) -> int:
        return self.proj_c_w.shape[0]

    @property
    def constituents(self) -> int:
        return self.proj_h_w.shape[1] // self.proj_c_w.shape[1]


@dataclass
class MiningMatrix:
    U: Tensor   # (B, M, R)
    V: Tensor   # (B, M, R)
    A: Tensor   # (B, M, M)


def bank_shapes(channels: int, k: int, dim: int, rank: int, hidden: int) -> dict[str, tuple]:
    return {
        "proj_c_w": (dim, channels, 3, 3), "proj_c_b": (dim,),
        "proj_h_w": (dim, k * channels, 3, 3), "proj_h_b": (dim,),
        "hyper1_w": (hidden, 2 * dim), "hyper1_b": (hidden,),
        "hyper2_w": (2 * dim * rank, hidden), "hyper2_b": (2 * dim * rank,),
        "res_w": (channels, dim, 3, 3), "res_b": (channels,),
    }


def init_skmm_bank(model, task_id: str, k: int) -> None:
    """Register the bank parameters ``skmm/<task>/<name>`` on the model."""
    from .backbone import he_normal

    dim, rank = model.skmm_dim, model.skmm_rank
    hidden = model.skmm_hidden or 4 * dim
    for name, shape in bank_shapes(model.out_width, k, dim, rank, hidden).items():
        pid = f"skmm/{task_id}/{name}"
        if name.endswith("_b") or name == "res_w":
            # zero residual map: the branch starts as the identity on F_c
            val = np.zeros(shape)
        elif name.startswith("proj"):
            val = he_normal(model.seed, pid, shape, shape[1] * 9, gain=1.0)
        else:
            val = he_normal(model.seed, pid, shape, shape[1], gain=1.0)
        model.add_param(pid, val, task_id, True)


def bank_from_model(model, task_id: str) -> SkmmBank:
    return SkmmBank(**{f: model.param(f"skmm/{task_id}/{f}") for f in BANK_FIELDS},
                    rank=model.skmm_rank)


def bank_from_arrays(arrays: dict, rank: int, requires_grad: bool = False) -> SkmmBank:
    return SkmmBank(**{f: arrays[f] if isinstance(arrays[f], Tensor)
                       else Tensor(arrays[f], requires_grad=requires_grad, name=f)
                       for f in BANK_FIELDS}, rank=rank)


def _batched(x: Tensor) -> Tensor:
    return T.reshape(x, (1,) + x.shape) if x.ndim == 3 else x


def project_features(f_c: Tensor, history, bank: SkmmBank) -> tuple[Tensor, Tensor]:
    """Align compound and history features in the M-channel latent space."""
    history = list(history)
    if not history:
        raise ValueError("need at least one history feature")
    if len(history) != bank.constituents:
        raise ValueError(f"bank expects {bank.constituents} history features, got {len(history)}")
    f_c = _batched(f_c)
    hist = T.channel_concat([_batched(h) for h in history])
    fc_hat = T.conv2d(f_c, bank.proj_c_w, bank.proj_c_b, padding=1)
    f_h = T.conv2d(hist, bank.proj_h_w, bank.proj_h_b, padding=1)
    return fc_hat, f_h


def hypernet_mining_matrix(fc_hat: Tensor, f_h: Tensor, bank: SkmmBank) -> MiningMatrix:
    fc_hat, f_h = _batched(fc_hat), _batched(f_h)
    b, dim = fc_hat.shape[:2]
    r = bank.rank
    desc = T.concat([T.global_avg_pool(fc_hat), T.global_avg_pool(f_h)], axis=1)
    z = T.gelu(T.linear(desc, bank.hyper1_w, bank.hyper1_b))
    z = T.linear(z, bank.hyper2_w, bank.hyper2_b)
    u = T.reshape(T.take_last(z, 0, dim * r), (b, dim, r))
    v = T.reshape(T.take_last(z, dim * r, 2 * dim * r), (b, dim, r))
    a = T.sigmoid(T.matmul(u, T.transpose(v, (0, 2, 1))))
    return MiningMatrix(u, v, a)


def mix_channels(a: Tensor, f_h: Tensor) -> Tensor:
    """Channel i of the result is sum_j A[i, j] * F_h[j]."""
    f_h = _batched(f_h)
    b, dim, h, w = f_h.shape
    if a.ndim == 2:
        a = T.reshape(a, (1,) + a.shape)
    if a.shape[-2:] != (dim, dim):
        raise ValueError(f"mining matrix {a.shape} does not match {dim} channels")
    mixed = T.matmul(a, T.reshape(f_h, (b, dim, h * w)))
    return T.reshape(mixed, (b, dim, h, w))


def mix_and_inject(f_c: Tensor, f_h: Tensor, a: Tensor, bank: SkmmBank) -> Tensor:
    f_mix = mix_channels(a, f_h)
    return T.add(_batched(f_c), T.conv2d(f_mix, bank.res_w, bank.res_b, padding=1))


def skmm_forward(f_c: Tensor, history, bank: SkmmBank) -> Tensor:
    fc_hat, f_h = project_features(f_c, history, bank)
    mm = hypernet_mining_matrix(fc_hat, f_h, bank)
    return mix_and_inject(f_c, f_h, mm.A, bank)
