"""Group-isolated U-Net, self-reconstruction pretraining and per-task expansion.

Every stage mixes channels only in its 1x1 head and tail convolutions; the
stage body is a stack of GResBlocks whose parameters never couple two
channel groups. A task owns its own head rows, groups and tail, so freezing
everything it does not own isolates its gradients exactly.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .degradations import TaskSpec
from .optim import AdamState, adam_step, cosine_lr
from .tensor import Tensor

SHARED = "__shared__"
TEMPLATE = "__template__"
BLOCK_FIELDS = ("gamma", "beta", "conv_w", "conv_b", "se1_w", "se1_b", "se2_w", "se2_b")


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    width: int
    groups: int
    blocks: int = 2

    def __post_init__(self):
        if self.width < 1 or self.groups < 1 or self.blocks < 1:
            raise ValueError(f"invalid stage config {self}")
        if self.width % self.groups:
            raise ValueError(f"width {self.width} not divisible by {self.groups} groups")

    @property
    def group_width(self) -> int:
        return self.width // self.groups

    @property
    def se_hidden(self) -> int:
        return math.ceil(self.group_width / 2)


FULL_STAGES = tuple(StageConfig(w, g) for w, g in
                     zip((32, 128, 512, 512, 128, 32), (8, 16, 32, 32, 16, 8)))
DESK_STAGES = tuple(StageConfig(w, g) for w, g in zip((8, 16, 16, 8), (2, 4, 4, 2)))


def stage_configs(widths: Sequence[int], groups: Sequence[int], blocks: int = 2) -> list[StageConfig]:
    if len(widths) != len(groups):
        raise ValueError("widths and groups must have equal length")
    return [StageConfig(int(w), int(g), blocks) for w, g in zip(widths, groups)]


@dataclass
class Parameter:
    id: str
    value: np.ndarray
    trainable: bool = False
    owner: str = SHARED

    @property
    def size(self) -> int:
        return int(self.value.size)


@dataclass
class TaskPath:
    """Registry entry for one task.

    ``groups[s]`` lists the original indices of the task's surviving groups
    at stage ``s``; their order is the channel order of the head rows and
    tail columns. ``phase`` is one of "training", "trained", "final".
    """

    task_id: str
    composition: tuple[str, ...]
    constituents: tuple[str, ...]
    groups: list[list[int]]
    phase: str = "training"

    @property
    def is_compound(self) -> bool:
        return bool(self.constituents)


@dataclass
class GResBlockParams:
    """Stacked per-group tensors of one block.

    gamma/beta/conv_b: (C,), conv_w: (C, m, 3, 3), se1_w: (g, h, m),
    se1_b: (g, h), se2_w: (g, m, h), se2_b: (g, m).
    """

    gamma: Tensor
    beta: Tensor
    conv_w: Tensor
    conv_b: Tensor
    se1_w: Tensor
    se1_b: Tensor
    se2_w: Tensor
    se2_b: Tensor


@dataclass
class ModelState:
    configs: list[StageConfig]
    seed: int = 0
    dtype: str = "float64"
    global_residual: bool = False
    head_init: str = "copy"
    skmm_dim: int = 32
    skmm_rank: int = 8
    skmm_hidden: int | None = None
    params: dict[str, Parameter] = field(default_factory=dict)
    tasks: dict[str, TaskPath] = field(default_factory=dict)
    pretrained: bool = False
    _reads: set | None = field(default=None, repr=False, compare=False)

    @property
    def n_down(self) -> int:
        return len(self.configs) // 2

    @property
    def out_width(self) -> int:
        return self.configs[-1].width

    def param(self, pid: str) -> Tensor:
        p = self.params[pid]
        if self._reads is not None:
            self._reads.add(pid)
        return Tensor(p.value, requires_grad=p.trainable, name=pid, copy=False)

    def add_param(self, pid: str, value: np.ndarray, owner: str, trainable: bool = False) -> None:
        if pid in self.params:
            raise ModelError(f"duplicate parameter id {pid!r}")
        value = np.asarray(value, dtype=self.dtype)
        self.params[pid] = Parameter(pid, value, trainable, owner)

    def owned_by(self, owner: str) -> list[str]:
        return [pid for pid, p in self.params.items() if p.owner == owner]

    def group_counts(self) -> list[int]:
        """G_s: template groups plus every task's surviving groups per stage."""
        return [cfg.groups + sum(len(tp.groups[s]) for tp in self.tasks.values())
                for s, cfg in enumerate(self.configs)]

    def channel_counts(self) -> list[int]:
        return [g * cfg.group_width for g, cfg in zip(self.group_counts(), self.configs)]

    def registration_order(self, task_ids: Sequence[str]) -> list[str]:
        order = list(self.tasks)
        return sorted(task_ids, key=order.index)


# ---------------------------------------------------------------------------
# construction


def _rng_for(seed: int, pid: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(pid.encode())])


def he_normal(seed: int, pid: str, shape: tuple[int, ...], fan_in: int, gain: float = 2.0) -> np.ndarray:
    return _rng_for(seed, pid).standard_normal(shape) * math.sqrt(gain / fan_in)


def _head_in(model: ModelState, s: int) -> int:
    return model.configs[max(s - 1, 0)].width


def _add_stage_params(model: ModelState, prefix: str, s: int, groups: Sequence[int],
                      owner: str, trainable: bool) -> None:
    cfg = model.configs[s]
    m, h, cin = cfg.group_width, cfg.se_hidden, _head_in(model, s)
    n = len(groups)
    seed = model.seed
    pid = f"{prefix}/s{s}/head/weight"
    model.add_param(pid, he_normal(seed, pid, (n * m, cin, 1, 1), cin), owner, trainable)
    model.add_param(f"{prefix}/s{s}/head/bias", np.zeros(n * m), owner, trainable)
    for o in groups:
        for k in range(cfg.blocks):
            base = f"{prefix}/s{s}/g{o}/b{k}"
            shapes = {
                "gamma": (m,), "beta": (m,), "conv_w": (m, m, 3, 3), "conv_b": (m,),
                "se1_w": (h, m), "se1_b": (h,), "se2_w": (m, h), "se2_b": (m,),
            }
            for name, shape in shapes.items():
                pid = f"{base}/{name}"
                if name == "gamma":
                    val = np.ones(shape)
                elif name.endswith("_b") or name == "beta":
                    val = np.zeros(shape)
                elif name == "conv_w":
                    # residual branch starts small so stacked blocks stay near identity
                    val = he_normal(seed, pid, shape, m * 9, gain=0.5)
                else:
                    val = he_normal(seed, pid, shape, shape[1])
                model.add_param(pid, val, owner, trainable)
    pid = f"{prefix}/s{s}/tail/weight"
    model.add_param(pid, he_normal(seed, pid, (cfg.width, n * m, 1, 1), n * m), owner, trainable)
    model.add_param(f"{prefix}/s{s}/tail/bias", np.zeros(cfg.width), owner, trainable)


def build_backbone(configs: Sequence[StageConfig], seed: int = 0, dtype: str = "float64",
                   global_residual: bool = False, head_init: str = "copy",
                   skmm_dim: int = 32, skmm_rank: int = 8,
                   skmm_hidden: int | None = None) -> ModelState:
    """Initialize shared ends and the template stage parameters from ``seed``."""
    configs = [c if isinstance(c, StageConfig) else StageConfig(*c) for c in configs]
    if not configs:
        raise ValueError("need at least one stage")
    n = len(configs)
    for s in range(n // 2):
        if configs[s].width != configs[n - 1 - s].width:
            raise ValueError("mirror stages must share a width for additive skips")
    if head_init not in ("copy", "he"):
        raise ValueError(f"unknown head_init {head_init!r}")
    if not 0 < skmm_rank < skmm_dim:
        raise ValueError("need 0 < rank < mining dimension")
    model = ModelState(list(configs), seed, dtype, global_residual, head_init,
                       skmm_dim, skmm_rank, skmm_hidden)
    c0 = configs[0].width
    cb = configs[model.n_down - 1].width if model.n_down else c0
    cl = configs[-1].width
    for pid, shape, fan in (("fe/weight", (c0, 1, 3, 3), 9),
                            ("bottleneck/weight", (cb, cb, 3, 3), cb * 9),
                            ("rm/weight", (1, cl, 3, 3), cl * 9)):
        model.add_param(pid, he_normal(seed, pid, shape, fan), SHARED, True)
    model.add_param("fe/bias", np.zeros(c0), SHARED, True)
    model.add_param("bottleneck/bias", np.zeros(cb), SHARED, True)
    model.add_param("rm/bias", np.zeros(1), SHARED, True)
    for s, cfg in enumerate(configs):
        _add_stage_params(model, "base", s, range(cfg.groups), TEMPLATE, True)
    return model


# ---------------------------------------------------------------------------
# forward


def gresblock_forward(x: Tensor, params: GResBlockParams, groups: int) -> Tensor:
    """``x + GCA(GELU(GroupConv(GNorm(x))))`` with per-group squeeze-excitation."""
    b, c, hh, ww = x.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible by {groups} groups")
    m = c // groups
    z = T.group_norm(x, groups, params.gamma, params.beta)
    z = T.conv2d(z, params.conv_w, params.conv_b, groups=groups, padding=1)
    z = T.gelu(z)
    s = T.global_avg_pool(z)
    s = T.transpose(T.reshape(s, (b, groups, m)), (1, 0, 2))          # g, B, m
    s = T.matmul(s, T.transpose(params.se1_w, (0, 2, 1)))
    s = T.gelu(T.add(s, T.reshape(params.se1_b, (groups, 1, -1))))
    s = T.matmul(s, T.transpose(params.se2_w, (0, 2, 1)))
    s = T.sigmoid(T.add(s, T.reshape(params.se2_b, (groups, 1, m))))
    gate = T.reshape(T.transpose(s, (1, 0, 2)), (b, c, 1, 1))
    return T.add(x, T.mul(z, gate))


def block_params(model: ModelState, prefix: str, s: int, groups: Sequence[int], k: int) -> GResBlockParams:
    def get(name):
        return [model.param(f"{prefix}/s{s}/g{o}/b{k}/{name}") for o in groups]

    def stack(ts):
        return T.concat([T.reshape(t, (1,) + t.shape) for t in ts], axis=0)

    return GResBlockParams(
        gamma=T.concat(get("gamma")), beta=T.concat(get("beta")),
        conv_w=T.concat(get("conv_w")), conv_b=T.concat(get("conv_b")),
        se1_w=stack(get("se1_w")), se1_b=stack(get("se1_b")),
        se2_w=stack(get("se2_w")), se2_b=stack(get("se2_b")),
    )


def stage_forward(model: ModelState, prefix: str, s: int, groups: Sequence[int], x: Tensor,
                  capture: dict | None = None) -> Tensor:
    cfg = model.configs[s]
    h = T.conv2d(x, model.param(f"{prefix}/s{s}/head/weight"), model.param(f"{prefix}/s{s}/head/bias"))
    for k in range(cfg.blocks):
        h = gresblock_forward(h, block_params(model, prefix, s, groups, k), len(groups))
    if capture is not None:
        capture[s] = h.data
    return T.conv2d(h, model.param(f"{prefix}/s{s}/tail/weight"), model.param(f"{prefix}/s{s}/tail/bias"))


def path_features(model: ModelState, prefix: str, groups: Sequence[Sequence[int]], x: Tensor,
                  capture: dict | None = None) -> Tensor:
    """Run FE, all stages of one path and the bottleneck; returns the
    final-stage output (the input of the reconstruction module)."""
    n = len(model.configs)
    h = T.conv2d(x, model.param("fe/weight"), model.param("fe/bias"), padding=1)
    skips = {}
    for s in range(model.n_down):
        h = stage_forward(model, prefix, s, groups[s], h, capture)
        skips[s] = h
        h = T.avg_pool2(h)
    h = T.conv2d(h, model.param("bottleneck/weight"), model.param("bottleneck/bias"), padding=1)
    for s in range(model.n_down, n):
        mirror = n - 1 - s
        if mirror < model.n_down:
            h = T.upsample2(h)
        h = stage_forward(model, prefix, s, groups[s], h, capture)
        if mirror < model.n_down:
            h = T.add(h, skips[mirror])
    return h


def reconstruct(model: ModelState, feats: Tensor, x: Tensor) -> Tensor:
    out = T.conv2d(feats, model.param("rm/weight"), model.param("rm/bias"), padding=1)
    return T.add(out, x) if model.global_residual else out


def _as_input(model: ModelState, image) -> Tensor:
    if isinstance(image, Tensor):
        return image
    arr = np.asarray(image, dtype=model.dtype)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr, copy=False)


def pretrain_forward(model: ModelState, image) -> Tensor:
    x = _as_input(model, image)
    groups = [list(range(c.groups)) for c in model.configs]
    return reconstruct(model, path_features(model, "base", groups, x), x)


def task_prefix(task_id: str) -> str:
    return f"task/{task_id}"


def forward_task(model: ModelState, image, task_id: str, capture_features: bool = False,
                 use_skmm: bool = True):
    """Restore ``image`` along the path of ``task_id``.

    Returns ``(restored, captured)`` where ``captured`` maps stage index to the
    final GResBlock output (B, n_groups * m, H, W) of the task's own path, or
    None when ``capture_features`` is false. Compound tasks also run their
    constituent paths and inject the mined residual before reconstruction;
    ``use_skmm=False`` drops that residual.
    """
    from .skmm import bank_from_model, skmm_forward

    if task_id not in model.tasks:
        raise ModelError(f"unknown task {task_id!r}")
    tp = model.tasks[task_id]
    x = _as_input(model, image)
    capture = {} if capture_features else None
    feats = path_features(model, task_prefix(task_id), tp.groups, x, capture)
    if tp.is_compound:
        missing = [c for c in tp.constituents if c not in model.tasks]
        if missing:
            raise ModelError(f"constituents {missing} of {task_id!r} not registered")
        history = [path_features(model, task_prefix(c), model.tasks[c].groups, x)
                   for c in model.registration_order(tp.constituents)]
        if use_skmm:
            feats = skmm_forward(feats, history, bank_from_model(model, task_id))
    return reconstruct(model, feats, x), capture


# ---------------------------------------------------------------------------
# training helpers


def set_trainable(model: ModelState, ids, flag: bool) -> None:
    for pid in ids:
        model.params[pid].trainable = flag


def fit(model: ModelState, loss_fn: Callable[[np.ndarray, np.ndarray], Tensor], ids: Sequence[str],
        inputs: np.ndarray, targets: np.ndarray, epochs: int, batch: int,
        lr_init: float, lr_final: float, seed: int,
        on_epoch: Callable[[int], None] | None = None) -> list[float]:
    """Minibatch Adam over ``ids`` with a per-epoch cosine schedule.

    Returns the mean training loss of each epoch.
    """
    ids = list(ids)
    trainable = set(ids)
    state = AdamState()
    rng = np.random.default_rng(seed)
    curve = []
    n = inputs.shape[0]
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, lr_init, lr_final)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = np.sort(order[start:start + batch])
            loss = loss_fn(inputs[idx], targets[idx])
            grads = T.backward(loss)
            adam_step(model.params, grads, state, lr, trainable)
            total += loss.item() * len(idx)
        curve.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch)
    return curve


def pretrain(model: ModelState, clean_images: np.ndarray, epochs: int, batch: int = 24,
             lr_init: float = 1e-4, lr_final: float = 1e-6, seed: int = 0) -> list[float]:
    """Clean-to-clean l1 self-reconstruction of the template path.

    Afterwards the shared ends and the template groups are frozen and kept
    as the initializer for every later task.
    """
    if model.tasks:
        raise ModelError("pretraining is only allowed before any task exists")
    if model.pretrained:
        raise ModelError("model is already pretrained")
    ids = model.owned_by(SHARED) + model.owned_by(TEMPLATE)
    set_trainable(model, ids, True)
    clean = np.asarray(clean_images, dtype=model.dtype)

    def loss_fn(xb, yb):
        return T.l1_loss(pretrain_forward(model, xb), Tensor(yb, copy=False))

    curve = fit(model, loss_fn, ids, clean, clean, epochs, batch, lr_init, lr_final, seed)
    set_trainable(model, ids, False)
    model.pretrained = True
    return curve


def expand_for_task(model: ModelState, task: TaskSpec | str) -> ModelState:
    """Register a new task path initialized from the template parameters.

    Head rows and tail are copied from the template path too unless the
    model was built with ``head_init="he"``, in which case they are drawn
    fresh. Compound tasks also receive a mining bank.
    """
    from .skmm import init_skmm_bank

    if isinstance(task, str):
        task = TaskSpec(task, tuple(task))
    if not model.pretrained:
        raise ModelError("expand_for_task requires a pretrained model")
    tid = task.task_id
    if tid in model.tasks:
        raise ModelError(f"task {tid!r} already registered")
    missing = [c for c in task.constituents if c not in model.tasks]
    if missing:
        raise ModelError(f"constituents {missing} of {tid!r} must be registered first")
    for other in model.tasks.values():
        if other.phase == "training":
            raise ModelError(f"task {other.task_id!r} is still training")
    prefix = task_prefix(tid)
    groups = []
    for s, cfg in enumerate(model.configs):
        for o in range(cfg.groups):
            for k in range(cfg.blocks):
                for name in BLOCK_FIELDS:
                    src = model.params[f"base/s{s}/g{o}/b{k}/{name}"].value
                    model.add_param(f"{prefix}/s{s}/g{o}/b{k}/{name}", src.copy(), tid, True)
        for end in ("head", "tail"):
            for name in ("weight", "bias"):
                pid = f"{prefix}/s{s}/{end}/{name}"
                src = model.params[f"base/s{s}/{end}/{name}"].value
                if model.head_init == "he" and name == "weight":
                    val = he_normal(model.seed, pid, src.shape, src.shape[1])
                elif model.head_init == "he":
                    val = np.zeros_like(src)
                else:
                    val = src.copy()
                model.add_param(pid, val, tid, True)
        groups.append(list(range(cfg.groups)))
    model.tasks[tid] = TaskPath(tid, task.composition, task.constituents, groups, "training")
    if task.is_compound:
        init_skmm_bank(model, tid, len(task.constituents))
    return model


def trainable_parameters(model: ModelState, task_id: str) -> list[str]:
    if task_id not in model.tasks:
        raise ModelError(f"unknown task {task_id!r}")
    if model.tasks[task_id].phase == "final":
        raise ModelError(f"task {task_id!r} is finalized")
    return model.owned_by(task_id)


def param_hashes(model: ModelState, owners=None) -> dict[str, str]:
    """Byte digests of parameter values, optionally restricted by owner."""
    import hashlib

    out = {}
    for pid, p in model.params.items():
        if owners is None or p.owner in owners:
            out[pid] = hashlib.sha256(np.ascontiguousarray(p.value).tobytes()).hexdigest()
    return out
