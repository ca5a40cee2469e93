"""Structural-entropy pruning of redundant channel groups.

Per sample and stage: channels of each group form a cosine-similarity graph
whose one-dimensional structural entropy weights the channels into a single
group feature; the group features form a second graph that is partitioned by
minimizing two-dimensional structural entropy. In every cluster the group
whose detachment raises the entropy the most is kept; votes over a sample
pool decide which groups survive.

Logarithms are natural. ``0 * log 0`` is taken as 0.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor import softmax, Tensor

MAX_EXACT_N = 12
_MERGE_TOL = 1e-12


class GraphError(ValueError):
    pass


@dataclass
class SimilarityGraph:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise GraphError("weights must be a square matrix")
        if np.any(w < 0) or not np.allclose(w, w.T, rtol=0, atol=0) or np.any(np.diag(w) != 0):
            raise GraphError("weights must be symmetric, non-negative, zero-diagonal")
        self.weights = w

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    @property
    def volume(self) -> float:
        return float(self.degrees.sum())

    def scaled(self, c: float) -> "SimilarityGraph":
        return SimilarityGraph(self.weights * c)


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(np.broadcast(x, y).shape)
    nz = np.broadcast_to(x != 0, out.shape)
    out[nz] = (np.broadcast_to(x, out.shape)[nz]
               * np.log(np.broadcast_to(y, out.shape)[nz]))
    return out


def build_similarity_graph(vectors) -> SimilarityGraph:
    """Clamped cosine similarities ``max(cos(v_i, v_j), 0)``; zero vectors get no edges."""
    vecs = np.asarray([np.asarray(v, dtype=np.float64).ravel() for v in vectors])
    if vecs.ndim != 2:
        raise GraphError("feature vectors must share one length")
    if vecs.shape[0] < 1:
        raise GraphError("need at least one vector")
    norms = np.linalg.norm(vecs, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = vecs / safe[:, None]
    unit[norms == 0] = 0.0
    w = np.clip(unit @ unit.T, 0.0, None)
    w = np.minimum(w, w.T)          # exact symmetry
    np.fill_diagonal(w, 0.0)
    return SimilarityGraph(w)


def one_dim_entropy_terms(graph: SimilarityGraph) -> np.ndarray:
    """Per-vertex ``-(d_i / v) log(d_i / v)``."""
    v = graph.volume
    if v <= 0:
        return np.zeros(graph.n)
    p = graph.degrees / v
    return -_xlogy(p, p)


@dataclass
class GroupFeature:
    index: int
    vector: np.ndarray
    weights: np.ndarray
    entropy: np.ndarray


def one_dim_se_aggregate(channel_features, index: int = 0) -> GroupFeature:
    """Weight channels by softmax of their 1D-SE terms and sum them.

    An edgeless intra-group graph falls back to uniform weights.
    """
    chans = np.asarray([np.asarray(u, dtype=np.float64).ravel() for u in channel_features])
    if chans.shape[0] < 1:
        raise GraphError("need at least one channel")
    graph = build_similarity_graph(chans)
    terms = one_dim_entropy_terms(graph)
    if graph.volume <= 0:
        weights = np.full(len(chans), 1.0 / len(chans))
    else:
        weights = softmax(Tensor(terms)).data.copy()
    return GroupFeature(index, weights @ chans, weights, terms)


# ---------------------------------------------------------------------------
# partitions


def canonical(assignment: Sequence[int]) -> tuple[int, ...]:
    """Relabel clusters in order of first appearance."""
    labels: dict[int, int] = {}
    return tuple(labels.setdefault(a, len(labels)) for a in assignment)


@dataclass(frozen=True)
class Partition:
    assignment: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "assignment", canonical(self.assignment))

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(tuple(range(n)))

    @classmethod
    def one_cluster(cls, n: int) -> "Partition":
        return cls((0,) * n)

    @classmethod
    def from_clusters(cls, clusters: Iterable[Iterable[int]], n: int) -> "Partition":
        assign = [-1] * n
        for k, cl in enumerate(clusters):
            for i in cl:
                if assign[i] != -1:
                    raise GraphError(f"vertex {i} in two clusters")
                assign[i] = k
        if -1 in assign:
            raise GraphError("clusters do not cover all vertices")
        return cls(tuple(assign))

    @property
    def n(self) -> int:
        return len(self.assignment)

    @property
    def k(self) -> int:
        return max(self.assignment) + 1 if self.assignment else 0

    def clusters(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.k)]
        for i, c in enumerate(self.assignment):
            out[c].append(i)
        return out

    def cluster_of(self, o: int) -> list[int]:
        c = self.assignment[o]
        return [i for i, a in enumerate(self.assignment) if a == c]

    def detach(self, o: int) -> "Partition":
        """Move ``o`` out of its cluster into a new singleton."""
        if len(self.cluster_of(o)) == 1:
            return self
        assign = list(self.assignment)
        assign[o] = self.k
        return Partition(tuple(assign))


def cluster_stats(graph: SimilarityGraph, partition: Partition) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster (volume, cut)."""
    if partition.n != graph.n:
        raise GraphError("partition size does not match graph")
    a = np.asarray(partition.assignment)
    same = a[:, None] == a[None, :]
    vol = np.bincount(a, graph.degrees, minlength=partition.k)
    cut = np.bincount(a, np.where(same, 0.0, graph.weights).sum(axis=1), minlength=partition.k)
    return vol, cut


def two_dim_se(graph: SimilarityGraph, partition: Partition) -> float:
    """Two-level coding cost of ``graph`` under ``partition`` (nats)."""
    v = graph.volume
    if v <= 0:
        raise GraphError("2D structural entropy is undefined for an edgeless graph")
    vol, cut = cluster_stats(graph, partition)
    d = graph.degrees
    vc = vol[list(partition.assignment)]
    cut_term = _xlogy(cut / v, vol / v).sum()
    # a zero-volume cluster only holds zero-degree vertices, whose terms vanish
    leaf_term = _xlogy(d / v, d / np.where(vc > 0, vc, 1.0)).sum()
    return float(-(cut_term + leaf_term))


def set_partitions(n: int):
    """All set partitions of ``range(n)`` as restricted growth strings, in
    lexicographic order."""
    if n == 0:
        yield ()
        return
    a = [0] * n
    maxes = [0] * n

    def rec(i):
        if i == n:
            yield tuple(a)
            return
        for c in range(maxes[i - 1] + 2):
            a[i] = c
            maxes[i] = max(maxes[i - 1], c)
            yield from rec(i + 1)

    yield from rec(1)


def minimize_2dse_exact(graph: SimilarityGraph) -> Partition:
    """Exhaustive minimum over all set partitions.

    Ties (within 1e-12) go to fewer clusters, then the lexicographically
    smallest assignment.
    """
    n = graph.n
    if n > MAX_EXACT_N:
        raise GraphError(f"exhaustive search limited to n <= {MAX_EXACT_N}, got {n}")
    if n == 1:
        return Partition((0,))
    if graph.volume <= 0:
        return Partition.singletons(n)
    best = None
    best_key = None
    for rgs in set_partitions(n):
        p = Partition(rgs)
        h = two_dim_se(graph, p)
        if best is None or h < best_key[0] - _MERGE_TOL or (
                abs(h - best_key[0]) <= _MERGE_TOL and p.k < best_key[1]):
            best, best_key = p, (h, p.k)
    return best


def minimize_2dse_greedy(graph: SimilarityGraph) -> Partition:
    """Agglomerate from singletons, always taking the merge that lowers the
    entropy the most; stop when no merge lowers it. Ties keep the lowest
    cluster-index pair."""
    n = graph.n
    if graph.volume <= 0:
        # no similarity at all: nothing is redundant with anything
        return Partition.singletons(n)
    part = Partition.singletons(n)
    h = two_dim_se(graph, part)
    while part.k > 1:
        best_gain, best_pair = _MERGE_TOL, None
        assign = np.asarray(part.assignment)
        for a in range(part.k):
            for b in range(a + 1, part.k):
                merged = np.where(assign == b, a, assign)
                gain = h - two_dim_se(graph, Partition(tuple(merged)))
                if gain > best_gain:
                    best_gain, best_pair = gain, (a, b)
        if best_pair is None:
            break
        a, b = best_pair
        part = Partition(tuple(np.where(assign == b, a, assign)))
        h = two_dim_se(graph, part)
    return part


def detachment_cost(graph: SimilarityGraph, partition: Partition, o: int) -> float:
    """Entropy increase when ``o`` is detached into its own cluster."""
    if not 0 <= o < graph.n:
        raise GraphError(f"vertex {o} out of range")
    detached = partition.detach(o)
    if detached is partition:
        return 0.0
    return two_dim_se(graph, detached) - two_dim_se(graph, partition)


def detachment_cost_incremental(graph: SimilarityGraph, partition: Partition, o: int) -> float:
    """Same quantity from the terms of the two affected clusters only."""
    members = partition.cluster_of(o)
    if len(members) == 1:
        return 0.0
    v = graph.volume
    w, d = graph.weights, graph.degrees
    rest = [i for i in members if i != o]

    def term(cluster_vol, cut, verts):
        t = _xlogy(cut / v, cluster_vol / v)
        if cluster_vol > 0:
            t = t + _xlogy(d[verts] / v, d[verts] / cluster_vol).sum()
        return -float(t)

    vol_c = d[members].sum()
    cut_c = vol_c - w[np.ix_(members, members)].sum()
    vol_r = vol_c - d[o]
    cut_r = vol_r - w[np.ix_(rest, rest)].sum()
    return term(vol_r, cut_r, rest) + term(d[o], d[o], [o]) - term(vol_c, cut_c, members)


TIE_TOL = 1e-12


def retention_for_sample(graph: SimilarityGraph, partition: Partition, costs) -> np.ndarray:
    """1 for the highest-cost member of every cluster (lowest index on ties).

    Costs within ``TIE_TOL`` nats of the cluster maximum count as tied: the
    two members of a pair always have equal cost in exact arithmetic, and
    roundoff must not decide between them.
    """
    costs = np.asarray(costs, dtype=np.float64)
    keep = np.zeros(graph.n, dtype=np.int64)
    for cl in partition.clusters():
        c = costs[cl]
        best = cl[int(np.flatnonzero(c >= c.max() - TIE_TOL)[0])]
        keep[best] = 1
    return keep


@dataclass
class RetentionTally:
    votes: np.ndarray
    n_samples: int
    rho: float = 0.1

    @property
    def frequency(self) -> np.ndarray:
        return self.votes / self.n_samples


def vote_and_select(tally: RetentionTally) -> list[int]:
    """Indices whose vote frequency reaches ``rho``; never empty."""
    if tally.n_samples < 1:
        raise ValueError("pool must contain at least one sample")
    freq = tally.frequency
    keep = [int(o) for o in np.flatnonzero(freq >= tally.rho)]
    if not keep:
        keep = [int(np.argmax(freq))]
    return keep


@dataclass
class SampleAnalysis:
    partition: Partition
    costs: np.ndarray
    retained: np.ndarray
    entropy: float | None
    singleton_entropy: float | None


def analyze_groups(group_channels: Sequence[np.ndarray]) -> SampleAnalysis:
    """Full per-sample pipeline for one stage: ``group_channels[o]`` holds the
    (m, ...) channel maps of group ``o``."""
    feats = [one_dim_se_aggregate(ch, o).vector for o, ch in enumerate(group_channels)]
    graph = build_similarity_graph(feats)
    n = graph.n
    if graph.volume <= 0:
        part = Partition.singletons(n)
        costs = np.zeros(n)
        return SampleAnalysis(part, costs, retention_for_sample(graph, part, costs), None, None)
    part = minimize_2dse_greedy(graph)
    costs = np.array([detachment_cost(graph, part, o) for o in range(n)])
    return SampleAnalysis(part, costs, retention_for_sample(graph, part, costs),
                          two_dim_se(graph, part), two_dim_se(graph, Partition.singletons(n)))


# ---------------------------------------------------------------------------
# surgery and orchestration


def prune_groups(model, task_id: str, stage: int, retained: Sequence[int]):
    """Drop every group of ``task_id`` at ``stage`` not in ``retained``
    (original group indices) together with its head rows and tail columns."""
    tp = model.tasks.get(task_id)
    if tp is None:
        raise KeyError(f"unknown task {task_id!r}")
    if tp.phase == "final":
        raise ValueError(f"task {task_id!r} is finalized; its path is immutable")
    current = tp.groups[stage]
    retained = sorted(set(int(o) for o in retained))
    if not retained:
        raise ValueError("retained set must be non-empty")
    foreign = [o for o in retained if o not in current]
    if foreign:
        raise ValueError(f"groups {foreign} are not live groups of {task_id!r} at stage {stage}")
    if retained == sorted(current):
        return model
    m = model.configs[stage].group_width
    keep_pos = [p for p, o in enumerate(current) if o in retained]
    rows = np.concatenate([np.arange(p * m, (p + 1) * m) for p in keep_pos])
    prefix = f"task/{task_id}/s{stage}"
    head_w, head_b = model.params[f"{prefix}/head/weight"], model.params[f"{prefix}/head/bias"]
    tail_w = model.params[f"{prefix}/tail/weight"]
    head_w.value = np.ascontiguousarray(head_w.value[rows])
    head_b.value = np.ascontiguousarray(head_b.value[rows])
    tail_w.value = np.ascontiguousarray(tail_w.value[:, rows])
    for o in current:
        if o not in retained:
            for pid in [p for p in model.params if p.startswith(f"{prefix}/g{o}/")]:
                del model.params[pid]
    tp.groups[stage] = [o for o in current if o in retained]
    return model


@dataclass
class SepReport:
    task_id: str
    n_samples: int
    rho: float
    votes: list[np.ndarray] = field(default_factory=list)
    groups: list[list[int]] = field(default_factory=list)
    retained: list[list[int]] = field(default_factory=list)
    mean_entropy: list[float] = field(default_factory=list)
    mean_singleton_entropy: list[float] = field(default_factory=list)
    mean_clusters: list[float] = field(default_factory=list)
    params_before: int = 0
    params_after: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "group", "votes", "frequency", "retained"])
        for s, (groups, votes) in enumerate(zip(self.groups, self.votes)):
            for o, v in zip(groups, votes):
                w.writerow([s, o, int(v), repr(float(v) / self.n_samples),
                            int(o in self.retained[s])])
        return buf.getvalue()


def run_sep(model, task_id: str, pool, rho: float = 0.1) -> tuple[object, SepReport]:
    """Vote over ``pool`` (degraded inputs, or (degraded, clean) pairs) and
    prune every stage of ``task_id``'s path."""
    from .backbone import forward_task

    pool = list(pool)
    if not pool:
        raise ValueError("sample pool is empty")
    tp = model.tasks[task_id]
    stages = len(model.configs)
    owned = [pid for pid, p in model.params.items() if p.owner == task_id]
    report = SepReport(task_id, len(pool), rho,
                       params_before=sum(model.params[p].size for p in owned))
    votes = [np.zeros(len(tp.groups[s]), dtype=np.int64) for s in range(stages)]
    stats = [[] for _ in range(stages)]
    for item in pool:
        x = item[0] if isinstance(item, tuple) else item
        _, feats = forward_task(model, x, task_id, capture_features=True)
        for s in range(stages):
            m = model.configs[s].group_width
            h = feats[s][0]
            chans = [h[p * m:(p + 1) * m].reshape(m, -1) for p in range(len(tp.groups[s]))]
            res = analyze_groups(chans)
            votes[s] += res.retained
            stats[s].append((res.entropy, res.singleton_entropy, res.partition.k))
    for s in range(stages):
        groups = list(tp.groups[s])
        keep_pos = vote_and_select(RetentionTally(votes[s], len(pool), rho))
        keep = [groups[p] for p in keep_pos]
        report.groups.append(groups)
        report.votes.append(votes[s])
        report.retained.append(keep)
        ent = [e for e, _, _ in stats[s] if e is not None]
        sing = [e for _, e, _ in stats[s] if e is not None]
        report.mean_entropy.append(float(np.mean(ent)) if ent else float("nan"))
        report.mean_singleton_entropy.append(float(np.mean(sing)) if sing else float("nan"))
        report.mean_clusters.append(float(np.mean([k for _, _, k in stats[s]])))
        prune_groups(model, task_id, s, keep)
    owned = [pid for pid, p in model.params.items() if p.owner == task_id]
    report.params_after = sum(model.params[p].size for p in owned)
    return model, report


# ---------------------------------------------------------------------------
# edge-list text format


def dump_edge_list(graph: SimilarityGraph) -> str:
    lines = [f"n {graph.n} volume {float(graph.volume)!r}"]
    for i in range(graph.n):
        for j in range(i + 1, graph.n):
            if graph.weights[i, j] != 0:
                lines.append(f"{i} {j} {float(graph.weights[i, j])!r}")
    return "\n".join(lines) + "\n"


def parse_edge_list(text: str) -> SimilarityGraph:
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise GraphError("empty edge list")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "n" or head[2] != "volume" or not head[1].isdigit():
        raise GraphError("edge list must start with 'n <count> volume <v>'")
    n = int(head[1])
    w = np.zeros((n, n))
    for ln in lines[1:]:
        parts = ln.split()
        try:
            i, j, wt = int(parts[0]), int(parts[1]), float(parts[2])
        except (ValueError, IndexError):
            raise GraphError(f"bad edge line {ln!r}") from None
        if len(parts) != 3:
            raise GraphError(f"bad edge line {ln!r}")
        if i == j or not (0 <= i < n and 0 <= j < n):
            raise GraphError(f"bad edge endpoints in {ln!r}")
        w[i, j] = w[j, i] = wt
    return SimilarityGraph(w)
