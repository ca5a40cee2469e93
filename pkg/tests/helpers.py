import numpy as np

from ecmrnet.backbone import build_backbone, pretrain, stage_configs
from ecmrnet.degradations import clean_corpus


def tiny_model(seed=0, blocks=1, pretrained=True, **kw):
    """Desk widths/groups with one block per stage, pretrained for one epoch."""
    model = build_backbone(stage_configs((8, 16, 16, 8), (2, 4, 4, 2), blocks), seed=seed,
                           skmm_dim=8, skmm_rank=2, **kw)
    if pretrained:
        pretrain(model, clean_corpus(8, 16, seed), epochs=1, batch=4, lr_init=1e-3, lr_final=1e-3)
    return model


def random_graph(rng, n, density=0.6):
    """Symmetric non-negative weights, zero diagonal, at least one edge."""
    from ecmrnet.sep import SimilarityGraph

    w = rng.random((n, n)) * (rng.random((n, n)) < density)
    w = np.triu(w, 1)
    w = w + w.T
    if w.sum() == 0:
        w[0, 1] = w[1, 0] = 1.0
    return SimilarityGraph(w)


def images(n=2, size=16, seed=0):
    return np.random.default_rng(seed).random((n, 1, size, size))


def span_residual(mat, rank, seed=0):
    """Apply ``mat`` to M random vectors, Gram-Schmidt the first ``rank``
    images into a basis and return the largest residual norm of the others
    (relative to their own norm). Near zero means the span has dimension
    at most ``rank``."""
    rng = np.random.default_rng(seed)
    m = mat.shape[0]
    imgs = mat @ rng.standard_normal((mat.shape[1], m))
    basis = []
    worst = 0.0
    for k in range(m):
        v = imgs[:, k].copy()
        for _ in range(2):                    # re-orthogonalize for stability
            for b in basis:
                v -= (b @ v) * b
        scale = np.linalg.norm(imgs[:, k]) or 1.0
        if len(basis) < rank and np.linalg.norm(v) > 1e-12 * scale:
            basis.append(v / np.linalg.norm(v))
        else:
            worst = max(worst, np.linalg.norm(v) / scale)
    return worst


def one_stage_fixture():
    """One stage of width 4 in 2 groups, one block, task C registered.

    Returns (model, params, macs) with the counts written out by hand for
    an 8x8 input: FE 1->4 3x3, bottleneck 4->4 3x3, head 1x1, two groups of
    m=2 (norm 2+2, conv 2*2*9+2, SE 2+1+2+2), tail 1x1, RM 4->1 3x3.
    """
    from ecmrnet.backbone import StageConfig, expand_for_task

    model = build_backbone([StageConfig(4, 2, 1)], seed=0)
    model.pretrained = True
    expand_for_task(model, "C")
    hw = 8 * 8
    fe, bottleneck, rm = 1 * 4 * 9 + 4, 4 * 4 * 9 + 4, 4 * 9 + 1
    head = tail = 4 * 4 + 4
    group = 2 + 2 + 36 + 2 + 2 + 1 + 2 + 2
    params = fe + bottleneck + rm + head + 2 * group + tail
    macs = (4 * 9 + 4 * 4 * 9 + 4 * 9 + 4 * 4 + 4 * 2 * 9 + 4 * 4) * hw + 2 * (1 * 2 + 2 * 1)
    return model, params, macs
