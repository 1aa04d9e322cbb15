"""GrabCut foreground refinement without border matting.

Colour models are Gaussian mixtures fitted per label; segmentation is the
minimum s-t cut of an 8-connected pixel graph, found with Dinic's
algorithm compiled by numba.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from PIL import Image
from sklearn.cluster import KMeans

COV_FLOOR = 1e-4
DEFAULT_K = 5
DEFAULT_GAMMA = 50.0
DEFAULT_ITERATIONS = 5
DUALITY_TOL = 1e-9

# (dy, dx) offsets covering each undirected 8-neighbour pair once
_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))


@dataclass
class GmmModel:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, 3)
    covs: np.ndarray  # (k, 3, 3)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def component_log_pdf(self, z: np.ndarray) -> np.ndarray:
        """Per-component ``log(weight * N(z))``, shape ``(n, k)``; -inf for empty components."""
        z = np.asarray(z, dtype=np.float64)
        out = np.full((len(z), self.n_components), -np.inf)
        for i in range(self.n_components):
            if self.weights[i] <= 0:
                continue
            cov = self.covs[i]
            chol = np.linalg.cholesky(cov)
            diff = np.linalg.solve(chol, (z - self.means[i]).T)
            mahal = np.einsum("ij,ij->j", diff, diff)
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            out[:, i] = math.log(self.weights[i]) - 0.5 * (z.shape[1] * math.log(2 * math.pi) + logdet + mahal)
        return out

    def neg_log_likelihood(self, z: np.ndarray) -> np.ndarray:
        lp = self.component_log_pdf(z)
        m = lp.max(axis=1, keepdims=True)
        return -(m[:, 0] + np.log(np.exp(lp - m).sum(axis=1)))


def _estimate(z: np.ndarray, labels: np.ndarray, k: int, prev_means: np.ndarray | None = None) -> GmmModel:
    d = z.shape[1]
    weights = np.zeros(k)
    means = np.zeros((k, d)) if prev_means is None else prev_means.copy()
    covs = np.tile(np.eye(d) * COV_FLOOR, (k, 1, 1))
    for i in range(k):
        members = z[labels == i]
        if len(members) == 0:
            continue
        weights[i] = len(members) / len(z)
        means[i] = members.mean(axis=0)
        diff = members - means[i]
        covs[i] = diff.T @ diff / len(members) + np.eye(d) * COV_FLOOR
    return GmmModel(weights, means, covs)


def fit_gmm(pixels: np.ndarray, k: int, rng: np.random.Generator, n_refine: int = 1) -> GmmModel:
    """K-means initialised mixture, refined by hard reassignment to the likeliest component.

    Covariances are maximum-likelihood estimates plus ``COV_FLOOR * I``.
    """
    z = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    if len(z) < k:
        raise ValueError(f"{len(z)} pixels cannot support {k} components; use k <= {len(z)}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        km = KMeans(n_clusters=k, n_init=1, random_state=int(rng.integers(2**31 - 1))).fit(z)
    model = _estimate(z, km.labels_, k, km.cluster_centers_)
    for _ in range(n_refine):
        model = refit_gmm(model, z)
    return model


def refit_gmm(model: GmmModel, pixels: np.ndarray) -> GmmModel:
    """Assign each pixel to its likeliest component of ``model`` and re-estimate."""
    z = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    if len(z) == 0:
        raise ValueError("cannot refit a mixture on zero pixels")
    labels = model.component_log_pdf(z).argmax(axis=1)
    return _estimate(z, labels, model.n_components, model.means)


@dataclass
class Trimap:
    """Probable-foreground pixels; everything else is definite background."""

    probable_fg: np.ndarray

    @classmethod
    def from_mask(cls, gt_mask: np.ndarray) -> "Trimap":
        gt = np.asarray(gt_mask)
        if not np.isin(gt, (0, 1)).all():
            raise ValueError("ground-truth mask must be binary")
        return cls(gt.astype(bool))


@dataclass
class FlowNetwork:
    """s-t graph over ``n_nodes`` pixel nodes.

    ``source_caps[p]`` is the capacity of source->p, ``sink_caps[p]`` of
    p->sink. Pixel edges are ``edge_u[i] -> edge_v[i]`` with capacity
    ``edge_caps[i]`` and ``edge_v[i] -> edge_u[i]`` with ``edge_rev_caps[i]``.
    """

    n_nodes: int
    source_caps: np.ndarray
    sink_caps: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    edge_caps: np.ndarray
    edge_rev_caps: np.ndarray
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        for name in ("source_caps", "sink_caps", "edge_caps", "edge_rev_caps"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.isfinite(a).all() or (a < 0).any():
                raise ValueError(f"{name} must be finite and nonnegative")
            setattr(self, name, a)
        self.edge_u = np.asarray(self.edge_u, dtype=np.int64)
        self.edge_v = np.asarray(self.edge_v, dtype=np.int64)

    def cut_capacity(self, source_side: np.ndarray) -> float:
        s = np.asarray(source_side, dtype=bool)
        su, sv = s[self.edge_u], s[self.edge_v]
        return float(
            self.source_caps[~s].sum()
            + self.sink_caps[s].sum()
            + self.edge_caps[su & ~sv].sum()
            + self.edge_rev_caps[sv & ~su].sum()
        )


def _neighbour_pairs(h: int, w: int):
    idx = np.arange(h * w).reshape(h, w)
    for dy, dx in _OFFSETS:
        r0, r1 = 0, h - dy
        c0, c1 = max(0, -dx), w - max(0, dx)
        yield dy, dx, idx[r0:r1, c0:c1].ravel(), idx[r0 + dy : r1 + dy, c0 + dx : c1 + dx].ravel()


def smoothness_links(image: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """8-neighbour n-links ``gamma * exp(-beta * |dz|^2) / dist`` and the beta used."""
    z = np.asarray(image, dtype=np.float64)
    h, w = z.shape[:2]
    flat = z.reshape(h * w, -1)
    us, vs, sq = [], [], []
    for dy, dx, u, v in _neighbour_pairs(h, w):
        us.append(u)
        vs.append(v)
        sq.append(((flat[u] - flat[v]) ** 2).sum(axis=1))
    u, v, d2 = np.concatenate(us), np.concatenate(vs), np.concatenate(sq)
    mean = d2.mean() if len(d2) else 0.0
    beta = 0.0 if mean == 0.0 else 1.0 / (2.0 * mean)
    dist = np.concatenate([np.full(len(a), math.hypot(dy, dx)) for (dy, dx), a in zip(_OFFSETS, us)])
    caps = gamma * np.exp(-beta * d2) / dist
    return u, v, caps, beta


def build_graph(
    image: np.ndarray,
    trimap: Trimap,
    fg_gmm: GmmModel,
    bg_gmm: GmmModel,
    gamma: float = DEFAULT_GAMMA,
) -> FlowNetwork:
    """Pixel graph for one GrabCut iteration.

    Probable-foreground pixels get source capacity = background NLL and sink
    capacity = foreground NLL, both shifted by the same amount when either
    is negative. Definite-background pixels are tied to the sink with a
    capacity no cut through n-links can beat.
    """
    h, w = image.shape[:2]
    z = np.asarray(image, dtype=np.float64).reshape(h * w, 3)
    u, v, caps, _ = smoothness_links(image, gamma)
    d_fg = fg_gmm.neg_log_likelihood(z)
    d_bg = bg_gmm.neg_log_likelihood(z)
    shift = np.minimum(np.minimum(d_fg, d_bg), 0.0)
    source = d_bg - shift
    sink = d_fg - shift
    incident = np.bincount(u, caps, h * w) + np.bincount(v, caps, h * w)
    hard = 1.0 + incident.max(initial=0.0)
    definite_bg = ~trimap.probable_fg.ravel()
    source[definite_bg] = 0.0
    sink[definite_bg] = hard
    return FlowNetwork(h * w, source, sink, u, v, caps, caps.copy(), (h, w))


@numba.njit(cache=True)
def _dinic(n, first, head, res, pair, s, t):
    level = np.empty(n, np.int64)
    cursor = np.empty(n, np.int64)
    queue = np.empty(n, np.int64)
    stack = np.empty(n, np.int64)
    total = 0.0
    while True:
        level[:] = -1
        level[s] = 0
        queue[0] = s
        qh, qt = 0, 1
        while qh < qt:
            u = queue[qh]
            qh += 1
            for a in range(first[u], first[u + 1]):
                v = head[a]
                if res[a] > 0.0 and level[v] < 0:
                    level[v] = level[u] + 1
                    queue[qt] = v
                    qt += 1
        if level[t] < 0:
            break
        for u in range(n):
            cursor[u] = first[u]
        while True:
            u = s
            depth = 0
            stuck = False
            while u != t:
                advanced = False
                while cursor[u] < first[u + 1]:
                    a = cursor[u]
                    v = head[a]
                    if res[a] > 0.0 and level[v] == level[u] + 1:
                        stack[depth] = a
                        depth += 1
                        u = v
                        advanced = True
                        break
                    cursor[u] += 1
                if not advanced:
                    if u == s:
                        stuck = True
                        break
                    level[u] = -1
                    depth -= 1
                    u = head[pair[stack[depth]]]
                    cursor[u] += 1
            if stuck:
                break
            f = res[stack[0]]
            for i in range(1, depth):
                if res[stack[i]] < f:
                    f = res[stack[i]]
            for i in range(depth):
                a = stack[i]
                res[a] -= f
                res[pair[a]] += f
            total += f
    reach = level >= 0
    return total, reach


def _residual_arrays(net: FlowNetwork):
    n = net.n_nodes
    s, t = n, n + 1
    pix = np.arange(n, dtype=np.int64)
    tails = np.concatenate([np.full(n, s), pix, net.edge_u, net.edge_v])
    heads = np.concatenate([pix, np.full(n, t), net.edge_v, net.edge_u])
    caps = np.concatenate([net.source_caps, net.sink_caps, net.edge_caps, net.edge_rev_caps])
    m = len(caps)
    # every forward arc i is paired with a reverse arc i + m of zero capacity
    tails_all = np.concatenate([tails, heads])
    heads_all = np.concatenate([heads, tails])
    caps_all = np.concatenate([caps, np.zeros(m)])
    pair_all = np.concatenate([np.arange(m) + m, np.arange(m)])
    order = np.argsort(tails_all, kind="stable")
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    head = heads_all[order]
    res = caps_all[order].copy()
    pair = inv[pair_all[order]]
    first = np.zeros(n + 3, dtype=np.int64)
    np.add.at(first, tails_all + 1, 1)
    first = np.cumsum(first)
    return first, head, res, pair, s, t


def max_flow(net: FlowNetwork, check: bool = True) -> tuple[float, np.ndarray]:
    """Maximum s-t flow and the min-cut partition.

    Returns the flow value and a boolean array over pixel nodes that is True
    on the source (foreground) side. Nodes not reachable from the source in
    the final residual graph go to the sink side.
    """
    if net.n_nodes == 0:
        return 0.0, np.zeros(0, dtype=bool)
    first, head, res, pair, s, t = _residual_arrays(net)
    flow, reach = _dinic(net.n_nodes + 2, first, head, res, pair, s, t)
    side = reach[: net.n_nodes].copy()
    if check:
        cut = net.cut_capacity(side)
        if abs(flow - cut) > DUALITY_TOL * max(1.0, abs(cut)):
            raise RuntimeError(f"max-flow {flow!r} disagrees with cut capacity {cut!r}")
    return float(flow), side


def refine_mask(
    image: np.ndarray,
    gt_class_mask: np.ndarray,
    iterations: int = DEFAULT_ITERATIONS,
    gamma: float = DEFAULT_GAMMA,
    k: int = DEFAULT_K,
    rng: np.random.Generator | int = 0,
) -> np.ndarray:
    """Clean a binary annotation with GrabCut seeded from it.

    Annotated pixels start as probable foreground; all others are fixed
    background. Stops after ``iterations`` rounds or when the labelling no
    longer changes.

    Raises:
        ValueError: for a non-binary mask, an empty foreground, or a mask
            without any background pixel.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    image = np.asarray(image)
    trimap = Trimap.from_mask(gt_class_mask)
    if image.shape[:2] != trimap.probable_fg.shape:
        raise ValueError("image and mask differ in size")
    if not trimap.probable_fg.any():
        raise ValueError("mask has no foreground pixels")
    if trimap.probable_fg.all():
        raise ValueError("mask has no background pixels to model")
    z = image.reshape(-1, 3).astype(np.float64)
    fg = trimap.probable_fg.ravel().copy()
    fg_gmm = bg_gmm = None
    for _ in range(iterations):
        nf, nb = int(fg.sum()), int((~fg).sum())
        if nf == 0:
            break
        if fg_gmm is None:
            fg_gmm = fit_gmm(z[fg], min(k, nf), rng)
            bg_gmm = fit_gmm(z[~fg], min(k, nb), rng)
        else:
            fg_gmm = refit_gmm(fg_gmm, z[fg])
            bg_gmm = refit_gmm(bg_gmm, z[~fg])
        net = build_graph(image, trimap, fg_gmm, bg_gmm, gamma)
        _, side = max_flow(net)
        new_fg = side & trimap.probable_fg.ravel()
        if np.array_equal(new_fg, fg):
            break
        fg = new_fg
    return fg.reshape(trimap.probable_fg.shape).astype(np.uint8)


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    """Write a binary mask as a 1-bit PNG."""
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path)
