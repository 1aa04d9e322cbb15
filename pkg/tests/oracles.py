"""Slow, loop-based reference computations shared by unit and acceptance tests."""

import itertools
import math

import numpy as np


def gabor_pointwise(theta, lam, psi, sigma, gamma, k):
    """Pixel-by-pixel Gabor evaluation; rows are y, columns are x."""
    r = k // 2
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            x, y = j - r, i - r
            xp = x * math.cos(theta) + y * math.sin(theta)
            yp = -x * math.sin(theta) + y * math.cos(theta)
            out[i, j] = math.exp(-(xp**2 + gamma**2 * yp**2) / (2 * sigma**2)) * math.cos(2 * math.pi * xp / lam + psi)
    return out


def brute_min_cut(net) -> float:
    """Enumerate every source/sink assignment of the pixel nodes."""
    best = math.inf
    for bits in itertools.product((False, True), repeat=net.n_nodes):
        best = min(best, net.cut_capacity(np.array(bits, dtype=bool)))
    return best


def random_network(rng, n):
    from forestfss.grabcut import FlowNetwork

    pairs = [(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < 0.4]
    u = np.array([p[0] for p in pairs], dtype=np.int64)
    v = np.array([p[1] for p in pairs], dtype=np.int64)
    caps = lambda m: rng.uniform(0, 5, m) * (rng.random(m) < 0.8)
    return FlowNetwork(n, caps(n), caps(n), u, v, caps(len(pairs)), caps(len(pairs)))


def prototypes_loop(feats, att, masks):
    """Foreground and background prototypes with explicit loops over k, d, y, x.

    ``feats`` is ``K x D x H x W``; ``att`` and ``masks`` are ``K x H x W``.
    """
    K, D, H, W = feats.shape
    fg = np.zeros(D)
    bg = np.zeros(D)
    for k in range(K):
        area = sum(masks[k, y, x] for y in range(H) for x in range(W))
        comp = H * W - area
        for d in range(D):
            num_fg = 0.0
            num_bg = 0.0
            for y in range(H):
                for x in range(W):
                    g = masks[k, y, x]
                    num_fg += att[k, y, x] * g * feats[k, d, y, x]
                    num_bg += (1 - g) * feats[k, d, y, x]
            fg[d] += num_fg / area / K
            bg[d] += num_bg / comp / K
    return fg, bg


def cross_entropy_loop(probs, gt):
    """Mean of -log p_true over pixels of an ``n x H x W`` probability field."""
    total = 0.0
    H, W = gt.shape
    for y in range(H):
        for x in range(W):
            total -= math.log(probs[gt[y, x], y, x])
    return total / (H * W)


def iou_from_lists(pred, gt, n_classes):
    out = []
    for c in range(n_classes):
        tp = sum(1 for p, g in zip(pred, gt) if p == c and g == c)
        fp = sum(1 for p, g in zip(pred, gt) if p == c and g != c)
        fn = sum(1 for p, g in zip(pred, gt) if p != c and g == c)
        out.append(tp / (tp + fp + fn) if tp + fp + fn else float("nan"))
    return out
