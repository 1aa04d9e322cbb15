import math

import numpy as np
import pytest

from forestfss.grabcut import (
    FlowNetwork,
    GmmModel,
    Trimap,
    build_graph,
    fit_gmm,
    max_flow,
    refine_mask,
    refit_gmm,
    save_mask_png,
    smoothness_links,
)
from forestfss.synthetic import noisy_disk

from oracles import brute_min_cut, random_network


# ---------------------------------------------------------------- max flow


def test_two_node_example_flow_five():
    net = FlowNetwork(2, [3.0, 2.0], [2.0, 3.0], [0], [1], [1.0], [0.0])
    flow, side = max_flow(net)
    assert flow == pytest.approx(5.0)
    assert brute_min_cut(net) == pytest.approx(5.0)
    assert net.cut_capacity(side) == pytest.approx(5.0)


def test_single_pixel_goes_to_cheaper_side():
    flow, side = max_flow(FlowNetwork(1, [9.0], [1.0], [], [], [], []))
    assert flow == pytest.approx(1.0) and side.tolist() == [True]


def test_disconnected_pixel_goes_to_background():
    flow, side = max_flow(FlowNetwork(1, [0.0], [0.0], [], [], [], []))
    assert flow == 0.0 and side.tolist() == [False]


def test_empty_network():
    flow, side = max_flow(FlowNetwork(0, [], [], [], [], [], []))
    assert flow == 0.0 and side.size == 0


@pytest.mark.parametrize("seed", range(40))
def test_max_flow_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, int(rng.integers(1, 11)))
    flow, side = max_flow(net)
    best = brute_min_cut(net)
    assert flow == pytest.approx(best, rel=1e-9, abs=1e-9)
    assert abs(net.cut_capacity(side) - flow) <= 1e-9 * max(1.0, flow)


@pytest.mark.parametrize("bad", [[-1.0], [math.inf], [math.nan]])
def test_network_rejects_invalid_capacity(bad):
    with pytest.raises(ValueError):
        FlowNetwork(1, bad, [0.0], [], [], [], [])


# ---------------------------------------------------------------- n-links


def test_uniform_image_links_fall_back_to_gamma():
    u, v, caps, beta = smoothness_links(np.full((3, 3, 3), 100, dtype=np.uint8), 50.0)
    assert beta == 0.0
    dy = np.abs(u // 3 - v // 3)
    dx = np.abs(u % 3 - v % 3)
    axis = (dy + dx) == 1
    np.testing.assert_allclose(caps[axis], 50.0)
    np.testing.assert_allclose(caps[~axis], 50.0 / math.sqrt(2))
    # 3x3 grid: 12 axis pairs, 8 diagonal pairs
    assert axis.sum() == 12 and (~axis).sum() == 8


def test_two_tone_boundary_links_weaker():
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    img[:, 2:] = 200
    u, v, caps, beta = smoothness_links(img, 50.0)
    assert beta > 0
    col = lambda i: i % 4
    crosses = (col(u) < 2) != (col(v) < 2)
    axis = (np.abs(u // 4 - v // 4) + np.abs(col(u) - col(v))) == 1
    assert caps[crosses & axis].max() < caps[~crosses & axis].min()


def test_n_links_2x2_hand_table():
    img = np.zeros((2, 2, 3))
    img[0, 1] = [1, 0, 0]
    # pairs: (0,1) d2=1, (2,3) d2=0, (0,2) 0, (1,3) d2=1, diag (0,3) 0, anti (1,2) d2=1
    u, v, caps, beta = smoothness_links(img, 1.0)
    assert beta == pytest.approx(1.0 / (2 * 0.5))
    table = {(int(a), int(b)): c for a, b, c in zip(u, v, caps)}
    assert table[(0, 1)] == pytest.approx(math.exp(-1))
    assert table[(2, 3)] == pytest.approx(1.0)
    assert table[(0, 2)] == pytest.approx(1.0)
    assert table[(1, 3)] == pytest.approx(math.exp(-1))
    assert table[(0, 3)] == pytest.approx(1 / math.sqrt(2))
    assert table[(1, 2)] == pytest.approx(math.exp(-1) / math.sqrt(2))


def test_build_graph_t_links():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 255, (5, 5, 3)).astype(np.uint8)
    mask = np.zeros((5, 5), dtype=np.uint8)
    mask[1:4, 1:4] = 1
    z = img.reshape(-1, 3).astype(float)
    fg = fit_gmm(z[mask.ravel() == 1], 2, rng)
    bg = fit_gmm(z[mask.ravel() == 0], 2, rng)
    net = build_graph(img, Trimap.from_mask(mask), fg, bg, 50.0)
    inside = mask.ravel() == 1
    d_fg, d_bg = fg.neg_log_likelihood(z), bg.neg_log_likelihood(z)
    # both t-links of a pixel are shifted by the same amount
    np.testing.assert_allclose((net.source_caps - net.sink_caps)[inside], (d_bg - d_fg)[inside])
    assert (net.source_caps[~inside] == 0).all()
    incident = np.bincount(net.edge_u, net.edge_caps, 25) + np.bincount(net.edge_v, net.edge_caps, 25)
    assert (net.sink_caps[~inside] > incident.max()).all()
    np.testing.assert_array_equal(net.edge_caps, net.edge_rev_caps)


def test_t_links_3x3_hand_table_for_fixed_models():
    # unit-covariance single Gaussians at 0 (fg) and 2 (bg) in every channel
    fg = GmmModel(np.ones(1), np.zeros((1, 3)), np.eye(3)[None])
    bg = GmmModel(np.ones(1), np.full((1, 3), 2.0), np.eye(3)[None])
    img = np.array([[0, 1, 2], [2, 0, 1], [1, 2, 0]], dtype=float)[..., None].repeat(3, axis=2)
    mask = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]])
    net = build_graph(img, Trimap.from_mask(mask), fg, bg, 50.0)
    c = 1.5 * math.log(2 * math.pi)  # 2.7568
    # value v: d_fg = c + 1.5 v^2, d_bg = c + 1.5 (v - 2)^2; both positive, no shift
    table = {0: (c + 6.0, c), 1: (c + 1.5, c + 1.5), 2: (c, c + 6.0)}
    for p, v in enumerate(img[..., 0].ravel().astype(int)):
        if mask.ravel()[p]:
            src, snk = table[v]
            assert net.source_caps[p] == pytest.approx(src)
            assert net.sink_caps[p] == pytest.approx(snk)
        else:
            assert net.source_caps[p] == 0.0 and net.sink_caps[p] > 50.0


# ---------------------------------------------------------------- mixtures


def test_single_component_gmm_is_sample_moments():
    rng = np.random.default_rng(1)
    z = rng.normal([10, 20, 30], [1, 2, 3], (500, 3))
    g = fit_gmm(z, 1, rng)
    np.testing.assert_allclose(g.means[0], z.mean(0))
    np.testing.assert_allclose(g.covs[0], np.cov(z.T, bias=True) + 1e-4 * np.eye(3))
    from scipy.stats import multivariate_normal

    ref = -multivariate_normal(g.means[0], g.covs[0]).logpdf(z[:5])
    np.testing.assert_allclose(g.neg_log_likelihood(z[:5]), ref)


def test_identical_pixels_keep_finite_likelihood():
    z = np.full((20, 3), 7.0)
    g = fit_gmm(z, 1, np.random.default_rng(0))
    assert np.isfinite(g.neg_log_likelihood(z)).all()


def test_gmm_too_few_pixels():
    with pytest.raises(ValueError, match="k <= 2"):
        fit_gmm(np.zeros((2, 3)), 5, np.random.default_rng(0))


def test_refit_separates_two_clusters():
    rng = np.random.default_rng(2)
    z = np.concatenate([rng.normal(0, 1, (100, 3)), rng.normal(50, 1, (100, 3))])
    g = refit_gmm(fit_gmm(z, 2, rng), z)
    assert sorted(np.round(g.weights, 2)) == [0.5, 0.5]
    with pytest.raises(ValueError):
        refit_gmm(g, np.zeros((0, 3)))


def test_empty_component_has_zero_weight():
    g = GmmModel(np.array([1.0, 0.0]), np.zeros((2, 3)), np.tile(np.eye(3), (2, 1, 1)))
    assert np.isfinite(g.neg_log_likelihood(np.zeros((3, 3)))).all()


# ---------------------------------------------------------------- refinement


def test_refine_noisy_disk_recovers_clean_mask():
    image, clean, noisy = noisy_disk(np.random.default_rng(0))
    out = refine_mask(image, noisy, rng=0)
    iou = (out & clean).sum() / (out | clean).sum()
    assert iou > max(0.95, (noisy & clean).sum() / (noisy | clean).sum())
    assert not (out.astype(bool) & ~noisy.astype(bool)).any()


def test_refine_is_reproducible():
    image, _, noisy = noisy_disk(np.random.default_rng(5))
    np.testing.assert_array_equal(refine_mask(image, noisy, rng=3), refine_mask(image, noisy, rng=3))


@pytest.mark.parametrize(
    "mask, msg",
    [(np.zeros((8, 8)), "no foreground"), (np.ones((8, 8)), "no background"), (np.full((8, 8), 2), "binary")],
)
def test_refine_rejects_degenerate_masks(mask, msg):
    with pytest.raises(ValueError, match=msg):
        refine_mask(np.zeros((8, 8, 3), dtype=np.uint8), mask)


def test_save_mask_png(tmp_path):
    from PIL import Image

    m = np.eye(4, dtype=np.uint8)
    save_mask_png(m, tmp_path / "m.png")
    with Image.open(tmp_path / "m.png") as im:
        assert im.mode == "1"
        np.testing.assert_array_equal(np.asarray(im).astype(np.uint8), m)
