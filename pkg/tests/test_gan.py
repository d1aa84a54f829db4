"""Tri-plane generator: mapping, synthesis, decode, volume rendering."""

import numpy as np
import pytest

from portrait_studio.camera import FAR, CameraPose
from portrait_studio.errors import InvalidInputError
from portrait_studio.gan import (GeneratorParams, PlaneSampler, TriPlanes,
                                 composite_rays, latent_mean, map_latent,
                                 render, sample_decode, sample_w_truncated,
                                 sample_z, synthesize_planes,
                                 synthesize_triplanes)
from portrait_studio.gan import _ray_bundle
from portrait_studio.tensor import Tensor, grad_check


@pytest.fixture(scope="module")
def gen64():
    return GeneratorParams.init(0).astype(np.float64)


def test_map_latent_zero_weights_returns_bias(gen64):
    g = gen64.copy()
    for i in range(len(g.mapping.weights)):
        g.mapping.weights[i][...] = 0.0
        g.mapping.biases[i][...] = 0.0
    g.mapping.biases[-1][...] = 1.5
    w = map_latent(g, sample_z(0))
    assert np.allclose(w.data, 1.5)


def test_map_latent_deterministic(gen64):
    z = sample_z(3)
    assert np.array_equal(map_latent(gen64, z).data, map_latent(gen64, z).data)


def test_map_latent_jacobian_vs_fd(gen64):
    z = sample_z(1)
    err = grad_check(lambda t: map_latent(gen64, t).sum(), z, eps=1e-5)
    assert err < 1e-3


def test_synthesize_zero_weights_gives_bias_field(gen64):
    g = gen64.copy()
    for i in range(len(g.synthesis.weights)):
        g.synthesis.weights[i][...] = 0.0
        g.synthesis.biases[i][...] = 0.0
    g.synthesis.biases[-1][...] = 0.25
    planes = synthesize_triplanes(g, map_latent(g, sample_z(0)).data)
    assert np.allclose(planes.data, 0.25)


def test_synthesize_shape_contract(gen64):
    planes = synthesize_triplanes(gen64, map_latent(gen64, sample_z(2)).data)
    assert planes.data.shape == (3, 32, 32, 16)
    assert planes.as_crr().shape == (3, 16, 32, 32)


def test_synthesize_gradient_vs_fd(gen64):
    w = map_latent(gen64, sample_z(4)).data
    probe = np.random.default_rng(0).standard_normal((3, 32, 32, 16))
    err = grad_check(lambda t: (synthesize_planes(gen64, t) * Tensor(probe)).sum(), w, eps=1e-5)
    assert err < 1e-3


def test_sample_decode_bilinear_node_and_midpoint(gen64):
    # identity-ish decoder stub: read out feature channel 0 as sigma input
    g = gen64.copy()
    rng = np.random.default_rng(5)
    planes = rng.standard_normal((3, 32, 32, 16))

    sampler_pts = []
    r = 32
    # grid node (i, j) on each plane maps to coords 2*i/(r-1)-1
    i, j = 7, 12
    u = 2 * i / (r - 1) - 1
    v = 2 * j / (r - 1) - 1
    node_pt = np.array([u, v, v])  # XY:(x,y)=(u,v), XZ:(x,z)=(u,v), YZ:(y,z)=(v,v)
    sam = PlaneSampler(node_pt[None, :], r)
    feats = sam.sample(Tensor(planes))
    expected = planes[0, i, j] + planes[1, i, j] + \
        planes[2, int((v + 1) / 2 * (r - 1)), int((v + 1) / 2 * (r - 1))]
    assert np.allclose(feats.data[0], expected, atol=1e-12)

    # midpoint of a cell = average of its 4 corners, per plane
    mid = np.array([u + 1 / (r - 1), v + 1 / (r - 1), v + 1 / (r - 1)])
    sam2 = PlaneSampler(mid[None, :], r)
    f2 = sam2.sample(Tensor(planes))
    manual = np.zeros(16)
    for k, (a, b) in enumerate([(0, 1), (0, 2), (1, 2)]):
        uu = (mid[a] + 1) / 2 * (r - 1)
        vv = (mid[b] + 1) / 2 * (r - 1)
        iu, iv = int(uu), int(vv)
        manual += 0.25 * (planes[k, iu, iv] + planes[k, iu, iv + 1] +
                          planes[k, iu + 1, iv] + planes[k, iu + 1, iv + 1])
    assert np.allclose(f2.data[0], manual, atol=1e-12)


def test_sample_decode_outside_cube_zero_sigma(gen64):
    planes = synthesize_triplanes(gen64, map_latent(gen64, sample_z(0)).data)
    sigma, _ = sample_decode(gen64, planes, np.array([1.5, 0.0, 0.0]))
    assert sigma.data[0] == 0.0


def test_sample_decode_point_gradient(gen64):
    planes = synthesize_triplanes(gen64, map_latent(gen64, sample_z(0)).data)

    def f(t):
        sigma, rgb = sample_decode(gen64, planes, t)
        return sigma.sum() + rgb.sum()

    pts = np.array([[0.3, -0.2, 0.5], [-0.6, 0.1, 0.0]])
    assert grad_check(f, pts, eps=1e-6) < 1e-3


def test_render_rejects_bad_resolution(gen64):
    with pytest.raises(InvalidInputError):
        render(gen64, np.zeros(32), CameraPose(0, 0), 100)


def test_render_empty_field_background_and_far(gen64):
    g = gen64.copy()
    for i in range(len(g.decoder.weights)):
        g.decoder.weights[i][...] = 0.0
        g.decoder.biases[i][...] = 0.0
    g.decoder.biases[-1][0] = -40.0  # softplus(-41) underflows to exactly 0
    g.background[...] = np.array([0.3, -0.1, 0.8])
    out = render(g, np.zeros(32), CameraPose(0.1, -0.05), 32)
    bg = 1.0 / (1.0 + np.exp(-g.background))
    assert np.allclose(out.rgb.data, bg[None, None, :], atol=1e-12)
    assert np.allclose(out.depth, FAR, atol=1e-9)
    assert np.allclose(out.opacity, 0.0)


def test_render_deterministic_bit_identical(gen64):
    w = map_latent(gen64, sample_z(9)).data
    a = render(gen64, w, CameraPose(0.2, 0.1), 32)
    b = render(gen64, w, CameraPose(0.2, 0.1), 32)
    assert np.array_equal(a.rgb.data, b.rgb.data)
    assert np.array_equal(a.depth, b.depth)


def test_homogeneous_slab_opacity_closed_form(gen64):
    """Slab aligned to the sampling segmentation: exact vs 1-exp(-sigma*delta)."""
    res, n = 32, 48
    bundle = _ray_bundle(CameraPose(0.0, 0.0), res, n, 32)
    ray = res * res // 2 + res // 2  # central pixel
    t = bundle.t_vals[ray]
    a_idx, b_idx = 10, 34
    t_start, t_end = t[a_idx], t[b_idx]  # slab spans whole segments
    sigma0 = 1.3

    def box_sigma(tq):
        return np.where((tq >= t_start) & (tq < t_end), sigma0, 0.0)

    def run(n_sub):
        # refine each segment n_sub times, densities at segment starts
        edges = np.concatenate([t, [FAR]])
        tq = np.concatenate([
            np.linspace(edges[k], edges[k + 1], n_sub, endpoint=False)
            for k in range(n)])
        sig = Tensor(box_sigma(tq)[None, :])
        rgb = Tensor(np.ones((1, tq.size, 3)) * 0.5)
        out, depth, opac = composite_rays(sig, rgb, tq[None, :], Tensor(np.zeros(3)))
        return opac[0]

    closed = 1.0 - np.exp(-sigma0 * (t_end - t_start))
    opac1 = run(1)
    opac2 = run(2)  # doubled-sample quadrature oracle
    assert abs(opac1 - closed) < 1e-3
    assert abs(opac2 - closed) < 1e-3
    assert abs(opac1 - opac2) < 1e-3


def test_composited_opacity_within_unit_interval(gen64):
    w = map_latent(gen64, sample_z(11)).data
    out = render(gen64, w, CameraPose(0.3, -0.2), 32)
    assert (out.opacity >= 0.0).all() and (out.opacity <= 1.0).all()


def test_render_gradient_wrt_w_subset(gen64):
    w = map_latent(gen64, sample_z(6)).data
    probe = np.random.default_rng(1).standard_normal((32, 32, 3))

    def f(t):
        return (render(gen64, t, CameraPose(0.1, 0.0), 32).rgb * Tensor(probe)).sum()

    assert grad_check(f, w, eps=1e-5) < 1e-3


def test_truncation_endpoints_and_convexity(gen64):
    w_bar = latent_mean(gen64)
    w0 = sample_w_truncated(gen64, 7, 0.0)
    assert np.allclose(w0, w_bar, atol=1e-12)
    w1 = sample_w_truncated(gen64, 7, 1.0)
    w_direct = map_latent(gen64, sample_z(7)).data
    assert np.allclose(w1, w_direct, atol=1e-12)
    w07 = sample_w_truncated(gen64, 7, 0.7)
    assert np.allclose(w07, w_bar + 0.7 * (w_direct - w_bar), atol=1e-12)


def test_truncation_range_check(gen64):
    with pytest.raises(InvalidInputError):
        sample_w_truncated(gen64, 0, 1.5)


def test_triplanes_type_validation():
    with pytest.raises(InvalidInputError):
        TriPlanes(np.zeros((2, 32, 32, 16)))
