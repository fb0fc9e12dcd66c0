"""Feature-volume pipeline tests: convolutions against dense oracles,
pixel-aligned aggregation, voxelization, sparse diffusion, trilinear queries.
"""

import itertools

import numpy as np
import pytest

import sdfrecon.autodiff as ad
from sdfrecon.autodiff import ParameterStore, Tensor, backward, check_gradients
from sdfrecon.geometry import SceneBounds
from sdfrecon.synth import RigSpec, look_at_camera
from sdfrecon import volumes as V


IDENT_POSE = (np.eye(3), np.zeros(3))


def _bounds(lo, hi):
    return SceneBounds(np.asarray(lo, float), np.asarray(hi, float))


# ---------------------------------------------------------------------------
# 2D convolution / encoder
# ---------------------------------------------------------------------------

def test_conv2d_matches_dense_correlation():
    from scipy.signal import correlate2d
    rng = np.random.default_rng(0)
    store = ParameterStore()
    conv = V.Conv2d(store, "c", cin=2, cout=3, k=3, stride=1, rng=rng)
    img = rng.normal(size=(1, 7, 6, 2))
    out = conv(Tensor(img)).data[0]
    w = conv.w.data.reshape(3, 3, 2, 3)
    expect = np.zeros((7, 6, 3))
    for co in range(3):
        for ci in range(2):
            expect[:, :, co] += correlate2d(img[0, :, :, ci], w[:, :, ci, co],
                                            mode="same")
    assert np.max(np.abs(out - expect)) < 1e-12


def test_conv2d_stride_two_subsamples_stride_one():
    rng = np.random.default_rng(1)
    store = ParameterStore()
    c1 = V.Conv2d(store, "c", cin=1, cout=2, k=3, stride=1, rng=rng)
    c2 = V.Conv2d(store, "c", cin=1, cout=2, k=3, stride=2, rng=rng)
    img = Tensor(rng.normal(size=(1, 9, 8, 1)))
    full = c1(img).data
    half = c2(img).data
    assert half.shape == (1, 5, 4, 2)
    assert np.array_equal(half, full[:, ::2, ::2, :])


def test_conv2d_zero_init_gives_zero_maps():
    store = ParameterStore()
    conv = V.Conv2d(store, "z", cin=3, cout=4, zero_init=True)
    out = conv(Tensor(np.random.default_rng(2).normal(size=(2, 5, 5, 3))))
    assert np.array_equal(out.data, np.zeros((2, 5, 5, 4)))


def test_encoder_output_dims_are_quarter_resolution():
    rng = np.random.default_rng(3)
    store = ParameterStore()
    enc = V.ImageEncoder(store, V.EncoderConfig(channels=5, width=4), rng)
    out = V.encode_images(enc, rng.normal(size=(2, 13, 10, 3)))
    assert out.shape == (2, 4, 3, 5)   # ceil(13/4), ceil(10/4)


def test_encoder_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    store = ParameterStore()
    enc = V.ImageEncoder(store, V.EncoderConfig(channels=2, width=3), rng)
    probe = Tensor(rng.normal(size=(1, 2, 2, 2)))

    def f(images):
        out = enc(ad.reshape(images, (1, 8, 8, 3)))
        return ad.tsum(out * probe)

    err = check_gradients(f, rng.normal(size=(1, 8, 8, 3)).ravel() * 0.5)
    assert err < 1e-3


# ---------------------------------------------------------------------------
# Vertex embedder
# ---------------------------------------------------------------------------

def test_vertex_embedder_shapes_and_sharing():
    rng = np.random.default_rng(5)
    emb = V.VertexEmbedder(ParameterStore(), rng)
    verts = np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.1, 0.2, 0.3]])
    codes = emb(verts).data
    assert codes.shape == (3, 16)
    # the perceptron is shared across vertices: equal inputs, equal codes
    assert np.array_equal(codes[0], codes[2])
    assert not np.array_equal(codes[0], codes[1])


# ---------------------------------------------------------------------------
# Bilinear sampling
# ---------------------------------------------------------------------------

def test_bilinear_exact_at_nodes_and_midpoints():
    rng = np.random.default_rng(6)
    fm = rng.normal(size=(4, 5, 2))
    out = V.bilinear_sample(Tensor(fm), [[2.0, 1.0], [2.5, 1.0], [2.0, 1.5]])
    assert np.max(np.abs(out.data[0] - fm[1, 2])) < 1e-12
    assert np.max(np.abs(out.data[1] - 0.5 * (fm[1, 2] + fm[1, 3]))) < 1e-12
    assert np.max(np.abs(out.data[2] - 0.5 * (fm[1, 2] + fm[2, 2]))) < 1e-12


def test_bilinear_matches_weight_expansion_oracle():
    rng = np.random.default_rng(7)
    fm = rng.normal(size=(6, 7, 3))
    pts = rng.uniform([0, 0], [6, 5], size=(40, 2))
    out = V.bilinear_sample(Tensor(fm), pts).data
    for p, o in zip(pts, out):
        x0, y0 = int(np.floor(p[0])), int(np.floor(p[1]))
        x0, y0 = min(x0, 5), min(y0, 4)
        fx, fy = p[0] - x0, p[1] - y0
        expect = ((1 - fx) * (1 - fy) * fm[y0, x0]
                  + fx * (1 - fy) * fm[y0, x0 + 1]
                  + (1 - fx) * fy * fm[y0 + 1, x0]
                  + fx * fy * fm[y0 + 1, x0 + 1])
        assert np.max(np.abs(o - expect)) < 1e-12


def test_bilinear_outside_returns_zero():
    fm = Tensor(np.ones((4, 4, 2)))
    out = V.bilinear_sample(fm, [[-0.01, 1.0], [1.0, 3.01], [50.0, 50.0]])
    assert np.array_equal(out.data, np.zeros((3, 2)))


def test_bilinear_gradient_wrt_feature_map():
    rng = np.random.default_rng(8)
    pts = rng.uniform(0.2, 2.8, size=(9, 2))

    def f(fm):
        out = V.bilinear_sample(ad.reshape(fm, (4, 4, 2)), pts)
        return ad.tsum(out * out)

    assert check_gradients(f, rng.normal(size=(4, 4, 2)).ravel()) < 1e-3


# ---------------------------------------------------------------------------
# Multi-view aggregation
# ---------------------------------------------------------------------------

def _two_cameras():
    spec = RigSpec(width=16, height=16)
    return [look_at_camera(np.array([0.0, 0.0, 2.0]), np.zeros(3), spec),
            look_at_camera(np.array([2.0, 0.0, 0.3]), np.zeros(3), spec)]


def test_aggregate_mean_and_population_variance():
    cams = _two_cameras()
    h = w = 4   # stride-4 grid for 16x16 images
    maps = [Tensor(np.broadcast_to([1.0, 3.0], (h, w, 2)).copy()),
            Tensor(np.broadcast_to([3.0, 5.0], (h, w, 2)).copy())]
    out = V.aggregate_multiview(np.zeros((1, 3)), maps, cams, IDENT_POSE).data
    assert np.max(np.abs(out[0] - [2.0, 4.0, 1.0, 1.0])) < 1e-12


def test_aggregate_is_view_permutation_invariant():
    rng = np.random.default_rng(9)
    cams = _two_cameras() + [look_at_camera(np.array([0.0, 2.0, 0.3]),
                                            np.zeros(3), RigSpec(width=16,
                                                                 height=16))]
    maps = [Tensor(rng.normal(size=(4, 4, 3))) for _ in cams]
    pts = rng.uniform(-0.2, 0.2, size=(5, 3))
    base = V.aggregate_multiview(pts, maps, cams, IDENT_POSE).data
    perm = [2, 0, 1]
    swapped = V.aggregate_multiview(pts, [maps[i] for i in perm],
                                    [cams[i] for i in perm], IDENT_POSE).data
    assert np.max(np.abs(base - swapped)) < 1e-10
    # variance channels are non-negative
    assert np.all(base[:, 3:] >= -1e-15)


def test_aggregate_gradient_flows_to_feature_maps():
    cams = _two_cameras()
    rng = np.random.default_rng(10)
    maps = [Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
            for _ in cams]
    out = V.aggregate_multiview(np.zeros((2, 3)), maps, cams, IDENT_POSE)
    backward(ad.tsum(out * out))
    assert all(m.grad is not None and np.any(m.grad != 0) for m in maps)


# ---------------------------------------------------------------------------
# Voxelization
# ---------------------------------------------------------------------------

def test_voxelize_floor_convention():
    b = _bounds([0, 0, 0], [1, 1, 1])
    s = V.voxelize(np.array([[0.6, 0.6, 0.6]]), Tensor(np.ones((1, 2))), b, 4)
    assert s.coords.tolist() == [[2, 2, 2]]
    assert s.n_rejected == 0


def test_voxelize_averages_collisions_and_rejects_outside():
    b = _bounds([0, 0, 0], [1, 1, 1])
    pts = np.array([[0.51, 0.51, 0.51],
                    [0.74, 0.74, 0.74],     # same cell (2,2,2) at res 4
                    [0.1, 0.1, 0.1],
                    [1.5, 0.5, 0.5]])       # outside
    feats = Tensor(np.array([[1.0], [3.0], [7.0], [99.0]]))
    s = V.voxelize(pts, feats, b, 4)
    assert s.n_rejected == 1
    assert s.coords.tolist() == [[0, 0, 0], [2, 2, 2]]
    assert np.max(np.abs(s.features.data.ravel() - [7.0, 2.0])) < 1e-12


def test_voxelize_pigeonhole_and_mass_conservation():
    rng = np.random.default_rng(11)
    b = _bounds([-1, -1, -1], [1, 1, 1])
    pts = rng.uniform(-1, 1, size=(100, 3))
    feats = rng.normal(size=(100, 2))
    s = V.voxelize(pts, Tensor(feats), b, 2)
    assert len(s.coords) <= 8
    # per-cell averages weighted by occupancy recover the total feature mass
    counts = np.zeros(len(s.flat))
    idx = np.floor((pts - b.lo) / (2.0 / 2)).astype(int).clip(0, 1)
    flat = (idx[:, 0] * 2 + idx[:, 1]) * 2 + idx[:, 2]
    for f in flat:
        counts[np.searchsorted(s.flat, f)] += 1
    total = (s.features.data * counts[:, None]).sum(axis=0)
    assert np.max(np.abs(total - feats.sum(axis=0))) < 1e-10


def test_voxelize_gradient_routes_through_averaging():
    b = _bounds([0, 0, 0], [1, 1, 1])
    feats = Tensor(np.array([[2.0], [4.0]]), requires_grad=True)
    s = V.voxelize(np.full((2, 3), 0.6), feats, b, 4)
    backward(ad.tsum(s.features * 3.0))
    assert np.max(np.abs(feats.grad - 1.5)) < 1e-12


# ---------------------------------------------------------------------------
# Sparse diffusion
# ---------------------------------------------------------------------------

def _random_sparse(rng, res, n, cin):
    pts = rng.integers(1, res - 1, size=(n, 3))
    flat = (pts[:, 0] * res + pts[:, 1]) * res + pts[:, 2]
    uniq = np.unique(flat)
    coords = np.stack([uniq // (res * res), (uniq // res) % res, uniq % res],
                      axis=1)
    feats = Tensor(rng.normal(size=(len(uniq), cin)), requires_grad=True)
    return V.SparseFeatureSet(res, coords, uniq, feats)


def test_sparse_conv_identity_init_preserves_features():
    rng = np.random.default_rng(12)
    sp = _random_sparse(rng, 8, 20, 3)
    conv = V.SparseConv3d(ParameterStore(), "c", 3, 3, identity_init=True)
    out = conv(sp)
    # original active cells keep their features; dilated ring is exactly zero
    lut = {f: i for i, f in enumerate(out.flat)}
    for i, f in enumerate(sp.flat):
        assert np.max(np.abs(out.features.data[lut[f]]
                             - sp.features.data[i])) < 1e-15
    ring = set(out.flat.tolist()) - set(sp.flat.tolist())
    for f in ring:
        assert np.array_equal(out.features.data[lut[f]], np.zeros(3))


def test_sparse_conv_receptive_field_grows_by_one_per_layer():
    store = ParameterStore()
    rng = np.random.default_rng(13)
    res = 9
    center = np.array([[4, 4, 4]])
    flat = np.array([(4 * res + 4) * res + 4])
    sp = V.SparseFeatureSet(res, center, flat, Tensor(np.ones((1, 2))))
    conv = V.SparseConv3d(store, "g", 2, 2, rng=rng)
    for n_layers in (1, 2, 3):
        out = sp
        for _ in range(n_layers):
            out = conv(out)
        assert len(out.coords) == (2 * n_layers + 1) ** 3


def test_sparse_conv_matches_dense_convolution():
    rng = np.random.default_rng(14)
    res, cin, cout = 16, 3, 2
    sp = _random_sparse(rng, res, 60, cin)
    conv = V.SparseConv3d(ParameterStore(), "c", cin, cout, rng=rng)
    out = conv(sp)

    dense_in = np.zeros((res, res, res, cin))
    dense_in[sp.coords[:, 0], sp.coords[:, 1], sp.coords[:, 2]] = \
        sp.features.data
    w = conv.w.data.reshape(27, cin, cout)
    expect = np.zeros((res, res, res, cout))
    padded = np.pad(dense_in, ((1, 1), (1, 1), (1, 1), (0, 0)))
    for i, (ox, oy, oz) in enumerate(itertools.product((-1, 0, 1), repeat=3)):
        shifted = padded[1 + ox:1 + ox + res, 1 + oy:1 + oy + res,
                         1 + oz:1 + oz + res]
        expect += shifted @ w[i]

    dense_out = np.zeros((res, res, res, cout))
    dense_out[out.coords[:, 0], out.coords[:, 1], out.coords[:, 2]] = \
        out.features.data
    assert np.max(np.abs(dense_out - expect)) < 1e-10


def test_sparse_conv_gradient_matches_finite_differences():
    rng = np.random.default_rng(15)
    sp = _random_sparse(rng, 6, 8, 2)
    conv = V.SparseConv3d(ParameterStore(), "c", 2, 2, rng=rng)
    m = len(sp.flat)

    def f(feats):
        s = V.SparseFeatureSet(6, sp.coords, sp.flat,
                               ad.reshape(feats, (m, 2)))
        out = conv(s)
        return ad.tsum(out.features * out.features)

    assert check_gradients(f, sp.features.data.ravel()) < 1e-3


def test_diffusion_net_stacks_and_relu():
    rng = np.random.default_rng(16)
    sp = _random_sparse(rng, 8, 10, 4)
    net = V.DiffusionNet(ParameterStore(), "d", cin=4, hidden=6, cout=3,
                         n_layers=3, rng=rng)
    vol = V.diffuse(net, sp, _bounds([-1, -1, -1], [1, 1, 1]))
    assert vol.features.shape[1] == 3
    assert len(vol.flat) > len(sp.flat)


# ---------------------------------------------------------------------------
# Trilinear queries
# ---------------------------------------------------------------------------

def _full_volume(res, values, bounds):
    flat = np.arange(res ** 3)
    return V.FeatureVolume(res, bounds, flat,
                           Tensor(values.reshape(res ** 3, -1)))


def _cell_centers(res, bounds):
    cell = (bounds.hi - bounds.lo) / res
    ax = [bounds.lo[a] + (np.arange(res) + 0.5) * cell[a] for a in range(3)]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def test_trilinear_exact_at_cell_centers():
    rng = np.random.default_rng(17)
    b = _bounds([-1, -1, -1], [1, 1, 1])
    values = rng.normal(size=(4, 4, 4, 2))
    vol = _full_volume(4, values, b)
    centers = _cell_centers(4, b).reshape(-1, 3)
    out = V.trilinear(vol, centers).data
    assert np.max(np.abs(out - values.reshape(-1, 2))) < 1e-12


def test_trilinear_reproduces_affine_fields():
    b = _bounds([0, 0, 0], [2, 2, 2])
    a = np.array([0.7, -1.2, 0.4])
    centers = _cell_centers(5, b)
    values = (centers @ a + 0.3)[..., None]
    vol = _full_volume(5, values, b)
    rng = np.random.default_rng(18)
    # stay inside the cell-center hull so no zero boundary is interpolated
    pts = rng.uniform(0.3, 1.7, size=(30, 3))
    f, df = V.trilinear_jvp(vol, pts)
    assert np.max(np.abs(f.data.ravel() - (pts @ a + 0.3))) < 1e-10
    assert np.max(np.abs(df.data[:, :, 0] - a)) < 1e-10


def test_trilinear_out_of_bounds_is_zero():
    b = _bounds([0, 0, 0], [1, 1, 1])
    vol = _full_volume(3, np.ones((3, 3, 3, 1)), b)
    out = V.trilinear(vol, [[2.0, 0.5, 0.5], [-1.0, 0.5, 0.5]]).data
    assert np.array_equal(out, np.zeros((2, 1)))


def test_trilinear_spatial_derivative_matches_finite_differences():
    rng = np.random.default_rng(19)
    b = _bounds([-1, -1, -1], [1, 1, 1])
    vol = _full_volume(5, rng.normal(size=(5, 5, 5, 2)), b)
    pts = rng.uniform(-0.5, 0.5, size=(12, 3))
    _, df = V.trilinear_jvp(vol, pts)
    eps = 1e-5
    for a in range(3):
        shift = np.zeros(3)
        shift[a] = eps
        hi = V.trilinear_np(vol, pts + shift)
        lo = V.trilinear_np(vol, pts - shift)
        numeric = (hi - lo) / (2 * eps)
        assert np.max(np.abs(df.data[:, a, :] - numeric)) < 1e-3


def test_trilinear_feature_gradient_matches_finite_differences():
    rng = np.random.default_rng(20)
    b = _bounds([0, 0, 0], [1, 1, 1])
    flat = np.arange(27)
    pts = rng.uniform(0.2, 0.8, size=(6, 3))

    def f(feats):
        vol = V.FeatureVolume(3, b, flat, ad.reshape(feats, (27, 2)))
        fv, dfv = V.trilinear_jvp(vol, pts)
        return ad.tsum(fv * fv) + ad.tsum(dfv * dfv) * 0.1

    assert check_gradients(f, rng.normal(size=(27, 2)).ravel()) < 1e-3


def test_trilinear_np_matches_graph_path():
    rng = np.random.default_rng(21)
    b = _bounds([-1, -1, -1], [1, 1, 1])
    sp = _random_sparse(rng, 6, 30, 3)
    vol = V.FeatureVolume(6, b, sp.flat, sp.features)
    pts = rng.uniform(-1.2, 1.2, size=(50, 3))
    assert np.array_equal(V.trilinear_np(vol, pts),
                          V.trilinear(vol, pts).data)
