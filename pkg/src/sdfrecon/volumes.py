"""Double diffusion: image encoding, vertex codes, multi-view anchor
features, sparse-convolution diffusion into two feature volumes, and
differentiable trilinear queries.

Voxel convention: cell index = floor((x - lo) / cell_size), clamped at the
upper face; a cell's feature lives at its center, so trilinear queries
interpolate between cell centers. Out-of-bounds queries return zeros.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import project


class VolumeError(Exception):
    pass


# ---------------------------------------------------------------------------
# 2D convolution machinery (im2col over gather/matmul primitives)
# ---------------------------------------------------------------------------

_COL_CACHE = {}


def _im2col_indices(n, h, w, k, stride):
    """Row indices into the flattened (n*h*w + 1) image stack; the last row
    is the zero-padding row."""
    key = (n, h, w, k, stride)
    if key in _COL_CACHE:
        return _COL_CACHE[key]
    pad = k // 2
    oh = -(-h // stride)
    ow = -(-w // stride)
    oy = np.arange(oh) * stride
    ox = np.arange(ow) * stride
    ky, kx = np.meshgrid(np.arange(k) - pad, np.arange(k) - pad, indexing="ij")
    iy = oy[:, None, None, None] + ky[None, None]          # (oh,1,k,k)
    ix = ox[None, :, None, None] + kx[None, None]          # (1,ow,k,k)
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    base = np.arange(n)[:, None, None, None, None] * (h * w)
    flat = base + np.clip(iy, 0, h - 1)[None] * w + np.clip(ix, 0, w - 1)[None]
    flat = np.where(valid[None], flat, n * h * w)           # zero row
    out = flat.reshape(n * oh * ow, k * k), oh, ow
    _COL_CACHE[key] = out
    return out


class Conv2d:
    """3x3 (or 1x1) convolution with zero padding on NHWC tensors."""

    def __init__(self, store, name, cin, cout, k=3, stride=1, rng=None,
                 zero_init=False):
        self.k = k
        self.stride = stride
        self.cin = cin
        self.cout = cout
        if name + "/w" in store:
            self.w = store[name + "/w"]
            self.b = store[name + "/b"]
            return
        if zero_init:
            w = np.zeros((k * k * cin, cout))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (k * k * cin)),
                           size=(k * k * cin, cout))
        self.w = store.add(name + "/w", w)
        self.b = store.add(name + "/b", np.zeros(cout))

    def __call__(self, x):
        n, h, w, c = x.shape
        idx, oh, ow = _im2col_indices(n, h, w, self.k, self.stride)
        flat = ad.reshape(x, (n * h * w, c))
        padded = ad.concat([flat, Tensor(np.zeros((1, c)))], axis=0)
        cols = ad.gather(padded, idx.ravel(), axis=0)
        cols = ad.reshape(cols, (n * oh * ow, self.k * self.k * c))
        out = ad.matmul(cols, self.w) + self.b
        return ad.reshape(out, (n, oh, ow, self.cout))


def upsample2x(x):
    n, h, w, c = x.shape
    idx = np.arange(n * h * w).reshape(n, h, w)
    idx = np.repeat(np.repeat(idx, 2, axis=1), 2, axis=2)
    flat = ad.reshape(x, (n * h * w, c))
    out = ad.gather(flat, idx.ravel(), axis=0)
    return ad.reshape(out, (n, 2 * h, 2 * w, c))


@dataclass
class EncoderConfig:
    channels: int = 16       # output feature channels c
    width: int = 16          # internal channel width
    stride: int = 4          # fixed output stride contract


class ImageEncoder:
    """Small convolutional encoder-decoder, output stride 4 with skips.

    A stem reaches stride 4, then two more downsampling stages and two
    upsampling stages with skip connections recover stride 4.
    """

    def __init__(self, store, cfg, rng, prefix="encoder"):
        c1 = cfg.width
        c2 = cfg.width * 2
        self.cfg = cfg
        mk = lambda name, ci, co, **kw: Conv2d(store, prefix + "/" + name,
                                               ci, co, rng=rng, **kw)
        self.stem1 = mk("stem1", 3, c1, stride=2)
        self.stem2 = mk("stem2", c1, c2, stride=2)
        self.down1 = mk("down1", c2, c2, stride=2)
        self.down2 = mk("down2", c2, c2, stride=2)
        self.mid = mk("mid", c2, c2)
        self.up1 = mk("up1", c2, c2)
        self.up2 = mk("up2", c2, c2)
        self.head = mk("head", c2, cfg.channels, k=1)

    def __call__(self, images):
        """images: (N,H,W,3) Tensor -> (N, ceil(H/4), ceil(W/4), c) Tensor."""
        x4 = ad.relu(self.stem2(ad.relu(self.stem1(images))))
        x8 = ad.relu(self.down1(x4))
        x16 = ad.relu(self.down2(x8))
        y = ad.relu(self.mid(x16))
        y = upsample2x(y)[:, :x8.shape[1], :x8.shape[2], :]
        y = ad.relu(self.up1(y)) + x8
        y = upsample2x(y)[:, :x4.shape[1], :x4.shape[2], :]
        y = ad.relu(self.up2(y)) + x4
        return self.head(y)


def encode_images(encoder, images):
    """Per-view stride-4 feature maps for a (N,H,W,3) image stack."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise VolumeError("expected (N,H,W,3) image stack")
    return encoder(Tensor(images))


# ---------------------------------------------------------------------------
# Coarse vertex codes
# ---------------------------------------------------------------------------

class VertexEmbedder:
    """Shared per-vertex perceptron mapping canonical coordinates to a
    16-channel latent code (identical inputs give identical codes)."""

    def __init__(self, store, rng, code_dim=16, hidden=32, prefix="embedder"):
        self.code_dim = code_dim
        if prefix + "/w1" in store:
            self.w1 = store[prefix + "/w1"]
            self.b1 = store[prefix + "/b1"]
            self.w2 = store[prefix + "/w2"]
            self.b2 = store[prefix + "/b2"]
            return
        self.w1 = store.add(prefix + "/w1",
                            rng.normal(0, np.sqrt(2.0 / 3), size=(3, hidden)))
        self.b1 = store.add(prefix + "/b1", np.zeros(hidden))
        self.w2 = store.add(prefix + "/w2",
                            rng.normal(0, np.sqrt(2.0 / hidden),
                                       size=(hidden, code_dim)))
        self.b2 = store.add(prefix + "/b2", np.zeros(code_dim))

    def __call__(self, vertices):
        h = ad.relu(ad.matmul(Tensor(np.asarray(vertices, float)), self.w1)
                    + self.b1)
        return ad.matmul(h, self.w2) + self.b2


def embed_vertices(embedder, template):
    return embedder(template.vertices)


# ---------------------------------------------------------------------------
# Pixel-aligned sampling and multi-view aggregation
# ---------------------------------------------------------------------------

def bilinear_sample(feature_map, pixels):
    """Bilinear interpolation of a (h,w,C) Tensor at continuous (x,y) pixel
    coordinates; queries outside [0,w-1]x[0,h-1] return zeros."""
    h, w, c = feature_map.shape
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    x = pix[:, 0]
    y = pix[:, 1]
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2) if w > 1 else \
        np.zeros(len(x), dtype=np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2) if h > 1 else \
        np.zeros(len(y), dtype=np.int64)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    w00 = (1 - fx) * (1 - fy) * valid
    w10 = fx * (1 - fy) * valid
    w01 = (1 - fx) * fy * valid
    w11 = fx * fy * valid
    flat = ad.reshape(feature_map, (h * w, c))
    weights = np.stack([w00, w10, w01, w11], axis=1)      # (P,4)
    rows = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
                    axis=1)                                # (P,4)
    corners = ad.gather(flat, rows.ravel(), axis=0)
    corners = ad.reshape(corners, (len(pix), 4, c))
    out = ad.matmul(Tensor(weights[:, None, :]), corners)  # (P,1,C)
    return ad.reshape(out, (len(pix), c))


def project_to_feature_grid(points, template_pose, camera, stride):
    """Continuous feature-grid pixels plus validity (in front and in image)."""
    pix, depth = project(points, template_pose, camera, strict=False)
    valid = (depth > 1e-9) & (pix[:, 0] >= 0) & (pix[:, 0] <= camera.width - 1) \
        & (pix[:, 1] >= 0) & (pix[:, 1] <= camera.height - 1)
    pix = np.where(valid[:, None], pix, -1e6)
    return pix / stride, pix, valid


def aggregate_multiview(points, feature_maps, cameras, template_pose, stride=4):
    """Mean/variance (population) over per-view pixel-aligned features.

    Views where a point is behind the camera or projects outside the image
    contribute the zero feature. Returns a (P, 2c) Tensor.
    """
    if len(cameras) == 0:
        raise VolumeError("need at least one view")
    per_view = []
    for fm, cam in zip(feature_maps, cameras):
        grid_pix, _, _ = project_to_feature_grid(points, template_pose, cam,
                                                 stride)
        f = bilinear_sample(fm, grid_pix)
        per_view.append(ad.reshape(f, (1,) + f.shape))
    stack = ad.concat(per_view, axis=0)                    # (Nv,P,C)
    mean = ad.tmean(stack, axis=0)                         # (P,C)
    centered = stack - mean
    var = ad.tmean(centered * centered, axis=0)
    return ad.concat([mean, var], axis=-1)


# ---------------------------------------------------------------------------
# Voxelization and sparse diffusion
# ---------------------------------------------------------------------------

@dataclass
class SparseFeatureSet:
    resolution: int
    coords: np.ndarray        # (M,3) int voxel coordinates, deduplicated
    flat: np.ndarray          # (M,) sorted flat ids coords -> x*r^2+y*r+z
    features: object          # Tensor (M,C)
    n_rejected: int = 0


def voxelize(points, features, bounds, resolution):
    """Map world points to voxel cells; features colliding in a cell are
    averaged. Points outside the bounds are rejected (count reported)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cell = (bounds.hi - bounds.lo) / resolution
    inside = bounds.contains(points)
    n_rejected = int((~inside).sum())
    points = points[inside]
    if len(points) == 0:
        raise VolumeError("no points inside the bounds")
    idx = np.floor((points - bounds.lo) / cell).astype(np.int64)
    idx = np.clip(idx, 0, resolution - 1)
    flat = (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]
    uniq, inverse, counts = np.unique(flat, return_inverse=True,
                                      return_counts=True)
    feats = features[np.flatnonzero(inside)] if n_rejected else features
    summed = ad.scatter_add(feats, inverse, len(uniq))
    avg = summed / Tensor(counts[:, None].astype(np.float64))
    coords = np.stack([uniq // (resolution * resolution),
                       (uniq // resolution) % resolution,
                       uniq % resolution], axis=1)
    return SparseFeatureSet(resolution, coords, uniq, avg, n_rejected)


_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)),
                    dtype=np.int64)  # 27 offsets, (0,0,0) at index 13


class SparseConv3d:
    """3^3 sparse convolution: out[p] = sum_o W_o @ in[p + o].

    An output cell is active iff its 3^3 receptive field touches an active
    input cell; inactive cells are exactly zero.
    """

    def __init__(self, store, name, cin, cout, rng=None, identity_init=False):
        self.cin = cin
        self.cout = cout
        if name + "/w" in store:
            self.w = store[name + "/w"]
            self.b = store[name + "/b"]
            return
        if identity_init:
            w = np.zeros((27, cin, cout))
            w[13, :, :] = np.eye(cin, cout)
        else:
            w = rng.normal(0, np.sqrt(2.0 / (27 * cin)), size=(27, cin, cout))
        self.w = store.add(name + "/w", w.reshape(27 * cin, cout))
        self.b = store.add(name + "/b", np.zeros(cout))

    def _neighbor_table(self, sparse):
        """Active-set dilation and neighbor row lookup for one input layout.

        The layout depends only on the input's active cells, which stay fixed
        across training iterations, so the last table is cached.
        """
        res = sparse.resolution
        key = (res, sparse.flat.tobytes())
        cached = getattr(self, "_table_cache", None)
        if cached is not None and cached[0] == key:
            return cached[1]
        # dilate the active set by one voxel in every direction
        dil = (sparse.coords[:, None, :] + _OFFSETS[None]).reshape(-1, 3)
        keep = np.all((dil >= 0) & (dil < res), axis=1)
        dil = dil[keep]
        flat_out = np.unique((dil[:, 0] * res + dil[:, 1]) * res + dil[:, 2])
        coords_out = np.stack([flat_out // (res * res),
                               (flat_out // res) % res,
                               flat_out % res], axis=1)
        # neighbor row lookup into the sorted input ids (miss -> zero row)
        nb = coords_out[:, None, :] + _OFFSETS[None]       # (Mo,27,3)
        in_range = np.all((nb >= 0) & (nb < res), axis=2)
        nb_flat = (nb[..., 0] * res + nb[..., 1]) * res + nb[..., 2]
        pos = np.searchsorted(sparse.flat, nb_flat)
        pos = np.clip(pos, 0, len(sparse.flat) - 1)
        found = (sparse.flat[pos] == nb_flat) & in_range
        zero_row = len(sparse.flat)
        rows = np.where(found, pos, zero_row)
        table = (flat_out, coords_out, rows)
        self._table_cache = (key, table)
        return table

    def __call__(self, sparse):
        res = sparse.resolution
        flat_out, coords_out, rows = self._neighbor_table(sparse)
        feats = ad.concat([sparse.features,
                           Tensor(np.zeros((1, self.cin)))], axis=0)
        cols = ad.gather(feats, rows.ravel(), axis=0)
        cols = ad.reshape(cols, (len(flat_out), 27 * self.cin))
        out = ad.matmul(cols, self.w) + self.b
        return SparseFeatureSet(res, coords_out, flat_out, out,
                                sparse.n_rejected)


class DiffusionNet:
    """Stack of sparse convolutions diffusing sparse features outward."""

    def __init__(self, store, prefix, cin, hidden, cout, n_layers, rng):
        dims = [cin] + [hidden] * (n_layers - 1) + [cout]
        self.layers = [SparseConv3d(store, "%s/conv%d" % (prefix, i),
                                    dims[i], dims[i + 1], rng=rng)
                       for i in range(n_layers)]

    def __call__(self, sparse):
        out = sparse
        for i, layer in enumerate(self.layers):
            out = layer(out)
            if i + 1 < len(self.layers):
                out = SparseFeatureSet(out.resolution, out.coords, out.flat,
                                       ad.relu(out.features), out.n_rejected)
        return out


# ---------------------------------------------------------------------------
# Feature volumes and trilinear queries
# ---------------------------------------------------------------------------

@dataclass
class FeatureVolume:
    resolution: int
    bounds: object            # SceneBounds
    flat: np.ndarray          # (M,) sorted flat voxel ids of active cells
    features: object          # Tensor (M,C); inactive cells are zero

    @property
    def channels(self):
        return self.features.shape[1]

    @property
    def cell(self):
        return (self.bounds.hi - self.bounds.lo) / self.resolution

    @classmethod
    def from_sparse(cls, sparse, bounds):
        return cls(sparse.resolution, bounds, sparse.flat, sparse.features)

    def dense(self):
        """Dense (r,r,r,C) array of current values (detached), for dumps and
        oracle comparisons."""
        r = self.resolution
        out = np.zeros((r * r * r, self.channels))
        out[self.flat] = self.features.data
        return out.reshape(r, r, r, self.channels)


def diffuse(net, sparse, bounds):
    if len(sparse.coords) == 0:
        raise VolumeError("empty sparse feature set")
    return FeatureVolume.from_sparse(net(sparse), bounds)


def _corner_data(volume, x):
    """Shared setup for trilinear queries: corner rows, per-axis fractions."""
    r = volume.resolution
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    cell = volume.cell
    u = (x - volume.bounds.lo) / cell - 0.5   # cell-center grid coordinates
    k0 = np.floor(u).astype(np.int64)
    frac = u - k0
    rows = np.empty((len(x), 8), dtype=np.int64)
    zero_row = len(volume.flat)
    for ci, (dx, dy, dz) in enumerate(itertools.product((0, 1), repeat=3)):
        kk = k0 + np.array([dx, dy, dz])
        ok = np.all((kk >= 0) & (kk < r), axis=1)
        flat = (kk[:, 0] * r + kk[:, 1]) * r + kk[:, 2]
        pos = np.searchsorted(volume.flat, np.where(ok, flat, 0))
        pos = np.clip(pos, 0, max(len(volume.flat) - 1, 0))
        found = ok & (len(volume.flat) > 0) & (volume.flat[pos] == flat)
        rows[:, ci] = np.where(found, pos, zero_row)
    return rows, frac, cell


def _corner_weights(frac):
    """(P,8) trilinear weights and (P,3,8) derivatives w.r.t. grid coords."""
    p = len(frac)
    w = np.empty((p, 8))
    dw = np.empty((p, 3, 8))
    for ci, d in enumerate(itertools.product((0, 1), repeat=3)):
        facs = [frac[:, a] if d[a] else 1.0 - frac[:, a] for a in range(3)]
        w[:, ci] = facs[0] * facs[1] * facs[2]
        for a in range(3):
            sign = 1.0 if d[a] else -1.0
            others = [facs[b] for b in range(3) if b != a]
            dw[:, a, ci] = sign * others[0] * others[1]
    return w, dw


def _gather_corners(volume, rows):
    c = volume.channels
    feats = ad.concat([volume.features, Tensor(np.zeros((1, c)))], axis=0)
    corners = ad.gather(feats, rows.ravel(), axis=0)
    return ad.reshape(corners, (rows.shape[0], 8, c))


def trilinear(volume, x):
    """Trilinear feature interpolation at world points (out of bounds -> 0)."""
    rows, frac, _ = _corner_data(volume, x)
    w, _ = _corner_weights(frac)
    corners = _gather_corners(volume, rows)
    out = ad.matmul(Tensor(w[:, None, :]), corners)
    return ad.reshape(out, (rows.shape[0], volume.channels))


def trilinear_jvp(volume, x):
    """Feature plus its exact spatial derivative.

    Returns (f (P,C), df/dx (P,3,C)); both are graph tensors so training
    gradients flow through the derivative path as well.
    """
    rows, frac, cell = _corner_data(volume, x)
    w, dw = _corner_weights(frac)
    dw = dw / cell[None, :, None]
    corners = _gather_corners(volume, rows)
    f = ad.reshape(ad.matmul(Tensor(w[:, None, :]), corners),
                   (rows.shape[0], volume.channels))
    df = ad.matmul(Tensor(dw), corners)                    # (P,3,C)
    return f, df


def trilinear_np(volume, x):
    """Detached trilinear query (numpy fast path for importance sampling)."""
    rows, frac, _ = _corner_data(volume, x)
    w, _ = _corner_weights(frac)
    feats = np.concatenate([volume.features.data,
                            np.zeros((1, volume.channels))], axis=0)
    corners = feats[rows]                                  # (P,8,C)
    return np.einsum("pk,pkc->pc", w, corners)


def dump_volume(path, volume):
    """Flat binary debug dump: header (resolution, channels, bounds) then
    the dense float64 grid."""
    import struct
    dense = volume.dense()
    with open(path, "wb") as f:
        f.write(struct.pack("<II", volume.resolution, volume.channels))
        f.write(np.asarray(volume.bounds.lo, dtype="<f8").tobytes())
        f.write(np.asarray(volume.bounds.hi, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(dense, dtype="<f8").tobytes())
