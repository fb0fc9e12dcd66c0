"""Surface extraction and reconstruction/novel-view quality metrics.

Chamfer is the symmetric mean of (unsquared) L2 nearest-neighbor distances;
P2S is the mean exact point-to-triangle distance. Both have accelerated
implementations that must agree with brute force exactly, so the same
point-triangle kernel backs both paths.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure
from skimage.metrics import structural_similarity


class EvalError(Exception):
    pass


class EmptySurfaceError(EvalError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise EvalError("face index out of range")

    def face_areas(self):
        v = self.vertices
        f = self.faces
        return 0.5 * np.linalg.norm(
            np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)


@dataclass
class MetricReport:
    chamfer: float
    p2s: float
    psnr: float
    ssim: float
    unit: str = "m"
    per_view: list = None

    def rows(self):
        out = [("chamfer_%s" % self.unit, self.chamfer),
               ("p2s_%s" % self.unit, self.p2s),
               ("psnr_db", self.psnr), ("ssim", self.ssim)]
        for i, (p, s) in enumerate(self.per_view or []):
            out.append(("view%02d_psnr_db" % i, p))
            out.append(("view%02d_ssim" % i, s))
        return out


# ---------------------------------------------------------------------------
# Marching cubes
# ---------------------------------------------------------------------------

def sdf_grid(sdf_fn, bounds, resolution):
    """Evaluate an SDF callable on a resolution^3 grid spanning the bounds."""
    axes = [np.linspace(bounds.lo[i], bounds.hi[i], resolution)
            for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vals = np.asarray(sdf_fn(pts)).reshape(resolution, resolution, resolution)
    return vals, axes


def marching_cubes(sdf_fn, bounds, resolution):
    """Classic 256-case marching cubes at iso 0 with linear edge interpolation.

    Output winding is fixed so face normals point toward positive SDF.
    """
    if resolution < 8:
        raise EvalError("resolution must be >= 8")
    vals, axes = sdf_grid(sdf_fn, bounds, resolution)
    if vals.min() > 0 or vals.max() < 0:
        raise EmptySurfaceError("field has no zero crossing inside bounds")
    spacing = tuple((bounds.hi[i] - bounds.lo[i]) / (resolution - 1)
                    for i in range(3))
    verts, faces, _, _ = measure.marching_cubes(
        vals, level=0.0, spacing=spacing, method="lorensen")
    verts = verts + bounds.lo
    mesh = TriangleMesh(verts, faces)
    mesh = _drop_degenerate(mesh)
    return _orient_outward(mesh, sdf_fn)


def _drop_degenerate(mesh):
    keep = mesh.face_areas() > 0.0
    return TriangleMesh(mesh.vertices, mesh.faces[keep])


def _orient_outward(mesh, sdf_fn):
    v, f = mesh.vertices, mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    centroids = v[f].mean(axis=1)
    eps = 1e-5
    nn = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-30)
    outside = np.asarray(sdf_fn(centroids + eps * nn))
    inside = np.asarray(sdf_fn(centroids - eps * nn))
    if np.sum(outside > inside) < 0.5 * len(f):
        f = f[:, ::-1]
    return TriangleMesh(v, f)


def edge_counts(mesh):
    """Map from undirected edge to incident-face count."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return uniq, counts


def is_watertight(mesh):
    _, counts = edge_counts(mesh)
    return bool(np.all(counts == 2))


def sample_surface(mesh, n, seed=0):
    """Uniform area-weighted point sampling on a triangle mesh."""
    if len(mesh.faces) == 0:
        raise EvalError("empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    probs = areas / areas.sum()
    fi = rng.choice(len(mesh.faces), size=n, p=probs)
    tri = mesh.vertices[mesh.faces[fi]]
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) \
        + v[:, None] * (tri[:, 2] - tri[:, 0])


# ---------------------------------------------------------------------------
# Point-set and point-to-surface distances
# ---------------------------------------------------------------------------

def chamfer(a, b, accelerated=True):
    """Symmetric mean L2 nearest-neighbor distance between two point sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EvalError("empty point set")
    if accelerated:
        da = cKDTree(b).query(a)[0]
        db = cKDTree(a).query(b)[0]
    else:
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        da = np.sqrt(d2.min(axis=1))
        db = np.sqrt(d2.min(axis=0))
    return 0.5 * float(da.mean()) + 0.5 * float(db.mean())


def _closest_point_distances(points, tris):
    """Exact pairwise point/triangle distance (Ericson closest-point test).

    points: (N,3); tris: (N,3,3) -> (N,) distances.
    """
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    p = points
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    closest = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def settle(mask, value):
        m = mask & ~done
        closest[m] = value[m] if value.ndim == 2 else value
        done[m] = True

    settle((d1 <= 0) & (d2 <= 0), a)                      # vertex a
    settle((d3 >= 0) & (d4 <= d3), b)                     # vertex b
    settle((d6 >= 0) & (d5 <= d6), c)                     # vertex c

    vc = d1 * d4 - d3 * d2
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
    settle(m, a + t[:, None] * ab)                         # edge ab

    vb = d5 * d2 - d1 * d6
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
    settle(m, a + t[:, None] * ac)                         # edge ac

    va = d3 * d6 - d5 * d4
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    denom = (d4 - d3) + (d5 - d6)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(denom != 0, (d4 - d3) / denom, 0.0)
    settle(m, b + t[:, None] * (c - b))                    # edge bc

    denom = va + vb + vc
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
    settle(np.ones(len(p), dtype=bool),
           a + v[:, None] * ab + w[:, None] * ac)          # interior

    return np.linalg.norm(p - closest, axis=1)


def point_mesh_distances(points, mesh, accelerated=True):
    """Per-point exact distance to the nearest triangle of the mesh."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(mesh.faces) == 0:
        raise EvalError("empty mesh")
    tris = mesh.vertices[mesh.faces]
    if not accelerated:
        best = np.full(len(points), np.inf)
        for t in tris:
            d = _closest_point_distances(points,
                                         np.broadcast_to(t, (len(points), 3, 3)))
            best = np.minimum(best, d)
        return best
    # upper bound from nearest triangle vertex, then exact test on all
    # triangles whose centroid could still beat it
    vtree = cKDTree(mesh.vertices)
    upper = vtree.query(points)[0]
    centroids = tris.mean(axis=1)
    radii = np.linalg.norm(tris - centroids[:, None, :], axis=2).max()
    ctree = cKDTree(centroids)
    best = np.full(len(points), np.inf)
    groups = ctree.query_ball_point(points, upper + radii + 1e-12)
    for i, cand in enumerate(groups):
        cand = np.asarray(cand, dtype=np.int64)
        d = _closest_point_distances(
            np.broadcast_to(points[i], (len(cand), 3)).copy(), tris[cand])
        best[i] = d.min()
    return best


def p2s(points, mesh, accelerated=True):
    """Mean point-to-surface distance (exact point-triangle minimum)."""
    return float(point_mesh_distances(points, mesh, accelerated).mean())


# ---------------------------------------------------------------------------
# Image metrics
# ---------------------------------------------------------------------------

PSNR_INF = float("inf")


def psnr(a, b, peak=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalError("image shapes differ")
    if peak <= 0:
        raise EvalError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * np.log10(peak * peak / mse)


def ssim(a, b, peak=1.0):
    """Windowed SSIM (11x11 Gaussian, sigma 1.5) on mean-channel grayscale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalError("image shapes differ")
    if a.ndim == 3:
        a = a.mean(axis=2)
        b = b.mean(axis=2)
    if min(a.shape) < 11:
        raise EvalError("image smaller than the 11x11 SSIM window")
    return float(structural_similarity(
        a, b, data_range=peak, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False))


# ---------------------------------------------------------------------------
# ASCII PLY interchange
# ---------------------------------------------------------------------------

def save_ply(path, mesh):
    v, f = mesh.vertices, mesh.faces
    with open(path, "w") as fp:
        fp.write("ply\nformat ascii 1.0\n")
        fp.write("element vertex %d\n" % len(v))
        fp.write("property double x\nproperty double y\nproperty double z\n")
        fp.write("element face %d\n" % len(f))
        fp.write("property list uchar int vertex_indices\nend_header\n")
        for p in v:
            fp.write("%.17g %.17g %.17g\n" % tuple(p))
        for tri in f:
            fp.write("3 %d %d %d\n" % tuple(tri))


def load_ply(path):
    with open(path) as fp:
        n_v = n_f = 0
        for line in fp:
            line = line.strip()
            if line.startswith("element vertex"):
                n_v = int(line.split()[-1])
            elif line.startswith("element face"):
                n_f = int(line.split()[-1])
            elif line == "end_header":
                break
        verts = np.array([[float(x) for x in fp.readline().split()[:3]]
                          for _ in range(n_v)])
        faces = np.array([[int(x) for x in fp.readline().split()[1:4]]
                          for _ in range(n_f)], dtype=np.int64)
    return TriangleMesh(verts, faces)


def evaluate(render_fn, gt_images, pred_mesh, ref_mesh, n_surface=10_000,
             seed=0, peak=1.0):
    """Full metric battery against held-out views and a reference mesh.

    ``render_fn(view_index) -> HxWx3`` produces the predicted image for each
    ground-truth view.
    """
    pa = sample_surface(pred_mesh, n_surface, seed=seed)
    pb = sample_surface(ref_mesh, n_surface, seed=seed + 1)
    ch = chamfer(pa, pb)
    ps = p2s(pa, ref_mesh)
    per_view = []
    for i, gt in enumerate(gt_images):
        pred = render_fn(i)
        per_view.append((psnr(pred, gt, peak), ssim(pred, gt, peak)))
    finite = [p for p, _ in per_view if np.isfinite(p)]
    mean_psnr = float(np.mean(finite)) if finite else PSNR_INF
    mean_ssim = float(np.mean([s for _, s in per_view]))
    return MetricReport(ch, ps, mean_psnr, mean_ssim, per_view=per_view)
