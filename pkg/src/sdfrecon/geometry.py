"""Cameras, rays, the deformable template mesh, and anchor sampling.

Conventions (documented once, used everywhere):
  - camera space: +z forward, +x right, +y down; pixel = (K @ p) / p_z
  - camera extrinsics (R_j, T_j) map world -> camera as p_cam = R_j.T @ x + T_j
  - template pose (R, T) maps a canonical point a to world as R @ (a - T)
"""

from dataclasses import dataclass, field

import numpy as np


class GeometryError(Exception):
    pass


class BehindCameraError(GeometryError):
    pass


def _check_rotation(R, name):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise GeometryError("%s must be 3x3" % name)
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
        raise GeometryError("%s is not orthonormal" % name)
    if not np.isclose(np.linalg.det(R), 1.0, atol=1e-9):
        raise GeometryError("%s has determinant != +1" % name)
    return R


@dataclass
class Camera:
    K: np.ndarray          # 3x3 intrinsics, pixels
    R: np.ndarray          # 3x3; world -> camera uses R.T
    T: np.ndarray          # 3-vector, meters
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.R = _check_rotation(self.R, "camera R")
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        if not np.allclose(self.K, np.triu(self.K)):
            raise GeometryError("K must be upper-triangular")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise GeometryError("K focal entries must be positive")

    @property
    def center(self):
        """Camera center in world coordinates (point with p_cam = 0)."""
        return -self.R @ self.T

    def world_to_cam(self, x):
        return np.asarray(x) @ self.R + self.T


@dataclass
class TemplateModel:
    vertices: np.ndarray   # (V,3) canonical pose, meters
    faces: np.ndarray      # (F,3) int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    T: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.vertices) == 0:
            raise GeometryError("template has no vertices")
        if self.faces.size and (self.faces.min() < 0
                                or self.faces.max() >= len(self.vertices)):
            raise GeometryError("face index out of range")
        self.R = _check_rotation(self.R, "template R")
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)

    def to_world(self, points):
        """Apply the template pose to canonical-space points."""
        return (np.asarray(points) - self.T) @ self.R.T

    @property
    def world_vertices(self):
        return self.to_world(self.vertices)


@dataclass
class AnchorSet:
    positions: np.ndarray  # (A,3) canonical template space
    kinds: np.ndarray      # (A,) uint8: 0 = on-body, 1 = far-body

    ON_BODY = 0
    FAR_BODY = 1

    def __len__(self):
        return len(self.positions)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    hit: bool


@dataclass
class SceneBounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(self.lo < self.hi):
            raise GeometryError("bounds min must be < max per axis")

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.hi - self.lo))

    def contains(self, x):
        x = np.asarray(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    @classmethod
    def of_template(cls, template, margin=0.1):
        wv = template.world_vertices
        return cls(wv.min(axis=0) - margin, wv.max(axis=0) + margin)


def project(a, template_pose, camera, strict=True):
    """Project canonical-space points via the template pose into a camera.

    Returns (pixels (..,2), depth (..,)). With ``strict`` a non-positive depth
    raises; otherwise callers get the raw depths to mask themselves.
    """
    R, T = template_pose
    a = np.asarray(a, dtype=np.float64)
    world = (a - T) @ R.T
    cam = world @ camera.R + camera.T
    depth = cam[..., 2]
    if strict and np.any(depth <= 0):
        raise BehindCameraError("point behind camera (depth <= 0)")
    proj = cam @ camera.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = proj[..., :2] / proj[..., 2:3]
    return pix, depth


def generate_rays(camera, pixels, bounds):
    """Rays through pixel centers, clipped to the scene bounds (slab test)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    Kinv = np.linalg.inv(camera.K)
    ones = np.ones((len(pixels), 1))
    d_cam = np.concatenate([pixels, ones], axis=1) @ Kinv.T
    d_world = d_cam @ camera.R.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origin = camera.center
    t0, t1, hit = ray_box_intersect(origin, d_world, bounds)
    return [Ray(origin, d_world[i], float(t0[i]), float(t1[i]), bool(hit[i]))
            for i in range(len(pixels))]


def ray_box_intersect(origin, directions, bounds):
    """Vectorized slab-method ray/AABB intersection.

    Returns (t_near, t_far, hit) with t_near clamped to >= 0.
    """
    directions = np.asarray(directions).reshape(-1, 3)
    origin = np.broadcast_to(np.asarray(origin, dtype=np.float64),
                             directions.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        ta = (bounds.lo - origin) * inv
        tb = (bounds.hi - origin) * inv
    # parallel-axis rays: substitute +-inf according to inside/outside
    par = directions == 0.0
    if np.any(par):
        inside = (origin >= bounds.lo) & (origin <= bounds.hi)
        ta = np.where(par, np.where(inside, -np.inf, np.inf), ta)
        tb = np.where(par, np.where(inside, np.inf, -np.inf), tb)
    tmin = np.minimum(ta, tb).max(axis=1)
    tmax = np.maximum(ta, tb).min(axis=1)
    tmin = np.maximum(tmin, 0.0)
    hit = tmax > tmin
    return tmin, tmax, hit


def midpoint_subdivide(vertices, faces):
    """Split every triangle into 4 by edge midpoints (shared edges deduped)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size and faces.max() >= len(vertices):
        raise GeometryError("face index out of range")
    new_verts = list(vertices)
    midpoint = {}

    def mid(i, j):
        key = (min(i, j), max(i, j))
        if key not in midpoint:
            midpoint[key] = len(new_verts)
            new_verts.append(0.5 * (vertices[i] + vertices[j]))
        return midpoint[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    return np.array(new_verts), np.array(new_faces, dtype=np.int64)


def sample_anchors(template, far_radius=0.05, n_far=0, subdivision_level=1,
                   seed=0):
    """On-body anchors from subdivided template faces, far-body anchors on
    spheres of ``far_radius`` around the original vertices.

    Positions are in canonical template space (the pose is applied later by
    projection / voxelization). Deterministic for a fixed seed.
    """
    if far_radius <= 0:
        raise GeometryError("far_radius must be positive")
    v, f = template.vertices, template.faces
    areas = 0.5 * np.linalg.norm(
        np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
    if np.any(areas <= 0):
        raise GeometryError("degenerate zero-area face in template")
    for _ in range(subdivision_level):
        v, f = midpoint_subdivide(v, f)
    on_body = v

    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(template.vertices), size=n_far)
    dirs = rng.normal(size=(n_far, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    far_body = template.vertices[idx] + far_radius * dirs

    positions = np.concatenate([on_body, far_body], axis=0)
    kinds = np.concatenate([
        np.full(len(on_body), AnchorSet.ON_BODY, dtype=np.uint8),
        np.full(n_far, AnchorSet.FAR_BODY, dtype=np.uint8)])
    return AnchorSet(positions, kinds)


# ---------------------------------------------------------------------------
# Plain-text interchange formats
# ---------------------------------------------------------------------------

def save_obj(path, vertices, faces):
    with open(path, "w") as fp:
        for v in np.asarray(vertices):
            fp.write("v %.17g %.17g %.17g\n" % tuple(v))
        for f in np.asarray(faces):
            fp.write("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))


def load_obj(path):
    verts, faces = [], []
    with open(path) as fp:
        for line in fp:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts), np.array(faces, dtype=np.int64)


def save_pose(path, R, T):
    vals = list(np.asarray(R).ravel()) + list(np.asarray(T).ravel())
    with open(path, "w") as fp:
        fp.write(" ".join("%.17g" % x for x in vals) + "\n")


def load_pose(path):
    vals = np.loadtxt(path)
    return vals[:9].reshape(3, 3), vals[9:12]


def save_cameras(path, cameras):
    with open(path, "w") as fp:
        fp.write("%d\n" % len(cameras))
        for c in cameras:
            nums = ([c.width, c.height] + list(c.K.ravel())
                    + list(c.R.ravel()) + list(c.T.ravel()))
            fp.write(" ".join("%.17g" % x for x in nums) + "\n")


def load_cameras(path):
    cams = []
    with open(path) as fp:
        n = int(fp.readline())
        for _ in range(n):
            vals = [float(x) for x in fp.readline().split()]
            w, h = int(vals[0]), int(vals[1])
            K = np.array(vals[2:11]).reshape(3, 3)
            R = np.array(vals[11:20]).reshape(3, 3)
            T = np.array(vals[20:23])
            cams.append(Camera(K, R, T, w, h))
    return cams
