"""Analytic ground-truth scenes: exact SDFs, an oracle sphere-tracing
renderer, and the synthetic camera rig used for all training data.

The default "body" scene is a sphere head plus five capsules in a T-pose,
about 1.7 m tall, each part with its own albedo. The coarse template mesh
handed to the reconstruction pipeline is a low-resolution remesh of the same
skeleton, intentionally missing fine detail.
"""

from dataclasses import dataclass, field

import numpy as np

from . import evalsuite
from .geometry import Camera, SceneBounds, TemplateModel


class SynthError(Exception):
    pass


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    def distance(self, x):
        return np.linalg.norm(x - self.center, axis=-1) - self.radius


@dataclass
class Capsule:
    p0: np.ndarray
    p1: np.ndarray
    radius: float
    albedo: np.ndarray

    def distance(self, x):
        a = np.asarray(self.p0, dtype=np.float64)
        ba = np.asarray(self.p1, dtype=np.float64) - a
        pa = x - a
        h = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
        return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - self.radius


@dataclass
class AnalyticScene:
    primitives: list
    light_dir: np.ndarray = field(
        default_factory=lambda: np.array([0.3, 0.8, -0.5]))
    background: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)
        self.background = np.asarray(self.background, dtype=np.float64)
        for p in self.primitives:
            p.albedo = np.asarray(p.albedo, dtype=np.float64)
            if p.radius <= 0:
                raise SynthError("primitive radius must be positive")
            if np.any(p.albedo < 0) or np.any(p.albedo > 1):
                raise SynthError("albedo components must lie in [0,1]")

    def bounds(self, margin=0.1):
        los, his = [], []
        for p in self.primitives:
            if isinstance(p, Sphere):
                lo = np.asarray(p.center) - p.radius
                hi = np.asarray(p.center) + p.radius
            else:
                lo = np.minimum(p.p0, p.p1) - p.radius
                hi = np.maximum(p.p0, p.p1) + p.radius
            los.append(lo)
            his.append(hi)
        return SceneBounds(np.min(los, axis=0) - margin,
                           np.max(his, axis=0) + margin)


def scene_distance(scene, x):
    """Min over primitive SDFs: exact outside, a conservative bound in
    union overlaps."""
    x = np.asarray(x, dtype=np.float64)
    if not scene.primitives:
        return np.full(x.shape[:-1], np.inf)
    return np.min([p.distance(x) for p in scene.primitives], axis=0)


def _nearest_primitive(scene, x):
    return np.argmin([p.distance(x) for p in scene.primitives], axis=0)


def _numeric_normal(scene, x, eps=1e-5):
    n = np.zeros_like(x)
    for k in range(3):
        dx = np.zeros(3)
        dx[k] = eps
        n[:, k] = scene_distance(scene, x + dx) - scene_distance(scene, x - dx)
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-30)


def oracle_render(scene, camera, tol=1e-6, max_steps=512, t_max=20.0):
    """Sphere-trace every pixel; Lambertian shading with a 0.1 ambient term.

    Returns (rgb HxWx3, depth HxW, mask HxW). Deterministic.
    """
    h, w = camera.height, camera.width
    jj, ii = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)
    Kinv = np.linalg.inv(camera.K)
    d_cam = np.concatenate([pix, np.ones((len(pix), 1))], axis=1) @ Kinv.T
    dirs = d_cam @ camera.R.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = camera.center

    t = np.zeros(len(pix))
    alive = np.ones(len(pix), dtype=bool)
    hit = np.zeros(len(pix), dtype=bool)
    if scene.primitives:
        for _ in range(max_steps):
            if not alive.any():
                break
            p = origin[None] + t[alive, None] * dirs[alive]
            d = scene_distance(scene, p)
            conv = np.abs(d) < tol
            idx = np.flatnonzero(alive)
            hit[idx[conv]] = True
            t[alive] += d
            escaped = t[idx] > t_max
            alive[idx[conv | escaped]] = False

    rgb = np.tile(scene.background, (len(pix), 1))
    depth = np.full(len(pix), np.inf)
    if hit.any():
        ph = origin[None] + t[hit, None] * dirs[hit]
        n = _numeric_normal(scene, ph)
        which = _nearest_primitive(scene, ph)
        albedo = np.array([scene.primitives[k].albedo for k in which])
        lam = np.maximum(0.0, n @ scene.light_dir)[:, None]
        rgb[hit] = np.clip(albedo * lam + 0.1 * albedo, 0.0, 1.0)
        depth[hit] = t[hit]
    return (rgb.reshape(h, w, 3), depth.reshape(h, w),
            hit.reshape(h, w).astype(np.float64))


# ---------------------------------------------------------------------------
# Camera rig
# ---------------------------------------------------------------------------

@dataclass
class RigSpec:
    distance: float = 2.4
    yaw_start: float = -30.0     # elevation, degrees
    yaw_stop: float = 30.0
    yaw_step: float = 30.0
    roll_start: float = 0.0      # azimuth, degrees
    roll_stop: float = 360.0
    roll_step: float = 120.0
    width: int = 64
    height: int = 64
    # wide enough that a full body-scale subject (~1.65 m tall) fits in frame
    # with margin at the standard 2.4 m rig distance
    fov_deg: float = 42.0

    def __post_init__(self):
        for rng, step in (((self.yaw_start, self.yaw_stop), self.yaw_step),
                          ((self.roll_start, self.roll_stop), self.roll_step)):
            span = rng[1] - rng[0]
            if step <= 0 or abs(span / step - round(span / step)) > 1e-9:
                raise SynthError("angle step must evenly divide its range")

    def yaw_values(self):
        n = int(round((self.yaw_stop - self.yaw_start) / self.yaw_step)) + 1
        return self.yaw_start + self.yaw_step * np.arange(n)

    def roll_values(self):
        span = self.roll_stop - self.roll_start
        n = int(round(span / self.roll_step))
        if abs(span - 360.0) > 1e-9:
            n += 1  # 360-degree spans drop the duplicate endpoint
        return self.roll_start + self.roll_step * np.arange(n)


def paper_scale_rig(width=64, height=64):
    """135 cameras at 2.4 m: 9 elevations x 15 azimuths."""
    return RigSpec(distance=2.4, yaw_start=-30.0, yaw_stop=50.0, yaw_step=10.0,
                   roll_start=0.0, roll_stop=360.0, roll_step=24.0,
                   width=width, height=height)


def look_at_camera(position, target, spec):
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 1.0, 0.0])
    if abs(forward @ up) > 0.999:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(up, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=1)
    T = -R.T @ position
    f = 0.5 * spec.width / np.tan(np.radians(spec.fov_deg) / 2.0)
    K = np.array([[f, 0.0, (spec.width - 1) / 2.0],
                  [0.0, f, (spec.height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    return Camera(K, R, T, spec.width, spec.height)


def make_rig(spec, center=(0.0, 0.0, 0.0)):
    """Cameras on a sphere of the given distance, all aimed at the center."""
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for yaw in spec.yaw_values():
        for roll in spec.roll_values():
            ye, re_ = np.radians(yaw), np.radians(roll)
            u = np.array([np.cos(ye) * np.sin(re_), np.sin(ye),
                          np.cos(ye) * np.cos(re_)])
            cams.append(look_at_camera(center + spec.distance * u, center, spec))
    return cams


# ---------------------------------------------------------------------------
# Built-in scenes and their coarse templates
# ---------------------------------------------------------------------------

def sphere_scene(radius=0.5, albedo=(0.8, 0.35, 0.25)):
    return AnalyticScene([Sphere(np.zeros(3), radius, np.asarray(albedo))])


def capsule_body_scene():
    up = np.array([0.0, 1.0, 0.0])
    parts = [
        Sphere(0.62 * up, 0.14, np.array([0.85, 0.65, 0.5])),            # head
        Capsule(-0.05 * up, 0.45 * up, 0.16, np.array([0.25, 0.35, 0.8])),  # torso
        Capsule(np.array([0.2, 0.42, 0.0]), np.array([0.66, 0.42, 0.0]),
                0.055, np.array([0.3, 0.75, 0.35])),                     # arm R
        Capsule(np.array([-0.2, 0.42, 0.0]), np.array([-0.66, 0.42, 0.0]),
                0.055, np.array([0.75, 0.7, 0.25])),                     # arm L
        Capsule(np.array([0.1, -0.8, 0.0]), np.array([0.1, -0.08, 0.0]),
                0.075, np.array([0.55, 0.3, 0.6])),                      # leg R
        Capsule(np.array([-0.1, -0.8, 0.0]), np.array([-0.1, -0.08, 0.0]),
                0.075, np.array([0.3, 0.6, 0.7])),                       # leg L
    ]
    return AnalyticScene(parts)


def icosphere(radius=1.0, levels=2):
    from .geometry import midpoint_subdivide
    p = (1 + np.sqrt(5)) / 2
    v = np.array([[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
                  [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
                  [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    for _ in range(levels):
        v, f = midpoint_subdivide(v, f)
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * radius
    return v, f


def coarse_template(scene, resolution=24, shrink=0.02):
    """Low-resolution remesh of the scene used as the body prior: coarse on
    purpose (the unclothed-template analog), eroded slightly inward."""
    bounds = scene.bounds(margin=0.05)
    mesh = evalsuite.marching_cubes(
        lambda x: scene_distance(scene, x) + shrink, bounds, resolution)
    return TemplateModel(mesh.vertices, mesh.faces)


def sphere_template(radius=0.5):
    v, f = icosphere(radius=radius * 0.92, levels=2)
    return TemplateModel(v, f)


def export_reference(scene, resolution=128, n_points=10_000, seed=0):
    """Reference surface mesh (marching cubes on the analytic SDF) plus an
    area-weighted surface point cloud."""
    if resolution < 16:
        raise SynthError("reference resolution must be >= 16")
    bounds = scene.bounds(margin=0.05)
    mesh = evalsuite.marching_cubes(lambda x: scene_distance(scene, x),
                                    bounds, resolution)
    points = evalsuite.sample_surface(mesh, n_points, seed=seed)
    return mesh, points
