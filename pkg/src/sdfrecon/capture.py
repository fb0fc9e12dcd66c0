"""Capture directory format shared by the scene generator and the trainer.

    capture/
      images/view_###.png   8-bit RGB, linear values clamped to [0,1]
      masks/view_###.png    8-bit grayscale, 255 = foreground
      cameras.txt           per-camera K, R, T, width, height
      template.obj          coarse template mesh (OBJ v/f subset)
      pose.txt              template pose: R row-major (9) + T (3)
      reference.ply         watertight reference mesh (ASCII PLY)
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import evalsuite, geometry


@dataclass
class MultiViewCapture:
    cameras: list
    images: np.ndarray      # (N,H,W,3) float in [0,1]
    masks: np.ndarray       # (N,H,W) float {0,1}
    template: geometry.TemplateModel
    reference: evalsuite.TriangleMesh = None

    @property
    def n_views(self):
        return len(self.cameras)


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(img):
    return np.asarray(img, dtype=np.float64) / 255.0


def save_image(path, img):
    arr = to_uint8(img)
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def load_image(path):
    return from_uint8(np.asarray(Image.open(path)))


def save_capture(root, capture):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    geometry.save_cameras(os.path.join(root, "cameras.txt"), capture.cameras)
    for i in range(capture.n_views):
        save_image(os.path.join(root, "images", "view_%03d.png" % i),
                   capture.images[i])
        save_image(os.path.join(root, "masks", "view_%03d.png" % i),
                   capture.masks[i])
    geometry.save_obj(os.path.join(root, "template.obj"),
                      capture.template.vertices, capture.template.faces)
    geometry.save_pose(os.path.join(root, "pose.txt"),
                       capture.template.R, capture.template.T)
    if capture.reference is not None:
        evalsuite.save_ply(os.path.join(root, "reference.ply"),
                           capture.reference)


def load_capture(root):
    cameras = geometry.load_cameras(os.path.join(root, "cameras.txt"))
    images = np.stack([
        load_image(os.path.join(root, "images", "view_%03d.png" % i))
        for i in range(len(cameras))])
    masks = np.stack([
        load_image(os.path.join(root, "masks", "view_%03d.png" % i))
        for i in range(len(cameras))])
    v, f = geometry.load_obj(os.path.join(root, "template.obj"))
    R, T = geometry.load_pose(os.path.join(root, "pose.txt"))
    template = geometry.TemplateModel(v, f, R, T)
    ref_path = os.path.join(root, "reference.ply")
    reference = evalsuite.load_ply(ref_path) if os.path.exists(ref_path) else None
    return MultiViewCapture(cameras, images, masks, template, reference)
