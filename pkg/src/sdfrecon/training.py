"""Losses, ray batching, and the optimization loop.

The loop is bit-reproducible: every iteration derives its own RNG from
(seed, iteration), so resuming from a checkpoint at iteration k replays the
exact uninterrupted trajectory.
"""

import csv
import os
from dataclasses import dataclass, field as dfield

import numpy as np

from . import autodiff as ad
from . import evalsuite
from . import renderer as Rnd
from .autodiff import Adam, Tensor, backward, save_checkpoint


class TrainingError(Exception):
    pass


@dataclass
class LossConfig:
    lambda_r: float = 10.0
    lambda_e: float = 1.0

    def __post_init__(self):
        if self.lambda_r < 0 or self.lambda_e < 0:
            raise TrainingError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    iterations: int = 1000
    n_views: int = 2            # views per batch
    m_pixels: int = 32          # pixels per view
    seed: int = 0
    val_every: int = 0          # 0 disables validation renders
    freeze_volumes_every: int = 0   # K>0: volumes carry gradient every K-th
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.n_views < 1 or self.m_pixels < 1:
            raise TrainingError("need at least one view and one pixel")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def rendering_loss(predicted, target):
    """Channel-summed L1, averaged over the rays of the batch."""
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(target) == 0:
        raise TrainingError("empty ray batch")
    diff = ad.tabs(predicted - target)
    return ad.tmean(ad.tsum(diff, axis=1))


def eikonal_loss(gradients):
    """Mean squared deviation of the SDF gradient norm from one."""
    if gradients.shape[0] == 0:
        raise TrainingError("no gradient samples")
    norms = ad.l2norm(gradients, axis=1)
    dev = norms - 1.0
    return ad.tmean(dev * dev)


def total_loss(l_render, l_eikonal, config):
    return l_render * config.lambda_r + l_eikonal * config.lambda_e


# ---------------------------------------------------------------------------
# Ray batching
# ---------------------------------------------------------------------------

def sample_ray_batch(capture, n, m, rng):
    """Pick n distinct views and m pixels per view, half of them biased to
    the mask interior (half rounded down). Returns (view indices (n,),
    pixels (n,m,2) float pixel centers, colors (n,m,3))."""
    if n > capture.n_views:
        raise TrainingError("batch asks for more views than captured")
    views = rng.choice(capture.n_views, size=n, replace=False)
    h, w = capture.images.shape[1:3]
    pixels = np.empty((n, m, 2))
    colors = np.empty((n, m, 3))
    n_mask = m // 2
    for i, vi in enumerate(views):
        interior = np.flatnonzero(capture.masks[vi].ravel() > 0.5)
        if len(interior) and n_mask:
            picked = rng.choice(interior, size=n_mask)
        else:
            picked = rng.integers(0, h * w, size=n_mask)
        rest = rng.integers(0, h * w, size=m - n_mask)
        flat = np.concatenate([picked, rest])
        pixels[i, :, 0] = flat % w
        pixels[i, :, 1] = flat // w
        colors[i] = capture.images[vi].reshape(-1, 3)[flat]
    return views, pixels, colors


def _batch_rays(capture, views, pixels):
    origins = []
    dirs = []
    for i, vi in enumerate(views):
        cam = capture.cameras[int(vi)]
        kinv = np.linalg.inv(cam.K)
        p = np.concatenate([pixels[i], np.ones((pixels.shape[1], 1))], axis=1)
        d = (p @ kinv.T) @ cam.R.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        dirs.append(d)
        origins.append(np.broadcast_to(cam.center, d.shape))
    return np.concatenate(origins), np.concatenate(dirs)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _iteration_rng(seed, iteration):
    return np.random.default_rng([seed, iteration])


def _diagnostic_dump(path, store, extras):
    save_checkpoint(path, store, meta=extras)


def train_step(model, capture, sampling, train_cfg, loss_cfg, optimizer,
               iteration, detach_volumes=False):
    """One optimization step. Returns a dict of scalars for the trace."""
    rng = _iteration_rng(train_cfg.seed, iteration)
    views, pixels, colors = sample_ray_batch(capture, train_cfg.n_views,
                                             train_cfg.m_pixels, rng)
    origins, dirs = _batch_rays(capture, views, pixels)
    vols, fmaps = model.build_volumes(capture)
    if detach_volumes:
        vols = vols.detached()
        fmaps = [Tensor(fm.data) for fm in fmaps]
    rgb, aux = model.render_rays(capture, vols, fmaps, origins, dirs,
                                 sampling, rng)
    l_r = rendering_loss(rgb, colors.reshape(-1, 3))

    grads = [aux["gradients"]] if "gradients" in aux else []
    n_free = len(grads[0].data) if grads else train_cfg.m_pixels
    free_pts = rng.uniform(model.bounds.lo, model.bounds.hi,
                           size=(n_free, 3))
    grads.append(model.gradients_at(vols, free_pts))
    l_e = eikonal_loss(ad.concat(grads, axis=0))

    loss = total_loss(l_r, l_e, loss_cfg)
    if not np.isfinite(loss.data):
        raise TrainingError("non-finite loss at iteration %d" % iteration)
    model.store.zero_grad()
    backward(loss)
    optimizer.step()
    return {"iteration": iteration, "l_render": float(l_r.data),
            "l_eikonal": float(l_e.data), "total": float(loss.data),
            "k": model.sharpness.value}


def train(model, captures, sampling, train_cfg, loss_cfg=None, trace_path=None,
          checkpoint_path=None, start_iteration=0, log=None):
    """Optimize the model on one or more captures.

    Multiple captures share all weights (subject-agnostic training); each
    iteration draws one capture at random. Returns the trace (list of dicts).
    Training is deterministic given (seed, configs, captures).
    """
    if not isinstance(captures, (list, tuple)):
        captures = [captures]
    loss_cfg = loss_cfg or LossConfig()
    optimizer = Adam(model.store, lr=train_cfg.learning_rate)
    trace = []
    writer = None
    trace_file = None
    if trace_path:
        exists = os.path.exists(trace_path) and start_iteration > 0
        trace_file = open(trace_path, "a" if exists else "w", newline="")
        writer = csv.writer(trace_file)
        if not exists:
            writer.writerow(["iteration", "l_render", "l_eikonal", "total",
                             "k", "val_psnr"])
    try:
        for it in range(start_iteration, train_cfg.iterations):
            ci = 0
            if len(captures) > 1:
                ci = int(_iteration_rng(train_cfg.seed,
                                        it).integers(len(captures)))
            capture = captures[ci]
            if model.sdf is None or model.bounds is None:
                model.prepare(capture)
            detach = (train_cfg.freeze_volumes_every > 1
                      and it % train_cfg.freeze_volumes_every != 0)
            row = train_step(model, capture, sampling, train_cfg, loss_cfg,
                             optimizer, it, detach_volumes=detach)
            row["val_psnr"] = ""
            if train_cfg.val_every and (it + 1) % train_cfg.val_every == 0:
                row["val_psnr"] = validation_psnr(model, capture, sampling)
            trace.append(row)
            if writer:
                writer.writerow([row["iteration"], "%.17g" % row["l_render"],
                                 "%.17g" % row["l_eikonal"],
                                 "%.17g" % row["total"], "%.17g" % row["k"],
                                 row["val_psnr"]])
                trace_file.flush()
            if log and (it % max(1, train_cfg.iterations // 50) == 0):
                log("iter %d  L_r %.4f  L_e %.4f  total %.4f  k %.3f" %
                    (it, row["l_render"], row["l_eikonal"], row["total"],
                     row["k"]))
            if (checkpoint_path and train_cfg.checkpoint_every
                    and (it + 1) % train_cfg.checkpoint_every == 0):
                save_checkpoint(checkpoint_path, model.store,
                                meta=checkpoint_meta(train_cfg, it + 1,
                                                     model))
    except TrainingError:
        if checkpoint_path:
            _diagnostic_dump(checkpoint_path + ".diag", model.store,
                             {"failed": True})
        raise
    finally:
        if trace_file:
            trace_file.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model.store,
                        meta=checkpoint_meta(train_cfg,
                                             train_cfg.iterations, model))
    return trace


def checkpoint_meta(train_cfg, iteration, model):
    return {"iteration": iteration, "seed": train_cfg.seed,
            "learning_rate": train_cfg.learning_rate,
            "k": model.sharpness.value,
            "adam_step": model.store.adam_step}


def validation_psnr(model, capture, sampling, view=0):
    vols, fmaps = model.build_volumes(capture)
    img = Rnd.render_image(model, capture, vols, fmaps,
                           capture.cameras[view], sampling,
                           rng=np.random.default_rng(0))
    return evalsuite.psnr(capture.images[view], img)
