"""Command-line surface: scene generation, training, rendering, surface
extraction, evaluation, and the finite-difference gradient audit.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 IO error.
"""

import argparse
import csv
import os
import sys

import numpy as np

from . import capture as cap
from . import config as cfgmod
from . import evalsuite
from . import geometry
from . import renderer as rnd
from . import synth
from . import training
from .autodiff import (ParameterStore, Tensor, load_checkpoint,
                       save_checkpoint, check_gradients)


EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _load_run_config(args):
    if getattr(args, "config", None):
        cfg = cfgmod.load_config(args.config)
    else:
        cfg = cfgmod.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.seed = args.seed
    if getattr(args, "iters", None) is not None:
        cfg.train.iterations = args.iters
    if getattr(args, "no_coarse", False):
        cfg.model.use_coarse = False
    return cfg


def _build_scene(cfg):
    if cfg.scene.kind == "sphere":
        scene = synth.sphere_scene(radius=cfg.scene.sphere_radius)
        template = synth.sphere_template(radius=cfg.scene.sphere_radius)
    else:
        scene = synth.capsule_body_scene()
        template = synth.coarse_template(
            scene, resolution=cfg.scene.template_resolution)
    return scene, template


def _rig_cameras(cfg):
    r = cfg.rig
    if r.paper_scale:
        return synth.make_rig(synth.paper_scale_rig(width=r.width,
                                                    height=r.height))
    spec = synth.RigSpec(distance=r.distance, yaw_start=r.yaw_start,
                         yaw_stop=r.yaw_stop, yaw_step=r.yaw_step,
                         roll_start=r.roll_start, roll_stop=r.roll_stop,
                         roll_step=r.roll_step, width=r.width,
                         height=r.height, fov_deg=r.fov_deg)
    return synth.make_rig(spec)


_VIEW_AZIMUTHS = {"front": 0.0, "left": 90.0, "back": 180.0, "right": 270.0}


def _camera_azimuth(camera):
    c = camera.center
    return float(np.degrees(np.arctan2(c[0], c[2]))) % 360.0


def select_views(capture, names):
    """Indices of the rig cameras nearest the named azimuths."""
    azimuths = np.array([_camera_azimuth(c) for c in capture.cameras])
    picked = []
    for name in names:
        if name not in _VIEW_AZIMUTHS:
            raise CliError("unknown view name %r (use %s)" %
                           (name, "/".join(sorted(_VIEW_AZIMUTHS))),
                           EXIT_CONFIG)
        target = _VIEW_AZIMUTHS[name]
        diff = np.abs((azimuths - target + 180.0) % 360.0 - 180.0)
        order = np.argsort(diff, kind="stable")
        idx = next(i for i in order if i not in picked)
        picked.append(int(idx))
    return picked


def subset_capture(capture, indices):
    return cap.MultiViewCapture([capture.cameras[i] for i in indices],
                                capture.images[indices],
                                capture.masks[indices], capture.template,
                                capture.reference)


def _restore_model(checkpoint_path, run_cfg, capture):
    store, meta = load_checkpoint(checkpoint_path)
    model = rnd.ReconstructionModel(store, run_cfg.model, seed=run_cfg.seed)
    model.prepare(capture)
    return model, meta


def _model_sdf_fn(model, capture):
    vols, _ = model.build_volumes(capture)
    dvols = vols.detached()
    return lambda pts: model.sdf_np(dvols, pts)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_scene(args):
    cfg = _load_run_config(args)
    if getattr(args, "paper_scale", False):
        cfg.rig.paper_scale = True
    scene, template = _build_scene(cfg)
    cameras = _rig_cameras(cfg)
    images = []
    masks = []
    for cam in cameras:
        rgb, _, mask = synth.oracle_render(scene, cam)
        images.append(rgb)
        masks.append(mask.astype(np.float64))
    reference, _ = synth.export_reference(
        scene, resolution=cfg.scene.reference_resolution,
        n_points=cfg.scene.reference_points)
    capture = cap.MultiViewCapture(cameras, np.stack(images), np.stack(masks),
                                   template, reference)
    os.makedirs(args.out, exist_ok=True)
    cap.save_capture(args.out, capture)
    cfgmod.save_resolved(os.path.join(args.out, "config.resolved"), cfg)
    print("wrote %d views to %s" % (len(cameras), args.out))
    return 0


def cmd_train(args):
    cfg = _load_run_config(args)
    captures = [cap.load_capture(p) for p in args.capture]
    if args.views:
        names = args.views.split(",")
        captures = [subset_capture(c, select_views(c, names))
                    for c in captures]
    os.makedirs(args.out, exist_ok=True)
    checkpoint_path = os.path.join(args.out, "checkpoint.bin")
    trace_path = os.path.join(args.out, "trace.csv")
    start = 0
    if args.finetune:
        model, meta = _restore_model(args.finetune, cfg, captures[0])
        if args.resume:
            start = int(meta.get("iteration", 0))
    else:
        model = rnd.ReconstructionModel(ParameterStore(), cfg.model,
                                        seed=cfg.seed)
        model.prepare(captures[0])
    cfgmod.save_resolved(os.path.join(args.out, "config.resolved"), cfg)
    training.train(model, captures, cfg.sampling, cfg.train, cfg.loss,
                   trace_path=trace_path, checkpoint_path=checkpoint_path,
                   start_iteration=start,
                   log=(lambda m: print(m, flush=True)) if args.verbose
                   else None)
    print("checkpoint: %s" % checkpoint_path)
    return 0


def cmd_render(args):
    cfg = _load_run_config(args)
    capture = cap.load_capture(args.capture)
    model, _ = _restore_model(args.checkpoint, cfg, capture)
    vols, fmaps = model.build_volumes(capture)
    views = ([int(v) for v in args.view.split(",")] if args.view
             else range(capture.n_views))
    os.makedirs(args.out, exist_ok=True)
    for vi in views:
        img = rnd.render_image(model, capture, vols, fmaps,
                               capture.cameras[vi], cfg.sampling,
                               rng=np.random.default_rng(cfg.seed))
        path = os.path.join(args.out, "view_%03d.png" % vi)
        cap.save_image(path, img)
        print("view %d psnr %.3f dB -> %s" %
              (vi, evalsuite.psnr(capture.images[vi], img), path))
    return 0


def cmd_extract(args):
    cfg = _load_run_config(args)
    capture = cap.load_capture(args.capture)
    model, _ = _restore_model(args.checkpoint, cfg, capture)
    sdf_fn = _model_sdf_fn(model, capture)
    mesh = evalsuite.marching_cubes(sdf_fn, model.bounds,
                                    args.resolution or
                                    cfg.eval.mesh_resolution)
    evalsuite.save_ply(args.out, mesh)
    print("wrote %d vertices / %d faces to %s" %
          (len(mesh.vertices), len(mesh.faces), args.out))
    return 0


def cmd_eval(args):
    cfg = _load_run_config(args)
    capture = cap.load_capture(args.capture)
    if capture.reference is None:
        raise CliError("capture has no reference mesh", EXIT_IO)
    model, _ = _restore_model(args.checkpoint, cfg, capture)
    vols, fmaps = model.build_volumes(capture)
    dvols = vols.detached()
    mesh = evalsuite.marching_cubes(lambda p: model.sdf_np(dvols, p),
                                    model.bounds, cfg.eval.mesh_resolution)

    def render_fn(i):
        return rnd.render_image(model, capture, vols, fmaps,
                                capture.cameras[i], cfg.sampling,
                                rng=np.random.default_rng(cfg.seed))

    report = evalsuite.evaluate(render_fn, capture.images, mesh,
                                capture.reference,
                                n_surface=cfg.eval.n_surface_samples)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        for name, value in report.rows():
            w.writerow([name, "%.6g" % value])
    for name, value in report.rows():
        print("%s\t%.6g" % (name, value))
    return 0


def cmd_gradcheck(args):
    results = gradient_audit(seed=args.seed or 0)
    worst = 0.0
    for name, err in results:
        print("%-24s %.3e" % (name, err))
        worst = max(worst, err)
    if worst >= 1e-3:
        print("FAIL: max relative error %.3e >= 1e-3" % worst)
        return EXIT_NUMERIC
    print("OK: max relative error %.3e" % worst)
    return 0


def gradient_audit(seed=0):
    """Finite-difference audit across the differentiable stages.

    Returns a list of (stage, max relative error) pairs at step 1e-4.
    """
    import sdfrecon.autodiff as ad
    from . import fields as F
    from . import volumes as V

    rng = np.random.default_rng(seed)
    out = []

    store = ParameterStore()
    enc = V.ImageEncoder(store, V.EncoderConfig(channels=2, width=3), rng)
    probe = Tensor(rng.normal(size=(1, 2, 2, 2)))
    out.append(("image-encoder", check_gradients(
        lambda im: ad.tsum(enc(ad.reshape(im, (1, 8, 8, 3))) * probe),
        rng.normal(size=(1, 8, 8, 3)).ravel() * 0.5)))

    emb = V.VertexEmbedder(ParameterStore(), rng, code_dim=4, hidden=6)
    verts = rng.normal(size=(5, 3))

    def embed_probe(w):
        h = ad.relu(ad.matmul(Tensor(verts), ad.reshape(w, (3, 6))) + emb.b1)
        return ad.tsum(ad.matmul(h, emb.w2) + emb.b2)

    out.append(("vertex-embedder", check_gradients(embed_probe,
                                                   emb.w1.data.ravel())))

    sp_coords = np.array([[2, 2, 2], [2, 3, 2], [4, 4, 4]])
    sp_flat = (sp_coords[:, 0] * 6 + sp_coords[:, 1]) * 6 + sp_coords[:, 2]
    conv = V.SparseConv3d(ParameterStore(), "c", 2, 2, rng=rng)

    def sparse_probe(feats):
        s = V.SparseFeatureSet(6, sp_coords, np.sort(sp_flat),
                               ad.reshape(feats, (3, 2)))
        o = conv(s)
        return ad.tsum(o.features * o.features)

    out.append(("sparse-diffusion", check_gradients(
        sparse_probe, rng.normal(size=(3, 2)).ravel())))

    bounds = geometry.SceneBounds(np.full(3, -1.0), np.full(3, 1.0))
    tri_pts = rng.uniform(-0.5, 0.5, size=(6, 3))

    def tri_probe(feats):
        vol = V.FeatureVolume(3, bounds, np.arange(27),
                              ad.reshape(feats, (27, 2)))
        f, df = V.trilinear_jvp(vol, tri_pts)
        return ad.tsum(f * f) + 0.1 * ad.tsum(df * df)

    out.append(("trilinear", check_gradients(
        tri_probe, rng.normal(size=(27, 2)).ravel())))

    fc = F.FieldConfig(pe_x=2, pe_d=1, sdf_hidden=16, sdf_layers=2,
                       surface_feature_dim=4, decoder_hidden=8,
                       decoder_layers=2, fusion_width=8, fusion_heads=2,
                       fusion_ffn=8)
    sdf_store = ParameterStore()
    sdf = F.SDFNetwork(sdf_store, fc, (2, 2), np.zeros(3), 0.5, rng)
    sdf_pts = rng.uniform(-0.5, 0.5, size=(4, 3))

    def sdf_probe(w):
        sdf.weights[1] = ad.reshape(w, sdf.weights[1].shape)
        s, fs, g = sdf.forward_with_gradient(
            sdf_pts, Tensor(rng_f.copy()), Tensor(rng_g.copy()),
            Tensor(np.zeros((4, 3, 2))), Tensor(np.zeros((4, 3, 2))))
        # the sharp softplus gate makes the gradient path stiff; keep the
        # probe in a regime where central differences stay second order
        return ad.tsum(s * s) + 0.01 * ad.tsum(g * g)

    rng_f = rng.normal(size=(4, 2)) * 0.1
    rng_g = rng.normal(size=(4, 2)) * 0.1
    w1_init = sdf_store["sdf/w1"].data.copy()
    out.append(("sdf-network", check_gradients(sdf_probe, w1_init.ravel())))

    fusion = F.ViewFusion(ParameterStore(), fc, 5, rng)
    out.append(("attention-fusion", check_gradients(
        lambda t: ad.tsum(fusion(ad.reshape(t, (3, 3, 5))) ** 2),
        rng.normal(size=(3, 3, 5)).ravel())))

    dec = F.RadianceDecoder(ParameterStore(), fc, rng)
    dec_g = rng.normal(size=(2, 3))
    dec_x = rng.uniform(-1, 1, size=(2, 3))
    dec_fused = rng.normal(size=(2, fc.fusion_width))
    out.append(("radiance-decoder", check_gradients(
        lambda fs: ad.tsum(dec(ad.reshape(fs, (2, fc.surface_feature_dim)),
                               Tensor(dec_g), dec_x, dec_x,
                               Tensor(dec_fused))),
        rng.normal(size=(2, fc.surface_feature_dim)).ravel())))

    def render_probe(s):
        a = rnd.alpha_from_sdf(ad.reshape(s, (2, 6)), 2.0)
        rgb, _, _ = rnd.composite(a, Tensor(colors), (0.3, 0.3, 0.3))
        return ad.tsum(rgb * rgb)

    colors = rng.uniform(size=(2, 5, 3))
    s0 = np.sort(rng.normal(size=(2, 6)), axis=1)[:, ::-1].copy()
    out.append(("alpha-composite", check_gradients(render_probe,
                                                   s0.ravel())))

    gt = rng.uniform(size=(5, 3))

    def loss_probe(x):
        pred = ad.sigmoid(ad.reshape(x, (5, 3)))
        l_r = training.rendering_loss(pred, gt)
        l_e = training.eikonal_loss(ad.reshape(x, (5, 3)) * 2.0)
        return training.total_loss(l_r, l_e, training.LossConfig())

    out.append(("losses", check_gradients(loss_probe,
                                          rng.normal(size=(5, 3)).ravel())))
    return out


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="sdfrecon",
        description="Sparse-view SDF reconstruction pipeline")
    p.add_argument("--threads", type=int, default=1,
                   help="compute threads (1 = bit-reproducible mode)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="synthesize a capture directory")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--paper-scale", action="store_true")
    g.set_defaults(fn=cmd_gen_scene)

    t = sub.add_parser("train", help="optimize a model on captures")
    t.add_argument("--config")
    t.add_argument("--capture", action="append", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--views", help="comma list: left,front,right,back")
    t.add_argument("--finetune", help="checkpoint to continue from")
    t.add_argument("--resume", action="store_true",
                   help="with --finetune: continue at the saved iteration")
    t.add_argument("--no-coarse", action="store_true",
                   help="ablation: disable the coarse volume prior")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render views from a checkpoint")
    r.add_argument("--config")
    r.add_argument("--capture", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--view", help="comma list of view indices")
    r.add_argument("--no-coarse", action="store_true")
    r.set_defaults(fn=cmd_render)

    x = sub.add_parser("extract", help="marching-cubes surface to PLY")
    x.add_argument("--config")
    x.add_argument("--capture", required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--resolution", type=int)
    x.add_argument("--no-coarse", action="store_true")
    x.set_defaults(fn=cmd_extract)

    e = sub.add_parser("eval", help="metric battery to CSV")
    e.add_argument("--config")
    e.add_argument("--capture", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--no-coarse", action="store_true")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    a.add_argument("--seed", type=int)
    a.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return exc.code
    except cfgmod.ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except (training.TrainingError, evalsuite.EvalError) as exc:
        print("numeric failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print("io error: %s" % exc, file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
