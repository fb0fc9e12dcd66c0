"""Configuration parsing and command-line pipeline tests."""

import os

import numpy as np
import pytest

from sdfrecon import cli, config as C
from sdfrecon import capture as cap
from sdfrecon import evalsuite


def test_default_config_round_trips(tmp_path):
    cfg = C.RunConfig()
    path = str(tmp_path / "c.yaml")
    C.save_resolved(path, cfg)
    again = C.load_config(path)
    assert C.to_dict(again) == C.to_dict(cfg)


def test_unknown_top_level_key_rejected():
    with pytest.raises(C.ConfigError, match="bogus"):
        C.from_dict({"bogus": 1})


def test_unknown_nested_key_rejected():
    with pytest.raises(C.ConfigError, match="train.*typo"):
        C.from_dict({"train": {"typo": 5}})


def test_invalid_scene_kind_rejected():
    with pytest.raises(C.ConfigError):
        C.from_dict({"scene": {"kind": "teapot"}})


def test_partial_config_keeps_defaults():
    cfg = C.from_dict({"train": {"iterations": 7},
                       "model": {"field": {"pe_x": 3}}})
    assert cfg.train.iterations == 7
    assert cfg.train.learning_rate == 1e-4
    assert cfg.model.field.pe_x == 3
    assert cfg.model.field.sdf_hidden == 128


MICRO_YAML = """
seed: 1
scene:
  kind: sphere
  reference_resolution: 16
  reference_points: 400
rig:
  width: 20
  height: 20
  yaw_start: 0.0
  yaw_stop: 0.0
  yaw_step: 10.0
  roll_step: 90.0
model:
  coarse_resolution: 10
  fine_resolution: 12
  coarse_channels: 4
  fine_channels: 4
  diffusion_hidden: 6
  diffusion_layers: 2
  vertex_code_dim: 4
  anchor_subdivision: 0
  encoder:
    channels: 4
    width: 4
  field:
    pe_x: 2
    pe_d: 1
    sdf_hidden: 24
    sdf_layers: 2
    surface_feature_dim: 8
    decoder_hidden: 16
    decoder_layers: 2
    fusion_width: 8
    fusion_heads: 2
    fusion_ffn: 16
sampling:
  n_uniform: 12
  n_importance: 4
  importance_rounds: 1
train:
  iterations: 2
  n_views: 2
  m_pixels: 8
  seed: 1
eval:
  mesh_resolution: 16
  n_surface_samples: 400
"""


@pytest.fixture(scope="module")
def micro(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = str(root / "micro.yaml")
    with open(cfg_path, "w") as f:
        f.write(MICRO_YAML)
    capdir = str(root / "capture")
    assert cli.main(["gen-scene", "--config", cfg_path,
                     "--out", capdir]) == 0
    return root, cfg_path, capdir


def test_gen_scene_writes_reloadable_capture(micro):
    _, _, capdir = micro
    loaded = cap.load_capture(capdir)
    assert loaded.n_views == 4
    assert loaded.images.shape == (4, 20, 20, 3)
    assert loaded.reference is not None
    assert os.path.exists(os.path.join(capdir, "config.resolved"))


def test_gen_scene_is_byte_identical_on_regeneration(micro, tmp_path):
    root, cfg_path, capdir = micro
    again = str(tmp_path / "capture2")
    assert cli.main(["gen-scene", "--config", cfg_path, "--out", again]) == 0
    for dirpath, _, files in os.walk(capdir):
        rel = os.path.relpath(dirpath, capdir)
        for name in files:
            a = os.path.join(dirpath, name)
            b = os.path.join(again, rel, name)
            assert open(a, "rb").read() == open(b, "rb").read(), name


def test_paper_scale_rig_has_135_cameras(micro, tmp_path):
    _, cfg_path, _ = micro
    out = str(tmp_path / "paper")
    assert cli.main(["gen-scene", "--config", cfg_path, "--out", out,
                     "--paper-scale"]) == 0
    loaded = cap.load_capture(out)
    assert loaded.n_views == 135
    for cam in loaded.cameras[:5]:
        assert abs(np.linalg.norm(cam.center) - 2.4) < 1e-9


def test_select_views_picks_distinct_nearest_azimuths(micro):
    _, _, capdir = micro
    capture = cap.load_capture(capdir)
    idx = cli.select_views(capture, ["left", "front", "right", "back"])
    assert sorted(idx) == [0, 1, 2, 3]
    # the front pick is the camera closest to azimuth 0
    azimuths = [cli._camera_azimuth(c) for c in capture.cameras]
    front = idx[1]
    diffs = np.abs((np.asarray(azimuths) + 180.0) % 360.0 - 180.0)
    assert diffs[front] == diffs.min()


def test_train_render_extract_eval_pipeline(micro):
    root, cfg_path, capdir = micro
    run = str(root / "run")
    assert cli.main(["train", "--config", cfg_path, "--capture", capdir,
                     "--out", run]) == 0
    ckpt = os.path.join(run, "checkpoint.bin")
    assert os.path.exists(ckpt)
    assert os.path.exists(os.path.join(run, "trace.csv"))
    assert os.path.exists(os.path.join(run, "config.resolved"))

    renders = str(root / "renders")
    assert cli.main(["render", "--config", cfg_path, "--capture", capdir,
                     "--checkpoint", ckpt, "--out", renders,
                     "--view", "0"]) == 0
    assert os.path.exists(os.path.join(renders, "view_000.png"))

    mesh_path = str(root / "mesh.ply")
    assert cli.main(["extract", "--config", cfg_path, "--capture", capdir,
                     "--checkpoint", ckpt, "--out", mesh_path]) == 0
    mesh = evalsuite.load_ply(mesh_path)
    assert len(mesh.vertices) > 0 and len(mesh.faces) > 0

    report = str(root / "report.csv")
    assert cli.main(["eval", "--config", cfg_path, "--capture", capdir,
                     "--checkpoint", ckpt, "--out", report]) == 0
    rows = open(report).read().splitlines()
    assert rows[0] == "metric,value"
    names = [r.split(",")[0] for r in rows[1:]]
    assert {"chamfer_m", "p2s_m", "psnr_db", "ssim"} <= set(names)


def test_train_iters_zero_writes_init_checkpoint(micro, tmp_path):
    _, cfg_path, capdir = micro
    run = str(tmp_path / "run0")
    assert cli.main(["train", "--config", cfg_path, "--capture", capdir,
                     "--out", run, "--iters", "0"]) == 0
    from sdfrecon.autodiff import load_checkpoint
    _, meta = load_checkpoint(os.path.join(run, "checkpoint.bin"))
    assert meta["iteration"] == 0


def test_bad_config_exits_with_code_two(micro, tmp_path):
    _, _, capdir = micro
    bad = str(tmp_path / "bad.yaml")
    with open(bad, "w") as f:
        f.write("trian:\n  iterations: 5\n")
    assert cli.main(["train", "--config", bad, "--capture", capdir,
                     "--out", str(tmp_path / "r")]) == cli.EXIT_CONFIG


def test_gradcheck_passes_on_fresh_init(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "OK" in out
    for stage in ("image-encoder", "sdf-network", "alpha-composite",
                  "losses"):
        assert stage in out
