import json
import struct
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from spmtrack import checkpoint
from spmtrack.boxes import BBox
from spmtrack.cli import main
from spmtrack.config import PRESETS, ConfigError, RunConfig, load_run_config, run_config_from_dict
from spmtrack.metrics import evaluate, format_box_line, read_box_file
from spmtrack.model import SPMTrack
from spmtrack.synthetic import SyntheticSceneSpec, generate_synthetic_video
from spmtrack.tmoe import count_params

ROOT = Path(__file__).resolve().parents[1]
TINY_YAML = """\
preset: tiny
seed: 3
train:
  steps: 3
  batch: 2
  n_videos: 2
  warmup_steps: 1
scene:
  canvas: 32
  length: 12
  size_range: [5, 8]
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY_YAML)
    return p


@pytest.fixture
def frames_dir(tmp_path):
    spec = SyntheticSceneSpec(canvas=32, length=5, init_box=(8.0, 9.0, 7.0, 6.0), velocity=(1.0, 0.5))
    frames, boxes = generate_synthetic_video(spec)
    d = tmp_path / "frames"
    d.mkdir()
    for i, f in enumerate(frames):
        Image.fromarray(f).save(d / f"{i:04d}.png")
    return d, boxes


# -- config ---------------------------------------------------------------------------------


def test_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("model:\n  depth: 3\n")
    with pytest.raises(ConfigError, match="depth"):
        load_run_config(p)
    with pytest.raises(ConfigError):
        run_config_from_dict({"optimiser": {}})


def test_config_preset_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("preset: spmtrack-b\nmodel:\n  N_e: 2\nvariant: lora_baseline\n")
    run = load_run_config(p)
    assert run.model.d == 768 and run.model.N_e == 2 and run.variant == "lora_baseline"


def test_config_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        run_config_from_dict({"variant": "top2"})
    with pytest.raises(ConfigError):
        run_config_from_dict({"model": {"d": 30, "N_h": 4}})
    p = tmp_path / "c.yaml"
    p.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        load_run_config(p)


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv("SPM_SEED", "42")
    assert run_config_from_dict({"seed": 1}).seed == 42
    assert run_config_from_dict({"seed": 1}, use_env=False).seed == 1


def test_shipped_configs_load():
    for p in sorted((ROOT / "configs").glob("*.yaml")):
        load_run_config(p)


# -- checkpoint ------------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_identical(tmp_path):
    model = SPMTrack(PRESETS["tiny"], seed=4)
    for t in model.trainable_params().values():
        t.data = np.random.default_rng(0).normal(size=t.shape).astype(np.float32)
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, model)
    loaded, run = checkpoint.load(path)
    assert run.model == model.cfg
    a, b = model.named_tensors(), loaded.named_tensors()
    assert list(a) == list(b)
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()
        assert a[k].requires_grad == b[k].requires_grad
    assert checkpoint.to_bytes(loaded, run) == path.read_bytes()


def test_checkpoint_layout(tmp_path):
    model = SPMTrack(PRESETS["tiny"])
    data = checkpoint.to_bytes(model)
    assert data[:8] == checkpoint.MAGIC
    (n,) = struct.unpack_from("<Q", data, 8)
    manifest = json.loads(data[16:16 + n])
    payload = data[16 + n:]
    assert len(payload) == sum(int(np.prod(e["shape"])) * 4 for e in manifest["tensors"])
    first = manifest["tensors"][0]
    arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(first["shape"])))
    np.testing.assert_array_equal(arr.reshape(first["shape"]), model.named_tensors()[first["name"]].data)
    frozen = {e["name"] for e in manifest["tensors"] if e["frozen"]}
    assert frozen == set(model.frozen_params())


@pytest.mark.parametrize("damage", ["magic", "truncate", "manifest"])
def test_corrupt_checkpoint_rejected(damage):
    data = bytearray(checkpoint.to_bytes(SPMTrack(PRESETS["tiny"])))
    if damage == "magic":
        data[0:1] = b"X"
    elif damage == "truncate":
        data = data[:-4]
    else:
        data[20] = 0xFF
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.from_bytes(bytes(data))


# -- metrics ------------------------------------------------------------------------------


def test_metrics_examples():
    boxes = [BBox(0, 0, 10, 10), BBox(5, 5, 4, 4)]
    m = evaluate(boxes, boxes)
    assert (m.mean_iou, m.sr50, m.sr75) == (1.0, 1.0, 1.0)
    far = [BBox(100, 100, 1, 1)] * 2
    m = evaluate(boxes, far)
    assert (m.mean_iou, m.sr50, m.sr75) == (0.0, 0.0, 0.0)


def test_success_rate_half():
    gt = [BBox(0, 0, 10, 10)] * 4
    # IoU 0.6 for a shifted box: overlap 7.5 x 10 / (200 - 75)
    pred = [BBox(2.5, 0, 10, 10)] * 2 + [BBox(50, 50, 10, 10)] * 2
    m = evaluate(pred, gt)
    assert m.sr50 == 0.5 and m.mean_iou == pytest.approx(0.3)


def test_box_file_round_trip(tmp_path):
    p = tmp_path / "b.txt"
    boxes = [BBox(1.234, 2, 3, 4), BBox(0, 0, 1, 1)]
    p.write_text("# comment\n" + "\n".join(format_box_line(i, b) for i, b in enumerate(boxes)) + "\n\n")
    back = read_box_file(p)
    assert back[0].as_tuple() == (1.23, 2.0, 3.0, 4.0)
    assert len(back) == 2


# -- commands ---------------------------------------------------------------------------------


def test_params_command(capsys):
    assert main(["params", "--config", str(ROOT / "configs" / "spmtrack-b.yaml")]) == 0
    out = capsys.readouterr().out
    rep = count_params(PRESETS["spmtrack-b"])
    assert f"all,{rep.total},{rep.trainable}" in out


def test_params_bad_config(tmp_path, capsys):
    p = tmp_path / "x.yaml"
    p.write_text("bogus: 1\n")
    assert main(["params", "--config", str(p)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_train_writes_checkpoint_and_log(tiny_cfg, tmp_path):
    out = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr" and len(lines) == 4
    step, loss, lr = lines[1].split(",")
    assert step == "0" and float(loss) > 0 and float(lr) > 0
    checkpoint.load(out)


def test_train_zero_steps_equals_init(tiny_cfg, tmp_path):
    out = tmp_path / "z.ckpt"
    assert main(["train", "--config", str(tiny_cfg), "--out", str(out), "--steps", "0"]) == 0
    model, run = checkpoint.load(out)
    fresh = SPMTrack(run.model, seed=run.seed)
    assert checkpoint.to_bytes(fresh, run) == out.read_bytes()


def test_train_is_deterministic(tiny_cfg, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    assert main(["train", "--config", str(tiny_cfg), "--out", str(a)]) == 0
    assert main(["train", "--config", str(tiny_cfg), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_train_unwritable_path(tiny_cfg, tmp_path):
    assert main(["train", "--config", str(tiny_cfg), "--out", str(tmp_path / "no" / "dir" / "m.ckpt")]) == 2
    assert main(["train", "--config", str(tiny_cfg), "--out", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_abort_exit_3(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(TINY_YAML.replace("warmup_steps: 1", "warmup_steps: 1\n  lr: 1.0e+30\n  lr_start: 1.0e+30\n"
                                     "  lr_end: 1.0e+30\n  weight_decay: 0.0\n  steps: 40"))
    out = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 3
    model, _ = checkpoint.load(out)
    assert all(np.all(np.isfinite(t.data)) for t in model.named_tensors().values())


def test_track_command(tiny_cfg, tmp_path, frames_dir, capsys):
    d, boxes = frames_dir
    ckpt = tmp_path / "m.ckpt"
    main(["train", "--config", str(tiny_cfg), "--out", str(ckpt), "--steps", "1"])
    capsys.readouterr()
    init = "{:.2f},{:.2f},{:.2f},{:.2f}".format(*boxes[0].as_tuple())
    assert main(["track", "--ckpt", str(ckpt), "--frames", str(d), "--init", init]) == 0
    first = capsys.readouterr().out
    lines = first.splitlines()
    assert len(lines) == 5
    assert lines[0] == "0," + init
    for i, line in enumerate(lines):
        idx, *vals = line.split(",")
        assert int(idx) == i and all(len(v.split(".")[1]) == 2 for v in vals)
    assert main(["track", "--ckpt", str(ckpt), "--frames", str(d), "--init", init]) == 0
    assert capsys.readouterr().out == first


def test_track_single_frame_echoes_init(tiny_cfg, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    main(["train", "--config", str(tiny_cfg), "--out", str(ckpt), "--steps", "0"])
    d = tmp_path / "one"
    d.mkdir()
    Image.fromarray(np.zeros((16, 16, 3), dtype=np.uint8)).save(d / "a.ppm")
    capsys.readouterr()
    assert main(["track", "--ckpt", str(ckpt), "--frames", str(d), "--init", "1,2,3,4"]) == 0
    assert capsys.readouterr().out == "0,1.00,2.00,3.00,4.00\n"


def test_track_corrupt_frame_names_file(tiny_cfg, tmp_path, frames_dir, capsys):
    d, _ = frames_dir
    ckpt = tmp_path / "m.ckpt"
    main(["train", "--config", str(tiny_cfg), "--out", str(ckpt), "--steps", "0"])
    (d / "0002.png").write_bytes(b"not an image")
    assert main(["track", "--ckpt", str(ckpt), "--frames", str(d), "--init", "8,9,7,6"]) == 2
    assert "0002.png" in capsys.readouterr().err


def test_track_missing_inputs(tmp_path, capsys):
    assert main(["track", "--ckpt", str(tmp_path / "none.ckpt"), "--frames", str(tmp_path), "--init", "1,1,2,2"]) == 2
    assert main(["track", "--ckpt", "x", "--frames", str(tmp_path), "--init", "1,2"]) == 2


def test_eval_command(tmp_path, capsys):
    gt = tmp_path / "gt.txt"
    pred = tmp_path / "pred.txt"
    gt.write_text("0,0,0,10,10\n1,0,0,10,10\n")
    pred.write_text("0,0,0,10,10\n1,50,50,10,10\n")
    assert main(["eval", "--pred", str(pred), "--gt", str(gt)]) == 0
    out = capsys.readouterr().out
    assert "mean_iou,0.5000" in out and "sr_0.50,0.5000" in out and "sr_0.75,0.5000" in out
    pred.write_text("0,0,0,10,10\n")
    assert main(["eval", "--pred", str(pred), "--gt", str(gt)]) == 2
