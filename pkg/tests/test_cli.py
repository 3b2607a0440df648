"""End-to-end command line runs through `main`, in process."""

import copy

import numpy as np
import pytest

from splatflow import (
    DynamicField,
    GaussianSet,
    read_checkpoint,
    read_flo,
    read_loss_log,
    read_png,
    write_checkpoint,
)
from splatflow.cli import main
from splatflow.formats import load_yaml, save_yaml

_MICRO = {
    "scene": {
        "seed": 7,
        "frames": 2,
        "background": [0.05, 0.05, 0.1],
        "rig": {"fx": 30.0, "fy": 30.0, "width": 18, "height": 18,
                "positions": [[0.0, 0.0, 0.0]]},
        "clusters": [
            {"count": 2, "center": [0.1, -0.05, 4.0], "spread": 0.08,
             "sigma": [0.12, 0.09], "opacity": 0.85,
             "motion": {"kind": "translate", "velocity": [0.12, -0.06, 0.0]}},
            {"count": 2, "center": [-0.35, 0.2, 5.0], "spread": 0.1,
             "sigma": [0.15, 0.15], "opacity": 0.7},
        ],
    },
    "render": {"tile_size": 9},
    "train": {"iterations": 10, "lambda_flow": 0.5, "lr_quats": 1e-4, "seed": 7},
    "init": {"mean_sigma": 0.02, "log_scale_sigma": 0.05, "seed": 7},
}


def micro_config():
    return copy.deepcopy(_MICRO)


def static_config():
    cfg = micro_config()
    for cluster in cfg["scene"]["clusters"]:
        cluster.pop("motion", None)
    return cfg


def generate(root, cfg, name="scene", extra_args=()):
    cfg_path = root / f"{name}.yaml"
    save_yaml(cfg_path, cfg)
    out = root / name
    rc = main(["gen-scene", "--config", str(cfg_path), "--out", str(out), *extra_args])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return generate(tmp_path_factory.mktemp("data"), micro_config())


@pytest.fixture(scope="module")
def static_dataset(tmp_path_factory):
    return generate(tmp_path_factory.mktemp("static"), static_config())


def test_gen_scene_writes_the_dataset_layout(dataset):
    for name in (
        "config.yaml",
        "gt.bin",
        "view_000/frame_0000.png",
        "view_000/frame_0001.png",
        "view_000/flow_0000.flo",
        "view_000/flowvis_0000.png",
    ):
        assert (dataset / name).exists(), name
    assert not (dataset / "view_001").exists()
    cfg = load_yaml(dataset / "config.yaml")
    assert cfg["scene"]["rig"]["width"] == 18
    assert cfg["scene"]["clusters"][0]["motion"]["kind"] == "translate"
    gt = read_checkpoint(dataset / "gt.bin")
    assert gt["iteration"] == 0 and gt["seed"] == 7 and gt["adam"] is None
    assert gt["config"] == cfg
    assert len(gt["field"].base) == 4 and gt["field"].motion_steps == 1
    frame = read_png(dataset / "view_000" / "frame_0000.png")
    assert frame.shape == (18, 18, 3)
    assert np.ptp(frame) > 0.1  # clusters actually cover pixels
    assert np.abs(read_flo(dataset / "view_000" / "flow_0000.flo").flow).max() > 0.1


def test_gen_scene_set_overrides_and_summary_line(tmp_path, capsys):
    cfg = micro_config()
    out = generate(
        tmp_path, cfg, extra_args=["--set", "scene.frames=3", "--set", "scene.rig.width=20"]
    )
    assert "wrote 1 views x 3 frames (4 gaussians)" in capsys.readouterr().out
    saved = load_yaml(out / "config.yaml")
    assert saved["scene"]["frames"] == 3 and saved["scene"]["rig"]["width"] == 20
    assert (out / "view_000" / "frame_0002.png").exists()
    assert (out / "view_000" / "flow_0001.flo").exists()
    assert read_png(out / "view_000" / "frame_0000.png").shape == (18, 20, 3)


def test_gen_scene_seed_flag_overrides_every_seed(tmp_path):
    a = generate(tmp_path, micro_config(), name="a", extra_args=["--seed", "123"])
    cfg = load_yaml(a / "config.yaml")
    assert cfg["scene"]["seed"] == 123
    assert cfg["train"]["seed"] == 123
    assert cfg["init"]["seed"] == 123
    assert read_checkpoint(a / "gt.bin")["seed"] == 123
    b = generate(tmp_path, micro_config(), name="b", extra_args=["--seed", "124"])
    assert (a / "view_000" / "frame_0000.png").read_bytes() != (
        b / "view_000" / "frame_0000.png"
    ).read_bytes()


def test_fit_writes_checkpoint_log_and_previews(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["fit", "--data", str(dataset), "--out", str(out)]) == 0
    rows = read_loss_log(out / "loss.csv")
    assert [r[0] for r in rows] == list(range(11))  # 10 pre-step rows plus final
    assert rows[-1][3] < rows[0][3]  # optimizer made progress
    assert (out / "preview_0000.png").exists()
    assert (out / "preview_0009.png").exists()
    ck = read_checkpoint(out / "ckpt.bin")
    assert ck["iteration"] == 10
    assert ck["adam"] is not None and ck["adam"].step == 10
    pinned = ck["config"]["train"]["lr_means"]
    assert isinstance(pinned, float) and pinned > 0.0
    header = [l for l in (out / "loss.csv").read_text().splitlines() if l.startswith("#")]
    assert f"# train.lr_means: {pinned}" in header


def test_fit_is_bit_reproducible(dataset, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["fit", "--data", str(dataset), "--out", str(out_a)]) == 0
    assert main(["fit", "--data", str(dataset), "--out", str(out_b)]) == 0
    assert (out_a / "ckpt.bin").read_bytes() == (out_b / "ckpt.bin").read_bytes()
    assert (out_a / "loss.csv").read_bytes() == (out_b / "loss.csv").read_bytes()


def test_fit_resume_matches_uninterrupted_run(dataset, tmp_path):
    full = tmp_path / "full"
    assert main([
        "fit", "--data", str(dataset), "--out", str(full),
        "--set", "train.iterations=12",
    ]) == 0
    half = tmp_path / "half"
    assert main([
        "fit", "--data", str(dataset), "--out", str(half),
        "--set", "train.iterations=6",
    ]) == 0
    resumed = tmp_path / "resumed"
    assert main([
        "fit", "--data", str(dataset), "--out", str(resumed),
        "--resume", str(half / "ckpt.bin"), "--set", "train.iterations=12",
    ]) == 0
    assert (resumed / "ckpt.bin").read_bytes() == (full / "ckpt.bin").read_bytes()
    full_rows = read_loss_log(full / "loss.csv")
    assert read_loss_log(resumed / "loss.csv") == full_rows[6:]


def test_resume_needs_optimizer_state(dataset, tmp_path, capsys):
    rc = main([
        "fit", "--data", str(dataset), "--out", str(tmp_path / "run"),
        "--resume", str(dataset / "gt.bin"),
    ])
    assert rc == 1
    assert "no optimizer state" in capsys.readouterr().err


def test_render_reproduces_generated_frames(dataset, tmp_path):
    out = tmp_path / "frames"
    rc = main(["render", "--checkpoint", str(dataset / "gt.bin"), "--out", str(out)])
    assert rc == 0
    for k in range(2):
        assert (out / f"frame_{k:04d}.png").read_bytes() == (
            dataset / "view_000" / f"frame_{k:04d}.png"
        ).read_bytes()


def test_threaded_render_matches_serial(dataset, tmp_path):
    serial, threaded = tmp_path / "serial", tmp_path / "threaded"
    ck = str(dataset / "gt.bin")
    assert main(["render", "--checkpoint", ck, "--out", str(serial), "--threads", "1"]) == 0
    assert main(["render", "--checkpoint", ck, "--out", str(threaded), "--threads", "3"]) == 0
    for k in range(2):
        assert (serial / f"frame_{k:04d}.png").read_bytes() == (
            threaded / f"frame_{k:04d}.png"
        ).read_bytes()


def test_flow_command_matches_dataset_reference(dataset, tmp_path):
    out = tmp_path / "flows"
    rc = main(["flow", "--checkpoint", str(dataset / "gt.bin"), "--out", str(out)])
    assert rc == 0
    assert (out / "flow_0000.flo").read_bytes() == (
        dataset / "view_000" / "flow_0000.flo"
    ).read_bytes()
    assert (out / "flowvis_0000.png").read_bytes() == (
        dataset / "view_000" / "flowvis_0000.png"
    ).read_bytes()


def test_flow_of_a_static_scene_renders_white(static_dataset, tmp_path):
    out = tmp_path / "flows"
    rc = main(["flow", "--checkpoint", str(static_dataset / "gt.bin"), "--out", str(out)])
    assert rc == 0
    flow = read_flo(out / "flow_0000.flo")
    np.testing.assert_array_equal(flow.flow, 0.0)
    assert flow.valid.any()
    np.testing.assert_array_equal(read_png(out / "flowvis_0000.png"), 1.0)


def test_flow_rejects_single_frame_checkpoints(tmp_path, capsys):
    base = GaussianSet(
        means=np.array([[0.0, 0.0, 4.0]]),
        quats=np.array([[1.0, 0.0, 0.0, 0.0]]),
        log_scales=np.zeros((1, 3)),
        opacity_logits=np.zeros(1),
        colors=np.full((1, 3), 0.5),
    )
    field = DynamicField(
        base=base,
        delta_means=np.zeros((0, 1, 3)),
        delta_quats=np.zeros((0, 1, 4)),
        delta_log_scales=np.zeros((0, 1, 3)),
    )
    path = tmp_path / "still.bin"
    write_checkpoint(path, field, config=micro_config())
    rc = main(["flow", "--checkpoint", str(path), "--out", str(tmp_path / "out")])
    assert rc == 1
    assert "single frame" in capsys.readouterr().err


def test_gradcheck_command_passes_and_writes_csv(tmp_path, capsys):
    rc = main(["gradcheck", "--seeds", "1", "--out", str(tmp_path)])
    assert rc == 0
    assert "gradient check passed" in capsys.readouterr().out
    lines = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert lines[0] == "loss,timestep,block,rel_err"
    assert len(lines) == 1 + 30  # 3 losses x 2 timesteps x 5 blocks


def test_eval_reports_the_fitted_losses(dataset, tmp_path):
    run = tmp_path / "run"
    assert main(["fit", "--data", str(dataset), "--out", str(run)]) == 0
    out = tmp_path / "eval"
    rc = main([
        "eval", "--checkpoint", str(run / "ckpt.bin"),
        "--data", str(dataset), "--out", str(out),
    ])
    assert rc == 0
    final = read_loss_log(run / "loss.csv")[-1]
    lp, lf, total = ((out / "eval_loss.txt").read_text().split())
    assert (float(lp), float(lf), float(total)) == (final[1], final[2], final[3])
    table = (out / "eval.csv").read_text().splitlines()
    assert table[0] == "kind,view,frame,psnr,dynamic_psnr"
    assert len(table) == 3  # header plus one row per frame


def test_usage_errors_exit_with_code_one(tmp_path, capsys):
    cases = [
        ["gen-scene", "--out", str(tmp_path / "x")],  # no --config
        ["gen-scene", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "x")],
        ["fit", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "x")],
        ["render", "--checkpoint", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "x")],
        ["frobnicate"],
        [],
    ]
    for argv in cases:
        assert main(argv) == 1, argv
    capsys.readouterr()


def test_bad_set_overrides_exit_with_code_one(tmp_path, capsys):
    cfg_path = tmp_path / "c.yaml"
    save_yaml(cfg_path, micro_config())
    base = ["gen-scene", "--config", str(cfg_path), "--out", str(tmp_path / "x")]
    assert main(base + ["--set", "scene.fog=1"]) == 1
    assert "scene.fog" in capsys.readouterr().err
    assert main(base + ["--set", "oops"]) == 1
    assert "key=value" in capsys.readouterr().err


def test_divergence_exits_with_code_two(dataset, tmp_path, capsys, monkeypatch):
    def blow_up(*args, **kwargs):
        raise RuntimeError("fit diverged at iteration 3")

    monkeypatch.setattr("splatflow.cli.fit", blow_up)
    rc = main(["fit", "--data", str(dataset), "--out", str(tmp_path / "run")])
    assert rc == 2
    assert "numerical failure: fit diverged at iteration 3" in capsys.readouterr().err
