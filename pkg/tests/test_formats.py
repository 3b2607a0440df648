"""File formats: flow files, PNGs, checkpoints, configs, loss logs."""

import struct
import zlib

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from splatflow import (
    AdamState,
    DynamicField,
    FlowField,
    GaussianSet,
    flow_to_color,
    read_checkpoint,
    read_flo,
    read_loss_log,
    read_png,
    write_checkpoint,
    write_flo,
    write_loss_log,
    write_png,
)
from splatflow.formats import (
    CHECKPOINT_MAGIC,
    FLO_INVALID,
    FLO_MAGIC,
    flatten_config,
    load_yaml,
    merge_config,
    save_yaml,
    set_config_value,
)


def random_field(rng, n=3, T=2):
    base = GaussianSet(
        means=rng.normal(size=(n, 3)),
        quats=rng.normal(size=(n, 4)) + 0.1,
        log_scales=rng.normal(scale=0.3, size=(n, 3)),
        opacity_logits=rng.normal(size=n),
        colors=rng.random((n, 3)),
    )
    return DynamicField(
        base=base,
        delta_means=rng.normal(size=(T, n, 3)),
        delta_quats=rng.normal(size=(T, n, 4)),
        delta_log_scales=rng.normal(size=(T, n, 3)),
    )


def random_adam(rng, field):
    from splatflow.formats import _ADAM_KEYS, _block_shapes

    shapes = _block_shapes(len(field.base), field.motion_steps)
    return AdamState(
        m={k: rng.normal(size=shapes[k]) for k in _ADAM_KEYS},
        v={k: rng.random(shapes[k]) for k in _ADAM_KEYS},
        step=int(rng.integers(1, 1000)),
    )


# --- flow files --------------------------------------------------------------


def test_flo_layout_is_the_public_byte_format(tmp_path):
    path = tmp_path / "one.flo"
    write_flo(path, FlowField(flow=np.array([[[3.0, 4.0]]]), valid=np.ones((1, 1), bool)))
    raw = path.read_bytes()
    assert raw[:4] == b"PIEH"
    assert raw == b"PIEH" + struct.pack("<ii", 1, 1) + struct.pack("<ff", 3.0, 4.0)


def test_flo_invalid_pixels_use_the_sentinel(tmp_path):
    path = tmp_path / "mask.flo"
    flow = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    valid = np.array([[True, False]])
    write_flo(path, FlowField(flow=flow, valid=valid))
    u, v = struct.unpack("<ff", path.read_bytes()[12 + 8 :])
    assert u == FLO_INVALID and v == FLO_INVALID
    back = read_flo(path)
    np.testing.assert_array_equal(back.valid, valid)
    np.testing.assert_array_equal(back.flow[0, 1], [0.0, 0.0])
    np.testing.assert_array_equal(back.flow[0, 0], [1.0, 2.0])


@settings(max_examples=40, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(
    w=st.integers(1, 6),
    h=st.integers(1, 6),
    seed=st.integers(0, 2**31),
    all_valid=st.booleans(),
)
def test_flo_round_trip_is_exact(tmp_path, w, h, seed, all_valid):
    rng = np.random.default_rng(seed)
    flow = rng.uniform(-1e5, 1e5, (h, w, 2)).astype(np.float32).astype(np.float64)
    valid = np.ones((h, w), bool) if all_valid else rng.random((h, w)) < 0.7
    path = tmp_path / "prop.flo"
    write_flo(path, FlowField(flow=flow, valid=valid))
    back = read_flo(path)
    np.testing.assert_array_equal(back.valid, valid)
    np.testing.assert_array_equal(back.flow[valid], flow[valid])
    np.testing.assert_array_equal(back.flow[~valid], np.zeros((np.sum(~valid), 2)))


def test_flo_malformed_files_rejected(tmp_path):
    ok = struct.pack("<fii", FLO_MAGIC, 1, 1) + struct.pack("<ff", 0.0, 0.0)
    cases = {
        "short_header.flo": ok[:8],
        "bad_magic.flo": struct.pack("<fii", 1.0, 1, 1) + ok[12:],
        "bad_dims.flo": struct.pack("<fii", FLO_MAGIC, 0, 1) + ok[12:],
        "short_payload.flo": ok[:-4],
        "trailing.flo": ok + b"x",
    }
    for name, raw in cases.items():
        path = tmp_path / name
        path.write_bytes(raw)
        with pytest.raises(ValueError):
            read_flo(path)


# --- images ------------------------------------------------------------------


def test_png_quantization_rounds_half_up(tmp_path):
    img = np.zeros((1, 3, 3))
    img[0, 0] = 0.5
    img[0, 1] = 1.0
    img[0, 2] = 0.0
    path = tmp_path / "quant.png"
    write_png(path, img)
    back = read_png(path)
    assert back[0, 0, 0] == 128 / 255.0
    assert back[0, 1, 0] == 1.0
    assert back[0, 2, 0] == 0.0


@settings(max_examples=25, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(w=st.integers(1, 8), h=st.integers(1, 8), seed=st.integers(0, 2**31))
def test_png_round_trip_of_quantized_values(tmp_path, w, h, seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (h, w, 3)) / 255.0
    path = tmp_path / "prop.png"
    write_png(path, img)
    np.testing.assert_array_equal(read_png(path), img)
    first = path.read_bytes()
    write_png(path, img)
    assert path.read_bytes() == first  # deterministic encoder


# --- flow visualization ------------------------------------------------------


def test_flow_colors_white_for_zero_and_invalid():
    flow = np.zeros((2, 2, 2))
    flow[1, 1] = (3.0, 1.0)
    valid = np.array([[True, False], [True, True]])
    col = flow_to_color(FlowField(flow=flow, valid=valid))
    np.testing.assert_array_equal(col[0, 0], [1.0, 1.0, 1.0])  # zero motion
    np.testing.assert_array_equal(col[0, 1], [1.0, 1.0, 1.0])  # invalid
    assert (col[1, 1] < 1.0).any()


def test_flow_color_saturates_red_along_positive_u():
    f = FlowField(flow=np.array([[[5.0, 0.0]]]), valid=np.ones((1, 1), bool))
    np.testing.assert_array_equal(flow_to_color(f, max_magnitude=5.0)[0, 0], [1.0, 0.0, 0.0])


def test_flow_color_hue_distinguishes_directions():
    angles = np.linspace(0.0, 2 * np.pi, 8, endpoint=False)
    flow = np.stack([np.cos(angles), np.sin(angles)], axis=-1).reshape(1, 8, 2)
    col = flow_to_color(FlowField(flow=flow, valid=np.ones((1, 8), bool)), max_magnitude=1.0)
    seen = {tuple(np.round(c, 6)) for c in col[0]}
    assert len(seen) == 8


def test_flow_color_magnitude_fades_to_white():
    flow = np.array([[[0.5, 0.0], [2.0, 0.0]]])
    col = flow_to_color(FlowField(flow=flow, valid=np.ones((1, 2), bool)), max_magnitude=2.0)
    # same hue, lower saturation: closer to white at the smaller magnitude
    assert col[0, 0, 1] > col[0, 1, 1]
    assert col[0, 0, 2] > col[0, 1, 2]
    np.testing.assert_allclose(col[0, 0], 1.0 - 0.25 * (1.0 - col[0, 1]), atol=1e-12)


def test_flow_color_default_scale_is_percentile_based():
    rng = np.random.default_rng(0)
    flow = rng.normal(size=(6, 6, 2))
    field = FlowField(flow=flow, valid=np.ones((6, 6), bool))
    mags = np.hypot(flow[..., 0], flow[..., 1])
    np.testing.assert_array_equal(
        flow_to_color(field),
        flow_to_color(field, max_magnitude=float(np.percentile(mags, 99))),
    )


# --- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    for i in range(10):
        field = random_field(rng, n=int(rng.integers(1, 5)), T=int(rng.integers(1, 4)))
        adam = random_adam(rng, field) if i % 2 else None
        config = {"train": {"seed": i}, "note": "x"} if i % 3 else None
        path = tmp_path / f"ck{i}.bin"
        write_checkpoint(path, field, iteration=10 * i, seed=i, adam=adam, config=config)
        back = read_checkpoint(path)
        assert back["iteration"] == 10 * i and back["seed"] == i
        for a, b in zip(_arrays(field), _arrays(back["field"])):
            np.testing.assert_array_equal(a, b)
        if adam is None:
            assert back["adam"] is None
        else:
            assert back["adam"].step == adam.step
            for key in adam.m:
                np.testing.assert_array_equal(back["adam"].m[key], adam.m[key])
                np.testing.assert_array_equal(back["adam"].v[key], adam.v[key])
        assert back["config"] == (config or {})


def _arrays(field):
    yield field.base.means
    yield field.base.quats
    yield field.base.log_scales
    yield field.base.opacity_logits
    yield field.base.colors
    yield field.delta_means
    yield field.delta_quats
    yield field.delta_log_scales


def _rewrite_body(path, mutate):
    """Apply `mutate` to the checkpoint body and restore a valid trailer."""
    raw = path.read_bytes()
    body = bytearray(raw[4:-4])
    body = mutate(body)
    path.write_bytes(CHECKPOINT_MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF))


def test_checkpoint_rejects_foreign_and_corrupt_files(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "ck.bin"
    write_checkpoint(path, random_field(rng), iteration=5, seed=1)

    foreign = tmp_path / "foreign.bin"
    foreign.write_bytes(b"JUNK" + path.read_bytes()[4:])
    with pytest.raises(ValueError, match="not a checkpoint"):
        read_checkpoint(foreign)

    raw = bytearray(path.read_bytes())
    raw[40] ^= 0xFF
    flipped = tmp_path / "flipped.bin"
    flipped.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="CRC"):
        read_checkpoint(flipped)

    cut = tmp_path / "cut.bin"
    cut.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(ValueError):
        read_checkpoint(cut)


def test_checkpoint_refuses_unknown_version(tmp_path):
    rng = np.random.default_rng(3)
    path = tmp_path / "ck.bin"
    write_checkpoint(path, random_field(rng))

    def bump_version(body):
        body[0:4] = struct.pack("<I", 2)
        return body

    _rewrite_body(path, bump_version)
    with pytest.raises(ValueError, match="version 2"):
        read_checkpoint(path)


def test_checkpoint_rejects_short_and_long_payloads(tmp_path):
    rng = np.random.default_rng(4)
    path = tmp_path / "ck.bin"
    write_checkpoint(path, random_field(rng))

    long_path = tmp_path / "long.bin"
    long_path.write_bytes(path.read_bytes())
    _rewrite_body(long_path, lambda body: body + b"\x00" * 8)
    with pytest.raises(ValueError, match="trailing"):
        read_checkpoint(long_path)

    short_path = tmp_path / "short.bin"
    short_path.write_bytes(path.read_bytes())
    _rewrite_body(short_path, lambda body: body[:-24])
    with pytest.raises(ValueError, match="ends early|truncated"):
        read_checkpoint(short_path)


def test_checkpoint_read_does_not_leave_partial_state_on_error(tmp_path):
    # A reader that throws must not hand back half a field.
    rng = np.random.default_rng(5)
    path = tmp_path / "ck.bin"
    write_checkpoint(path, random_field(rng))
    _rewrite_body(path, lambda body: body[: len(body) // 2])
    try:
        out = read_checkpoint(path)
    except ValueError:
        out = None
    assert out is None


# --- configs -----------------------------------------------------------------


def test_merge_config_rejects_unknown_keys_with_dotted_path():
    defaults = {"train": {"seed": 0, "iterations": 10}, "name": "x"}
    merged = merge_config(defaults, {"train": {"seed": 5}})
    assert merged["train"]["seed"] == 5 and merged["train"]["iterations"] == 10
    assert merged["name"] == "x"
    with pytest.raises(ValueError, match="train.lr"):
        merge_config(defaults, {"train": {"lr": 1.0}})
    with pytest.raises(ValueError, match="unknown config key: extra"):
        merge_config(defaults, {"extra": 1})


def test_set_config_value_parses_yaml_scalars():
    cfg = {"train": {"lambda_flow": 0.5, "isotropic": False, "lr_means": 0.1, "tags": None}}
    set_config_value(cfg, "train.lambda_flow", "0.25")
    set_config_value(cfg, "train.isotropic", "true")
    set_config_value(cfg, "train.lr_means", "null")
    set_config_value(cfg, "train.tags", "[1, 2]")
    assert cfg["train"] == {
        "lambda_flow": 0.25,
        "isotropic": True,
        "lr_means": None,
        "tags": [1, 2],
    }
    with pytest.raises(ValueError, match="train.missing"):
        set_config_value(cfg, "train.missing", "1")
    with pytest.raises(ValueError):
        set_config_value(cfg, "absent.key", "1")


def test_flatten_config_sorts_dotted_keys():
    cfg = {"b": {"y": 2, "x": 1}, "a": 0}
    assert flatten_config(cfg) == [("a", 0), ("b.x", 1), ("b.y", 2)]


def test_yaml_round_trip_and_validation(tmp_path):
    cfg = {"train": {"seed": 3, "lr_means": None}, "scene": {"frames": 2}}
    path = tmp_path / "c.yaml"
    save_yaml(path, cfg)
    assert load_yaml(path) == cfg
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_yaml(empty) == {}
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a\n- list\n")
    with pytest.raises(ValueError):
        load_yaml(bad)


# --- loss logs ---------------------------------------------------------------


def test_loss_log_round_trip_preserves_floats_exactly(tmp_path):
    rows = [
        (0, 0.1 + 0.2, 1.0 / 3.0, 1e-17),
        (1, 2.0, 0.0, float(np.pi)),
        (2, 5.5e-12, 123456.789, 3.3),
    ]
    path = tmp_path / "loss.csv"
    write_loss_log(path, rows, config={"train": {"seed": 1}})
    back = read_loss_log(path)
    assert back == rows  # exact float equality via repr round trip
    header_lines = [l for l in path.read_text().splitlines() if l.startswith("#")]
    assert "# train.seed: 1" in header_lines


def test_loss_log_header_is_validated(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time,loss\n0,1.0\n")
    with pytest.raises(ValueError):
        read_loss_log(path)
