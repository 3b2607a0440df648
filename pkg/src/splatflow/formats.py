"""File formats: .flo flow maps, 8-bit PNG frames, flow colorization,
binary checkpoints, YAML configs, and CSV loss logs.

Flow files follow the Middlebury layout: a float32 magic, int32 width and
height, then row-major interleaved (u, v) float32 pairs. Invalid pixels are
stored with both components at 1e9, exactly representable in float32.

Checkpoints are little-endian binary with a version tag and a CRC32 trailer
over the payload; truncated or corrupted files raise before any state is
constructed. They carry the full field, the optimizer moments, the iteration
counter, and the seed, which is what exact run continuation needs.
"""

from __future__ import annotations

import csv
import io
import struct
import zlib

import numpy as np
import yaml
from PIL import Image

from .dynamics import AdamState, DynamicField
from .flow import FlowField
from .gaussians import GaussianSet

FLO_MAGIC = 202021.25  # spells "PIEH" when read as bytes
FLO_INVALID = 1e9
CHECKPOINT_MAGIC = b"GSFC"
CHECKPOINT_VERSION = 1
_FLAG_ADAM = 1

# Optimizer moment blocks, serialized in this order.
_ADAM_KEYS = (
    "base.means",
    "base.quats",
    "base.log_scales",
    "base.opacity_logits",
    "base.colors",
    "delta.means",
    "delta.quats",
    "delta.log_scales",
)


def write_flo(path, flow_field: FlowField) -> None:
    """Write a flow field; invalid pixels become the 1e9 sentinel."""
    h, w = flow_field.flow.shape[:2]
    data = flow_field.flow.astype("<f4")
    data = np.where(flow_field.valid[:, :, None], data, np.float32(FLO_INVALID))
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) < 12:
            raise ValueError(f"{path}: truncated flow file")
        magic, w, h = struct.unpack("<fii", header)
        if magic != np.float32(FLO_MAGIC):
            raise ValueError(f"{path}: bad flow magic {magic!r}")
        if w <= 0 or h <= 0:
            raise ValueError(f"{path}: bad flow dimensions {w}x{h}")
        body = f.read(8 * w * h + 1)
    if len(body) != 8 * w * h:
        raise ValueError(f"{path}: flow payload size mismatch")
    data = np.frombuffer(body, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    valid = ~np.any(data >= FLO_INVALID, axis=2)
    flow = np.where(valid[:, :, None], data, 0.0)
    return FlowField(flow=flow, valid=valid)


def write_png(path, image: np.ndarray) -> None:
    """Quantize a [0, 1] float image to 8 bits, rounding half up."""
    q = np.clip(np.floor(image * 255.0 + 0.5), 0.0, 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def _colorwheel() -> np.ndarray:
    """The 55-entry hue wheel used for flow visualization, RGB in [0, 255]."""
    transitions = (
        (15, (255, 0, 0), (255, 255, 0)),  # red to yellow
        (6, (255, 255, 0), (0, 255, 0)),  # yellow to green
        (4, (0, 255, 0), (0, 255, 255)),  # green to cyan
        (11, (0, 255, 255), (0, 0, 255)),  # cyan to blue
        (13, (0, 0, 255), (255, 0, 255)),  # blue to magenta
        (6, (255, 0, 255), (255, 0, 0)),  # magenta to red
    )
    rows = []
    for steps, start, end in transitions:
        start = np.asarray(start, dtype=np.float64)
        end = np.asarray(end, dtype=np.float64)
        frac = np.arange(steps)[:, None] / steps
        rows.append(start + frac * (end - start))
    return np.concatenate(rows)


def flow_to_color(flow_field: FlowField, max_magnitude: float | None = None) -> np.ndarray:
    """Direction-as-hue, magnitude-as-saturation rendering in [0, 1].

    Zero flow and invalid pixels are white. Magnitudes are scaled by
    `max_magnitude`, defaulting to the 99th percentile over valid pixels.
    """
    wheel = _colorwheel() / 255.0
    ncols = wheel.shape[0]
    u = flow_field.flow[:, :, 0]
    v = flow_field.flow[:, :, 1]
    rad = np.hypot(u, v)
    if max_magnitude is None:
        vals = rad[flow_field.valid]
        max_magnitude = float(np.percentile(vals, 99)) if vals.size else 0.0
    if max_magnitude <= 0.0:
        max_magnitude = 1.0
    sat = np.minimum(rad / max_magnitude, 1.0)
    angle = np.arctan2(-v, -u) / np.pi  # [-1, 1]
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int) % ncols
    k1 = (k0 + 1) % ncols
    f = (fk - np.floor(fk))[:, :, None]
    col = (1.0 - f) * wheel[k0] + f * wheel[k1]
    col = 1.0 - sat[:, :, None] * (1.0 - col)
    col[~flow_field.valid] = 1.0
    return col


def _pack_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _unpack_array(view: memoryview, offset: int, shape) -> tuple:
    count = int(np.prod(shape)) if shape else 1
    nbytes = 8 * count
    if offset + nbytes > len(view):
        raise ValueError("checkpoint payload ends early")
    arr = np.frombuffer(view[offset : offset + nbytes], dtype="<f8").reshape(shape)
    return arr.astype(np.float64), offset + nbytes


def write_checkpoint(
    path,
    field: DynamicField,
    iteration: int = 0,
    seed: int = 0,
    adam: AdamState | None = None,
    config: dict | None = None,
) -> None:
    n = len(field.base)
    T = field.motion_steps
    payload = io.BytesIO()
    flags = _FLAG_ADAM if adam is not None else 0
    payload.write(struct.pack("<IIIIqq", CHECKPOINT_VERSION, flags, n, T, iteration, seed))
    blob = yaml.safe_dump(config or {}, sort_keys=True).encode("utf-8")
    payload.write(struct.pack("<I", len(blob)))
    payload.write(blob)
    for arr in _field_arrays(field):
        _pack_array(payload, arr)
    if adam is not None:
        payload.write(struct.pack("<q", adam.step))
        for key in _ADAM_KEYS:
            _pack_array(payload, adam.m[key])
            _pack_array(payload, adam.v[key])
    body = payload.getvalue()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def _field_arrays(field: DynamicField):
    return (
        field.base.means,
        field.base.quats,
        field.base.log_scales,
        field.base.opacity_logits,
        field.base.colors,
        field.delta_means,
        field.delta_quats,
        field.delta_log_scales,
    )


def _block_shapes(n: int, T: int) -> dict:
    return {
        "base.means": (n, 3),
        "base.quats": (n, 4),
        "base.log_scales": (n, 3),
        "base.opacity_logits": (n,),
        "base.colors": (n, 3),
        "delta.means": (T, n, 3),
        "delta.quats": (T, n, 4),
        "delta.log_scales": (T, n, 3),
    }


def read_checkpoint(path) -> dict:
    """Load a checkpoint. Returns a dict with keys field, iteration, seed,
    adam (may be None), and config."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    body, (crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: checkpoint CRC mismatch")
    view = memoryview(body)
    header = struct.calcsize("<IIIIqq")
    if len(view) < header + 4:
        raise ValueError(f"{path}: checkpoint header truncated")
    version, flags, n, T, iteration, seed = struct.unpack("<IIIIqq", view[:header])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", view[header : header + 4])
    offset = header + 4
    if offset + blob_len > len(view):
        raise ValueError(f"{path}: checkpoint config blob truncated")
    config = yaml.safe_load(bytes(view[offset : offset + blob_len]).decode("utf-8")) or {}
    offset += blob_len
    shapes = _block_shapes(n, T)
    arrays = {}
    for key in _ADAM_KEYS:
        arrays[key], offset = _unpack_array(view, offset, shapes[key])
    field = DynamicField(
        base=GaussianSet(
            means=arrays["base.means"],
            quats=arrays["base.quats"],
            log_scales=arrays["base.log_scales"],
            opacity_logits=arrays["base.opacity_logits"],
            colors=np.clip(arrays["base.colors"], 0.0, 1.0),
        ),
        delta_means=arrays["delta.means"],
        delta_quats=arrays["delta.quats"],
        delta_log_scales=arrays["delta.log_scales"],
    )
    adam = None
    if flags & _FLAG_ADAM:
        if offset + 8 > len(view):
            raise ValueError(f"{path}: optimizer state truncated")
        (step,) = struct.unpack("<q", view[offset : offset + 8])
        offset += 8
        m = {}
        vv = {}
        for key in _ADAM_KEYS:
            m[key], offset = _unpack_array(view, offset, shapes[key])
            vv[key], offset = _unpack_array(view, offset, shapes[key])
        adam = AdamState(m=m, v=vv, step=step)
    if offset != len(view):
        raise ValueError(f"{path}: {len(view) - offset} trailing bytes in checkpoint")
    return {
        "field": field,
        "iteration": iteration,
        "seed": seed,
        "adam": adam,
        "config": config,
    }


def load_yaml(path) -> dict:
    with open(path) as f:
        data = yaml.safe_load(f)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return data


def save_yaml(path, data: dict) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(data, f, sort_keys=True)


def merge_config(defaults: dict, overrides: dict, path: str = "") -> dict:
    """Recursive merge that rejects keys absent from the defaults."""
    out = dict(defaults)
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise ValueError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = merge_config(defaults[key], value, where)
        else:
            out[key] = value
    return out


def set_config_value(config: dict, dotted_key: str, raw_value: str) -> None:
    """Apply one 'a.b.c=value' override in place; the value is YAML-parsed."""
    parts = dotted_key.split(".")
    node = config
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ValueError(f"unknown config key: {'.'.join(parts[: i + 1])}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ValueError(f"unknown config key: {dotted_key}")
    node[leaf] = yaml.safe_load(raw_value)


def flatten_config(config: dict, path: str = "") -> list:
    rows = []
    for key in sorted(config):
        where = f"{path}.{key}" if path else str(key)
        if isinstance(config[key], dict):
            rows.extend(flatten_config(config[key], where))
        else:
            rows.append((where, config[key]))
    return rows


def write_loss_log(path, rows, config: dict | None = None) -> None:
    """CSV of (iteration, L_photo, L_flow, total) with the resolved config
    echoed as comment lines."""
    with open(path, "w", newline="") as f:
        if config:
            for key, value in flatten_config(config):
                f.write(f"# {key}: {value}\n")
        writer = csv.writer(f)
        writer.writerow(["iteration", "L_photo", "L_flow", "total"])
        for it, lp, lf, total in rows:
            writer.writerow([it, repr(float(lp)), repr(float(lf)), repr(float(total))])


def read_loss_log(path) -> list:
    rows = []
    with open(path, newline="") as f:
        for line in f:
            if line.startswith("#"):
                continue
            rows.append(line)
    reader = csv.reader(rows)
    header = next(reader)
    if header[:4] != ["iteration", "L_photo", "L_flow", "total"]:
        raise ValueError(f"{path}: unexpected loss log header {header!r}")
    return [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in reader]
