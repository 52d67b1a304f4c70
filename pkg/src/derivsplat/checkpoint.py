"""Binary checkpoints.

Layout (all little-endian)::

    "GSHD"  u32 version  u32 M  u32 K  u32 L
    f32 x[M,3]  f32 q[M,4]  f32 s_hat[M,3]  f32 r[M,K,4]
    then tagged sections, each ``tag[4] u64 nbytes payload``:
      TRIP  u32 H, W, L; f32 box_lo[3], box_hi[3]; f32 planes[3,H,W,L]
      NETS  npz archive of the three flat network parameter vectors
      OPTS  npz archive of optimizer moments and training accumulators
      CONF  UTF-8 JSON (model settings, training config, counters)
"""

import io
import json
import os
import struct

import numpy as np

from .diffnet import build_color_net, build_deformation_net, build_opacity_net
from .errors import DatasetIOError
from .gaussianset import GaussianSet
from .model import AvatarModel
from .triplane import TriPlane

MAGIC = b"GSHD"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(DatasetIOError):
    pass


def _npz_bytes(arrays):
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def _npz_load(payload):
    with np.load(io.BytesIO(payload)) as z:
        return {k: z[k] for k in z.files}


def _section(tag, payload):
    return tag + struct.pack("<Q", len(payload)) + payload


def model_meta(model):
    H, W, L = model.triplane.shape
    return {
        "expr_dim": model.deform_net.input_width - 63,
        "latent_dim": model.color_net.input_width - 3,
        "deform_width": model.deform_net.layers[0].n_out,
        "deform_depth": len(model.deform_net.layers),
        "plane_shape": [H, W, L],
        "background": [float(v) for v in model.background],
        "use_scale_offset": bool(model.use_scale_offset),
        "scale_mode": model.gaussians.scale_mode,
    }


def save_checkpoint(path, model, arrays=None, meta=None):
    """Write ``model`` plus optional named arrays (OPTS) and JSON metadata (CONF)."""
    G, tp = model.gaussians, model.triplane
    M, K = G.derivation.shape[:2]
    H, W, L = tp.shape
    parts = [MAGIC, struct.pack("<4I", VERSION, M, K, L)]
    for a in (G.positions, G.rotations, G.log_scales, G.derivation):
        parts.append(np.ascontiguousarray(a, dtype=_F32).tobytes())
    trip = struct.pack("<3I", H, W, L) + np.concatenate([tp.box_lo, tp.box_hi]).astype(_F32).tobytes()
    trip += np.ascontiguousarray(tp.planes, dtype=_F32).tobytes()
    parts.append(_section(b"TRIP", trip))
    nets = {"deform": model.deform_net.params, "opacity": model.opacity_net.params, "color": model.color_net.params}
    parts.append(_section(b"NETS", _npz_bytes(nets)))
    parts.append(_section(b"OPTS", _npz_bytes(arrays or {})))
    conf = {"model": model_meta(model), **(meta or {})}
    parts.append(_section(b"CONF", json.dumps(conf).encode("utf-8")))
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(b"".join(parts))
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Return ``(model, arrays, meta)`` as written by :func:`save_checkpoint`."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, M, K, L = struct.unpack_from("<4I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 20
    geo = []
    for shape in ((M, 3), (M, 4), (M, 3), (M, K, 4)):
        n = int(np.prod(shape))
        geo.append(np.frombuffer(data, _F32, n, off).reshape(shape).astype(np.float32))
        off += 4 * n
    sections = {}
    while off < len(data):
        tag = data[off:off + 4]
        (n,) = struct.unpack_from("<Q", data, off + 4)
        sections[tag] = data[off + 12:off + 12 + n]
        off += 12 + n
    missing = [t for t in (b"TRIP", b"NETS", b"OPTS", b"CONF") if t not in sections]
    if missing:
        raise CheckpointError(f"checkpoint is missing sections {missing}")
    meta = json.loads(sections[b"CONF"].decode("utf-8"))
    mm = meta["model"]
    trip = sections[b"TRIP"]
    H, W, L2 = struct.unpack_from("<3I", trip, 0)
    if L2 != L:
        raise CheckpointError("TRIP channel count disagrees with header")
    box = np.frombuffer(trip, _F32, 6, 12).astype(np.float64)
    planes = np.frombuffer(trip, _F32, 3 * H * W * L, 36).reshape(3, H, W, L).astype(np.float32)
    nets = _npz_load(sections[b"NETS"])
    dtype = np.float32
    deform = build_deformation_net(mm["expr_dim"], dtype=dtype, width=mm["deform_width"], depth=mm["deform_depth"])
    opacity = build_opacity_net(L, mm["latent_dim"], dtype=dtype)
    color = build_color_net(mm["latent_dim"], dtype=dtype)
    for net, key in ((deform, "deform"), (opacity, "opacity"), (color, "color")):
        net.set_params(nets[key])
    G = GaussianSet(*geo, scale_mode=mm["scale_mode"])
    model = AvatarModel(G, TriPlane(planes, box[:3], box[3:]), deform, opacity, color,
                        mm["background"], mm["use_scale_offset"])
    return model, _npz_load(sections[b"OPTS"]), meta
