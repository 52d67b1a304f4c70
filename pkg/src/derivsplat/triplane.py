"""Single-resolution tri-plane features fetched through learnable derivations.

Each Gaussian carries ``K`` unit quaternions. Rotating the Gaussian's
normalized position by each of them yields ``K`` doppelganger positions;
doppelganger ``k`` reads the channel block ``[k*L/K, (k+1)*L/K)`` from the
three planes, the three samples are multiplied elementwise, and the blocks are
concatenated into one length-``L`` feature.
"""

from dataclasses import dataclass

import numpy as np

from .errors import BadChannelRangeError, BadDoppelgangerCountError, DegenerateBoxError
from .quatgeom import project_to_tangent, quat_to_rotmat, quat_to_rotmat_vjp, rotate_point

# (u axis, v axis) of each plane in xyz order: P_xy, P_xz, P_yz
PLANE_AXES = ((0, 1), (0, 2), (1, 2))
PLANE_NAMES = ("xy", "xz", "yz")


@dataclass
class TriPlane:
    planes: np.ndarray  # (3, H, W, L)
    box_lo: np.ndarray
    box_hi: np.ndarray

    @property
    def shape(self):
        return self.planes.shape[1:]

    @property
    def param_count(self):
        return self.planes.size


def init_triplane(H=64, W=64, L=32, box=((-1, -1, -1), (1, 1, 1)), seed=0, dtype=np.float64, low=0.1, high=0.5):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    if np.any(hi - lo <= 0):
        raise DegenerateBoxError("tri-plane box must have positive extent on every axis")
    rng = np.random.default_rng(seed)
    planes = rng.uniform(low, high, size=(3, H, W, L)).astype(dtype)
    return TriPlane(planes, lo, hi)


def plane_param_count(resolutions, L=32):
    """Parameters of a tri-plane pyramid with square levels of the given sizes."""
    return 3 * L * sum(int(r) ** 2 for r in resolutions)


def normalize_position(x, box):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    if np.any(hi - lo <= 0):
        raise DegenerateBoxError("box must have positive volume")
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    u = (2.0 * (x - lo) / (hi - lo) - 1.0).astype(dtype)
    return np.clip(u, -1.0, 1.0)


def normalize_position_vjp(x, box, dout):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    u = 2.0 * (np.asarray(x) - lo) / (hi - lo) - 1.0
    inside = (u >= -1.0) & (u <= 1.0)
    return (dout * inside * (2.0 / (hi - lo))).astype(dout.dtype)


def derive_doppelgangers(x_norm, r):
    """Positions of the ``K`` doppelgangers, rotated about the cube origin and clamped."""
    x_norm = np.asarray(x_norm)
    p = rotate_point(r, x_norm[..., None, :])
    return np.clip(p, -1.0, 1.0)


def _bilinear_setup(u, v, H, W):
    fu = (u + 1.0) * (0.5 * (H - 1))
    fv = (v + 1.0) * (0.5 * (W - 1))
    i0 = np.clip(np.floor(fu).astype(np.int64), 0, H - 2)
    j0 = np.clip(np.floor(fv).astype(np.int64), 0, W - 2)
    tu = (fu - i0).astype(u.dtype)
    tv = (fv - j0).astype(v.dtype)
    return i0, j0, tu, tv


def _bilinear(c00, c10, c01, c11, tu, tv):
    return ((1 - tu) * (1 - tv)) * c00 + (tu * (1 - tv)) * c10 + ((1 - tu) * tv) * c01 + (tu * tv) * c11


def _check_range(channel_range, L):
    c0, c1 = channel_range
    if not (0 <= c0 < c1 <= L):
        raise BadChannelRangeError(f"channel range [{c0}, {c1}) invalid for L={L}")
    return c0, c1


def sample_plane(plane, uv, channel_range=None):
    """Bilinearly interpolate channels ``[c0, c1)`` of an ``(H, W, L)`` grid at ``uv``."""
    H, W, L = plane.shape
    c0, c1 = _check_range(channel_range or (0, L), L)
    uv = np.asarray(uv, dtype=plane.dtype)
    i0, j0, tu, tv = _bilinear_setup(uv[..., 0], uv[..., 1], H, W)
    P = plane[..., c0:c1]
    tu, tv = tu[..., None], tv[..., None]
    return _bilinear(P[i0, j0], P[i0 + 1, j0], P[i0, j0 + 1], P[i0 + 1, j0 + 1], tu, tv)


def sample_plane_vjp(plane, uv, channel_range, dout):
    """Return ``(dplane, duv)`` for ``sample_plane``; ``dplane`` has the full plane shape."""
    H, W, L = plane.shape
    c0, c1 = _check_range(channel_range or (0, L), L)
    uv = np.asarray(uv, dtype=plane.dtype)
    dout = np.asarray(dout, dtype=plane.dtype)
    i0, j0, tu, tv = _bilinear_setup(uv[..., 0], uv[..., 1], H, W)
    P = plane[..., c0:c1]
    c00, c10, c01, c11 = P[i0, j0], P[i0 + 1, j0], P[i0, j0 + 1], P[i0 + 1, j0 + 1]
    a, b = tu[..., None], tv[..., None]
    du = np.sum(dout * ((1 - b) * (c10 - c00) + b * (c11 - c01)), axis=-1) * (0.5 * (H - 1))
    dv = np.sum(dout * ((1 - a) * (c01 - c00) + a * (c11 - c10)), axis=-1) * (0.5 * (W - 1))
    dplane = np.zeros_like(plane)
    sub = dplane[..., c0:c1]
    for di, dj, w in ((0, 0, (1 - a) * (1 - b)), (1, 0, a * (1 - b)), (0, 1, (1 - a) * b), (1, 1, a * b)):
        np.add.at(sub, (i0 + di, j0 + dj), w * dout)
    return dplane, np.stack([du, dv], axis=-1)


def axis_aligned_feature(tp, x_norm):
    """Plain tri-plane lookup: Hadamard product of three full-channel samples."""
    x_norm = np.asarray(x_norm, dtype=tp.planes.dtype)
    out = None
    for j, (a, b) in enumerate(PLANE_AXES):
        s = sample_plane(tp.planes[j], np.stack([x_norm[..., a], x_norm[..., b]], axis=-1))
        out = s if out is None else out * s
    return out


@dataclass
class FuseCache:
    x_norm: np.ndarray
    r: np.ndarray
    inside: np.ndarray  # doppelganger coordinate not clamped
    corners: list  # per plane: (flat index (M,K), tu, tv, c00, c10, c01, c11)
    samples: list  # per plane (M, K, C)


def fuse_feature(tp, x_norm, r, return_cache=False):
    """Fused length-``L`` feature for normalized positions ``(M, 3)`` and derivations ``(M, K, 4)``."""
    H, W, L = tp.shape
    x_norm = np.asarray(x_norm, dtype=tp.planes.dtype)
    r = np.asarray(r, dtype=tp.planes.dtype)
    single = x_norm.ndim == 1
    if single:
        x_norm, r = x_norm[None], r[None]
    K = r.shape[1]
    if L % K != 0:
        raise BadDoppelgangerCountError(f"K={K} does not divide L={L}")
    C = L // K
    p_raw = rotate_point(r, x_norm[:, None, :])
    inside = np.abs(p_raw) <= 1.0
    p = np.clip(p_raw, -1.0, 1.0)
    kk = np.arange(K)[None, :]
    corners, samples = [], []
    f = None
    for j, (a, b) in enumerate(PLANE_AXES):
        P = tp.planes[j].reshape(H * W, K, C)
        i0, j0, tu, tv = _bilinear_setup(p[..., a], p[..., b], H, W)
        flat = i0 * W + j0
        c00, c10, c01, c11 = P[flat, kk], P[flat + W, kk], P[flat + 1, kk], P[flat + W + 1, kk]
        s = _bilinear(c00, c10, c01, c11, tu[..., None], tv[..., None])
        corners.append((flat, tu, tv, c00, c10, c01, c11))
        samples.append(s)
        f = s if f is None else f * s
    f = f.reshape(f.shape[0], L)
    if single:
        f = f[0]
    if return_cache:
        return f, FuseCache(x_norm, r, inside, corners, samples)
    return f


def fuse_feature_backward(tp, cache, df):
    """Return ``(dplanes, dx_norm, dr)``; ``dr`` is projected onto the tangent space of each ``r_k``."""
    H, W, L = tp.shape
    M, K = cache.r.shape[:2]
    C = L // K
    df = np.asarray(df, dtype=tp.planes.dtype).reshape(M, K, C)
    s0, s1, s2 = cache.samples
    ds = (df * s1 * s2, df * s0 * s2, df * s0 * s1)
    dplanes = np.zeros_like(tp.planes)
    dp = np.zeros(cache.r.shape[:2] + (3,), dtype=tp.planes.dtype)
    chan = np.arange(K)[None, :, None] * C + np.arange(C)[None, None, :]
    for j, (a, b) in enumerate(PLANE_AXES):
        flat, tu, tv, c00, c10, c01, c11 = cache.corners[j]
        g = ds[j]
        ta, tb = tu[..., None], tv[..., None]
        dp[..., a] += np.sum(g * ((1 - tb) * (c10 - c00) + tb * (c11 - c01)), axis=-1) * (0.5 * (H - 1))
        dp[..., b] += np.sum(g * ((1 - ta) * (c01 - c00) + ta * (c11 - c10)), axis=-1) * (0.5 * (W - 1))
        idx, wts = [], []
        for off, w in ((0, (1 - ta) * (1 - tb)), (W, ta * (1 - tb)), (1, (1 - ta) * tb), (W + 1, ta * tb)):
            idx.append((flat + off)[..., None] * L + chan)
            wts.append(w * g)
        acc = np.bincount(
            np.concatenate([i.ravel() for i in idx]),
            weights=np.concatenate([w.ravel() for w in wts]),
            minlength=H * W * L,
        )
        dplanes[j] = acc.reshape(H, W, L)
    dp *= cache.inside
    R = quat_to_rotmat(cache.r)
    dx_norm = np.einsum("mkji,mkj->mi", R, dp)
    dR = dp[..., :, None] * cache.x_norm[:, None, None, :]
    dr = project_to_tangent(cache.r, quat_to_rotmat_vjp(cache.r, dR))
    return dplanes, dx_norm, dr


@dataclass
class DilutionReport:
    occupied_cell_fraction: float
    mean_points_per_occupied_cell: float
    perpendicular_collision_count: int


def dilution_stats(points, resolution=(64, 64), mode="axis_aligned", r=None):
    """Per-plane cell occupancy of projected points.

    In ``"derived"`` mode every point is replaced by its doppelgangers under
    ``r`` (shape (M, 4) or (M, K, 4)) before projection.
    """
    H, W = resolution
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 1:
        raise ValueError("need at least one point")
    if mode == "derived":
        if r is None:
            raise ValueError("derived mode requires derivation quaternions")
        r = np.asarray(r, dtype=np.float64)
        if r.ndim == 2:
            r = r[:, None, :]
        pts = derive_doppelgangers(pts, r).reshape(-1, 3)
    elif mode != "axis_aligned":
        raise ValueError(f"unknown mode {mode!r}")
    reports = {}
    for name, (a, b) in zip(PLANE_NAMES, PLANE_AXES):
        iu = np.clip(np.floor((pts[:, a] + 1.0) * 0.5 * H).astype(np.int64), 0, H - 1)
        iv = np.clip(np.floor((pts[:, b] + 1.0) * 0.5 * W).astype(np.int64), 0, W - 1)
        occupied = np.unique(iu * W + iv).size
        reports[name] = DilutionReport(
            occupied / (H * W),
            pts.shape[0] / occupied,
            int(pts.shape[0] - occupied),
        )
    return reports
