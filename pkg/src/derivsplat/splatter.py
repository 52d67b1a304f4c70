"""Pinhole camera, EWA projection and a tile-based differentiable rasterizer.

Screen coordinates are pixels with pixel ``(row i, col j)`` centered at
``(x=j, y=i)``. The compositing kernels are compiled with numba; projection,
tiling and the chain rule back to 3D run in numpy.
"""

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ForwardMismatchError
from .quatgeom import covariance, covariance_vjp, sh_basis, sh_basis_jacobian

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
COV2D_FLOOR = 0.3
TILE_SIZE = 16


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    view_matrix: np.ndarray  # 4x4 world -> camera
    near: float = 0.2

    def __post_init__(self):
        self.view_matrix = np.asarray(self.view_matrix, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.view_matrix[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("view matrix rotation block is not orthonormal")

    @property
    def rotation(self):
        return self.view_matrix[:3, :3]

    @property
    def translation(self):
        return self.view_matrix[:3, 3]

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def to_dict(self):
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "view_matrix": [float(v) for v in self.view_matrix.ravel()],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
            np.asarray(d["view_matrix"], dtype=np.float64).reshape(4, 4), d.get("near", 0.2),
        )


def look_at(eye, target, up=(0.0, -1.0, 0.0)):
    """World-to-camera matrix for a camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    V = np.eye(4)
    V[:3, :3] = R
    V[:3, 3] = -R @ eye
    return V


def projection_jacobian(t, fx, fy):
    t = np.asarray(t)
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    J = np.zeros(t.shape[:-1] + (2, 3), dtype=t.dtype)
    J[..., 0, 0] = fx / tz
    J[..., 0, 2] = -fx * tx / tz**2
    J[..., 1, 1] = fy / tz
    J[..., 1, 2] = -fy * ty / tz**2
    return J


def project_gaussian(x, sigma, cam):
    """Project one Gaussian; returns ``(mean2d, depth, cov2d)`` or ``None`` when culled."""
    t = cam.rotation @ np.asarray(x, dtype=np.float64) + cam.translation
    if t[2] <= cam.near:
        return None
    J = projection_jacobian(t, cam.fx, cam.fy)
    T = J @ cam.rotation
    cov2d = T @ np.asarray(sigma) @ T.T + COV2D_FLOOR * np.eye(2)
    mean2d = np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
    return mean2d, float(t[2]), cov2d


@dataclass
class Projection:
    """Batched projection state for the visible subset ``ids``."""

    ids: np.ndarray
    t: np.ndarray
    T: np.ndarray
    sigma: np.ndarray
    cov2d: np.ndarray
    mean2d: np.ndarray
    depth: np.ndarray
    conic: np.ndarray
    radius: np.ndarray


def project_gaussians(positions, sigmas, cam):
    Wr = cam.rotation.astype(positions.dtype)
    t_all = positions @ Wr.T + cam.translation.astype(positions.dtype)
    ids = np.flatnonzero(t_all[:, 2] > cam.near)
    t = t_all[ids]
    sigma = sigmas[ids]
    J = projection_jacobian(t, cam.fx, cam.fy)
    T = J @ Wr
    cov2d = T @ sigma @ np.swapaxes(T, 1, 2)
    a = cov2d[:, 0, 0] + COV2D_FLOOR
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + COV2D_FLOOR
    cov2d[:, 0, 0] = a
    cov2d[:, 1, 1] = c
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(0.1, mid * mid - det))
    radius = np.ceil(3.0 * np.sqrt(lam))
    mean2d = np.stack([cam.fx * t[:, 0] / t[:, 2] + cam.cx, cam.fy * t[:, 1] / t[:, 2] + cam.cy], axis=1)
    return Projection(ids, t, T, sigma, cov2d, mean2d, t[:, 2].copy(), conic, radius)


def project_backward(proj, cam, dmean2d, dconic):
    """Chain screen-space gradients back to camera-independent ``(dpositions, dsigmas)`` of visible splats."""
    a, b, c = proj.cov2d[:, 0, 0], proj.cov2d[:, 0, 1], proj.cov2d[:, 1, 1]
    det = a * c - b * b
    inv2 = 1.0 / (det * det)
    dA, dB, dC = dconic[:, 0], dconic[:, 1], dconic[:, 2]
    da = (-c * c * dA + b * c * dB - b * b * dC) * inv2
    db = (2 * b * c * dA - (det + 2 * b * b) * dB + 2 * a * b * dC) * inv2
    dc = (-b * b * dA + a * b * dB - a * a * dC) * inv2
    G = np.empty((len(a), 2, 2), dtype=proj.cov2d.dtype)
    G[:, 0, 0] = da
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * db
    G[:, 1, 1] = dc
    T = proj.T
    dsigma = np.swapaxes(T, 1, 2) @ G @ T
    dT = 2.0 * G @ T @ proj.sigma
    Wr = cam.rotation.astype(proj.t.dtype)
    dJ = dT @ Wr.T
    tx, ty, tz = proj.t[:, 0], proj.t[:, 1], proj.t[:, 2]
    fx, fy = cam.fx, cam.fy
    dt = np.empty_like(proj.t)
    dt[:, 0] = -fx / tz**2 * dJ[:, 0, 2] + fx / tz * dmean2d[:, 0]
    dt[:, 1] = -fy / tz**2 * dJ[:, 1, 2] + fy / tz * dmean2d[:, 1]
    dt[:, 2] = (
        -fx / tz**2 * dJ[:, 0, 0]
        + 2 * fx * tx / tz**3 * dJ[:, 0, 2]
        - fy / tz**2 * dJ[:, 1, 1]
        + 2 * fy * ty / tz**3 * dJ[:, 1, 2]
        - fx * tx / tz**2 * dmean2d[:, 0]
        - fy * ty / tz**2 * dmean2d[:, 1]
    )
    return dt @ Wr, dsigma


def tile_and_sort(mean2d, radius, depth, width, height, tile_size=TILE_SIZE):
    """Bin splats into tiles by their 3-sigma square; lists are depth-sorted, ties by index.

    Returns ``(point_list, tile_ranges)`` where ``tile_ranges[t] = (start, end)``
    slices ``point_list`` for row-major tile ``t``.
    """
    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    n = len(depth)
    mean2d = np.asarray(mean2d, dtype=np.float64).reshape(n, 2)
    radius = np.asarray(radius, dtype=np.float64).reshape(n)
    x0 = np.clip(np.floor((mean2d[:, 0] - radius) / tile_size), 0, ntx).astype(np.int64)
    x1 = np.clip(np.floor((mean2d[:, 0] + radius) / tile_size) + 1, 0, ntx).astype(np.int64)
    y0 = np.clip(np.floor((mean2d[:, 1] - radius) / tile_size), 0, nty).astype(np.int64)
    y1 = np.clip(np.floor((mean2d[:, 1] + radius) / tile_size) + 1, 0, nty).astype(np.int64)
    counts = np.maximum(x1 - x0, 0) * np.maximum(y1 - y0, 0)
    total = int(counts.sum())
    owner = np.repeat(np.arange(n), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    wx = np.repeat(x1 - x0, counts)
    span = np.maximum(wx, 1)
    tiles = (np.repeat(y0, counts) + local // span) * ntx + np.repeat(x0, counts) + local % span
    order = np.lexsort((owner, np.asarray(depth, dtype=np.float64)[owner], tiles))
    point_list = owner[order]
    tiles = tiles[order]
    starts = np.searchsorted(tiles, np.arange(ntx * nty), side="left")
    ends = np.searchsorted(tiles, np.arange(ntx * nty), side="right")
    return point_list.astype(np.int64), np.stack([starts, ends], axis=1).astype(np.int64)


def _cutoff(opacity):
    """Exponent below which ``opacity * exp(power)`` is certainly under ALPHA_MIN.

    Lets the kernels skip the exponential for far-away splats; the margin keeps
    the exact alpha test authoritative near the boundary.
    """
    o = np.maximum(np.asarray(opacity, dtype=np.float64), 1e-300)
    return np.log(ALPHA_MIN / o) - 1e-6


@njit(cache=True)
def _forward_kernel(mean2d, conic, opacity, rgb, depth, cutoff, point_list, tile_ranges, width, height,
                    tile_size, bg, image, final_T, n_contrib, depth_acc):
    ntx = (width + tile_size - 1) // tile_size
    for py in range(height):
        for px in range(width):
            tile = (py // tile_size) * ntx + px // tile_size
            start = tile_ranges[tile, 0]
            end = tile_ranges[tile, 1]
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            dsum = 0.0
            last = 0
            for pos in range(start, end):
                i = point_list[pos]
                dx = mean2d[i, 0] - px
                dy = mean2d[i, 1] - py
                power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                if power > 0.0 or power < cutoff[i]:
                    continue
                alpha = min(ALPHA_MAX, opacity[i] * np.exp(power))
                if alpha < ALPHA_MIN:
                    continue
                test_T = T * (1.0 - alpha)
                if test_T < T_MIN:
                    break
                w = alpha * T
                c0 += rgb[i, 0] * w
                c1 += rgb[i, 1] * w
                c2 += rgb[i, 2] * w
                dsum += depth[i] * w
                T = test_T
                last = pos - start + 1
            image[py, px, 0] = c0 + T * bg[0]
            image[py, px, 1] = c1 + T * bg[1]
            image[py, px, 2] = c2 + T * bg[2]
            final_T[py, px] = T
            n_contrib[py, px] = last
            depth_acc[py, px] = dsum


@njit(cache=True)
def _backward_kernel(mean2d, conic, opacity, rgb, cutoff, point_list, tile_ranges, width, height, tile_size,
                     bg, final_T, n_contrib, dimage, dmean2d, dconic, dopacity, drgb):
    ntx = (width + tile_size - 1) // tile_size
    for py in range(height):
        for px in range(width):
            tile = (py // tile_size) * ntx + px // tile_size
            start = tile_ranges[tile, 0]
            T_end = final_T[py, px]
            T = T_end
            g0 = dimage[py, px, 0]
            g1 = dimage[py, px, 1]
            g2 = dimage[py, px, 2]
            bg_dot = bg[0] * g0 + bg[1] * g1 + bg[2] * g2
            acc0 = 0.0
            acc1 = 0.0
            acc2 = 0.0
            last_alpha = 0.0
            lc0 = 0.0
            lc1 = 0.0
            lc2 = 0.0
            for pos in range(start + n_contrib[py, px] - 1, start - 1, -1):
                i = point_list[pos]
                dx = mean2d[i, 0] - px
                dy = mean2d[i, 1] - py
                power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                if power > 0.0 or power < cutoff[i]:
                    continue
                G = np.exp(power)
                raw = opacity[i] * G
                alpha = min(ALPHA_MAX, raw)
                if alpha < ALPHA_MIN:
                    continue
                T = T / (1.0 - alpha)
                w = alpha * T
                drgb[i, 0] += w * g0
                drgb[i, 1] += w * g1
                drgb[i, 2] += w * g2
                acc0 = last_alpha * lc0 + (1.0 - last_alpha) * acc0
                acc1 = last_alpha * lc1 + (1.0 - last_alpha) * acc1
                acc2 = last_alpha * lc2 + (1.0 - last_alpha) * acc2
                dalpha = T * ((rgb[i, 0] - acc0) * g0 + (rgb[i, 1] - acc1) * g1 + (rgb[i, 2] - acc2) * g2)
                dalpha -= T_end / (1.0 - alpha) * bg_dot
                last_alpha = alpha
                lc0 = rgb[i, 0]
                lc1 = rgb[i, 1]
                lc2 = rgb[i, 2]
                if raw > ALPHA_MAX:
                    continue
                dopacity[i] += G * dalpha
                dpower = opacity[i] * G * dalpha
                dmean2d[i, 0] += dpower * (-conic[i, 0] * dx - conic[i, 1] * dy)
                dmean2d[i, 1] += dpower * (-conic[i, 2] * dy - conic[i, 1] * dx)
                dconic[i, 0] += dpower * (-0.5 * dx * dx)
                dconic[i, 1] += dpower * (-dx * dy)
                dconic[i, 2] += dpower * (-0.5 * dy * dy)


@dataclass
class SplatBuffer:
    mean2d: np.ndarray  # (N, 2)
    depth: np.ndarray  # (N,)
    conic: np.ndarray  # (N, 3) upper triangle of the inverse screen covariance
    opacity: np.ndarray  # (N,)
    rgb: np.ndarray  # (N, 3)
    radius: np.ndarray = None
    point_list: np.ndarray = None
    tile_ranges: np.ndarray = None

    def __post_init__(self):
        if self.radius is None:
            a, b, c = self.conic[:, 0], self.conic[:, 1], self.conic[:, 2]
            det = a * c - b * b
            # eigenvalues of the covariance are reciprocals of the conic's
            lam_min = 0.5 * (a + c) - np.sqrt(np.maximum(0.0, 0.25 * (a - c) ** 2 + b * b))
            self.radius = np.ceil(3.0 * np.sqrt(1.0 / np.maximum(lam_min, 1e-12))) * (det > 0)


@dataclass
class RenderOutput:
    image: np.ndarray
    final_transmittance: np.ndarray
    contributor_count: np.ndarray
    depth_acc: np.ndarray = None
    background: np.ndarray = None
    splats: SplatBuffer = field(default=None, repr=False)

    def depth_map(self):
        """Alpha-weighted mean depth; zero where nothing was drawn."""
        acc = 1.0 - self.final_transmittance
        return np.where(acc > 1e-6, self.depth_acc / np.maximum(acc, 1e-6), 0.0)


def rasterize_forward(splats, cam, background=(0.0, 0.0, 0.0), tile_size=TILE_SIZE):
    dtype = splats.mean2d.dtype if splats.mean2d.size else np.float64
    if splats.point_list is None:
        splats.point_list, splats.tile_ranges = tile_and_sort(
            splats.mean2d, splats.radius, splats.depth, cam.width, cam.height, tile_size
        )
    bg = np.asarray(background, dtype=np.float64)
    H, W = cam.height, cam.width
    image = np.zeros((H, W, 3), dtype=dtype)
    final_T = np.zeros((H, W), dtype=dtype)
    n_contrib = np.zeros((H, W), dtype=np.int64)
    depth_acc = np.zeros((H, W), dtype=dtype)
    if len(splats.depth) == 0:
        image[...] = bg
        final_T[...] = 1.0
        return RenderOutput(image, final_T, n_contrib, depth_acc, bg, splats)
    _forward_kernel(
        np.ascontiguousarray(splats.mean2d), np.ascontiguousarray(splats.conic),
        np.ascontiguousarray(splats.opacity), np.ascontiguousarray(splats.rgb),
        np.ascontiguousarray(splats.depth), _cutoff(splats.opacity), splats.point_list, splats.tile_ranges,
        W, H, tile_size, bg, image, final_T, n_contrib, depth_acc,
    )
    return RenderOutput(image, final_T, n_contrib, depth_acc, bg, splats)


def rasterize_backward(splats, out, dL_dimage, tile_size=TILE_SIZE):
    """Exact gradients of the composited image w.r.t. ``(mean2d, conic, opacity, rgb)``."""
    if out.splats is not splats or out.image.shape[:2] != np.shape(dL_dimage)[:2]:
        raise ForwardMismatchError("render output does not belong to these splats")
    n = len(splats.depth)
    dtype = splats.mean2d.dtype if n else np.float64
    dmean2d = np.zeros((n, 2), dtype=np.float64)
    dconic = np.zeros((n, 3), dtype=np.float64)
    dopacity = np.zeros(n, dtype=np.float64)
    drgb = np.zeros((n, 3), dtype=np.float64)
    if n:
        H, W = out.image.shape[:2]
        _backward_kernel(
            np.ascontiguousarray(splats.mean2d), np.ascontiguousarray(splats.conic),
            np.ascontiguousarray(splats.opacity), np.ascontiguousarray(splats.rgb),
            _cutoff(splats.opacity), splats.point_list, splats.tile_ranges, W, H, tile_size, out.background,
            out.final_transmittance, out.contributor_count,
            np.ascontiguousarray(dL_dimage, dtype=np.float64), dmean2d, dconic, dopacity, drgb,
        )
    return dmean2d.astype(dtype), dconic.astype(dtype), dopacity.astype(dtype), drgb.astype(dtype)


def colors_from_sh(Y, view_dir):
    """RGB from 16x3 SH coefficients (flattened basis-major) at unit view directions."""
    Y = np.asarray(Y)
    basis = sh_basis(np.asarray(view_dir, dtype=Y.dtype))
    raw = np.einsum("...b,...bc->...c", basis, Y.reshape(Y.shape[:-1] + (Y.shape[-1] // 3, 3))) + 0.5
    return np.clip(raw, 0.0, 1.0)


def colors_from_sh_vjp(Y, view_dir, drgb):
    """Return ``(dY, dview_dir)``; ``dview_dir`` treats the direction as free (unnormalized) input."""
    Y = np.asarray(Y)
    Yr = Y.reshape(Y.shape[:-1] + (Y.shape[-1] // 3, 3))
    basis = sh_basis(view_dir)
    raw = np.einsum("...b,...bc->...c", basis, Yr) + 0.5
    g = drgb * ((raw > 0.0) & (raw < 1.0))
    dY = (basis[..., :, None] * g[..., None, :]).reshape(Y.shape)
    dbasis = np.einsum("...bc,...c->...b", Yr, g)
    ddir = np.einsum("...b,...bk->...k", dbasis, sh_basis_jacobian(view_dir))
    return dY, ddir


@dataclass
class RenderContext:
    cam: Camera
    proj: Projection
    splats: SplatBuffer
    out: RenderOutput
    rotations: np.ndarray
    scales: np.ndarray
    count: int


def render(positions, rotations, scales, opacities, colors, cam, background=(0.0, 0.0, 0.0),
           tile_size=TILE_SIZE):
    """Render 3D Gaussians with per-Gaussian opacity and RGB; returns ``(RenderOutput, RenderContext)``."""
    sigmas = covariance(rotations, scales)
    proj = project_gaussians(positions, sigmas, cam)
    ids = proj.ids
    splats = SplatBuffer(
        proj.mean2d, proj.depth, proj.conic,
        np.asarray(opacities).reshape(-1)[ids], np.asarray(colors)[ids], proj.radius,
    )
    out = rasterize_forward(splats, cam, background, tile_size)
    return out, RenderContext(cam, proj, splats, out, rotations, scales, len(positions))


def render_backward(ctx, dL_dimage, tile_size=TILE_SIZE):
    """Gradients w.r.t. all render inputs.

    Returns a dict with ``positions``, ``rotations``, ``scales``, ``opacities``,
    ``colors`` (all full length) and ``mean2d`` (screen-space, full length).
    """
    dmean2d, dconic, dop, drgb = rasterize_backward(ctx.splats, ctx.out, dL_dimage, tile_size)
    dpos_v, dsigma = project_backward(ctx.proj, ctx.cam, dmean2d, dconic)
    ids = ctx.proj.ids
    dq_v, ds_v = covariance_vjp(ctx.rotations[ids], ctx.scales[ids], dsigma)
    n = ctx.count
    dtype = ctx.rotations.dtype

    def full(v, width):
        arr = np.zeros((n,) + width, dtype=dtype)
        arr[ids] = v
        return arr

    return {
        "positions": full(dpos_v, (3,)),
        "rotations": full(dq_v, (4,)),
        "scales": full(ds_v, (3,)),
        "opacities": full(dop, ()),
        "colors": full(drgb, (3,)),
        "mean2d": full(dmean2d, (2,)),
    }
