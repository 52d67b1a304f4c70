"""Quaternion algebra, covariance factorization, SH basis and positional encoding.

Quaternions are stored scalar-first ``(w, x, y, z)`` and composed with the
Hamilton product. Every function broadcasts over leading axes, so a single
quaternion has shape ``(4,)`` and a batch has shape ``(..., 4)``.
"""

import numpy as np

from .errors import NonPositiveScaleError, NonUnitDirectionError, ZeroNormError

ZERO_NORM_EPS = 1e-12

# Real SH up to degree 3 (16 basis functions); the count is exposed for config.
SH_DEGREE = 3
SH_BASIS_COUNT = (SH_DEGREE + 1) ** 2

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

PE_FREQUENCIES = 10
PE_WIDTH = 3 + 3 * 2 * PE_FREQUENCIES

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    q = np.asarray(q)
    if not np.issubdtype(q.dtype, np.floating):
        q = q.astype(np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= ZERO_NORM_EPS):
        raise ZeroNormError("cannot normalize a quaternion with norm <= 1e-12")
    return q / n


def quat_normalize_vjp(q, dout):
    """Pull a gradient on ``q / |q|`` back onto the unnormalized ``q``."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    return (dout - u * np.sum(u * dout, axis=-1, keepdims=True)) / n


def quat_conj(q):
    q = np.asarray(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0], dtype=q.dtype)


def hamilton(a, b):
    """Raw Hamilton product without renormalization."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_mul(a, b):
    return quat_normalize(hamilton(a, b))


def quat_exp_map(base, v):
    """Retract ``base`` along body-frame tangent ``v``: ``base * exp((0, v))``.

    ``|v|`` is the half-angle of the applied rotation. A zero tangent returns
    ``base`` untouched.
    """
    base = np.asarray(base)
    v = np.asarray(v, dtype=base.dtype)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    sinc = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    e = np.concatenate([np.cos(theta), sinc * v], axis=-1)
    out = quat_normalize(hamilton(base, e))
    return np.where(theta > 0, out, base)


def quat_to_rotmat(q):
    q = np.asarray(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q, dR):
    """Gradient of ``sum(dR * quat_to_rotmat(q))`` with respect to ``q``."""
    w, x, y, z = np.moveaxis(np.asarray(q), -1, 0)
    g = lambda i, j: dR[..., i, j]  # noqa: E731
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (
        y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1)
        - w * g(1, 2) + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2)
    )
    dy = 2 * (
        -2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0)
        + z * g(1, 2) - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2)
    )
    dz = 2 * (
        -2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0)
        - 2 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1)
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


def rotate_point(r, p):
    R = quat_to_rotmat(r)
    return np.einsum("...ij,...j->...i", R, p)


def rotate_point_vjp(r, p, dout):
    """Return ``(dr, dp)`` for ``rotate_point``; ``dr`` is the raw Euclidean gradient."""
    R = quat_to_rotmat(r)
    dR = dout[..., :, None] * p[..., None, :]
    dp = np.einsum("...ji,...j->...i", R, dout)
    return quat_to_rotmat_vjp(r, dR), dp


def tangent_basis(r):
    """Orthonormal tangent frame of S^3 at ``r``: rows ``r * (0, e_i)``, shape (..., 3, 4)."""
    r = np.asarray(r)
    eye = np.zeros((3, 4), dtype=r.dtype)
    eye[0, 1] = eye[1, 2] = eye[2, 3] = 1.0
    return hamilton(r[..., None, :], eye)


def project_to_tangent(r, g):
    return g - r * np.sum(g * r, axis=-1, keepdims=True)


def tangent_coords(r, g):
    """Coordinates of a 4-vector in the body-frame tangent basis at ``r``."""
    return np.einsum("...ij,...j->...i", tangent_basis(r), g)


def _covariance_factor(q, s):
    R = quat_to_rotmat(q)
    return R, R * s[..., None, :]


def covariance(q, s):
    """Unchecked ``R S S^T R^T``; ``q`` must be unit, ``s`` may have any sign."""
    _, M = _covariance_factor(q, s)
    return M @ np.swapaxes(M, -1, -2)


def covariance_vjp(q, s, dSigma):
    """Return ``(dq, ds)`` for ``covariance`` given the upstream ``dSigma``."""
    R, M = _covariance_factor(q, s)
    dM = (dSigma + np.swapaxes(dSigma, -1, -2)) @ M
    dR = dM * s[..., None, :]
    ds = np.sum(dM * R, axis=-2)
    return quat_to_rotmat_vjp(q, dR), ds


def build_covariance(q, s, return_grads=False):
    """Covariance from a unit quaternion and positive per-axis scales.

    With ``return_grads`` also returns the Jacobians ``dSigma/dq`` of shape
    (..., 3, 3, 4) and ``dSigma/ds`` of shape (..., 3, 3, 3).
    """
    q = np.asarray(q, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise NonPositiveScaleError("scales must be strictly positive")
    sigma = covariance(q, s)
    if not return_grads:
        return sigma
    batch = sigma.shape[:-2]
    dq = np.zeros(batch + (3, 3, 4))
    ds = np.zeros(batch + (3, 3, 3))
    for i in range(3):
        for j in range(3):
            seed = np.zeros(batch + (3, 3))
            seed[..., i, j] = 1.0
            # covariance_vjp symmetrizes its input, so seed both halves at half weight
            sym = 0.5 * (seed + np.swapaxes(seed, -1, -2))
            gq, gs = covariance_vjp(q, s, sym)
            dq[..., i, j, :] = gq
            ds[..., i, j, :] = gs
    return sigma, dq, ds


def _check_unit_directions(d):
    if np.any(np.abs(np.linalg.norm(d, axis=-1) - 1.0) > 1e-6):
        raise NonUnitDirectionError("direction must have unit length")


def sh_basis(d):
    """Real SH basis (degrees 0..3) for unit directions, shape (..., 16). Unchecked."""
    d = np.asarray(d)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(d.shape[:-1] + (SH_BASIS_COUNT,), dtype=d.dtype)
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * x * y
    out[..., 5] = SH_C2[1] * y * z
    out[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * x * z
    out[..., 8] = SH_C2[4] * (xx - yy)
    out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
    out[..., 10] = SH_C3[1] * x * y * z
    out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_jacobian(d):
    """Partial derivatives of each basis polynomial, shape (..., 16, 3)."""
    d = np.asarray(d)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    zero = np.zeros_like(x)
    c1, c2, c3 = SH_C1, SH_C2, SH_C3
    rows = [
        (zero, zero, zero),
        (zero, zero - c1, zero),
        (zero, zero, zero + c1),
        (zero - c1, zero, zero),
        (c2[0] * y, c2[0] * x, zero),
        (zero, c2[1] * z, c2[1] * y),
        (-2 * c2[2] * x, -2 * c2[2] * y, 4 * c2[2] * z),
        (c2[3] * z, zero, c2[3] * x),
        (2 * c2[4] * x, -2 * c2[4] * y, zero),
        (6 * c3[0] * x * y, c3[0] * (3 * xx - 3 * yy), zero),
        (c3[1] * y * z, c3[1] * x * z, c3[1] * x * y),
        (-2 * c3[2] * x * y, c3[2] * (4 * zz - xx - 3 * yy), 8 * c3[2] * y * z),
        (-6 * c3[3] * x * z, -6 * c3[3] * y * z, c3[3] * (6 * zz - 3 * xx - 3 * yy)),
        (c3[4] * (4 * zz - 3 * xx - yy), -2 * c3[4] * x * y, 8 * c3[4] * x * z),
        (2 * c3[5] * x * z, -2 * c3[5] * y * z, c3[5] * (xx - yy)),
        (c3[6] * (3 * xx - 3 * yy), -6 * c3[6] * x * y, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def sh_eval(direction):
    direction = np.asarray(direction, dtype=float)
    _check_unit_directions(direction)
    return sh_basis(direction)


def positional_encoding(x):
    """``[x, sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x), ...]``, width 63."""
    x = np.asarray(x)
    parts = [x]
    for level in range(PE_FREQUENCIES):
        w = (2.0**level) * np.pi
        parts.append(np.sin(w * x))
        parts.append(np.cos(w * x))
    return np.concatenate(parts, axis=-1)


def positional_encoding_vjp(x, dout):
    x = np.asarray(x)
    dx = dout[..., 0:3].copy()
    for level in range(PE_FREQUENCIES):
        w = (2.0**level) * np.pi
        off = 3 + 6 * level
        dx += w * np.cos(w * x) * dout[..., off : off + 3]
        dx -= w * np.sin(w * x) * dout[..., off + 3 : off + 6]
    return dx
