"""Canonical Gaussian storage, expression-driven deformation, and density control."""

from dataclasses import dataclass, field

import numpy as np

from .diffnet import net_backward, net_forward
from .errors import BadDoppelgangerCountError, WidthMismatchError
from .quatgeom import (
    positional_encoding,
    positional_encoding_vjp,
    quat_normalize,
    quat_normalize_vjp,
    quat_to_rotmat,
)

ADMISSIBLE_K = (1, 2, 4, 8, 16)


@dataclass
class GaussianSet:
    """Canonical Gaussians.

    ``log_scales`` holds log scales when ``scale_mode == "log"``. The
    ``"linear"`` mode stores scales directly in the same array; it exists only
    to reproduce the unguarded-scale ablation.
    """

    positions: np.ndarray  # (M, 3)
    rotations: np.ndarray  # (M, 4) unit
    log_scales: np.ndarray  # (M, 3)
    derivation: np.ndarray  # (M, K, 4) unit
    scale_mode: str = "log"

    @property
    def count(self):
        return self.positions.shape[0]

    @property
    def K(self):
        return self.derivation.shape[1]

    def scales(self):
        if self.scale_mode == "log":
            return np.exp(self.log_scales)
        return self.log_scales

    def copy(self):
        return GaussianSet(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.derivation.copy(),
            self.scale_mode,
        )


@dataclass
class PosedGaussians:
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    origin: GaussianSet = field(repr=False, default=None)

    @property
    def count(self):
        return self.positions.shape[0]


@dataclass
class DeformCache:
    net_cache: object
    x: np.ndarray
    q_sum: np.ndarray  # q + dq before normalization
    scales: np.ndarray
    use_scale_offset: bool


def check_doppelganger_count(K, L):
    if K not in ADMISSIBLE_K or L % K != 0:
        raise BadDoppelgangerCountError(f"K={K} must be one of {ADMISSIBLE_K} and divide L={L}")


def random_unit_quaternions(rng, shape, dtype=np.float64):
    """Uniform samples on S^3 via normalized 4-D Gaussians."""
    g = rng.standard_normal(tuple(shape) + (4,))
    return (g / np.linalg.norm(g, axis=-1, keepdims=True)).astype(dtype)


def init_gaussians(M, K, bbox, seed, L=32, dtype=np.float64, scale_mode="log", scale_frac=0.01):
    check_doppelganger_count(K, L)
    if M < 1:
        raise ValueError("M must be >= 1")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    rng = np.random.default_rng(seed)
    positions = rng.uniform(lo, hi, size=(M, 3))
    rotations = np.zeros((M, 4))
    rotations[:, 0] = 1.0
    s0 = scale_frac * np.linalg.norm(hi - lo)
    scales = np.full((M, 3), np.log(s0) if scale_mode == "log" else s0)
    derivation = random_unit_quaternions(rng, (M, K))
    return GaussianSet(
        positions.astype(dtype),
        rotations.astype(dtype),
        scales.astype(dtype),
        derivation.astype(dtype),
        scale_mode,
    )


def deformation_input(x, e):
    e = np.broadcast_to(np.asarray(e, dtype=x.dtype), (x.shape[0], len(e)))
    return np.concatenate([positional_encoding(x), e], axis=1)


def apply_deformation(G, net, e, use_scale_offset=True):
    """Pose the canonical set with the offsets predicted for expression ``e``."""
    e = np.atleast_1d(np.asarray(e, dtype=net.dtype))
    if net.input_width != 63 + e.shape[0]:
        raise WidthMismatchError(
            f"deformation net expects {net.input_width - 63} expression dims, got {e.shape[0]}"
        )
    out, ncache = net_forward(net, deformation_input(G.positions, e))
    x = G.positions + out["dx"]
    q_sum = G.rotations + out["dq"]
    q = quat_normalize(q_sum)
    raw = G.log_scales + out["ds"] if use_scale_offset else G.log_scales
    s = np.exp(raw) if G.scale_mode == "log" else raw
    cache = DeformCache(ncache, G.positions, q_sum, s, use_scale_offset)
    return PosedGaussians(x, q, s, G), cache


def deformation_backward(G, net, cache, d_pos, d_rot, d_scale):
    """Gradients of the posed attributes pulled back to ``(dx, dq, ds_param, dnet)``."""
    dq_sum = quat_normalize_vjp(cache.q_sum, d_rot)
    d_raw = d_scale * cache.scales if G.scale_mode == "log" else d_scale
    d_heads = {"dx": d_pos, "dq": dq_sum, "ds": d_raw if cache.use_scale_offset else None}
    dnet, dinput = net_backward(net, cache.net_cache, d_heads)
    dx = d_pos + positional_encoding_vjp(cache.x, dinput[:, :63])
    return dx, dq_sum, d_raw, dnet


def scene_extent(G):
    """Radius about the centroid enclosing every position (rotation invariant)."""
    p = np.asarray(G.positions if isinstance(G, (GaussianSet, PosedGaussians)) else G, dtype=np.float64)
    c = p.mean(axis=0)
    return float(np.max(np.linalg.norm(p - c, axis=1)))


@dataclass
class DensifyConfig:
    grad_threshold: float = 0.0002
    percent_dense: float = 0.01
    min_opacity: float = 0.0002
    max_scale_frac: float = 0.01
    split_children: int = 2
    split_divisor: float = 1.6
    child_init: str = "inherit"  # inherit | random | zero


@dataclass
class DensifyResult:
    """Outcome of one density-control pass.

    ``source`` maps each output row to the input row it was derived from;
    ``is_new`` flags rows created by cloning or splitting.
    """

    gaussians: GaussianSet
    source: np.ndarray
    is_new: np.ndarray
    opacities: np.ndarray
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0


def _child_derivation(parent_r, mode, rng):
    if mode == "inherit":
        return parent_r.copy()
    if mode == "random":
        return random_unit_quaternions(rng, parent_r.shape[:-1], parent_r.dtype)
    if mode == "zero":
        out = np.zeros_like(parent_r)
        out[..., 0] = 1.0
        return out
    raise ValueError(f"unknown child_init {mode!r}")


def densify_and_prune(G, grad_accum, opacities, scene_extent, cfg=None, rng=None, grad_dir=None):
    """Clone small high-gradient Gaussians, split large ones, then prune.

    ``grad_dir`` (optional, (M, 3)) is the accumulated positional gradient;
    when given, clones are moved by their largest scale against it.
    """
    cfg = cfg or DensifyConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    M = G.count
    grad_accum = np.asarray(grad_accum, dtype=np.float64)
    opacities = np.asarray(opacities, dtype=np.float64).reshape(M)
    scales = np.abs(G.scales())
    max_scale = scales.max(axis=1)

    hot = grad_accum >= cfg.grad_threshold
    clone = hot & (max_scale <= cfg.percent_dense * scene_extent)
    split = hot & (max_scale > cfg.percent_dense * scene_extent)

    blocks_x, blocks_q, blocks_s, blocks_r = [G.positions], [G.rotations], [G.log_scales], [G.derivation]
    src = [np.arange(M)]
    new = [np.zeros(M, dtype=bool)]

    idx = np.flatnonzero(clone)
    if idx.size:
        x = G.positions[idx].copy()
        if grad_dir is not None:
            g = np.asarray(grad_dir, dtype=np.float64)[idx]
            n = np.linalg.norm(g, axis=1, keepdims=True)
            step = np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0) * max_scale[idx, None]
            x = (x - step).astype(x.dtype)
        blocks_x.append(x)
        blocks_q.append(G.rotations[idx].copy())
        blocks_s.append(G.log_scales[idx].copy())
        blocks_r.append(_child_derivation(G.derivation[idx], cfg.child_init, rng))
        src.append(idx)
        new.append(np.ones(idx.size, dtype=bool))

    idx = np.flatnonzero(split)
    if idx.size:
        n_child = cfg.split_children
        rep = np.repeat(idx, n_child)
        R = quat_to_rotmat(G.rotations[rep].astype(np.float64))
        offsets = np.einsum("nij,nj->ni", R, scales[rep] * rng.standard_normal((rep.size, 3)))
        blocks_x.append((G.positions[rep] + offsets).astype(G.positions.dtype))
        blocks_q.append(G.rotations[rep].copy())
        if G.scale_mode == "log":
            child_s = G.log_scales[rep] - np.log(cfg.split_divisor)
        else:
            child_s = G.log_scales[rep] / cfg.split_divisor
        blocks_s.append(child_s.astype(G.log_scales.dtype))
        blocks_r.append(_child_derivation(G.derivation[rep], cfg.child_init, rng))
        src.append(rep)
        new.append(np.ones(rep.size, dtype=bool))

    out = GaussianSet(
        np.concatenate(blocks_x),
        np.concatenate(blocks_q),
        np.concatenate(blocks_s),
        np.concatenate(blocks_r),
        G.scale_mode,
    )
    source = np.concatenate(src)
    is_new = np.concatenate(new)
    alphas = opacities[source]

    keep = ~np.concatenate([split, np.zeros(source.size - M, dtype=bool)])
    out_max = np.abs(out.scales()).max(axis=1)
    keep &= alphas >= cfg.min_opacity
    keep &= out_max <= cfg.max_scale_frac * scene_extent
    n_pruned = int(np.count_nonzero(~keep)) - int(np.count_nonzero(split))

    out = GaussianSet(
        out.positions[keep],
        out.rotations[keep],
        out.log_scales[keep],
        out.derivation[keep],
        G.scale_mode,
    )
    return DensifyResult(
        out,
        source[keep],
        is_new[keep],
        alphas[keep],
        n_cloned=int(clone.sum()),
        n_split=int(split.sum()),
        n_pruned=n_pruned,
    )
