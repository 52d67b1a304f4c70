"""The full avatar model: deformation, tri-plane appearance, decoders and splatting.

``AvatarModel.forward`` renders one frame and keeps every intermediate needed
by ``AvatarModel.backward``, which returns gradients for all parameter groups.
"""

from dataclasses import dataclass

import numpy as np

from .diffnet import build_color_net, build_deformation_net, build_opacity_net, net_backward, net_forward
from .gaussianset import GaussianSet, apply_deformation, deformation_backward, init_gaussians
from .splatter import colors_from_sh, colors_from_sh_vjp, render, render_backward
from .triplane import (
    TriPlane,
    fuse_feature,
    fuse_feature_backward,
    init_triplane,
    normalize_position,
    normalize_position_vjp,
)

WHITE = (1.0, 1.0, 1.0)


@dataclass
class ModelGrads:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    derivation: np.ndarray  # tangent-projected
    planes: np.ndarray
    deform: np.ndarray
    opacity_net: np.ndarray
    color_net: np.ndarray
    mean2d: np.ndarray  # screen-space, for density control
    visible: np.ndarray


@dataclass
class ForwardState:
    e: np.ndarray
    cam: object
    posed: object
    deform_cache: object
    x_norm: np.ndarray
    fuse_cache: object
    feature: np.ndarray
    opacity_cache: object
    alpha: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    color_cache: object
    sh: np.ndarray
    rgb: np.ndarray
    render_ctx: object


class AvatarModel:
    """Trainable parameters plus the networks that decode them."""

    def __init__(self, gaussians, triplane, deform_net, opacity_net, color_net,
                 background=WHITE, use_scale_offset=True):
        self.gaussians = gaussians
        self.triplane = triplane
        self.deform_net = deform_net
        self.opacity_net = opacity_net
        self.color_net = color_net
        self.background = np.asarray(background, dtype=np.float64)
        self.use_scale_offset = use_scale_offset

    @classmethod
    def create(cls, num_gaussians, K, expr_dim, box, seed=0, plane_shape=(64, 64, 32), latent_dim=32,
               dtype=np.float32, scale_mode="log", use_scale_offset=True, background=WHITE,
               deform_width=256, deform_depth=8):
        H, W, L = plane_shape
        # checkpoints store the box as f32, so keep it exactly representable
        box = tuple(np.asarray(b, dtype=np.float32).astype(np.float64) for b in box)
        seeds = np.random.SeedSequence(seed).generate_state(5)
        G = init_gaussians(num_gaussians, K, box, int(seeds[0]), L=L, dtype=dtype, scale_mode=scale_mode)
        tp = init_triplane(H, W, L, box=box, seed=int(seeds[1]), dtype=dtype)
        deform = build_deformation_net(expr_dim, seed=int(seeds[2]), dtype=dtype,
                                       width=deform_width, depth=deform_depth)
        opacity = build_opacity_net(L, latent_dim, seed=int(seeds[3]), dtype=dtype)
        color = build_color_net(latent_dim, seed=int(seeds[4]), dtype=dtype)
        return cls(G, tp, deform, opacity, color, background, use_scale_offset)

    @property
    def box(self):
        return (self.triplane.box_lo, self.triplane.box_hi)

    @property
    def dtype(self):
        return self.gaussians.positions.dtype

    def forward(self, e, cam):
        e = np.atleast_1d(np.asarray(e, dtype=self.dtype))
        G = self.gaussians
        posed, dcache = apply_deformation(G, self.deform_net, e, self.use_scale_offset)
        x_norm = normalize_position(posed.positions, self.box)
        feature, fcache = fuse_feature(self.triplane, x_norm, G.derivation, return_cache=True)
        op_out, ocache = net_forward(self.opacity_net, feature)
        alpha = op_out["alpha"][:, 0]
        vec = posed.positions - cam.center.astype(self.dtype)
        dist = np.linalg.norm(vec, axis=1, keepdims=True)
        dirs = vec / dist
        col_out, ccache = net_forward(self.color_net, np.concatenate([op_out["z"], dirs], axis=1))
        sh = col_out["sh"]
        rgb = colors_from_sh(sh, dirs)
        out, rctx = render(posed.positions, posed.rotations, posed.scales, alpha, rgb, cam, self.background)
        state = ForwardState(e, cam, posed, dcache, x_norm, fcache, feature, ocache, alpha, dirs, dist,
                             ccache, sh, rgb, rctx)
        return out, state

    def render(self, e, cam):
        return self.forward(e, cam)[0]

    def backward(self, state, dimage):
        G = self.gaussians
        rg = render_backward(state.render_ctx, dimage)
        dsh, ddir = colors_from_sh_vjp(state.sh, state.dirs, rg["colors"])
        dcolor, dcin = net_backward(self.color_net, state.color_cache, {"sh": dsh})
        latent = dcin.shape[1] - 3
        ddir = ddir + dcin[:, latent:]
        dvec = (ddir - state.dirs * np.sum(state.dirs * ddir, axis=1, keepdims=True)) / state.dist
        dopac, dfeat = net_backward(
            self.opacity_net, state.opacity_cache,
            {"alpha": rg["opacities"][:, None], "z": dcin[:, :latent]},
        )
        dplanes, dxn, dr = fuse_feature_backward(self.triplane, state.fuse_cache, dfeat)
        dposed = rg["positions"] + dvec + normalize_position_vjp(state.posed.positions, self.box, dxn)
        dx, dq, ds, ddeform = deformation_backward(
            G, self.deform_net, state.deform_cache, dposed, rg["rotations"], rg["scales"]
        )
        visible = np.zeros(G.count, dtype=bool)
        visible[state.render_ctx.proj.ids] = True
        return ModelGrads(dx, dq, ds, dr, dplanes, ddeform, dopac, dcolor, rg["mean2d"], visible)

    def set_gaussians(self, G: GaussianSet):
        self.gaussians = G

    def set_triplane(self, tp: TriPlane):
        self.triplane = tp
