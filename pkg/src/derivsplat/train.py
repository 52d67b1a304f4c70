"""End-to-end training, evaluation, and resumable training state.

Randomness during training is stateless: the frame visited at iteration ``t``
and the density-control draws at step ``t`` are pure functions of
``(seed, t)``, so a run resumed from a checkpoint replays exactly.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, config_from_dict, dump_config
from .dataset import quantize
from .errors import ConfigError
from .gaussianset import DensifyConfig, GaussianSet, densify_and_prune
from .losses import psnr, ssim_metric, total_loss
from .model import AvatarModel
from .optimizer import AdamState, RiemannianAdamState, adam_step, k_scheduler, lr_exp_decay, riemannian_adam_step

METRICS_HEADER = "iter\tloss\tpsnr\tn_gaussians\tK"
EUCLID_GROUPS = ("positions", "rotations", "log_scales", "planes", "deform", "opacity_net", "color_net")


def frame_index(seed, it, n):
    """Frame visited at iteration ``it``: a fresh permutation of ``n`` frames per epoch."""
    epoch, pos = divmod(it, n)
    return int(np.random.default_rng([seed, 3, epoch]).permutation(n)[pos])


def _param_arrays(model):
    G = model.gaussians
    return {
        "positions": G.positions,
        "rotations": G.rotations,
        "log_scales": G.log_scales,
        "planes": model.triplane.planes,
        "deform": model.deform_net.params,
        "opacity_net": model.opacity_net.params,
        "color_net": model.color_net.params,
    }


def _group_lrs(cfg):
    lr = cfg.lr
    return {
        "positions": lr.position,
        "rotations": lr.rotation,
        "log_scales": lr.scale,
        "planes": lr.planes,
        "deform": lr.deform,
        "opacity_net": lr.opacity_net,
        "color_net": lr.color_net,
    }


@dataclass
class TrainState:
    model: AvatarModel
    cfg: TrainConfig
    adam: dict
    radam: RiemannianAdamState
    iteration: int = 0  # completed steps
    initial_count: int = 0
    grad_accum: np.ndarray = None
    grad_dir: np.ndarray = None
    vis_count: np.ndarray = None
    last_alpha: np.ndarray = None
    losses: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model, cfg):
        params = _param_arrays(model)
        adam = {k: AdamState.like(params[k], lr) for k, lr in _group_lrs(cfg).items()}
        radam = RiemannianAdamState.like(model.gaussians.derivation, cfg.lr.derivation, max(cfg.iterations, 1))
        st = cls(model, cfg, adam, radam, initial_count=model.gaussians.count)
        st.reset_accumulators()
        return st

    def reset_accumulators(self):
        M = self.model.gaussians.count
        self.grad_accum = np.zeros(M)
        self.grad_dir = np.zeros((M, 3))
        self.vis_count = np.zeros(M)
        if self.last_alpha is None or self.last_alpha.shape[0] != M:
            self.last_alpha = np.ones(M)

    def to_arrays(self):
        arrays = {"losses": np.asarray(self.losses, dtype=np.float64)}
        for k, s in self.adam.items():
            arrays[f"adam.{k}.m"], arrays[f"adam.{k}.v"] = s.m, s.v
        arrays["radam.m"], arrays["radam.v"] = self.radam.m, self.radam.v
        for k in ("grad_accum", "grad_dir", "vis_count", "last_alpha"):
            arrays[k] = getattr(self, k)
        return arrays

    def to_meta(self):
        return {
            "config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "initial_count": self.initial_count,
            "adam_steps": {k: s.step for k, s in self.adam.items()},
            "radam": {"step": self.radam.step, "lr": self.radam.lr, "total_steps": self.radam.total_steps},
            "metrics": self.metrics,
            "events": self.events,
        }

    def save(self, path):
        save_checkpoint(path, self.model, self.to_arrays(), self.to_meta())

    @classmethod
    def load(cls, path, cfg=None):
        """Restore a training state; ``cfg`` may override settings that only affect future steps."""
        model, arrays, meta = load_checkpoint(path)
        saved = config_from_dict(meta["config"])
        if cfg is None:
            cfg = saved
        else:
            for key in ("num_gaussians", "K", "k_scheduler", "plane_shape", "latent_dim", "deform_width",
                        "deform_depth", "scale_mode", "use_scale_offset", "seed", "iterations"):
                if getattr(cfg, key) != getattr(saved, key):
                    raise ConfigError(f"cannot change {key!r} when resuming")
        lrs = _group_lrs(cfg)
        adam = {}
        for k in EUCLID_GROUPS:
            adam[k] = AdamState(lrs[k], arrays[f"adam.{k}.m"], arrays[f"adam.{k}.v"], meta["adam_steps"][k])
        r = meta["radam"]
        radam = RiemannianAdamState(r["lr"], r["total_steps"], arrays["radam.m"], arrays["radam.v"], r["step"])
        st = cls(model, cfg, adam, radam, meta["iteration"], meta["initial_count"],
                 arrays["grad_accum"], arrays["grad_dir"], arrays["vis_count"], arrays["last_alpha"],
                 list(arrays["losses"]), list(meta["metrics"]), list(meta.get("events", [])))
        return st


class Trainer:
    """Runs the optimization loop over a loaded :class:`Dataset`."""

    def __init__(self, dataset, cfg=None, out_dir=None, state=None, snapshots=()):
        self.data = dataset
        self.cfg = cfg or (state.cfg if state else TrainConfig())
        self.out_dir = out_dir
        self.snapshots = set(snapshots)
        train = dataset.split("train")
        if not train:
            raise ConfigError("dataset has no training frames")
        self.train_frames = train
        self.train_images = [dataset.image(f) for f in train]
        self.train_masks = [dataset.mask(f) for f in train]
        test = dataset.split("test") or train
        self.test_frames = test
        self.test_images = [dataset.image(f) for f in test]
        # prune/split sizes are measured against the camera rig, as in the base splatting method
        self.extent = dataset.camera_extent("train")
        if state is None:
            cfg = self.cfg
            model = AvatarModel.create(
                cfg.num_gaussians, cfg.K, dataset.expression_dim, dataset.bbox, seed=cfg.seed,
                plane_shape=cfg.plane_shape, latent_dim=cfg.latent_dim, dtype=np.float32,
                scale_mode=cfg.scale_mode, use_scale_offset=cfg.use_scale_offset,
                background=cfg.background, deform_width=cfg.deform_width, deform_depth=cfg.deform_depth,
            )
            state = TrainState.fresh(model, cfg)
        self.state = state
        self.state.cfg = self.cfg
        if out_dir:
            os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
            dump_config(self.cfg, os.path.join(out_dir, "config.yaml"))

    @property
    def model(self):
        return self.state.model

    # one optimization step -------------------------------------------------
    def step(self):
        st, cfg, model = self.state, self.cfg, self.state.model
        it = st.iteration
        idx = frame_index(cfg.seed, it, len(self.train_frames))
        frame = self.train_frames[idx]
        out, fstate = model.forward(frame.e, frame.camera)
        loss, dimg = total_loss(out.image, self.train_images[idx], cfg.lambda_l1, cfg.lambda_dssim,
                                self.train_masks[idx])
        grads = model.backward(fstate, dimg)
        st.last_alpha = fstate.alpha.astype(np.float64)
        if not np.isfinite(loss):
            st.losses.append(float(loss))
            st.iteration += 1
            return float(loss)

        params = _param_arrays(model)
        lrs = {
            "positions": lr_exp_decay(cfg.lr.position, cfg.lr.position_final, it, cfg.iterations),
            "deform": lr_exp_decay(cfg.lr.deform, cfg.lr.deform_final, it, cfg.iterations),
        }
        gmap = {
            "positions": grads.positions, "rotations": grads.rotations, "log_scales": grads.log_scales,
            "planes": grads.planes, "deform": grads.deform, "opacity_net": grads.opacity_net,
            "color_net": grads.color_net,
        }
        for k in EUCLID_GROUPS:
            if k == "deform" and it < cfg.deform_warmup:
                continue
            adam_step(st.adam[k], params[k], gmap[k].astype(params[k].dtype, copy=False), lrs.get(k))
        G = model.gaussians
        G.rotations /= np.linalg.norm(G.rotations, axis=1, keepdims=True)
        G.derivation = riemannian_adam_step(st.radam, G.derivation, grads.derivation)

        step = it + 1
        if step > cfg.densify_from:
            W, H = frame.camera.width, frame.camera.height
            g2 = grads.mean2d * np.array([W / 2.0, H / 2.0])
            st.grad_accum += np.linalg.norm(g2, axis=1) * grads.visible
            st.grad_dir += grads.positions
            st.vis_count += grads.visible
        if step > cfg.densify_from and step % cfg.densify_interval == 0 and step < cfg.iterations:
            self.densify(step)

        st.losses.append(float(loss))
        st.iteration = step
        return float(loss)

    def densify(self, step):
        st, cfg = self.state, self.cfg
        G = st.model.gaussians
        avg = st.grad_accum / np.maximum(st.vis_count, 1.0)
        dcfg = DensifyConfig(cfg.grad_threshold, cfg.percent_dense, cfg.min_opacity, cfg.max_scale_frac,
                             2, cfg.split_divisor, cfg.child_init)
        rng = np.random.default_rng([cfg.seed, 5, step])
        res = densify_and_prune(G, avg, st.last_alpha, self.extent, dcfg, rng, grad_dir=st.grad_dir)
        for k in ("positions", "rotations", "log_scales"):
            st.adam[k].remap(res.source, res.is_new)
        st.radam.remap(res.source, res.is_new)
        new_G = res.gaussians
        if cfg.k_scheduler:
            L = st.model.triplane.shape[2]
            K_new = k_scheduler(new_G.count, st.initial_count, L, cfg.k_scheduler_t)
            if K_new != new_G.K:
                pick = (np.arange(K_new) * new_G.K) // K_new
                new_G = GaussianSet(new_G.positions, new_G.rotations, new_G.log_scales,
                                    new_G.derivation[:, pick].copy(), new_G.scale_mode)
                st.radam.m = st.radam.m[:, pick].copy()
                st.radam.v = st.radam.v[:, pick].copy()
        st.model.set_gaussians(new_G)
        st.last_alpha = res.opacities.astype(np.float64)
        st.events.append({"step": step, "cloned": res.n_cloned, "split": res.n_split,
                          "pruned": res.n_pruned, "count": new_G.count, "K": new_G.K})
        st.reset_accumulators()

    # evaluation and logging -------------------------------------------------
    def heldout_psnr(self):
        f = self.test_frames[0]
        return psnr(self.model.render(f.e, f.camera).image, self.test_images[0])

    def log_line(self):
        st = self.state
        recent = st.losses[-self.cfg.log_interval:]
        line = "%d\t%.6f\t%.4f\t%d\t%d" % (
            st.iteration - 1, float(np.mean(recent)), self.heldout_psnr(),
            st.model.gaussians.count, st.model.gaussians.K,
        )
        st.metrics.append(line)
        return line

    def write_metrics(self):
        if not self.out_dir:
            return None
        path = os.path.join(self.out_dir, "metrics.tsv")
        with open(path, "w") as fh:
            fh.write("\n".join([METRICS_HEADER] + self.state.metrics) + "\n")
        np.save(os.path.join(self.out_dir, "loss_history.npy"), np.asarray(self.state.losses))
        return path

    def checkpoint_path(self, iteration):
        return os.path.join(self.out_dir, "checkpoints", f"ckpt_{iteration:06d}.gshd")

    def run(self, until=None, stop_on_nonfinite=True):
        """Train until ``until`` completed steps (default: the configured total)."""
        cfg, st = self.cfg, self.state
        until = cfg.iterations if until is None else min(until, cfg.iterations)
        while st.iteration < until:
            loss = self.step()
            done = st.iteration
            if (done - 1) % cfg.log_interval == 0 or done == cfg.iterations:
                self.log_line()
            if self.out_dir and (done % cfg.checkpoint_interval == 0 or done in self.snapshots):
                st.save(self.checkpoint_path(done))
            if stop_on_nonfinite and not np.isfinite(loss):
                st.events.append({"step": done, "diverged": True})
                self.log_line()
                break
        if self.out_dir:
            self.write_metrics()
            st.save(os.path.join(self.out_dir, "final.gshd"))
        return st

    @classmethod
    def resume(cls, checkpoint, dataset, cfg=None, out_dir=None, snapshots=()):
        state = TrainState.load(checkpoint, cfg)
        return cls(dataset, state.cfg, out_dir, state, snapshots)


def train(dataset, cfg, out_dir=None, snapshots=()):
    trainer = Trainer(dataset, cfg, out_dir, snapshots=snapshots)
    trainer.run()
    return trainer


@dataclass
class EvalRow:
    frame: str
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    split: str
    rows: list

    @property
    def mean_psnr(self):
        return float(np.mean([r.psnr for r in self.rows]))

    @property
    def mean_ssim(self):
        return float(np.mean([r.ssim for r in self.rows]))


def evaluate(dataset, render_fn, split="test"):
    """Score 8-bit renders of every frame in ``split``; ``render_fn(frame)`` returns an RGB image."""
    rows = []
    for f in dataset.split(split):
        img = quantize(render_fn(f)).astype(np.float64) / 255.0
        ref = dataset.image(f).astype(np.float64)
        rows.append(EvalRow(f.image, psnr(img, ref), ssim_metric(img, ref)))
    return EvalReport(split, rows)


def model_renderer(model):
    return lambda f: model.render(f.e, f.camera).image


def ground_truth_renderer(gt):
    return lambda f: gt.render(f.e, f.camera).image
