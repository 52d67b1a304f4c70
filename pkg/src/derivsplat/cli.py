"""Command-line interface.

Every subcommand prints tab-separated tables on stdout and, when ``--out`` is
given, writes matplotlib figures and data files into that directory.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import os
import sys

import numpy as np
import yaml

from .errors import ConfigError, DerivSplatError

VGG_NOTICE = "note: the perceptual (VGG) loss term is disabled; training uses 0.8*L1 + 0.2*D-SSIM"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("resolutions must be positive")
    return vals


def _floats(n):
    def parse(text):
        try:
            vals = [float(v) for v in text.split(",")]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers")
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers")
        return vals
    return parse


def _print_table(header, rows, out=None):
    out = out or sys.stdout
    print("\t".join(header), file=out)
    for r in rows:
        print("\t".join(_fmt(v) for v in r), file=out)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _out_dir(args):
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    return args.out


def _train_config(args):
    from .config import TrainConfig, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        changes["iterations"] = args.iterations
    if getattr(args, "K", None) is not None:
        changes["K"] = args.K
    return cfg.replace(**changes) if changes else cfg


# subcommands -----------------------------------------------------------------

def cmd_generate(args):
    from dataclasses import fields

    from .dataset import SyntheticSceneSpec, generate_synthetic

    spec_kw = {}
    if args.config:
        with open(args.config) as fh:
            spec_kw = yaml.safe_load(fh) or {}
        unknown = set(spec_kw) - {f.name for f in fields(SyntheticSceneSpec)}
        if unknown:
            raise ConfigError(f"unknown synthetic-scene key(s): {', '.join(sorted(unknown))}")
    if args.seed is not None:
        spec_kw["seed"] = args.seed
    try:
        spec = SyntheticSceneSpec(**spec_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    path = generate_synthetic(spec, args.out)
    _print_table(["manifest", "train_frames", "test_frames", "expression_dim"],
                 [[path, spec.num_train, spec.num_test, spec.expression_dim]])
    return 0


def cmd_train(args):
    from .dataset import load_manifest
    from .plotting import plot_training_curves
    from .train import Trainer

    print(VGG_NOTICE, file=sys.stderr)
    data = load_manifest(args.data)
    if args.resume:
        cfg = _train_config(args) if (args.config or args.seed is not None or args.iterations is not None) else None
        trainer = Trainer.resume(args.resume, data, cfg, args.out)
    else:
        trainer = Trainer(data, _train_config(args), args.out)
    printed = len(trainer.state.metrics)
    print("iter\tloss\tpsnr\tn_gaussians\tK")
    for line in trainer.state.metrics:
        print(line)
    st = trainer.state
    while st.iteration < trainer.cfg.iterations:
        trainer.run(until=st.iteration + trainer.cfg.log_interval)
        for line in st.metrics[printed:]:
            print(line, flush=True)
        printed = len(st.metrics)
        if st.losses and not np.isfinite(st.losses[-1]):
            break
    if args.out:
        rows = [[float(v) for v in line.split("\t")] for line in st.metrics]
        plot_training_curves(st.losses, rows, os.path.join(args.out, "training_curves.png"))
    return 0


def _load_frame(data, split, index):
    frames = data.split(split)
    if not frames:
        raise UsageError(f"dataset has no '{split}' frames")
    if not 0 <= index < len(frames):
        raise UsageError(f"frame index {index} out of range for {len(frames)} '{split}' frames")
    return frames[index]


def cmd_render(args):
    from .checkpoint import load_checkpoint
    from .dataset import load_manifest, write_depth, write_image
    from .plotting import plot_render

    data = load_manifest(args.data)
    model, _, _ = load_checkpoint(args.checkpoint)
    frame = _load_frame(data, args.split, args.frame)
    out = model.render(frame.e, frame.camera)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_image(args.out, out.image)
    rows = [["image", args.out]]
    depth = None
    if args.depth:
        depth = out.depth_map()
        dpath = os.path.splitext(args.out)[0] + "_depth.png"
        top = write_depth(dpath, depth)
        rows.append(["depth", dpath])
        rows.append(["depth_max", float(top)])
    fig = os.path.splitext(args.out)[0] + "_panel.png"
    plot_render(out.image, data.image(frame), fig, depth)
    rows.append(["figure", fig])
    _print_table(["output", "value"], rows)
    return 0


def cmd_evaluate(args):
    from .checkpoint import load_checkpoint
    from .dataset import GROUND_TRUTH_NAME, GroundTruth, load_manifest
    from .plotting import plot_eval
    from .train import evaluate, ground_truth_renderer, model_renderer

    data = load_manifest(args.data)
    if args.ground_truth:
        renderer = ground_truth_renderer(GroundTruth.load(os.path.join(data.root, GROUND_TRUTH_NAME)))
    elif args.checkpoint:
        renderer = model_renderer(load_checkpoint(args.checkpoint)[0])
    else:
        raise UsageError("evaluate needs --checkpoint or --ground-truth")
    report = evaluate(data, renderer, args.split)
    _print_table(["frame", "psnr", "ssim"], [[r.frame, r.psnr, r.ssim] for r in report.rows])
    _print_table(["mean", "psnr", "ssim"], [[args.split, report.mean_psnr, report.mean_ssim]])
    out = _out_dir(args)
    if out:
        plot_eval(report, os.path.join(out, "evaluation.png"))
    return 0


def cmd_dilution(args):
    from .gaussianset import random_unit_quaternions
    from .plotting import plot_dilution
    from .triplane import dilution_stats

    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    n = args.points
    if args.case == "cluster":
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = np.asarray(args.center) + args.radius * d * rng.random((n, 1)) ** (1 / 3)
    else:
        pts = np.zeros((n, 3))
        pts[:, :2] = args.center[:2]
        pts[:, 2] = np.linspace(-0.9, 0.9, n)
    r = random_unit_quaternions(rng, (n, args.K))
    res = (args.resolution, args.resolution)
    reports = {"axis_aligned": dilution_stats(pts, res, "axis_aligned"),
               "derived": dilution_stats(pts, res, "derived", r)}
    rows = []
    for plane in reports["axis_aligned"]:
        for mode in ("axis_aligned", "derived"):
            rep = reports[mode][plane]
            rows.append([plane, mode, rep.occupied_cell_fraction, rep.mean_points_per_occupied_cell,
                         rep.perpendicular_collision_count])
    _print_table(["plane", "mode", "occupied_cell_fraction", "mean_points_per_cell", "collisions"], rows)
    out = _out_dir(args)
    if out:
        plot_dilution(reports, os.path.join(out, "dilution.png"))
    return 0


def model_size_rows(cfg, resolutions, expr_dim=8):
    """Parameter counts of the whole model for a single plane size vs a plane pyramid."""
    from .diffnet import build_color_net, build_deformation_net, build_opacity_net
    from .triplane import plane_param_count

    H, W, L = cfg.plane_shape
    nets = (build_deformation_net(expr_dim, width=cfg.deform_width, depth=cfg.deform_depth).param_count
            + build_opacity_net(L, cfg.latent_dim).param_count + build_color_net(cfg.latent_dim).param_count)
    gauss = cfg.num_gaussians * (3 + 4 + 3 + 4 * cfg.K)
    single = 3 * H * W * L
    multi = plane_param_count(resolutions, L)
    return single, multi, nets, gauss


def cmd_param_count(args):
    from .config import TrainConfig, load_config
    from .plotting import plot_param_counts

    cfg = load_config(args.config) if args.config else TrainConfig(num_gaussians=10000)
    single, multi, nets, gauss = model_size_rows(cfg, args.multires)
    H, W, L = cfg.plane_shape
    mb = lambda n: n * 4 / 2**20  # noqa: E731
    rows = [
        [f"single-res {H}x{W}x{L}", single, single + nets + gauss, mb(single + nets + gauss)],
        ["multi-res " + "/".join(map(str, args.multires)), multi, multi + nets + gauss, mb(multi + nets + gauss)],
    ]
    _print_table(["configuration", "plane_params", "model_params", "model_MB_f32"], rows)
    _print_table(["ratio", "plane_params"], [["multi/single", multi / single]])
    out = _out_dir(args)
    if out:
        plot_param_counts([("single-res", single), ("multi-res", multi)], os.path.join(out, "param_count.png"))
    return 0


def build_parser():
    p = _Parser(prog="derivsplat", description="Deformable Gaussian avatars with derived tri-plane features.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="YAML file with configuration overrides")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="output directory or file")

    g = sub.add_parser("generate-synthetic", help="render a synthetic dynamic dataset")
    common(g, out_required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.add_argument("--iterations", type=int)
    t.add_argument("--K", type=int, help="doppelganger count")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one frame from a checkpoint")
    common(r, out_required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--split", default="test")
    r.add_argument("--depth", action="store_true", help="also write a 16-bit depth map")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("evaluate", help="PSNR/SSIM of a checkpoint on a split")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--ground-truth", action="store_true", help="score the hidden synthetic ground truth")
    e.add_argument("--split", default="test")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("analyze-dilution", help="tri-plane cell occupancy, axis-aligned vs derived")
    common(d)
    d.add_argument("--points", type=int, default=1000)
    d.add_argument("--case", choices=("cluster", "line"), default="cluster")
    d.add_argument("--radius", type=float, default=0.1)
    d.add_argument("--center", type=_floats(3), default=[0.4, -0.3, 0.5])
    d.add_argument("--resolution", type=int, default=64)
    d.add_argument("--K", type=int, default=1)
    d.set_defaults(func=cmd_dilution)

    c = sub.add_parser("param-count", help="model size, single vs multi-resolution planes")
    common(c)
    c.add_argument("--multires", type=_int_list, default=[64, 128, 256, 512])
    c.set_defaults(func=cmd_param_count)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("missing subcommand; see --help")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DerivSplatError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
