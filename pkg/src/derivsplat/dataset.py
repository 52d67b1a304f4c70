"""Dataset manifests, image I/O, and the synthetic dynamic-scene generator.

A dataset directory holds ``manifest.json`` plus lossless 8-bit PNG frames and
masks. Synthetic sets also carry ``ground_truth.npz`` with the hidden
Gaussians and displacement basis used to render them.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DatasetIOError
from .gaussianset import random_unit_quaternions
from .splatter import Camera, look_at, render

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
GROUND_TRUTH_NAME = "ground_truth.npz"


@dataclass
class FrameRecord:
    image: str
    e: np.ndarray
    camera: Camera
    mask: str = None
    split: str = "train"


@dataclass
class Dataset:
    root: str
    expression_dim: int
    frames: list
    bbox: tuple

    def split(self, name):
        return [f for f in self.frames if f.split == name]

    def path(self, rel):
        return os.path.join(self.root, rel)

    def image(self, frame):
        return read_image(self.path(frame.image))

    def mask(self, frame):
        return None if frame.mask is None else read_mask(self.path(frame.mask))

    def camera_extent(self, split="train"):
        """Reference scene size for density control: 1.1 x the radius of the camera centres."""
        centers = np.array([f.camera.center for f in self.split(split)])
        radius = float(1.1 * np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
        if radius <= 0.0:
            # a single viewpoint: fall back to the scene box half-diagonal
            radius = 0.5 * float(np.linalg.norm(self.bbox[1] - self.bbox[0]))
        return radius


def quantize(img):
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img):
    try:
        Image.fromarray(quantize(img), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def read_image(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise DatasetIOError(f"cannot read image {path}: {exc}") from exc
    return arr / np.float32(255.0)


def write_mask(path, mask):
    try:
        Image.fromarray(np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def read_mask(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float32) / np.float32(255.0)
    except OSError as exc:
        raise DatasetIOError(f"cannot read mask {path}: {exc}") from exc


def write_depth(path, depth, max_depth=None):
    """Single-channel 16-bit PNG; depth is scaled so ``max_depth`` maps to 65535."""
    depth = np.asarray(depth, dtype=np.float64)
    top = max_depth or max(float(depth.max()), 1e-9)
    q = np.round(np.clip(depth / top, 0.0, 1.0) * 65535.0).astype(np.uint16)
    try:
        Image.fromarray(q).save(path, format="PNG")
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc
    return top


def write_manifest(root, expression_dim, frames, bbox):
    doc = {
        "format_version": FORMAT_VERSION,
        "expression_dim": int(expression_dim),
        "scene_bbox": [list(map(float, bbox[0])), list(map(float, bbox[1]))],
        "frames": [
            {
                "image": f.image,
                "mask": f.mask,
                "e": [float(v) for v in f.e],
                "camera": f.camera.to_dict(),
                "split": f.split,
            }
            for f in frames
        ],
    }
    path = os.path.join(root, MANIFEST_NAME)
    try:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
    except OSError as exc:
        raise DatasetIOError(f"cannot write manifest {path}: {exc}") from exc
    return path


def load_manifest(path):
    """Read and validate a manifest; ``path`` may be the file or its directory."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetIOError(f"cannot read manifest {path}: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise DatasetIOError(f"unsupported manifest format_version {doc.get('format_version')!r}")
    E = int(doc["expression_dim"])
    frames = []
    for i, fr in enumerate(doc["frames"]):
        e = np.asarray(fr["e"], dtype=np.float64)
        if e.shape != (E,):
            raise DatasetIOError(f"frame {i}: expression vector has length {e.size}, expected {E}")
        frames.append(FrameRecord(fr["image"], e, Camera.from_dict(fr["camera"]), fr.get("mask"),
                                  fr.get("split", "train")))
    bbox = doc.get("scene_bbox", [[-1.0] * 3, [1.0] * 3])
    return Dataset(os.path.dirname(os.path.abspath(path)), E, frames,
                   (np.asarray(bbox[0], dtype=np.float64), np.asarray(bbox[1], dtype=np.float64)))


@dataclass
class SyntheticSceneSpec:
    num_gaussians: int = 1500
    expression_dim: int = 8
    amplitude: float = 0.06
    num_train: int = 120
    num_test: int = 30
    image_size: int = 64
    focal: float = 112.0
    orbit_radius: float = 3.0
    max_azimuth_deg: float = 60.0
    max_elevation_deg: float = 20.0
    blob_radius: float = 0.5
    bbox_half: float = 0.8
    seed: int = 0
    background: tuple = (1.0, 1.0, 1.0)
    constant_expression: bool = False  # every frame uses e = 0


@dataclass
class GroundTruth:
    """Hidden scene: static Gaussians displaced by ``amplitude * sum_k e_k d_k(x)``."""

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    basis_dirs: np.ndarray  # (E, 3)
    basis_waves: np.ndarray  # (E, 3)
    basis_phases: np.ndarray  # (E,)
    amplitude: float
    background: np.ndarray = field(default_factory=lambda: np.ones(3))

    def displacement(self, e):
        e = np.asarray(e, dtype=np.float64)
        waves = np.sin(self.positions @ self.basis_waves.T + self.basis_phases)  # (N, E)
        return self.amplitude * (waves * e) @ self.basis_dirs

    def render(self, e, cam):
        x = self.positions + self.displacement(e)
        out, _ = render(x, self.rotations, self.scales, self.opacities, self.colors, cam, self.background)
        return out

    def save(self, path):
        np.savez(path, **{k: np.asarray(v) for k, v in self.__dict__.items()})

    @classmethod
    def load(cls, path):
        try:
            with np.load(path) as z:
                d = {k: z[k] for k in z.files}
        except OSError as exc:
            raise DatasetIOError(f"cannot read ground truth {path}: {exc}") from exc
        d["amplitude"] = float(d["amplitude"])
        return cls(**d)


def sample_ground_truth(spec):
    rng = np.random.default_rng([spec.seed, 7])
    n = spec.num_gaussians
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    lobes = 1.0 + 0.15 * np.sin(3.0 * d[:, 0]) * np.cos(2.0 * d[:, 1]) + 0.1 * d[:, 2] ** 2
    depth = 1.0 - 0.25 * rng.random(n) ** 2
    pos = spec.blob_radius * d * (lobes * depth)[:, None] * np.array([0.9, 1.1, 0.9])
    col = 0.5 + 0.4 * np.stack(
        [np.sin(6.0 * pos[:, 0] + 1.0), np.sin(5.0 * pos[:, 1] + 2.0 * pos[:, 2]), np.cos(7.0 * pos[:, 2] - pos[:, 0])],
        axis=1,
    )
    scales = np.exp(rng.uniform(np.log(0.025), np.log(0.05), size=(n, 3)))
    E = spec.expression_dim
    dirs = rng.standard_normal((E, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return GroundTruth(
        positions=pos,
        rotations=random_unit_quaternions(rng, (n,)),
        scales=scales,
        opacities=rng.uniform(0.7, 0.95, size=n),
        colors=np.clip(col, 0.0, 1.0),
        basis_dirs=dirs,
        basis_waves=rng.normal(0.0, 3.0, size=(E, 3)),
        basis_phases=rng.uniform(0.0, 2 * np.pi, size=E),
        amplitude=float(spec.amplitude),
        background=np.asarray(spec.background, dtype=np.float64),
    )


def orbit_camera(azimuth, elevation, spec):
    eye = spec.orbit_radius * np.array(
        [np.sin(azimuth) * np.cos(elevation), -np.sin(elevation), -np.cos(azimuth) * np.cos(elevation)]
    )
    c = (spec.image_size - 1) / 2.0
    return Camera(spec.focal, spec.focal, c, c, spec.image_size, spec.image_size, look_at(eye, np.zeros(3)))


def generate_synthetic(spec, out_dir):
    """Render a synthetic dataset into ``out_dir``; returns the manifest path."""
    try:
        os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"cannot create {out_dir}: {exc}") from exc
    gt = sample_ground_truth(spec)
    rng = np.random.default_rng([spec.seed, 11])
    n = spec.num_train + spec.num_test
    az = np.deg2rad(rng.uniform(-spec.max_azimuth_deg, spec.max_azimuth_deg, n))
    el = np.deg2rad(rng.uniform(-spec.max_elevation_deg, spec.max_elevation_deg, n))
    es = rng.uniform(-1.0, 1.0, (n, spec.expression_dim))
    if spec.constant_expression:
        es[:] = 0.0
    full_mask = np.ones((spec.image_size, spec.image_size))
    write_mask(os.path.join(out_dir, "masks", "full.png"), full_mask)
    frames = []
    for i in range(n):
        cam = orbit_camera(az[i], el[i], spec)
        img = gt.render(es[i], cam).image
        rel = f"frames/{i:04d}.png"
        write_image(os.path.join(out_dir, rel), img)
        frames.append(FrameRecord(rel, es[i], cam, "masks/full.png", "train" if i < spec.num_train else "test"))
    gt.save(os.path.join(out_dir, GROUND_TRUTH_NAME))
    h = spec.bbox_half
    return write_manifest(out_dir, spec.expression_dim, frames, ((-h, -h, -h), (h, h, h)))
