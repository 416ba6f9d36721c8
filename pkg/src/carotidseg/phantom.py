"""Procedural carotid-like phantoms with exact lumen/wall ground truth.

Each vessel is a tube along z whose axial cross-section is a disk (lumen)
inside an annulus (wall). The centerline drifts sinusoidally in-plane, the
lumen may narrow at a stenosis and the tube may split into two children.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .volume import BACKGROUND, LUMEN, WALL, LabelVolume, Volume3D, write_volume

LUMEN_INTENSITY = 0.9
WALL_INTENSITY = 0.5
BACKGROUND_INTENSITY = 0.1
DEFAULT_SPACING = (0.6, 0.6, 0.6)


@dataclass
class VesselSpec:
    center: tuple[float, float]            # (cy, cx) at z = 0
    radius: float = 4.0
    wall_thickness: float = 2.0
    wall_thickness_end: float | None = None  # linear ramp to this value at the last slice
    drift_amplitude: tuple[float, float] = (0.0, 0.0)  # (ay, ax) voxels
    drift_period: float = 32.0             # slices
    drift_phase: float = 0.0
    stenosis_center: float | None = None
    stenosis_width: float = 6.0            # gaussian sigma in slices
    stenosis_depth: float = 0.0            # fraction of the radius removed at the center
    bifurcation_z: float | None = None
    child_offsets: tuple[tuple[float, float], tuple[float, float]] = ((-6.0, 0.0), (6.0, 0.0))
    child_radius_scale: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.stenosis_depth < 1.0:
            raise ValueError(f"stenosis depth must lie in [0, 1), got {self.stenosis_depth}")

    def centerline(self, z: float) -> tuple[float, float]:
        ay, ax = self.drift_amplitude
        arg = 2.0 * math.pi * z / self.drift_period + self.drift_phase
        return self.center[0] + ay * math.sin(arg), self.center[1] + ax * math.sin(arg)

    def lumen_radius(self, z: float) -> float:
        r = self.radius
        if self.stenosis_center is not None and self.stenosis_depth > 0:
            dip = math.exp(-0.5 * ((z - self.stenosis_center) / self.stenosis_width) ** 2)
            r *= 1.0 - self.stenosis_depth * dip
        return r

    def thickness(self, z: float, depth: int) -> float:
        if self.wall_thickness_end is None or depth < 2:
            return self.wall_thickness
        frac = z / (depth - 1)
        return self.wall_thickness + frac * (self.wall_thickness_end - self.wall_thickness)

    def branches(self, z: float, depth: int) -> list[tuple[float, float, float, float]]:
        """Active cross-sections ``(cy, cx, lumen radius, wall thickness)`` at slice z."""
        cy, cx = self.centerline(z)
        r = self.lumen_radius(z)
        t = self.thickness(z, depth)
        if self.bifurcation_z is None or z <= self.bifurcation_z:
            return [(cy, cx, r, t)]
        rc = r * self.child_radius_scale
        return [(cy + dy, cx + dx, rc, t) for dy, dx in self.child_offsets]

    def to_dict(self) -> dict:
        return asdict(self)


def _as_specs(spec) -> list[VesselSpec]:
    return [spec] if isinstance(spec, VesselSpec) else list(spec)


def validate_specs(specs: Sequence[VesselSpec], dims) -> None:
    d, h, w = dims
    for i, s in enumerate(specs):
        for z in range(d):
            for cy, cx, r, t in s.branches(z, d):
                if r < 1.0 or t < 1.0:
                    raise ValueError(f"vessel {i}, slice {z}: radius {r:.2f} / thickness {t:.2f} below 1 voxel")
                reach = r + t
                if cy - reach < 0 or cx - reach < 0 or cy + reach > h - 1 or cx + reach > w - 1:
                    raise ValueError(
                        f"vessel {i}, slice {z}: centerline ({cy:.2f}, {cx:.2f}) closer than "
                        f"r+t={reach:.2f} to the lateral border of a {h}x{w} plane")


def render_labels(specs: Sequence[VesselSpec], dims) -> np.ndarray:
    """Lumen iff in-plane distance to an active centerline < r; wall iff
    r <= distance < r + t (and not lumen of any vessel)."""
    d, h, w = dims
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros(dims, dtype=np.uint8)
    for z in range(d):
        lumen = np.zeros((h, w), bool)
        vessel = np.zeros((h, w), bool)
        for s in specs:
            for cy, cx, r, t in s.branches(z, d):
                dist = np.hypot(yy - cy, xx - cx)
                lumen |= dist < r
                vessel |= dist < r + t
        out[z][vessel] = WALL
        out[z][lumen] = LUMEN
    return out


def render_image(labels: np.ndarray, noise_sigma: float, rng: np.random.Generator,
                 blur_sigma: float = 0.5) -> np.ndarray:
    img = np.full(labels.shape, BACKGROUND_INTENSITY, dtype=np.float64)
    img[labels == WALL] = WALL_INTENSITY
    img[labels == LUMEN] = LUMEN_INTENSITY
    if blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(0.0, blur_sigma, blur_sigma))
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return img.astype(np.float32)


def interval_slices(depth: int, k: int) -> tuple[int, ...]:
    if k < 1:
        raise ValueError(f"annotation interval must be >= 1, got {k}")
    return tuple(range(0, depth, k))


def sparsify(gt: LabelVolume, slices) -> LabelVolume:
    slices = tuple(slices)
    data = np.zeros_like(gt.data)
    data[list(slices)] = gt.data[list(slices)]
    return LabelVolume(data, gt.spacing, slices)


@dataclass(eq=False)
class PhantomCase:
    image: Volume3D
    gt: LabelVolume
    sparse: LabelVolume


def generate_case(spec: VesselSpec | Sequence[VesselSpec], dims=(64, 64, 64),
                  spacing=DEFAULT_SPACING, interval: int = 4, noise_sigma: float = 0.05,
                  seed: int = 0, blur_sigma: float = 0.5) -> PhantomCase:
    specs = _as_specs(spec)
    dims = tuple(int(v) for v in dims)
    validate_specs(specs, dims)
    labels = render_labels(specs, dims)
    rng = np.random.default_rng(seed)
    img = render_image(labels, noise_sigma, rng, blur_sigma)
    gt = LabelVolume(labels, spacing, tuple(range(dims[0])))
    sparse = sparsify(gt, interval_slices(dims[0], interval))
    image = Volume3D(img, spacing, (float(img.min()), float(img.max())))
    return PhantomCase(image=image, gt=gt, sparse=sparse)


@dataclass
class SuiteConfig:
    n_cases: int = 10
    split: tuple[int, int, int] = (7, 1, 2)
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    interval: int = 4
    noise_sigma: float = 0.05
    seed: int = 0
    radius_range: tuple[float, float] = (3.5, 5.0)
    thickness_range: tuple[float, float] = (1.5, 2.5)
    drift_amplitude_range: tuple[float, float] = (3.0, 7.0)
    drift_period_range: tuple[float, float] = (16.0, 32.0)
    stenosis_probability: float = 0.6
    stenosis_depth_range: tuple[float, float] = (0.3, 0.6)
    bifurcation_probability: float = 0.0
    two_vessels: bool = False

    def __post_init__(self):
        if sum(self.split) != self.n_cases:
            raise ValueError(f"split {self.split} does not sum to n_cases={self.n_cases}")


def random_specs(cfg: SuiteConfig, rng: np.random.Generator) -> list[VesselSpec]:
    """Draw vessel specs for one case; centerlines keep border clearance."""
    d, h, w = cfg.dims
    n = 2 if cfg.two_vessels else 1
    specs = []
    for i in range(n):
        r = float(rng.uniform(*cfg.radius_range))
        t = float(rng.uniform(*cfg.thickness_range))
        amp = float(rng.uniform(*cfg.drift_amplitude_range))
        angle = float(rng.uniform(0, 2 * math.pi))
        period = float(rng.uniform(*cfg.drift_period_range))
        phase = float(rng.uniform(0, 2 * math.pi))
        ay, ax = amp * math.sin(angle), amp * math.cos(angle)
        if n == 1:
            cx = w / 2
        else:
            cx = w * (0.3 if i == 0 else 0.7)
            ax = math.copysign(min(abs(ax), w * 0.2 - r - t - 1), ax)
        center = (h / 2, cx)
        stenosis_center = None
        depth = 0.0
        if rng.uniform() < cfg.stenosis_probability:
            stenosis_center = float(rng.uniform(0.25 * d, 0.75 * d))
            depth = float(rng.uniform(*cfg.stenosis_depth_range))
            depth = min(depth, 1.0 - 1.0 / r)  # keep the stenotic radius >= 1 voxel
        bif = None
        if n == 1 and rng.uniform() < cfg.bifurcation_probability:
            bif = float(rng.integers(d // 3, 2 * d // 3)) + 0.5
        specs.append(VesselSpec(center=center, radius=r, wall_thickness=t,
                                drift_amplitude=(ay, ax), drift_period=period,
                                drift_phase=phase, stenosis_center=stenosis_center,
                                stenosis_depth=depth, bifurcation_z=bif,
                                child_offsets=((0.0, -(r + t + 2)), (0.0, r + t + 2))))
    return specs


def split_names(cfg: SuiteConfig) -> list[str]:
    n_train, n_val, _ = cfg.split
    return ["train" if i < n_train else "val" if i < n_train + n_val else "test"
            for i in range(cfg.n_cases)]


def generate_suite(cfg: SuiteConfig, out_dir) -> list[dict]:
    """Write ``n_cases`` phantoms under ``out_dir`` plus ``manifest.json``.

    Case ``i`` uses seed ``cfg.seed + i``. Paths in the manifest are relative
    to ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, split in enumerate(split_names(cfg)):
        case_seed = cfg.seed + i
        rng = np.random.default_rng(case_seed)
        specs = random_specs(cfg, rng)
        case = generate_case(specs, cfg.dims, cfg.spacing, cfg.interval, cfg.noise_sigma,
                             seed=case_seed)
        case_id = f"case{i:03d}"
        entry = {
            "case_id": case_id,
            "image_path": f"images/{case_id}.vvolh",
            "gt_path": f"gt/{case_id}.vvolh",
            "sparse_path": f"sparse/{case_id}.vvolh",
            "split": split,
        }
        write_volume(case.image, out_dir / entry["image_path"])
        write_volume(case.gt, out_dir / entry["gt_path"])
        write_volume(case.sparse, out_dir / entry["sparse_path"])
        manifest.append(entry)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (out_dir / "suite_config.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n")
    return manifest


def load_manifest(path) -> tuple[Path, list[dict]]:
    """Returns the suite root and manifest entries."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    entries = json.loads(path.read_text())
    required = {"case_id", "image_path", "gt_path", "sparse_path", "split"}
    for e in entries:
        if not required <= e.keys():
            raise ValueError(f"{path}: manifest entry missing {sorted(required - e.keys())}")
    return path.parent, entries


def enclosure_violations(labels: np.ndarray) -> int:
    """Lumen voxels with an in-plane 4-neighbour that is background (the
    plane border counts as enclosing)."""
    lumen = labels == LUMEN
    bg = labels == BACKGROUND
    count = np.zeros(labels.shape, bool)
    for axis in (1, 2):
        for shift in (1, -1):
            nb = np.roll(bg, shift, axis=axis)
            edge = [slice(None)] * 3
            edge[axis] = 0 if shift == 1 else -1
            nb[tuple(edge)] = False
            count |= lumen & nb
    return int(count.sum())
