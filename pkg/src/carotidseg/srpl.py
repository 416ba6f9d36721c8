"""Segmenter-refined pseudo-labels.

Interpolated (C-IPL) slices become prompts for a 2D promptable segmenter.
Every component's bounding box is jittered K times with size-adaptive
uniform noise, the K predicted masks are majority-voted, and the wall is
recovered by subtracting the refined lumen from the refined vessel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .volume import BACKGROUND, LUMEN, WALL, LabelVolume, Volume3D

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class BoundingBox2D:
    """Axis-aligned box in continuous pixel coordinates; pixel ``(y, x)``
    covers ``[x, x+1) x [y, y+1)``."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate box {self}")

    @property
    def w(self) -> float:
        return abs(self.x1 - self.x0)

    @property
    def h(self) -> float:
        return abs(self.y1 - self.y0)

    @property
    def center(self) -> tuple[float, float]:
        """(y, x) center."""
        return (self.y0 + self.y1) / 2, (self.x0 + self.x1) / 2

    def expanded(self, margin: float) -> "BoundingBox2D":
        return BoundingBox2D(self.x0 - margin, self.y0 - margin, self.x1 + margin, self.y1 + margin)

    def to_mask(self, shape) -> np.ndarray:
        """Pixels whose centers fall inside the box."""
        h, w = shape
        ys = np.arange(h) + 0.5
        xs = np.arange(w) + 0.5
        iny = (ys >= self.y0) & (ys <= self.y1)
        inx = (xs >= self.x0) & (xs <= self.x1)
        return iny[:, None] & inx[None, :]

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "BoundingBox2D":
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            raise ValueError("empty mask has no bounding box")
        return cls(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


OFFSET_GRID = 2.0 ** 24


@dataclass(frozen=True)
class PerturbationParams:
    scale: float = 0.1          # s: sigma = min(w, h) * s
    max_noise: float = 5.0      # M, voxels; 0 disables the perturbation
    k: int = 10                 # ensemble size
    tau: int | None = None      # vote threshold, defaults to ceil(k / 2)

    def __post_init__(self):
        if self.scale <= 0 or self.max_noise < 0:
            raise ValueError("scale must be positive and max_noise non-negative")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.tau is None:
            object.__setattr__(self, "tau", math.ceil(self.k / 2))
        if not 1 <= self.tau <= self.k:
            raise ValueError(f"tau must lie in [1, {self.k}], got {self.tau}")


def noise_bound(box: BoundingBox2D, params: PerturbationParams) -> tuple[float, float]:
    """``(sigma, delta)`` with sigma = min(w, h)*s and delta = min(M, 5*sigma)."""
    sigma = min(box.w, box.h) * params.scale
    return sigma, min(params.max_noise, 5.0 * sigma)


def perturb_box(box: BoundingBox2D, params: PerturbationParams,
                rng: np.random.Generator) -> BoundingBox2D:
    """Translate the box by (ex, ey) ~ U(-delta, delta) each; size is kept."""
    _, delta = noise_bound(box, params)
    # truncating onto a dyadic grid keeps |e| <= delta and makes the shifted
    # corners exact in float64, so width and height are preserved bit for bit
    ex, ey = np.trunc(rng.uniform(-delta, delta, size=2) * OFFSET_GRID) / OFFSET_GRID
    return BoundingBox2D(box.x0 + ex, box.y0 + ey, box.x1 + ex, box.y1 + ey)


@dataclass
class PromptSet:
    points: list[tuple[float, float, int]] = field(default_factory=list)  # (x, y, 1=fg / 0=bg)
    box: BoundingBox2D | None = None
    prior_mask: np.ndarray | None = None

    def __post_init__(self):
        if not self.points and self.box is None and self.prior_mask is None:
            raise ValueError("a prompt set needs at least one of points, box or prior_mask")
        for p in self.points:
            if p[2] not in (0, 1):
                raise ValueError(f"point label must be 0 or 1, got {p[2]}")


class Segmenter(Protocol):
    def segment(self, image2d: np.ndarray, prompts: PromptSet, *,
                slice_index: int | None = None) -> np.ndarray: ...


@dataclass
class SegmenterPair:
    """Separate models for the whole vessel (lumen+wall) and for the lumen."""

    vessel: Segmenter
    lumen: Segmenter


def as_pair(segmenter) -> SegmenterPair:
    return segmenter if isinstance(segmenter, SegmenterPair) else SegmenterPair(segmenter, segmenter)


class SegmenterError(RuntimeError):
    pass


def run_segmenter(seg: Segmenter, image2d, prompts, slice_index=None, context="") -> np.ndarray:
    try:
        out = seg.segment(image2d, prompts, slice_index=slice_index)
    except Exception as exc:
        raise SegmenterError(f"segmenter failed ({context}): {exc}") from exc
    out = np.asarray(out)
    if out.shape != image2d.shape:
        raise SegmenterError(f"segmenter returned shape {out.shape}, expected {image2d.shape} ({context})")
    return out.astype(bool)


def vote_masks(masks: Sequence[np.ndarray], tau: int) -> np.ndarray:
    """Pixel is foreground iff at least ``tau`` masks mark it."""
    if not masks:
        raise ValueError("no masks to vote on")
    shape = np.shape(masks[0])
    if any(np.shape(m) != shape for m in masks):
        raise ValueError(f"mask shapes differ: {sorted({np.shape(m) for m in masks})}")
    if not 1 <= tau <= len(masks):
        raise ValueError(f"tau must lie in [1, {len(masks)}], got {tau}")
    votes = np.sum([np.asarray(m, dtype=bool) for m in masks], axis=0)
    return votes >= tau


def merge_labels(label2d: np.ndarray) -> np.ndarray:
    return (label2d == LUMEN) | (label2d == WALL)


def split_wall(merged: np.ndarray, lumen: np.ndarray) -> np.ndarray:
    return merged & ~lumen


def compose_labels(merged: np.ndarray, lumen: np.ndarray) -> np.ndarray:
    out = np.zeros(merged.shape, dtype=np.uint8)
    out[split_wall(merged, lumen)] = WALL
    out[lumen & merged] = LUMEN
    return out


def component_rng(seed: int, z: int, component: int, structure: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, z, component, structure])


def ensemble_segment(seg: Segmenter, image2d, box: BoundingBox2D, params: PerturbationParams,
                     rng: np.random.Generator, slice_index=None, context="") -> np.ndarray:
    masks = [run_segmenter(seg, image2d, PromptSet(box=perturb_box(box, params, rng)),
                           slice_index, context) for _ in range(params.k)]
    return vote_masks(masks, params.tau)


def refine_slice(image2d: np.ndarray, cipl_slice: np.ndarray, segmenter,
                 params: PerturbationParams = PerturbationParams(), seed: int = 0,
                 z: int | None = None) -> np.ndarray:
    """Refine every merged-foreground component of an interpolated slice."""
    pair = as_pair(segmenter)
    comp_lab, n = ndimage.label(merge_labels(cipl_slice), structure=EIGHT_CONNECTED)
    out = np.zeros(cipl_slice.shape, dtype=np.uint8)
    zz = -1 if z is None else z
    for ci in range(1, n + 1):
        comp = comp_lab == ci
        ctx = f"slice {z}, component {ci - 1}"
        merged = ensemble_segment(pair.vessel, image2d, BoundingBox2D.from_mask(comp), params,
                                  component_rng(seed, zz, ci - 1, 0), z, ctx + ", vessel")
        comp_lumen = comp & (cipl_slice == LUMEN)
        if comp_lumen.any():
            lumen = ensemble_segment(pair.lumen, image2d, BoundingBox2D.from_mask(comp_lumen),
                                     params, component_rng(seed, zz, ci - 1, 1), z, ctx + ", lumen")
        else:
            lumen = np.zeros_like(merged)
        labels = compose_labels(merged, lumen & merged)
        wall = labels == WALL
        out[wall & (out == BACKGROUND)] = WALL
        out[labels == LUMEN] = LUMEN
    return out


def refine_volume(image: Volume3D, cipl: LabelVolume, expert: LabelVolume, segmenter,
                  params: PerturbationParams = PerturbationParams(), seed: int = 0) -> LabelVolume:
    """Expert slices pass through; all other labelled C-IPL slices are refined."""
    if not (image.dims == cipl.dims == expert.dims):
        raise ValueError(f"dimension mismatch: image {image.dims}, cipl {cipl.dims}, expert {expert.dims}")
    expert_set = set(expert.annotated_slices)
    out = np.zeros_like(cipl.data)
    for z in expert.annotated_slices:
        out[z] = expert.data[z]
    refined = []
    for z in cipl.annotated_slices:
        if z in expert_set:
            continue
        refined.append(z)
        if merge_labels(cipl.data[z]).any():
            out[z] = refine_slice(image.data[z].astype(np.float32), cipl.data[z], segmenter,
                                  params, seed, z)
    slices = tuple(sorted(expert_set | set(refined)))
    return LabelVolume(out, cipl.spacing, slices)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return mask & False
    sizes = ndimage.sum_labels(mask, lab, index=np.arange(1, n + 1))
    return lab == (int(np.argmax(sizes)) + 1)


def iterative_prompt_refine(image2d: np.ndarray, reference: np.ndarray, segmenter: Segmenter,
                            n_iter: int, rng: np.random.Generator, slice_index=None,
                            trace: list | None = None) -> np.ndarray:
    """Prompt loop: a random foreground point or the reference bbox first,
    then one corrective point per round sampled from the largest error
    region, with the previous prediction as mask prompt."""
    reference = np.asarray(reference, dtype=bool)
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    if not reference.any():
        raise ValueError("reference mask is empty")
    if rng.uniform() < 0.5:
        ys, xs = np.nonzero(reference)
        i = rng.integers(len(ys))
        prompts = PromptSet(points=[(float(xs[i]), float(ys[i]), 1)])
    else:
        prompts = PromptSet(box=BoundingBox2D.from_mask(reference))
    pred = run_segmenter(segmenter, image2d, prompts, slice_index, "iteration 1")
    for it in range(2, n_iter + 1):
        error = pred ^ reference
        if trace is not None:
            trace.append(int(error.sum()))
        if not error.any():
            return pred
        region = _largest_component(error)
        ys, xs = np.nonzero(region)
        i = rng.integers(len(ys))
        y, x = int(ys[i]), int(xs[i])
        prompts = PromptSet(points=prompts.points + [(float(x), float(y), int(reference[y, x]))],
                            box=prompts.box, prior_mask=pred)
        pred = run_segmenter(segmenter, image2d, prompts, slice_index, f"iteration {it}")
    if trace is not None:
        trace.append(int((pred ^ reference).sum()))
    return pred
