"""Built-in 2D promptable segmenters.

* :class:`OracleSegmenter` returns ground-truth components (optionally dilated).
* :class:`ThresholdSegmenter` thresholds intensities inside the prompt box.
* :class:`PromptNetSegmenter` is a small trainable CNN fed with box, point
  and mask prompts as extra input channels, trained with the focal/Dice/IoU
  prompt objective.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage

from .losses import prompt_loss
from .srpl import (EIGHT_CONNECTED, BoundingBox2D, PerturbationParams, PromptSet,
                   SegmenterPair, merge_labels, perturb_box)
from .volume import LUMEN, LabelVolume

TARGETS = ("vessel", "lumen")


def target_mask(label2d: np.ndarray, target: str) -> np.ndarray:
    if target == "vessel":
        return merge_labels(label2d)
    if target == "lumen":
        return label2d == LUMEN
    raise ValueError(f"unknown target {target!r}")


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return yy * yy + xx * xx <= r * r


def _prompt_region(prompts: PromptSet, shape) -> np.ndarray:
    if prompts.box is not None:
        return prompts.box.to_mask(shape)
    if prompts.prior_mask is not None:
        return np.asarray(prompts.prior_mask, bool)
    region = np.zeros(shape, bool)
    for x, y, lab in prompts.points:
        if lab == 1:
            region[int(y), int(x)] = True
    return region


class OracleSegmenter:
    """Returns the ground-truth component that overlaps the prompt most."""

    def __init__(self, gt: LabelVolume, target: str = "vessel", dilate_noise: int = 0):
        if target not in TARGETS:
            raise ValueError(f"unknown target {target!r}")
        self.gt = gt
        self.target = target
        self.dilate_noise = int(dilate_noise)

    def segment(self, image2d, prompts: PromptSet, *, slice_index=None):
        if slice_index is None:
            raise ValueError("the oracle segmenter needs the slice index")
        mask = target_mask(self.gt.data[slice_index], self.target)
        lab, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
        region = _prompt_region(prompts, mask.shape)
        out = np.zeros(mask.shape, bool)
        if n:
            overlap = np.bincount(lab[region].ravel(), minlength=n + 1)[1:]
            if overlap.max() > 0:
                out = lab == int(np.argmax(overlap)) + 1
        if self.dilate_noise > 0 and out.any():
            out = ndimage.binary_dilation(out, structure=disk(self.dilate_noise))
        return out


class ThresholdSegmenter:
    """Foreground = pixels >= ``level`` inside the box (grown by ``margin``),
    kept only for the connected component under the box center."""

    def __init__(self, level: float, margin: float = 2.0):
        self.level = float(level)
        self.margin = float(margin)

    def segment(self, image2d, prompts: PromptSet, *, slice_index=None):
        image2d = np.asarray(image2d)
        shape = image2d.shape
        if prompts.box is not None:
            region = prompts.box.expanded(self.margin).to_mask(shape)
            cy, cx = prompts.box.center
            seeds = [(int(np.floor(cy)), int(np.floor(cx)))]
        else:
            region = np.ones(shape, bool)
            seeds = [(int(y), int(x)) for x, y, lab in prompts.points if lab == 1]
        fg = region & (image2d >= self.level)
        lab, n = ndimage.label(fg, structure=EIGHT_CONNECTED)
        if n == 0:
            return np.zeros(shape, bool)
        h, w = shape
        keep = {lab[y, x] for y, x in seeds if 0 <= y < h and 0 <= x < w and lab[y, x] > 0}
        if not keep:
            sizes = np.bincount(lab.ravel(), minlength=n + 1)[1:]
            keep = {int(np.argmax(sizes)) + 1}
        out = np.isin(lab, sorted(keep))
        for x, y, l in prompts.points:
            if l == 0 and 0 <= int(y) < h and 0 <= int(x) < w and lab[int(y), int(x)] > 0:
                out &= lab != lab[int(y), int(x)]
        return out


def threshold_pair(vessel_level: float = 0.3, lumen_level: float = 0.7) -> SegmenterPair:
    """Levels sit between the phantom background/wall and wall/lumen intensities."""
    return SegmenterPair(ThresholdSegmenter(vessel_level), ThresholdSegmenter(lumen_level))


def oracle_pair(gt: LabelVolume, dilate_noise: int = 0) -> SegmenterPair:
    return SegmenterPair(OracleSegmenter(gt, "vessel", dilate_noise),
                         OracleSegmenter(gt, "lumen", dilate_noise))


# --- trainable stand-in ------------------------------------------------------

PROMPT_CHANNELS = 5  # image, box, fg points, bg points, prior mask


class PromptNet(nn.Module):
    def __init__(self, width: int = 16):
        super().__init__()
        layers = []
        c = PROMPT_CHANNELS
        for dil in (1, 2, 4, 8, 1):
            layers += [nn.Conv2d(c, width, 3, padding=dil, dilation=dil), nn.GELU()]
            c = width
        self.body = nn.Sequential(*layers)
        self.mask_head = nn.Conv2d(width, 1, 1)
        self.iou_head = nn.Linear(width, 1)

    def forward(self, x):
        h = self.body(x)
        iou = torch.sigmoid(self.iou_head(h.mean(dim=(2, 3)))).squeeze(1)
        return self.mask_head(h), iou


def encode_prompts(image2d: np.ndarray, prompts: PromptSet, point_sigma: float = 1.5) -> np.ndarray:
    image2d = np.asarray(image2d, dtype=np.float32)
    shape = image2d.shape
    std = float(image2d.std()) or 1.0
    chans = np.zeros((PROMPT_CHANNELS,) + shape, dtype=np.float32)
    chans[0] = (image2d - image2d.mean()) / std
    if prompts.box is not None:
        chans[1] = prompts.box.to_mask(shape)
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    for x, y, lab in prompts.points:
        blob = np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2 * point_sigma ** 2))
        ch = 2 if lab == 1 else 3
        chans[ch] = np.maximum(chans[ch], blob)
    if prompts.prior_mask is not None:
        chans[4] = np.asarray(prompts.prior_mask, dtype=np.float32)
    return chans


class PromptNetSegmenter:
    def __init__(self, net: PromptNet | None = None):
        self.net = net or PromptNet()

    def predict(self, image2d, prompts: PromptSet):
        x = torch.from_numpy(encode_prompts(image2d, prompts))[None]
        self.net.eval()
        with torch.no_grad():
            logits, iou = self.net(x)
        return logits[0, 0].numpy(), float(iou[0])

    def segment(self, image2d, prompts: PromptSet, *, slice_index=None):
        logits, _ = self.predict(image2d, prompts)
        return logits > 0


def _random_prompts(target: np.ndarray, rng: np.random.Generator,
                    params: PerturbationParams) -> PromptSet:
    """Simulated prompts: a jittered box, or points, optionally with a
    corrupted mask prompt, mimicking both inference and the prompt loop."""
    box = BoundingBox2D.from_mask(target)
    ys, xs = np.nonzero(target)
    mode = rng.integers(3)
    points, pbox, prior = [], None, None
    if mode == 0:
        pbox = perturb_box(box, params, rng)
    else:
        i = rng.integers(len(ys))
        points.append((float(xs[i]), float(ys[i]), 1))
        if mode == 2:
            prior = ndimage.shift(target.astype(float), rng.uniform(-2, 2, size=2), order=0) > 0.5
            if rng.uniform() < 0.5:
                prior = ndimage.binary_dilation(prior)
            err = prior ^ target
            if err.any():
                ey, ex = np.nonzero(err)
                j = rng.integers(len(ey))
                points.append((float(ex[j]), float(ey[j]), int(target[ey[j], ex[j]])))
    return PromptSet(points=points, box=pbox, prior_mask=prior)


def fit_prompt_segmenter(images, labels, target: str = "vessel", steps: int = 300,
                         batch_size: int = 8, lr: float = 1e-3, seed: int = 0,
                         params: PerturbationParams = PerturbationParams(),
                         width: int = 16) -> tuple[PromptNetSegmenter, list[float]]:
    """Train a PromptNet on expert slices (2D image/label pairs).

    Each sample is one connected target component with simulated prompts.
    Returns the segmenter and the per-step loss trace.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    samples = []
    for img, lab in zip(images, labels):
        mask = target_mask(lab, target)
        comp, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
        for k in range(1, n + 1):
            samples.append((np.asarray(img, np.float32), comp == k))
    if not samples:
        raise ValueError(f"no {target} components in the training slices")
    net = PromptNet(width)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    trace = []
    net.train()
    for _ in range(steps):
        idx = rng.integers(len(samples), size=batch_size)
        xs, ys = [], []
        for i in idx:
            img, tgt = samples[i]
            xs.append(encode_prompts(img, _random_prompts(tgt, rng, params)))
            ys.append(tgt[None].astype(np.float32))
        x = torch.from_numpy(np.stack(xs))
        y = torch.from_numpy(np.stack(ys))
        logits, iou = net(x)
        loss = prompt_loss(logits, y, iou)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
    return PromptNetSegmenter(net), trace


def expert_slices(image, sparse: LabelVolume):
    return ([image.data[z] for z in sparse.annotated_slices],
            [sparse.data[z] for z in sparse.annotated_slices])
