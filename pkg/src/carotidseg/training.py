"""Patch-based training, sliding-window inference and metric reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import seg_loss
from .metrics import CLASS_NAMES, class_metrics
from .network import DBFUNet, NetConfig, save_checkpoint
from .phantom import load_manifest
from .volume import LabelVolume, Volume3D, read_volume, write_volume

LABEL_SOURCES = ("gt", "sparse", "aipl", "cipl", "srpl")
CSV_COLUMNS = ("case", "class", "dice", "iou", "pre", "rec", "asd_mm")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    patch_size: int = 32
    batch_size: int = 2
    lr: float = 5e-4
    epochs: int = 40
    patches_per_case: int = 1
    w_ce: float = 1.0
    w_dice: float = 1.0
    fg_fraction: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0        # epochs; 0 = final checkpoint only
    overlap: float = 0.5             # sliding-window overlap fraction
    threads: int = 1                 # 1 = deterministic single-threaded mode

    def validate(self, net_cfg: NetConfig | None = None) -> None:
        if self.patch_size < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("patch_size, batch_size and epochs must be >= 1")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        if net_cfg is not None and self.patch_size % net_cfg.divisor:
            raise ValueError(f"patch size {self.patch_size} not divisible by {net_cfg.divisor}")


def set_determinism(seed: int, threads: int = 1) -> None:
    torch.manual_seed(seed)
    if threads > 0:
        torch.set_num_threads(threads)


def standardize(image: np.ndarray) -> np.ndarray:
    image = image.astype(np.float32)
    std = float(image.std())
    return (image - float(image.mean())) / (std if std > 0 else 1.0)


def label_path(root: Path, entry: dict, source: str) -> Path:
    if source == "gt":
        return root / entry["gt_path"]
    if source == "sparse":
        return root / entry["sparse_path"]
    if source in LABEL_SOURCES:
        return root / source / f"{entry['case_id']}.vvolh"
    raise ValueError(f"unknown label source {source!r}; expected one of {LABEL_SOURCES}")


def load_cases(manifest, split: str, source: str = "gt"):
    """Standardized images and labels for one split of a suite."""
    root, entries = load_manifest(manifest)
    cases = []
    for e in entries:
        if e["split"] != split:
            continue
        img_path, lab_path = root / e["image_path"], label_path(root, e, source)
        for p in (img_path, lab_path):
            if not p.exists():
                raise FileNotFoundError(f"{e['case_id']}: missing {p}")
        image = read_volume(img_path)
        labels = read_volume(lab_path)
        cases.append((e["case_id"], standardize(image.data), labels.data))
    return cases


def _pad_to(arr: np.ndarray, size: int) -> np.ndarray:
    pad = [(0, max(0, size - s)) for s in arr.shape]
    return np.pad(arr, pad) if any(p[1] for p in pad) else arr


def sample_patch(image: np.ndarray, labels: np.ndarray, size: int, rng: np.random.Generator,
                 fg_fraction: float = 0.5):
    """Random patch; with probability ``fg_fraction`` centred near a vessel voxel."""
    image, labels = _pad_to(image, size), _pad_to(labels, size)
    shape = np.array(image.shape)
    if rng.uniform() < fg_fraction and labels.any():
        fg = np.argwhere(labels > 0)
        center = fg[rng.integers(len(fg))] + rng.integers(-size // 4, size // 4 + 1, size=3)
        start = np.clip(center - size // 2, 0, shape - size)
    else:
        start = np.array([rng.integers(0, s - size + 1) for s in shape])
    sl = tuple(slice(int(a), int(a) + size) for a in start)
    return image[sl], labels[sl]


@dataclass
class TrainResult:
    checkpoint: Path | None
    trace: list[dict]
    epoch_losses: list[float]
    val_dice: float | None = None


def train(model: DBFUNet, manifest, labels_source: str = "gt", cfg: TrainConfig = TrainConfig(),
          out_dir=None) -> TrainResult:
    """Adam on foreground-biased random patches of the train split.

    One epoch draws ``patches_per_case`` patches from every training case in
    a seeded shuffled order. Writes ``loss_trace.jsonl`` and checkpoints to
    ``out_dir`` when given.
    """
    cfg.validate(model.cfg)
    set_determinism(cfg.seed, cfg.threads)
    cases = load_cases(manifest, "train", labels_source)
    if not cases:
        raise ValueError("manifest has no training cases")
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    trace, epoch_losses = [], []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = [i for i in rng.permutation(len(cases)) for _ in range(cfg.patches_per_case)]
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            xs, ys = [], []
            for i in order[b:b + cfg.batch_size]:
                _, img, lab = cases[i]
                x, y = sample_patch(img, lab, cfg.patch_size, rng, cfg.fg_fraction)
                xs.append(x[None])
                ys.append(y)
            x = torch.from_numpy(np.stack(xs))
            y = torch.from_numpy(np.stack(ys).astype(np.int64))
            loss, comps = seg_loss(model(x), y, cfg.w_ce, cfg.w_dice, return_components=True)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            trace.append({"epoch": epoch, "step": step, "loss": value, "components": comps})
            losses.append(value)
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"epoch{epoch + 1:03d}.ckpt", {"epoch": epoch + 1})
    model.eval()
    val = load_cases(manifest, "val", "gt")
    val_dice = None
    if val:
        scores = [class_metrics(infer_array(model, img, cfg), lab, 1)["dice"] for _, img, lab in val]
        val_dice = float(np.mean(scores))
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "model.ckpt"
        save_checkpoint(model, ckpt, {"epochs": cfg.epochs, "labels_source": labels_source,
                                      "train": asdict(cfg)})
        with open(out_dir / "loss_trace.jsonl", "w") as fh:
            for rec in trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return TrainResult(ckpt, trace, epoch_losses, val_dice)


def tile_starts(length: int, patch: int, overlap: float) -> list[int]:
    if length <= patch:
        return [0]
    stride = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def infer_array(model: DBFUNet, image: np.ndarray, cfg: TrainConfig = TrainConfig()) -> np.ndarray:
    """Sliding-window argmax labels for a standardized (D, H, W) image."""
    p = cfg.patch_size
    orig = image.shape
    image = _pad_to(image.astype(np.float32), p)
    shape = image.shape
    logits = np.zeros((model.cfg.num_classes,) + shape, dtype=np.float64)
    counts = np.zeros(shape, dtype=np.float64)
    model.eval()
    with torch.no_grad():
        for z in tile_starts(shape[0], p, cfg.overlap):
            for y in tile_starts(shape[1], p, cfg.overlap):
                for x in tile_starts(shape[2], p, cfg.overlap):
                    sl = (slice(z, z + p), slice(y, y + p), slice(x, x + p))
                    patch = torch.from_numpy(np.ascontiguousarray(image[sl]))[None, None]
                    logits[(slice(None),) + sl] += model(patch)[0].numpy()
                    counts[sl] += 1
    logits /= counts
    out = logits.argmax(0).astype(np.uint8)
    return out[:orig[0], :orig[1], :orig[2]]


def infer(model: DBFUNet, image: Volume3D, cfg: TrainConfig = TrainConfig()) -> LabelVolume:
    labels = infer_array(model, standardize(image.data), cfg)
    return LabelVolume(labels, image.spacing, tuple(range(image.dims[0])))


@dataclass
class MetricReport:
    rows: list[dict]
    means: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "MetricReport":
        means = {}
        for name in sorted({r["class"] for r in rows}, key=lambda n: list(CLASS_NAMES.values()).index(n)
                           if n in CLASS_NAMES.values() else 99):
            sel = [r for r in rows if r["class"] == name]
            m = {k: float(np.mean([r[k] for r in sel])) for k in ("dice", "iou", "pre", "rec")}
            asds = [r["asd_mm"] for r in sel if not r["asd_undefined"]]
            m["asd_mm"] = float(np.mean(asds)) if asds else math.nan
            m["asd_undefined_cases"] = len(sel) - len(asds)
            m["n_cases"] = len(sel)
            means[name] = m
        return cls(rows, means)

    def to_json(self) -> str:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        doc = {"cases": [{k: clean(v) for k, v in r.items()} for r in self.rows],
               "means": {c: {k: clean(v) for k, v in m.items()} for c, m in self.means.items()}}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r["case"], r["class"]] + [_fmt(r[k]) for k in CSV_COLUMNS[2:]])
        for name, m in self.means.items():
            w.writerow(["mean", name] + [_fmt(m[k]) for k in CSV_COLUMNS[2:]])
        return buf.getvalue()

    def write(self, prefix) -> tuple[Path, Path]:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        jp, cp = prefix.with_suffix(".json"), prefix.with_suffix(".csv")
        jp.write_text(self.to_json())
        cp.write_text(self.to_csv())
        return jp, cp


def _fmt(v) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else f"{v:.6f}"


def case_rows(case_id: str, pred: LabelVolume, gt: LabelVolume, classes=(1, 2)) -> list[dict]:
    if pred.dims != gt.dims:
        raise ValueError(f"{case_id}: dimension mismatch {pred.dims} vs {gt.dims}")
    rows = []
    for c in classes:
        m = class_metrics(pred.data, gt.data, c, gt.spacing)
        rows.append({"case": case_id, "class": CLASS_NAMES[c], **m})
    return rows


def evaluate(pred_dir, gt_dir, classes=(1, 2), case_ids=None) -> MetricReport:
    """Per-case, per-class metrics for every ``<case>.vvolh`` in ``pred_dir``
    against the same name in ``gt_dir``."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    if case_ids is None:
        case_ids = sorted(p.name[:-len(".vvolh")] for p in pred_dir.glob("*.vvolh"))
    unmatched = [c for c in case_ids
                 if not (gt_dir / f"{c}.vvolh").exists() or not (pred_dir / f"{c}.vvolh").exists()]
    if unmatched:
        raise ValueError(f"cases without a prediction/ground-truth pair: {unmatched}")
    if not case_ids:
        raise ValueError(f"no predictions found in {pred_dir}")
    rows = []
    for c in case_ids:
        rows += case_rows(c, read_volume(pred_dir / f"{c}.vvolh"), read_volume(gt_dir / f"{c}.vvolh"),
                          classes)
    return MetricReport.from_rows(rows)


def predict_split(model: DBFUNet, manifest, split: str, out_dir, cfg: TrainConfig = TrainConfig()) -> list[str]:
    root, entries = load_manifest(manifest)
    out_dir = Path(out_dir)
    ids = []
    for e in entries:
        if e["split"] != split:
            continue
        pred = infer(model, read_volume(root / e["image_path"]), cfg)
        write_volume(pred, out_dir / f"{e['case_id']}.vvolh")
        ids.append(e["case_id"])
    return ids
