"""Experiment drivers: suite generation, pseudo-labels, training, reports.

Every stage reads and writes files under a suite directory so that stages
can run as separate processes. Pseudo-label volumes live next to the
manifest in ``<suite>/<method>/<case>.vvolh``.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labelprop import DEFAULT_MATCH_RADIUS, propagate
from .metrics import confusion
from .network import NetConfig, build_model, param_report
from .phantom import SuiteConfig, generate_suite, load_manifest
from .segmenters import expert_slices, fit_prompt_segmenter, oracle_pair, threshold_pair
from .srpl import PerturbationParams, SegmenterPair, refine_volume
from .training import (MetricReport, TrainConfig, evaluate, predict_split, train)
from .volume import LUMEN, WALL, read_volume, write_volume

PSEUDO_LABELS = ("aipl", "cipl", "srpl")
SEGMENTERS = ("threshold", "oracle", "promptnet")
ABLATION_ROWS = ((False, False), (True, False), (False, True), (True, True))  # (bff, msda)


@dataclass
class InterpConfig:
    method: str = "cipl"
    match_radius: float = DEFAULT_MATCH_RADIUS

    def __post_init__(self):
        if self.method not in ("aipl", "cipl"):
            raise ValueError(f"unknown interpolation method {self.method!r}")


@dataclass
class RefineConfig:
    segmenter: str = "threshold"
    vessel_level: float = 0.3
    lumen_level: float = 0.7
    dilate_noise: int = 0
    scale: float = 0.1
    max_noise: float = 5.0
    k: int = 10
    tau: int | None = None
    promptnet_steps: int = 300

    def __post_init__(self):
        if self.segmenter not in SEGMENTERS:
            raise ValueError(f"unknown segmenter {self.segmenter!r}; expected one of {SEGMENTERS}")
        self.perturbation()

    def perturbation(self) -> PerturbationParams:
        return PerturbationParams(self.scale, self.max_noise, self.k, self.tau)


@dataclass
class ExperimentConfig:
    """Everything a ``run-all`` needs. ``seed`` drives model init, S-RPL
    box draws and training; the phantom suite has its own seed."""

    seed: int = 0
    labels_source: str = "srpl"
    phantom: SuiteConfig = field(default_factory=SuiteConfig)
    interp: InterpConfig = field(default_factory=InterpConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.labels_source not in ("gt",) + PSEUDO_LABELS:
            raise ValueError(f"unknown labels_source {self.labels_source!r}")
        self.train.validate(self.net)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return _build(cls, doc, "config")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, doc, where: str):
    """Strict dataclass construction: unknown keys are errors, lists become
    tuples where the field is a tuple, nested dataclasses recurse."""
    if not isinstance(doc, dict):
        raise ValueError(f"{where}: expected an object, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in doc.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{where}.{key}")
        elif typing.get_origin(hint) is tuple and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"{where}: {exc}") from exc


# --- pseudo-labels -----------------------------------------------------------

def pseudo_label_path(suite, method: str, case_id: str) -> Path:
    return Path(suite) / method / f"{case_id}.vvolh"


def interpolate_suite(suite, method: str = "cipl", match_radius: float = DEFAULT_MATCH_RADIUS) -> list[Path]:
    root, entries = load_manifest(suite)
    written = []
    for e in entries:
        dense = propagate(read_volume(root / e["sparse_path"]), method, match_radius)
        written.append(write_volume(dense, pseudo_label_path(root, method, e["case_id"])))
    return written


def make_segmenter(cfg: RefineConfig, image, sparse, gt=None, seed: int = 0) -> SegmenterPair:
    if cfg.segmenter == "threshold":
        return threshold_pair(cfg.vessel_level, cfg.lumen_level)
    if cfg.segmenter == "oracle":
        if gt is None:
            raise ValueError("the oracle segmenter needs ground truth")
        return oracle_pair(gt, cfg.dilate_noise)
    imgs, labs = expert_slices(image, sparse)
    params = cfg.perturbation()
    vessel, _ = fit_prompt_segmenter(imgs, labs, "vessel", cfg.promptnet_steps, seed=seed, params=params)
    lumen, _ = fit_prompt_segmenter(imgs, labs, "lumen", cfg.promptnet_steps, seed=seed + 1, params=params)
    return SegmenterPair(vessel, lumen)


def refine_suite(suite, cfg: RefineConfig = RefineConfig(), seed: int = 0,
                 match_radius: float = DEFAULT_MATCH_RADIUS) -> list[Path]:
    """S-RPL for every case; C-IPL volumes are computed first if absent."""
    root, entries = load_manifest(suite)
    written = []
    for e in entries:
        cid = e["case_id"]
        cipl_path = pseudo_label_path(root, "cipl", cid)
        if not cipl_path.exists():
            write_volume(propagate(read_volume(root / e["sparse_path"]), "cipl", match_radius), cipl_path)
        image = read_volume(root / e["image_path"])
        sparse = read_volume(root / e["sparse_path"])
        gt = read_volume(root / e["gt_path"]) if cfg.segmenter == "oracle" else None
        seg = make_segmenter(cfg, image, sparse, gt, seed)
        refined = refine_volume(image, read_volume(cipl_path), sparse, seg, cfg.perturbation(), seed)
        written.append(write_volume(refined, pseudo_label_path(root, "srpl", cid)))
    return written


# --- comparison --------------------------------------------------------------

def compare_pseudo_labels(suite, methods=PSEUDO_LABELS, split: str | None = None) -> dict:
    """Per-slice and aggregate Dice of pseudo-labels against ground truth.

    Scored slices are the non-expert slices inside the C-IPL labelled span,
    the set every method fills. The aggregate is the mean over cases of the
    Dice pooled over those slices.
    """
    root, entries = load_manifest(suite)
    slices_rows, per_case = [], {m: {"lumen": [], "wall": []} for m in methods}
    for e in entries:
        if split is not None and e["split"] != split:
            continue
        cid = e["case_id"]
        gt = read_volume(root / e["gt_path"]).data
        expert = set(read_volume(root / e["sparse_path"]).annotated_slices)
        cipl = read_volume(pseudo_label_path(root, "cipl", cid))
        zs = [z for z in cipl.annotated_slices if z not in expert]
        if not zs:
            continue
        for m in methods:
            pred = read_volume(pseudo_label_path(root, m, cid)).data
            for cls, name in ((LUMEN, "lumen"), (WALL, "wall")):
                per_case[m][name].append(confusion(pred[zs], gt[zs], cls).dice)
            for z in zs:
                slices_rows.append({"case": cid, "slice": z, "method": m,
                                    "lumen_dice": confusion(pred[z], gt[z], LUMEN).dice,
                                    "wall_dice": confusion(pred[z], gt[z], WALL).dice})
    aggregate = {m: {name: float(np.mean(v)) if v else float("nan") for name, v in d.items()}
                 for m, d in per_case.items()}
    ranking = sorted(methods, key=lambda m: (-aggregate[m]["lumen"], methods.index(m)))
    return {"aggregate": aggregate, "ranking_by_lumen_dice": ranking,
            "n_cases": len(per_case[methods[0]]["lumen"]), "slices": slices_rows}


def write_compare(result: dict, prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    jp = prefix.with_suffix(".json")
    summary = {k: v for k, v in result.items() if k != "slices"}
    jp.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "slice", "method", "lumen_dice", "wall_dice"])
    for r in result["slices"]:
        w.writerow([r["case"], r["slice"], r["method"], f"{r['lumen_dice']:.6f}", f"{r['wall_dice']:.6f}"])
    cp = prefix.with_suffix(".csv")
    cp.write_text(buf.getvalue())
    return jp, cp


# --- training ----------------------------------------------------------------

def train_and_evaluate(suite, net: NetConfig, train_cfg: TrainConfig, labels_source: str,
                       out_dir, seed: int = 0) -> MetricReport:
    """Train on the train split, predict the test split, write the report."""
    out_dir = Path(out_dir)
    model = build_model(net, seed)
    result = train(model, suite, labels_source, train_cfg, out_dir)
    ids = predict_split(model, suite, "test", out_dir / "pred", train_cfg)
    if not ids:
        raise ValueError("manifest has no test cases")
    root, _ = load_manifest(suite)
    report = evaluate(out_dir / "pred", root / "gt", case_ids=ids)
    report.write(out_dir / "report")
    meta = {"labels_source": labels_source, "epochs": train_cfg.epochs,
            "final_epoch_loss": result.epoch_losses[-1], "val_lumen_dice": result.val_dice,
            "params": param_report(model).total}
    (out_dir / "train_summary.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return report


def ablate(suite, net: NetConfig, train_cfg: TrainConfig, labels_source: str, out_dir,
           seed: int = 0, rows=ABLATION_ROWS) -> list[dict]:
    """One training run per (BFF, MSDA) toggle, same seed and data."""
    out_dir = Path(out_dir)
    table = []
    for bff, msda in rows:
        tag = f"{'bff' if bff else 'nobff'}_{'msda' if msda else 'nomsda'}"
        cfg = dataclasses.replace(net, use_bff=bff, use_msda=msda)
        report = train_and_evaluate(suite, cfg, train_cfg, labels_source, out_dir / tag, seed)
        lumen, wall = report.means["lumen"], report.means["wall"]
        table.append({"bff": bff, "msda": msda, "params": param_report(build_model(cfg)).total,
                      "lumen_dice": lumen["dice"], "lumen_asd_mm": lumen["asd_mm"],
                      "wall_dice": wall["dice"], "wall_asd_mm": wall["asd_mm"]})
    write_ablation(table, out_dir / "ablation")
    return table


def write_ablation(table: list[dict], prefix) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    cols = ["bff", "msda", "params", "lumen_dice", "lumen_asd_mm", "wall_dice", "wall_asd_mm"]
    lines = [",".join(cols)]
    for r in table:
        cells = ["+" if r["bff"] else "-", "+" if r["msda"] else "-", str(r["params"])]
        cells += [f"{r[c]:.6f}" for c in cols[3:]]
        lines.append(",".join(cells))
    prefix.with_suffix(".csv").write_text("\n".join(lines) + "\n")


def run_all(cfg: ExperimentConfig, out_dir) -> dict:
    """phantom -> interp -> refine -> train -> eval -> compare."""
    out_dir = Path(out_dir)
    suite = out_dir / "suite"
    generate_suite(cfg.phantom, suite)
    for method in ("aipl", "cipl"):
        interpolate_suite(suite, method, cfg.interp.match_radius)
    refine_suite(suite, cfg.refine, cfg.seed, cfg.interp.match_radius)
    cmp = compare_pseudo_labels(suite)
    write_compare(cmp, out_dir / "compare")
    report = train_and_evaluate(suite, cfg.net, cfg.train, cfg.labels_source, out_dir / "train", cfg.seed)
    summary = {"compare": {k: v for k, v in cmp.items() if k != "slices"},
               "test_means": json.loads(report.to_json())["means"],
               "config": cfg.to_dict()}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
