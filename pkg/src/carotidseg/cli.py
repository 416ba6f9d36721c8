"""Command-line entry point: ``carotidseg <command> [options]``.

Every command accepts ``--config path.json`` (an ExperimentConfig document);
explicit flags override the file. Failures print one JSON object on stderr
and exit nonzero.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .phantom import generate_suite, load_manifest
from .pipeline import (ABLATION_ROWS, ExperimentConfig, ablate, compare_pseudo_labels,
                       interpolate_suite, refine_suite, run_all, train_and_evaluate, write_compare)
from .training import evaluate
from .volume import VolumeFormatError

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        emit_error("usage", message)
        sys.exit(EXIT_USAGE)


def emit_error(kind: str, message: str, command: str | None = None) -> None:
    doc = {"error": kind, "message": message}
    if command:
        doc["command"] = command
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    net_over = {}
    train_over = {}
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        train_over["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        train_over["epochs"] = args.epochs
    if getattr(args, "patch_size", None) is not None:
        train_over["patch_size"] = args.patch_size
    if getattr(args, "channels", None) is not None:
        net_over["channels"] = tuple(args.channels)
    if getattr(args, "labels", None) is not None:
        cfg.labels_source = args.labels
    # rebuild so that validation reruns on the overridden values
    doc = cfg.to_dict()
    doc["net"].update(net_over)
    doc["train"].update(train_over)
    return ExperimentConfig.from_dict(doc)


def suite_dir(path) -> Path:
    root, _ = load_manifest(path)
    return root


def cmd_phantom(args, cfg: ExperimentConfig) -> dict:
    over = {}
    if args.n_cases is not None:
        over["n_cases"] = args.n_cases
        over["split"] = tuple(args.split) if args.split else _default_split(args.n_cases)
    elif args.split:
        over["split"] = tuple(args.split)
    if args.dims:
        over["dims"] = tuple(args.dims)
    if args.phantom_seed is not None:
        over["seed"] = args.phantom_seed
    suite_cfg = dataclasses.replace(cfg.phantom, **over)
    manifest = generate_suite(suite_cfg, args.out)
    return {"suite": str(Path(args.out)), "cases": len(manifest)}


def _default_split(n: int) -> tuple[int, int, int]:
    n_val = 1 if n >= 3 else 0
    n_test = max(1, round(0.2 * n)) if n >= 2 else 0
    return n - n_val - n_test, n_val, n_test


def cmd_interp(args, cfg):
    method = args.method or cfg.interp.method
    radius = args.match_radius if args.match_radius is not None else cfg.interp.match_radius
    written = interpolate_suite(suite_dir(args.suite), method, radius)
    return {"method": method, "written": len(written)}


def cmd_refine(args, cfg):
    over = {k: v for k, v in (("segmenter", args.segmenter), ("k", args.k), ("scale", args.scale),
                              ("max_noise", args.max_noise)) if v is not None}
    rcfg = dataclasses.replace(cfg.refine, **over)
    written = refine_suite(suite_dir(args.suite), rcfg, cfg.seed, cfg.interp.match_radius)
    return {"segmenter": rcfg.segmenter, "written": len(written)}


def cmd_train(args, cfg):
    report = train_and_evaluate(suite_dir(args.suite), cfg.net, cfg.train, cfg.labels_source,
                                args.out, cfg.seed)
    return {"out": str(args.out), "means": json.loads(report.to_json())["means"]}


def cmd_eval(args, cfg):
    ids = args.cases or None
    report = evaluate(args.pred, args.gt, case_ids=ids)
    jp, cp = report.write(args.out)
    return {"json": str(jp), "csv": str(cp), "means": json.loads(report.to_json())["means"]}


def cmd_compare(args, cfg):
    result = compare_pseudo_labels(suite_dir(args.suite), split=args.split)
    jp, cp = write_compare(result, args.out)
    return {"json": str(jp), "csv": str(cp), "aggregate": result["aggregate"],
            "ranking_by_lumen_dice": result["ranking_by_lumen_dice"]}


def cmd_ablate(args, cfg):
    rows = ABLATION_ROWS
    if args.rows:
        rows = tuple(_parse_row(r) for r in args.rows)
    table = ablate(suite_dir(args.suite), cfg.net, cfg.train, cfg.labels_source, args.out,
                   cfg.seed, rows)
    return {"rows": table}


def _parse_row(text: str) -> tuple[bool, bool]:
    table = {"none": (False, False), "bff": (True, False), "msda": (False, True), "both": (True, True)}
    if text not in table:
        raise CliError(f"ablation row must be one of {sorted(table)}, got {text!r}")
    return table[text]


def cmd_run_all(args, cfg):
    summary = run_all(cfg, args.out)
    return {"out": str(args.out), "compare": summary["compare"], "test_means": summary["test_means"]}


def build_parser() -> argparse.ArgumentParser:
    p = JsonArgumentParser(prog="carotidseg",
                           description="Sparse-annotation carotid segmentation on synthetic phantoms.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=JsonArgumentParser)

    def command(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="ExperimentConfig JSON file")
        sp.set_defaults(func=func)
        return sp

    sp = command("phantom", cmd_phantom, "generate a phantom suite")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-cases", type=int)
    sp.add_argument("--split", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    sp.add_argument("--dims", type=int, nargs=3, metavar=("D", "H", "W"))
    sp.add_argument("--phantom-seed", type=int)

    sp = command("interp", cmd_interp, "dense pseudo-labels from sparse annotations")
    sp.add_argument("--suite", required=True)
    sp.add_argument("--method", choices=["aipl", "cipl"])
    sp.add_argument("--match-radius", type=float)

    sp = command("refine", cmd_refine, "segmenter-refined pseudo-labels (S-RPL)")
    sp.add_argument("--suite", required=True)
    sp.add_argument("--segmenter", choices=["threshold", "oracle", "promptnet"])
    sp.add_argument("--k", type=int)
    sp.add_argument("--scale", type=float)
    sp.add_argument("--max-noise", type=float)
    sp.add_argument("--seed", type=int)

    for name, func, help_text in (("train", cmd_train, "train DBF-UNet and evaluate the test split"),
                                  ("ablate", cmd_ablate, "BFF/MSDA ablation table")):
        sp = command(name, func, help_text)
        sp.add_argument("--suite", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--labels", choices=["gt", "aipl", "cipl", "srpl"])
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--patch-size", type=int)
        sp.add_argument("--channels", type=int, nargs="+")
        sp.add_argument("--seed", type=int)
        if name == "ablate":
            sp.add_argument("--rows", nargs="+", metavar="ROW",
                            help="subset of none, bff, msda, both (which of BFF/MSDA are on)")

    sp = command("eval", cmd_eval, "metrics of predicted label volumes")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True, help="report path prefix (.json and .csv are added)")
    sp.add_argument("--cases", nargs="+")

    sp = command("compare", cmd_compare, "rank A-IPL, C-IPL and S-RPL against ground truth")
    sp.add_argument("--suite", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=["train", "val", "test"])

    sp = command("run-all", cmd_run_all, "phantom, interp, refine, train, eval and compare")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        result = args.func(args, cfg)
    except (CliError, ValueError, FileNotFoundError, VolumeFormatError, RuntimeError) as exc:
        emit_error(type(exc).__name__, str(exc), args.command)
        return EXIT_FAILURE
    sys.stdout.write(json.dumps(result, indent=2, sort_keys=True, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
