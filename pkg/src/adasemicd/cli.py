"""Command-line surface: train, eval, ablate, gen-data, export-metrics.

Exit codes: 0 success, 2 configuration or file error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional

from . import config as cfgmod
from . import trainer as trainermod
from .config import ConfigError
from .numerics import save_raster
from .synthdata import generate_pair, make_splits
from .trainer import NonFiniteLossError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

# Table-style ablation rows: name -> config overrides.
ABLATION_MODULES = {
    "sup_only": {"ramp.w_max": "0.0", "fusion.mode": "off", "ema.mode": "plain"},
    "mt_ema": {"fusion.mode": "off", "ema.mode": "plain"},
    "mt_aema": {"fusion.mode": "off", "ema.mode": "ada"},
    "af_star": {"fusion.mode": "af_star", "ema.mode": "plain"},
    "af": {"fusion.mode": "af", "ema.mode": "plain"},
    "full": {"fusion.mode": "af", "ema.mode": "ada"},
}
ABLATION_METRICS = {
    "metric_entropy": {"metric.mode": "entropy"},
    "metric_rebalance": {"metric.mode": "rebalance"},
    "metric_confusion": {"metric.mode": "confusion"},
    "metric_uncertainty": {"metric.mode": "uncertainty"},
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adasemicd")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, help="override train.seed")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, repeatable")
        sp.add_argument("--mode", choices=["af", "af_star", "off"], help="fusion mode")
        sp.add_argument("--ema", choices=["ada", "plain", "off-teacher-equals-student"])
        sp.add_argument("--metric", choices=["entropy", "rebalance", "confusion", "uncertainty"])
        sp.add_argument("--sign", choices=["literal", "prose"], help="uncertainty-delta sign")

    common(sub.add_parser("train", help="run the training loop"))

    sp = sub.add_parser("eval", help="score a checkpoint on the seeded validation set")
    common(sp)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("ablate", help="run the ablation grid on one seeded dataset")
    common(sp)
    sp.add_argument("--suite", choices=["modules", "metrics", "both"], default="modules")

    common(sub.add_parser("gen-data", help="materialize the dataset to disk"))

    sp = sub.add_parser("export-metrics", help="convert a metrics CSV to long format")
    sp.add_argument("--metrics", required=True, help="metrics.csv produced by train")
    sp.add_argument("--out", help="output file; stdout when omitted")
    return p


def _gather_config(args) -> Dict[str, cfgmod.Value]:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.defaults()
    cfgmod.apply_overrides(cfg, args.set)
    flag_keys = [
        ("seed", "train.seed"),
        ("mode", "fusion.mode"),
        ("ema", "ema.mode"),
        ("metric", "metric.mode"),
        ("sign", "ema.sign"),
    ]
    for attr, key in flag_keys:
        value = getattr(args, attr, None)
        if value is not None:
            cfgmod.apply_overrides(cfg, [f"{key}={value}"])
    return cfg


def _write_snapshot(cfg: Dict[str, cfgmod.Value], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved"), "w") as f:
        f.write(cfgmod.snapshot_text(cfg))


def cmd_train(args) -> int:
    cfg_dict = _gather_config(args)
    tc = cfgmod.resolve(cfg_dict)
    _write_snapshot(cfg_dict, args.out)
    try:
        _, (iou, oa_val) = trainermod.run(tc, args.out)
    except NonFiniteLossError as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"val_iou_c={iou:.10g} val_oa={oa_val:.10g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg_dict = _gather_config(args)
    tc = cfgmod.resolve(cfg_dict)
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    iou, oa_val = trainermod.evaluate_checkpoint(args.checkpoint, tc)
    print(f"val_iou_c={iou:.10g} val_oa={oa_val:.10g}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg_dict = _gather_config(args)
    rows = {}
    if args.suite in ("modules", "both"):
        rows.update(ABLATION_MODULES)
    if args.suite in ("metrics", "both"):
        rows.update(ABLATION_METRICS)
    os.makedirs(args.out, exist_ok=True)
    lines = ["name,iou_c,oa"]
    for name, overrides in rows.items():
        row_cfg = dict(cfg_dict)
        cfgmod.apply_overrides(row_cfg, [f"{k}={v}" for k, v in overrides.items()])
        tc = cfgmod.resolve(row_cfg)
        row_dir = os.path.join(args.out, name)
        _write_snapshot(row_cfg, row_dir)
        try:
            _, (iou, oa_val) = trainermod.run(tc, row_dir)
        except NonFiniteLossError as e:
            print(f"aborted in {name}: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        line = f"{name},{iou:.10g},{oa_val:.10g}"
        lines.append(line)
        print(line)
    with open(os.path.join(args.out, "ablate.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg_dict = _gather_config(args)
    tc = cfgmod.resolve(cfg_dict)
    scene = replace(tc.scene, seed=tc.seed)
    split = make_splits(scene, tc.n_total, tc.label_ratio, tc.seed, tc.n_val)
    os.makedirs(args.out, exist_ok=True)
    _write_snapshot(cfg_dict, args.out)
    manifest = ["index role seed"]
    idx = 0
    for role, pairs in (("labeled", split.labeled), ("unlabeled", split.unlabeled), ("val", split.val)):
        for pair in pairs:
            save_raster(os.path.join(args.out, f"{idx:05d}_a.ascd"), pair.img_a)
            save_raster(os.path.join(args.out, f"{idx:05d}_b.ascd"), pair.img_b)
            if pair.truth is not None:
                save_raster(
                    os.path.join(args.out, f"{idx:05d}_truth.ascd"),
                    pair.truth.astype("float32"),
                )
            manifest.append(f"{idx} {role} {tc.seed}")
            idx += 1
    with open(os.path.join(args.out, "manifest.txt"), "w") as f:
        f.write("\n".join(manifest) + "\n")
    print(f"wrote {idx} pairs to {args.out}")
    return EXIT_OK


def cmd_export_metrics(args) -> int:
    try:
        with open(args.metrics) as f:
            lines = [line.rstrip("\n") for line in f if line.strip()]
    except OSError as e:
        raise ConfigError(f"cannot read metrics file {args.metrics}: {e}") from e
    out_lines = ["iter,metric,value"]
    if lines:
        header = lines[0].split(",")
        for row in lines[1:]:
            cells = row.split(",")
            for name, cell in zip(header[2:], cells[2:]):  # skip iter,epoch
                if cell != "":
                    out_lines.append(f"{cells[0]},{name},{cell}")
    text = "\n".join(out_lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
        "gen-data": cmd_gen_data,
        "export-metrics": cmd_export_metrics,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
