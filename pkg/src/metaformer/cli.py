"""Command-line entry point.

Exit codes: 0 ok, 1 check failure, 2 validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError, NumericError, ShapeError, ValidationError

EXIT_OK, EXIT_CHECK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("metaformer")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    from .config import all_flags

    p.add_argument("--config", help="INI run config (sections: model, train, data, synthetic, export)")
    group = p.add_argument_group("config overrides")
    for flag, (section, tp, default) in all_flags().items():
        name = getattr(tp, "__name__", str(tp)).replace("typing.", "")
        group.add_argument(flag, dest=flag[2:], default=None, metavar="VALUE",
                           help=f"{section} setting ({name}, default {default})")


def _overrides(args: argparse.Namespace) -> Dict[str, str]:
    return {k: v for k, v in vars(args).items() if "." in k and v is not None}


def _load(args):
    from .config import load_run_config

    return load_run_config(args.config, _overrides(args))


def _datasets(cfg):
    from .synthetic import generate_synthetic, read_mfds

    if cfg.data.train:
        for p in (cfg.data.train, cfg.data.test):
            if not Path(p).is_file():
                raise ValidationError("data", f"dataset file not found: {p}")
        return None, read_mfds(cfg.data.train), read_mfds(cfg.data.test)
    spec = cfg.synthetic
    kinds = ("geo", "datetime", "attribute", "text")
    return generate_synthetic(spec, spec.schema(kinds))


# -- commands -----------------------------------------------------------------
def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .train import build_model, evaluate, train

    cfg = _load(args)
    _, train_set, test_set = _datasets(cfg)
    model_cfg = cfg.model.build(train_set.schema, train_set.num_classes)
    tc = cfg.train
    if tc.use_meta and not model_cfg.meta:
        tc = dataclasses.replace(tc, use_meta=False)
    out = Path(cfg.export.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(model_cfg, tc.seed, tc.dtype)
    t0 = time.perf_counter()
    report = train(model, train_set, tc)
    elapsed = time.perf_counter() - t0
    report.write_csv(out / "metrics.csv")
    digest = save_checkpoint(model, out / "model.mfck")
    image_only = evaluate(model, test_set, use_meta=False)
    summary = {"image_only_top1": image_only.top1, "train_seconds": round(elapsed, 3),
               "checkpoint_sha256": digest, "steps": len(report.step)}
    if model_cfg.meta:
        summary["image_meta_top1"] = evaluate(model, test_set, use_meta=True).top1
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for k in sorted(summary):
        print(f"{k}: {summary[k]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import evaluate

    cfg = _load(args)
    model = load_checkpoint(args.checkpoint)
    _, _, test_set = _datasets(cfg)
    print(f"image_only_top1: {evaluate(model, test_set, use_meta=False).top1:.4f}")
    if model.config.meta:
        print(f"image_meta_top1: {evaluate(model, test_set, use_meta=True).top1:.4f}")
    return EXIT_OK


def cmd_count(args) -> int:
    from .accounting import count_table
    from .model import PRESETS, preset

    if args.config or _overrides(args):
        cfg = _load(args)
        schema = cfg.synthetic.schema(("geo", "datetime", "attribute", "text"))
        configs = [cfg.model.build(schema, cfg.synthetic.num_classes)]
        names = [cfg.model.preset]
    else:
        names = args.preset or ["metaformer-0", "metaformer-1", "metaformer-2"]
        unknown = [n for n in names if n not in PRESETS]
        if unknown:
            raise ValidationError("preset", f"unknown preset(s) {unknown}; valid names: {sorted(PRESETS)}")
        configs = [preset(n) for n in names]
    sizes = tuple(args.sizes)
    print(f"{'model':<14}{'image':>7}{'params':>14}{'params(M)':>11}{'FLOPs(G)':>10}{'MACs(G)':>9}")
    for name, config in zip(names, configs):
        for row in count_table(config, sizes):
            print(f"{name:<14}{row.image_size:>7}{row.params:>14,}{row.params / 1e6:>11.2f}"
                  f"{row.flops / 1e9:>10.2f}{row.macs / 1e9:>9.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import SUITE_SCOPES, SUITE_TOLERANCE, run_suite

    if args.scope not in SUITE_SCOPES:
        raise ValidationError("scope", f"unknown scope {args.scope!r}; expected one of {SUITE_SCOPES}")
    res = run_suite(args.scope, seed=args.seed)
    failed = []
    for name, err in res.errors.items():
        ok = err <= SUITE_TOLERANCE
        print(f"{name:<24} {err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    print(f"worst: {res.worst:.3e} ({res.worst_name})")
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_geomap(args) -> int:
    from .checkpoint import load_checkpoint
    from .viz import spatial_prediction_grid, write_csv_matrix, write_pgm

    cfg = _load(args)
    ex = cfg.export
    model = load_checkpoint(args.checkpoint)
    if not model.config.meta.has("geo"):
        raise ValidationError("checkpoint", "model has no geo meta channel")
    image = None
    if ex.image_mode == "mean":
        _, train_set, _ = _datasets(cfg)
        sel = train_set.labels == ex.category
        if not sel.any():
            raise ValidationError("export.category", f"no training samples of class {ex.category}")
        image = train_set.images[sel].mean(axis=0)
    grid = spatial_prediction_grid(model, ex.category, ex.grid_h, ex.grid_w, ex.month, ex.hour, image,
                                   ex.image_mode)
    out = Path(ex.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"geomap_class{ex.category}"
    write_csv_matrix(stem.with_suffix(".csv"), grid)
    write_pgm(stem.with_suffix(".pgm"), grid, 0.0, 1.0)
    r, c = np.unravel_index(int(np.argmax(grid)), grid.shape)
    print(f"wrote {stem}.csv and {stem}.pgm ({ex.grid_h}x{ex.grid_w}); argmax cell ({r}, {c})")
    return EXIT_OK


def cmd_simreport(args) -> int:
    import csv

    from .checkpoint import load_checkpoint
    from .viz import report_rows, token_similarity_report, write_pgm

    cfg = _load(args)
    ex = cfg.export
    model = load_checkpoint(args.checkpoint)
    _, _, test_set = _datasets(cfg)
    if not 0 <= ex.sample_index < len(test_set):
        raise ValidationError("export.sample_index", f"must be in [0, {len(test_set)})")
    missing = [c.kind for c in model.config.meta.channels if not test_set.schema.has(c.kind)]
    if missing:
        raise ValidationError("data", f"dataset lacks the model's meta channels {missing}")
    rep = token_similarity_report(model, test_set.images[ex.sample_index], test_set.records[ex.sample_index],
                                  ex.k_vision, ex.k_word, ex.stage)
    out = Path(ex.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"simreport_{ex.sample_index}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["kind", "rank", "index", "score"], lineterminator="\n")
        w.writeheader()
        for row in report_rows(rep):
            w.writerow({**row, "score": repr(float(row["score"]))})
    print(f"wrote {path}")
    if rep.word_attention is not None:
        for k, pos in enumerate(rep.word_indices):
            p = out / f"simreport_{ex.sample_index}_word{pos}.pgm"
            write_pgm(p, rep.word_attention[pos])
            print(f"wrote {p}")
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    from .synthetic import write_mfds

    cfg = _load(args)
    if cfg.data.train:
        raise ValidationError("data", "make-synthetic writes data.train/data.test; do not set them")
    _, train_set, test_set = _datasets(cfg)
    out = Path(cfg.export.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_mfds(out / "train.mfds", train_set)
    write_mfds(out / "test.mfds", test_set)
    print(f"wrote {out / 'train.mfds'} ({len(train_set)}) and {out / 'test.mfds'} ({len(test_set)})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaformer", description="Hybrid conv-transformer with meta tokens.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model and write checkpoint, metrics.csv and report.json")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint with and without meta information")
    s.add_argument("checkpoint")
    _add_config_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("count", help="analytic parameter and FLOP table")
    s.add_argument("preset", nargs="*", help="preset names (default: metaformer-0/1/2)")
    s.add_argument("--sizes", type=int, nargs="+", default=[224, 384], help="image sizes (default 224 384)")
    _add_config_flags(s)
    s.set_defaults(func=cmd_count)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("scope", help="ops, blocks or model")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("geomap", help="export a spatial prediction grid (CSV + PGM)")
    s.add_argument("checkpoint")
    _add_config_flags(s)
    s.set_defaults(func=cmd_geomap)

    s = sub.add_parser("simreport", help="export class-token similarity rankings and word attention maps")
    s.add_argument("checkpoint")
    _add_config_flags(s)
    s.set_defaults(func=cmd_simreport)

    s = sub.add_parser("make-synthetic", help="write the synthetic train/test sets as MFDS files")
    _add_config_flags(s)
    s.set_defaults(func=cmd_make_synthetic)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, ContractError, CheckpointError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
