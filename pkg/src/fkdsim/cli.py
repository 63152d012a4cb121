"""Command-line entry point: ``fkdsim <subcommand> ...``.

Exit codes: 0 success, 1 configuration/input error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

from . import __version__
from .comms import UNITS, convert
from .config import ExperimentConfig, load_config
from .datasets import generate_synthetic, write_manifest_tree
from .errors import ConfigError, FkdError, FormatError, IoError, SchemaError, ShapeError
from .fedavg import run_fedavg_experiment
from .fkd import run_fkd_experiment
from .nn.spec import infer_shapes, layer_param_counts, load_spec, count_parameters
from .partition import partition_stats
from .preprocess import ClaheConfig, PipelineConfig, clahe, normalize, read_pgm, resize_bilinear, to_levels, write_pgm
from .report import dumps_report, load_report, write_checkpoint, write_rounds_csv

log = logging.getLogger("fkdsim")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _fail(message, code=EXIT_CONFIG):
    raise CliError(message, code)


def _load(args, protocol=None) -> ExperimentConfig:
    try:
        cfg = load_config(args.config)
        if protocol is not None:
            cfg = cfg.with_overrides({"experiment.protocol": protocol})
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except ConfigError as exc:
        _fail(f"config error: {exc}")
    return cfg


def _prepare(cfg):
    try:
        return cfg.prepare()
    except (ConfigError, IoError, FormatError, ShapeError) as exc:
        _fail(f"data error: {exc}")


def _run(args, protocol):
    cfg = _load(args, protocol)
    run_dir = Path(args.out) / f"{protocol}-{cfg.digest()}-seed{cfg.seed}"
    if (run_dir / "report.json").exists() and not args.force:
        print(f"{run_dir}: already complete (use --force to recompute)")
        return EXIT_OK
    ds, data, part = _prepare(cfg)
    try:
        proto_cfg = cfg.distill_config(ds) if protocol == "fkd" else cfg.fedavg_config(ds)
    except (ConfigError, FormatError, ShapeError) as exc:
        _fail(f"config error: {exc}")
    try:
        runner = run_fkd_experiment if protocol == "fkd" else run_fedavg_experiment
        report = runner(proto_cfg, data, part, threads=args.threads)
    except FkdError as exc:
        _fail(f"runtime error: {exc}", EXIT_RUNTIME)
    report.config = cfg.values

    if run_dir.exists():
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    (run_dir / "config.json").write_text(cfg.canonical_json())
    (run_dir / "report.json").write_text(dumps_report(report))
    write_rounds_csv(report, run_dir / "rounds.csv")
    report.ledger.to_csv(run_dir / "ledger.csv")
    part.to_csv(run_dir / "partition.csv")
    write_checkpoint(report.final_model, run_dir / "checkpoint", "student" if protocol == "fkd" else "global")
    last = report.rounds[-1]
    print(f"{run_dir}: {len(report.rounds)} rounds, final test accuracy {last.test_accuracy:.4f}")
    return EXIT_OK


def cmd_run_fkd(args):
    return _run(args, "fkd")


def cmd_run_fedavg(args):
    return _run(args, "fedavg")


def _fmt(value, unit):
    if value is None:
        return "-"
    return f"{value:.0f}" if unit == "B" else f"{value:.2f}"


def summarize(doc: dict, unit: str) -> dict:
    rounds = doc["rounds"]
    by_round = {r["round"]: r for r in rounds}
    r10 = by_round.get(10)
    n = max(len(rounds), 1)
    return {
        "method": doc["protocol"],
        "total_rounds": len(rounds),
        "round10_accuracy": None if r10 is None else 100 * r10["test_accuracy"],
        "last_accuracy": 100 * rounds[-1]["test_accuracy"] if rounds else None,
        "upload_per_round": convert(sum(r["upload_bytes"] for r in rounds) / n, unit),
        "download_per_round": convert(sum(r["download_bytes"] for r in rounds) / n, unit),
    }


def cmd_compare(args):
    try:
        docs = [load_report(p) for p in (args.report_a, args.report_b)]
    except SchemaError as exc:
        _fail(f"schema error: {exc}")
    except OSError as exc:
        _fail(f"cannot read report: {exc}")
    unit = args.unit
    header = ["Method", "Total Rounds", "Round 10 Accuracy (%)", "Last Round Accuracy (%)",
              f"Upload per Round ({unit})", f"Download per Round ({unit})"]
    rows = []
    for doc in docs:
        s = summarize(doc, unit)
        rows.append([
            s["method"], str(s["total_rounds"]),
            "-" if s["round10_accuracy"] is None else f"{s['round10_accuracy']:.2f}",
            "-" if s["last_accuracy"] is None else f"{s['last_accuracy']:.2f}",
            _fmt(s["upload_per_round"], unit), _fmt(s["download_per_round"], unit),
        ])
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    print(" | ".join(h.ljust(w) for h, w in zip(header, widths)))
    print("-+-".join("-" * w for w in widths))
    for r in rows:
        print(" | ".join(c.ljust(w) for c, w in zip(r, widths)))
    if args.out:
        with Path(args.out).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    return EXIT_OK


def cmd_partition_report(args):
    cfg = _load(args)
    _, data, part = _prepare(cfg)
    stats = partition_stats(part, data.private_pool.labels, data.private_pool.num_classes)
    names = data.private_pool.class_names
    header = ["client", "size"] + [f"p_{n}" for n in names] + ["tv"]
    rows = [[str(cid), str(size)] + [f"{p:.4f}" for p in props] + [f"{tv:.4f}"]
            for cid, (size, props, tv) in enumerate(zip(stats["sizes"], stats["class_proportions"], stats["client_tv"]))]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    print(" | ".join(h.rjust(w) for h, w in zip(header, widths)))
    for r in rows:
        print(" | ".join(c.rjust(w) for c, w in zip(r, widths)))
    print(f"heterogeneity (mean TV to global): {stats['heterogeneity']:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "partition_stats.csv").open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        part.to_csv(out / "partition.csv")
        (out / "partition_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_audit_model(args):
    try:
        spec = load_spec(args.spec)
        shapes = infer_shapes(spec)
        counts = layer_param_counts(spec)
        total, trainable, frozen = count_parameters(spec)
    except (FormatError, ShapeError) as exc:
        _fail(f"{args.spec}: {exc}")
    except OSError as exc:
        _fail(f"{args.spec}: {exc.strerror or exc}")
    kinds = [layer.kind for layer in spec.layers]
    shape_txt = ["(" + ", ".join(str(d) for d in s) + ")" for s in shapes]
    kw = max([len("Layer (type)")] + [len(k) for k in kinds])
    sw = max([len("Output Shape")] + [len(s) for s in shape_txt])
    print(f"{'#':>3} | {'Layer (type)':<{kw}} | {'Output Shape':<{sw}} | Param #")
    for i, (kind, s, c) in enumerate(zip(kinds, shape_txt, counts), start=1):
        print(f"{i:>3} | {kind:<{kw}} | {s:<{sw}} | {c}")
    print(f"Total parameters: {total}")
    print(f"Trainable parameters: {trainable}")
    print(f"Non-trainable parameters: {frozen}")
    return EXIT_OK


def cmd_preprocess(args):
    src, dst = Path(args.in_dir), Path(args.out_dir)
    if not src.is_dir():
        _fail(f"{src}: not a directory")
    try:
        cfg = PipelineConfig(
            (args.size, args.size), 1,
            None if args.no_clahe else ClaheConfig(args.clip_limit, (args.tiles[0], args.tiles[1]), args.bins),
            not args.clahe_after_resize,
        )
    except FkdError as exc:
        _fail(f"invalid options: {exc}")
    files = sorted(p for p in src.rglob("*.pgm") if p.is_file())
    dst.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in files:
        rel = path.relative_to(src)
        try:
            levels, bits = read_pgm(path)
            img = normalize(levels, bits)
            if cfg.clahe is not None and cfg.clahe_before_resize:
                img = clahe(img, cfg.clahe)
            img = resize_bilinear(img, cfg.size)
            if cfg.clahe is not None and not cfg.clahe_before_resize:
                img = clahe(img, cfg.clahe)
        except FkdError as exc:
            _fail(f"{path}: {exc}", EXIT_RUNTIME)
        target = dst / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(target, to_levels(img, args.bits), args.bits)
        label = rel.parent.as_posix() if rel.parent != Path(".") else "unlabeled"
        rows.append((rel.as_posix(), label))
    with (dst / "manifest.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        writer.writerows(rows)
    print(f"processed {len(rows)} images into {dst}")
    return EXIT_OK


def cmd_gen_synthetic(args):
    try:
        ds = generate_synthetic(args.classes, args.per_class, (args.size, args.size), args.seed, 1, args.noise)
    except FkdError as exc:
        _fail(str(exc))
    manifest = write_manifest_tree(ds, args.out)
    print(f"wrote {len(ds)} images and {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fkdsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (("run-fkd", cmd_run_fkd, "run a distillation experiment"),
                               ("run-fedavg", cmd_run_fedavg, "run the FedAvg baseline")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="INI/JSON config, or builtin:<name>")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--out", default="runs", help="parent directory for run directories")
        p.add_argument("--threads", type=int, default=1, help="parallel teachers/clients (results unchanged)")
        p.add_argument("--force", action="store_true", help="recompute an existing run")
        p.set_defaults(func=fn)

    p = sub.add_parser("compare", help="side-by-side summary of two reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--unit", choices=UNITS, default="Mb")
    p.add_argument("--out", default=None, help="also write the table as CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("partition-report", help="client class mix and heterogeneity")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=None, help="directory for CSV/JSON output")
    p.set_defaults(func=cmd_partition_report)

    p = sub.add_parser("audit-model", help="per-layer shapes and parameter counts")
    p.add_argument("spec", help="spec file or builtin:<name>")
    p.set_defaults(func=cmd_audit_model)

    p = sub.add_parser("preprocess", help="normalize/CLAHE/resize a directory of PGMs")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--no-clahe", action="store_true")
    p.add_argument("--clip-limit", type=float, default=2.0)
    p.add_argument("--tiles", type=int, nargs=2, default=(8, 8), metavar=("ROWS", "COLS"))
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--clahe-after-resize", action="store_true")
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("gen-synthetic", help="write a synthetic PGM dataset with manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"fkdsim: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
