"""Command-line entry point: ``rttdp run | pretrain | gen-data | poison-dump | report-merge``.

Exit status: 0 success, 1 runtime failure, 2 invalid configuration or
arguments, 3 grey-box audit violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config, reference_config_path
from .data import load_dataset, save_dataset
from .errors import AuditError, ConfigError, ContractError, FormatError, RttdpError
from .experiment import prepare_source, prepare_stream, resolve_workers, run_grid, write_report
from .forge import LagrangeState, PoisonBatch, check_budget, synthesize
from .nn import build_model, save_checkpoint
from .protocol import read_rows, rows_to_csv, summary_table, table_from_rows, validate_report

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_AUDIT = 0, 1, 2, 3
logger = logging.getLogger("rttdp")


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def _config_path(args) -> Path:
    return reference_config_path() if args.config == "reference" else Path(args.config)


def _config(args):
    path = _config_path(args)
    overrides = _overrides(getattr(args, "set", None))
    if getattr(args, "seeds", None):
        overrides["seeds"] = "[" + args.seeds + "]"
    if getattr(args, "output", None):
        overrides["output"] = args.output
    return load_config(path, overrides)


def cmd_run(args) -> int:
    cfg = _config(args)
    workers = resolve_workers(args.workers, cfg.workers)
    report = run_grid(cfg, workers=workers)
    paths = write_report(report, cfg.output)
    validate_report(json.loads(paths["json"].read_text()))
    read_rows(paths["csv"].read_text())
    print(report.summary_table(), end="")
    print(f"wrote {paths['json']}, {paths['csv']}, {paths['summary']}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if cfg.spec is None:
        raise ConfigError("pretrain needs a synthetic dataset spec")
    if args.epochs is not None:
        cfg.source["epochs"] = args.epochs
    cfg.source.pop("checkpoint", None)
    model = prepare_source(cfg)
    save_checkpoint(model, args.out)
    print(f"wrote {args.out} ({model.arch})")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if cfg.spec is None:
        raise ConfigError("gen-data needs a synthetic dataset spec")
    stream = prepare_stream(cfg, args.seed)
    x, y, _ = stream.flat()
    save_dataset(args.out, x, y, cfg.spec.num_classes, segments=len(stream.segments))
    print(f"wrote {args.out}: {len(y)} samples in {len(stream.segments)} segments")
    return EXIT_OK


def cmd_poison_dump(args) -> int:
    """Synthesize the first adversary batch against the initial surrogate and store it.

    The file holds two segments: the clean batch, then its poisoned version.
    """
    cfg = _config(args)
    attack = next((a for a in cfg.attacks if a.label == args.attack and a.kind is not None), None)
    if attack is None:
        raise ConfigError(f"attack {args.attack!r} is not a poisoning attack in the config")
    source = prepare_source(cfg)
    stream = prepare_stream(cfg, args.seed)
    n = cfg.schedule.get("batch_size", 16)
    seg = stream.segments[0]
    batch = PoisonBatch(seg.adversary_x[:n], seg.adversary_y[:n], budget=cfg.pgd.budget,
                        step_size=cfg.pgd.step_size, steps=cfg.pgd.steps)
    objective = attack.build(args.seed)
    objective.reset(source.num_classes)
    random_model = None
    if objective.kind == "Unlearnable":
        random_model = build_model(source.arch.split(":")[0], source.input_shape, source.num_classes,
                                   seed=args.seed + 7919)
    synthesize(batch, objective, source, LagrangeState.zeros(source.n_bn, rate=cfg.pgd.lagrange_rate),
               rng=np.random.default_rng(args.seed), reg_reduction=cfg.pgd.reg_reduction,
               clean_norm=cfg.pgd.clean_norm, random_model=random_model)
    save_dataset(args.out, np.concatenate([batch.clean, batch.poisoned]), np.concatenate([batch.labels] * 2),
                 source.num_classes, segments=2)
    back = load_dataset(args.out)
    half = len(back["y"]) // 2
    check_budget(back["x"][:half], back["x"][half:], cfg.pgd.budget)
    print(f"wrote {args.out}: {half} clean + {half} poisoned samples, "
          f"max |eps| {np.abs(batch.eps).max():.4f} <= {cfg.pgd.budget}")
    return EXIT_OK


def cmd_report_merge(args) -> int:
    rows, header_seen = [], set()
    for path in args.inputs:
        for row in read_rows(Path(path).read_text()):
            key = (row["victim"], row["attack"], row["mode"], row["r"], row["seed"], row["segment"])
            if key in header_seen:
                raise ContractError(f"{path}: duplicate record {key}")
            header_seen.add(key)
            rows.append(row)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rows_to_csv(rows))
    summary = summary_table(table_from_rows(rows))
    out.with_name(out.stem + "-summary.csv").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rttdp", description="Test-time data-poisoning lab.")
    p.add_argument("--version", action="version", version=f"rttdp {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-run progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="YAML config path, or 'reference' for the pinned benchmark")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
        return sp

    run = with_config(sub.add_parser("run", help="run the victim x attack x seed grid"))
    run.add_argument("--output", help="report directory")
    run.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    run.add_argument("--workers", type=int, help="worker threads (else RTTDP_WORKERS, else config)")
    run.set_defaults(func=cmd_run)

    pre = with_config(sub.add_parser("pretrain", help="train the source model and save a checkpoint"))
    pre.add_argument("--out", required=True)
    pre.add_argument("--epochs", type=int)
    pre.set_defaults(func=cmd_pretrain)

    gen = with_config(sub.add_parser("gen-data", help="write one seed's stream as a dataset file"))
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_gen_data)

    dump = with_config(sub.add_parser("poison-dump", help="synthesize and store one poisoned batch"))
    dump.add_argument("--attack", required=True, help="attack label from the config")
    dump.add_argument("--out", required=True)
    dump.add_argument("--seed", type=int, default=0)
    dump.set_defaults(func=cmd_poison_dump)

    merge = sub.add_parser("report-merge", help="concatenate run CSVs and recompute average ranks")
    merge.add_argument("inputs", nargs="+")
    merge.add_argument("--out", required=True)
    merge.set_defaults(func=cmd_report_merge)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        where = _config_path(args) if getattr(args, "config", None) else None
        if where is not None and exc.line is not None:
            print(f"{where}:{exc.line}: {exc.detail}", file=sys.stderr)
        elif where is not None:
            print(f"{where}: {exc.detail}", file=sys.stderr)
        else:
            print(f"error: {exc.detail}", file=sys.stderr)
        return EXIT_CONFIG
    except AuditError as exc:
        print(f"audit violation: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except (FormatError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if args.command == "report-merge" else EXIT_FAIL
    except (RttdpError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
