"""Grid execution: one stream per (victim, attack, seed) cell, dispatched to a worker pool."""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional

from .config import AttackSpec, ExperimentConfig
from .data import generate, load_dataset, pretrain_source, stream_from_dataset
from .errors import ConfigError
from .nn import load_checkpoint
from .protocol import ExperimentReport, RunReport, run_stream
from .tta import TtaConfig

logger = logging.getLogger(__name__)

WORKERS_ENV = "RTTDP_WORKERS"


def resolve_workers(flag: Optional[int] = None, config: Optional[int] = None) -> int:
    """Worker count: command-line flag, then the environment variable, then the config, then 1."""
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return max(1, int(config or 1))


def prepare_source(cfg: ExperimentConfig):
    src = cfg.source
    if "checkpoint" in src:
        return load_checkpoint(src["checkpoint"])
    spec = cfg.spec_for_seed(int(src.get("seed", 0)))
    kw = {k: src[k] for k in ("n_train", "batch_size", "lr") if k in src}
    return pretrain_source(spec, src["architecture"], epochs=int(src["epochs"]),
                           target_acc=src.get("target_acc", 0.98), seed=int(src.get("seed", 0)), **kw)


def prepare_stream(cfg: ExperimentConfig, seed: int):
    if cfg.dataset_file is not None:
        return stream_from_dataset(load_dataset(cfg.dataset_file))
    return generate(cfg.spec_for_seed(seed))


def run_cell(cfg: ExperimentConfig, source, stream, victim: TtaConfig, attack: AttackSpec, seed: int) -> RunReport:
    return run_stream(cfg.make_schedule(len(stream.segments)), victim, attack.build(seed), stream, source,
                      seed=seed, pgd=cfg.pgd, surrogate_lr=cfg.surrogate["lr"],
                      surrogate_iterations=cfg.surrogate["iterations"])


def run_grid(cfg: ExperimentConfig, workers: int = 1, source=None,
             progress: Optional[Callable[[RunReport], None]] = None) -> ExperimentReport:
    """Every victim x attack x seed cell; results ordered as the config lists them.

    Cells share read-only inputs (source model, per-seed streams) and own
    everything they mutate, so the worker count never changes the numbers.
    """
    source = source if source is not None else prepare_source(cfg)
    streams = {seed: prepare_stream(cfg, seed) for seed in cfg.seeds}
    cells = [(v, a, s) for s in cfg.seeds for v, a in cfg.grid()]

    def job(cell):
        v, a, s = cell
        t0 = time.perf_counter()
        rep = run_cell(cfg, source, streams[s], v, a, s)
        logger.info("%s / %s / seed %d: error %.4f (%.1fs)", v.label, a.label, s, rep.error,
                    time.perf_counter() - t0)
        if progress is not None:
            progress(rep)
        return rep

    if workers <= 1:
        runs = [job(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(job, cells))
    return ExperimentReport(runs, config=cfg.echo())


def write_report(report: ExperimentReport, out_dir) -> dict:
    """report.json (full), runs.csv (flat rows) and summary.csv (attacks x victims with ranks)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "runs.csv", "summary": out / "summary.csv"}
    paths["json"].write_text(report.to_json())
    paths["csv"].write_text(report.to_csv())
    paths["summary"].write_text(report.summary_table())
    return paths
