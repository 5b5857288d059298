"""Experiment configuration: a YAML document with one section per module.

Schema version 1::

    schema: 1
    dataset:            # either a synthetic spec or a dataset file
      spec: {num_classes: 10, corruptions: [[gaussian-noise, 5], [contrast, 5]]}
      file: data/stream.rttdp      # alternative to spec
    source:             # either a checkpoint or pretraining settings
      checkpoint: runs/source.ckpt
      architecture: cnn
      epochs: 15
    victims:
      - {method: tent-lite, lr: 1.0}
    attacks: [none, NHE, {kind: BLE, beta: 0.9}]
    cells:              # optional: restrict the victim x attack product
      - {victim: tent-lite, attacks: [none, NHE]}
    schedule: {total_batches: 64, batch_size: 16, r: 0.5, mode: uniform}
    pgd: {steps: 40, step_size: 0.01, budget: 0.3}
    surrogate: {lr: 0.1, iterations: 10}
    seeds: [0, 1, 2]
    output: runs/example

Dataset and checkpoint paths resolve against the config file's directory;
``output`` resolves against the working directory. Unknown keys are errors. Every error carries the line it refers to.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .data import SyntheticSpec
from .errors import ConfigError, RttdpError
from .forge import AttackObjective, canonical_kind
from .protocol import PgdSettings, StreamSchedule
from .tta import TtaConfig

SCHEMA_VERSION = 1
SECTIONS = ("schema", "dataset", "source", "victims", "attacks", "cells", "schedule", "pgd", "surrogate",
            "seeds", "output", "workers")
SOURCE_KEYS = ("checkpoint", "architecture", "epochs", "n_train", "batch_size", "lr", "target_acc", "seed")
SCHEDULE_KEYS = ("total_batches", "batch_size", "r", "mode", "mixed")
ATTACK_KEYS = ("kind", "name", "beta", "solver", "feature_reg", "use_distillation")


@dataclass
class AttackSpec:
    """Recipe for a fresh (stateful) attack objective; ``kind=None`` is the no-attack baseline."""

    kind: Optional[str]
    name: str = ""
    options: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.name or (self.kind or "none")

    def build(self, seed: int = 0) -> Optional[AttackObjective]:
        if self.kind is None:
            return None
        return AttackObjective(self.kind, name=self.name, seed=seed, **self.options)

    def to_dict(self) -> dict:
        return {"kind": self.kind or "none", "name": self.name, **self.options}


@dataclass
class ExperimentConfig:
    spec: Optional[SyntheticSpec]
    dataset_file: Optional[str]
    source: dict
    victims: list
    attacks: list
    schedule: dict
    pgd: PgdSettings
    surrogate: dict
    seeds: list
    output: str
    workers: Optional[int] = None
    cells: Optional[list] = None  # (victim label, attack label) pairs; None = full product
    path: Optional[str] = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def segments(self) -> int:
        if self.spec is not None:
            return len(self.spec.corruptions)
        return int(self.raw.get("dataset", {}).get("segments", 1) or 1)

    def grid(self) -> list:
        """(victim, attack) pairs in config order."""
        pairs = [(v, a) for v in self.victims for a in self.attacks]
        if self.cells is None:
            return pairs
        allowed = set(self.cells)
        return [(v, a) for v, a in pairs if (v.label, a.label) in allowed]

    def make_schedule(self, segments: Optional[int] = None) -> StreamSchedule:
        return StreamSchedule(segments=segments or self.segments, **self.schedule)

    def spec_for_seed(self, seed: int) -> SyntheticSpec:
        """The synthetic spec for one seed, sized so both pools cover the schedule."""
        spec = copy.deepcopy(self.spec)
        spec.seed = seed
        if not self.raw.get("dataset", {}).get("spec", {}).get("samples_per_segment"):
            need_a, need_b = self.make_schedule(len(spec.corruptions)).pool_demand()
            spec.samples_per_segment = 2 * max(need_a, need_b, 1)
        return spec

    def echo(self) -> dict:
        """Resolved configuration, embedded in every report."""
        return {
            "schema": SCHEMA_VERSION,
            "dataset": {"spec": self.spec.to_dict() if self.spec else None, "file": self.dataset_file},
            "source": dict(self.source),
            "victims": [v.to_dict() for v in self.victims],
            "attacks": [a.to_dict() for a in self.attacks],
            "cells": None if self.cells is None else [list(c) for c in self.cells],
            "schedule": dict(self.schedule),
            "pgd": self.pgd.to_dict(),
            "surrogate": dict(self.surrogate),
            "seeds": list(self.seeds),
        }


# ---------------------------------------------------------------------------
# line lookup on the YAML node tree
# ---------------------------------------------------------------------------

class _Lines:
    def __init__(self, node, overridden=()):
        self.root = node
        self.overridden = [tuple(k.split(".")) for k in overridden]

    def line(self, *path) -> Optional[int]:
        # values replaced on the command line have no line in the file
        for key in self.overridden:
            n = min(len(key), len(path))
            if n and tuple(map(str, path[:n])) == key[:n]:
                return None
        node = self.root
        best = node.start_mark.line + 1 if node is not None else None
        for key in path:
            nxt = None
            if isinstance(node, yaml.MappingNode):
                for k, v in node.value:
                    if k.value == key:
                        best = k.start_mark.line + 1
                        nxt = v
                        break
            elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
                nxt = node.value[key]
                best = nxt.start_mark.line + 1
            if nxt is None:
                break
            node = nxt
        return best


def _expect(cond, msg, lines: _Lines, *path):
    if not cond:
        raise ConfigError(msg, lines.line(*path))


def _check_keys(section: dict, allowed, lines: _Lines, *path):
    for key in section:
        _expect(key in allowed, f"unknown key {key!r} in {'.'.join(map(str, path)) or 'top level'}; "
                f"allowed: {', '.join(allowed)}", lines, *path, key)


def _norm(d: dict) -> dict:
    return {str(k).replace("-", "_"): v for k, v in d.items()}


def _mapping(value, lines, *path) -> dict:
    if value is None:
        return {}
    _expect(isinstance(value, dict), f"{'.'.join(map(str, path))} must be a mapping", lines, *path)
    return _norm(value)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _victim(entry, lines, i) -> TtaConfig:
    if isinstance(entry, str):
        entry = {"method": entry}
    _expect(isinstance(entry, dict), "victim entries must be a method name or a mapping", lines, "victims", i)
    entry = _norm(entry)
    allowed = [f.name for f in fields(TtaConfig)]
    _check_keys(entry, allowed, lines, "victims", i)
    try:
        return TtaConfig(**entry)
    except (RttdpError, TypeError) as exc:
        raise ConfigError(str(exc), lines.line("victims", i)) from None


def _attack(entry, lines, i) -> AttackSpec:
    if isinstance(entry, str) or entry is None:
        entry = {"kind": entry or "none"}
    _expect(isinstance(entry, dict), "attack entries must be a kind name or a mapping", lines, "attacks", i)
    entry = _norm(entry)
    _check_keys(entry, ATTACK_KEYS, lines, "attacks", i)
    _expect("kind" in entry, "attack mapping needs a 'kind'", lines, "attacks", i)
    kind = str(entry.pop("kind"))
    name = str(entry.pop("name", ""))
    if kind.lower() == "none":
        _expect(not entry, "the 'none' attack takes no options", lines, "attacks", i)
        return AttackSpec(None, name)
    try:
        kind = canonical_kind(kind)
        AttackObjective(kind, **entry)  # validate options now, build fresh per run later
    except (RttdpError, TypeError) as exc:
        raise ConfigError(str(exc), lines.line("attacks", i)) from None
    return AttackSpec(kind, name, entry)


def parse_config(text: str, path: Optional[str] = None, base_dir: Optional[Path] = None,
                 overrides: Optional[dict] = None) -> ExperimentConfig:
    """Validate a YAML experiment description, after applying ``section.key=value`` overrides.

    Raises:
        ConfigError: with the offending line when it can be located.
    """
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None) from None
    overrides = overrides or {}
    if overrides:
        raw = raw if isinstance(raw, dict) else {}
        for dotted, value in overrides.items():
            apply_override(raw, dotted, value)
    lines = _Lines(node, overrides)
    _expect(isinstance(raw, dict), "config must be a mapping of sections", lines)
    raw = _norm(raw)
    _check_keys(raw, SECTIONS, lines)
    _expect(raw.get("schema") == SCHEMA_VERSION, f"schema must be {SCHEMA_VERSION}, got {raw.get('schema')!r}",
            lines, "schema")
    base_dir = Path(base_dir) if base_dir is not None else (Path(path).parent if path else Path("."))

    # dataset
    ds = _mapping(raw.get("dataset"), lines, "dataset")
    _check_keys(ds, ("spec", "file", "segments"), lines, "dataset")
    _expect(("spec" in ds) != ("file" in ds), "dataset needs exactly one of 'spec' or 'file'", lines, "dataset")
    spec, dataset_file = None, None
    if "spec" in ds:
        sp = _mapping(ds["spec"], lines, "dataset", "spec")
        _check_keys(sp, [f.name for f in fields(SyntheticSpec)], lines, "dataset", "spec")
        _expect("seed" not in sp, "the stream seed comes from 'seeds'; use task_seed for the class layout",
                lines, "dataset", "spec", "seed")
        try:
            spec = SyntheticSpec(**sp)
        except (RttdpError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc), lines.line("dataset", "spec")) from None
    else:
        dataset_file = str(base_dir / ds["file"])
        _expect(Path(dataset_file).is_file(), f"dataset file {dataset_file} does not exist", lines, "dataset", "file")

    # source
    src = _mapping(raw.get("source"), lines, "source")
    _check_keys(src, SOURCE_KEYS, lines, "source")
    if "checkpoint" in src:
        src["checkpoint"] = str(base_dir / src["checkpoint"])
        _expect(Path(src["checkpoint"]).is_file(), f"checkpoint {src['checkpoint']} does not exist",
                lines, "source", "checkpoint")
    else:
        _expect(spec is not None, "pretraining needs a synthetic spec; give source.checkpoint for file datasets",
                lines, "source")
    src.setdefault("architecture", "cnn" if spec is None or spec.form == "image" else "mlp")
    src.setdefault("epochs", 15)
    src.setdefault("seed", 0)
    _expect(src["architecture"] in ("cnn", "mlp"), "architecture must be cnn or mlp", lines, "source", "architecture")

    # victims and attacks
    victims = raw.get("victims")
    _expect(isinstance(victims, list) and victims, "victims must be a nonempty list", lines, "victims")
    victims = [_victim(v, lines, i) for i, v in enumerate(victims)]
    labels = [v.label for v in victims]
    _expect(len(set(labels)) == len(labels), f"victim labels must be unique, got {labels}", lines, "victims")
    attacks = raw.get("attacks", ["none"])
    _expect(isinstance(attacks, list) and attacks, "attacks must be a nonempty list", lines, "attacks")
    attacks = [_attack(a, lines, i) for i, a in enumerate(attacks)]
    labels = [a.label for a in attacks]
    _expect(len(set(labels)) == len(labels), f"attack labels must be unique, got {labels}", lines, "attacks")

    cells = None
    if raw.get("cells") is not None:
        _expect(isinstance(raw["cells"], list) and raw["cells"], "cells must be a nonempty list", lines, "cells")
        v_labels = {v.label for v in victims}
        a_labels = {a.label for a in attacks}
        cells = []
        for i, entry in enumerate(raw["cells"]):
            _expect(isinstance(entry, dict), "each cell is {victim: label, attacks: [labels]}", lines, "cells", i)
            entry = _norm(entry)
            _check_keys(entry, ("victim", "attacks"), lines, "cells", i)
            v = str(entry.get("victim"))
            _expect(v in v_labels, f"cell victim {v!r} is not among {sorted(v_labels)}", lines, "cells", i)
            wanted = entry.get("attacks", sorted(a_labels))
            _expect(isinstance(wanted, list) and wanted, "cell attacks must be a nonempty list", lines, "cells", i)
            for a in wanted:
                a = "none" if a is None else str(a)
                _expect(a in a_labels, f"cell attack {a!r} is not among {sorted(a_labels)}", lines, "cells", i)
                cells.append((v, a))

    # schedule, pgd, surrogate
    sched = _mapping(raw.get("schedule"), lines, "schedule")
    _check_keys(sched, SCHEDULE_KEYS, lines, "schedule")
    segments = len(spec.corruptions) if spec is not None else int(ds.get("segments", 1) or 1)
    try:
        StreamSchedule(segments=segments, **sched)
    except (RttdpError, TypeError) as exc:
        raise ConfigError(str(exc), lines.line("schedule")) from None
    pgd_raw = _mapping(raw.get("pgd"), lines, "pgd")
    _check_keys(pgd_raw, [f.name for f in fields(PgdSettings)], lines, "pgd")
    pgd = PgdSettings(**pgd_raw)
    _expect(pgd.budget >= 0 and pgd.step_size > 0 and pgd.steps >= 0, "pgd needs budget >= 0, step_size > 0, "
            "steps >= 0", lines, "pgd")
    _expect(pgd.reg_reduction in ("sum", "mean"), "pgd.reg_reduction must be sum or mean", lines, "pgd")
    sur = _mapping(raw.get("surrogate"), lines, "surrogate")
    _check_keys(sur, ("lr", "iterations"), lines, "surrogate")
    sur = {"lr": float(sur.get("lr", 0.1)), "iterations": int(sur.get("iterations", 10))}
    _expect(sur["lr"] > 0 and sur["iterations"] >= 0, "surrogate needs lr > 0 and iterations >= 0",
            lines, "surrogate")

    seeds = raw.get("seeds")
    _expect(isinstance(seeds, list) and seeds and all(isinstance(s, int) for s in seeds),
            "seeds must be a nonempty list of integers", lines, "seeds")
    _expect(len(set(seeds)) == len(seeds), "seeds must be distinct", lines, "seeds")
    output = raw.get("output", "runs")
    _expect(isinstance(output, str), "output must be a path", lines, "output")
    workers = raw.get("workers")
    _expect(workers is None or (isinstance(workers, int) and workers >= 1), "workers must be a positive integer",
            lines, "workers")

    return ExperimentConfig(spec, dataset_file, src, victims, attacks, sched, pgd, sur, list(seeds),
                            output, workers, cells, path, raw)


def reference_config_path() -> Path:
    """The pinned benchmark shipped with the package."""
    return Path(__file__).with_name("configs") / "reference.yaml"


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read, apply ``section.key=value`` overrides (flags win over the file), validate."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path), path.parent, overrides)


def apply_override(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = yaml.safe_load(value) if isinstance(value, str) else value
