"""Evaluation harness: stream scheduling, grey-box auditing, per-run and grid reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .data import Stream
from .errors import AuditError, ContractError
from .forge import AttackObjective, LagrangeState, PoisonBatch, poison_diagnostics, synthesize
from .nn import EVAL_STATS, ModelState, build_model, predict_proba
from .surrogate import SurrogateState, distill
from .tta import TtaConfig, Victim

ADVERSARY = "adversary"
BENIGN = "benign"
MODES = ("uniform", "non-uniform")
CSV_FIELDS = ("victim", "attack", "mode", "r", "seed", "segment", "error")


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Slot:
    """One submitted batch: its segment and how many samples each party contributes."""

    position: int
    segment: int
    n_adversary: int
    n_benign: int
    adversary_offset: int  # first unused row of the segment's adversary pool
    benign_offset: int

    @property
    def origin(self) -> str:
        return ADVERSARY if self.n_adversary else BENIGN


@dataclass
class StreamSchedule:
    """Which batches the adversary owns.

    With the default pure composition each batch is wholly adversarial or
    wholly benign. ``mixed=True`` instead puts ``round(r * batch_size)``
    adversary samples into every batch.
    """

    total_batches: int
    batch_size: int
    r: float = 0.5
    mode: str = "uniform"
    segments: int = 1
    mixed: bool = False

    def __post_init__(self):
        if self.total_batches < 1 or self.batch_size < 2:
            raise ContractError("need at least one batch of at least two samples")
        if not 0.0 <= self.r <= 1.0:
            raise ContractError(f"attack budget r must lie in [0, 1], got {self.r}")
        if self.mode not in MODES:
            raise ContractError(f"unknown frequency mode {self.mode!r}")
        if self.segments < 1 or self.total_batches % self.segments:
            raise ContractError(f"{self.total_batches} batches do not split into {self.segments} equal segments")

    @property
    def batches_per_segment(self) -> int:
        return self.total_batches // self.segments

    @property
    def boundaries(self) -> list:
        """First batch position of every segment."""
        return [s * self.batches_per_segment for s in range(self.segments)]

    def adversary_counts(self) -> list:
        """Adversary batches per segment; largest-remainder split of round(r * T)."""
        if self.mixed:
            return [0] * self.segments
        total = int(math.floor(self.r * self.total_batches + 0.5))
        share = np.full(self.segments, total / self.segments)
        counts = np.floor(share).astype(int)
        rest = total - counts.sum()
        order = np.argsort(-(share - counts), kind="stable")
        counts[order[:rest]] += 1
        return counts.tolist()

    @property
    def delta(self) -> Optional[float]:
        """Batches between consecutive adversary injections in uniform mode (None if r = 0)."""
        if self.mixed:
            return 1.0 if self.r > 0 else None
        n_adv = sum(self.adversary_counts())
        return self.total_batches / n_adv if n_adv else None

    def _segment_pattern(self, n_adv: int) -> np.ndarray:
        t_s = self.batches_per_segment
        owned = np.zeros(t_s, bool)
        if n_adv == 0:
            return owned
        if self.mode == "non-uniform":
            owned[:n_adv] = True
        else:
            owned[np.floor(np.arange(n_adv) * t_s / n_adv).astype(int)] = True
        return owned

    def slots(self) -> list:
        out = []
        n_mixed = int(math.floor(self.r * self.batch_size + 0.5)) if self.mixed else 0
        for s, n_adv in enumerate(self.adversary_counts()):
            a_off = b_off = 0
            for j, owned in enumerate(self._segment_pattern(n_adv)):
                if self.mixed:
                    na, nb = n_mixed, self.batch_size - n_mixed
                else:
                    na, nb = (self.batch_size, 0) if owned else (0, self.batch_size)
                out.append(Slot(s * self.batches_per_segment + j, s, na, nb, a_off, b_off))
                a_off += na
                b_off += nb
        return out

    def realized_fraction(self) -> float:
        slots = self.slots()
        adv = sum(s.n_adversary for s in slots)
        return adv / sum(s.n_adversary + s.n_benign for s in slots)

    def pool_demand(self) -> tuple:
        """Largest per-segment (adversary, benign) sample demand."""
        per = {}
        for s in self.slots():
            a, b = per.get(s.segment, (0, 0))
            per[s.segment] = (a + s.n_adversary, b + s.n_benign)
        return max(a for a, _ in per.values()), max(b for _, b in per.values())

    def to_dict(self) -> dict:
        return {"total_batches": self.total_batches, "batch_size": self.batch_size, "r": self.r,
                "mode": self.mode, "segments": self.segments, "mixed": self.mixed, "delta": self.delta}


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

@dataclass
class BatchRecord:
    position: int
    origin: str
    online_forwards: int = 0
    surrogate_forwards: int = 0
    parameter_reads: int = 0


class QueryAudit:
    """Ledger of what crossed the service boundary, checked after every batch."""

    def __init__(self, benign_indices=()):
        self.records: list = []
        self.surrogate_indices: set = set()
        self._benign = set(int(i) for i in benign_indices)
        self._current: Optional[BatchRecord] = None
        self.init_reads = 0

    def open(self, position: int, origin: str) -> BatchRecord:
        self._current = BatchRecord(position, origin)
        self.records.append(self._current)
        return self._current

    def online_forward(self) -> None:
        if self._current is None:
            raise AuditError("online forward outside any scheduled batch")
        self._current.online_forwards += 1

    def parameter_read(self) -> None:
        if self._current is None:
            self.init_reads += 1
        else:
            self._current.parameter_reads += 1

    def surrogate_call(self, indices, origin: str) -> None:
        idx = set(int(i) for i in np.asarray(indices).ravel())
        if origin != ADVERSARY or idx & self._benign:
            raise AuditError("benign-origin samples reached the adversary's surrogate")
        self.surrogate_indices |= idx
        if self._current is not None:
            self._current.surrogate_forwards += 1

    def close(self) -> None:
        rec = self._current
        if rec.online_forwards != 1:
            raise AuditError(f"batch {rec.position}: {rec.online_forwards} online forwards, expected 1")
        if rec.parameter_reads:
            raise AuditError(f"batch {rec.position}: adversary read online parameters")
        self._current = None

    def summary(self) -> dict:
        return {
            "batches": len(self.records),
            "adversary_batches": sum(r.origin == ADVERSARY for r in self.records),
            "online_forwards": sum(r.online_forwards for r in self.records),
            "max_online_forwards_per_batch": max((r.online_forwards for r in self.records), default=0),
            "parameter_reads": sum(r.parameter_reads for r in self.records),
            "surrogate_forwards": sum(r.surrogate_forwards for r in self.records),
            "benign_indices_at_surrogate": len(self.surrogate_indices & self._benign),
            "passed": all(r.online_forwards == 1 and r.parameter_reads == 0 for r in self.records)
            and not (self.surrogate_indices & self._benign),
        }


class OnlineService:
    """The deployed model as the outside world sees it: one call per batch, posteriors back."""

    def __init__(self, victim: Victim, audit: QueryAudit):
        self._victim = victim
        self._audit = audit

    def submit(self, batch, labels=None) -> tuple:
        self._audit.online_forward()
        preds, info = self._victim.step(batch, labels)
        return preds, info.posteriors

    def read_parameters(self):
        self._audit.parameter_read()
        raise AuditError("online parameters are not observable in the grey-box setting")


# ---------------------------------------------------------------------------
# adversary
# ---------------------------------------------------------------------------

@dataclass
class PgdSettings:
    steps: int = 40
    step_size: float = 0.01
    budget: float = 0.3
    lagrange_rate: float = 0.001
    reg_reduction: str = "sum"
    clean_norm: str = "poison"

    def to_dict(self) -> dict:
        return asdict(self)


class Adversary:
    """Grey-box attacker: knows the architecture and the initial weights, nothing live.

    The surrogate persists for the whole stream, across corruption segments.
    """

    def __init__(self, source: ModelState, objective: AttackObjective, pgd: PgdSettings,
                 surrogate_lr: float = 0.1, surrogate_iterations: int = 10, seed: int = 0,
                 feature_reg: Optional[bool] = None):
        self.objective = objective
        self.objective.reset(source.num_classes)
        self.pgd = pgd
        self.initial = source.copy()
        self.surrogate = SurrogateState.from_source(source, lr=surrogate_lr, iterations=surrogate_iterations)
        self.random_model = None
        if objective.kind == "Unlearnable":
            self.random_model = build_model(source.arch.split(":")[0], source.input_shape, source.num_classes,
                                            seed=seed + 7919)
        if feature_reg is not None:
            self.objective.feature_reg = bool(feature_reg)
        self.rng = np.random.default_rng([seed, 3])
        self.diagnostics: list = []
        self.distill_traces: list = []

    @property
    def reference(self) -> ModelState:
        return self.surrogate.model if self.objective.use_distillation else self.initial

    def craft(self, x, y) -> PoisonBatch:
        batch = PoisonBatch(x, y, budget=self.pgd.budget, step_size=self.pgd.step_size, steps=self.pgd.steps)
        lagrange = LagrangeState.zeros(self.reference.n_bn, rate=self.pgd.lagrange_rate)
        synthesize(batch, self.objective, self.reference, lagrange=lagrange, rng=self.rng,
                   reg_reduction=self.pgd.reg_reduction, random_model=self.random_model,
                   clean_norm=self.pgd.clean_norm)
        self.diagnostics.append(poison_diagnostics(self.reference, batch.clean, batch.poisoned,
                                                   clean_norm=self.pgd.clean_norm))
        return batch

    def feedback(self, x_submitted, posteriors, tag=None) -> None:
        if self.objective.use_distillation:
            self.distill_traces.append(distill(self.surrogate, x_submitted, posteriors, tag=tag))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    """One (victim, attack, seed) stream."""

    victim: str
    attack: str
    mode: str
    r: float
    seed: int
    segment_errors: list
    error: float
    benign_count: int
    audit: dict
    config: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict, repr=False)

    def rows(self) -> list:
        base = {"victim": self.victim, "attack": self.attack, "mode": self.mode, "r": self.r, "seed": self.seed}
        out = [dict(base, segment=str(i), error=e) for i, e in enumerate(self.segment_errors)]
        out.append(dict(base, segment="all", error=self.error))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("extras")
        d["segment_errors"] = [None if math.isnan(e) else e for e in self.segment_errors]
        if math.isnan(d["error"]):
            d["error"] = None
        return d


@dataclass
class ExperimentReport:
    """A grid of runs with the derived summary tables."""

    runs: list
    config: dict = field(default_factory=dict)

    def error_table(self) -> dict:
        """attack -> victim -> mean overall error (percent) over seeds."""
        return table_from_rows([row for run in self.runs for row in run.rows()])

    def victims(self) -> list:
        return list(dict.fromkeys(r.victim for r in self.runs))

    def attacks(self) -> list:
        return list(dict.fromkeys(r.attack for r in self.runs))

    def average_errors(self) -> dict:
        return {a: float(np.mean(list(row.values()))) for a, row in self.error_table().items()}

    def average_ranks(self) -> dict:
        """Average rank of every attack over the victims it was run on."""
        table = self.error_table()
        return average_rank(table) if table else {}

    def audit_summary(self) -> dict:
        return {
            "runs": len(self.runs),
            "all_passed": all(r.audit.get("passed", False) for r in self.runs),
            "parameter_reads": sum(r.audit.get("parameter_reads", 0) for r in self.runs),
            "benign_indices_at_surrogate": sum(r.audit.get("benign_indices_at_surrogate", 0) for r in self.runs),
        }

    def seeds(self) -> list:
        return sorted(set(r.seed for r in self.runs))

    def to_dict(self) -> dict:
        return {
            "schema": "rttdp.report/1",
            "config": self.config,
            "seeds": self.seeds(),
            "runs": [r.to_dict() for r in self.runs],
            "error_table": self.error_table(),
            "average_error": self.average_errors(),
            "average_rank": self.average_ranks(),
            "audit": self.audit_summary(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    def to_csv(self) -> str:
        return rows_to_csv([row for run in self.runs for row in run.rows()])

    def summary_table(self) -> str:
        return summary_table(self.error_table())


REPORT_KEYS = {"schema", "config", "seeds", "runs", "error_table", "average_error", "average_rank", "audit"}
RUN_KEYS = {"victim", "attack", "mode", "r", "seed", "segment_errors", "error", "benign_count", "audit", "config"}


def validate_report(doc: dict) -> None:
    """Raise ContractError unless ``doc`` follows the report schema."""
    if not isinstance(doc, dict) or set(doc) != REPORT_KEYS:
        raise ContractError(f"report keys {sorted(doc) if isinstance(doc, dict) else doc!r} != {sorted(REPORT_KEYS)}")
    if doc["schema"] != "rttdp.report/1":
        raise ContractError(f"unknown report schema {doc['schema']!r}")
    for i, run in enumerate(doc["runs"]):
        if set(run) != RUN_KEYS:
            raise ContractError(f"run {i} keys {sorted(run)} != {sorted(RUN_KEYS)}")
        if run["error"] is not None and not 0.0 <= run["error"] <= 1.0:
            raise ContractError(f"run {i} error {run['error']} outside [0, 1]")
        if not run["audit"].get("passed"):
            raise ContractError(f"run {i} carries a failed audit")
    if doc["average_rank"] and set(doc["average_rank"]) != set(doc["error_table"]):
        raise ContractError("average ranks do not cover every attack")


def read_rows(text: str) -> list:
    """Parse and validate a runs CSV."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ContractError(f"CSV header {reader.fieldnames} != {list(CSV_FIELDS)}")
    rows = []
    for line_no, row in enumerate(reader, start=2):
        try:
            row["r"] = float(row["r"])
            row["seed"] = int(row["seed"])
            row["error"] = float(row["error"])
        except ValueError as exc:
            raise ContractError(f"CSV line {line_no}: {exc}") from None
        if row["mode"] not in MODES:
            raise ContractError(f"CSV line {line_no}: unknown mode {row['mode']!r}")
        rows.append(row)
    return rows


def table_from_rows(rows) -> dict:
    """attack -> victim -> mean overall error (percent), from the ``segment == all`` rows."""
    cells: dict = {}
    for row in rows:
        if row["segment"] == "all" and not math.isnan(row["error"]):
            cells.setdefault(row["attack"], {}).setdefault(row["victim"], []).append(row["error"])
    return {a: {v: 100.0 * float(np.mean(e)) for v, e in r.items()} for a, r in cells.items()}


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        out = dict(row)
        out["error"] = f"{float(row['error']):.6f}"
        writer.writerow(out)
    return buf.getvalue()


def average_rank(table: dict) -> dict:
    """Rank attacks per victim by descending error (1 = most damaging) and average.

    ``table`` maps attack -> victim -> error. Ties share the mean rank. When
    an attack was not run on some victim, that column ranks only the attacks
    present and the attack's average covers the columns it appears in.
    """
    attacks = list(table)
    if not attacks or not any(table.values()):
        raise ContractError("empty error table")
    victims = list(dict.fromkeys(v for row in table.values() for v in row))
    total = dict.fromkeys(attacks, 0.0)
    count = dict.fromkeys(attacks, 0)
    for v in victims:
        present = [a for a in attacks if v in table[a]]
        errors = np.array([table[a][v] for a in present], dtype=float)
        if np.isnan(errors).any():
            raise ContractError(f"victim {v!r} has an undefined error")
        for a, r in zip(present, rankdata(-errors, method="average")):
            total[a] += float(r)
            count[a] += 1
    return {a: total[a] / count[a] for a in attacks if count[a]}


def is_complete(table: dict) -> bool:
    victims = {v for row in table.values() for v in row}
    return all(set(row) == victims for row in table.values())


def summary_table(table: dict) -> str:
    """Attacks as rows, victims as columns, then average error and average rank.

    Missing cells stay empty.
    """
    if not table:
        return "attack\n"
    victims = list(dict.fromkeys(v for row in table.values() for v in row))
    ranks = average_rank(table)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["attack"] + victims + ["avg_error", "avg_rank"])
    for a, row in table.items():
        vals = [f"{row[v]:.2f}" if v in row else "" for v in victims]
        rank = f"{ranks[a]:.2f}" if a in ranks else ""
        writer.writerow([a] + vals + [f"{np.mean(list(row.values())):.2f}", rank])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# the stream
# ---------------------------------------------------------------------------

def _pool(stream: Stream, segment: int, origin: str):
    seg = stream.segments[segment]
    if origin == ADVERSARY:
        return seg.adversary_x, seg.adversary_y, seg.adversary_idx
    return seg.benign_x, seg.benign_y, seg.benign_idx


def run_stream(schedule: StreamSchedule, victim: TtaConfig, attack: Optional[AttackObjective], stream: Stream,
               source: ModelState, seed: int = 0, pgd: Optional[PgdSettings] = None, surrogate_lr: float = 0.1,
               surrogate_iterations: int = 10, feature_reg: Optional[bool] = None,
               keep_poisons: bool = False) -> RunReport:
    """Play one stream against one victim and report its error on benign samples.

    Adversary slots synthesize a poison on the surrogate, submit it once,
    and distill the surrogate on the returned posteriors. Benign slots
    are submitted and scored with the predictions served at that moment.
    With ``attack=None`` the adversary's clean samples are submitted as is.

    Raises:
        AuditError: the grey-box contract was broken (a harness bug).
        ContractError: the stream lacks samples for the schedule.
    """
    if len(stream.segments) != schedule.segments:
        raise ContractError(f"stream has {len(stream.segments)} segments, schedule expects {schedule.segments}")
    need_a, need_b = schedule.pool_demand()
    for s_i, seg in enumerate(stream.segments):
        if len(seg.adversary_y) < need_a or len(seg.benign_y) < need_b:
            raise ContractError(f"segment {s_i} holds {len(seg.adversary_y)}/{len(seg.benign_y)} samples, "
                                f"schedule needs {need_a}/{need_b}")
    if set(stream.adversary_indices) & set(stream.benign_indices):
        raise ContractError("adversary and benign pools overlap")

    pgd = pgd or PgdSettings()
    audit = QueryAudit(stream.benign_indices)
    service = OnlineService(Victim(source, victim, seed=seed), audit)
    adversary = None
    if attack is not None:
        adversary = Adversary(source, attack, pgd, surrogate_lr, surrogate_iterations, seed=seed,
                              feature_reg=feature_reg)

    wrong = np.zeros(schedule.segments)
    seen = np.zeros(schedule.segments)
    poisons = []
    for slot in schedule.slots():
        audit.open(slot.position, slot.origin)
        parts_x, parts_y = [], []
        n_adv = slot.n_adversary
        adv_x = adv_idx = None
        if n_adv:
            px, py, pidx = _pool(stream, slot.segment, ADVERSARY)
            adv_x = px[slot.adversary_offset:slot.adversary_offset + n_adv]
            adv_y = py[slot.adversary_offset:slot.adversary_offset + n_adv]
            adv_idx = pidx[slot.adversary_offset:slot.adversary_offset + n_adv]
            if adversary is not None:
                audit.surrogate_call(adv_idx, ADVERSARY)
                poison = adversary.craft(adv_x, adv_y)
                poison.indices = adv_idx
                adv_x = poison.poisoned
                if keep_poisons:
                    poisons.append(poison)
            parts_x.append(adv_x)
            parts_y.append(adv_y)
        if slot.n_benign:
            bx, by, _ = _pool(stream, slot.segment, BENIGN)
            parts_x.append(bx[slot.benign_offset:slot.benign_offset + slot.n_benign])
            parts_y.append(by[slot.benign_offset:slot.benign_offset + slot.n_benign])
        x = np.concatenate(parts_x)
        y = np.concatenate(parts_y)
        preds, posteriors = service.submit(x, y)
        if slot.n_benign:
            wrong[slot.segment] += np.sum(preds[n_adv:] != y[n_adv:])
            seen[slot.segment] += slot.n_benign
        if adversary is not None and n_adv:
            audit.surrogate_call(adv_idx, ADVERSARY)
            adversary.feedback(adv_x, posteriors[:n_adv], tag=slot.position)
        audit.close()

    seg_err = [float(w / s) if s else float("nan") for w, s in zip(wrong, seen)]
    total = float(wrong.sum() / seen.sum()) if seen.sum() else float("nan")
    summary = audit.summary()
    if not summary["passed"]:
        raise AuditError(f"audit failed: {summary}")
    extras = {"audit": audit}
    if adversary is not None:
        extras["adversary"] = adversary
    if keep_poisons:
        extras["poisons"] = poisons
    return RunReport(
        victim=victim.label,
        attack=attack.label if attack is not None else "none",
        mode=schedule.mode,
        r=schedule.r,
        seed=seed,
        segment_errors=seg_err,
        error=total,
        benign_count=int(seen.sum()),
        audit=summary,
        config={"schedule": schedule.to_dict(), "victim": victim.to_dict(), "pgd": pgd.to_dict(),
                "surrogate": {"lr": surrogate_lr, "iterations": surrogate_iterations},
                "feature_reg": None if attack is None else bool(attack.feature_reg)},
        extras=extras,
    )


def source_error(source: ModelState, stream: Stream, schedule: StreamSchedule) -> float:
    """Error of the frozen source model on the benign samples the schedule would score."""
    wrong = seen = 0
    for slot in schedule.slots():
        if not slot.n_benign:
            continue
        bx, by, _ = _pool(stream, slot.segment, BENIGN)
        sl = slice(slot.benign_offset, slot.benign_offset + slot.n_benign)
        preds = predict_proba(source, bx[sl], EVAL_STATS).argmax(axis=1)
        wrong += int(np.sum(preds != by[sl]))
        seen += slot.n_benign
    return wrong / seen
