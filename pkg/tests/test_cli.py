import json
import textwrap

import numpy as np
import pytest

from rttdp import cli
from rttdp.config import load_config, parse_config, reference_config_path
from rttdp.data import load_dataset
from rttdp.errors import AuditError, ConfigError
from rttdp.experiment import WORKERS_ENV, resolve_workers
from rttdp.protocol import average_rank, read_rows, table_from_rows

TINY = textwrap.dedent("""\
    schema: 1
    dataset:
      spec:
        num_classes: 4
        form: vector
        dim: 12
        separation: 1.5
        corruptions: [[gaussian-noise, 3], [contrast, 3]]
    source: {architecture: mlp, epochs: 4, n_train: 400, target_acc: null, seed: 0}
    victims:
      - {name: tent, method: tent-lite, lr: 0.1}
      - {name: eata, method: eata-lite, lr: 0.1}
    attacks: [none, NHE]
    schedule: {total_batches: 4, batch_size: 8, r: 0.5}
    pgd: {steps: 3}
    seeds: [0, 1]
    output: out
""")


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


class TestConfig:
    def test_reference_parses(self):
        cfg = load_config(reference_config_path())
        assert cfg.seeds == list(range(10))
        assert ("tent-lite", "none") in {(v.label, a.label) for v, a in cfg.grid()}
        # every victim has its no-attack baseline cell
        baseline = {v.label for v, a in cfg.grid() if a.kind is None}
        assert baseline == {v.label for v in cfg.victims}

    def test_error_carries_line(self, tmp_path):
        text = TINY.replace("lr: 0.1}\n  - {name: eata", "lr: -1}\n  - {name: eata")
        with pytest.raises(ConfigError) as info:
            parse_config(text, str(tmp_path / "x.yaml"))
        assert info.value.line == 11

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config(TINY + "extra: 1\n")
        assert info.value.line == 18

    def test_yaml_syntax(self):
        with pytest.raises(ConfigError) as info:
            parse_config("schema: 1\nvictims: [\n")
        assert info.value.line is not None

    def test_missing_seeds(self):
        with pytest.raises(ConfigError):
            parse_config(TINY.replace("seeds: [0, 1]", "seeds: []"))

    def test_override_wins(self, tiny):
        cfg = load_config(tiny, {"schedule.r": "0.25", "seeds": "[3]"})
        assert cfg.schedule["r"] == 0.25 and cfg.seeds == [3]

    def test_pools_sized_for_schedule(self, tiny):
        cfg = load_config(tiny)
        spec = cfg.spec_for_seed(4)
        a, b = cfg.make_schedule().pool_demand()
        assert spec.seed == 4 and spec.samples_per_segment >= 2 * max(a, b)

    def test_worker_precedence(self, monkeypatch):
        monkeypatch.delenv(WORKERS_ENV, raising=False)
        assert resolve_workers(None, None) == 1
        assert resolve_workers(None, 3) == 3
        monkeypatch.setenv(WORKERS_ENV, "2")
        assert resolve_workers(None, 3) == 2
        assert resolve_workers(4, 3) == 4
        monkeypatch.setenv(WORKERS_ENV, "many")
        with pytest.raises(ConfigError):
            resolve_workers(None, None)


class TestCli:
    def test_run_writes_valid_reports(self, tiny, tmp_path, capsys):
        out = tmp_path / "r1"
        assert cli.main(["run", str(tiny), "--output", str(out)]) == 0
        doc = json.loads((out / "report.json").read_text())
        assert doc["audit"]["all_passed"] and doc["config"]["seeds"] == [0, 1]
        rows = read_rows((out / "runs.csv").read_text())
        assert len([r for r in rows if r["segment"] == "all"]) == 2 * 2 * 2
        header = (out / "summary.csv").read_text().splitlines()[0]
        assert header == "attack,tent,eata,avg_error,avg_rank"

    def test_rerun_is_byte_identical(self, tiny, tmp_path):
        for name in ("a", "b"):
            assert cli.main(["run", str(tiny), "--output", str(tmp_path / name), "--workers", "2"]) == 0
        assert (tmp_path / "a" / "runs.csv").read_bytes() == (tmp_path / "b" / "runs.csv").read_bytes()

    def test_merge_equals_union(self, tiny, tmp_path):
        for name, seeds in (("s0", "0"), ("s1", "1"), ("both", "0,1")):
            assert cli.main(["run", str(tiny), "--output", str(tmp_path / name), "--seeds", seeds]) == 0
        merged = tmp_path / "merged.csv"
        assert cli.main(["report-merge", str(tmp_path / "s0" / "runs.csv"), str(tmp_path / "s1" / "runs.csv"),
                         "--out", str(merged)]) == 0
        union = table_from_rows(read_rows((tmp_path / "both" / "runs.csv").read_text()))
        table = table_from_rows(read_rows(merged.read_text()))
        for a in union:
            assert table[a] == pytest.approx(union[a])
        assert average_rank(table) == pytest.approx(average_rank(union))

    def test_merge_rejects_duplicates(self, tiny, tmp_path):
        assert cli.main(["run", str(tiny), "--output", str(tmp_path / "r"), "--seeds", "0"]) == 0
        csv = str(tmp_path / "r" / "runs.csv")
        assert cli.main(["report-merge", csv, csv, "--out", str(tmp_path / "m.csv")]) == 2

    def test_invalid_config_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text(TINY.replace("method: eata-lite", "method: nope"))
        assert cli.main(["run", str(bad)]) == 2
        err = capsys.readouterr().err
        assert err.startswith(f"{bad}:12:")

    def test_audit_violation_exit_3(self, tiny, monkeypatch, capsys):
        def broken(*args, **kwargs):
            raise AuditError("batch 0: 2 online forwards, expected 1")

        monkeypatch.setattr(cli, "run_grid", broken)
        assert cli.main(["run", str(tiny)]) == 3
        assert "audit" in capsys.readouterr().err

    def test_gen_data_pretrain_run(self, tiny, tmp_path):
        data, ckpt = tmp_path / "d.bin", tmp_path / "m.ckpt"
        assert cli.main(["gen-data", str(tiny), "--out", str(data)]) == 0
        assert cli.main(["pretrain", str(tiny), "--out", str(ckpt)]) == 0
        cfg = tmp_path / "from_files.yaml"
        body = TINY.split("dataset:")[0] + "dataset: {file: d.bin, segments: 2}\nsource: {checkpoint: m.ckpt}\n"
        body += TINY.split("target_acc: null, seed: 0}\n")[1]
        cfg.write_text(body)
        assert cli.main(["run", str(cfg), "--output", str(tmp_path / "o"), "--seeds", "0"]) == 0

    def test_poison_dump_respects_budget(self, tiny, tmp_path):
        out = tmp_path / "p.bin"
        assert cli.main(["poison-dump", str(tiny), "--attack", "NHE", "--out", str(out)]) == 0
        ds = load_dataset(out)
        half = len(ds["y"]) // 2
        eps = ds["x"][half:] - ds["x"][:half]
        assert np.abs(eps).max() <= 0.3 + 1e-9
        assert ds["x"].min() >= 0.0 and ds["x"].max() <= 1.0

    def test_poison_dump_needs_attack(self, tiny):
        assert cli.main(["poison-dump", str(tiny), "--attack", "none", "--out", "x.bin"]) == 2
