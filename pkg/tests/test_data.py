import numpy as np
import pytest

from rttdp.data import (
    CORRUPTIONS,
    SyntheticSpec,
    accuracy,
    clean_draw,
    corrupt,
    generate,
    import_csv,
    load_dataset,
    pretrain_source,
    save_dataset,
    stream_from_dataset,
)
from rttdp.errors import ContractError, FormatError, TrainingDivergedError
from rttdp.nn import build_model


def test_same_seed_same_bytes(vector_spec):
    a, b = generate(vector_spec), generate(vector_spec)
    for sa, sb in zip(a.segments, b.segments):
        assert sa.adversary_x.tobytes() == sb.adversary_x.tobytes()
        assert sa.benign_y.tobytes() == sb.benign_y.tobytes()


def test_seed_changes_draws_not_classes(vector_spec):
    from dataclasses import replace

    other = replace(vector_spec, seed=vector_spec.seed + 1)
    assert generate(other).segments[0].adversary_x.tobytes() != generate(vector_spec).segments[0].adversary_x.tobytes()


def test_pools_disjoint(vector_spec):
    s = generate(vector_spec)
    assert not (s.adversary_indices & s.benign_indices)
    x, y, seg = s.flat()
    assert len(y) == vector_spec.samples_per_segment * len(vector_spec.corruptions)


def test_values_in_unit_box(image_spec):
    for seg in generate(image_spec).segments:
        assert seg.adversary_x.min() >= 0.0 and seg.adversary_x.max() <= 1.0


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_severity_zero_is_identity(kind, rng):
    x = rng.uniform(size=(4, 3, 8, 8))
    np.testing.assert_array_equal(corrupt(x, kind, 0, np.random.default_rng(0)), x)


def test_bad_spec():
    with pytest.raises(ContractError):
        SyntheticSpec(num_classes=1)
    with pytest.raises(ContractError):
        SyntheticSpec(corruptions=[("fog", 3)])
    with pytest.raises(ContractError):
        SyntheticSpec(corruptions=[("contrast", 6)])


class TestFiles:
    def test_round_trip_bit_exact(self, tmp_path, image_spec):
        x, y, _ = generate(image_spec).flat()
        save_dataset(tmp_path / "d.bin", x, y, image_spec.num_classes, segments=1)
        back = load_dataset(tmp_path / "d.bin")
        assert back["x"].tobytes() == x.tobytes()
        assert back["y"].tobytes() == y.astype(np.int64).tobytes()
        assert back["num_classes"] == image_spec.num_classes

    def test_stream_from_file(self, tmp_path, vector_spec):
        x, y, _ = generate(vector_spec).flat()
        save_dataset(tmp_path / "d.bin", x, y, 4, segments=2)
        stream = stream_from_dataset(load_dataset(tmp_path / "d.bin"))
        assert len(stream.segments) == 2 and stream.num_classes == 4
        assert not (stream.adversary_indices & stream.benign_indices)

    def test_truncated(self, tmp_path):
        save_dataset(tmp_path / "d.bin", np.zeros((3, 2)), np.array([0, 1, 0]), 2)
        raw = (tmp_path / "d.bin").read_bytes()
        (tmp_path / "d.bin").write_bytes(raw[:-5])
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "d.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "d.bin").write_bytes(b"not a dataset at all")
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "d.bin")

    def test_csv_import(self, tmp_path):
        (tmp_path / "d.csv").write_text("label,f0,f1\n0,0.1,0.2\n2,0.3,0.4\n1,0.5,0.6\n")
        ds = import_csv(tmp_path / "d.csv")
        assert ds["num_classes"] == 3
        np.testing.assert_array_equal(ds["y"], [0, 2, 1])
        np.testing.assert_allclose(ds["x"], [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])


class TestPretrain:
    def test_two_well_separated_classes(self):
        spec = SyntheticSpec(num_classes=2, form="vector", dim=16, separation=2.0, seed=0)
        m = pretrain_source(spec, "mlp", epochs=20, n_train=1000, target_acc=None)
        x, y = clean_draw(spec, 1000, np.random.default_rng([0, 2]))
        assert accuracy(m, x, y) >= 0.99

    def test_zero_epochs_is_initialization(self, vector_spec):
        m = pretrain_source(vector_spec, "mlp", epochs=0, seed=5)
        init = build_model("mlp", vector_spec.input_shape, vector_spec.num_classes, seed=5)
        for n, t in init.params.items():
            if m.roles[n] != "b":
                np.testing.assert_array_equal(m.params[n].data, t.data)

    def test_hopeless_spec_diverges(self):
        spec = SyntheticSpec(num_classes=10, form="vector", dim=4, separation=0.0, noise=1.0)
        with pytest.raises(TrainingDivergedError):
            pretrain_source(spec, "mlp", epochs=2, n_train=200)


class TestReferenceShift:
    """Measured on the pinned benchmark spec and its source model."""

    def test_clean_accuracy(self, reference_config, reference_source):
        spec = reference_config.spec_for_seed(0)
        x, y = clean_draw(spec, 1000, np.random.default_rng(99))
        assert accuracy(reference_source, x, y) >= 0.95

    def test_severity_ordering_and_gap(self, reference_config, reference_source):
        spec = reference_config.spec_for_seed(0)
        x, y = clean_draw(spec, 1000, np.random.default_rng(7))
        clean_err = 1 - accuracy(reference_source, x, y)
        for kind in CORRUPTIONS:
            errs = [1 - accuracy(reference_source, corrupt(x, kind, s, np.random.default_rng(8)), y)
                    for s in (1, 3, 5)]
            assert errs[0] <= errs[1] <= errs[2], (kind, errs)
        for kind, severity in spec.corruptions:
            err = 1 - accuracy(reference_source, corrupt(x, kind, severity, np.random.default_rng(8)), y)
            assert err > clean_err
