import numpy as np
import pytest

from flexmodal.errors import ValidationError
from flexmodal.modal import ModalModel
from flexmodal.modelio import ModelDocument, read_model_file, write_model_file
from flexmodal.textio import (
    dump_kv, format_float, parse_kv, read_table, write_table,
)
from flexmodal.tps import fit_tps

from conftest import random_modal_model


class TestKv:
    def test_float_round_trip_is_bit_exact(self, rng):
        values = list(rng.standard_normal(200)) + [1e-300, 1e300, 0.1 + 0.2, np.pi]
        for v in values:
            assert float(format_float(v)) == v

    def test_kv_round_trip(self):
        pairs = [("a", 3), ("b", [1.5, 2.5]), ("c", [[1.0, 2.0], [3.0, 4.0]]), ("d", "x y"), ("e", None)]
        data = parse_kv(dump_kv(pairs))
        assert data["a"] == 3
        assert data["b"] == [1.5, 2.5]
        assert data["c"] == [[1.0, 2.0], [3.0, 4.0]]
        assert data["d"] == "x y"
        assert data["e"] is None

    def test_nan_rejected_on_write(self):
        with pytest.raises(ValidationError):
            dump_kv([("x", float("nan"))])

    def test_nan_rejected_on_read(self):
        with pytest.raises(ValidationError):
            parse_kv("x: NaN\n")

    def test_inf_rejected_on_read(self):
        with pytest.raises(ValidationError):
            parse_kv("x: [1.0, Infinity]\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ValidationError):
            parse_kv("a: 1\na: 2\n")

    def test_comments_and_blank_lines_skipped(self):
        data = parse_kv("# header\n\na: 1\n")
        assert data == {"a": 1}


class TestTables:
    def test_round_trip(self, tmp_path, rng):
        path = tmp_path / "t.txt"
        rows = [[i, rng.standard_normal(), "tag%d" % i] for i in range(5)]
        write_table(path, ["k", "value", "name"], rows, meta={"fs": 100.0, "n": 5})
        meta, columns, got = read_table(path)
        assert columns == ["k", "value", "name"]
        assert meta["fs"] == 100.0 and meta["n"] == 5
        for want, have in zip(rows, got):
            assert int(have[0]) == want[0]
            assert float(have[1]) == want[1]
            assert have[2] == want[2]

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("")
        with pytest.raises(ValidationError):
            read_table(path)


class TestModelFile:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        m = random_modal_model(rng, n_outputs=5, n_inputs=3, n_flex=4, n_rigid=2)
        p1 = tmp_path / "m1.txt"
        p2 = tmp_path / "m2.txt"
        write_model_file(p1, ModelDocument(model=m))
        doc = read_model_file(p1)
        write_model_file(p2, doc)
        assert p1.read_bytes() == p2.read_bytes()
        for name in ("omega2", "zeta", "mode_shapes", "input_gains", "sensor_coords"):
            np.testing.assert_array_equal(getattr(doc.model, name), getattr(m, name))

    def test_round_trip_with_surfaces(self, tmp_path, rng):
        m = random_modal_model(rng, n_outputs=8, n_flex=2, n_rigid=1)
        surfaces = [
            fit_tps(m.sensor_coords, m.mode_shapes[:, i], 1e-3) for i in range(m.n_modes)
        ]
        p1 = tmp_path / "m1.txt"
        p2 = tmp_path / "m2.txt"
        doc = ModelDocument(model=m, surfaces=surfaces, domain=(-0.2, 0.2, -0.15, 0.15))
        write_model_file(p1, doc)
        back = read_model_file(p1)
        write_model_file(p2, back)
        assert p1.read_bytes() == p2.read_bytes()
        assert back.domain == (-0.2, 0.2, -0.15, 0.15)
        pdm = back.to_position_dependent()
        assert pdm.n_modes == m.n_modes

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("n_m: 1\n")
        with pytest.raises(ValidationError):
            read_model_file(path)

    def test_inconsistent_mode_count_rejected(self, tmp_path, rng):
        m = random_modal_model(rng, n_flex=2)
        path = tmp_path / "m.txt"
        write_model_file(path, ModelDocument(model=m))
        text = path.read_text().replace("n_m: 2", "n_m: 3")
        path.write_text(text)
        with pytest.raises(ValidationError):
            read_model_file(path)
