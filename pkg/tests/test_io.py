import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdat import io
from sdat.numerics import init_mlp
from sdat.testbed import PopulationSpec, sample_population


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2**32 - 1), st.booleans())
def test_params_round_trip_bit_exact(sizes, seed, frozen):
    p = init_mlp(sizes, np.random.default_rng(seed))
    p = p.freeze() if frozen else p
    q = io.params_from_bytes(io.params_to_bytes(p))
    assert q.frozen == frozen
    assert q.flat().tobytes() == p.flat().tobytes()


def test_header_layout():
    blob = io.params_to_bytes(init_mlp((2, 3), np.random.default_rng(0)))
    assert blob[:8] == io.MAGIC
    assert int.from_bytes(blob[8:10], "little") == io.VERSION
    assert int.from_bytes(blob[10:12], "little") == io.KIND_PARAMS


def test_special_values_survive(tmp_path):
    p = init_mlp((2, 2), np.random.default_rng(0))
    p.layers[0][0][0, 0] = -0.0
    p.layers[0][0][0, 1] = 5e-324
    path = io.save_params(p, tmp_path / "p.bin")
    q = io.load_params(path)
    assert q.flat().tobytes() == p.flat().tobytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b[:-10],
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:40] + bytes([b[40] ^ 0xFF]) + b[41:],
    lambda b: b"",
])
def test_corruption_detected(mutate):
    blob = io.params_to_bytes(init_mlp((2, 3, 2), np.random.default_rng(0)))
    with pytest.raises(io.FormatError):
        io.params_from_bytes(mutate(blob))


def test_kind_mismatch(tmp_path):
    ds = sample_population(PopulationSpec(), 10, np.random.default_rng(0))
    io.save_dataset(ds, tmp_path / "d.bin")
    with pytest.raises(io.FormatError):
        io.load_params(tmp_path / "d.bin")


def test_dataset_round_trip(tmp_path):
    ds = sample_population(PopulationSpec((0.3, 0.7)), 50, np.random.default_rng(0))
    back = io.load_dataset(io.save_dataset(ds, tmp_path / "d.bin"))
    assert back.samples.tobytes() == ds.samples.tobytes()
    assert back.labels.tolist() == ds.labels.tolist()
    assert back.declared_weights == (0.3, 0.7)


def test_points_csv(tmp_path):
    pts = np.array([[0.1, -2.5], [1 / 3, 7.0]])
    path = io.write_points_csv(tmp_path / "p.csv", pts, [0, 1])
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,label"
    assert [float(v) for v in lines[2].split(",")[:2]] == [1 / 3, 7.0]


def test_histogram_csv_header_and_errors(tmp_path):
    good = tmp_path / "h.csv"
    good.write_text("p0,p1\n0.5,0.5\n0.25,0.75\n")
    np.testing.assert_array_equal(io.read_histograms_csv(good), [[0.5, 0.5], [0.25, 0.75]])
    ragged = tmp_path / "r.csv"
    ragged.write_text("0.5,0.5\n1.0\n")
    with pytest.raises(io.FormatError):
        io.read_histograms_csv(ragged)
    empty = tmp_path / "e.csv"
    empty.write_text("")
    with pytest.raises(io.FormatError):
        io.read_histograms_csv(empty)
