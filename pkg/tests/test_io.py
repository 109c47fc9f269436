import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpsolve import io as fio
from fpsolve.grid import DensityField, Domain, GridSpec
from fpsolve.neural import init_params

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=20))
def test_float_format_round_trips(values):
    for v in values:
        assert float(fio.format_float(v)) == v


def test_nan_written_as_empty_field(tmp_path):
    pts = np.array([[0.1, 0.2], [0.3, 0.4]])
    path = fio.write_points(tmp_path / "p.csv", pts, [1.5, np.nan], meta={"alpha": 0.7}, value_name="density")
    lines = path.read_text().splitlines()
    assert lines[0] == "# dim: 2" and "# alpha: 0.7" in lines
    assert lines[-1].endswith(",")
    back, vals, meta = fio.read_points(path)
    np.testing.assert_array_equal(back, pts)
    assert vals[0] == 1.5 and np.isnan(vals[1])
    assert meta["count"] == "2"


def test_points_without_values(tmp_path):
    pts = np.random.default_rng(0).normal(size=(7, 3))
    back, vals, _ = fio.read_points(fio.write_points(tmp_path / "p.csv", pts))
    np.testing.assert_array_equal(back, pts)
    assert vals is None


def test_points_length_mismatch(tmp_path):
    with pytest.raises(ValueError):
        fio.write_points(tmp_path / "p.csv", np.zeros((3, 2)), np.zeros(2))


def test_field_round_trip(tmp_path):
    grid = GridSpec(Domain((-1.0, 0.0), (1.0, 3.0)), 7)
    field = DensityField(grid, np.random.default_rng(1).random(grid.size) / 3)
    back, meta = fio.read_field(fio.write_field(tmp_path / "f.csv", field, {"steps": 10}))
    assert back.grid.same_as(grid)
    np.testing.assert_array_equal(back.values, field.values)
    assert meta["steps"] == "10"


def test_field_missing_metadata(tmp_path):
    path = tmp_path / "f.csv"
    path.write_text("x1,value\n0.0,1.0\n")
    with pytest.raises(ValueError, match="metadata"):
        fio.read_field(path)


def test_checkpoint_round_trip(tmp_path):
    params = init_params((3, 5, 4, 1), 2, gain=4.0)
    back, meta = fio.read_checkpoint(fio.write_checkpoint(tmp_path / "c.csv", params, {"scale": 0.25}))
    assert back == params
    assert float(meta["scale"]) == 0.25


def test_checkpoint_rejects_other_files(tmp_path):
    path = fio.write_points(tmp_path / "p.csv", np.zeros((2, 2)))
    with pytest.raises(ValueError, match="checkpoint"):
        fio.read_checkpoint(path)


def test_history_and_curve_round_trip(tmp_path):
    hist = np.array([[1.0, 2.0], [np.nan, 0.5], [1e-300, 3.0]])
    back = fio.read_history(fio.write_history(tmp_path / "h.csv", hist))
    np.testing.assert_array_equal(back, hist)
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "iter,L1,L2"
    header, data, meta = fio.read_curve(fio.write_curve(tmp_path / "c.csv", [(0.1, 2.0), (0.05, 1.0)],
                                                        ["h", "Q"], {"dim": 1}))
    assert header == ["h", "Q"] and meta == {"dim": "1"}
    np.testing.assert_array_equal(data, [[0.1, 2.0], [0.05, 1.0]])
