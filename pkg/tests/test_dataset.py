import numpy as np
import pytest

from driftforge.dataset import (
    CSV_HEADER,
    DriftDataset,
    dataset_hash,
    generate_dataset,
    initial_grid,
    load_dataset,
    meta_path,
    save_dataset,
)
from driftforge.device import DeviceParams


def test_default_dataset_shape(default_dataset):
    ds = default_dataset
    assert ds.values.shape == (5000, 1001)
    assert ds.values[0, 0] == pytest.approx(100, rel=1e-3)
    # the endpoint snaps to the nearest switch count (~0.75 % step near 750 kohm)
    assert ds.values[-1, 0] == pytest.approx(750e3, rel=0.01)
    assert ds.t_tot == 1000


def test_initial_grid():
    assert list(initial_grid(1, 100, 750e3)) == [100.0]
    g = initial_grid(5, 100, 500)
    assert np.allclose(np.diff(g), 100)
    with pytest.raises(ValueError):
        initial_grid(0, 1, 2)


def test_count_one_is_r_min():
    ds = generate_dataset(count=1, t_tot=10)
    assert ds.values.shape == (1, 11)
    assert ds.values[0, 0] == pytest.approx(100, rel=1e-3)


def test_same_seed_bit_identical():
    a = generate_dataset(count=20, t_tot=100, seed=3)
    b = generate_dataset(count=20, t_tot=100, seed=3)
    c = generate_dataset(count=20, t_tot=100, seed=4)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.content_hash() == b.content_hash() != c.content_hash()


def test_threads_do_not_change_result():
    a = generate_dataset(count=12, t_tot=50, seed=2)
    b = generate_dataset(count=12, t_tot=50, seed=2, threads=3)
    assert np.array_equal(a.values, b.values)


def test_rejects_out_of_range():
    with pytest.raises(ValueError):
        generate_dataset(count=2, r_max=2e6)
    with pytest.raises(ValueError):
        generate_dataset(count=2, r_min=500, r_max=100)


def test_csv_round_trip(tmp_path):
    ds = generate_dataset(count=4, t_tot=20, seed=9)
    path, mpath = save_dataset(ds, tmp_path / "d.csv")
    assert mpath == meta_path(path)
    lines = path.read_text().splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 1 + 4 * 21
    back = load_dataset(path)
    assert np.array_equal(back.values, ds.values)
    assert back.content_hash() == ds.content_hash()
    assert back.seed == 9


def test_load_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n0,0,1\n")
    with pytest.raises(ValueError):
        load_dataset(p)


def test_dataset_validation():
    with pytest.raises(ValueError):
        DriftDataset(np.ones((2, 5)), 10, 1, 0, DeviceParams(), "tau_leap")
    with pytest.raises(ValueError):
        DriftDataset(-np.ones((2, 11)), 10, 1, 0, DeviceParams(), "tau_leap")


def test_hash_depends_on_sampling():
    v = np.ones((2, 3))
    assert dataset_hash(v, 1.0) != dataset_hash(v, 2.0)
