import json

import numpy as np
import pytest

from dhh import data
from dhh.data import Trajectory, TimeMap


def _traj(n=11, t1=1.0):
    t = np.linspace(0.0, t1, n)
    return Trajectory(t, np.stack([np.cos(t), np.sin(t)], axis=1))


def test_subsample_regular():
    tr = _traj()
    full = data.subsample(tr, len(tr), "regular")
    np.testing.assert_array_equal(full.times, tr.times)
    ends = data.subsample(tr, 2, "regular")
    np.testing.assert_array_equal(ends.times, [0.0, 1.0])


def test_subsample_irregular_reproducible():
    tr = _traj(1001, 10.0)
    for seed in range(100):
        a = data.subsample(tr, 20, "irregular", np.random.default_rng(seed))
        b = data.subsample(tr, 20, "irregular", np.random.default_rng(seed))
        np.testing.assert_array_equal(a.times, b.times)
        assert np.all(np.diff(a.times) > 0)
        assert a.times[0] == 0.0 and a.times[-1] == 10.0
        assert len(a) == 20


def test_subsample_bounds():
    with pytest.raises(ValueError):
        data.subsample(_traj(), 1, "regular")
    with pytest.raises(ValueError):
        data.subsample(_traj(), 12, "regular")
    with pytest.raises(ValueError):
        data.subsample(_traj(), 5, "sometimes")


def test_noise_moments():
    tr = Trajectory(np.arange(5000.0), np.zeros((5000, 2)))
    assert np.array_equal(data.add_noise(tr, 0.0, np.random.default_rng(0)).states, tr.states)
    noisy = data.add_noise(tr, 0.1, np.random.default_rng(0))
    np.testing.assert_array_equal(noisy.times, tr.times)
    assert noisy.states.std() == pytest.approx(0.1, rel=0.05)
    corr = np.corrcoef(noisy.states[:, 0], noisy.states[:, 1])[0, 1]
    assert abs(corr) < 0.05


def test_normalize_time():
    tr = Trajectory(np.array([0.0, 2.5, 10.0]), np.zeros((3, 2)))
    norm, tmap = data.normalize_time(tr)
    np.testing.assert_allclose(norm.times, [-1.0, -0.5, 1.0])
    assert tmap(5.0) == 0.0 and tmap(10.0) == 1.0
    t = np.random.default_rng(0).uniform(0, 10, 100)
    assert np.max(np.abs(tmap.inverse(tmap(t)) - t)) < 1e-12
    with pytest.raises(ValueError):
        data.normalize_time(Trajectory(np.array([1.0]), np.zeros((1, 2))))


def test_finite_difference_targets():
    t = np.linspace(-1, 1, 7)
    lin = Trajectory(t, np.stack([3 * t, -t], 1))
    np.testing.assert_allclose(data.finite_difference_targets(lin), np.tile([3.0, -1.0], (7, 1)), atol=1e-14)
    cosine = Trajectory(np.array([-0.1, 0.0, 0.1]), np.stack([np.cos(2 * np.array([-0.1, 0.0, 0.1]))] * 2, 1))
    assert data.finite_difference_targets(cosine)[1, 0] == pytest.approx(0.0, abs=1e-15)
    t = np.array([0.0, 0.1, 0.3])
    quad = Trajectory(t, np.stack([t ** 2, t ** 2], 1))
    fd = data.finite_difference_targets(quad)
    assert fd[1, 0] == pytest.approx(0.2, abs=1e-14)
    np.testing.assert_allclose(fd[:, 0], 2 * t, atol=1e-13)  # exact on quadratics, ends included
    with pytest.raises(ValueError):
        data.finite_difference_targets(Trajectory(t[:2], np.zeros((2, 2))))


def test_build_dataset_is_pure():
    a = data.build_dataset("mass_spring", 20, "irregular", 0.1, seed=3)
    b = data.build_dataset("mass_spring", 20, "irregular", 0.1, seed=3)
    assert a.observations.states.tobytes() == b.observations.states.tobytes()
    assert a.observations.times.tobytes() == b.observations.times.tobytes()
    assert np.all(np.abs(a.tau) <= 1.0)
    assert a.tau[0] == -1.0 and a.tau[-1] == 1.0


def test_noise_changes_states_only():
    clean = data.build_dataset("pendulum", 20, "regular", 0.0, seed=2)
    noisy = data.build_dataset("pendulum", 20, "regular", 0.1, seed=2)
    np.testing.assert_array_equal(clean.observations.times, noisy.observations.times)
    assert not np.array_equal(clean.observations.states, noisy.observations.states)
    np.testing.assert_array_equal(clean.ground_truth.states, noisy.ground_truth.states)


def test_masks():
    ds = data.build_dataset("mass_spring", 10, "regular", 0.1, seed=0, observe="q")
    assert ds.mask.tolist() == [True, False]
    assert np.all(ds.observed_states()[:, 1] == 0)
    with pytest.raises(ValueError):
        data.Dataset(ds.observations, [False, False], 0.1, ds.time_map, ds.ground_truth, ds.system)


def test_n_body_ground_truth_respects_separation():
    ds = data.build_dataset("3_body", 20, "regular", 0.0, seed=0)
    from dhh.systems import min_pair_distance
    assert min_pair_distance(ds.system, ds.ground_truth.states) >= 0.1
    assert ds.t_span == (0.0, 5.0)


def test_dataset_files_round_trip(tmp_path):
    ds = data.build_dataset("mass_spring", 20, "regular", 0.1, seed=4, observe="q")
    csv, side = data.write_dataset(ds, tmp_path / "d.csv")
    lines = csv.read_text().splitlines()
    assert lines[0] == "t,q1,p1" and len(lines) == 21
    assert lines[1].split(",")[2] == "nan"
    meta = json.loads(side.read_text())
    assert {"system", "params", "sigma", "mode", "seed", "time_map", "mask"} <= set(meta)
    back = data.read_dataset(csv)
    np.testing.assert_array_equal(back.observations.times, ds.observations.times)
    np.testing.assert_array_equal(back.observed_states(), ds.observed_states())
    np.testing.assert_array_equal(back.ground_truth.states, ds.ground_truth.states)
    assert back.time_map == ds.time_map
    assert back.mask.tolist() == [True, False]


def test_bad_header_rejected(tmp_path):
    ds = data.build_dataset("mass_spring", 5, "regular", 0.0, seed=4)
    csv, _ = data.write_dataset(ds, tmp_path / "d.csv")
    text = csv.read_text().replace("t,q1,p1", "time,x,v")
    csv.write_text(text)
    with pytest.raises(data.DatasetFormatError):
        data.read_dataset(csv)
