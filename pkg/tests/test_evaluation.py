import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastreg import DisplacementField, Grid, PairingError
from elastreg.evaluation import (AccuracyReport, ReportRow, build_report, consistency_stats,
                                 fiducial_distances, fiducial_stats, read_report, report_csv,
                                 report_text, write_report)
from elastreg.phantom import FiducialSet
from elastreg.rigid import RigidTransform


def test_identity_and_hand_computed_stats():
    a = FiducialSet.from_positions([[0, 0, 0], [5, 5, 5]])
    assert fiducial_stats(a, a) == (0.0, 0.0, 0.0)
    b = FiducialSet.from_positions([[1, 0, 0], [5, 5, 8]])
    mean, std, worst = fiducial_stats(a, b)
    assert (mean, std, worst) == pytest.approx((2.0, 1.0, 3.0))


def test_mappings_of_each_kind():
    a = FiducialSet.from_positions([[1, 2, 3], [4, 5, 6]])
    b = FiducialSet.from_positions(a.positions + [0.5, 0.0, -1.0])
    t = RigidTransform(translation=(0.5, 0.0, -1.0))
    assert fiducial_stats(a, b, t)[2] < 1e-12
    assert fiducial_stats(a, b, lambda p: p + [0.5, 0.0, -1.0])[2] < 1e-12
    g = Grid((8, 8, 8), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    u = DisplacementField.from_function(g, lambda p: np.tile([0.5, 0.0, -1.0], (len(p), 1)))
    assert fiducial_stats(a, b, u)[2] < 1e-12


def test_pairing_errors():
    a = FiducialSet.from_positions([[0, 0, 0], [1, 1, 1]], ids=[1, 2])
    b = FiducialSet.from_positions([[0, 0, 0], [1, 1, 1]], ids=[1, 3])
    with pytest.raises(PairingError, match="3"):
        fiducial_stats(a, b)
    empty = FiducialSet(())
    with pytest.raises(PairingError):
        fiducial_stats(empty, empty)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_stats_ignore_order_and_labels(n, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    ids = rng.choice(10_000, size=n, replace=False)
    base = fiducial_stats(FiducialSet.from_positions(p), FiducialSet.from_positions(q))
    order = rng.permutation(n)
    shuffled = fiducial_stats(FiducialSet.from_positions(p, ids),
                              FiducialSet.from_positions(q[order], ids[order]).subset(ids))
    # the second set is listed in a different order but pairs by id
    b = FiducialSet.from_positions(q[order], ids[order])
    relabel = fiducial_stats(FiducialSet.from_positions(p, ids), b)
    np.testing.assert_allclose(shuffled, base, rtol=1e-12)
    np.testing.assert_allclose(relabel, base, rtol=1e-12)
    d = np.linalg.norm(p - q, axis=1)
    np.testing.assert_allclose(base, (d.mean(), d.std(ddof=0), d.max()), rtol=1e-12)
    assert base[2] >= base[0] >= 0 and base[1] >= 0


def test_consistency_stats():
    g = Grid((10, 10, 10), (1.0, 1.0, 2.0), (0.0, 0.0, 0.0))
    z = DisplacementField.zeros(g)
    assert consistency_stats(z, z) == (0.0, 0.0)
    t = np.array([1.0, -0.5, 2.0])
    phi = DisplacementField.from_function(g, lambda p: np.tile(t, (len(p), 1)))
    mean, worst = consistency_stats(phi, phi.with_data(-phi.data))
    assert worst < 1e-12
    # psi = identity leaves the residual equal to phi, measured in voxels
    mean, worst = consistency_stats(phi, z)
    assert mean == pytest.approx(np.linalg.norm([1.0, -0.5, 1.0]))


def test_report_line_format():
    rep = AccuracyReport([ReportRow("elastic", 0.83, 0.54, 4.14, 6.8)], 467)
    lines = report_csv(rep).split("\n")
    assert lines[0] == "stage,mean_mm,std_mm,max_mm,mean_time_s"
    assert lines[1] == "elastic,0.83,0.54,4.14,6.80"
    assert report_csv(AccuracyReport()) == "stage,mean_mm,std_mm,max_mm,mean_time_s\n"
    txt = report_text(rep)
    assert "n_pairs=467" in txt and "elastic.max_mm=4.14" in txt


def test_report_round_trip(tmp_path):
    rep = AccuracyReport([ReportRow("unregistered", 13.76, 7.89, 51.61, 0.0),
                          ReportRow("rigid", 1.33, 0.85, 4.19, 0.0),
                          ReportRow("elastic", 0.83, 0.54, 4.14, 6.8)], 467)
    csv_path, txt_path = write_report(rep, tmp_path / "r.csv")
    assert txt_path.name == "r.txt" and txt_path.exists()
    back = read_report(csv_path)
    assert back.rows == rep.rows and back.n_pairs == 467
    with pytest.raises(OSError):
        write_report(rep, tmp_path / "missing" / "r.csv")


def test_build_report_rows():
    a = FiducialSet.from_positions([[0, 0, 0], [3, 3, 3], [6, 0, 1]])
    b = FiducialSet.from_positions(a.positions + 1.0)
    rep = build_report(a, b, {"elastic": lambda p: p + 1.0, "rigid": lambda p: p + 0.5},
                       {"elastic": 2.5})
    assert [r.stage for r in rep.rows] == ["unregistered", "rigid", "elastic"]
    assert rep.n_pairs == 3
    assert rep.row("unregistered").mean_mm == pytest.approx(np.sqrt(3))
    assert rep.row("elastic").max_mm < 1e-12 and rep.row("elastic").mean_time_s == 2.5


def test_interpolated_distances_match_the_truth_on_a_phantom():
    from elastreg import PhantomSpec, make_phantom_pair
    pair = make_phantom_pair(PhantomSpec(dims=(40, 40, 40), seed=9))
    d = fiducial_distances(pair.fixed_fiducials, pair.moving_fiducials, pair.truth)
    assert d.max() < 0.05
