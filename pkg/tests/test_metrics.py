import numpy as np
import pytest

from oracles import brute_nn
from voxinv.metrics import (
    brute_nearest,
    chamfer_distance,
    evaluate,
    f1_score,
    hausdorff_distance,
    nearest,
)


def test_hand_cases():
    assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == 1.0
    assert chamfer_distance([[0, 0, 0], [2, 0, 0]], [[0, 0, 0]]) == 0.5
    assert hausdorff_distance([[0, 0, 0], [2, 0, 0]], [[0, 0, 0]]) == 2.0


def test_identical_sets(rng):
    P = rng.normal(size=(50, 3))
    assert chamfer_distance(P, P) == 0.0
    assert hausdorff_distance(P, P) == 0.0
    assert f1_score(P, P, 1e-3)[0] == 1.0


def test_f1_single_pair():
    assert f1_score([[0, 0, 0]], [[0, 0, 0.1]], 0.15)[0] == 1.0
    assert f1_score([[0, 0, 0]], [[0, 0, 0.1]], 0.05)[0] == 0.0


def test_f1_degenerate_and_validation():
    f1, p, r, degenerate = f1_score([[0, 0, 0]], np.zeros((0, 3)), 0.1)
    assert (f1, degenerate) == (0.0, True)
    with pytest.raises(ValueError):
        f1_score([[0, 0, 0]], [[0, 0, 0]], 0.0)
    with pytest.raises(ValueError):
        chamfer_distance(np.zeros((0, 3)), [[0, 0, 0]])
    with pytest.raises(ValueError):
        hausdorff_distance([[0, 0, 0]], np.zeros((0, 3)))
    assert evaluate([[0, 0, 0]], np.zeros((0, 3)), 0.1).degenerate


def test_kdtree_matches_oracles(rng):
    for _ in range(100):
        P = rng.uniform(-5, 5, size=(rng.integers(1, 500), 3))
        Q = rng.uniform(-5, 5, size=(rng.integers(1, 500), 3))
        ref = brute_nn(P, Q)
        np.testing.assert_allclose(nearest(P, Q), ref, atol=1e-6, rtol=0)
        np.testing.assert_allclose(brute_nearest(P, Q), ref, atol=1e-9, rtol=0)
        cd, hd = chamfer_distance(P, Q), hausdorff_distance(P, Q)
        assert cd == pytest.approx(chamfer_distance(Q, P), abs=1e-12)
        assert hd == pytest.approx(hausdorff_distance(Q, P), abs=1e-12)
        assert hd >= cd >= 0


def test_f1_monotone_in_threshold(rng):
    P, Q = rng.normal(size=(200, 3)), rng.normal(size=(150, 3))
    scores = [f1_score(P, Q, t)[0] for t in np.linspace(0.01, 2, 30)]
    assert np.all(np.diff(scores) >= 0)


def test_report_centimeters():
    rep = evaluate([[0, 0, 0]], [[0, 0, 0.1]], 0.15)
    d = rep.as_dict(centimeters=True)
    assert d["cd_cm"] == pytest.approx(10.0) and d["hd_cm"] == pytest.approx(10.0)
    assert d["f1"] == 1.0 and d["threshold_cm"] == pytest.approx(15.0)
