import numpy as np
import pytest
from hypothesis import given, strategies as st

from rolo.data import SyntheticSceneConfig, generate_synthetic_sequence
from rolo.evaluation import (
    DEFAULT_PERTURBATIONS,
    IDENTITY_PERTURBATION,
    EvalResult,
    TrackerSpec,
    average_overlap_score,
    curve_from_ious,
    detector_tracker,
    kalman_tracker,
    oracle_tracker,
    perturb_box,
    run_ope,
    run_sre,
    run_tre,
    success_curve,
    time_tracking,
    tre_starts,
    write_report,
)
from rolo.regions import BoundingBox
from rolo.tracker import Trajectory


def _traj(boxes):
    t = Trajectory()
    for b in boxes:
        t.append(b, "detector-assigned")
    return t


def _seqs(n=3, frames=40):
    return [generate_synthetic_sequence(SyntheticSceneConfig(frames=frames, image_side=32, seed=s)) for s in range(n)]


def test_aos_mean_of_ious():
    # [DERIVED] IOUs 1, 1/3 (half shift), 0 -> mean 4/9
    g = BoundingBox(0.4, 0.5, 0.2, 0.2)
    pred = [g, BoundingBox(0.5, 0.5, 0.2, 0.2), BoundingBox(0.9, 0.9, 0.1, 0.1)]
    assert average_overlap_score(_traj(pred), [g] * 3) == pytest.approx(4 / 9)


def test_aos_length_mismatch():
    g = BoundingBox(0.5, 0.5, 0.2, 0.2)
    with pytest.raises(ValueError, match="frames"):
        average_overlap_score(_traj([g]), [g, g])


def test_success_rates_by_hand():
    # [DERIVED] IOUs {0.9, 0.6, 0.3} at thresholds {0.25, 0.5, 0.75}
    c = curve_from_ious([0.9, 0.6, 0.3], [0.25, 0.5, 0.75])
    assert c.rates == pytest.approx((1.0, 2 / 3, 1 / 3))
    assert c.auc == pytest.approx(2 / 3)


def test_success_zero_and_perfect():
    assert curve_from_ious([0.0] * 5).auc == 0.0
    g = [BoundingBox(0.5, 0.5, 0.2, 0.2)] * 4
    c = success_curve(_traj(g), g)
    assert all(r == 1.0 for r in c.rates[:-1]) and c.rates[-1] == 0.0


def test_unsorted_thresholds():
    with pytest.raises(ValueError, match="sorted"):
        curve_from_ious([0.5], [0.5, 0.2])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_success_curve_monotone(ious):
    rates = curve_from_ious(ious).rates
    assert all(a >= b for a, b in zip(rates, rates[1:]))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.randoms())
def test_aos_order_invariant(ious, rnd):
    a = np.array(ious)
    b = a.copy()
    rnd.shuffle(b)
    assert np.isclose(a.mean(), b.mean(), atol=1e-12) and 0 <= a.mean() <= 1


def test_tre_starts_even():
    # [DERIVED] 100 frames / 20 segments -> 0, 5, ..., 95
    starts, skipped = tre_starts(100, 20)
    assert starts == list(range(0, 100, 5)) and skipped == 0


def test_tre_starts_skip_duplicates():
    starts, skipped = tre_starts(5, 8)
    assert starts == sorted(set(starts)) and len(starts) + skipped == 8


def test_perturbation_shift():
    # [DERIVED] +10% of w = 0.02
    b = perturb_box(BoundingBox(0.5, 0.5, 0.2, 0.2), 0.1, 0.0, 1.0)
    assert b.as_array() == pytest.approx([0.52, 0.5, 0.2, 0.2])


def test_perturbation_clips_to_image():
    b = perturb_box(BoundingBox(0.9, 0.5, 0.2, 0.2), 0.0, 0.0, 1.2)
    assert b.corners()[2] == pytest.approx(1.0)


def test_default_sre_has_twelve_runs():
    assert len(DEFAULT_PERTURBATIONS) == 12
    res = run_sre([detector_tracker()], _seqs(2))
    assert all(n == 12 for n in res.runs["detector"].values())


def test_oracle_tracker_perfect():
    res = run_ope([oracle_tracker()], _seqs(2))
    assert list(res.aos["oracle"].values()) == pytest.approx([1.0, 1.0], abs=1e-12)
    res = run_tre([oracle_tracker()], _seqs(1), segments=4)
    assert res.curves["oracle"].auc == pytest.approx(20 / 21)


def test_tracker_error_names_sequence():
    def boom(seq, start, init):
        raise RuntimeError("kaput")

    with pytest.raises(RuntimeError, match="synth_0000"):
        run_ope([TrackerSpec("bad", boom)], _seqs(1))


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_protocol_identities(tmp_path):
    seqs = _seqs(3)
    trackers = [kalman_tracker(), detector_tracker()]
    write_report(run_ope(trackers, seqs), tmp_path / "ope")
    write_report(run_tre(trackers, seqs, segments=1), tmp_path / "tre")
    write_report(run_sre(trackers, seqs, IDENTITY_PERTURBATION), tmp_path / "sre")
    ope = _files(tmp_path / "ope")
    assert ope == _files(tmp_path / "tre") == _files(tmp_path / "sre")


def test_threads_do_not_change_results(tmp_path):
    seqs = _seqs(3)
    trackers = [kalman_tracker(), detector_tracker()]
    write_report(run_tre(trackers, seqs, segments=5, threads=1), tmp_path / "a")
    write_report(run_tre(trackers, seqs, segments=5, threads=4), tmp_path / "b")
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_report_layout(tmp_path):
    seqs = _seqs(2)
    paths = write_report(run_ope([kalman_tracker(), detector_tracker()], seqs), tmp_path)
    assert [p.name for p in paths] == ["aos.csv", "success.csv", "success.svg"]
    lines = (tmp_path / "aos.csv").read_text().splitlines()
    assert lines[0] == "sequence,kalman,detector" and len(lines) == 3
    svg = (tmp_path / "success.svg").read_text()
    assert svg.count("<polyline") == 2 and 'version="1.1"' in svg and "kalman [" in svg


def test_empty_report(tmp_path):
    paths = write_report(EvalResult([], []), tmp_path)
    assert (tmp_path / "aos.csv").read_text() == "sequence\n"
    assert not (tmp_path / "success.svg").exists()
    assert len(paths) == 2


def test_time_tracking_positive():
    assert time_tracking(detector_tracker(), _seqs(1), repeats=1) > 0
