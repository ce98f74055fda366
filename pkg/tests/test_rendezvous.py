import numpy as np
import pytest

from advpose import geometry as geo
from advpose.attacks import AttackConfig
from advpose.detector import DetectorConfig, build_detector
from advpose.estimator import EstimatorConfig, build_estimator
from advpose.explain import BackgroundSet
from advpose.rendezvous import (
    BURST_LENGTHS,
    START_DISTANCES,
    TARGET,
    UNTESTED,
    BurstPlan,
    ExperimentMatrix,
    GuidanceState,
    Scene,
    attack_matrix,
    detection_run,
    guidance_step,
    run_episode,
    write_episode_trace,
    write_matrix_csv,
)
from advpose.scenegen import TrajectorySpec

TINY = EstimatorConfig(input_height=12, input_width=16, stem_channels=2, stage_widths=(4, 6), res_blocks=(1, 1),
                       gap_width=9)
SMALL_SCENE = Scene(intrinsics=geo.K_DESK.scaled(16 / 120, 12 / 90), size=(12, 16))


def _fixed_estimate(p):
    """Estimator whose head ignores the image and always reports position ``p``."""
    w = build_estimator(TINY)
    w.params["fc_pos.weight"][...] = 0
    w.params["fc_rot.weight"][...] = 0
    w.params["fc_pos.bias"][...] = p
    return w


# ------------------------------------------------------------------ guidance law

def test_far_axis_moves_one_step():
    assert guidance_step([0, 0, 60], TARGET)[2] == 59


def test_near_axis_snaps_to_target():
    assert guidance_step([0, 0, 10.4], TARGET)[2] == 10.0


def test_target_is_fixed_point():
    np.testing.assert_array_equal(guidance_step(TARGET, TARGET), TARGET)


def test_axes_are_independent():
    out = guidance_step([3.0, -2.0, 10.7], [0.1, 0.0, 10.0])
    np.testing.assert_array_equal(out, [2.0, 0.0, 10.0])


def test_snap_is_exact_for_inexact_differences():
    assert guidance_step([0.7], [0.1])[0] == 0.1


def test_guidance_validation():
    with pytest.raises(ValueError):
        GuidanceState(tolerance=0)
    with pytest.raises(ValueError):
        GuidanceState(max_step=-1)


# ------------------------------------------------------------------ closed loop with stub estimators

def test_estimate_near_target_arrives_in_one_frame():
    res = run_episode(_fixed_estimate([0.0, 0.0, 10.5]), SMALL_SCENE, max_frames=10)
    assert res.termination == "arrived" and res.frames == 1
    np.testing.assert_allclose(res.final_position, [0, 0, 59.5])
    assert not res.reached_target and res.attack_success is None


def test_frozen_estimate_drives_into_collision():
    res = run_episode(_fixed_estimate([0.0, 0.0, 30.0]), SMALL_SCENE, max_frames=100)
    assert res.termination == "collision" and not res.reached_target
    assert res.frames == 56 and res.final_position[2] == 4.0


def test_frame_cap():
    res = run_episode(_fixed_estimate([0.0, 0.0, 30.0]), SMALL_SCENE, max_frames=7)
    assert res.termination == "max_frames" and res.frames == 7
    np.testing.assert_allclose(res.final_position, [0, 0, 53])


def test_burst_starts_at_threshold_crossing():
    plan = BurstPlan(0.1, start_distance=55, length=3)
    res = run_episode(_fixed_estimate([0.0, 0.0, 30.0]), SMALL_SCENE, plan=plan, max_frames=10)
    z = res.true_positions[:res.frames, 2]
    first = int(np.argmax(z <= 56))
    assert np.flatnonzero(res.attacked).tolist() == [first, first + 1, first + 2]
    # the stub has no image dependence, so the attack cannot change the outcome
    assert res.attacks_occurred and res.attack_success is True


def test_episode_is_reproducible():
    w = build_estimator(TINY, seed=3)
    a = run_episode(w, SMALL_SCENE, attack=AttackConfig(0.1, 0.3, 2, seed=1), max_frames=5)
    b = run_episode(w, SMALL_SCENE, attack=AttackConfig(0.1, 0.3, 2, seed=1), max_frames=5)
    np.testing.assert_array_equal(a.true_positions, b.true_positions)
    np.testing.assert_array_equal(a.attacked, b.attacked)


def test_detector_records_every_frame():
    w = _fixed_estimate([0.0, 0.0, 30.0])
    det = build_detector(DetectorConfig(feature_width=9, hidden=4, fc_widths=(3,)))
    res = run_episode(w, SMALL_SCENE, detector=det, background=BackgroundSet(np.zeros((2, 9))), max_frames=4)
    assert [r.frame for r in res.detections] == [0, 1, 2, 3]


def test_trace_file(tmp_path):
    res = run_episode(_fixed_estimate([0.0, 0.0, 30.0]), SMALL_SCENE, max_frames=3)
    write_episode_trace(tmp_path / "t.csv", res)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("frame,x,y,z")


# ------------------------------------------------------------------ matrices

def test_matrix_is_six_by_four_with_untested_cells():
    m = ExperimentMatrix(0.5)
    assert m.shape == (6, 4) and len(m.cells) == 24
    assert all(v == UNTESTED for v in m.cells.values()) and m.tested() == {}


def test_matrix_rejects_foreign_cells():
    with pytest.raises(ValueError):
        ExperimentMatrix(0.5, cells={(70, 5): "success"})


def test_monotonicity_check():
    m = ExperimentMatrix(0.5)
    m.cells[(20, 5)], m.cells[(20, 10)], m.cells[(20, 20)] = "failure", "success", "success"
    assert m.monotone_in_burst()
    m.cells[(20, 15)] = "failure"
    assert not m.monotone_in_burst()
    rates = m.success_rate_by_burst()
    assert rates[5] == 0.0 and rates[10] == 1.0 and rates[15] == 0.0


def test_attack_matrix_only_runs_tested_cells(tmp_path):
    w = _fixed_estimate([0.0, 0.0, 30.0])
    m = attack_matrix(w, 0.1, start_distances=(60, 50), burst_lengths=(5, 10), tested={(60, 5)}, scene=SMALL_SCENE,
                      max_frames=3)
    assert m.cells[(60, 5)] == "success" and m.cells[(50, 10)] == UNTESTED
    write_matrix_csv(tmp_path / "m.csv", [m])
    assert (tmp_path / "m.csv").read_text().splitlines()[1] == "0.1,60,5,success"


def test_default_axes():
    assert START_DISTANCES == (60, 50, 40, 30, 20, 10) and BURST_LENGTHS == (5, 10, 15, 20)


def test_detection_run_without_attacks_and_silent_detector_is_perfect():
    w = build_estimator(TINY)
    det = build_detector(DetectorConfig(feature_width=9, hidden=4, fc_widths=(3,)))
    det.params["fc1.weight"][...] = 0
    det.params["fc1.bias"][...] = -5.0
    spec = TrajectorySpec((0.0, 0.0, 60.0), (0.0, 0.0, 10.0), frame_count=6)
    rows, recs = detection_run(w, det, BackgroundSet(np.zeros((1, 9))), [spec], [0.1], attack_probability=0.0,
                               scene=SMALL_SCENE)
    assert len(rows) == 1 and rows[0].accuracy == 100.0 and rows[0].attacked_frames == 0
    assert len(recs[(0.1, 0)]) == 6
