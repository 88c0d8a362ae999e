import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mela.errors import ContractError
from mela.rewards import (INDICATOR_TERMS, TASK_WEIGHTS, TERM_TABLE, FeatureRecord, PhaseClock,
                          RewardSpec, RewardTerm, phase_vector, rbf, term_value, total_reward)

WIDTHS = sorted({w for w, _ in TERM_TABLE.values() if w is not None})


def test_width_table_values():
    assert {n: w for n, (w, _) in TERM_TABLE.items() if w is not None} == {
        "base_pose": -2.35, "base_height": -51.16, "base_velocity": -18.42,
        "torque_regularisation": -0.003, "joint_velocity_regularisation": -0.026,
        "yaw_velocity": -7.47, "foot_clearance": -51.16, "joint_reference": -29.88,
        "foot_placement": -18.42, "heading": -2.35, "goal_position": -0.74,
        "swing_stance": -460.50}


@pytest.mark.parametrize("column,total", [("trotting", 0.999), ("recovery", 1.001), ("mela", 1.000)])
def test_task_weight_columns_sum_to_about_one(column, total):
    # the published columns are rounded to three decimals
    assert math.isclose(sum(TASK_WEIGHTS[column].values()), total, abs_tol=1e-9)


def test_recovery_uses_only_the_first_seven_terms():
    used = [n for n, w in TASK_WEIGHTS["recovery"].items() if w > 0]
    assert used == list(TASK_WEIGHTS["recovery"])[:7]


@pytest.mark.parametrize("width", WIDTHS)
def test_rbf_bounded_and_peaked_on_random_draws(width):
    rng = np.random.default_rng(int(-width * 1000))
    x = rng.uniform(-3, 3, size=(10**5, 3))
    xh = rng.uniform(-3, 3, size=(10**5, 3))
    d2 = np.sum((x - xh) ** 2, axis=1)
    vals = np.maximum(np.exp(width * d2), np.finfo(float).tiny)
    # spot-check the scalar implementation against the vectorized formula
    for i in rng.choice(10**5, 200, replace=False):
        assert math.isclose(rbf(x[i], xh[i], width), vals[i], rel_tol=1e-12)
    assert np.all(vals > 0) and np.all(vals <= 1)
    # perturbation search around the target never beats the target itself
    for i in range(50):
        assert rbf(xh[i], xh[i], width) == 1.0
        for eps in (1e-1, 1e-2, 1e-3):
            dirs = rng.normal(size=(20, 3))
            for dvec in dirs:
                assert rbf(xh[i] + eps * dvec, xh[i], width) < 1.0


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=4), st.sampled_from(WIDTHS))
@settings(max_examples=300, deadline=None)
def test_rbf_in_unit_interval(x, width):
    v = rbf(np.array(x), np.zeros(len(x)), width)
    assert 0 < v <= 1


def test_rbf_rejects_positive_width_and_shape_mismatch():
    with pytest.raises(ContractError):
        rbf(1.0, 0.0, 0.5)
    with pytest.raises(ContractError):
        rbf(np.zeros(2), np.zeros(3), -1.0)


def test_phase_vector_is_unit_and_periodic():
    for t in np.linspace(0, 3, 31):
        v = phase_vector(PhaseClock(0.6, t))
        assert math.isclose(np.hypot(*v), 1.0)
        assert np.allclose(v, phase_vector(PhaseClock(0.6, t + 0.6)), atol=1e-12)
    with pytest.raises(ContractError):
        PhaseClock(0.0)


def full_record():
    return FeatureRecord(
        orientation=np.array([0.0, 0.0, -1.0]), height=0.5, base_velocity=np.zeros(3),
        yaw_rate=0.0, q=np.zeros(2), qd=np.zeros(2), tau=np.zeros(2), q_ref=np.zeros(2),
        foot_heights=np.array([0.1, 0.0]), foot_heights_nominal=np.zeros(2),
        foot_velocities=np.zeros((2, 2)), foot_positions=np.zeros((2, 2)),
        foot_contacts=np.array([False, True]), foot_contacts_desired=np.array([False, True]),
        body_contact=False, base_position=np.zeros(2), goal_position=np.zeros(2),
        goal_direction=np.array([1.0, 0.0, 0.0]))


def test_every_term_peaks_on_a_matching_record():
    f = full_record()
    for name in TERM_TABLE:
        target = 0.5 if name == "base_height" else None
        assert term_value(name, f, target=target) == 1.0, name


def test_indicator_terms():
    f = full_record()
    assert term_value("body_contact", FeatureRecord(body_contact=True)) == 0.0
    assert term_value("foot_contact", FeatureRecord(foot_contacts=np.zeros(2, bool))) == 0.0
    f.foot_contacts_desired = np.array([True, True])
    assert term_value("foot_contact_reference", f) == 0.0
    assert INDICATOR_TERMS <= set(TERM_TABLE)


def test_missing_feature_names_term_and_field():
    with pytest.raises(ContractError, match="yaw_velocity.*yaw_rate"):
        term_value("yaw_velocity", FeatureRecord())
    with pytest.raises(ContractError):
        term_value("no_such_term", FeatureRecord())


def test_total_reward_skips_zero_weight_terms():
    spec = RewardSpec((RewardTerm("torque_regularisation", 0.5), RewardTerm("yaw_velocity", 0.0)))
    assert total_reward(spec, FeatureRecord(tau=np.zeros(2))) == 0.5


@given(st.floats(-20, 20), st.floats(-20, 20))
@settings(max_examples=200, deadline=None)
def test_total_reward_bounded_by_weight_sum(tau, qd):
    spec = RewardSpec.for_task("recovery", targets={"base_height": 1.0})
    f = full_record()
    f.tau = np.array([tau, -tau])
    f.qd = np.array([qd, 0.0])
    r = total_reward(spec, f)
    assert 0 <= r <= spec.max_total + 1e-12


def test_overrides_change_weight_width_and_target():
    spec = RewardSpec.for_task("recovery").with_overrides(
        {"torque_regularisation": {"weight": 2.0, "width": -1.0}, "heading": {"weight": 0.1}})
    terms = {t.name: t for t in spec.terms}
    assert terms["torque_regularisation"].weight == 2.0 and terms["torque_regularisation"].width == -1.0
    assert terms["heading"].weight == 0.1
    with pytest.raises(ContractError):
        spec.with_overrides({"heading": {"colour": 1}})
    with pytest.raises(ContractError):
        spec.with_overrides({"heading": {"width": 1.0}})
