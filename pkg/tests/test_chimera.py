"""Authentication schedule arithmetic and state transitions."""

import numpy as np
import pytest

from srfgo import factors as fmod
from srfgo.chimera import (AuthEvent, AuthResult, AuthSchedule, next_auth_time,
                           on_authentication, slow_channel)
from srfgo.detector import DetectorState
from srfgo.factors import AnchorFactor, GpsFactor, OdometryFactor
from srfgo.liegroup import Pose, compose, inverse
from srfgo.solver import WindowGraph


class TestSchedule:
    def test_slow_channel_steps(self):
        assert slow_channel(0.1).epoch_length_steps == 1800

    def test_next_from_zero(self):
        assert next_auth_time(slow_channel(0.1), 0) == 1800

    def test_next_from_boundary(self):
        # A step sitting exactly on the grid schedules the following epoch.
        assert next_auth_time(slow_channel(0.1), 1800) == 3600

    def test_next_just_before_boundary(self):
        assert next_auth_time(AuthSchedule(60), 59) == 60

    def test_validation(self):
        with pytest.raises(ValueError):
            AuthSchedule(0)
        with pytest.raises(ValueError):
            slow_channel(0.07)
        with pytest.raises(ValueError):
            next_auth_time(AuthSchedule(60), -1)
        with pytest.raises(ValueError):
            AuthEvent(1800, "maybe")
        with pytest.raises(ValueError):
            AuthEvent(-60, "authentic")


def _window_with_gps():
    info = fmod.default_odometry_information([0.01] * 3 + [0.05] * 3)
    poses = [Pose(np.eye(3), np.array([0.5 * k, 0.0, 0.0])) for k in range(4)]
    facs = [OdometryFactor(k, k + 1, compose(poses[k + 1], inverse(poses[k])), info)
            for k in range(3)]
    facs.append(AnchorFactor(0, poses[0], fmod.anchor_information()))
    sats = [np.array([2.0e7, 0.0, 0.0]), np.array([0.0, 2.0e7, 0.0]),
            np.array([0.0, 0.0, 2.0e7])]
    for s in sats:
        true_range = float(np.linalg.norm(poses[3].translation - s))
        facs.append(GpsFactor(3, s, true_range + 50.0, 7.0))
    return WindowGraph(list(enumerate(poses)), facs, 10)


class TestOnAuthentication:
    def test_failed_auth_mitigates_even_with_clean_detector(self):
        g = _window_with_gps()
        state = DetectorState()
        result = on_authentication(AuthEvent(1800, "failed"), state, g, AuthSchedule(1800))
        assert result.action == "gps-excluded"
        assert result.failsafe
        assert state.spoofed_flag and state.gps_excluded
        assert not result.graph.gps_factors()

    def test_authentic_auth_clears_latch_and_readmits(self):
        g = _window_with_gps()
        state = DetectorState(spoofed_flag=True, gps_excluded=True)
        result = on_authentication(AuthEvent(3600, "authentic"), state, g, AuthSchedule(1800))
        assert result.action == "gps-readmitted"
        assert not result.failsafe
        assert not state.spoofed_flag and not state.gps_excluded
        assert result.graph is g  # window untouched on success

    def test_authentic_auth_with_clean_detector_only_refreshes_trust(self):
        g = _window_with_gps()
        state = DetectorState()
        result = on_authentication(AuthEvent(0, "authentic"), state, g, AuthSchedule(1800))
        assert result == AuthResult("gps-readmitted", g, g.window_capacity, False)
        assert state == DetectorState()

    def test_trust_window_spans_one_window_of_steps(self):
        g = _window_with_gps()
        result = on_authentication(AuthEvent(1800, "authentic"), DetectorState(),
                                   g, AuthSchedule(1800))
        assert result.trust_until == 1800 + g.window_capacity

    def test_unscheduled_event_rejected(self):
        g = _window_with_gps()
        with pytest.raises(ValueError):
            on_authentication(AuthEvent(900, "authentic"), DetectorState(),
                              g, AuthSchedule(1800))
