import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from numpy.testing import assert_allclose

from tests.conftest import complex_normal
from utils.errors import ArgumentError, UndefinedReferenceError
from utils.link_metrics import (
    NMSE_FLOOR_DB,
    LinkParams,
    active_tap_capacity,
    active_taps,
    db_to_linear,
    effective_slice,
    ergodic_capacity,
    frame_capacity,
    nmse_db,
    outage_curve,
    outage_probability,
    rmse,
    summarize,
)


class TestNmse:
    def test_perfect_prediction_hits_floor(self, rng):
        x = complex_normal(rng, (3, 4))
        assert nmse_db([x], [x]) == NMSE_FLOOR_DB == -300.0

    def test_zero_prediction_is_zero_db(self, rng):
        x = complex_normal(rng, (3, 4))
        assert nmse_db([np.zeros_like(x)], [x]) == 0.0

    def test_error_scaling_shift(self, rng):
        truth = complex_normal(rng, (5, 6))
        err = 0.01 * complex_normal(rng, (5, 6))
        base = nmse_db([truth + err], [truth])
        scaled = nmse_db([truth + 10 * err], [truth])
        assert abs(scaled - base - 20.0) <= 1e-9

    def test_invariant_under_global_unitary(self, rng):
        truths = [complex_normal(rng, 6) for _ in range(4)]
        preds = [t + 0.1 * complex_normal(rng, 6) for t in truths]
        U, _ = np.linalg.qr(complex_normal(rng, (6, 6)))
        rotated = nmse_db([U @ p for p in preds], [U @ t for t in truths])
        assert rotated == pytest.approx(nmse_db(preds, truths), abs=1e-9)

    def test_zero_truth(self):
        with pytest.raises(UndefinedReferenceError):
            nmse_db([np.ones(3)], [np.zeros(3)])

    def test_length_mismatch(self):
        with pytest.raises(ArgumentError):
            nmse_db([np.ones(3)], [])


class TestRmse:
    def test_zero_error_and_offset(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert rmse([1.25, 2.25, -0.75], [1.0, 2.0, -1.0]) == pytest.approx(0.25, abs=1e-15)

    def test_matches_exact_arithmetic(self, rng):
        preds, truths = rng.standard_normal(10), rng.standard_normal(10)
        exact = sum((Fraction(float(p)) - Fraction(float(t))) ** 2 for p, t in zip(preds, truths)) / 10
        assert abs(rmse(list(preds), list(truths)) - math.sqrt(exact)) <= 1e-12

    def test_vector_samples(self):
        preds = [np.array([1.0, 1.0]), np.array([0.0, 0.0])]
        truths = [np.array([0.0, 0.0]), np.array([0.0, 0.0])]
        assert rmse(preds, truths) == pytest.approx(1.0)

    def test_empty(self):
        with pytest.raises(ArgumentError):
            rmse([], [])


class TestCapacity:
    def test_frame_capacity_examples(self):
        assert frame_capacity(np.zeros((2, 3)), 5.0) == 0.0
        assert frame_capacity(np.ones((4, 4)), 1.0) == 1.0
        assert frame_capacity(np.exp(1j * np.linspace(0, 3, 16)), 3.0) == pytest.approx(2.0, abs=1e-15)

    def test_nondecreasing_in_snr(self, rng):
        H = complex_normal(rng, (8, 16))
        caps = [frame_capacity(H, rho) for rho in np.linspace(0.0, 100.0, 41)]
        assert caps[0] == 0.0
        assert np.all(np.diff(caps) >= 0)

    def test_negative_snr(self):
        with pytest.raises(ArgumentError):
            frame_capacity(np.ones(2), -1.0)

    def test_ergodic(self, rng):
        H = complex_normal(rng, (4, 4))
        assert ergodic_capacity([H], 2.0) == frame_capacity(H, 2.0)
        rotated = [H * np.exp(1j * phi) for phi in (0.3, 1.1, 2.9)]
        caps = [frame_capacity(F, 2.0) for F in rotated]
        assert_allclose(caps, caps[0], rtol=1e-14)
        frames = [complex_normal(rng, (3, 3)) for _ in range(4)]
        assert ergodic_capacity(frames, 4.0) == ergodic_capacity([f.copy() for f in frames], 4.0)

    def test_ergodic_empty(self):
        with pytest.raises(ArgumentError):
            ergodic_capacity([], 1.0)

    def test_db_conversion(self):
        assert db_to_linear(0.0) == 1.0
        assert db_to_linear(20.0) == pytest.approx(100.0)
        assert LinkParams.from_db(10.0, 1.5).snr_linear == pytest.approx(10.0)


class TestOutage:
    def test_bounds(self, rng):
        frames = [complex_normal(rng, (4, 4)) for _ in range(10)]
        assert outage_probability(frames, 1.0, 0.0) == 0.0
        assert outage_probability(frames, 1.0, 1e6) == 1.0

    def test_strict_inequality(self):
        assert outage_probability([np.ones((2, 2))], 1.0, 1.0) == 0.0

    def test_curve_nondecreasing(self, rng):
        frames = [complex_normal(rng, (4, 4)) * rng.uniform(0.1, 2) for _ in range(50)]
        curve = outage_curve(frames, db_to_linear(6.0), np.arange(0.5, 3.51, 0.5))
        assert all(b >= a for a, b in zip(curve, curve[1:]))

    def test_empty(self):
        with pytest.raises(ArgumentError):
            outage_probability([], 1.0, 1.0)


def brute_force_active_capacity(H, rho, fraction):
    power = np.abs(np.ravel(H)) ** 2
    total = power.sum()
    for k in range(1, power.size + 1):
        # smallest subset size whose best member set covers the fraction
        best = max(itertools.combinations(range(power.size), k), key=lambda idx: power[list(idx)].sum())
        if power[list(best)].sum() >= fraction * total:
            chosen = power[list(best)]
            return float(np.mean(np.log2(1 + rho * chosen / chosen.mean())))
    raise AssertionError("fraction never covered")


class TestActiveTaps:
    def test_all_equal_taps(self):
        H = 2.0 * np.ones((3, 4))
        assert active_tap_capacity(H, 3.0) == pytest.approx(2.0, abs=1e-15)
        assert len(active_taps(H)) == 12

    def test_single_dominant_tap(self):
        H = np.full(8, 0.01, dtype=complex)
        H[5] = 10.0
        assert list(active_taps(H, 0.5)) == [5]
        assert active_tap_capacity(H, 7.0, 0.5) == pytest.approx(3.0, abs=1e-12)

    @pytest.mark.parametrize("fraction", [0.5, 0.9, 0.99])
    def test_matches_brute_force(self, rng, fraction):
        H = np.zeros(10, dtype=complex)
        H[rng.choice(10, size=6, replace=False)] = complex_normal(rng, 6)
        got = active_tap_capacity(H, 4.0, fraction)
        assert abs(got - brute_force_active_capacity(H, 4.0, fraction)) <= 1e-12

    def test_zero_frame(self):
        with pytest.raises(UndefinedReferenceError):
            active_tap_capacity(np.zeros(4), 1.0)

    def test_bad_fraction(self):
        with pytest.raises(ArgumentError):
            active_taps(np.ones(4), 0.0)


class TestEffectiveSlice:
    def test_combines_transmit_rows(self):
        ref = np.ones((2, 6), dtype=complex)
        ref[1, 3] = -1.0
        slc = effective_slice(ref, n_doppler=3, n_delay=2)
        assert slc.shape == (2, 3)
        assert slc[0, 0] == pytest.approx(math.sqrt(2))
        assert slc[1, 0] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ArgumentError):
            effective_slice(np.ones((2, 5)), 3, 2)


def test_summarize(rng):
    truth = [complex_normal(rng, (2, 3)) for _ in range(4)]
    report = summarize(truth, truth, truth, LinkParams.from_db(10.0, 1.0), config={"seed": 1})
    assert report.nmse_db == NMSE_FLOOR_DB
    assert report.rmse == 0.0
    assert report.config == {"seed": 1}
    assert 0.0 <= report.outage <= 1.0
