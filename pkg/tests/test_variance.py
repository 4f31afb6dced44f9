import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fiqlab import variance
from fiqlab.errors import DomainError, StructuralError
from fiqlab.rngstreams import rng_for


class TestInit:
    def test_all_ones(self):
        tracker = variance.init_tracker(7, total_steps=10)
        assert np.all(tracker.v == 1.0)
        assert tracker.step == 0

    def test_total_steps_positive(self):
        with pytest.raises(DomainError):
            variance.init_tracker(3, total_steps=0)


class TestAlphaSchedule:
    def test_endpoints_and_midpoint(self):
        tracker = variance.init_tracker(2, total_steps=100)
        assert variance.alpha_at(tracker) == 0.9
        tracker.step = 100
        assert variance.alpha_at(tracker) == 1.0
        tracker.step = 50
        assert variance.alpha_at(tracker) == pytest.approx(0.95, abs=1e-12)

    def test_clamped_past_end(self):
        tracker = variance.init_tracker(2, total_steps=10)
        tracker.step = 25
        assert variance.alpha_at(tracker) == 1.0


class TestUpdate:
    def test_alpha_one_is_identity(self):
        tracker = variance.init_tracker(4, total_steps=5,
                                        alpha_start=1.0, alpha_end=1.0)
        before = tracker.v.copy()
        variance.update(tracker, {0: [0.1], 2: [-0.9, 0.5]})
        assert np.array_equal(tracker.v, before)
        assert tracker.step == 1

    def test_hand_evaluated_single_sample(self):
        tracker = variance.init_tracker(1, total_steps=10**9)
        variance.update(tracker, {0: [0.8]})
        assert tracker.v[0] == pytest.approx(0.92, abs=1e-9)

    def test_absent_class_bit_identical(self):
        tracker = variance.init_tracker(5, total_steps=10)
        variance.update(tracker, {1: [0.3]})
        raw = tracker.v.copy()
        variance.update(tracker, {2: [0.5]})
        assert tracker.v[1].tobytes() == raw[1].tobytes()
        assert tracker.v[0].tobytes() == raw[0].tobytes()

    def test_unknown_class_rejected(self):
        tracker = variance.init_tracker(3, total_steps=10)
        with pytest.raises(StructuralError):
            variance.update(tracker, {3: [0.1]})
        with pytest.raises(StructuralError):
            variance.update(tracker, {-1: [0.1]})

    def test_same_class_samples_averaged_once(self):
        t1 = variance.init_tracker(1, total_steps=10**9)
        variance.update(t1, {0: [0.2, 0.6]})
        t2 = variance.init_tracker(1, total_steps=10**9)
        variance.update(t2, {0: [0.6, 0.2]})
        assert t1.v[0] == t2.v[0]
        expected = 0.9 * 1.0 + 0.1 * np.mean([0.8, 0.4])
        assert t1.v[0] == pytest.approx(expected, abs=1e-12)

    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=8),
           st.floats(0, 2))
    @settings(max_examples=150)
    def test_convexity_bounds(self, ccs_values, v0):
        tracker = variance.init_tracker(1, total_steps=100)
        tracker.v[0] = v0
        tracker.step = 37
        obs = float(np.mean([1.0 - c for c in ccs_values]))
        variance.update(tracker, {0: ccs_values})
        lo, hi = min(v0, obs), max(v0, obs)
        assert lo - 1e-12 <= tracker.v[0] <= hi + 1e-12

    def test_replay_bit_identical(self):
        rng = rng_for(0, 60)
        stream = [{int(rng.integers(0, 6)): rng.uniform(-1, 1, 3).tolist()}
                  for _ in range(40)]
        t1 = variance.init_tracker(6, total_steps=40)
        t2 = variance.init_tracker(6, total_steps=40)
        for batch in stream:
            variance.update(t1, batch)
        for batch in stream:
            variance.update(t2, batch)
        assert t1.v.tobytes() == t2.v.tobytes()

    def test_v_stays_in_range(self):
        tracker = variance.init_tracker(3, total_steps=50)
        rng = rng_for(0, 61)
        for _ in range(50):
            variance.update(tracker, {int(rng.integers(0, 3)):
                                      rng.uniform(-1, 1, 2).tolist()})
        assert np.all(tracker.v >= 0.0) and np.all(tracker.v <= 2.0)


class TestWeights:
    def test_all_equal_gives_ones(self):
        tracker = variance.init_tracker(5, total_steps=10)
        wv = variance.weights(tracker)
        assert np.all(wv.w == 1.0)
        assert wv.sigma < variance.SIGMA_FLOOR

    def test_clamp_floor_and_ceiling_exact(self):
        tracker = variance.init_tracker(4, total_steps=10)
        # mean 1.0, population std 1.0: z-scores are (v - 1) exactly
        tracker.v = np.array([-1.0, 1.0, 1.0 + np.sqrt(2.0), 1.0 - np.sqrt(2.0)])
        tracker.v = np.array([0.0, 1.0, 1.0, 2.0])  # mu=1, sigma=sqrt(0.5)
        wv = variance.weights(tracker)
        sigma = np.sqrt(0.5)
        assert wv.w[0] == 0.0                     # z = -1/sigma < -1 -> exact 0
        assert wv.w[3] == 1.0                     # z > 0 -> exact 1
        assert 0.0 < wv.w[1] <= 1.0

    def test_zscore_minus_two_and_plus_one(self):
        tracker = variance.init_tracker(6, total_steps=10)
        v = np.array([0.0, 1.0, 1.0, 1.0, 1.0, 1.0])
        tracker.v = v
        wv = variance.weights(tracker)
        z = (v - v.mean()) / v.std()
        assert z[0] < -1
        assert wv.w[0] == 0.0
        assert np.all(wv.w[1:] == 1.0)

    def test_unit_gaussian_zero_fraction_near_16_percent(self):
        tracker = variance.init_tracker(200_000, total_steps=10)
        tracker.v = rng_for(0, 62).standard_normal(200_000)
        wv = variance.weights(tracker)
        frac = float(np.mean(wv.w == 0.0))
        assert abs(frac - 0.1587) < 0.01

    @given(st.lists(st.floats(0, 2), min_size=3, max_size=30))
    @settings(max_examples=150)
    def test_weights_nondecreasing_in_v(self, values):
        tracker = variance.init_tracker(len(values), total_steps=10)
        tracker.v = np.array(values)
        wv = variance.weights(tracker)
        order = np.argsort(tracker.v)
        assert np.all(np.diff(wv.w[order]) >= 0.0)
        assert np.all(wv.w >= 0.0) and np.all(wv.w <= 1.0)

    def test_export_csv(self, tmp_path):
        tracker = variance.init_tracker(3, total_steps=10)
        tracker.v = np.array([0.5, 1.0, 1.5])
        path = tmp_path / "weights.csv"
        variance.export_weights_csv(tracker, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "class_id,v,weight"
        assert len(lines) == 4
        assert lines[1].startswith("0,0.5,")
