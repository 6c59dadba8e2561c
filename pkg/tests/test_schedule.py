import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rolldiff.schedule import NoiseSchedule, build_linear_schedule

# 40-digit mpmath product of the 200 interpolated alphas
ALPHA_BAR_200 = 0.13218275425061779


def iterative_alpha_bars(T):
    alphas = [0.9999 + (t - 1) * (0.98 - 0.9999) / (T - 1) for t in range(1, T + 1)]
    out = [1.0]
    for a in alphas:
        out.append(out[-1] * a)
    return alphas, out


@pytest.fixture(scope="module")
def sched():
    return build_linear_schedule(200)


class TestBuild:
    def test_endpoints(self, sched):
        assert sched.alphas[1] == 0.9999
        assert sched.alphas[200] == 0.98

    def test_alpha_bar_zero_is_one(self, sched):
        assert sched.alpha_bars[0] == 1.0

    def test_alpha_bar_final_matches_oracle(self, sched):
        _, ab = iterative_alpha_bars(200)
        assert sched.alpha_bars[200] == pytest.approx(ab[200], rel=1e-9)
        assert sched.alpha_bars[200] == pytest.approx(ALPHA_BAR_200, rel=1e-9)

    def test_whole_table_matches_oracle(self, sched):
        alphas, ab = iterative_alpha_bars(200)
        np.testing.assert_allclose(sched.alphas[1:], alphas, rtol=1e-12)
        np.testing.assert_allclose(sched.alpha_bars, ab, rtol=1e-9)

    def test_strictly_decreasing(self, sched):
        assert np.all(np.diff(sched.alpha_bars) < 0)

    def test_coefficients_in_unit_interval(self, sched):
        a = np.sqrt(sched.alpha_bars[1:])
        b = np.sqrt(1 - sched.alpha_bars[1:])
        assert np.all((a > 0) & (a <= 1)) and np.all((b > 0) & (b <= 1))

    @pytest.mark.parametrize("T", [0, 1, -5])
    def test_too_few_steps(self, T):
        with pytest.raises(ValueError):
            build_linear_schedule(T)

    def test_immutable(self, sched):
        with pytest.raises(ValueError):
            sched.alpha_bars[3] = 0.0

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            build_linear_schedule(10, sigma_mode="euler")


class TestSigma:
    def test_ddim_is_zero(self, sched):
        ddim = sched.with_mode("ddim")
        assert all(ddim.sigma(t) == 0.0 for t in range(1, 201))

    def test_first_step_zero(self, sched):
        assert sched.sigma(1) == 0.0

    def test_last_step_formula(self, sched):
        _, ab = iterative_alpha_bars(200)
        expected = math.sqrt((1 - ab[199]) / (1 - ab[200])) * math.sqrt(1 - 0.98)
        assert sched.sigma(200) == pytest.approx(expected, rel=1e-9)
        assert sched.sigma(200) == pytest.approx(0.1412013812316887, rel=1e-9)

    def test_range(self, sched):
        s = np.array([sched.sigma(t) for t in range(1, 201)])
        assert np.all((s >= 0) & (s < 1))
        # direction variance stays non-negative
        assert np.all(1 - sched.alpha_bars[:-1] - s**2 >= 0)

    @pytest.mark.parametrize("t", [0, 201])
    def test_out_of_range(self, sched, t):
        with pytest.raises(ValueError):
            sched.sigma(t)


class TestForwardDiffuse:
    def test_zero_noise(self):
        quarter = NoiseSchedule(
            2, np.array([1.0, 0.5, 0.5]), np.array([1.0, 0.5, 0.25]), np.zeros(3)
        )
        out = quarter.forward_diffuse(np.ones((88, 4)), 2, np.zeros((88, 4)))
        np.testing.assert_array_equal(out, 0.5)

    def test_zero_roll(self, sched):
        eps = np.random.default_rng(0).standard_normal((88, 10))
        out = sched.forward_diffuse(np.zeros((88, 10)), 77, eps)
        np.testing.assert_allclose(out, math.sqrt(1 - sched.alpha_bars[77]) * eps, rtol=1e-15)

    def test_final_step_coefficients(self, sched):
        rng = np.random.default_rng(1)
        roll = (rng.random((88, 16)) > 0.8).astype(float)
        eps = rng.standard_normal((88, 16))
        out = sched.forward_diffuse(roll, 200, eps)
        np.testing.assert_allclose(out, 0.36356946275865604 * roll + 0.9315670913838585 * eps, rtol=1e-9)

    def test_batched_torch_steps(self, sched):
        x = torch.ones(3, 88, 5)
        noise = torch.zeros(3, 88, 5)
        out = sched.forward_diffuse(x, torch.tensor([1, 100, 200]), noise)
        for i, t in enumerate([1, 100, 200]):
            assert torch.allclose(out[i], torch.full((88, 5), math.sqrt(sched.alpha_bars[t]), dtype=torch.float32))

    def test_shape_mismatch(self, sched):
        with pytest.raises(ValueError):
            sched.forward_diffuse(np.zeros((88, 4)), 3, np.zeros((88, 5)))

    @pytest.mark.parametrize("t", [0, 201])
    def test_step_out_of_range(self, sched, t):
        with pytest.raises(ValueError):
            sched.forward_diffuse(np.zeros((88, 4)), t, np.zeros((88, 4)))

    @settings(max_examples=50, deadline=None)
    @given(t=st.integers(1, 200), seed=st.integers(0, 2**32 - 1))
    def test_round_trip_recovers_noise(self, t, seed):
        sched = build_linear_schedule(200)
        rng = np.random.default_rng(seed)
        x0 = rng.random((88, 8))
        eps = rng.standard_normal((88, 8))
        xt = sched.forward_diffuse(x0, t, eps)
        rec = (xt - np.sqrt(sched.alpha_bars[t]) * x0) / np.sqrt(1 - sched.alpha_bars[t])
        np.testing.assert_allclose(rec, eps, rtol=1e-9, atol=1e-9 * np.abs(eps).max())


class TestTable:
    def test_round_trip(self, sched):
        back = type(sched).from_table(sched.to_table())
        np.testing.assert_array_equal(back.alpha_bars, sched.alpha_bars)
        assert back.sigma_mode == sched.sigma_mode

    def test_mode_kept(self, sched):
        back = type(sched).from_table(sched.with_mode("ddim").to_table())
        assert back.sigma_mode == "ddim"

    def test_columns(self, sched):
        rows = sched.to_table().splitlines()
        assert rows[1] == "t\talpha\talpha_bar\tsigma"
        assert len(rows) == 2 + 201
