import numpy as np
import pytest
from hypothesis import given, strategies as st

from eqrestore.errors import InvalidArgumentError
from eqrestore.schedule import (NoiseSchedule, build_schedule, noise_coefficients, posterior_sigma,
                                prop1_coefficients, select_timesteps)


def test_linear_endpoints():
    s = build_schedule(1000, "linear")
    assert s.betas[0] == pytest.approx(1e-4, abs=1e-18)
    assert s.betas[999] == pytest.approx(0.02, abs=1e-18)


def test_two_step_cumulative_product():
    assert build_schedule(2).alpha_bars[1] == pytest.approx((1 - 1e-4) * (1 - 0.02), abs=1e-15)
    assert build_schedule(2).alpha_bars[1] == pytest.approx(0.979902, abs=1e-12)


def test_alpha_bar_zero_is_one():
    assert build_schedule().alpha_bar(0) == 1.0


@pytest.mark.parametrize("base_len,T,expected", [
    (1000, 4, [250, 500, 750, 1000]),
    (10, 10, list(range(1, 11))),
    (1000, 3, [333, 667, 1000]),
])
def test_select_timesteps(base_len, T, expected):
    assert list(select_timesteps(build_schedule(base_len), T).taus) == expected


@given(st.integers(2, 400), st.data())
def test_plan_strictly_increasing(n, data):
    T = data.draw(st.integers(1, n))
    taus = select_timesteps(build_schedule(n), T).taus
    assert len(taus) == T and taus[-1] == n
    assert all(a < b for a, b in zip(taus, taus[1:]))


def test_select_timesteps_rejects_bad_T():
    with pytest.raises(InvalidArgumentError):
        select_timesteps(build_schedule(10), 11)
    with pytest.raises(InvalidArgumentError):
        select_timesteps(build_schedule(10), 0)


def test_posterior_sigma_first_step_zero():
    assert posterior_sigma(build_schedule(), 1) == 0.0


def test_posterior_sigma_hand_value():
    # beta_1 = 0.1, beta_2 = 0.5 -> abar_1 = 0.9, abar_2 = 0.45
    s = NoiseSchedule(np.array([0.1, 0.5]))
    assert s.alpha_bar(2) == pytest.approx(0.45)
    assert posterior_sigma(s, 2) == pytest.approx(np.sqrt(0.1 / 0.55 * 0.5), abs=1e-12)
    assert posterior_sigma(s, 2) == pytest.approx(0.30151, abs=1e-5)


def test_noise_coefficients_values():
    c1, c2 = noise_coefficients(0.5, 0.15)
    assert c1 == pytest.approx(0.10607, abs=1e-5)
    assert c2 == pytest.approx(0.69911, abs=1e-5)
    assert noise_coefficients(0.3, 0.0)[0] == 0.0


@given(st.floats(1e-6, 1 - 1e-6), st.floats(0, 0.999))
def test_noise_coefficients_pythagorean(abar, eta):
    c1, c2 = noise_coefficients(abar, eta)
    assert c1 ** 2 + c2 ** 2 == pytest.approx(1 - abar, rel=1e-12, abs=1e-15)


def test_noise_coefficients_rejects_eta():
    with pytest.raises(InvalidArgumentError):
        noise_coefficients(0.5, 1.0)


def test_coefficients_shapes_and_variants():
    s = build_schedule()
    p = select_timesteps(s, 5)
    c = prop1_coefficients(s, p, 0.15)
    assert c.T == 5 and c.abar[0] == 1.0 and c.abar.shape == (6,)
    assert c.ratios.shape == (6, 6)
    assert np.allclose(np.diag(c.ratios), 1.0)
    assert c.variant == "alpha" and c.noise_ref == "previous"
    # the last step lands on abar = 1, so both noise weights vanish there
    assert c.c1[1] == 0.0 and c.c2[1] == 0.0
    cur = prop1_coefficients(s, p, 0.15, noise_ref="current")
    assert cur.c2[1] > 0
    with pytest.raises(InvalidArgumentError):
        prop1_coefficients(s, p, 0.15, variant="nope")
