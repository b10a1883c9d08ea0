import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from aptdiff.errors import RangeError, ShapeError
from aptdiff.sched import (
    NoiseSchedule,
    cfg_combine,
    make_schedule,
    posterior_mean,
    predict_x0,
    q_sample,
    respace,
    sample_step,
    schedule_from_alpha_bars,
)


def test_default_schedule_is_strictly_decreasing():
    s = make_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bars.shape == (1000,)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[0] == pytest.approx(1 - 1e-4, abs=0)
    assert np.all((s.betas > 0) & (s.betas < 1))


def test_two_step_hand_products():
    s = make_schedule(2, 0.5, 0.5)
    np.testing.assert_allclose(s.alpha_bars, [0.5, 0.25], rtol=0, atol=1e-15)


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_invalid_schedule_rejected(args):
    with pytest.raises(RangeError):
        make_schedule(*args)


@pytest.fixture
def quarter():
    # alpha_bar_1 = 0.25 exactly
    return schedule_from_alpha_bars([0.5, 0.25])


def test_q_sample_scalar_oracle(quarter):
    x = q_sample(torch.ones(2, 3, dtype=torch.float64), torch.ones(2, 3, dtype=torch.float64), 1, quarter)
    assert torch.allclose(x, torch.full((2, 3), 0.5 + math.sqrt(0.75), dtype=torch.float64), atol=1e-12)
    assert float(x[0, 0]) == pytest.approx(1.3660, abs=1e-4)


def test_q_sample_noise_free_and_identity_limit(quarter):
    x0 = torch.randn(4, 3, dtype=torch.float64)
    assert torch.allclose(q_sample(x0, torch.zeros_like(x0), 1, quarter), 0.5 * x0)
    # hypothetical noise-free step, built directly since the validators reject beta = 0
    tiny = NoiseSchedule(T=2, betas=np.array([0.0, 0.5]), alpha_bars=np.array([1.0, 0.5]))
    assert torch.equal(q_sample(x0, torch.randn_like(x0), 0, tiny), x0)


def test_predict_x0_inverts_hand_example(quarter):
    x = torch.full((3,), 0.5 + math.sqrt(0.75), dtype=torch.float64)
    assert torch.allclose(predict_x0(x, torch.ones(3, dtype=torch.float64), 1, quarter),
                          torch.ones(3, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(predict_x0(x, torch.zeros(3, dtype=torch.float64), 1, quarter), x / 0.5)


def test_shape_and_range_errors(quarter):
    with pytest.raises(ShapeError):
        q_sample(torch.zeros(2, 3), torch.zeros(3, 2), 0, quarter)
    with pytest.raises(RangeError):
        q_sample(torch.zeros(2), torch.zeros(2), 2, quarter)
    with pytest.raises(RangeError):
        q_sample(torch.zeros(2, 1), torch.zeros(2, 1), torch.tensor([0, -1]), quarter)
    with pytest.raises(RangeError):
        predict_x0(torch.zeros(2), torch.zeros(2), -1, quarter)
    with pytest.raises(ShapeError):
        cfg_combine(torch.zeros(2), torch.zeros(3), 1.0)


def test_per_sample_timesteps_broadcast():
    s = make_schedule(1000)
    x0, eps = torch.randn(3, 2, 4, 4), torch.randn(3, 2, 4, 4)
    t = torch.tensor([0, 500, 999])
    batched = q_sample(x0, eps, t, s)
    for i in range(3):
        assert torch.allclose(batched[i], q_sample(x0[i], eps[i], int(t[i]), s), atol=1e-6)


def test_posterior_mean_matches_noise_form():
    # textbook noise-parameterized mean: (x_t - beta/sqrt(1-ab) * eps) / sqrt(1 - beta)
    s = make_schedule(2, 0.5, 0.5)
    x_t = torch.tensor([1.0], dtype=torch.float64)
    eps = torch.tensor([0.2], dtype=torch.float64)
    expected = (1.0 - 0.5 / math.sqrt(1 - 0.25) * 0.2) / math.sqrt(0.5)
    assert float(posterior_mean(x_t, eps, 1, s)) == pytest.approx(expected, abs=1e-6)
    assert float(sample_step(x_t, eps, 0, s, torch.Generator().manual_seed(1))) == \
        float(sample_step(x_t, eps, 0, s, torch.Generator().manual_seed(2)))


def test_sample_step_seeded_determinism():
    s = make_schedule(50)
    x, e = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    a = sample_step(x, e, 10, s, torch.Generator().manual_seed(7))
    b = sample_step(x, e, 10, s, torch.Generator().manual_seed(7))
    c = sample_step(x, e, 10, s, torch.Generator().manual_seed(8))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_cfg_combine_cases():
    u, c = torch.zeros(5), torch.ones(5)
    assert torch.equal(cfg_combine(u, c, 0.0), u)
    assert torch.equal(cfg_combine(u, c, 1.0), c)
    assert torch.equal(cfg_combine(u, c, 7.5), torch.full((5,), 7.5))


def test_respace_keeps_endpoints_and_cumulative_products():
    full = make_schedule(1000)
    sub, ts = respace(full, 50)
    assert ts[0] == 0 and ts[-1] == 999 and len(ts) == 50
    np.testing.assert_array_equal(sub.alpha_bars, full.alpha_bars[ts])
    same, all_ts = respace(full, 1000)
    assert same is full and len(all_ts) == 1000


@settings(max_examples=40, deadline=None)
@given(t=st.integers(0, 999), seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3))
def test_round_trip_and_linearity(t, seed, a):
    s = make_schedule(1000)
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, generator=g, dtype=torch.float64)
    x_t = q_sample(x0, eps, t, s)
    assert torch.allclose(predict_x0(x_t, eps, t, s), x0, rtol=1e-5, atol=1e-8)
    assert torch.allclose(q_sample(a * x0, a * eps, t, s), a * x_t, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(w=st.floats(-20, 20, allow_nan=False))
def test_cfg_fixed_point(w):
    e = torch.randn(3, 4)
    assert torch.allclose(cfg_combine(e, e, w), e)


@settings(max_examples=25, deadline=None)
@given(T=st.integers(2, 300), b0=st.floats(1e-5, 0.1), span=st.floats(0, 0.5))
def test_alpha_bars_monotone_for_valid_schedules(T, b0, span):
    s = make_schedule(T, b0, min(b0 + span, 0.99))
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars <= 1))
