import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from foliated_flows.drivers import (
    DriverPath,
    StreamKey,
    dump_driver,
    load_driver,
    sample_brownian,
    sample_driver,
    sample_jump_driver,
    sample_poisson_jumps,
)

SEED = 20250811


def test_zero_horizon_gives_empty_path():
    path = sample_brownian(StreamKey(SEED), horizon=0.0, dt=0.1)
    assert path.brownian_increments.size == 0
    assert path.brownian.tolist() == [0.0]


def test_same_key_reproduces_bit_exactly():
    key = StreamKey(SEED, replica_id=3, point_id=1, role="independent")
    a = sample_brownian(key, horizon=2.0, dt=0.01)
    b = sample_brownian(key, horizon=2.0, dt=0.01)
    assert a.brownian_increments.tobytes() == b.brownian_increments.tobytes()
    ja = sample_poisson_jumps(key, 1.0, 10.0)
    jb = sample_poisson_jumps(key, 1.0, 10.0)
    assert ja.tobytes() == jb.tobytes()


def test_increment_count_matches_ceil():
    path = sample_brownian(StreamKey(SEED), horizon=1.0, dt=0.3)
    assert path.brownian_increments.size == math.ceil(1.0 / 0.3)
    path = sample_brownian(StreamKey(SEED), horizon=100.0, dt=1e-3)
    assert path.brownian_increments.size == 100000


def test_invalid_steps_rejected():
    with pytest.raises(ValueError):
        sample_brownian(StreamKey(SEED), horizon=1.0, dt=2.0)
    with pytest.raises(ValueError):
        sample_brownian(StreamKey(SEED), horizon=-1.0, dt=0.1)
    with pytest.raises(ValueError):
        sample_brownian(StreamKey(SEED), horizon=float("inf"), dt=0.1)
    with pytest.raises(ValueError):
        sample_brownian(StreamKey(SEED), horizon=1.0, dt=float("nan"))
    with pytest.raises(ValueError):
        sample_poisson_jumps(StreamKey(SEED), rate=0.0, horizon=1.0)
    with pytest.raises(ValueError):
        sample_poisson_jumps(StreamKey(SEED), rate=-2.0, horizon=1.0)


def test_brownian_unit_time_variance_chi_square_window():
    # B_1 ~ N(0,1); over n replicas the sample variance concentrates within
    # 1 +- 4/sqrt(2n) (chi-square: std of the variance estimator is sqrt(2/n))
    n = 100_000
    vals = np.empty(n)
    for i in range(n):
        path = sample_brownian(StreamKey(SEED, replica_id=i), horizon=1.0, dt=1.0)
        vals[i] = path.brownian[-1]
    var = float(np.var(vals, ddof=1))
    half_width = 4.0 / math.sqrt(2.0 * n)
    assert 1.0 - half_width <= var <= 1.0 + half_width


def test_independence_across_point_ids():
    n = 20_000
    a = np.empty(n)
    b = np.empty(n)
    for i in range(n):
        a[i] = sample_brownian(StreamKey(SEED, i, point_id=0), 1.0, 1.0).brownian[-1]
        b[i] = sample_brownian(StreamKey(SEED, i, point_id=1), 1.0, 1.0).brownian[-1]
    corr = float(np.corrcoef(a, b)[0, 1])
    assert abs(corr) < 4.0 / math.sqrt(n)


def test_refinement_consistency_by_moment_matching():
    # pair-sums of the dt/2 path have the same distribution as dt increments
    key = StreamKey(SEED, replica_id=77)
    fine = sample_brownian(key, horizon=100.0, dt=0.005)
    pair_sums = fine.brownian_increments.reshape(-1, 2).sum(axis=1)
    n = pair_sums.size
    assert abs(np.mean(pair_sums)) < 4.0 * math.sqrt(0.01 / n)
    assert abs(np.var(pair_sums, ddof=1) - 0.01) < 4.0 * 0.01 * math.sqrt(2.0 / n)


def test_poisson_zero_horizon():
    assert sample_poisson_jumps(StreamKey(SEED), 1.0, 0.0).size == 0


def test_poisson_strictly_increasing_within_horizon():
    for rep in range(50):
        jumps = sample_poisson_jumps(StreamKey(SEED, rep), 3.0, 5.0)
        assert np.all(np.diff(jumps) > 0.0)
        assert jumps.size == 0 or (jumps[0] > 0.0 and jumps[-1] <= 5.0)


def test_poisson_mean_count_oracle():
    # mean count at rate 1 over [0, 2] is 2 with variance 2 (Poisson oracle)
    n = 100_000
    counts = np.empty(n)
    for i in range(n):
        counts[i] = sample_poisson_jumps(StreamKey(SEED, i), 1.0, 2.0).size
    assert abs(np.mean(counts) - 2.0) <= 4.0 * math.sqrt(2.0 / n)


def test_poisson_odd_count_probability_matches_antipodal_weight():
    # P(odd number of jumps by t) = (1 - e^{-2t})/2, the antipodal mass of the
    # rotation-jump semigroup formula; checked at t = 1 within 3 MC std errors
    n = 100_000
    t = 1.0
    odd = np.empty(n)
    for i in range(n):
        jumps = sample_poisson_jumps(StreamKey(SEED, i, point_id=5), 1.0, t)
        odd[i] = jumps.size % 2
    p_hat = float(np.mean(odd))
    p_true = 0.5 * (1.0 - math.exp(-2.0 * t))
    se = math.sqrt(p_true * (1.0 - p_true) / n)
    assert abs(p_hat - p_true) <= 3.0 * se


def test_jump_count_and_grid_lookup():
    path = DriverPath(
        key=StreamKey(SEED),
        horizon=1.0,
        dt=0.25,
        brownian_increments=np.array([0.1, -0.2, 0.3, 0.4]),
        jump_times=np.array([0.2, 0.7]),
    )
    assert path.jump_count(0.1) == 0
    assert path.jump_count(0.2) == 1
    assert path.jump_count(1.0) == 2
    assert path.brownian_at(0.5) == pytest.approx(-0.1)
    with pytest.raises(ValueError):
        path.brownian_at(0.3)  # off the grid
    with pytest.raises(ValueError):
        path.brownian_at(1.5)  # beyond horizon


def test_shifted_driver():
    key = StreamKey(SEED, replica_id=5)
    path = sample_driver(key, horizon=1.0, dt=0.25, jump_rate=4.0)
    sh = path.shifted(0.5)
    assert sh.horizon == pytest.approx(0.5)
    np.testing.assert_array_equal(sh.brownian_increments, path.brownian_increments[2:])
    expected = path.jump_times[path.jump_times > 0.5] - 0.5
    np.testing.assert_allclose(sh.jump_times, expected)


def test_distinct_roles_and_domains_differ():
    common = sample_brownian(StreamKey(SEED, 1, 0, "common"), 1.0, 0.5)
    indep = sample_brownian(StreamKey(SEED, 1, 0, "independent"), 1.0, 0.5)
    assert not np.array_equal(common.brownian_increments, indep.brownian_increments)
    # Brownian and Poisson draws from one key come from disjoint sub-streams:
    # regenerating one must not perturb the other
    key = StreamKey(SEED, 2)
    j1 = sample_poisson_jumps(key, 1.0, 5.0)
    _ = sample_brownian(key, 5.0, 0.1)
    j2 = sample_poisson_jumps(key, 1.0, 5.0)
    np.testing.assert_array_equal(j1, j2)


def test_binary_dump_round_trip_bit_exact():
    key = StreamKey(SEED, replica_id=9, point_id=2, role="independent")
    path = sample_driver(key, horizon=3.0, dt=0.1, jump_rate=1.0)
    buf = io.BytesIO()
    dump_driver(path, buf)
    buf.seek(0)
    back = load_driver(buf)
    assert back.key == key
    assert back.horizon == path.horizon and back.dt == path.dt
    assert back.brownian_increments.tobytes() == path.brownian_increments.tobytes()
    assert back.jump_times.tobytes() == path.jump_times.tobytes()


def test_jump_driver_has_no_brownian_component():
    path = sample_jump_driver(StreamKey(SEED), 5.0, 0.1)
    assert path.brownian_increments.size == 0
    assert np.all(path.jump_times <= 5.0)


@settings(deadline=None, max_examples=25)
@given(seed=st.integers(0, 2**32), horizon=st.floats(0.1, 20.0), rate=st.floats(0.2, 5.0))
def test_poisson_jumps_sorted_property(seed, horizon, rate):
    jumps = sample_poisson_jumps(StreamKey(seed), rate, horizon)
    assert np.all(np.diff(jumps) > 0.0)
    assert jumps.size == 0 or jumps[-1] <= horizon
