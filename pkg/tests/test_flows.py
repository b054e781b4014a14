import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from foliated_flows.drivers import DriverPath, StreamKey, sample_brownian, sample_jump_driver
from foliated_flows.flows import (
    AngularJumpPath,
    ManifoldExit,
    check_leaf_invariance,
    cylinder_trajectory,
    evolve_coalescing_circle,
    evolve_cylinder,
    evolve_cylinder_perturbed,
    evolve_torus,
    n_point_motion,
    perturbed_cylinder_path,
    torus_trajectory,
)
from foliated_flows.geometry import (
    CoalescingCircle,
    CylPoint,
    PerturbationField,
    RotationJumpCylinder,
    TorusPoint,
    TorusWinding,
    UnsupportedModel,
    circular_distance,
    leaf_defect,
)

SEED = 20250811


def _manual_driver(increments, dt, jumps=()):
    inc = np.asarray(increments, dtype=float)
    return DriverPath(
        key=StreamKey(0),
        horizon=inc.size * dt,
        dt=dt,
        brownian_increments=inc,
        jump_times=np.asarray(jumps, dtype=float),
    )


# ---------------------------------------------------------------------------
# torus


def test_torus_zero_noise_is_identity():
    model = TorusWinding.dense_default()
    start = TorusPoint.from_coords(0.3, 0.6)
    driver = _manual_driver([0.0, 0.0], dt=0.5)
    out = evolve_torus(model, start, driver, 1.0)
    assert out.lift == start.lift


def test_torus_full_wrap_returns_to_displayed_start():
    model = TorusWinding(v=(1.0, 0.0))
    start = TorusPoint.from_coords(0.25, 0.5)
    driver = _manual_driver([1.0], dt=1.0)
    out = evolve_torus(model, start, driver, 1.0)
    assert (out.a, out.b) == pytest.approx((start.a, start.b), abs=1e-12)
    assert out.lift[0] == pytest.approx(start.lift[0] + 1.0, abs=1e-12)


def test_torus_trajectory_stays_on_leaf():
    model = TorusWinding.dense_default()
    start = TorusPoint.from_coords(0.1, 0.9)
    driver = sample_brownian(StreamKey(SEED, 4), horizon=5.0, dt=1e-3)
    traj = torus_trajectory(model, start, driver)
    assert check_leaf_invariance(traj) <= 1e-12
    end = evolve_torus(model, start, driver, 5.0)
    assert leaf_defect(model, start, end) <= 1e-12


def test_torus_time_beyond_horizon_rejected():
    model = TorusWinding.dense_default()
    driver = _manual_driver([0.1], dt=1.0)
    with pytest.raises(ValueError):
        evolve_torus(model, TorusPoint.from_coords(0, 0), driver, 2.0)


def test_torus_cocycle():
    model = TorusWinding.dense_default()
    start = TorusPoint.from_coords(0.4, 0.2)
    driver = sample_brownian(StreamKey(SEED, 8), horizon=2.0, dt=0.25)
    whole = evolve_torus(model, start, driver, 2.0)
    mid = evolve_torus(model, start, driver, 1.0)
    comp = evolve_torus(model, mid, driver.shifted(1.0), 1.0)
    assert comp.lift == pytest.approx(whole.lift, abs=1e-12)


# ---------------------------------------------------------------------------
# rotation-jump cylinder


def test_cylinder_t0_is_identity():
    driver = _manual_driver([], dt=1.0)
    start = CylPoint(1.0, 2.0, 3.0)
    assert evolve_cylinder(start, driver, 0.0) == start


def test_cylinder_pure_rotation_without_jumps():
    driver = DriverPath(
        key=StreamKey(0), horizon=math.pi, dt=math.pi,
        brownian_increments=np.zeros(1), jump_times=np.empty(0),
    )
    start = CylPoint(0.5, 2.0, -3.0)
    out = evolve_cylinder(start, driver, math.pi)
    assert out.theta == pytest.approx(0.5 + math.pi, abs=1e-12)
    assert (out.r, out.z) == (2.0, -3.0)


def test_cylinder_jump_adds_pi():
    driver = _manual_driver([0.0], dt=2.0, jumps=[0.5])
    out = evolve_cylinder(CylPoint(0.0, 1.0, 0.0), driver, 1.0)
    assert out.theta == pytest.approx((1.0 + math.pi) % (2 * math.pi), abs=1e-12)


def test_cylinder_mc_mean_matches_semigroup_formula():
    # E cos(theta_t) = cos(t) e^{-2t} under the rotation-jump semigroup
    t, n = 1.0, 4000
    vals = np.empty(n)
    for i in range(n):
        driver = sample_jump_driver(StreamKey(SEED, i), 2.0, 0.5)
        vals[i] = math.cos(evolve_cylinder(CylPoint(0.0, 1.0, 0.0), driver, t).theta)
    expected = math.cos(t) * math.exp(-2.0 * t)
    se = float(np.std(vals, ddof=1)) / math.sqrt(n)
    assert abs(float(np.mean(vals)) - expected) <= 4.0 * se


def test_cylinder_cocycle():
    driver = sample_jump_driver(StreamKey(SEED, 3), 4.0, 0.5)
    start = CylPoint(0.7, 1.0, 0.0)
    whole = evolve_cylinder(start, driver, 3.0)
    mid = evolve_cylinder(start, driver, 1.25)
    comp = evolve_cylinder(mid, driver.shifted(1.25), 1.75)
    assert circular_distance(comp.theta, whole.theta) <= 1e-12


def test_angular_jump_path_prefix_matches_direct_quadrature():
    # independent oracle: dense trapezoid quadrature within each inter-jump
    # segment (theta is smooth there), segments summed
    jumps = np.array([0.4, 1.1, 2.3])
    path = AngularJumpPath(theta0=0.7, jumps=jumps)
    a, b = 0.2, 3.0
    breakpoints = np.concatenate(([a], jumps[(jumps > a) & (jumps < b)], [b]))
    total = 0.0
    for lo, hi in zip(breakpoints[:-1], breakpoints[1:]):
        ss = np.linspace(lo, hi, 200_001)
        count = np.searchsorted(jumps, 0.5 * (lo + hi), side="right")
        total += np.trapezoid(np.cos(0.7 + ss + math.pi * count), ss)
    assert path.cos_integral(a, b) == pytest.approx(total, abs=1e-9)


# ---------------------------------------------------------------------------
# perturbed cylinder


def test_perturbed_eps_zero_reduces_to_unperturbed():
    driver = sample_jump_driver(StreamKey(SEED, 12), 3.0, 0.01)
    start = CylPoint(0.3, 1.5, 0.7)
    K = PerturbationField(lambda0=2.0, k3="sine", angular="cosine")
    a = evolve_cylinder_perturbed(start, driver, 2.0, 0.0, K)
    b = evolve_cylinder(start, driver, 2.0)
    assert a == b


def test_perturbed_radial_closed_form():
    # r + eps*lambda0*t with angular = none, exactly
    driver = sample_jump_driver(StreamKey(SEED, 13), 10.0, 0.01)
    K = PerturbationField(lambda0=1.0, k3="zero", angular="none")
    out = evolve_cylinder_perturbed(CylPoint(0.0, 1.0, 0.5), driver, 10.0, 0.1, K)
    assert out.r == pytest.approx(2.0, abs=1e-12)
    assert out.z == 0.5


def test_perturbed_cosine_integral_closed_form_without_jumps():
    # lambda0 = 0, no jumps: r_t = r0 + eps (sin(theta0 + t) - sin(theta0))
    driver = DriverPath(
        key=StreamKey(0), horizon=2.0, dt=0.05,
        brownian_increments=np.zeros(40), jump_times=np.empty(0),
    )
    K = PerturbationField(lambda0=0.0, k3="zero", angular="cosine")
    theta0, eps, t = 0.9, 0.25, 1.7
    out = evolve_cylinder_perturbed(CylPoint(theta0, 1.0, 0.0), driver, t, eps, K)
    expected = 1.0 + eps * (math.sin(theta0 + t) - math.sin(theta0))
    assert out.r == pytest.approx(expected, abs=1e-12)


def test_perturbed_vertical_rk4_against_linear_oracle():
    # z' = -eps z has the exact solution z0 e^{-eps t}
    driver = sample_jump_driver(StreamKey(SEED, 14), 5.0, 0.01)
    K = PerturbationField(lambda0=0.0, k3="negate", angular="none")
    out = evolve_cylinder_perturbed(CylPoint(0.0, 1.0, 2.0), driver, 5.0, 0.3, K)
    assert out.z == pytest.approx(2.0 * math.exp(-0.3 * 5.0), abs=1e-10)


def test_perturbed_manifold_exit_carries_time():
    driver = sample_jump_driver(StreamKey(SEED, 15), 10.0, 0.01)
    K = PerturbationField(lambda0=-1.0, k3="zero", angular="none")
    with pytest.raises(ManifoldExit) as info:
        evolve_cylinder_perturbed(CylPoint(0.0, 1.0, 0.0), driver, 10.0, 0.5, K)
    assert info.value.exit_time == pytest.approx(2.0, abs=1e-6)


def test_perturbation_continuity_pathwise_bound():
    # common driver: sup_s |g(y_s) - g(y_s^eps)| <= Lip(g) eps t sup|K|
    # for the commuting field, with g ranging over the coordinate functions
    from foliated_flows.geometry import VerticalRegion

    driver = sample_jump_driver(StreamKey(SEED, 16), 8.0, 0.01)
    K = PerturbationField(lambda0=1.0, k3="sine", angular="none")
    eps, t = 0.05, 8.0
    start = CylPoint(0.2, 1.0, 1.0)
    path = perturbed_cylinder_path(start, driver, t, eps, K)
    sup_k = K.sup_norm(VerticalRegion())
    bound = eps * t * sup_k
    assert np.max(np.abs(path.r - start.r)) <= bound + 1e-12
    assert np.max(np.abs(path.z - start.z)) <= bound + 1e-12


# ---------------------------------------------------------------------------
# n-point motion (common noise)


def test_n_point_identical_starts_stay_identical():
    model = RotationJumpCylinder()
    starts = [CylPoint(1.0, 1.0, 0.0), CylPoint(1.0, 1.0, 0.0)]
    series = n_point_motion(model, starts, StreamKey(SEED, 21), horizon=5.0, dt=0.01)
    np.testing.assert_array_equal(series.states[:, 0, :], series.states[:, 1, :])
    assert series.hit_times == {(0, 1): 0.0}
    assert np.all(series.class_ids[:, 1] == 0)


def test_n_point_single_point_matches_evolve():
    model = RotationJumpCylinder()
    key = StreamKey(SEED, 22)
    series = n_point_motion(model, [CylPoint(0.5, 1.0, 0.0)], key, horizon=3.0, dt=0.05)
    traj = cylinder_trajectory(CylPoint(0.5, 1.0, 0.0), sample_jump_driver(key, 3.0, 0.05))
    np.testing.assert_array_equal(series.states[:, 0, :], traj.states)


def test_n_point_torus_common_noise_rigid():
    model = TorusWinding.dense_default()
    starts = [TorusPoint.from_coords(0.1, 0.2), TorusPoint.from_coords(0.5, 0.9)]
    series = n_point_motion(model, starts, StreamKey(SEED, 23), horizon=2.0, dt=0.01)
    gaps = series.states[:, 0, 2:4] - series.states[:, 1, 2:4]
    assert np.max(np.abs(gaps - gaps[0])) <= 1e-12


def test_n_point_cylinder_gap_constant():
    # both points share rotation and jumps, so the angular gap is invariant
    model = RotationJumpCylinder()
    delta = 0.8
    starts = [CylPoint(0.0, 1.0, 0.0), CylPoint(delta, 1.0, 0.0)]
    series = n_point_motion(model, starts, StreamKey(SEED, 24), horizon=10.0, dt=0.01)
    gap = np.array([
        circular_distance(a, b) for a, b in zip(series.states[:, 0, 0], series.states[:, 1, 0])
    ])
    np.testing.assert_allclose(gap, delta, atol=1e-12)
    assert series.hit_times == {}


def test_n_point_rejects_coalescing_model():
    with pytest.raises(UnsupportedModel):
        n_point_motion(
            CoalescingCircle(), [CylPoint(0.0, 1.0, 0.0)], StreamKey(SEED), 1.0, 0.1
        )


# ---------------------------------------------------------------------------
# coalescing circle


def test_coalescing_identical_starts_merge_at_zero():
    starts = [CylPoint(1.0, 1.0, 0.0), CylPoint(1.0, 1.0, 0.0)]
    series = evolve_coalescing_circle(starts, StreamKey(SEED, 31), 1.0, 0.01, sigma=1.0)
    assert series.hit_times[(0, 1)] == 0.0
    np.testing.assert_array_equal(series.states[:, 0, 0], series.states[:, 1, 0])


def test_coalescing_cross_leaf_never_merges():
    starts = [CylPoint(0.0, 1.0, 0.0), CylPoint(0.0, 2.0, 0.0), CylPoint(0.0, 1.0, 5.0)]
    series = evolve_coalescing_circle(starts, StreamKey(SEED, 32), 20.0, 0.01, sigma=2.0)
    assert series.hit_times == {}
    assert np.all(series.class_ids[-1] == [0, 1, 2])


def test_coalescing_same_leaf_pair_merges_and_moves_together():
    n_hit = 0
    for rep in range(40):
        starts = [CylPoint(0.0, 1.0, 0.0), CylPoint(math.pi, 1.0, 0.0)]
        series = evolve_coalescing_circle(
            starts, StreamKey(SEED, rep), 30.0, 0.01, sigma=2.0
        )
        if (0, 1) in series.hit_times:
            n_hit += 1
            t_hit = series.hit_times[(0, 1)]
            k = int(np.searchsorted(series.times, t_hit))
            # merged class adopts the lowest-index driver from the merge on
            np.testing.assert_array_equal(
                series.states[k:, 0, 0], series.states[k:, 1, 0]
            )
            assert np.all(series.class_ids[k:, 1] == 0)
            assert np.all(series.class_ids[:k, 1] == 1)
    assert n_hit >= 36  # absorption by T=30 at this diffusivity is near-certain


def test_coalescing_partition_classes_never_split():
    starts = [
        CylPoint(0.0, 1.0, 0.0),
        CylPoint(2.0, 1.0, 0.0),
        CylPoint(4.0, 1.0, 0.0),
    ]
    series = evolve_coalescing_circle(starts, StreamKey(SEED, 99), 40.0, 0.01, sigma=1.5)
    n_classes = np.array([len(set(row)) for row in series.class_ids])
    assert np.all(np.diff(n_classes) <= 0)
    # hit_times <= horizon implies merged at all later sampled times
    for (i, j), t_hit in series.hit_times.items():
        k = int(np.searchsorted(series.times, t_hit))
        assert np.all(series.class_ids[k:, i] == series.class_ids[k:, j])


def test_coalescing_rejects_bad_sigma():
    with pytest.raises(ValueError):
        evolve_coalescing_circle([CylPoint(0.0, 1.0, 0.0)], StreamKey(SEED), 1.0, 0.01, sigma=0.0)


# ---------------------------------------------------------------------------
# leaf invariance summary


def test_leaf_invariance_unperturbed_cylinder_exact_zero():
    driver = sample_jump_driver(StreamKey(SEED, 41), 50.0, 0.01)
    traj = cylinder_trajectory(CylPoint(0.0, 1.0, 0.0), driver)
    assert check_leaf_invariance(traj) == 0.0


def test_leaf_invariance_perturbed_cylinder_positive():
    driver = sample_jump_driver(StreamKey(SEED, 42), 10.0, 0.01)
    K = PerturbationField(lambda0=1.0, k3="zero", angular="none")
    traj = cylinder_trajectory(CylPoint(0.0, 1.0, 0.0), driver, perturbation=K, eps=0.1)
    assert check_leaf_invariance(traj) > 0.0


@settings(deadline=None, max_examples=15)
@given(seed=st.integers(0, 2**31), horizon=st.floats(0.5, 20.0))
def test_torus_leaf_invariance_property(seed, horizon):
    model = TorusWinding.dense_default()
    start = TorusPoint.from_coords(0.2, 0.7)
    driver = sample_brownian(StreamKey(seed), horizon, 0.01)
    traj = torus_trajectory(model, start, driver)
    assert check_leaf_invariance(traj) <= 1e-9
