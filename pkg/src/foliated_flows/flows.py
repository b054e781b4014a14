"""Pathwise simulation of the foliated flows.

* Torus winding: x_t = x_0 + v B_t on the universal cover, displayed mod Z^2.
* Rotation-jump cylinder: theta_t = theta_0 + t + pi N_t with N a rate-1
  Poisson clock; (r, z) are untouched by the unperturbed flow.  The
  eps-perturbed flow moves (r, z) by the transversal field eps*K while theta
  keeps the exact same rotation and jumps (common noise).
* Coalescing circle: each point follows an independent leafwise Brownian
  motion; same-leaf trajectories merge when they meet and move together
  afterwards.  Points on different leaves can never meet.

The angular path of the cylinder models is piecewise linear between jump
times, so time integrals of trigonometric functions along it are computed in
closed form (no quadrature error).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .drivers import (
    ROLE_INDEPENDENT,
    DriverPath,
    StreamKey,
    sample_brownian,
    sample_jump_driver,
)
from .geometry import (
    TWO_PI,
    CoalescingCircle,
    CylPoint,
    FoliatedModel,
    PerturbationField,
    RotationJumpCylinder,
    TorusPoint,
    TorusWinding,
    UnsupportedModel,
    wrap_angle,
)

CYLINDER_JUMP_RATE = 1.0

_TIME_TOL = 1e-9


class ManifoldExit(RuntimeError):
    """A perturbed trajectory left the manifold (r reached 0)."""

    def __init__(self, exit_time: float):
        super().__init__(f"trajectory exited the manifold (r <= 0) at t={exit_time}")
        self.exit_time = exit_time


@dataclass(frozen=True)
class Trajectory:
    """Single-point sample path on a model, recorded on explicit times."""

    model: FoliatedModel
    start: TorusPoint | CylPoint
    times: np.ndarray
    states: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.times[0] != 0.0:
            raise ValueError("trajectory must start at time 0")
        if len(self.times) != len(self.states):
            raise ValueError("times/states length mismatch")

    def point_at(self, index: int):
        row = self.states[index]
        if isinstance(self.model, TorusWinding):
            return TorusPoint.from_lift((row[2], row[3]))
        return CylPoint.from_angle(row[0], row[1], row[2])


@dataclass(frozen=True)
class NPointSeries:
    """n simultaneous trajectories plus the coalescence bookkeeping.

    ``class_ids[k, i]`` is the canonical label (lowest member index) of the
    partition class of point i at sample time k; classes only ever merge.
    ``hit_times`` maps unordered index pairs to their first meeting time.
    """

    model: FoliatedModel
    times: np.ndarray
    states: np.ndarray  # (n_times, n_points, n_coords)
    columns: tuple[str, ...]
    class_ids: np.ndarray  # (n_times, n_points) int
    hit_times: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return self.states.shape[1]

    def partition_at(self, index: int) -> np.ndarray:
        return self.class_ids[index]


# ---------------------------------------------------------------------------
# Torus winding flow


def evolve_torus(model: TorusWinding, start: TorusPoint, driver: DriverPath, t: float) -> TorusPoint:
    """phi_t(x) = x + v B_t on the cover, displayed mod Z^2 (t on the driver grid)."""
    if t > driver.horizon + _TIME_TOL:
        raise ValueError(f"t={t} beyond driver horizon {driver.horizon}")
    b = driver.brownian_at(t)
    return TorusPoint.from_lift((start.lift[0] + model.v[0] * b, start.lift[1] + model.v[1] * b))


def torus_trajectory(model: TorusWinding, start: TorusPoint, driver: DriverPath) -> Trajectory:
    """Full path on the driver's dt grid, carrying cover lifts."""
    b = driver.brownian
    lifts = np.empty((b.size, 2))
    lifts[:, 0] = start.lift[0] + model.v[0] * b
    lifts[:, 1] = start.lift[1] + model.v[1] * b
    states = np.empty((b.size, 4))
    states[:, 0] = lifts[:, 0] - np.floor(lifts[:, 0])
    states[:, 1] = lifts[:, 1] - np.floor(lifts[:, 1])
    states[:, 2:] = lifts
    return Trajectory(
        model=model,
        start=start,
        times=driver.times,
        states=states,
        columns=("a", "b", "lift_a", "lift_b"),
    )


# ---------------------------------------------------------------------------
# Rotation-jump cylinder flow


@dataclass(frozen=True)
class AngularJumpPath:
    """theta(s) = theta0 + s + pi * N_s, piecewise linear between jump times.

    Provides exact prefix integrals of cos(theta(s)), so every time integral
    over a subinterval is a difference of two prefix values; sums of such
    integrals over adjacent intervals telescope exactly.
    """

    theta0: float
    jumps: np.ndarray

    def counts(self, ts) -> np.ndarray:
        return np.searchsorted(self.jumps, ts, side="right")

    def theta(self, ts):
        raw = self.theta0 + np.asarray(ts, dtype=float) + math.pi * self.counts(ts)
        return np.mod(raw, TWO_PI)

    @cached_property
    def _jump_prefix(self) -> np.ndarray:
        # F(tau_c) for c = 0..m where F is the cos integral from time 0
        m = self.jumps.size
        out = np.empty(m + 1)
        out[0] = 0.0
        if m:
            nodes = np.concatenate(([0.0], self.jumps))
            signs = (-1.0) ** np.arange(m)
            seg = np.sin(self.theta0 + nodes[1:]) - np.sin(self.theta0 + nodes[:-1])
            np.cumsum(signs * seg, out=out[1:])
        return out

    def cos_integral_prefix(self, ts) -> np.ndarray:
        """F(ts) = integral of cos(theta(s)) ds over [0, ts], exact."""
        ts = np.asarray(ts, dtype=float)
        c = self.counts(ts)
        last_jump = np.concatenate(([0.0], self.jumps))[c]
        signs = (-1.0) ** c
        return self._jump_prefix[c] + signs * (
            np.sin(self.theta0 + ts) - np.sin(self.theta0 + last_jump)
        )

    def cos_integral(self, a: float, b: float) -> float:
        pref = self.cos_integral_prefix(np.array([a, b]))
        return float(pref[1] - pref[0])


def evolve_cylinder(start: CylPoint, driver: DriverPath, t: float) -> CylPoint:
    """Unperturbed flow: rotate by t, jump by pi at each driver jump time <= t."""
    if t > driver.horizon + _TIME_TOL:
        raise ValueError(f"t={t} beyond driver horizon {driver.horizon}")
    if t < 0.0:
        raise ValueError(f"negative time {t}")
    theta = wrap_angle(start.theta + t + math.pi * driver.jump_count(t))
    return CylPoint(theta=theta, r=start.r, z=start.z)


def _rk4_path(rate, z0: float, ts: np.ndarray) -> np.ndarray:
    """Classical 4th-order steps of z' = rate(z) along the (possibly nonuniform) grid ts."""
    out = np.empty(ts.size)
    out[0] = z0
    z = z0
    for k in range(ts.size - 1):
        h = ts[k + 1] - ts[k]
        k1 = rate(z)
        k2 = rate(z + 0.5 * h * k1)
        k3 = rate(z + 0.5 * h * k2)
        k4 = rate(z + h * k3)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = z
    return out


def _record_grid(driver: DriverPath, t: float, extra_times=None) -> np.ndarray:
    """dt grid up to t, plus jump times and any extra breakpoints, sorted unique."""
    n_full = int(math.floor(t / driver.dt + _TIME_TOL))
    grid = np.arange(n_full + 1) * driver.dt
    parts = [grid, np.array([t]), driver.jump_times[driver.jump_times <= t]]
    if extra_times is not None:
        extra = np.asarray(extra_times, dtype=float)
        parts.append(extra[extra <= t + _TIME_TOL])
    ts = np.unique(np.concatenate(parts))
    # collapse near-duplicates (e.g. a jump landing within tolerance of a grid point)
    keep = np.concatenate(([True], np.diff(ts) > _TIME_TOL * max(1.0, t)))
    ts = ts[keep]
    ts[0] = 0.0
    ts[-1] = t
    return ts


@dataclass(frozen=True)
class PerturbedCylinderPath:
    """eps-perturbed cylinder path recorded on the dt grid plus jump times.

    theta equals the unperturbed flow's angle pathwise; r integrates
    eps * (lambda0 [+ cos theta]) exactly piecewise, z integrates
    eps * k3(z) with RK4 on the recorded grid.
    """

    start: CylPoint
    eps: float
    perturbation: PerturbationField
    angular: AngularJumpPath
    times: np.ndarray
    r: np.ndarray
    z: np.ndarray

    def state_at(self, t: float) -> CylPoint:
        k = int(np.searchsorted(self.times, t))
        if k >= self.times.size or abs(self.times[k] - t) > _TIME_TOL * max(1.0, t):
            raise ValueError(f"time {t} not on the recorded grid")
        return CylPoint.from_angle(float(self.angular.theta(t)), float(self.r[k]), float(self.z[k]))

    def index_of(self, t: float) -> int:
        """Index of the recorded time nearest to t (within the grid-collapse tolerance)."""
        k = int(np.searchsorted(self.times, t))
        best = k
        if k >= self.times.size or (k > 0 and t - self.times[k - 1] < self.times[k] - t):
            best = k - 1
        if abs(self.times[best] - t) > _TIME_TOL * max(1.0, self.times[-1]):
            raise ValueError(f"time {t} not on the recorded grid")
        return best

    def to_trajectory(self, model: RotationJumpCylinder) -> Trajectory:
        states = np.column_stack((self.angular.theta(self.times), self.r, self.z))
        return Trajectory(
            model=model,
            start=self.start,
            times=self.times,
            states=states,
            columns=("theta", "r", "z"),
        )


def perturbed_cylinder_path(
    start: CylPoint,
    driver: DriverPath,
    t: float,
    eps: float,
    perturbation: PerturbationField,
    extra_times=None,
) -> PerturbedCylinderPath:
    """Simulate the perturbed flow up to time t (t <= driver horizon)."""
    if t > driver.horizon + _TIME_TOL:
        raise ValueError(f"t={t} beyond driver horizon {driver.horizon}")
    if eps < 0.0:
        raise ValueError(f"eps must be >= 0: {eps}")
    angular = AngularJumpPath(theta0=start.theta, jumps=driver.jump_times)
    ts = _record_grid(driver, t, extra_times)

    if perturbation.has_angular:
        r = start.r + eps * (perturbation.lambda0 * ts + angular.cos_integral_prefix(ts))
    else:
        r = start.r + eps * perturbation.lambda0 * ts

    if perturbation.k3 == "zero" or eps == 0.0:
        z = np.full(ts.size, start.z)
    else:
        z = _rk4_path(lambda zz: eps * perturbation.vertical_rate(zz), start.z, ts)

    bad = np.flatnonzero(r <= 0.0)
    if bad.size:
        k = int(bad[0])
        lo, hi = ts[k - 1], ts[k]
        radial = (
            (lambda s: start.r + eps * (perturbation.lambda0 * s + angular.cos_integral(0.0, s)))
            if perturbation.has_angular
            else (lambda s: start.r + eps * perturbation.lambda0 * s)
        )
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if radial(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        raise ManifoldExit(exit_time=hi)

    return PerturbedCylinderPath(
        start=start, eps=eps, perturbation=perturbation, angular=angular, times=ts, r=r, z=z
    )


def evolve_cylinder_perturbed(
    start: CylPoint, driver: DriverPath, t: float, eps: float, perturbation: PerturbationField
) -> CylPoint:
    """Endpoint of the perturbed flow; eps = 0 reduces exactly to evolve_cylinder."""
    if eps == 0.0:
        return evolve_cylinder(start, driver, t)
    path = perturbed_cylinder_path(start, driver, t, eps, perturbation)
    return path.state_at(t)


def cylinder_trajectory(
    start: CylPoint,
    driver: DriverPath,
    perturbation: PerturbationField | None = None,
    eps: float = 0.0,
) -> Trajectory:
    """Path on the dt grid plus all jump times (jump effects never aliased)."""
    model = RotationJumpCylinder()
    if perturbation is None or eps == 0.0:
        angular = AngularJumpPath(theta0=start.theta, jumps=driver.jump_times)
        ts = _record_grid(driver, driver.horizon)
        states = np.column_stack(
            (angular.theta(ts), np.full(ts.size, start.r), np.full(ts.size, start.z))
        )
        return Trajectory(
            model=model, start=start, times=ts, states=states, columns=("theta", "r", "z")
        )
    path = perturbed_cylinder_path(start, driver, driver.horizon, eps, perturbation)
    return path.to_trajectory(model)


# ---------------------------------------------------------------------------
# n-point motions


def _initial_partition(starts: list, same_point) -> list[int]:
    n = len(starts)
    ids = list(range(n))
    for j in range(n):
        for i in range(j):
            if ids[i] == i and same_point(starts[i], starts[j]):
                ids[j] = ids[i]
                break
    return ids


def n_point_motion(
    model: FoliatedModel,
    starts: list,
    key: StreamKey,
    horizon: float,
    dt: float,
) -> NPointSeries:
    """n points driven by one common DriverPath (flow-induced joint motion).

    This is the pathwise realization of the n-point kernels: every point sees
    the same noise.  For n = 1 it reduces pathwise to the single-point
    evolve; points with identical starts stay identical forever (diagonal
    preservation).
    """
    if isinstance(model, CoalescingCircle):
        raise UnsupportedModel(
            "the coalescing circle model uses independent leafwise drivers; "
            "use evolve_coalescing_circle"
        )
    if not starts:
        raise ValueError("need at least one start point")

    if isinstance(model, TorusWinding):
        driver = sample_brownian(key, horizon, dt)
        trajs = [torus_trajectory(model, p, driver) for p in starts]
        columns = ("a", "b", "lift_a", "lift_b")
        same = lambda p, q: p.lift == q.lift
    else:
        driver = sample_jump_driver(key, horizon, dt, rate=CYLINDER_JUMP_RATE)
        trajs = [cylinder_trajectory(p, driver) for p in starts]
        columns = ("theta", "r", "z")
        same = lambda p, q: (p.theta, p.r, p.z) == (q.theta, q.r, q.z)

    times = trajs[0].times
    states = np.stack([tr.states for tr in trajs], axis=1)
    ids0 = _initial_partition(starts, same)
    class_ids = np.tile(np.array(ids0, dtype=int), (times.size, 1))
    hit_times = {
        (i, j): 0.0
        for j in range(len(starts))
        for i in range(j)
        if ids0[i] == ids0[j]
    }
    return NPointSeries(
        model=model,
        times=times,
        states=states,
        columns=columns,
        class_ids=class_ids,
        hit_times=hit_times,
    )


def evolve_coalescing_circle(
    starts: list[CylPoint],
    key: StreamKey,
    horizon: float,
    dt: float,
    sigma: float | None = None,
) -> NPointSeries:
    """Independent leafwise Brownian points with merge-on-meeting.

    Each point consumes its own stream (point_id = index, role independent).
    Two same-leaf points merge when their signed circular gap changes sign
    within a step (a true zero crossing, not an antipodal wrap) or its
    magnitude drops below sigma*sqrt(dt)/10; the merged class adopts the
    lowest-index driver.  Cross-leaf pairs never merge.
    """
    model = CoalescingCircle(sigma=1.0 if sigma is None else sigma)
    sig = model.sigma
    n = len(starts)
    if n == 0:
        raise ValueError("need at least one start point")
    for p in starts:
        if not isinstance(p, CylPoint):
            raise ValueError("coalescing circle starts must be CylPoints")

    paths = [
        sample_brownian(key.point(i).with_role(ROLE_INDEPENDENT), horizon, dt) for i in range(n)
    ]
    times = paths[0].times
    n_times = times.size
    theta = np.empty((n_times, n))
    for i, p in enumerate(paths):
        theta[:, i] = starts[i].theta + sig * p.brownian

    leaves = [p.leaf for p in starts]
    delta_c = sig * math.sqrt(dt) / 10.0

    ids = _initial_partition(
        starts, lambda p, q: p.leaf == q.leaf and wrap_angle(p.theta - q.theta) == 0.0
    )
    ids0 = list(ids)
    hit_times: dict[tuple[int, int], float] = {
        (i, j): 0.0 for j in range(n) for i in range(j) if ids[i] == ids[j]
    }
    for j in range(n):
        if ids[j] != j:
            theta[:, j] = theta[:, ids[j]]

    merge_events: list[tuple[int, int, int]] = []  # (step, absorbed_rep, surviving_rep)

    def first_meeting(a: int, b: int) -> int | None:
        g = np.mod(theta[:, a] - theta[:, b] + math.pi, TWO_PI) - math.pi
        step = np.abs(np.diff(g))
        crossing = (g[:-1] * g[1:] <= 0.0) & (step <= math.pi)
        close = np.abs(g[1:]) < delta_c
        hits = np.flatnonzero(crossing | close)
        return int(hits[0]) + 1 if hits.size else None

    while True:
        best: tuple[int, int, int] | None = None
        reps = sorted(set(ids))
        for bi in range(len(reps)):
            for ai in range(bi):
                a, b = reps[ai], reps[bi]
                if leaves[a] != leaves[b]:
                    continue
                k = first_meeting(a, b)
                if k is not None and (best is None or k < best[0]):
                    best = (k, b, a)  # lower index survives
        if best is None:
            break
        k, absorbed, survivor = best
        members_a = [i for i in range(n) if ids[i] == absorbed]
        members_s = [i for i in range(n) if ids[i] == survivor]
        for i in members_a:
            ids[i] = survivor
            theta[k:, i] = theta[k:, survivor]
        t_hit = float(times[k])
        for i in members_a:
            for j in members_s:
                hit_times[(min(i, j), max(i, j))] = t_hit
        merge_events.append((k, absorbed, survivor))

    class_ids = np.tile(np.array(ids0, dtype=int), (n_times, 1))
    for k, absorbed, survivor in merge_events:
        mask = class_ids[k] == absorbed
        class_ids[k:, mask] = survivor

    states = np.empty((n_times, n, 3))
    states[:, :, 0] = np.mod(theta, TWO_PI)
    for i in range(n):
        states[:, i, 1] = starts[i].r
        states[:, i, 2] = starts[i].z
    return NPointSeries(
        model=model,
        times=times,
        states=states,
        columns=("theta", "r", "z"),
        class_ids=class_ids,
        hit_times=hit_times,
    )


# ---------------------------------------------------------------------------
# Leaf invariance


def check_leaf_invariance(trajectory: Trajectory) -> float:
    """Max leaf defect of a trajectory relative to its start point."""
    model = trajectory.model
    if isinstance(model, TorusWinding):
        d = trajectory.states[:, 2:4] - np.array(trajectory.start.lift)
        defects = np.abs(d @ np.array(model.v_perp))
        return float(np.max(defects))
    dr = trajectory.states[:, 1] - trajectory.start.r
    dz = trajectory.states[:, 2] - trajectory.start.z
    return float(np.max(np.hypot(dr, dz)))


def max_defect_over_series(series: NPointSeries, starts: list) -> float:
    """Max leaf defect over all points of an n-point series."""
    worst = 0.0
    for i, start in enumerate(starts):
        tr = Trajectory(
            model=series.model,
            start=start,
            times=series.times,
            states=series.states[:, i, :],
            columns=series.columns,
        )
        worst = max(worst, check_leaf_invariance(tr))
    return worst
