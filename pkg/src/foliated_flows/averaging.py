"""Transversal averaging: leaf averages, averaged ODE, error decomposition, rates.

The slow transversal motion of the eps-perturbed cylinder flow, watched at the
rescaled time t/eps, is compared with the ODE driven by the leafwise ergodic
averages of the perturbing field.  The averaging defect per vertical component

    delta_i = integral_0^t [ dpi_i(K)(y_{r/eps}) - Q^{dpi_i(K)}(pi(y_{r/eps})) ] dr

is split over a partition of [0, t/eps] into four terms A1..A4 (fresh-restart
mismatch, per-interval ergodic error, Riemann-sum error, and the unpartitioned
tail), each with a pathwise bound.  All time integrals for the cylinder model
are computed from prefix arrays over one recorded grid, so sums of interval
integrals telescope exactly and |delta| <= sum |A_i| holds to rounding on
every realization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .drivers import ROLE_INDEPENDENT, StreamKey, sample_jump_driver
from .parallel import map_indexed
from .flows import (
    CYLINDER_JUMP_RATE,
    ManifoldExit,
    PerturbedCylinderPath,
    perturbed_cylinder_path,
)
from .geometry import (
    TWO_PI,
    CylPoint,
    PerturbationField,
    RotationJumpCylinder,
    VerticalRegion,
)

TRIANGLE_TOL = 1e-12

_FLOOR_TOL = 1e-9

F_CHOICES = ("sqrt", "log")
MEASURE_MODES = ("analytic-uniform", "empirical")


# ---------------------------------------------------------------------------
# Invariant measures and leaf averages


@dataclass(frozen=True)
class InvariantMeasureSpec:
    """How leaf averages Q^g are computed.

    ``analytic-uniform`` integrates against the normalized Lebesgue measure of
    the circle with an equispaced rule (exact for trigonometric polynomials of
    degree < quadrature_points).  ``empirical`` takes the time average of a
    long unperturbed rotation-jump run with the leading burn-in discarded.
    """

    mode: str = "analytic-uniform"
    quadrature_points: int = 64
    horizon: float = 200.0
    dt: float = 0.01
    burn_in_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.mode not in MEASURE_MODES:
            raise ValueError(f"measure mode must be one of {MEASURE_MODES}: {self.mode!r}")
        if self.quadrature_points < 2:
            raise ValueError("need at least 2 quadrature points")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn-in fraction must lie in [0, 1)")


@dataclass(frozen=True)
class LeafAverage:
    value: float
    std_error: float


def _segment_nodes(theta0: float, jumps: np.ndarray, ts: np.ndarray):
    """Left values and right limits of theta on each recorded segment.

    theta is discontinuous at jump times; the right limit of a segment ending
    at a jump keeps the pre-jump count, which is what the integral sees.
    """
    counts = np.searchsorted(jumps, ts[:-1], side="right")
    theta_left = theta0 + ts[:-1] + math.pi * counts
    theta_right = theta0 + ts[1:] + math.pi * counts
    return theta_left, theta_right


def leaf_average(
    g,
    leaf: tuple[float, float],
    measure: InvariantMeasureSpec,
    key: StreamKey | None = None,
) -> LeafAverage:
    """Average of g(theta, r, z) over the circle leaf (r, z).

    g must accept array-valued theta.  The empirical mode needs a StreamKey
    for its jump clock and reports a batch-means standard error.
    """
    r, z = leaf
    if measure.mode == "analytic-uniform":
        angles = TWO_PI * np.arange(measure.quadrature_points) / measure.quadrature_points
        return LeafAverage(value=float(np.mean(g(angles, r, z))), std_error=0.0)

    if measure.horizon <= 0.0:
        raise ValueError("empirical leaf average needs a positive horizon")
    if key is None:
        raise ValueError("empirical leaf average needs a StreamKey for its jump clock")
    driver = sample_jump_driver(key, measure.horizon, measure.dt, rate=CYLINDER_JUMP_RATE)
    grid = np.unique(np.concatenate((driver.times, driver.jump_times)))
    theta_left, theta_right = _segment_nodes(0.0, driver.jump_times, grid)
    seg = 0.5 * (g(theta_left, r, z) + g(theta_right, r, z)) * np.diff(grid)
    mids = 0.5 * (grid[:-1] + grid[1:])
    t0 = measure.burn_in_fraction * measure.horizon
    keep = mids >= t0
    length = float(np.sum(np.diff(grid)[keep]))  # weights sum to exactly 1
    value = float(np.sum(seg[keep]) / length)

    n_batches = 16
    edges = t0 + length * np.arange(n_batches + 1) / n_batches
    batch_idx = np.clip(np.searchsorted(edges, mids[keep], side="right") - 1, 0, n_batches - 1)
    sums = np.bincount(batch_idx, weights=seg[keep], minlength=n_batches)
    lens = np.bincount(batch_idx, weights=np.diff(grid)[keep], minlength=n_batches)
    means = sums / np.where(lens > 0, lens, 1.0)
    std_error = float(np.std(means, ddof=1) / math.sqrt(n_batches))
    return LeafAverage(value=value, std_error=std_error)


class AveragedField:
    """The vector field v -> (Q^{dpi_1(K)}(v), Q^{dpi_2(K)}(v)) on V.

    With the analytic uniform measure the components are available in closed
    form: the angular modulation integrates to zero, so the radial component
    is the constant lambda0, and the vertical component is k3(z).  The
    empirical mode evaluates (and caches) a time-average per leaf.
    """

    def __init__(
        self,
        perturbation: PerturbationField,
        measure: InvariantMeasureSpec,
        key: StreamKey | None = None,
    ):
        self.perturbation = perturbation
        self.measure = measure
        self.key = key
        self._cache: dict[tuple[float, float], tuple[float, float]] = {}

    def _empirical(self, leaf: tuple[float, float]) -> tuple[float, float]:
        if leaf not in self._cache:
            if self.key is None:
                raise ValueError("empirical averaged field needs a StreamKey")
            sub = self.key.point(hash(leaf) & 0x7FFFFFFF).with_role(ROLE_INDEPENDENT)
            k = self.perturbation
            radial = leaf_average(lambda th, r, z: k.radial_rate(th) + 0.0 * th, leaf, self.measure, sub)
            vertical = leaf_average(
                lambda th, r, z: k.vertical_rate(z) + 0.0 * th, leaf, self.measure, sub
            )
            self._cache[leaf] = (radial.value, vertical.value)
        return self._cache[leaf]

    def radial(self, r, z):
        if self.measure.mode == "analytic-uniform":
            return self.perturbation.lambda0 + 0.0 * np.asarray(r, dtype=float)
        return np.array([self._empirical((float(rr), float(zz)))[0] for rr, zz in np.broadcast(r, z)])

    def vertical(self, r, z):
        if self.measure.mode == "analytic-uniform":
            return self.perturbation.vertical_rate(np.asarray(z, dtype=float))
        return np.array([self._empirical((float(rr), float(zz)))[1] for rr, zz in np.broadcast(r, z)])

    def __call__(self, v: np.ndarray) -> np.ndarray:
        r, z = float(v[0]), float(v[1])
        if self.measure.mode == "analytic-uniform":
            return np.array([self.perturbation.lambda0, float(self.perturbation.vertical_rate(z))])
        qr, qv = self._empirical((r, z))
        return np.array([qr, qv])

    def lipschitz_constant(self) -> float:
        """Gronwall constant: sum of the catalog Lipschitz constants of the components."""
        return 0.0 + self.perturbation.k3_lipschitz()


def measured_lipschitz(field: AveragedField, leaves: list[tuple[float, float]]) -> float:
    """Numerical Lipschitz estimate of the averaged field over given leaves."""
    worst = 0.0
    vals = [np.asarray(field(np.array(l))) for l in leaves]
    for j in range(len(leaves)):
        for i in range(j):
            dist = math.hypot(leaves[i][0] - leaves[j][0], leaves[i][1] - leaves[j][1])
            if dist > 0:
                worst = max(worst, float(np.max(np.abs(vals[i] - vals[j]))) / dist)
    return worst


# ---------------------------------------------------------------------------
# Averaged ODE


@dataclass(frozen=True)
class AveragedTrajectory:
    times: np.ndarray
    values: np.ndarray  # (n_times, 2)
    exit_time: float | None = None

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]


def solve_averaged_ode(
    perturbation: PerturbationField,
    measure: InvariantMeasureSpec,
    v0,
    T: float,
    step: float,
    region: VerticalRegion | None = None,
    key: StreamKey | None = None,
) -> AveragedTrajectory:
    """Integrate dv/dt = (Q^{dpi_1(K)}, Q^{dpi_2(K)})(v) with classical RK4.

    Stops at T or at the first exit from the vertical region V (the exit time
    T0 is located by bisection on the final step and reported).
    """
    region = region or VerticalRegion()
    v0 = np.asarray(v0, dtype=float)
    if not region.contains(v0):
        raise ValueError(f"v0={v0} lies outside the vertical region")
    if T <= 0.0 or step <= 0.0:
        raise ValueError("T and step must be positive")
    field = AveragedField(perturbation, measure, key)

    n = max(1, int(math.ceil(T / step - _FLOOR_TOL)))
    h = T / n
    times = [0.0]
    values = [v0]

    def rk4_step(v: np.ndarray, hh: float) -> np.ndarray:
        k1 = field(v)
        k2 = field(v + 0.5 * hh * k1)
        k3 = field(v + 0.5 * hh * k2)
        k4 = field(v + hh * k3)
        return v + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    v = v0
    t = 0.0
    for _ in range(n):
        v_next = rk4_step(v, h)
        if not region.contains(v_next):
            lo, hi = 0.0, h
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if region.contains(rk4_step(v, mid)):
                    lo = mid
                else:
                    hi = mid
            t_exit = t + hi
            times.append(t_exit)
            values.append(rk4_step(v, hi))
            return AveragedTrajectory(
                times=np.array(times), values=np.array(values), exit_time=t_exit
            )
        v = v_next
        t += h
        times.append(t)
        values.append(v)
    return AveragedTrajectory(times=np.array(times), values=np.array(values), exit_time=None)


# ---------------------------------------------------------------------------
# Partition scheme


def _f_value(eps: float, f_choice: str, p: float) -> float:
    if f_choice == "sqrt":
        return math.sqrt(eps)
    if f_choice == "log":
        return abs(math.log(eps)) ** (-1.0 / (2.0 * p))
    raise ValueError(f"f_choice must be one of {F_CHOICES}: {f_choice!r}")


@dataclass(frozen=True)
class PartitionScheme:
    """Partition of [0, t/eps] with increment delta_t = t/f(eps).

    The number of full intervals is the largest N with N*delta_t <= t/eps
    (for f = sqrt this is the integer part of eps^{-1/2}); the remainder
    [t_N, t/eps] of length < delta_t is the tail estimated by the A4 term.
    """

    eps: float
    t: float
    f_choice: str
    p: float
    f_value: float
    delta_t: float
    n_intervals: int

    @property
    def horizon(self) -> float:
        return self.t / self.eps

    @property
    def boundaries(self) -> np.ndarray:
        b = np.arange(self.n_intervals + 1) * self.delta_t
        return np.minimum(b, self.horizon)


def make_partition(eps: float, t: float, f_choice: str = "sqrt", p: float = 2.0) -> PartitionScheme:
    if not 0.0 < eps < 1.0:
        raise ValueError(f"make_partition requires 0 < eps < 1 (got eps={eps}); the partition degenerates otherwise")
    if t <= 0.0:
        raise ValueError(f"t must be positive: {t}")
    if p < 1.0:
        raise ValueError(f"p must be >= 1: {p}")
    f = _f_value(eps, f_choice, p)
    delta_t = t / f
    n = int(math.floor(f / eps + _FLOOR_TOL))
    return PartitionScheme(
        eps=eps, t=t, f_choice=f_choice, p=p, f_value=f, delta_t=delta_t, n_intervals=n
    )


# ---------------------------------------------------------------------------
# Error decomposition


@dataclass(frozen=True)
class ErrorDecomposition:
    """Realized A1..A4 terms and delta for one vertical component."""

    component: int  # 1 = radial, 2 = vertical
    a1: float
    a2: float
    a3: float
    a4: float
    delta: float

    @property
    def abs_sum(self) -> float:
        return abs(self.a1) + abs(self.a2) + abs(self.a3) + abs(self.a4)

    def triangle_ok(self, tol: float = TRIANGLE_TOL) -> bool:
        return abs(self.delta) <= self.abs_sum + tol


@dataclass(frozen=True)
class DecompositionResult:
    components: tuple[ErrorDecomposition, ...]
    pi_end: np.ndarray | None
    partition: PartitionScheme
    exited: bool = False
    exit_time: float | None = None


def _cumtrapz(y: np.ndarray, ts: np.ndarray) -> np.ndarray:
    out = np.empty(ts.size)
    out[0] = 0.0
    np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(ts), out=out[1:])
    return out


def _decompose_from_path(
    path: PerturbedCylinderPath,
    perturbation: PerturbationField,
    field: AveragedField,
    partition: PartitionScheme,
) -> tuple[ErrorDecomposition, ...]:
    ts = path.times
    eps = path.eps
    horizon = partition.horizon
    angular = 1.0 if perturbation.has_angular else 0.0

    # Prefix integrals over the shared recorded grid: every interval integral
    # below is a difference of prefix values, so interval sums telescope
    # exactly and the triangle identity holds pathwise to rounding.
    cos_prefix = path.angular.cos_integral_prefix(ts) if perturbation.has_angular else None

    lam = np.full(ts.size, perturbation.lambda0)
    q1 = np.asarray(field.radial(path.r, path.z), dtype=float) + 0.0 * ts
    g2 = np.asarray(perturbation.vertical_rate(path.z), dtype=float) + 0.0 * ts
    q2 = np.asarray(field.vertical(path.r, path.z), dtype=float) + 0.0 * ts

    lam_prefix = _cumtrapz(lam, ts)
    q1_prefix = _cumtrapz(q1, ts)
    g2_prefix = _cumtrapz(g2, ts)
    q2_prefix = _cumtrapz(q2, ts)
    d1_prefix = _cumtrapz(lam - q1, ts)  # identically zero for the analytic measure
    d2_prefix = _cumtrapz(g2 - q2, ts)

    def g1_int(i: int, j: int) -> float:
        out = lam_prefix[j] - lam_prefix[i]
        if cos_prefix is not None:
            out += angular * (cos_prefix[j] - cos_prefix[i])
        return out

    bounds = partition.boundaries
    idx = [path.index_of(b) for b in bounds]
    i_end = ts.size - 1

    # delta_i: rescaled-time integral of the pointwise difference g_i - Q_i.
    delta1 = eps * (d1_prefix[i_end] + (angular * (cos_prefix[i_end] - cos_prefix[0]) if cos_prefix is not None else 0.0))
    delta2 = eps * (g2_prefix[i_end] - q2_prefix[i_end])

    a1_1 = a1_2 = a2_1 = a2_2 = 0.0
    sum_q1 = sum_q2 = 0.0
    n = partition.n_intervals
    for k in range(n):
        i, j = idx[k], idx[k + 1]
        dt_k = ts[j] - ts[i]
        # The unperturbed restart from y_{t_k} shares the rotation and jumps
        # pathwise, so its angular integrals coincide with the perturbed
        # path's; its (r, z) are frozen at their restart values.
        g1_pert = g1_int(i, j)
        g1_restart = g1_int(i, j)
        a1_1 += g1_pert - g1_restart
        g2_pert = g2_prefix[j] - g2_prefix[i]
        g2_restart = g2[i] * dt_k
        a1_2 += g2_pert - g2_restart
        a2_1 += g1_restart - q1[i] * dt_k
        a2_2 += g2_restart - q2[i] * dt_k
        sum_q1 += q1[i] * dt_k
        sum_q2 += q2[i] * dt_k
    a1_1 *= eps
    a1_2 *= eps
    a2_1 *= eps
    a2_2 *= eps
    a3_1 = eps * (sum_q1 - q1_prefix[i_end])
    a3_2 = eps * (sum_q2 - q2_prefix[i_end])
    i_tail = idx[-1]
    a4_1 = eps * g1_int(i_tail, i_end)
    a4_2 = eps * (g2_prefix[i_end] - g2_prefix[i_tail])

    return (
        ErrorDecomposition(component=1, a1=a1_1, a2=a2_1, a3=a3_1, a4=a4_1, delta=delta1),
        ErrorDecomposition(component=2, a1=a1_2, a2=a2_2, a3=a3_2, a4=a4_2, delta=delta2),
    )


def decompose_error(
    model: RotationJumpCylinder,
    perturbation: PerturbationField,
    eps: float,
    t: float,
    key: StreamKey,
    measure: InvariantMeasureSpec | None = None,
    f_choice: str = "sqrt",
    p: float = 2.0,
    dt: float = 0.01,
    start: CylPoint | None = None,
    field: AveragedField | None = None,
) -> DecompositionResult:
    """Realized averaging-error decomposition for one replica.

    Simulates one perturbed path to the rescaled horizon t/eps, restarts the
    unperturbed flow at each partition point on the same driver segment, and
    returns A1..A4 and delta per vertical component.  A manifold exit before
    the horizon yields a flagged partial result.
    """
    if not isinstance(model, RotationJumpCylinder):
        raise ValueError("the error decomposition is defined for the rotation-jump cylinder")
    measure = measure or InvariantMeasureSpec()
    start = start or CylPoint(theta=0.0, r=1.0, z=1.0)
    partition = make_partition(eps, t, f_choice, p)
    if field is None:
        field = AveragedField(perturbation, measure, key)
    driver = sample_jump_driver(key, partition.horizon, dt, rate=CYLINDER_JUMP_RATE)
    try:
        path = perturbed_cylinder_path(
            start, driver, partition.horizon, eps, perturbation, extra_times=partition.boundaries
        )
    except ManifoldExit as exc:
        return DecompositionResult(
            components=(), pi_end=None, partition=partition, exited=True, exit_time=exc.exit_time
        )
    comps = _decompose_from_path(path, perturbation, field, partition)
    pi_end = np.array([path.r[-1], path.z[-1]])
    return DecompositionResult(components=comps, pi_end=pi_end, partition=partition)


# ---------------------------------------------------------------------------
# Rate bounds


@dataclass(frozen=True)
class RateBound:
    """Constants entering H(eps, t) = min{h*sqrt(t), C1 eps^(1/4), C2 sqrt(eps) t^(3/2), C3 sqrt(eps t)}.

    gronwall_c is the Lipschitz constant of the averaged field (so
    G = sqrt(t) e^{C t} H); sup_k feeds the commuting-class
    h(eps, t) = sqrt(eps) * t * sup|K|.
    """

    gronwall_c: float
    c1: float
    c2: float
    c3: float
    sup_k: float

    def __post_init__(self) -> None:
        for name in ("gronwall_c", "c1", "c2", "c3", "sup_k"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")

    def h(self, eps: float, t: float) -> float:
        return math.sqrt(eps) * t * self.sup_k

    def H(self, eps: float, t: float) -> float:
        if eps < 0.0 or t < 0.0:
            raise ValueError("eps and t must be >= 0")
        return min(
            self.h(eps, t) * math.sqrt(t),
            self.c1 * eps ** 0.25,
            self.c2 * math.sqrt(eps) * t ** 1.5,
            self.c3 * math.sqrt(eps * t),
        )

    def G(self, eps: float, t: float) -> float:
        return math.sqrt(t) * math.exp(self.gronwall_c * t) * self.H(eps, t)


def default_rate_bound(
    perturbation: PerturbationField,
    region: VerticalRegion | None = None,
    c1: float | None = None,
    c2: float | None = None,
) -> RateBound:
    """Instantiate the bound constants from the field catalog.

    C1 and C2 come from a central-limit rate and are not derivable at desk
    scale; the default 10*sup|K| makes the bound check one-sided by design.
    C3 = sup|g| is exact for the catalog.
    """
    region = region or VerticalRegion()
    sup_k = perturbation.sup_norm(region)
    c3 = max(perturbation.sup_radial(), perturbation.sup_vertical(region))
    return RateBound(
        gronwall_c=perturbation.k3_lipschitz(),
        c1=10.0 * sup_k if c1 is None else c1,
        c2=10.0 * sup_k if c2 is None else c2,
        c3=c3,
        sup_k=sup_k,
    )


def eval_rate_bounds(rb: RateBound, eps: float, t: float) -> tuple[float, float]:
    """Pointwise (H, G) evaluation; negative inputs rejected."""
    if eps < 0.0 or t < 0.0:
        raise ValueError("eps and t must be >= 0")
    return rb.H(eps, t), rb.G(eps, t)


# ---------------------------------------------------------------------------
# Monte Carlo averaging error


@dataclass(frozen=True)
class BoundViolation:
    replica_id: int
    component: int
    kind: str  # "triangle" or "a4"
    amount: float


@dataclass(frozen=True)
class AveragingErrorResult:
    eps: float
    t: float
    p: float
    estimate: float
    std_error: float
    bound_g: float
    v_final: np.ndarray
    errors: np.ndarray  # per-replica |pi(y_{t/eps}) - v(t)|
    n_replicas: int
    n_exited: int
    violations: tuple[BoundViolation, ...]
    max_triangle_slack: float
    max_a4_ratio: float
    decomp_rows: np.ndarray | None = None  # (replica, component, a1..a4, delta)


def _a4_bound_term(partition: PartitionScheme) -> float:
    # sqrt(eps) for the sqrt partition, f(eps) for the generalized one
    return partition.f_value


def check_pathwise_bounds(
    result: DecompositionResult,
    perturbation: PerturbationField,
    region: VerticalRegion,
    replica_id: int = 0,
) -> tuple[list[BoundViolation], float, float]:
    """Triangle and tail (A4) bound checks for one replica's decomposition.

    Returns the violations plus the worst triangle slack |delta|-sum|A_i| and
    the worst ratio |A4| / (sup|g| t f-term) seen, for reporting.
    """
    violations: list[BoundViolation] = []
    worst_slack = -math.inf
    worst_ratio = 0.0
    part = result.partition
    f_term = _a4_bound_term(part)
    sup_g = {1: perturbation.sup_radial(), 2: perturbation.sup_vertical(region)}
    for comp in result.components:
        slack = abs(comp.delta) - comp.abs_sum
        worst_slack = max(worst_slack, slack)
        if slack > TRIANGLE_TOL:
            violations.append(
                BoundViolation(replica_id, comp.component, "triangle", slack)
            )
        limit = sup_g[comp.component] * part.t * f_term
        if limit > 0.0:
            worst_ratio = max(worst_ratio, abs(comp.a4) / limit)
        if abs(comp.a4) > limit + TRIANGLE_TOL:
            violations.append(
                BoundViolation(replica_id, comp.component, "a4", abs(comp.a4) - limit)
            )
    return violations, worst_slack, worst_ratio


def averaging_error(
    model: RotationJumpCylinder,
    perturbation: PerturbationField,
    eps: float,
    t: float,
    p: float,
    n_replicas: int,
    key: StreamKey,
    measure: InvariantMeasureSpec | None = None,
    dt: float = 0.01,
    ode_step: float = 1e-3,
    region: VerticalRegion | None = None,
    f_choice: str = "sqrt",
    start: CylPoint | None = None,
    rate_bound: RateBound | None = None,
    threads: int = 1,
    keep_decompositions: bool = False,
) -> AveragingErrorResult:
    """Monte Carlo estimate of [E |pi(y_{t/eps}) - v(t)|^p]^(1/p) with its G bound.

    Each replica simulates one perturbed path under its own keyed stream,
    computes the endpoint error against the averaged-ODE solution, and runs
    the pathwise A1..A4 bound checks.  Requires t < T0 (the ODE must not
    leave V before t).
    """
    if p < 1.0:
        raise ValueError(f"p must be in [1, inf): {p}")
    if n_replicas < 1:
        raise ValueError("need at least one replica")
    measure = measure or InvariantMeasureSpec()
    region = region or VerticalRegion()
    start = start or CylPoint(theta=0.0, r=1.0, z=1.0)
    rb = rate_bound or default_rate_bound(perturbation, region)

    ode = solve_averaged_ode(
        perturbation, measure, np.array([start.r, start.z]), t, ode_step, region, key
    )
    if ode.exit_time is not None:
        raise ValueError(
            f"t={t} is not before the averaged ODE's boundary exit T0={ode.exit_time}"
        )
    v_t = ode.final
    field = AveragedField(perturbation, measure, key)

    def one_replica(i: int):
        res = decompose_error(
            model,
            perturbation,
            eps,
            t,
            key.replica(i),
            measure=measure,
            f_choice=f_choice,
            p=p,
            dt=dt,
            start=start,
            field=field,
        )
        if res.exited:
            return None
        err = float(np.hypot(res.pi_end[0] - v_t[0], res.pi_end[1] - v_t[1]))
        checks = check_pathwise_bounds(res, perturbation, region, replica_id=i)
        return err, checks, res.components

    rows = map_indexed(one_replica, n_replicas, threads)

    errors = np.full(n_replicas, np.nan)
    violations: list[BoundViolation] = []
    decomp_rows: list[list[float]] = []
    worst_slack = -math.inf
    worst_ratio = 0.0
    n_exited = 0
    for i, row in enumerate(rows):
        if row is None:
            n_exited += 1
            continue
        err, (viol, slack, ratio), comps = row
        errors[i] = err
        violations.extend(viol)
        worst_slack = max(worst_slack, slack)
        worst_ratio = max(worst_ratio, ratio)
        if keep_decompositions:
            for c in comps:
                decomp_rows.append([float(i), float(c.component), c.a1, c.a2, c.a3, c.a4, c.delta])

    valid = errors[~np.isnan(errors)]
    if valid.size == 0:
        raise RuntimeError("all replicas exited the manifold; no estimate")
    powers = valid ** p
    mean_p = float(np.mean(powers))
    estimate = mean_p ** (1.0 / p)
    if valid.size > 1 and mean_p > 0.0:
        se_mean = float(np.std(powers, ddof=1)) / math.sqrt(valid.size)
        std_error = se_mean / (p * mean_p ** ((p - 1.0) / p))
    else:
        std_error = 0.0

    return AveragingErrorResult(
        eps=eps,
        t=t,
        p=p,
        estimate=estimate,
        std_error=std_error,
        bound_g=rb.G(eps, t),
        v_final=v_t,
        errors=errors,
        n_replicas=n_replicas,
        n_exited=n_exited,
        violations=tuple(violations),
        max_triangle_slack=worst_slack,
        max_a4_ratio=worst_ratio,
        decomp_rows=np.array(decomp_rows) if keep_decompositions else None,
    )


# ---------------------------------------------------------------------------
# Rate-exponent fitting


@dataclass(frozen=True)
class RateFit:
    slope: float | None
    intercept: float | None
    r_squared: float | None
    flag: str  # "ok" or "exact"
    n_zero: int


def fit_rate_exponent(pairs) -> RateFit:
    """Least-squares fit of ln(error) against ln(eps).

    Zero errors are excluded and counted; an all-zero input is the
    commuting/exact case and gets a flag instead of a slope.
    """
    eps = np.array([float(a) for a, _ in pairs])
    err = np.array([float(b) for _, b in pairs])
    if np.any(eps <= 0.0):
        raise ValueError("eps values must be positive")
    if np.any(err < 0.0):
        raise ValueError("errors must be nonnegative")
    usable = err > 0.0
    n_zero = int(np.sum(~usable))
    if not np.any(usable):
        return RateFit(slope=None, intercept=None, r_squared=None, flag="exact", n_zero=n_zero)
    if np.sum(usable) < 3:
        raise ValueError("need at least 3 pairs with positive error to fit a rate")
    x = np.log(eps[usable])
    y = np.log(err[usable])
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RateFit(
        slope=float(slope), intercept=float(intercept), r_squared=r2, flag="ok", n_zero=n_zero
    )
