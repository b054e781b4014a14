"""Foliated model geometry: points, charts, vertical projection, leaf defects.

Three concrete foliated spaces are supported:

* ``torus-winding`` -- the flat 2-torus R^2/Z^2 foliated by winding lines in a
  fixed unit direction.  With an irrational slope every leaf is dense, so leaf
  membership is only meaningful on the universal cover; points therefore carry
  their cover lift.
* ``rotation-jump-cylinder`` -- R^3 minus the z-axis, foliated by horizontal
  circles.  Cylindrical coordinates (theta, r, z) give one global chart; the
  vertical (transversal) coordinate is (r, z).
* ``coalescing-circle`` -- the same circle foliation, carrying independent
  leafwise Brownian motions that may coalesce.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Default dense winding direction: slope = golden ratio (irrational).
GOLDEN_SLOPE = (1.0 + math.sqrt(5.0)) / 2.0

_COORD_TOL = 1e-12


class UnsupportedModel(ValueError):
    """Operation not defined for the given foliated model."""


def wrap_unit(x: float) -> float:
    """Reduce to [0, 1)."""
    return x - math.floor(x)


def wrap_angle(theta: float) -> float:
    """Reduce an angle to [0, 2*pi)."""
    theta = math.fmod(theta, TWO_PI)
    return theta + TWO_PI if theta < 0.0 else theta


def circular_distance(a: float, b: float) -> float:
    """Distance between two angles on the circle of circumference 2*pi."""
    d = abs(wrap_angle(a) - wrap_angle(b))
    return min(d, TWO_PI - d)


@dataclass(frozen=True)
class TorusPoint:
    """Point on the flat 2-torus, carrying its universal-cover lift.

    ``(a, b)`` are the displayed coordinates in [0,1)^2 and must equal the
    lift reduced mod 1 componentwise (within 1e-12).
    """

    a: float
    b: float
    lift: tuple[float, float]

    def __post_init__(self) -> None:
        if not (0.0 <= self.a < 1.0 and 0.0 <= self.b < 1.0):
            raise ValueError(f"torus coordinates must lie in [0,1): ({self.a}, {self.b})")
        la, lb = self.lift
        if abs(wrap_unit(la) - self.a) > _COORD_TOL or abs(wrap_unit(lb) - self.b) > _COORD_TOL:
            raise ValueError("torus coordinates do not match lift mod 1")

    @classmethod
    def from_lift(cls, lift: tuple[float, float]) -> "TorusPoint":
        la, lb = float(lift[0]), float(lift[1])
        return cls(a=wrap_unit(la), b=wrap_unit(lb), lift=(la, lb))

    @classmethod
    def from_coords(cls, a: float, b: float) -> "TorusPoint":
        a, b = wrap_unit(float(a)), wrap_unit(float(b))
        return cls(a=a, b=b, lift=(a, b))


@dataclass(frozen=True)
class CylPoint:
    """Point of R^3 minus the z-axis in cylindrical coordinates.

    theta lies in [0, 2*pi), r > 0.  The leaf through the point is the
    horizontal circle {(r cos u, r sin u, z)}.
    """

    theta: float
    r: float
    z: float

    def __post_init__(self) -> None:
        if not self.r > 0.0:
            raise ValueError(f"r must be positive (the z-axis is excluded): r={self.r}")
        if not (0.0 <= self.theta < TWO_PI):
            raise ValueError(f"theta must lie in [0, 2*pi): {self.theta}")

    @classmethod
    def from_angle(cls, theta: float, r: float, z: float) -> "CylPoint":
        return cls(theta=wrap_angle(float(theta)), r=float(r), z=float(z))

    @classmethod
    def from_ambient(cls, x: float, y: float, z: float) -> "CylPoint":
        r = math.hypot(x, y)
        if r <= 0.0:
            raise ValueError("ambient point lies on the z-axis")
        return cls(theta=wrap_angle(math.atan2(y, x)), r=r, z=float(z))

    def to_ambient(self) -> tuple[float, float, float]:
        return (self.r * math.cos(self.theta), self.r * math.sin(self.theta), self.z)

    @property
    def leaf(self) -> tuple[float, float]:
        """The (r, z) label of the circle leaf through this point."""
        return (self.r, self.z)


@dataclass(frozen=True)
class VerticalRegion:
    """Rectangle in the vertical space V = {(r, z) : r > 0} used by experiments."""

    r_min: float = 0.5
    r_max: float = 5.0
    z_min: float = -5.0
    z_max: float = 5.0

    def __post_init__(self) -> None:
        if not (0.0 < self.r_min < self.r_max):
            raise ValueError("vertical region needs 0 < r_min < r_max")
        if not self.z_min < self.z_max:
            raise ValueError("vertical region needs z_min < z_max")

    def contains(self, v) -> bool:
        r, z = float(v[0]), float(v[1])
        return self.r_min < r < self.r_max and self.z_min < z < self.z_max


@dataclass(frozen=True)
class TorusWinding:
    """Winding-line foliation of the torus; direction must be a unit vector."""

    v: tuple[float, float]
    name = "torus-winding"

    def __post_init__(self) -> None:
        norm = math.hypot(*self.v)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"winding direction must be unit length, |v|={norm}")

    @classmethod
    def dense_default(cls) -> "TorusWinding":
        norm = math.hypot(1.0, GOLDEN_SLOPE)
        return cls(v=(1.0 / norm, GOLDEN_SLOPE / norm))

    @property
    def v_perp(self) -> tuple[float, float]:
        return (-self.v[1], self.v[0])


@dataclass(frozen=True)
class RotationJumpCylinder:
    """Circle foliation driven leafwise by unit rotation plus rate-1 antipodal jumps."""

    name = "rotation-jump-cylinder"


@dataclass(frozen=True)
class CoalescingCircle:
    """Circle foliation carrying independent leafwise Brownian motions (diffusivity sigma^2)."""

    sigma: float = 1.0
    name = "coalescing-circle"

    def __post_init__(self) -> None:
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive: {self.sigma}")


FoliatedModel = TorusWinding | RotationJumpCylinder | CoalescingCircle

MODEL_NAMES = ("torus-winding", "rotation-jump-cylinder", "coalescing-circle")


def make_model(name: str, **params) -> FoliatedModel:
    """Build a model from its config-catalog name."""
    if name == "torus-winding":
        if "v" in params:
            v = params.pop("v")
            raw = TorusWinding(v=(float(v[0]), float(v[1])))
        else:
            raw = TorusWinding.dense_default()
        if params:
            raise ValueError(f"unknown torus-winding parameters: {sorted(params)}")
        return raw
    if name == "rotation-jump-cylinder":
        if params:
            raise ValueError(f"rotation-jump-cylinder takes no parameters, got: {sorted(params)}")
        return RotationJumpCylinder()
    if name == "coalescing-circle":
        sigma = float(params.pop("sigma", 1.0))
        if params:
            raise ValueError(f"unknown coalescing-circle parameters: {sorted(params)}")
        return CoalescingCircle(sigma=sigma)
    raise ValueError(f"unknown model {name!r}; valid names: {MODEL_NAMES}")


def project_vertical(model: FoliatedModel, p: CylPoint) -> np.ndarray:
    """Vertical (transversal) coordinate pi(p) = (r, z); independent of theta.

    Raises UnsupportedModel for the torus: with dense leaves there is no global
    transversal coordinate, only the leaf-defect predicate on cover lifts.
    """
    if isinstance(model, TorusWinding):
        raise UnsupportedModel(
            "torus-winding has no global vertical coordinate (dense leaves); "
            "use leaf_defect on lifted points instead"
        )
    if not isinstance(p, CylPoint):
        raise TypeError(f"expected CylPoint, got {type(p).__name__}")
    return np.array([p.r, p.z])


def leaf_defect(model: FoliatedModel, start, current) -> float:
    """Distance of ``current`` from the leaf through ``start`` (0 iff on the leaf).

    Torus: |<lift(current) - lift(start), v_perp>| on the universal cover.
    Cylinder models: Euclidean distance between vertical coordinates.
    """
    if isinstance(model, TorusWinding):
        if not (isinstance(start, TorusPoint) and isinstance(current, TorusPoint)):
            raise ValueError("torus leaf_defect needs TorusPoint inputs carrying lifts")
        da = current.lift[0] - start.lift[0]
        db = current.lift[1] - start.lift[1]
        px, py = (-model.v[1], model.v[0])
        return abs(da * px + db * py)
    if not (isinstance(start, CylPoint) and isinstance(current, CylPoint)):
        raise ValueError("cylinder leaf_defect needs CylPoint inputs")
    return math.hypot(current.r - start.r, current.z - start.z)


_K3_FUNCS = {
    "zero": lambda z: np.zeros_like(np.asarray(z, dtype=float)) if np.ndim(z) else 0.0,
    "negate": lambda z: -z,
    "sine": np.sin,
}

# Global Lipschitz constants of the catalog k3 choices.
_K3_LIPSCHITZ = {"zero": 0.0, "negate": 1.0, "sine": 1.0}


@dataclass(frozen=True)
class PerturbationField:
    """Transversal perturbing field K = (0, lambda0 [+ cos theta], k3(z)).

    ``angular = "cosine"`` adds a bounded angular modulation cos(theta) to the
    radial component; ``k3`` names a globally Lipschitz catalog function.
    """

    lambda0: float = 0.0
    k3: str = "zero"
    angular: str = "none"

    def __post_init__(self) -> None:
        if self.k3 not in _K3_FUNCS:
            raise ValueError(f"unknown k3 choice {self.k3!r}; catalog: {sorted(_K3_FUNCS)}")
        if self.angular not in ("none", "cosine"):
            raise ValueError(f"unknown angular choice {self.angular!r}; catalog: none, cosine")

    @property
    def has_angular(self) -> bool:
        return self.angular == "cosine"

    def radial_rate(self, theta):
        """dpi_1(K) at angle theta: lambda0 plus the angular modulation."""
        out = np.asarray(theta, dtype=float) * 0.0 + self.lambda0
        if self.has_angular:
            out = out + np.cos(theta)
        return out if out.ndim else float(out)

    def vertical_rate(self, z):
        """dpi_2(K) = k3(z)."""
        return _K3_FUNCS[self.k3](z)

    def k3_lipschitz(self) -> float:
        return _K3_LIPSCHITZ[self.k3]

    def sup_radial(self) -> float:
        """sup |dpi_1(K)| over the experiment region U."""
        return abs(self.lambda0) + (1.0 if self.has_angular else 0.0)

    def sup_vertical(self, region: VerticalRegion) -> float:
        """sup |dpi_2(K)| over the z-range of the region."""
        if self.k3 == "zero":
            return 0.0
        if self.k3 == "negate":
            return max(abs(region.z_min), abs(region.z_max))
        return 1.0  # sine

    def sup_norm(self, region: VerticalRegion) -> float:
        """sup |K| over U (the radial and vertical parts vary independently)."""
        return math.hypot(self.sup_radial(), self.sup_vertical(region))
