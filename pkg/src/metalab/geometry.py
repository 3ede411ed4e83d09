"""Invariant surfaces and the tubular chart around them.

A point ``x`` close to a surface is written as ``x = m + z * n`` with ``m`` the
nearest surface point, ``n`` a unit normal and ``z`` the distance. Factoring
out ``z`` leaves a point ``y`` of the sphere bundle, parameterized here by
angles:

* point in R^2: ``y = (theta,)``
* point in R^3: ``y = (polar, azimuth)`` with polar in ``(0, pi)``
* circle in R^3: ``y = (m_angle, normal_angle)`` on a torus, with
  ``n = cos(normal_angle) * e_r(m_angle) + sin(normal_angle) * e_axis``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OnSurface, OutsideChart

TWO_PI = 2.0 * np.pi
ON_SURFACE_TOL = 1e-14


def _wrap(angle):
    angle = np.mod(angle, TWO_PI)
    return np.where(angle >= TWO_PI, 0.0, angle)


@dataclass(frozen=True)
class SurfaceSpec:
    """A compact invariant surface: a point or a circle.

    Parameters
    ----------
    kind : {"point", "circle"}
    id : int
        Index of the surface inside its model.
    location : array, optional
        Position of a point surface.
    center, radius, plane : optional
        Circle centre, radius and two orthonormal vectors spanning its plane.
    r_chart : float, optional
        Chart validity radius. ``None`` lets the owning model choose.
    """

    kind: str
    id: int = 0
    location: np.ndarray | None = None
    center: np.ndarray | None = None
    radius: float | None = None
    plane: np.ndarray | None = None
    r_chart: float | None = None
    axis: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "point":
            loc = np.asarray(self.location, dtype=float).ravel()
            if loc.size < 2:
                raise ValueError("a point surface needs dimension >= 2 (codimension >= 2)")
            object.__setattr__(self, "location", loc)
        elif self.kind == "circle":
            c = np.asarray(self.center, dtype=float).ravel()
            if c.size < 3:
                raise ValueError("a circle surface needs dimension >= 3 (codimension >= 2)")
            if c.size != 3:
                raise ValueError("circle surfaces are supported in R^3 only")
            if self.radius is None or not self.radius > 0:
                raise ValueError("circle radius must be positive")
            plane = np.asarray(self.plane if self.plane is not None else np.eye(3)[:2], dtype=float)
            if plane.shape != (2, 3):
                raise ValueError("circle plane must be two vectors in R^3")
            if np.max(np.abs(plane @ plane.T - np.eye(2))) > 1e-12:
                raise ValueError("circle plane vectors must be orthonormal within 1e-12")
            object.__setattr__(self, "center", c)
            object.__setattr__(self, "radius", float(self.radius))
            object.__setattr__(self, "plane", plane)
            object.__setattr__(self, "axis", np.cross(plane[0], plane[1]))
        else:
            raise ValueError(f"unknown surface kind {self.kind!r}")
        if self.r_chart is not None and not self.r_chart > 0:
            raise ValueError("r_chart must be positive")

    @property
    def dim(self):
        """Ambient dimension."""
        return (self.location if self.kind == "point" else self.center).size

    @property
    def sphere_dim(self):
        """Dimension of the sphere bundle (number of angle coordinates)."""
        return self.dim - 1

    @property
    def chart_radius(self):
        return np.inf if self.r_chart is None else self.r_chart

    def with_chart(self, r_chart):
        """Copy with a different chart validity radius."""
        kw = dict(kind=self.kind, id=self.id, r_chart=r_chart)
        if self.kind == "point":
            kw["location"] = self.location
        else:
            kw.update(center=self.center, radius=self.radius, plane=self.plane)
        return SurfaceSpec(**kw)

    def distance(self, points):
        """Euclidean distance of each row of ``points`` to the surface."""
        return polar_coordinates(points, self, angles=False)[1]

    def sample(self, n):
        """``n`` evenly spaced points on the surface, shape ``(n, d)``."""
        if self.kind == "point":
            return np.repeat(self.location[None, :], max(n, 1), axis=0)
        t = np.arange(n) * TWO_PI / n
        return (self.center + self.radius * (np.cos(t)[:, None] * self.plane[0]
                                             + np.sin(t)[:, None] * self.plane[1]))

    def tangent(self, points):
        """Unit tangent at surface points (circles only); shape ``(n, 3)``."""
        u = np.atleast_2d(points) - self.center
        p1, p2 = u @ self.plane[0], u @ self.plane[1]
        t = np.arctan2(p2, p1)
        return -np.sin(t)[:, None] * self.plane[0] + np.cos(t)[:, None] * self.plane[1]


@dataclass(frozen=True)
class TubularPoint:
    """Chart value ``(m, n, z)`` of a point near a surface.

    ``m`` is the surface point itself for point surfaces and the angle
    parameter in ``[0, 2 pi)`` for circles.
    """

    surface_id: int
    m: object
    n: np.ndarray
    z: float


def polar_coordinates(points, surface, angles=True):
    """Vectorized chart: angles ``y`` of shape ``(n, k)`` and distances ``z``.

    No range checks are made; points on the surface get an arbitrary angle.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    if surface.kind == "point":
        u = X - surface.location
        if u.shape[1] == 2:
            z = np.hypot(u[:, 0], u[:, 1])
            if not angles:
                return None, z
            Y = _wrap(np.arctan2(u[:, 1], u[:, 0]))[:, None]
            return Y, z
        if u.shape[1] == 3:
            rho = np.hypot(u[:, 0], u[:, 1])
            z = np.hypot(rho, u[:, 2])
            if not angles:
                return None, z
            polar = np.arctan2(rho, u[:, 2])
            azimuth = _wrap(np.arctan2(u[:, 1], u[:, 0]))
            return np.stack([polar, azimuth], axis=1), z
        z = np.sqrt(np.sum(u * u, axis=1))
        if angles:
            raise NotImplementedError("sphere coordinates are implemented for d <= 3")
        return None, z
    u = X - surface.center
    e1, e2, e3 = surface.plane[0], surface.plane[1], surface.axis
    p1 = u[:, 0] * e1[0] + u[:, 1] * e1[1] + u[:, 2] * e1[2]
    p2 = u[:, 0] * e2[0] + u[:, 1] * e2[1] + u[:, 2] * e2[2]
    h = u[:, 0] * e3[0] + u[:, 1] * e3[1] + u[:, 2] * e3[2]
    s = np.hypot(p1, p2) - surface.radius
    z = np.hypot(s, h)
    if not angles:
        return None, z
    theta = _wrap(np.arctan2(p2, p1))
    psi = _wrap(np.arctan2(h, s))
    return np.stack([theta, psi], axis=1), z


def frame(y, surface):
    """Surface point ``m`` and unit normal ``n`` for sphere coordinates ``y``.

    Parameters
    ----------
    y : array of shape ``(k,)`` or ``(n, k)``
    surface : SurfaceSpec

    Returns
    -------
    m, n : arrays of shape ``(n, d)``
    """
    Y = np.atleast_2d(np.asarray(y, dtype=float))
    if surface.kind == "point":
        d = surface.dim
        m = np.repeat(surface.location[None, :], Y.shape[0], axis=0)
        if d == 2:
            n = np.stack([np.cos(Y[:, 0]), np.sin(Y[:, 0])], axis=1)
        elif d == 3:
            sp = np.sin(Y[:, 0])
            n = np.stack([sp * np.cos(Y[:, 1]), sp * np.sin(Y[:, 1]), np.cos(Y[:, 0])], axis=1)
        else:
            raise NotImplementedError("sphere coordinates are implemented for d <= 3")
        return m, n
    theta, psi = Y[:, 0], Y[:, 1]
    e_r = np.cos(theta)[:, None] * surface.plane[0] + np.sin(theta)[:, None] * surface.plane[1]
    m = surface.center + surface.radius * e_r
    n = np.cos(psi)[:, None] * e_r + np.sin(psi)[:, None] * surface.axis
    return m, n


def from_polar(y, z, surface):
    """Inverse of :func:`polar_coordinates`: points ``m + z n``."""
    m, n = frame(y, surface)
    return m + np.asarray(z, dtype=float).reshape(-1, 1) * n


def to_tubular(x, surface):
    """Tubular chart value of a single point.

    Raises
    ------
    OutsideChart
        If the distance is at least the chart radius.
    OnSurface
        If the distance is below ``1e-14``.
    """
    x = np.asarray(x, dtype=float).ravel()
    Y, z = polar_coordinates(x[None, :], surface)
    z = float(z[0])
    if z >= surface.chart_radius:
        raise OutsideChart(f"distance {z:.6g} >= chart radius {surface.chart_radius:.6g}")
    if z < ON_SURFACE_TOL:
        raise OnSurface("point lies on the surface; normal direction undefined")
    if surface.kind == "point":
        n = (x - surface.location) / z
        return TubularPoint(surface.id, surface.location.copy(), n, z)
    # the angle form of n stays unit length even where x - m cancels
    _, n = frame(Y, surface)
    return TubularPoint(surface.id, float(Y[0, 0]), n[0], z)


def from_tubular(p, surface):
    """Euclidean point ``m + z n`` of a chart value.

    Raises
    ------
    OutsideChart
        If ``z`` is negative or not below the chart radius.
    """
    if not 0.0 <= p.z < surface.chart_radius:
        raise OutsideChart(f"z = {p.z:.6g} outside [0, {surface.chart_radius:.6g})")
    n = np.asarray(p.n, dtype=float)
    if surface.kind == "point":
        return np.asarray(p.m, dtype=float) + p.z * n
    t = float(p.m)
    m = surface.center + surface.radius * (np.cos(t) * surface.plane[0] + np.sin(t) * surface.plane[1])
    return m + p.z * n


def sphere_point(p, surface):
    """Angle coordinates ``y`` of a chart value, in their fundamental domain."""
    n = np.asarray(p.n, dtype=float)
    if surface.kind == "point":
        if n.size == 2:
            return np.array([float(_wrap(np.arctan2(n[1], n[0])))])
        return np.array([np.arctan2(np.hypot(n[0], n[1]), n[2]), float(_wrap(np.arctan2(n[1], n[0])))])
    t = float(p.m)
    e_r = np.cos(t) * surface.plane[0] + np.sin(t) * surface.plane[1]
    return np.array([t, float(_wrap(np.arctan2(n @ surface.axis, n @ e_r)))])


def surface_gap(a, b, n_samples=720):
    """Minimal distance between two surfaces (sampled for circles)."""
    if a.kind == "point" and b.kind == "point":
        return float(np.linalg.norm(a.location - b.location))
    if a.kind == "point":
        return float(b.distance(a.location[None, :])[0])
    if b.kind == "point":
        return float(a.distance(b.location[None, :])[0])
    return float(np.min(b.distance(a.sample(n_samples))))


def default_chart_radii(surfaces, cap=1.0):
    """Half the minimal gap to any other surface, capped at ``cap``.

    Circles are additionally capped at their own radius so the chart never
    reaches the axis, where the nearest point stops being unique.
    """
    radii = []
    for s in surfaces:
        r = cap
        for t in surfaces:
            if t is not s:
                r = min(r, 0.5 * surface_gap(s, t))
        if s.kind == "circle":
            r = min(r, s.radius)
        radii.append(r)
    return radii


class AdaptedRadius:
    """Batch evaluator of ``zeta = phi(y)**(1/gamma) * z`` for one surface.

    Parameters
    ----------
    surface : SurfaceSpec
    solution : object
        Anything with ``gamma``, ``phi`` (nodal values) and ``grid`` (with an
        ``interpolate(values, Y)`` method), typically a ``SpectralSolution``.
    """

    def __init__(self, surface, solution):
        self.surface = surface
        self.gamma = float(solution.gamma)
        self.grid = solution.grid
        # phi^(1/gamma) is what scales z; interpolate it directly
        self.scale_nodes = np.asarray(solution.phi, dtype=float) ** (1.0 / self.gamma)
        spread = np.ptp(self.scale_nodes) / np.mean(self.scale_nodes)
        self.constant = bool(spread < 1e-12)
        self.scale_const = float(np.mean(self.scale_nodes))

    def scale(self, Y):
        """``phi(y)**(1/gamma)`` at angle coordinates ``Y``."""
        if self.constant:
            return np.full(Y.shape[0], self.scale_const)
        return self.grid.interpolate(self.scale_nodes, Y)

    def __call__(self, points):
        if self.constant:
            _, z = polar_coordinates(points, self.surface, angles=False)
            return self.scale_const * z
        Y, z = polar_coordinates(points, self.surface)
        return self.scale(Y) * z

    def start_points(self, Y, zeta):
        """Points with angle coordinates ``Y`` lying on the level ``zeta``."""
        Y = np.atleast_2d(Y)
        z = zeta / self.scale(Y)
        return from_polar(Y, z, self.surface)


def adapted_radius(x, surface, solution):
    """Adapted radial coordinate of a single point.

    Raises
    ------
    OutsideChart
        If ``x`` is not inside the chart.
    """
    x = np.asarray(x, dtype=float).ravel()
    _, z = polar_coordinates(x[None, :], surface, angles=False)
    if z[0] >= surface.chart_radius:
        raise OutsideChart(f"distance {z[0]:.6g} >= chart radius {surface.chart_radius:.6g}")
    if z[0] < ON_SURFACE_TOL:
        return 0.0
    return float(AdaptedRadius(surface, solution)(x[None, :])[0])
