"""Vector-field descriptors and the model container.

Three descriptor kinds cover every model used here:

* :class:`LinearAtPoint` -- ``A (x - p)``, optionally cut off by a smooth
  plateau weight of radius ``R``;
* :class:`Blend` -- several cut-off linear terms plus a background field
  carrying the complementary weight;
* :class:`Explicit` -- one closed-form expression per component.

Each descriptor evaluates values ``(n, d)`` and Jacobians ``(n, d, d)`` on
batches. Linear and blended Jacobians are analytic, explicit ones use a
five-point central difference with step ``1e-5``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .expr import Expression
from .geometry import SurfaceSpec, default_chart_radii

FD_STEP = 1e-5
PLATEAU_INNER = 0.5


def _transition(t):
    """C-infinity step from 1 (t <= 0) to 0 (t >= 1) and its derivative.

    Built from ``g(t) = exp(-1/t)``: ``g(1-t) / (g(1-t) + g(t))``.
    """
    t = np.clip(t, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(t < 1.0, np.exp(-1.0 / np.where(t < 1.0, 1.0 - t, 1.0)), 0.0)
        b = np.where(t > 0.0, np.exp(-1.0 / np.where(t > 0.0, t, 1.0)), 0.0)
        s = a + b
        w = a / s
        inner = np.where((t > 0.0) & (t < 1.0), 1.0 / np.where(t < 1.0, (1.0 - t) ** 2, 1.0)
                         + 1.0 / np.where(t > 0.0, t * t, 1.0), 0.0)
        dw = np.where((t > 0.0) & (t < 1.0), -a * b * inner / (s * s), 0.0)
    return w, dw


def plateau(s, inner=PLATEAU_INNER):
    """Smooth cut-off weight: 1 for ``s <= inner``, 0 for ``s >= 1``.

    Returns the weight and its derivative in ``s``. The weight is exactly 1
    on a neighbourhood of ``s = 0``, so fields it multiplies keep their exact
    linear form near their anchor.
    """
    s = np.asarray(s, dtype=float)
    w, dw = _transition((s - inner) / (1.0 - inner))
    return w, dw / (1.0 - inner)


def _matvec(A, U):
    """Row-by-row ``U @ A.T`` with explicit arithmetic (bitwise stable)."""
    n, d = U.shape
    out = np.zeros((n, A.shape[0]))
    for i in range(A.shape[0]):
        acc = None
        for j in range(d):
            a = A[i, j]
            if a == 0.0:
                continue
            term = U[:, j] if a == 1.0 else a * U[:, j]
            acc = term.copy() if acc is None else acc + term
        if acc is not None:
            out[:, i] = acc
    return out


class FieldDescriptor:
    """Interface of a vector field on ``R^d``."""

    dim: int

    def value(self, X):
        raise NotImplementedError

    def jacobian(self, X):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError

    @property
    def is_zero(self):
        return False


@dataclass(frozen=True, eq=False)
class LinearAtPoint(FieldDescriptor):
    """Linear field ``A (x - anchor)``, optionally cut off beyond ``radius``.

    Parameters
    ----------
    matrix : (d, d) array
    anchor : (d,) array
    radius : float, optional
        Support radius of the plateau weight. ``None`` means no cut-off.
    inner : float
        Fraction of ``radius`` on which the weight is exactly one.
    """

    matrix: np.ndarray
    anchor: np.ndarray
    radius: float | None = None
    inner: float = PLATEAU_INNER

    def __post_init__(self):
        A = np.asarray(self.matrix, dtype=float)
        p = np.asarray(self.anchor, dtype=float).ravel()
        if A.shape != (p.size, p.size):
            raise ValueError(f"matrix shape {A.shape} does not match anchor dimension {p.size}")
        if self.radius is not None and not self.radius > 0:
            raise ValueError("radius must be positive")
        if not 0.0 <= self.inner < 1.0:
            raise ValueError("inner fraction must lie in [0, 1)")
        object.__setattr__(self, "matrix", A)
        object.__setattr__(self, "anchor", p)
        # shortcuts for the common multiple-of-identity, anchored-at-origin case
        diag = A[0, 0]
        object.__setattr__(self, "_scalar", float(diag) if np.array_equal(A, diag * np.eye(p.size)) else None)
        object.__setattr__(self, "_offset", bool(np.any(p)))

    @property
    def dim(self):
        return self.anchor.size

    @property
    def is_zero(self):
        return not np.any(self.matrix)

    def weight(self, X):
        """Plateau weight, its gradient ``(n, d)`` and offsets ``x - anchor``."""
        U = np.atleast_2d(X) - self.anchor
        if self.radius is None:
            return np.ones(U.shape[0]), np.zeros_like(U), U
        r = np.sqrt(np.sum(U * U, axis=1))
        w, dw = plateau(r / self.radius, self.inner)
        with np.errstate(invalid="ignore", divide="ignore"):
            grad = np.where(r[:, None] > 0, (dw / (self.radius * np.where(r > 0, r, 1.0)))[:, None] * U, 0.0)
        return w, grad, U

    def value(self, X):
        X = np.atleast_2d(X)
        U = X - self.anchor if self._offset else X
        if self._scalar is not None:
            out = self._scalar * U
        else:
            out = _matvec(self.matrix, U)
        if self.radius is not None:
            w, _, _ = self.weight(X)
            out *= w[:, None]
        return out

    def jacobian(self, X):
        w, grad, U = self.weight(X)
        AU = _matvec(self.matrix, U)
        return w[:, None, None] * self.matrix[None] + AU[:, :, None] * grad[:, None, :]

    def to_dict(self):
        out = {"type": "linear_at_point", "matrix": self.matrix.tolist(), "anchor": self.anchor.tolist()}
        if self.radius is not None:
            out["radius"] = self.radius
            out["inner"] = self.inner
        return out


@dataclass(frozen=True, eq=False)
class Blend(FieldDescriptor):
    """Partition-of-unity combination of cut-off linear terms.

    The field is ``sum_k w_k(x) A_k (x - p_k) + (1 - sum_k w_k(x)) b(x)``
    where ``w_k`` are plateau weights and ``b`` the background field. Term
    supports must be disjoint, which keeps every weight and the background
    weight inside ``[0, 1]``.
    """

    terms: tuple
    background: FieldDescriptor | None = None

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ValueError("a blend needs at least one term")
        for t in terms:
            if not isinstance(t, LinearAtPoint) or t.radius is None:
                raise ValueError("blend terms must be LinearAtPoint fields with a radius")
        dims = {t.dim for t in terms}
        if self.background is not None:
            dims.add(self.background.dim)
        if len(dims) != 1:
            raise ValueError("blend terms disagree on dimension")
        for i, s in enumerate(terms):
            for t in terms[i + 1:]:
                if np.linalg.norm(s.anchor - t.anchor) < s.radius + t.radius:
                    raise ValueError("blend term supports overlap; weights would not form a partition of unity")
        object.__setattr__(self, "terms", terms)

    @property
    def dim(self):
        return self.terms[0].dim

    @property
    def is_zero(self):
        return all(t.is_zero for t in self.terms) and (self.background is None or self.background.is_zero)

    def weights(self, X):
        """Term weights ``(k, n)`` and the background weight ``(n,)``."""
        W = np.array([t.weight(X)[0] for t in self.terms])
        return W, 1.0 - W.sum(axis=0)

    def value(self, X):
        X = np.atleast_2d(X)
        out = np.zeros((X.shape[0], self.dim))
        rest = np.ones(X.shape[0])
        for t in self.terms:
            w, _, U = t.weight(X)
            out += w[:, None] * _matvec(t.matrix, U)
            rest = rest - w
        if self.background is not None and not self.background.is_zero:
            out += rest[:, None] * self.background.value(X)
        return out

    def jacobian(self, X):
        X = np.atleast_2d(X)
        J = np.zeros((X.shape[0], self.dim, self.dim))
        rest = np.ones(X.shape[0])
        rest_grad = np.zeros_like(X)
        for t in self.terms:
            J += t.jacobian(X)
            w, grad, _ = t.weight(X)
            rest = rest - w
            rest_grad = rest_grad - grad
        if self.background is not None and not self.background.is_zero:
            B = self.background.value(X)
            J += rest[:, None, None] * self.background.jacobian(X) + B[:, :, None] * rest_grad[:, None, :]
        return J

    def to_dict(self):
        out = {"type": "blend", "terms": [
            {"matrix": t.matrix.tolist(), "anchor": t.anchor.tolist(), "radius": t.radius, "inner": t.inner}
            for t in self.terms]}
        out["background"] = None if self.background is None else self.background.to_dict()
        return out


@dataclass(frozen=True, eq=False)
class Explicit(FieldDescriptor):
    """Field given by one expression per component, e.g. ``["x1**2", "x2"]``."""

    components: tuple
    exprs: tuple = field(init=False, repr=False)

    def __post_init__(self):
        comps = tuple(str(c) if not isinstance(c, (int, float)) else repr(float(c)) for c in self.components)
        d = len(comps)
        if d < 1:
            raise ValueError("an explicit field needs at least one component")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "exprs", tuple(Expression(c, d) for c in comps))

    @property
    def dim(self):
        return len(self.components)

    @property
    def is_constant(self):
        return all(e.is_constant for e in self.exprs)

    @property
    def is_zero(self):
        return self.is_constant and all(e._constant_value == 0.0 for e in self.exprs)

    def value(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty((X.shape[0], self.dim))
        for i, e in enumerate(self.exprs):
            out[:, i] = e(X)
        return out

    def jacobian(self, X, h=FD_STEP):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n, d = X.shape
        J = np.zeros((n, d, d))
        if self.is_constant:
            return J
        for j in range(d):
            used = [i for i, e in enumerate(self.exprs) if j in e.variables]
            if not used:
                continue
            step = np.zeros(d)
            step[j] = h
            fp2, fp1 = X + 2 * step, X + step
            fm1, fm2 = X - step, X - 2 * step
            for i in used:
                e = self.exprs[i]
                J[:, i, j] = (-e(fp2) + 8.0 * e(fp1) - 8.0 * e(fm1) + e(fm2)) / (12.0 * h)
        return J

    def to_dict(self):
        return {"type": "explicit", "components": list(self.components)}


def zero_field(dim):
    """The identically zero field on ``R^dim``."""
    return Explicit(["0"] * dim)


def _ramp(s):
    """Quintic smoothstep: 0 for ``s <= 1``, 1 for ``s >= 2``; C2."""
    u = np.clip(s - 1.0, 0.0, 1.0)
    r = u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
    dr = 30.0 * u * u * (1.0 - u) * (1.0 - u)
    return r, dr


@dataclass(frozen=True)
class Confinement:
    """Inward drift ``-strength * x * ramp(|x| / radius)``, zero inside ``radius``."""

    radius: float
    strength: float

    def __post_init__(self):
        if not self.radius > 0 or not self.strength > 0:
            raise ValueError("confinement radius and strength must be positive")

    def value(self, X):
        X = np.atleast_2d(X)
        r = np.sqrt(np.sum(X * X, axis=1))
        ramp, _ = _ramp(r / self.radius)
        return (-self.strength * ramp)[:, None] * X

    def acts_on(self, X):
        """Whether any row of ``X`` lies outside the inner radius."""
        r2 = X[:, 0] * X[:, 0]
        for j in range(1, X.shape[1]):
            r2 = r2 + X[:, j] * X[:, j]
        return bool(r2.max(initial=0.0) > self.radius * self.radius)

    def jacobian(self, X):
        X = np.atleast_2d(X)
        n, d = X.shape
        r = np.sqrt(np.sum(X * X, axis=1))
        ramp, dramp = _ramp(r / self.radius)
        with np.errstate(invalid="ignore", divide="ignore"):
            radial = np.where(r > 0, dramp / (self.radius * np.where(r > 0, r, 1.0)), 0.0)
        return -self.strength * (ramp[:, None, None] * np.eye(d)[None]
                                 + radial[:, None, None] * X[:, :, None] * X[:, None, :])

    def to_dict(self):
        return {"radius": self.radius, "strength": self.strength}


def descriptor_from_dict(doc, dim):
    """Build a descriptor from its JSON form (already schema-checked)."""
    kind = doc["type"]
    if kind == "linear_at_point":
        return LinearAtPoint(doc["matrix"], doc["anchor"], doc.get("radius"), doc.get("inner", PLATEAU_INNER))
    if kind == "blend":
        terms = [LinearAtPoint(t["matrix"], t["anchor"], t["radius"], t.get("inner", PLATEAU_INNER))
                 for t in doc["terms"]]
        bg = doc.get("background")
        return Blend(terms, None if bg is None else descriptor_from_dict(bg, dim))
    if kind == "explicit":
        return Explicit(doc["components"])
    raise ValueError(f"unknown descriptor type {kind!r}")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Fields, invariant surfaces and confinement of one model.

    Parameters
    ----------
    dim : int
    surfaces : sequence of SurfaceSpec
        Surface ``id`` values are reassigned to their list position.
    v : sequence of FieldDescriptor
        Drift ``v_0`` followed by the noise fields ``v_1 .. v_d``.
    v_tilde : sequence of FieldDescriptor, optional
        Perturbation drift and noise fields; zero when omitted.
    confinement : Confinement, optional
    name : str
    bbox : float
        Trajectories leaving the ball of this radius are flagged non-finite.
    """

    dim: int
    surfaces: tuple
    v: tuple
    v_tilde: tuple = None
    confinement: Confinement | None = None
    name: str = ""
    bbox: float = 1e4

    def __post_init__(self):
        d = int(self.dim)
        if d < 2:
            raise ValueError("dimension must be at least 2")
        v = tuple(self.v)
        vt = tuple(self.v_tilde) if self.v_tilde is not None else tuple(zero_field(d) for _ in range(d + 1))
        for name, fields in (("v", v), ("v_tilde", vt)):
            if len(fields) != d + 1:
                raise ValueError(f"{name} needs {d + 1} fields (drift plus {d} noise fields), got {len(fields)}")
            for f in fields:
                if f.dim != d:
                    raise ValueError(f"field in {name} has dimension {f.dim}, expected {d}")
        surfaces = []
        for k, s in enumerate(self.surfaces):
            if s.dim != d:
                raise ValueError(f"surface {k} lives in dimension {s.dim}, expected {d}")
            surfaces.append(replace(s, id=k) if s.id != k else s)
        radii = default_chart_radii(surfaces)
        surfaces = [s if s.r_chart is not None else s.with_chart(r) for s, r in zip(surfaces, radii)]
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "v_tilde", vt)
        object.__setattr__(self, "surfaces", tuple(surfaces))

    @property
    def has_perturbation(self):
        return not all(f.is_zero for f in self.v_tilde)

    def drift(self, X, eps=0.0):
        """Stratonovich drift ``v_0 + eps^2 v~_0`` plus confinement."""
        out = self.v[0].value(X)
        if self.confinement is not None and self.confinement.acts_on(X):
            out = out + self.confinement.value(X)
        if eps > 0 and not self.v_tilde[0].is_zero:
            out = out + (eps * eps) * self.v_tilde[0].value(X)
        return out

    def noise(self, X):
        """Values of ``v_1 .. v_d``, a list of ``(n, d)`` arrays."""
        return [f.value(X) for f in self.v[1:]]

    def noise_tilde(self, X):
        """Values of ``v~_1 .. v~_d``."""
        return [f.value(X) for f in self.v_tilde[1:]]

    def strat_correction(self, X, eps=0.0):
        """Ito drift correction ``1/2 sum (Dv_i) v_i + eps^2/2 sum (Dv~_i) v~_i``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros_like(X)
        groups = [(self.v[1:], 1.0)]
        if eps > 0:
            groups.append((self.v_tilde[1:], eps * eps))
        for fields, scale in groups:
            for f in fields:
                if f.is_zero:
                    continue
                J = f.jacobian(X)
                V = f.value(X)
                for i in range(self.dim):
                    acc = J[:, i, 0] * V[:, 0]
                    for j in range(1, self.dim):
                        acc = acc + J[:, i, j] * V[:, j]
                    out[:, i] += (0.5 * scale) * acc
        return out

    def with_fields(self, **changes):
        """Copy with some attributes replaced."""
        return replace(self, **changes)

    def to_dict(self):
        surfaces = []
        for s in self.surfaces:
            if s.kind == "point":
                doc = {"kind": "point", "location": s.location.tolist()}
            else:
                doc = {"kind": "circle", "center": s.center.tolist(), "radius": s.radius,
                       "plane": s.plane.tolist()}
            doc["r_chart"] = s.r_chart
            surfaces.append(doc)
        out = {
            "name": self.name,
            "dimension": self.dim,
            "surfaces": surfaces,
            "fields": {"v": [f.to_dict() for f in self.v], "v_tilde": [f.to_dict() for f in self.v_tilde]},
            "bbox": self.bbox,
        }
        if self.confinement is not None:
            out["confinement"] = self.confinement.to_dict()
        return out


def model_from_dict(doc):
    """Build a :class:`ModelSpec` from a schema-valid JSON document."""
    d = int(doc["dimension"])
    surfaces = []
    for k, s in enumerate(doc["surfaces"]):
        if s["kind"] == "point":
            surfaces.append(SurfaceSpec("point", k, location=s["location"], r_chart=s.get("r_chart")))
        else:
            surfaces.append(SurfaceSpec("circle", k, center=s["center"], radius=s["radius"],
                                        plane=s.get("plane"), r_chart=s.get("r_chart")))
    fields = doc["fields"]
    v = [descriptor_from_dict(f, d) for f in fields["v"]]
    vt = fields.get("v_tilde")
    vt = None if vt is None else [descriptor_from_dict(f, d) for f in vt]
    conf = doc.get("confinement")
    conf = None if conf is None else Confinement(float(conf["radius"]), float(conf["strength"]))
    return ModelSpec(d, surfaces, v, vt, conf, name=doc.get("name", ""), bbox=float(doc.get("bbox", 1e4)))


ROTATION = np.array([[0.0, -1.0], [1.0, 0.0]])


def linear_point_model(a=-0.5, sigma=1.0, rho=1.0, perturbation=0.1, confinement=(2.0, 2.0), name="model_a"):
    """Linear model around a point at the origin of ``R^2``.

    ``v_0 = a x``, ``v_1 = sigma x``, ``v_2 = rho J x`` with ``J`` the quarter
    turn, perturbed by the constant fields ``perturbation * e_i``. The
    exponent of the origin is ``-2 a / sigma^2``.
    """
    origin = np.zeros(2)
    v = [LinearAtPoint(a * np.eye(2), origin), LinearAtPoint(sigma * np.eye(2), origin),
         LinearAtPoint(rho * ROTATION, origin)]
    s = repr(float(perturbation))
    vt = [zero_field(2), Explicit([s, "0"]), Explicit(["0", s])]
    conf = None if confinement is None else Confinement(*confinement)
    return ModelSpec(2, [SurfaceSpec("point", 0, location=origin)], v, vt, conf, name=name)
