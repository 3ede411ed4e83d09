"""Linearization at invariant surfaces and the local angular coefficients.

For a surface with normal-block Jacobians ``M_i`` the radial part of the
generator near the surface is governed by ``q_i(y) = <M_i n, n>`` and by the
angular fields ``w_i(y) = (v_i(m), M_i n - q_i n)``:

* ``alpha = 1/2 sum_{i>=1} q_i^2``
* ``beta  = q_0 + 1/2 sum_{i>=1} (w_i . grad q_i + q_i^2)``
* angular generator ``L_y = w_0 . grad + 1/2 sum_{i>=1} (w_i . grad)^2``
  with second-order part ``a^{ab} = 1/2 sum w_i^a w_i^b`` and first-order
  part ``b^b = w_0^b + 1/2 sum w_i^a d_a w_i^b``
* first-order operator ``D_y = c . grad`` with ``c = sum_{i>=1} q_i w_i``.

All angle derivatives are analytic for point surfaces. For circles the
dependence on the base angle enters through ``M_i(theta)`` and the tangential
speed of ``v_i``; those two are differenced pointwise in ``theta``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .errors import EllipticityFailure, NonInvariantField
from .geometry import frame
from .grids import SGrid, default_grid

INVARIANCE_TOL = 1e-10
SPAN_THRESHOLD = 1e-6
THETA_STEP = 1e-3


@dataclass(frozen=True, eq=False)
class LinearizationData:
    """Normal-block Jacobians of ``v_0 .. v_d`` along a surface.

    Attributes
    ----------
    M : array ``(d + 1, n_m, k, k)``
        Normal blocks at each base node, ``k`` the codimension.
    tangential : array ``(d + 1, n_m)``
        Tangential speed ``v_i(m) . e_theta`` (zero for points).
    m_nodes : array ``(n_m,)``
        Base angles for circles; a single dummy node for points.
    dM, dtangential :
        Derivatives of the two arrays above in the base angle (circles).
    """

    surface_id: int
    surface: object
    M: np.ndarray
    tangential: np.ndarray
    m_nodes: np.ndarray
    dM: np.ndarray | None = None
    dtangential: np.ndarray | None = None


def _circle_frame(surface, theta):
    e_r = np.cos(theta)[:, None] * surface.plane[0] + np.sin(theta)[:, None] * surface.plane[1]
    e_t = -np.sin(theta)[:, None] * surface.plane[0] + np.cos(theta)[:, None] * surface.plane[1]
    m = surface.center + surface.radius * e_r
    return m, e_r, e_t


def _circle_blocks(field_desc, surface, theta):
    """Normal block ``N^T J N`` and tangential speed at base angles ``theta``."""
    m, e_r, e_t = _circle_frame(surface, theta)
    J = field_desc.jacobian(m)
    N = np.stack([e_r, np.broadcast_to(surface.axis, e_r.shape)], axis=2)
    M = np.einsum("nai,nab,nbj->nij", N, J, N)
    speed = np.einsum("na,na->n", field_desc.value(m), e_t)
    return M, speed


def invariance_defect(model, surface):
    """Worst violation of invariance over sampled surface points.

    Returns ``(defect, field_index, witness_point)``. For points this is
    ``max |v_i|``; for circles the normal component of ``v_i``.
    """
    pts = surface.sample(1 if surface.kind == "point" else 64)
    worst = (0.0, None, pts[0])
    for i, f in enumerate(model.v):
        val = f.value(pts)
        if surface.kind == "circle":
            t = surface.tangent(pts)
            val = val - np.sum(val * t, axis=1)[:, None] * t
        norms = np.sqrt(np.sum(val * val, axis=1))
        k = int(np.argmax(norms))
        if norms[k] > worst[0]:
            worst = (float(norms[k]), i, pts[k])
    return worst


def linearize(model, surface_id, m_nodes=None):
    """Normal-block Jacobians of every unperturbed field along a surface.

    Parameters
    ----------
    model : ModelSpec
    surface_id : int
    m_nodes : array, optional
        Base angles for circle surfaces (default: 32 uniform angles).

    Raises
    ------
    NonInvariantField
        If some ``v_i`` does not vanish on (or is not tangent to) the surface
        within ``1e-10``.
    """
    surface = model.surfaces[surface_id]
    defect, i, witness = invariance_defect(model, surface)
    if defect > INVARIANCE_TOL:
        raise NonInvariantField(f"v_{i} violates invariance of surface {surface_id} by {defect:.3g} at {witness}")
    nf = model.dim + 1
    if surface.kind == "point":
        loc = surface.location[None, :]
        M = np.stack([f.jacobian(loc) for f in model.v])  # (d+1, 1, d, d)
        return LinearizationData(surface_id, surface, M, np.zeros((nf, 1)), np.zeros(1))
    theta = np.arange(32) * (2 * np.pi / 32) if m_nodes is None else np.asarray(m_nodes, dtype=float)
    h = THETA_STEP
    blocks, speeds, dblocks, dspeeds = [], [], [], []
    for f in model.v:
        M0, s0 = _circle_blocks(f, surface, theta)
        shifted = [_circle_blocks(f, surface, theta + k * h) for k in (2, 1, -1, -2)]
        dM = (-shifted[0][0] + 8 * shifted[1][0] - 8 * shifted[2][0] + shifted[3][0]) / (12 * h)
        ds = (-shifted[0][1] + 8 * shifted[1][1] - 8 * shifted[2][1] + shifted[3][1]) / (12 * h)
        blocks.append(M0)
        speeds.append(s0)
        dblocks.append(dM)
        dspeeds.append(ds)
    return LinearizationData(surface_id, surface, np.stack(blocks), np.stack(speeds), theta,
                             np.stack(dblocks), np.stack(dspeeds))


@dataclass(frozen=True, eq=False)
class SCoefficients:
    """Local coefficients on a grid over the sphere bundle.

    Attributes
    ----------
    alpha, beta : ``(n,)``
    q : ``(d + 1, n)`` -- the quadratic forms ``<M_i n, n>``
    w : ``(d + 1, n, k)`` -- angular fields in grid coordinates
    a : ``(n, k, k)`` -- second-order coefficient of ``L_y``
    b : ``(n, k)`` -- first-order coefficient of ``L_y``
    c : ``(n, k)`` -- coefficient field of ``D_y``
    """

    grid: SGrid
    alpha: np.ndarray
    beta: np.ndarray
    q: np.ndarray
    w: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    surface_id: int = 0
    notes: dict = field(default_factory=dict)

    @property
    def alpha_flag(self):
        """True when ``min alpha < 1e-12`` (radial noise vanishes somewhere)."""
        return bool(np.min(self.alpha) < 1e-12)

    def min_ellipticity(self):
        """Smallest eigenvalue of ``a`` over the grid."""
        if self.a.shape[1] == 1:
            return float(np.min(self.a[:, 0, 0]))
        return float(np.min(np.linalg.eigvalsh(self.a)))

    def to_csv(self, path):
        """Write grid coordinates, alpha, beta and the entries of a, b, c."""
        k = self.grid.ndim
        names = [f"y{j + 1}" for j in range(k)] + ["alpha", "beta"]
        names += [f"a{i + 1}{j + 1}" for i in range(k) for j in range(i, k)]
        names += [f"b{j + 1}" for j in range(k)] + [f"c{j + 1}" for j in range(k)]
        nodes = self.grid.nodes
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(names)
            for n in range(self.grid.size):
                row = list(nodes[n]) + [self.alpha[n], self.beta[n]]
                row += [self.a[n, i, j] for i in range(k) for j in range(i, k)]
                row += list(self.b[n]) + list(self.c[n])
                wr.writerow([repr(float(v)) for v in row])


def _point2_fields(M, theta):
    """q, w, and their theta-derivatives for a point in the plane."""
    c, s = np.cos(theta), np.sin(theta)
    n = np.stack([c, s], axis=1)
    t = np.stack([-s, c], axis=1)

    def form(u, A, v):
        return u[:, 0] * (A[0, 0] * v[:, 0] + A[0, 1] * v[:, 1]) + u[:, 1] * (A[1, 0] * v[:, 0] + A[1, 1] * v[:, 1])

    q = form(n, M, n)
    w = form(t, M, n)
    dw = -form(n, M, n) + form(t, M, t)
    dq = form(t, M, n) + form(n, M, t)
    return q, w[:, None], dw[:, None, None], dq[:, None]


def _point3_fields(M, Y):
    """q, w = (w_polar, w_azimuth), d_a w^b and d_a q for a point in space."""
    th, ph = Y[:, 0], Y[:, 1]
    st, ct, sp, cp = np.sin(th), np.cos(th), np.sin(ph), np.cos(ph)
    n = np.stack([st * cp, st * sp, ct], axis=1)
    e_t = np.stack([ct * cp, ct * sp, -st], axis=1)
    e_p = np.stack([-sp, cp, np.zeros_like(sp)], axis=1)
    Mn = n @ M.T
    Me_t = e_t @ M.T
    Me_p = e_p @ M.T
    S = M + M.T

    def dot(u, v):
        return np.sum(u * v, axis=1)

    q = dot(n, Mn)
    w_t = dot(e_t, Mn)
    w_p = dot(e_p, Mn) / st
    # derivatives of the moving frame
    dn = (e_t, st[:, None] * e_p)
    de_t = (-n, ct[:, None] * e_p)
    de_p = (np.zeros_like(n), -(st[:, None] * n + ct[:, None] * e_t))
    dwt, dwp, dq = [], [], []
    for a in range(2):
        dMn = dn[a] @ M.T
        dwt.append(dot(de_t[a], Mn) + dot(e_t, dMn))
        base = dot(de_p[a], Mn) + dot(e_p, dMn)
        if a == 0:
            dwp.append(base / st - ct / (st * st) * dot(e_p, Mn))
        else:
            dwp.append(base / st)
        dq.append(dot(dn[a], n @ S.T))
    w = np.stack([w_t, w_p], axis=1)
    dW = np.stack([np.stack([dwt[0], dwp[0]], axis=1), np.stack([dwt[1], dwp[1]], axis=1)], axis=1)
    # dW[n, a, b] = d_a w^b
    return q, w, dW, np.stack(dq, axis=1)


def _torus_fields(M, dM, speed, dspeed, radius, Y):
    """Same quantities for a circle in space on (m_angle, normal_angle)."""
    psi = Y[:, 1]
    c, s = np.cos(psi), np.sin(psi)
    n = np.stack([c, s], axis=1)
    t = np.stack([-s, c], axis=1)

    def form(u, A, v):
        return (u[:, 0] * (A[:, 0, 0] * v[:, 0] + A[:, 0, 1] * v[:, 1])
                + u[:, 1] * (A[:, 1, 0] * v[:, 0] + A[:, 1, 1] * v[:, 1]))

    q = form(n, M, n)
    w_m = speed / radius
    w_n = form(t, M, n)
    dW = np.zeros((len(psi), 2, 2))
    dW[:, 0, 0] = dspeed / radius
    dW[:, 0, 1] = form(t, dM, n)
    dW[:, 1, 1] = -form(n, M, n) + form(t, M, t)
    dq = np.stack([form(n, dM, n), form(t, M, n) + form(n, M, t)], axis=1)
    return q, np.stack([w_m, w_n], axis=1), dW, dq


def assemble_coeffs(lin, grid=None, check=True):
    """Assemble alpha, beta, a, b, c on ``grid``.

    Parameters
    ----------
    lin : LinearizationData
    grid : SGrid, optional
        Defaults to :func:`default_grid` of the surface. For circles the
        grid's base angles must coincide with ``lin.m_nodes``.
    check : bool
        Raise :class:`EllipticityFailure` when ``a`` is not positive.

    Raises
    ------
    EllipticityFailure
        If the second-order coefficient is not positive at some node.
    """
    surface = lin.surface
    grid = grid or default_grid(surface)
    if min(grid.shape) < 16:
        raise ValueError("grid resolution must be at least 16 per axis")
    Y = grid.nodes
    nf = lin.M.shape[0]
    q, W, dW, dQ = [], [], [], []
    if surface.kind == "point" and surface.dim == 2:
        if grid.topology != "circle":
            raise ValueError("a point in the plane needs a circle grid")
        for i in range(nf):
            res = _point2_fields(lin.M[i, 0], Y[:, 0])
            for lst, r in zip((q, W, dW, dQ), res):
                lst.append(r)
    elif surface.kind == "point" and surface.dim == 3:
        if grid.topology != "sphere":
            raise ValueError("a point in space needs a sphere grid")
        for i in range(nf):
            res = _point3_fields(lin.M[i, 0], Y)
            for lst, r in zip((q, W, dW, dQ), res):
                lst.append(r)
    elif surface.kind == "circle":
        if grid.topology != "torus":
            raise ValueError("a circle needs a torus grid")
        theta_axis = grid.axes()[0]
        if lin.m_nodes.shape != theta_axis.shape or np.max(np.abs(lin.m_nodes - theta_axis)) > 1e-12:
            raise ValueError("linearization nodes do not match the grid's base angles")
        rows = np.repeat(np.arange(grid.shape[0]), grid.shape[1])
        for i in range(nf):
            res = _torus_fields(lin.M[i][rows], lin.dM[i][rows], lin.tangential[i][rows],
                                lin.dtangential[i][rows], surface.radius, Y)
            for lst, r in zip((q, W, dW, dQ), res):
                lst.append(r)
    else:
        raise NotImplementedError(f"unsupported surface {surface.kind} in dimension {surface.dim}")
    q = np.stack(q)
    W = np.stack(W)
    dW = np.stack(dW)
    dQ = np.stack(dQ)
    noise = range(1, nf)
    alpha = 0.5 * sum(q[i] ** 2 for i in noise)
    directional = [np.sum(W[i] * dQ[i], axis=1) for i in range(nf)]
    beta = q[0] + 0.5 * sum(directional[i] + q[i] ** 2 for i in noise)
    a = 0.5 * sum(W[i][:, :, None] * W[i][:, None, :] for i in noise)
    b = W[0] + 0.5 * sum(np.einsum("na,nab->nb", W[i], dW[i]) for i in noise)
    c = sum(q[i][:, None] * W[i] for i in noise)
    co = SCoefficients(grid, alpha, beta, q, W, a, b, c, lin.surface_id)
    if check:
        amin = co.min_ellipticity()
        scale = max(1.0, float(np.max(np.abs(a))))
        if not amin > 1e-12 * scale:
            raise EllipticityFailure(f"angular generator degenerate on surface {lin.surface_id}: min a = {amin:.3g}")
    return co


def coefficients(model, surface_id, grid=None):
    """Linearize and assemble on ``grid`` (default grid when omitted)."""
    surface = model.surfaces[surface_id]
    grid = grid or default_grid(surface)
    m_nodes = grid.axes()[0] if surface.kind == "circle" else None
    return assemble_coeffs(linearize(model, surface_id, m_nodes), grid)


@dataclass
class AssumptionResult:
    """Outcome of one sampled assumption check."""

    name: str
    passed: bool
    worst: float
    witness: list | None
    detail: str = ""

    def to_dict(self):
        return {"passed": self.passed, "worst": self.worst, "witness": self.witness, "detail": self.detail}


@dataclass
class AssumptionReport:
    """Pass/fail per structural assumption (a)-(e)."""

    results: dict

    @property
    def passed(self):
        return all(r.passed for r in self.results.values())

    def failed(self):
        return [k for k, r in self.results.items() if not r.passed]

    def to_dict(self):
        return {k: r.to_dict() for k, r in self.results.items()}

    def __str__(self):
        lines = []
        for k, r in self.results.items():
            lines.append(f"({k}) {'pass' if r.passed else 'FAIL'}  worst={r.worst:.3g}  {r.detail}")
        return "\n".join(lines)


def _sample_region(model, n):
    if model.confinement is not None:
        half = 2.0 * model.confinement.radius
    else:
        ext = [np.linalg.norm(s.location) if s.kind == "point" else np.linalg.norm(s.center) + s.radius
               for s in model.surfaces]
        half = 1.0 + max(ext, default=0.0)
    pts = qmc.Halton(model.dim, scramble=False).random(n + 1)[1:]
    return (2.0 * pts - 1.0) * half


def _smallest_singular(fields, X):
    cols = np.stack([f.value(X) for f in fields], axis=2)
    return np.linalg.svd(cols, compute_uv=False)[:, -1]


def _sphere_points(dim, radius, n):
    if dim == 2:
        t = np.arange(n) * 2 * np.pi / n
        return radius * np.stack([np.cos(t), np.sin(t)], axis=1)
    k = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * k / n)
    az = np.pi * (1 + 5 ** 0.5) * k
    u = np.stack([np.cos(az) * np.sin(polar), np.sin(az) * np.sin(polar), np.cos(polar)], axis=1)
    if dim > 3:
        u = np.concatenate([u, np.zeros((n, dim - 3))], axis=1)
    return radius * u


def check_assumptions(model, n_samples=1000, threshold=SPAN_THRESHOLD, grid_size=64):
    """Sampled checks of the structural assumptions.

    * (a) every ``v_i`` vanishes on point surfaces / is tangent to circles,
      and the noise fields span the tangent line of each circle;
    * (b) ``v_1 .. v_d`` span ``R^d`` at quasi-random points;
    * (c) ``v~_1 .. v~_d`` span ``R^d`` at the same points and on surfaces;
    * (d) confinement is configured and ``<drift(x), x> < 0`` on the sphere
      of radius ``2 R_conf``, where the confining ramp is fully on;
    * (e) the angular generator is elliptic at every surface.

    Returns
    -------
    AssumptionReport
    """
    results = {}
    worst_a, wit_a, detail_a = 0.0, None, "fields invariant"
    ok_a = True
    for s in model.surfaces:
        defect, i, witness = invariance_defect(model, s)
        if defect > worst_a:
            worst_a, wit_a = defect, witness.tolist()
        if defect > INVARIANCE_TOL:
            ok_a = False
            detail_a = f"v_{i} does not vanish on surface {s.id}"
        if s.kind == "circle":
            pts = s.sample(64)
            t = s.tangent(pts)
            span = np.max([np.abs(np.sum(f.value(pts) * t, axis=1)) for f in model.v[1:]], axis=0)
            if np.min(span) <= threshold:
                ok_a = False
                detail_a = f"noise fields do not span the tangent line of surface {s.id}"
                wit_a = pts[int(np.argmin(span))].tolist()
    results["a"] = AssumptionResult("a", ok_a, worst_a, wit_a, detail_a)

    X = _sample_region(model, n_samples)
    smin = _smallest_singular(model.v[1:], X)
    k = int(np.argmin(smin))
    results["b"] = AssumptionResult("b", bool(smin[k] > threshold), float(smin[k]), X[k].tolist(),
                                    f"smallest singular value of noise fields over {n_samples} points")

    Xc = np.concatenate([X] + [s.sample(16) for s in model.surfaces])
    smin_t = _smallest_singular(model.v_tilde[1:], Xc)
    k = int(np.argmin(smin_t))
    results["c"] = AssumptionResult("c", bool(smin_t[k] > threshold), float(smin_t[k]), Xc[k].tolist(),
                                    "smallest singular value of perturbation noise fields")

    if model.confinement is None:
        results["d"] = AssumptionResult("d", False, float("inf"), None, "no confinement configured")
    else:
        R = 2.0 * model.confinement.radius
        S = _sphere_points(model.dim, R, 256)
        radial = np.sum((model.v[0].value(S) + model.confinement.value(S)) * S, axis=1)
        k = int(np.argmax(radial))
        results["d"] = AssumptionResult("d", bool(radial[k] < 0), float(radial[k]), S[k].tolist(),
                                        f"max <drift, x> on the sphere of radius {R:g}")

    ok_e, worst_e, wit_e, detail_e = True, float("inf"), None, "angular generator elliptic"
    for s in model.surfaces:
        try:
            grid = default_grid(s, grid_size if s.kind != "point" or s.dim == 2 else 16)
            m_nodes = grid.axes()[0] if s.kind == "circle" else None
            co = assemble_coeffs(linearize(model, s.id, m_nodes), grid, check=False)
        except NonInvariantField:
            ok_e, detail_e = False, f"surface {s.id} not invariant; coefficients undefined"
            continue
        amin = co.min_ellipticity()
        scale = max(1.0, float(np.max(np.abs(co.a))))
        if amin < worst_e:
            worst_e = amin
            wit_e = co.grid.nodes[int(np.argmin(co.a[:, 0, 0]))].tolist()
        if not amin > 1e-12 * scale:
            ok_e, detail_e = False, f"angular generator degenerate on surface {s.id}"
        elif co.alpha_flag:
            detail_e = f"min alpha < 1e-12 on surface {s.id}"
    results["e"] = AssumptionResult("e", ok_e, worst_e, wit_e, detail_e)
    return AssumptionReport(results)
