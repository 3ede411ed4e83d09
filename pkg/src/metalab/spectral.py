"""Nonlinear eigenvalue problem on the sphere bundle.

For a scalar ``gamma`` the operator

    M(gamma) = L_y + gamma (gamma - 1) alpha + gamma beta + gamma D_y

has a real, simple top eigenvalue ``lambda(gamma)`` with a positive
eigenfunction. ``lambda(0) = 0`` and ``lambda'(0) = beta_bar - alpha_bar``
(averages against the invariant measure ``pi`` of ``L_y``), and the other root
of ``lambda`` gives the scaling exponent.

Discretization: second-order terms by central differences, first-order terms
by Scharfetter-Gummel exponential fitting (off-diagonals stay nonnegative at
any Peclet number), mixed derivatives by the sign-dependent diagonal stencil.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq
from scipy.special import exprel

from .coeffs import coefficients
from .errors import DegenerateCase, EllipticityFailure, NoBracket, NoConvergence, SingularSolve
from .grids import default_grid

ROOT_XTOL = 1e-12
GAMMA_LIMIT = 64.0


def bernoulli(x):
    """``x / (exp(x) - 1)``, equal to 1 at ``x = 0``."""
    with np.errstate(over="ignore"):
        return 1.0 / exprel(x)


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    """Dense discretization of ``L_y`` (``gamma = 0``) or of ``M(gamma)``.

    ``added_diffusion`` counts nodes where artificial diffusion was needed to
    keep the mixed-derivative stencil monotone.
    """

    matrix: np.ndarray
    gamma: float
    grid: object
    kind: str
    added_diffusion: int = 0


def _axis_weights(a, drift, h):
    """Forward and backward Scharfetter-Gummel weights along one axis."""
    peclet = drift * h / a
    scale = a / (h * h)
    return scale * bernoulli(-peclet), scale * bernoulli(peclet)


def discretize_generator(co, gamma=0.0, potential=True):
    """Assemble the matrix of ``M(gamma)`` on the coefficient grid.

    Parameters
    ----------
    co : SCoefficients
    gamma : float
    potential : bool
        Include ``gamma (gamma - 1) alpha + gamma beta`` on the diagonal.

    Raises
    ------
    EllipticityFailure
        If the second-order coefficient is not positive.
    """
    grid = co.grid
    n = grid.size
    k = grid.ndim
    drift = co.b + gamma * co.c
    diag_a = np.stack([co.a[:, i, i] for i in range(k)], axis=1)
    if np.min(diag_a) <= 0:
        raise EllipticityFailure(f"second-order coefficient not positive (min {np.min(diag_a):.3g})")
    h = grid.spacing
    G = np.zeros((n, n))
    rows = np.arange(n)
    added = 0
    if k == 1:
        fwd, bwd = _axis_weights(diag_a[:, 0], drift[:, 0], h[0])
        np.add.at(G, (rows, grid.neighbour(rows, 0, 1, 0)), fwd)
        np.add.at(G, (rows, grid.neighbour(rows, 0, -1, 0)), bwd)
        off = fwd + bwd
    else:
        i_idx, j_idx = rows // grid.shape[1], rows % grid.shape[1]
        cross = co.a[:, 0, 1]
        mix = np.abs(cross) / (h[0] * h[1])
        eff = diag_a.copy()
        axial = []
        for ax in range(2):
            fwd, bwd = _axis_weights(eff[:, ax], drift[:, ax], h[ax])
            bad = np.minimum(fwd, bwd) < mix
            # minimal artificial diffusion restoring a monotone stencil
            for _ in range(200):
                if not bad.any():
                    break
                eff[bad, ax] *= 1.1
                fwd, bwd = _axis_weights(eff[:, ax], drift[:, ax], h[ax])
                bad = np.minimum(fwd, bwd) < mix
            added += int(np.count_nonzero(eff[:, ax] != diag_a[:, ax]))
            axial.append((fwd - mix, bwd - mix))
        off = np.zeros(n)
        steps = [((1, 0), axial[0][0]), ((-1, 0), axial[0][1]), ((0, 1), axial[1][0]), ((0, -1), axial[1][1])]
        pos = cross >= 0
        steps += [((1, 1), np.where(pos, mix, 0.0)), ((-1, -1), np.where(pos, mix, 0.0)),
                  ((1, -1), np.where(pos, 0.0, mix)), ((-1, 1), np.where(pos, 0.0, mix))]
        for (di, dj), wts in steps:
            np.add.at(G, (rows, grid.neighbour(i_idx, j_idx, di, dj)), wts)
            off = off + wts
    diag = -off
    if potential and gamma != 0.0:
        diag = diag + gamma * (gamma - 1.0) * co.alpha + gamma * co.beta
    G[rows, rows] += diag
    kind = "L_y" if gamma == 0.0 or not potential else "M(gamma)"
    return GeneratorMatrix(G, float(gamma), grid, kind, added)


def _matrix(G):
    return G.matrix if isinstance(G, GeneratorMatrix) else np.asarray(G, dtype=float)


def stationary_measure(G):
    """Left null vector of a generator, normalized to a probability vector.

    Raises
    ------
    SingularSolve
        If the bordered system is singular (null space not one-dimensional).
    """
    A = _matrix(G)
    n = A.shape[0]
    T = A.T.copy()
    T[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    lu, piv = sla.lu_factor(T, check_finite=True)
    u = np.abs(np.diag(lu))
    if u.min() <= 1e-13 * u.max():
        raise SingularSolve("stationary system singular; null space is not one-dimensional")
    pi = sla.lu_solve((lu, piv), rhs)
    if not np.all(np.isfinite(pi)) or pi.min() < -1e-10 * np.abs(pi).max():
        raise SingularSolve("stationary vector is not a probability vector")
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    scale = max(1.0, float(np.max(np.abs(A))))
    resid = float(np.max(np.abs(pi @ A)))
    if resid > 1e-10 * scale:
        raise SingularSolve(f"stationary residual {resid:.3g} too large")
    return pi


def _dense_top(A, weights=None):
    """Perron pair from a full eigendecomposition.

    Used when the eigenvector spans so many decades that ratios at its
    smallest entries are dominated by rounding and the bracket stalls.
    """
    vals, vecs = np.linalg.eig(A)
    k = int(np.argmax(vals.real))
    lam = vals[k]
    if abs(lam.imag) > 1e-8 * max(1.0, abs(lam.real)):
        raise NoConvergence(f"leading eigenvalue {lam:.6g} is not real")
    psi = vecs[:, k].real
    psi = psi / psi[np.argmax(np.abs(psi))]
    if psi.min() < -1e-8:
        raise NoConvergence("leading eigenvector changes sign")
    psi = np.maximum(psi, 0.0)
    if weights is not None:
        psi = psi / float(np.dot(psi, weights))
    return float(lam.real), psi


def top_eigenvalue(G, tol=1e-12, max_iter=100_000, weights=None):
    """Eigenvalue of maximal real part and its positive eigenvector.

    Inverse iteration with a shift placed just above the Collatz-Wielandt
    upper bound ``max_j (G psi)_j / psi_j``. The lower and upper bounds
    bracket the Perron root at every step, so the bracket width is a
    rigorous stopping test (up to rounding). If the bracket stops shrinking
    before it is tight, the pair is taken from a dense eigendecomposition.

    Parameters
    ----------
    G : GeneratorMatrix or array
        Matrix with nonnegative off-diagonal entries.
    weights : array, optional
        If given, ``psi`` is normalized so that ``sum(psi * weights) = 1``;
        otherwise ``max(psi) = 1``.

    Raises
    ------
    NoConvergence
        If the bracket does not close within ``max_iter`` iterations.
    """
    A = _matrix(G)
    n = A.shape[0]
    scale = max(1.0, float(np.max(np.abs(np.diag(A)))))
    floor = 64.0 * np.finfo(float).eps * scale
    psi = np.ones(n)
    ratio = (A @ psi) / psi
    lo, hi = float(ratio.min()), float(ratio.max())
    factor_width = None
    lu = None
    stall = 0
    best = hi - lo
    for _ in range(max_iter):
        width = hi - lo
        if width <= max(tol * max(1.0, abs(hi)), floor):
            break
        if lu is None or width < 0.1 * factor_width:
            mu = hi + max(width, floor)
            lu = sla.lu_factor(mu * np.eye(n) - A, check_finite=False)
            factor_width = width
        psi = sla.lu_solve(lu, psi, check_finite=False)
        psi /= psi.max()
        if psi.min() <= 0:
            psi = np.abs(psi) + 1e-300
        ratio = (A @ psi) / psi
        lo = max(lo, float(ratio.min()))
        hi = min(hi, float(ratio.max()))
        if hi - lo < 0.5 * best:
            best, stall = hi - lo, 0
        else:
            stall += 1
            if stall > 50:
                if hi - lo <= 1e3 * floor:
                    break
                return _dense_top(A, weights)
    else:
        raise NoConvergence(f"no convergence after {max_iter} iterations (width {hi - lo:.3g})")
    lam = 0.5 * (lo + hi)
    if weights is not None:
        psi = psi / float(np.dot(psi, weights))
    return lam, psi


@dataclass(eq=False)
class SpectralSolution:
    """Scaling exponent, eigenfunction and invariant measure for a surface."""

    surface_id: int
    gamma: float
    phi: np.ndarray
    pi: np.ndarray
    alpha_bar: float
    beta_bar: float
    grid: object
    lambda_curve: list = field(default_factory=list)
    residual: float = 0.0
    unique: bool = True
    added_diffusion: int = 0

    @property
    def classification(self):
        return "Attracting" if self.gamma > 0 else "Repelling"

    def summary(self):
        return {
            "surface_id": self.surface_id,
            "gamma": self.gamma,
            "classification": self.classification,
            "alpha_bar": self.alpha_bar,
            "beta_bar": self.beta_bar,
            "residual": self.residual,
            "unique_on_probe": self.unique,
            "grid": {"topology": self.grid.topology, "shape": list(self.grid.shape)},
            "phi_min": float(self.phi.min()),
            "phi_max": float(self.phi.max()),
            "added_diffusion_nodes": self.added_diffusion,
        }

    def to_csv(self, path):
        """Write grid coordinates, phi and pi."""
        nodes = self.grid.nodes
        k = nodes.shape[1]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([f"y{j + 1}" for j in range(k)] + ["phi", "pi"])
            for row, f, p in zip(nodes, self.phi, self.pi):
                wr.writerow([repr(float(v)) for v in row] + [repr(float(f)), repr(float(p))])


def eigenvalue_curve(co, gammas):
    """``lambda(gamma)`` at each of ``gammas``."""
    return np.array([top_eigenvalue(discretize_generator(co, g))[0] for g in gammas])


def solve_gamma(co, probe_points=12, curve_points=13):
    """Find the nonzero root of ``lambda(gamma)`` and the eigenfunction there.

    The root is searched on the side given by the sign of
    ``alpha_bar - beta_bar``; the bracket doubles until ``lambda`` changes
    sign, then Brent's method refines it.

    Raises
    ------
    DegenerateCase
        If ``|alpha_bar - beta_bar| <= 1e-8``.
    NoBracket
        If no sign change occurs for ``|gamma| <= 64``.
    """
    G0 = discretize_generator(co, 0.0)
    pi = stationary_measure(G0)
    abar = float(np.dot(co.alpha, pi))
    bbar = float(np.dot(co.beta, pi))
    gap = abar - bbar
    if abs(gap) <= 1e-8:
        raise DegenerateCase(f"alpha_bar - beta_bar = {gap:.3g}; no nonzero exponent")
    side = 1.0 if gap > 0 else -1.0
    history = {}

    def lam(g):
        if g not in history:
            history[g] = top_eigenvalue(discretize_generator(co, g))[0]
        return history[g]

    guess = abs(1.0 - bbar / abar) if abar > 0 else 1.0
    g = side * min(max(guess, 1e-3), GAMMA_LIMIT)
    if lam(g) < 0:
        lo = g
        hi = g
        while lam(hi) < 0:
            if abs(hi) >= GAMMA_LIMIT:
                raise NoBracket(f"lambda stays negative up to gamma = {hi:g}")
            lo, hi = hi, side * min(2.0 * abs(hi), GAMMA_LIMIT)
    else:
        hi = g
        lo = g / 2.0
        while lam(lo) >= 0:
            if abs(lo) < 1e-9:
                raise NoBracket("lambda nonnegative arbitrarily close to zero")
            hi, lo = lo, lo / 2.0
    root = brentq(lam, lo, hi, xtol=ROOT_XTOL)
    Groot = discretize_generator(co, root)
    _, phi = top_eigenvalue(Groot, weights=pi)
    if phi.min() <= 0:
        raise SingularSolve("eigenfunction at the root is not positive")
    residual = float(np.max(np.abs(Groot.matrix @ phi)))
    probe = root * (1.0 + 3.0 * np.arange(1, probe_points + 1) / probe_points)
    unique = bool(all(lam(p) > 0 for p in probe))
    span = max(abs(root), 0.5)
    curve_g = np.linspace(min(0.0, root) - 0.5 * span, max(0.0, root) + 0.5 * span, curve_points)
    curve = [(float(x), float(lam(x))) for x in curve_g]
    return SpectralSolution(co.surface_id, float(root), phi, pi, abar, bbar, co.grid, curve, residual, unique,
                            Groot.added_diffusion)


def solve_surface(model, surface_id, grid=None):
    """Coefficients plus :func:`solve_gamma` for one surface of a model."""
    surface = model.surfaces[surface_id]
    grid = grid or default_grid(surface)
    return solve_gamma(coefficients(model, surface_id, grid))


_CACHE = {}


def solve_model(model, grids=None):
    """Spectral solutions for every surface, cached per model object."""
    key = (id(model), None if grids is None else tuple(id(g) for g in grids))
    hit = _CACHE.get(key)
    if hit is not None and hit[0] is model:
        return hit[1]
    sols = [solve_surface(model, s.id, None if grids is None else grids[s.id]) for s in model.surfaces]
    _CACHE[key] = (model, sols)
    return sols
