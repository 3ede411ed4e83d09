"""Small models and reporting helpers shared by several test modules."""

import time
from contextlib import contextmanager

import numpy as np

from metalab.coeffs import SCoefficients
from metalab.geometry import SurfaceSpec
from metalab.grids import SGrid
from metalab.model import ROTATION, Confinement, Explicit, LinearAtPoint, ModelSpec, zero_field


def anisotropic_point_model(s1=1.0, s2=0.5, a=-0.4, rho=0.7, shear=0.0):
    """Point at the origin of R^2 whose angular coefficients genuinely vary."""
    origin = np.zeros(2)
    v0 = LinearAtPoint(np.array([[a, shear], [0.0, a]]), origin)
    v1 = LinearAtPoint(np.diag([s1, s2]), origin)
    v2 = LinearAtPoint(rho * ROTATION, origin)
    vt = [zero_field(2), LinearAtPoint(np.eye(2), np.ones(2)), LinearAtPoint(ROTATION, np.ones(2))]
    return ModelSpec(2, [SurfaceSpec("point", 0, location=origin)], [v0, v1, v2], vt, Confinement(2.0, 2.0))



def circle_coeffs(alpha, beta, a, b, c=None, n=256):
    """Coefficients on a circle grid given as arrays or callables of theta."""
    grid = SGrid("circle", (n,))
    theta = grid.nodes[:, 0]

    def arr(v):
        v = v(theta) if callable(v) else v
        return np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()

    c = 0.0 if c is None else c
    return SCoefficients(grid, arr(alpha), arr(beta), np.zeros((1, n)), np.zeros((1, n, 1)),
                         arr(a)[:, None, None], arr(b)[:, None], arr(c)[:, None])


def shallow_wells(roots, gamma=0.3, perturbation=1.0):
    """Attracting points with small exponents and strong perturbation, so escapes are quick."""
    from metalab.wells import holomorphic_wells

    roots = np.asarray(roots, dtype=complex)
    radius = 0.9 if len(roots) == 2 else 0.8
    return holomorphic_wells(roots, [gamma] * len(roots), radius=radius, perturbation=perturbation,
                             name="shallow_wells")


TRIANGLE_ROOTS = np.exp(2j * np.pi * np.arange(3) / 3)
PAIR_ROOTS = np.array([-1.0 + 0j, 1.0 + 0j])


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


@contextmanager
def criterion(number, title):
    """Record PASS or FAIL for acceptance criterion ``number``.

    The block may store a short ``detail`` string in the yielded dict; any
    exception (including a failed assert) marks the criterion as failed and
    propagates.
    """
    info = {"detail": ""}
    start = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        reason = f"{type(exc).__name__}: {exc}".splitlines()[0]
        ACCEPTANCE[number] = f"criterion {number:>2}: FAIL  {title} | {info['detail']} | {reason} [{elapsed:.1f} s]"
        print(ACCEPTANCE[number])
        raise
    elapsed = time.perf_counter() - start
    ACCEPTANCE[number] = f"criterion {number:>2}: PASS  {title} | {info['detail']} [{elapsed:.1f} s]"
    print(ACCEPTANCE[number])
