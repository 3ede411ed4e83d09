"""Attracting points driven by a holomorphic noise frame.

The noise fields are ``sigma chi G`` and ``i sigma chi G`` for the complex
polynomial ``G = prod (z - p_k)`` of degree ``n``, with
``chi = (1 + |z|^2 / c^2)^(-q)`` and ``q = max(1, n / 2)`` keeping them bounded. Both vanish exactly at the roots and span the plane
everywhere else, and near root ``k`` they act as ``s_k R`` and ``s_k J R``
for a rotation ``R``. A blended linear drift ``a_k (x - p_k)`` then gives the
root the exponent ``-2 a_k / s_k^2``, which is how the exponents are set.
"""

from __future__ import annotations

from math import comb

import numpy as np

from .geometry import SurfaceSpec
from .model import Blend, Confinement, Explicit, LinearAtPoint, ModelSpec, zero_field


def _power(name, k):
    return "" if k == 0 else name if k == 1 else f"{name}**{k}"


def _chi_power(roots):
    return max(1.0, len(roots) / 2.0)


def _complex_poly_fields(roots, sigma, cutoff):
    """Noise fields ``sigma chi G`` and ``i sigma chi G`` with ``G = prod (z - r_k)``.

    Both fields vanish exactly at the roots and span the plane everywhere else.
    """
    # expand the polynomial into real and imaginary parts as expression strings
    coeffs = np.poly(np.asarray(roots, dtype=complex))
    re_terms, im_terms = [], []
    deg = len(coeffs) - 1
    for k, c in enumerate(coeffs):
        p = deg - k
        if abs(c) < 1e-12:
            continue
        # (x + i y)^p expanded by the binomial formula
        for j in range(p + 1):
            binom = float(comb(p, j))
            # i^j factor
            unit = [1, 1j, -1, -1j][j % 4]
            coef = c * binom * unit
            mono = "*".join(f for f in (_power("x", p - j), _power("y", j)) if f) or "1"
            if abs(coef.real) > 1e-12:
                re_terms.append(f"({float(coef.real)!r})*{mono}")
            if abs(coef.imag) > 1e-12:
                im_terms.append(f"({float(coef.imag)!r})*{mono}")
    re = " + ".join(re_terms) or "0"
    im = " + ".join(im_terms) or "0"
    chi = f"({float(sigma)!r})/(1 + (x**2 + y**2)/{float(cutoff) ** 2!r})**{_chi_power(roots)!r}"
    v1 = Explicit([f"{chi}*({re})", f"{chi}*({im})"])
    v2 = Explicit([f"-{chi}*({im})", f"{chi}*({re})"])
    return v1, v2, coeffs


def effective_sigma(roots, k, sigma, cutoff):
    """``|sigma chi G'(p_k)|``: the linear noise strength at root ``k``."""
    coeffs = np.poly(np.asarray(roots, dtype=complex))
    d = np.polyval(np.polyder(coeffs), roots[k])
    chi = (1.0 + abs(roots[k]) ** 2 / cutoff ** 2) ** -_chi_power(roots)
    return abs(sigma * chi * d)


def holomorphic_wells(roots, gammas, sigma=1.875, cutoff=2.0, radius=0.9, perturbation=0.3,
                      confinement=(2.5, 2.0), name="model_b"):
    """Attracting points at complex ``roots`` with prescribed exponents.

    Parameters
    ----------
    roots : sequence of complex
        Locations of the point surfaces.
    gammas : sequence of float
        Exponent of each root.
    sigma, cutoff : float
        Noise amplitude and the radius in ``chi``.
    radius : float
        Support radius of each blended drift term; supports must not overlap.
    perturbation : float
        Amplitude of the additive perturbation noise.
    confinement : (radius, strength)
    """
    v1, v2, _ = _complex_poly_fields(roots, sigma, cutoff)
    terms = []
    for k, (r, g) in enumerate(zip(roots, gammas)):
        s = effective_sigma(roots, k, sigma, cutoff)
        a = -0.5 * g * s * s
        terms.append(LinearAtPoint(a * np.eye(2), [float(r.real), float(r.imag)], radius))
    v0 = Blend(terms, None)
    p = repr(float(perturbation))
    vt = [zero_field(2), Explicit([p, "0"]), Explicit(["0", p])]
    surfaces = [SurfaceSpec("point", k, location=[float(r.real), float(r.imag)]) for k, r in enumerate(roots)]
    return ModelSpec(2, surfaces, [v0, v1, v2], vt, Confinement(*confinement), name=name)
