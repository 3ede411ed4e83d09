"""Rectangular grids on the angular manifolds (circle, 2-sphere, torus).

Node ordering is row-major: index ``i * n2 + j`` for two-dimensional grids.
The 2-sphere grid is staggered in the polar angle (poles excluded); a step
across a pole lands on the same polar row with the azimuth shifted by pi, so
the azimuth count must be even.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True, eq=False)
class SGrid:
    """Grid over the sphere bundle.

    Parameters
    ----------
    topology : {"circle", "sphere", "torus"}
    shape : tuple of int
        ``(N,)`` for the circle, ``(N_polar, N_azimuth)`` for the sphere and
        ``(N_m, N_normal)`` for the torus.
    """

    topology: str
    shape: tuple

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if self.topology == "circle":
            if len(shape) != 1:
                raise ValueError("circle grids take one size")
        elif self.topology in ("sphere", "torus"):
            if len(shape) != 2:
                raise ValueError(f"{self.topology} grids take two sizes")
            if self.topology == "sphere" and shape[1] % 2:
                raise ValueError("sphere grids need an even azimuth count")
        else:
            raise ValueError(f"unknown topology {self.topology!r}")
        if min(shape) < 4:
            raise ValueError("grid sizes must be at least 4")
        object.__setattr__(self, "shape", shape)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def spacing(self):
        if self.topology == "circle":
            return (TWO_PI / self.shape[0],)
        if self.topology == "sphere":
            return (np.pi / self.shape[0], TWO_PI / self.shape[1])
        return (TWO_PI / self.shape[0], TWO_PI / self.shape[1])

    def axes(self):
        """One-dimensional node coordinates along each axis."""
        h = self.spacing
        if self.topology == "circle":
            return (np.arange(self.shape[0]) * h[0],)
        if self.topology == "sphere":
            return ((np.arange(self.shape[0]) + 0.5) * h[0], np.arange(self.shape[1]) * h[1])
        return (np.arange(self.shape[0]) * h[0], np.arange(self.shape[1]) * h[1])

    @property
    def nodes(self):
        """Node coordinates, shape ``(size, ndim)``."""
        ax = self.axes()
        if self.ndim == 1:
            return ax[0][:, None]
        A, B = np.meshgrid(ax[0], ax[1], indexing="ij")
        return np.stack([A.ravel(), B.ravel()], axis=1)

    @property
    def weights(self):
        """Positive quadrature weights summing to the measure of the manifold."""
        h = self.spacing
        if self.topology == "circle":
            return np.full(self.size, h[0])
        if self.topology == "torus":
            return np.full(self.size, h[0] * h[1])
        polar = self.axes()[0]
        w = np.repeat(np.sin(polar) * h[0] * h[1], self.shape[1])
        return w * (4.0 * np.pi / w.sum())

    def neighbour(self, i, j, di, dj):
        """Flat index of node ``(i + di, j + dj)`` with wrap and pole reflection.

        ``i`` and ``j`` may be arrays; ``di`` and ``dj`` are in ``{-1, 0, 1}``.
        """
        if self.ndim == 1:
            return np.mod(i + di, self.shape[0])
        n1, n2 = self.shape
        ii = i + di
        jj = j + dj
        if self.topology == "sphere":
            over = (ii < 0) | (ii >= n1)
            ii = np.where(ii < 0, -ii - 1, np.where(ii >= n1, 2 * n1 - ii - 1, ii))
            jj = np.where(over, jj + n2 // 2, jj)
        else:
            ii = np.mod(ii, n1)
        return ii * n2 + np.mod(jj, n2)

    def _padded(self, values):
        """Values with two ghost layers on each side of each axis."""
        v = np.asarray(values, dtype=float).reshape(self.shape)
        if self.ndim == 1:
            return np.concatenate([v[-2:], v, v[:2]])
        if self.topology == "sphere":
            half = self.shape[1] // 2
            flipped = np.roll(v, half, axis=1)
            v = np.concatenate([flipped[1::-1], v, flipped[:-3:-1]], axis=0)
        else:
            v = np.concatenate([v[-2:], v, v[:2]], axis=0)
        return np.concatenate([v[:, -2:], v, v[:, :2]], axis=1)

    def interpolate(self, values, Y):
        """Four-point Lagrange interpolation of nodal ``values`` at ``Y``.

        Exact at nodes; tensor product in two dimensions.
        """
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        P = self._padded(values)
        h = self.spacing
        offsets = (0.0, 0.5 * h[0]) if self.topology == "sphere" else (0.0, 0.0)
        idx, wts = [], []
        for axis in range(self.ndim):
            s = (Y[:, axis] - offsets[axis]) / h[axis]
            if self.topology != "sphere" or axis == 1:
                s = np.mod(s, self.shape[axis])
            k = np.minimum(np.floor(s).astype(int), self.shape[axis] - 1)
            t = s - k
            # ghost layers shift indices by two; base node sits at k + 1 of the stencil
            base = k + 1
            wts.append(np.stack([
                -t * (t - 1.0) * (t - 2.0) / 6.0,
                (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
                -(t + 1.0) * t * (t - 2.0) / 2.0,
                (t + 1.0) * t * (t - 1.0) / 6.0,
            ], axis=1))
            idx.append(base)
        # explicit accumulation keeps each row's arithmetic independent of the batch
        if self.ndim == 1:
            w = wts[0]
            out = P[idx[0]] * w[:, 0]
            for a in range(1, 4):
                out = out + P[idx[0] + a] * w[:, a]
            return out
        rows = np.clip(idx[0][:, None] + np.arange(4)[None, :], 0, P.shape[0] - 1)
        cols = idx[1][:, None] + np.arange(4)[None, :]
        out = np.zeros(Y.shape[0])
        for a in range(4):
            inner = P[rows[:, a], cols[:, 0]] * wts[1][:, 0]
            for b in range(1, 4):
                inner = inner + P[rows[:, a], cols[:, b]] * wts[1][:, b]
            out = out + wts[0][:, a] * inner
        return out


def default_grid(surface, n=None):
    """Grid matching the sphere bundle of ``surface``.

    Defaults: 256 nodes on a circle, 24 x 48 on the 2-sphere, 32 x 32 on
    the torus.
    """
    if surface.kind == "point" and surface.dim == 2:
        return SGrid("circle", (n or 256,))
    if surface.kind == "point" and surface.dim == 3:
        return SGrid("sphere", (n or 24, 2 * (n or 24)))
    if surface.kind == "circle":
        return SGrid("torus", (n or 32, n or 32))
    raise NotImplementedError(f"no grid for a {surface.kind} in dimension {surface.dim}")
