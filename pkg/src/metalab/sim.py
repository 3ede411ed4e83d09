"""Trajectory engine for the unperturbed and perturbed Stratonovich SDE.

    dX = (v_0 + eps^2 v~_0)(X) dt + sum_i v_i(X) o dW_i + eps sum_i v~_i(X) o dW~_i

Trajectories are advanced together as numpy arrays. Each one draws its noise
from its own counter-based stream (:mod:`metalab.rng`), and all arithmetic is
elementwise, so a trajectory's path is bitwise independent of which other
trajectories share its batch or worker.
"""

from __future__ import annotations

import csv
import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NonFinite
from .geometry import polar_coordinates
from .rng import normal_block, stream_keys

HIT, TIMEOUT, NONFINITE = 0, 1, 2
OUTCOME_NAMES = {HIT: "Hit", TIMEOUT: "Timeout", NONFINITE: "NonFinite"}
LOG_STEP_CAP = 0.1
MIN_STEP_FRACTION = 1e-6
ENV_WORKERS = "METALAB_WORKERS"


@dataclass(frozen=True)
class SimConfig:
    """Integration and batching parameters.

    Parameters
    ----------
    eps : float
        Perturbation size; ``0`` simulates the unperturbed process.
    dt : float
        Base step.
    t_max : float
        Time cap; trajectories reaching it are reported as timeouts.
    scheme : {"heun", "euler"}
        Heun predictor-corrector, or Euler-Maruyama with the Ito correction.
    seed : int
        Master seed of the per-trajectory streams.
    n_traj : int
    adaptive : bool
        Shrink steps near surfaces so ``log z`` moves by at most 0.1 per step.
    workers : int, optional
        Process count; ``None`` reads ``METALAB_WORKERS`` (default 1).
    chunk : int
        Trajectories per vectorized batch.
    """

    eps: float = 0.0
    dt: float = 1e-3
    t_max: float = 100.0
    scheme: str = "heun"
    seed: int = 0
    n_traj: int = 1000
    adaptive: bool = False
    workers: int | None = None
    chunk: int = 4096

    def __post_init__(self):
        for name in ("eps", "dt", "t_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("seed", "n_traj", "chunk"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if not self.eps >= 0:
            raise ValueError("eps must be nonnegative")
        if self.scheme not in ("heun", "euler"):
            raise ValueError("scheme must be 'heun' or 'euler'")
        if self.n_traj < 0:
            raise ValueError("n_traj must be nonnegative")
        if self.chunk < 1:
            raise ValueError("chunk must be positive")

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return SimConfig(**d)

    def to_dict(self):
        return asdict(self)


def resolve_workers(workers=None):
    """Worker count: explicit value, else ``METALAB_WORKERS``, else 1."""
    env = os.environ.get(ENV_WORKERS)
    if env:
        return max(1, int(env))
    return max(1, int(workers or 1))


@dataclass(frozen=True, eq=False)
class Target:
    """A level set ``{zeta = kappa}`` of one surface's adapted radius.

    With ``mode="below"`` the target is the closed sub-level set
    ``{zeta <= kappa}``: a start inside it is an immediate hit.
    """

    level: object
    kappa: float
    surface_id: int
    mode: str = "level"

    def describe(self):
        return {"surface_id": self.surface_id, "kappa": self.kappa, "mode": self.mode}


@dataclass(frozen=True)
class HittingEvent:
    """Outcome of one trajectory."""

    index: int
    outcome: str
    t: float
    target: int
    x: np.ndarray
    zeta: float


@dataclass(eq=False)
class BatchResult:
    """Per-trajectory records in trajectory-index order.

    ``target`` is ``-1`` unless the outcome is a hit; ``zeta`` is the adapted
    radius of the hit target at the recorded state (NaN otherwise).
    """

    outcome: np.ndarray
    t: np.ndarray
    target: np.ndarray
    x: np.ndarray
    zeta: np.ndarray
    config: SimConfig
    targets: list = field(default_factory=list)

    def __len__(self):
        return len(self.outcome)

    @property
    def n_timeout(self):
        return int(np.count_nonzero(self.outcome == TIMEOUT))

    @property
    def n_nonfinite(self):
        return int(np.count_nonzero(self.outcome == NONFINITE))

    def events(self):
        return [HittingEvent(i, OUTCOME_NAMES[int(o)], float(t), int(g), x.copy(), float(z))
                for i, (o, t, g, x, z) in enumerate(zip(self.outcome, self.t, self.target, self.x, self.zeta))]

    def to_csv(self, path):
        """Raw event dump: index, outcome, time, target, state, zeta."""
        d = self.x.shape[1] if self.x.ndim == 2 else 0
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["traj_index", "outcome", "t_hit", "target_id"] + [f"x{j + 1}" for j in range(d)] + ["zeta"])
            for i in range(len(self)):
                wr.writerow([i, OUTCOME_NAMES[int(self.outcome[i])], repr(float(self.t[i])), int(self.target[i])]
                            + [repr(float(v)) for v in self.x[i]] + [repr(float(self.zeta[i]))])


def _noise_sum(fields, dW, start, scale=None):
    """``sum_i fields[i] * dW[:, start + i]`` with explicit accumulation."""
    acc = None
    for i, F in enumerate(fields):
        term = F * dW[:, start + i:start + i + 1]
        acc = term if acc is None else acc + term
    if acc is None:
        return 0.0
    return acc if scale is None else scale * acc


def _dot_rows(A, B):
    acc = A[:, 0] * B[:, 0]
    for j in range(1, A.shape[1]):
        acc = acc + A[:, j] * B[:, j]
    return acc


def normals_to(X, surface):
    """Unit normals from the nearest surface point, and distances."""
    if surface.kind == "point":
        u = X - surface.location
    else:
        c = X - surface.center
        e1, e2 = surface.plane[0], surface.plane[1]
        p1, p2 = _dot_rows(c, np.broadcast_to(e1, c.shape)), _dot_rows(c, np.broadcast_to(e2, c.shape))
        rho = np.hypot(p1, p2)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(rho > 0, surface.radius / rho, 0.0)
        m = (p1 * scale)[:, None] * e1 + (p2 * scale)[:, None] * e2
        u = c - m
    z = np.sqrt(_sq_norms([u]))
    with np.errstate(divide="ignore", invalid="ignore"):
        n = np.where(z[:, None] > 0, u / z[:, None], 0.0)
    return n, z


def _sq_norms(fields):
    acc = None
    for F in fields:
        s = F[:, 0] * F[:, 0]
        for j in range(1, F.shape[1]):
            s = s + F[:, j] * F[:, j]
        acc = s if acc is None else acc + s
    return acc


class _Chunk:
    """Simulation of one contiguous block of trajectory indices."""

    def __init__(self, model, cfg, targets, guards):
        self.model = model
        self.cfg = cfg
        self.targets = targets
        self.guards = guards
        self.d = model.dim
        self.perturbed = cfg.eps > 0 and model.has_perturbation
        self.n_noise = 2 * self.d if self.perturbed else self.d

    def fields(self, X):
        m = self.model
        drift = m.drift(X, self.cfg.eps)
        G = m.noise(X)
        Gt = m.noise_tilde(X) if self.perturbed else []
        return drift, G, Gt

    def unperturbed_drift(self, X, drift):
        if self.cfg.eps > 0 and not self.model.v_tilde[0].is_zero:
            return self.model.drift(X, 0.0)
        return drift

    def step_sizes(self, X, drift0, G, n, cache):
        """Per-trajectory steps; near a surface the unperturbed log-radius moves by at most 0.1.

        Only the unperturbed drift and the normal components of the
        unperturbed noise enter the cap. Below the thermal length the
        perturbation dominates and is resolved at the base step.
        """
        cfg = self.cfg
        dt = np.full(n, cfg.dt)
        if not cfg.adaptive or not self.guards:
            return dt
        threshold = 10.0 * cfg.eps if cfg.eps > 0 else 1e-3
        for surf, level in self.guards:
            if level is None:
                _, zeta = polar_coordinates(X, surf, angles=False)
            else:
                zeta = cache.get(id(level))
                if zeta is None:
                    zeta = level(X)
            close = zeta < threshold
            if not close.any():
                continue
            rows = np.nonzero(close)[0]
            Xc = X[rows]
            nrm, z = normals_to(Xc, surf)
            radial2 = None
            for F in G:
                c = _dot_rows(F[rows], nrm)
                radial2 = c * c if radial2 is None else radial2 + c * c
            dnorm = np.sqrt(_sq_norms([drift0[rows]]))
            with np.errstate(divide="ignore", invalid="ignore"):
                cap = np.minimum((LOG_STEP_CAP * z) ** 2 / radial2, LOG_STEP_CAP * z / dnorm)
            cap = np.nan_to_num(cap, nan=cfg.dt, posinf=cfg.dt)
            cap = np.clip(cap, MIN_STEP_FRACTION * cfg.dt, cfg.dt)
            dt[rows] = np.minimum(dt[rows], cap)
        return dt

    def level_values(self, X, cache=None):
        """Target offsets ``zeta - kappa``; adapted radii are stored in ``cache``."""
        out = np.empty((X.shape[0], len(self.targets)))
        cache = {} if cache is None else cache
        for j, tg in enumerate(self.targets):
            key = id(tg.level)
            if key not in cache:
                cache[key] = tg.level(X)
            out[:, j] = cache[key] - tg.kappa
        return out

    def run(self, X0, indices):
        cfg, d = self.cfg, self.d
        n = X0.shape[0]
        outcome = np.full(n, TIMEOUT, dtype=np.int8)
        t_out = np.full(n, cfg.t_max)
        tgt_out = np.full(n, -1, dtype=np.int64)
        x_out = X0.astype(float).copy()
        z_out = np.full(n, np.nan)
        if n == 0:
            return outcome, t_out, tgt_out, x_out, z_out
        pos = np.arange(n)
        X = X0.astype(float).copy()
        t = np.zeros(n)
        keys = stream_keys(cfg.seed, indices)
        nt = len(self.targets)
        cache = {}
        if nt:
            f = self.level_values(X, cache)
            side = np.sign(f)
            below = np.array([tg.mode == "below" for tg in self.targets])
            start_hit = (f == 0) | (below[None, :] & (f < 0))
            first = np.any(start_hit, axis=1)
            if first.any():
                j = np.argmax(start_hit, axis=1)
                sel = np.nonzero(first)[0]
                outcome[sel] = HIT
                t_out[sel] = 0.0
                tgt_out[sel] = j[sel]
                z_out[sel] = f[sel, j[sel]] + np.array([self.targets[k].kappa for k in j[sel]])
                keep = ~first
                pos, X, t, keys, f, side = pos[keep], X[keep], t[keep], keys[keep], f[keep], side[keep]
                cache = {k: v[keep] for k, v in cache.items()}
        bbox2 = self.model.bbox ** 2
        eps = cfg.eps
        step = 0
        tail = 1e-12 * max(1.0, cfg.t_max)
        while pos.size:
            m = pos.size
            drift, G, Gt = self.fields(X)
            dt = np.minimum(self.step_sizes(X, self.unperturbed_drift(X, drift) if cfg.adaptive else drift, G, m, cache),
                            cfg.t_max - t)
            Z = normal_block(keys, step, 2 * d, self.n_noise)
            dW = Z * np.sqrt(dt)[:, None]
            dtc = dt[:, None]
            noise = _noise_sum(G, dW, 0)
            if Gt:
                noise = noise + _noise_sum(Gt, dW, d, eps)
            if cfg.scheme == "heun":
                Xp = X + drift * dtc + noise
                drift1, G1, Gt1 = self.fields(Xp)
                noise1 = _noise_sum(G1, dW, 0)
                if Gt1:
                    noise1 = noise1 + _noise_sum(Gt1, dW, d, eps)
                Xn = X + 0.5 * ((drift + drift1) * dtc + (noise + noise1))
            else:
                Xn = X + (drift + self.model.strat_correction(X, eps)) * dtc + noise
            tn = t + dt
            step += 1
            with np.errstate(invalid="ignore", over="ignore"):
                r2 = _sq_norms([Xn])
                bad = ~np.isfinite(r2) | (r2 > bbox2)
            done = bad.copy()
            theta = np.full(m, np.inf)
            which = np.full(m, -1)
            new_cache = {}
            if nt:
                with np.errstate(invalid="ignore"):
                    fn = self.level_values(Xn, new_cache)
                    crossed = (fn * side <= 0) & ~bad[:, None]
                    frac = np.where(crossed, f / np.where(crossed, f - fn, 1.0), np.inf)
                which = np.where(crossed.any(axis=1), np.argmin(frac, axis=1), -1)
                theta = np.where(which >= 0, frac[np.arange(m), np.maximum(which, 0)], np.inf)
            hit = which >= 0
            done |= hit
            timed = ~done & (cfg.t_max - tn <= tail)
            done |= timed
            if done.any():
                sel = np.nonzero(done)[0]
                p = pos[sel]
                hs = sel[hit[sel]]
                if hs.size:
                    th = np.clip(theta[hs], 0.0, 1.0)[:, None]
                    xh = X[hs] + th * (Xn[hs] - X[hs])
                    ph = pos[hs]
                    outcome[ph] = HIT
                    t_out[ph] = t[hs] + th[:, 0] * dt[hs]
                    tgt_out[ph] = which[hs]
                    x_out[ph] = xh
                    for k in np.unique(which[hs]):
                        rows = which[hs] == k
                        z_out[ph[rows]] = self.targets[k].level(xh[rows])
                bs = sel[bad[sel]]
                if bs.size:
                    outcome[pos[bs]] = NONFINITE
                    t_out[pos[bs]] = tn[bs]
                    x_out[pos[bs]] = Xn[bs]
                ts = sel[timed[sel]]
                if ts.size:
                    outcome[pos[ts]] = TIMEOUT
                    t_out[pos[ts]] = cfg.t_max
                    x_out[pos[ts]] = Xn[ts]
                keep = ~done
                pos, X, t, keys = pos[keep], Xn[keep], tn[keep], keys[keep]
                cache = {k: v[keep] for k, v in new_cache.items()}
                if nt:
                    f, side = fn[keep], side[keep]
            else:
                X, t = Xn, tn
                cache = new_cache
                if nt:
                    f = fn
        return outcome, t_out, tgt_out, x_out, z_out


_JOB = None


def _run_job_chunk(bounds):
    lo, hi = bounds
    chunk, X0 = _JOB
    return chunk.run(X0[lo:hi], np.arange(lo, hi))


def run_batch(model, cfg, x0, targets=(), guards=None):
    """Simulate ``cfg.n_traj`` trajectories.

    Parameters
    ----------
    model : ModelSpec
    cfg : SimConfig
    x0 : array ``(d,)`` or ``(n_traj, d)``
        Common start or one start per trajectory.
    targets : sequence of Target
        Stop at the first crossing of any target; empty means run to
        ``t_max`` and report endpoints as timeouts.
    guards : sequence of (SurfaceSpec, level or None), optional
        Surfaces near which adaptive stepping shrinks ``dt``. Defaults to
        all surfaces of the model, measured by distance.

    Returns
    -------
    BatchResult
        Records in trajectory-index order, bitwise independent of
        ``workers`` and ``chunk``.
    """
    global _JOB
    n = cfg.n_traj
    X0 = np.asarray(x0, dtype=float)
    if X0.ndim == 1:
        X0 = np.repeat(X0[None, :], n, axis=0)
    if X0.shape != (n, model.dim):
        raise ValueError(f"start points have shape {X0.shape}, expected {(n, model.dim)}")
    if guards is None:
        guards = [(s, None) for s in model.surfaces]
    chunk = _Chunk(model, cfg, list(targets), list(guards))
    workers = resolve_workers(cfg.workers)
    size = cfg.chunk
    if workers > 1 and n > 1:
        size = min(size, -(-n // workers))
    bounds = [(lo, min(lo + size, n)) for lo in range(0, n, size)]
    if workers > 1 and len(bounds) > 1:
        _JOB = (chunk, X0)
        try:
            with ProcessPoolExecutor(workers, mp_context=mp.get_context("fork")) as ex:
                parts = list(ex.map(_run_job_chunk, bounds))
        finally:
            _JOB = None
    else:
        parts = [chunk.run(X0[lo:hi], np.arange(lo, hi)) for lo, hi in bounds]
    if parts:
        cols = [np.concatenate([p[k] for p in parts]) for k in range(5)]
    else:
        cols = [np.zeros(0, dtype=np.int8), np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, model.dim)),
                np.zeros(0)]
    return BatchResult(*cols, config=cfg, targets=[tg.describe() for tg in targets])


def run_until_hit(model, x0, targets, cfg, index=0, guards=None):
    """First crossing of one trajectory (stream ``index``).

    Returns
    -------
    HittingEvent
        Outcome ``"Hit"`` or ``"Timeout"``.

    Raises
    ------
    NonFinite
        If the state leaves the model's bounding box.
    """
    if guards is None:
        guards = [(s, None) for s in model.surfaces]
    chunk = _Chunk(model, cfg.replace(n_traj=1), list(targets), list(guards))
    X0 = np.asarray(x0, dtype=float).reshape(1, -1)
    o, t, g, x, z = chunk.run(X0, np.array([index]))
    if o[0] == NONFINITE:
        raise NonFinite(f"trajectory {index} left the bounding box at t = {t[0]:.6g}")
    return HittingEvent(index, OUTCOME_NAMES[int(o[0])], float(t[0]), int(g[0]), x[0].copy(), float(z[0]))


def step(model, X, dt, dW, scheme="heun", eps=0.0):
    """One integration step for states ``X`` with given Wiener increments.

    ``dW`` has ``d`` columns (unperturbed) or ``2 d`` columns, the second
    half driving the perturbation fields. Heun reuses the same increments in
    predictor and corrector.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    d = model.dim
    perturbed = eps > 0 and dW.shape[1] >= 2 * d

    def parts(Y):
        drift = model.drift(Y, eps)
        noise = _noise_sum(model.noise(Y), dW, 0)
        if perturbed:
            noise = noise + _noise_sum(model.noise_tilde(Y), dW, d, eps)
        return drift, noise

    drift, noise = parts(X)
    if scheme == "heun":
        drift1, noise1 = parts(X + drift * dt + noise)
        return X + 0.5 * ((drift + drift1) * dt + (noise + noise1))
    if scheme == "euler":
        return X + (drift + model.strat_correction(X, eps)) * dt + noise
    raise ValueError("scheme must be 'heun' or 'euler'")


def strat_correction(model, x, eps=0.0):
    """Ito-equivalent drift correction at a single point or a batch."""
    x = np.asarray(x, dtype=float)
    out = model.strat_correction(np.atleast_2d(x), eps)
    return out[0] if x.ndim == 1 else out


def run_occupation(model, cfg, x0, burn_in, every, edges, near=(1e-3, 1e-2, 1e-1)):
    """Time-averaged occupation of an ensemble of long trajectories.

    Every trajectory runs with fixed step ``cfg.dt`` for ``cfg.t_max``; after
    ``burn_in`` its state is recorded every ``every`` time units into a
    two-dimensional histogram of the first two coordinates.

    Returns
    -------
    counts : array ``(len(edges[0]) - 1, len(edges[1]) - 1)`` of int
    outside : int
        Samples falling outside the histogram range.
    near_counts : array ``(n_surfaces, len(near))`` of int
        Samples with distance to each surface below each threshold.
    total : int
    """
    n = cfg.n_traj
    X0 = np.asarray(x0, dtype=float)
    if X0.ndim == 1:
        X0 = np.repeat(X0[None, :], n, axis=0)
    ex, ey = (np.asarray(e, dtype=float) for e in edges)
    counts = np.zeros((len(ex) - 1, len(ey) - 1), dtype=np.int64)
    near_counts = np.zeros((len(model.surfaces), len(near)), dtype=np.int64)
    outside = 0
    total = 0
    chunk = _Chunk(model, cfg.replace(adaptive=False), [], [])
    n_steps = int(round(cfg.t_max / cfg.dt))
    burn = int(round(burn_in / cfg.dt))
    stride = max(1, int(round(every / cfg.dt)))
    d = model.dim
    for lo in range(0, n, cfg.chunk):
        hi = min(lo + cfg.chunk, n)
        X = X0[lo:hi].copy()
        keys = stream_keys(cfg.seed, np.arange(lo, hi))
        dt = cfg.dt
        sq = np.sqrt(dt)
        for k in range(n_steps):
            drift, G, Gt = chunk.fields(X)
            dW = normal_block(keys, k, 2 * d, chunk.n_noise) * sq
            noise = _noise_sum(G, dW, 0)
            if Gt:
                noise = noise + _noise_sum(Gt, dW, d, cfg.eps)
            if cfg.scheme == "heun":
                drift1, G1, Gt1 = chunk.fields(X + drift * dt + noise)
                noise1 = _noise_sum(G1, dW, 0)
                if Gt1:
                    noise1 = noise1 + _noise_sum(Gt1, dW, d, cfg.eps)
                X = X + 0.5 * ((drift + drift1) * dt + (noise + noise1))
            else:
                X = X + (drift + model.strat_correction(X, cfg.eps)) * dt + noise
            if not np.all(np.isfinite(X)):
                raise NonFinite("occupation run produced a non-finite state")
            if k + 1 > burn and (k + 1 - burn) % stride == 0:
                h, _, _ = np.histogram2d(X[:, 0], X[:, 1], bins=(ex, ey))
                inside = int(h.sum())
                counts += h.astype(np.int64)
                outside += X.shape[0] - inside
                total += X.shape[0]
                for s_i, s in enumerate(model.surfaces):
                    _, z = polar_coordinates(X, s, angles=False)
                    for t_i, thr in enumerate(near):
                        near_counts[s_i, t_i] += int(np.count_nonzero(z < thr))
    return counts, outside, near_counts, total
