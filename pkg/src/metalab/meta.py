"""Experiments built on the spectral solver and the trajectory engine.

Exit probabilities between level sets, exit-time scaling, the transition
matrix between attracting surfaces, the embedded chain and its hitting
distributions, endpoint laws at chosen time scales, the long-run occupation
of the unperturbed process and Monte Carlo solutions of the Cauchy problem.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate, linalg

from .errors import AbsorptionFailure, NonFinite, TimeoutDominated, TooManyTimeouts
from .geometry import AdaptedRadius
from .rng import stream_keys, uniforms
from .sim import HIT, NONFINITE, TIMEOUT, SimConfig, Target, run_batch, run_occupation
from .spectral import solve_model

KAPPA_PROBE = 1e-2
KAPPA_REPORT = 0.05
EXIT_PROB_TIMEOUT_LIMIT = 0.01
EXIT_TIME_TIMEOUT_LIMIT = 0.10
_START_SALT = 0x51A7


# ----------------------------------------------------------------------------
# closed-form oracles


def exit_probability_law(zeta, kappa1, kappa2, gamma):
    """Probability of reaching ``kappa2`` before ``kappa1`` from ``zeta``.

    The harmonic function of the radial part is ``zeta**gamma`` near the
    surface, whatever the sign of ``gamma``.
    """
    lo, hi, z = (float(v) ** gamma for v in (kappa1, kappa2, zeta))
    return (z - lo) / (hi - lo)


def _radial_parts(a, sigma, noise):
    """Exponent ``p = a / sigma^2`` and additive variance ``c = noise^2``."""
    return a / sigma ** 2, noise ** 2


def radial_scale_density(y, a, sigma, noise):
    """Derivative of the scale function of the radius of a perturbed linear model.

    The radius of ``dX = a X dt + sigma X o dW_1 + rho J X o dW_2 + noise dB``
    in the plane has generator ``(sigma^2 r^2 + c)/2 f'' +
    ((a + sigma^2/2) r + c/(2 r)) f'`` with ``c = noise^2``; its scale
    density is ``r^-1 (sigma^2 r^2 + c)^(-a/sigma^2)``.
    """
    p, c = _radial_parts(a, sigma, noise)
    return (sigma ** 2 * y * y + c) ** (-p) / y


def radial_exit_probability(r0, r1, r2, a, sigma, noise=0.0):
    """Probability that the radius reaches ``r2`` before ``r1`` from ``r0``."""
    if noise == 0.0:
        g = -2.0 * a / sigma ** 2
        return exit_probability_law(r0, r1, r2, g)

    def scale(lo, hi):
        return integrate.quad(radial_scale_density, lo, hi, args=(a, sigma, noise), epsabs=0, epsrel=1e-12,
                              limit=200)[0]

    return scale(r1, r0) / scale(r1, r2)


def radial_mean_exit_time(r0, kappa, a, sigma, noise):
    """Mean time for the radius to climb from ``r0`` to ``kappa``.

    The origin is entrance-inaccessible, so the mean is
    ``int_{r0}^{kappa} (1 - (1 + sigma^2 y^2 / c)^(-p)) / (sigma^2 p y) dy``
    with ``p = a / sigma^2`` and ``c = noise^2``; ``p = 0`` takes the
    logarithmic limit. Infinite when ``noise = 0`` and ``a < 0``.
    """
    p, c = _radial_parts(a, sigma, noise)
    s2 = sigma ** 2
    if c == 0.0:
        if p < 0:
            return math.inf
        return math.log(kappa / r0) / a if a > 0 else math.inf

    def integrand(y):
        w = math.log1p(s2 * y * y / c)
        if abs(p) < 1e-12:
            return w / (s2 * y)
        return -math.expm1(-p * w) / (s2 * p * y)

    return integrate.quad(integrand, r0, kappa, epsabs=0, epsrel=1e-11, limit=200)[0]


def gbm_log_moment(z0, a, sigma, t):
    """``E z_t`` for ``d log z = a dt + sigma dB``."""
    return z0 * math.exp((a + 0.5 * sigma ** 2) * t)


# ----------------------------------------------------------------------------
# shared helpers


def level_functions(model, solutions=None):
    """Adapted-radius evaluators for every surface of ``model``."""
    sols = solutions if solutions is not None else solve_model(model)
    return [AdaptedRadius(s, sol) for s, sol in zip(model.surfaces, sols)]


def attracting_surfaces(model, solutions=None):
    """Ids of surfaces with positive exponent, largest exponent first."""
    sols = solutions if solutions is not None else solve_model(model)
    ids = [s.surface_id for s in sols if s.gamma > 0]
    return sorted(ids, key=lambda k: -sols[k].gamma)


def sample_angles(surface, n, seed):
    """Angle coordinates uniform on the sphere bundle of ``surface``."""
    keys = stream_keys(seed ^ _START_SALT, np.arange(n))
    u = uniforms(keys, 0)
    if surface.kind == "point" and surface.dim == 2:
        return (2.0 * np.pi * u)[:, None]
    v = uniforms(keys, 1)
    if surface.kind == "point":
        return np.stack([np.arccos(1.0 - 2.0 * u), 2.0 * np.pi * v], axis=1)
    return np.stack([2.0 * np.pi * u, 2.0 * np.pi * v], axis=1)


def _guards(model, levels):
    return [(s, lv) for s, lv in zip(model.surfaces, levels)]


def _metadata(cfg, **extra):
    out = {"n_traj": cfg.n_traj, "dt": cfg.dt, "t_max": cfg.t_max, "seed": cfg.seed, "scheme": cfg.scheme,
           "adaptive": cfg.adaptive}
    out.update(extra)
    return out


def _record(record, label, result):
    """Append a raw batch to ``record`` when the caller asked for one."""
    if record is not None:
        record.append((label, result))


def _binomial_se(p, n):
    return math.sqrt(max(p * (1.0 - p), 0.0) / n) if n else math.nan


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


class _Exportable:
    def to_dict(self):
        return _jsonable(asdict(self))

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


# ----------------------------------------------------------------------------
# exit probabilities


@dataclass
class ExitProbEstimate(_Exportable):
    """Two-sided exit frequency against the power-law prediction."""

    surface_id: int
    kappa1: float
    kappa2: float
    zeta: float
    eps: float
    n_traj: int
    p_hat: float
    stderr: float
    predicted: float
    gamma: float
    n_timeout: int
    metadata: dict = field(default_factory=dict)

    @property
    def deviation(self):
        """``|p_hat - predicted|`` in standard errors (inf when stderr is 0)."""
        d = abs(self.p_hat - self.predicted)
        if self.stderr > 0:
            return d / self.stderr
        return 0.0 if d == 0 else math.inf


def estimate_exit_prob(model, surface_id, zeta, kappa1, kappa2, eps, cfg, r=None, solutions=None, record=None):
    """Frequency of reaching ``Gamma_kappa2`` before ``Gamma_kappa1`` from ``Gamma_zeta``.

    Starting points lie on the level ``zeta`` with angle coordinates drawn
    uniformly; ``cfg.eps`` is overridden by ``eps``.

    Raises
    ------
    ValueError
        If ``zeta`` is outside ``[kappa1, kappa2]``, ``kappa2`` exceeds the
        chart radius, or ``kappa1 < r * eps`` for a given ``r``.
    TooManyTimeouts
        If more than 1% of the trajectories reach ``t_max``.
    """
    sols = solutions if solutions is not None else solve_model(model)
    surface = model.surfaces[surface_id]
    if not 0 < kappa1 < kappa2:
        raise ValueError("need 0 < kappa1 < kappa2")
    if not kappa1 <= zeta <= kappa2:
        raise ValueError(f"start level {zeta} outside [{kappa1}, {kappa2}]")
    if kappa2 > surface.chart_radius:
        raise ValueError(f"kappa2 = {kappa2} exceeds the chart radius {surface.chart_radius}")
    if r is not None and eps > 0 and kappa1 < r * eps * (1 - 1e-12):
        raise ValueError(f"kappa1 = {kappa1} is below r * eps = {r * eps}")
    cfg = cfg.replace(eps=eps)
    gamma = sols[surface_id].gamma
    predicted = exit_probability_law(zeta, kappa1, kappa2, gamma)
    meta = _metadata(cfg, r=r)
    if zeta in (kappa1, kappa2):
        # started on a target: the exit is immediate
        p = 1.0 if zeta == kappa2 else 0.0
        return ExitProbEstimate(surface_id, kappa1, kappa2, zeta, eps, cfg.n_traj, p, 0.0, predicted, gamma, 0, meta)
    levels = level_functions(model, sols)
    lv = levels[surface_id]
    x0 = lv.start_points(sample_angles(surface, cfg.n_traj, cfg.seed), zeta)
    targets = [Target(lv, kappa1, surface_id), Target(lv, kappa2, surface_id)]
    res = run_batch(model, cfg, x0, targets, guards=_guards(model, levels))
    _record(record, "exit_prob", res)
    n_to = res.n_timeout + res.n_nonfinite
    if n_to > EXIT_PROB_TIMEOUT_LIMIT * cfg.n_traj:
        raise TooManyTimeouts(f"{n_to} of {cfg.n_traj} trajectories did not exit by t = {cfg.t_max}")
    done = res.outcome == HIT
    n = int(done.sum())
    p = float(np.mean(res.target[done] == 1)) if n else math.nan
    return ExitProbEstimate(surface_id, kappa1, kappa2, zeta, eps, n, p, _binomial_se(p, n), predicted, gamma, n_to,
                            meta)


# ----------------------------------------------------------------------------
# exit times


@dataclass
class ExitTimeStats(_Exportable):
    """Mean exit times per perturbation size and the fitted scaling.

    ``fit`` is ``"power"`` for attracting surfaces (``slope`` of
    ``log E tau`` against ``log(1/eps)``) and ``"log"`` for repelling ones
    (``slope`` of ``E tau`` against ``log(1/eps)``; ``r_squared`` measures
    how affine the dependence is).
    """

    surface_id: int
    kappa: float
    eps: list
    mean: list
    stderr: list
    n_hit: list
    n_timeout: list
    start_level: list
    gamma: float
    fit: str
    slope: float
    slope_stderr: float
    intercept: float
    r_squared: float
    metadata: dict = field(default_factory=dict)

    @property
    def slope_ci(self):
        return (self.slope - 1.96 * self.slope_stderr, self.slope + 1.96 * self.slope_stderr)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["eps", "log_inv_eps", "mean_exit_time", "stderr", "n_hit", "n_timeout", "start_level"])
            for row in zip(self.eps, self.mean, self.stderr, self.n_hit, self.n_timeout, self.start_level):
                e = row[0]
                wr.writerow([repr(e), repr(math.log(1 / e))] + [repr(v) for v in row[1:]])


def _weighted_line(x, y, se):
    """Weighted least squares ``y = b0 + b1 x``; returns slope, its stderr, intercept, R^2."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    se = np.asarray(se, float)
    w = 1.0 / np.maximum(se, 1e-300) ** 2 if np.all(se > 0) else np.ones_like(x)
    X = np.stack([np.ones_like(x), x], axis=1)
    A = X.T @ (w[:, None] * X)
    coef = np.linalg.solve(A, X.T @ (w * y))
    cov = np.linalg.inv(A)
    resid = y - X @ coef
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    r2 = 1.0 - float(np.sum(w * resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    # inflate by the reduced chi-square when the scatter exceeds the stated errors
    dof = max(len(x) - 2, 1)
    chi2 = float(np.sum(w * resid ** 2)) / dof
    return float(coef[1]), float(math.sqrt(cov[1, 1] * max(chi2, 1.0))), float(coef[0]), r2


def estimate_exit_time_scaling(model, surface_id, kappa, eps_list, cfg, r=0.5, start_fraction=None,
                               solutions=None, record=None):
    """Mean time to reach ``Gamma_kappa`` from deep inside, across ``eps``.

    Trajectories start on ``Gamma_{start_fraction * r * eps}``; the default
    fraction is 1/2 for attracting surfaces (the middle of the
    ``r eps`` neighbourhood) and 1 for repelling ones. All levels share the
    seed, so their noise paths are common random numbers.

    Raises
    ------
    ValueError
        Fewer than four ``eps`` values, not strictly decreasing, or a start
        level not below ``kappa``.
    TimeoutDominated
        If more than 10% of the trajectories at some level time out.
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 4:
        raise ValueError("need at least four eps values")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])) or eps_list[-1] <= 0:
        raise ValueError("eps values must be positive and strictly decreasing")
    sols = solutions if solutions is not None else solve_model(model)
    gamma = sols[surface_id].gamma
    if start_fraction is None:
        start_fraction = 0.5 if gamma > 0 else 1.0
    levels = level_functions(model, sols)
    lv = levels[surface_id]
    surface = model.surfaces[surface_id]
    if kappa > surface.chart_radius:
        raise ValueError(f"kappa = {kappa} exceeds the chart radius {surface.chart_radius}")
    Y = sample_angles(surface, cfg.n_traj, cfg.seed)
    means, ses, hits, tos, starts = [], [], [], [], []
    for e in eps_list:
        z0 = start_fraction * r * e
        if not z0 < kappa:
            raise ValueError(f"start level {z0} is not below kappa = {kappa}")
        c = cfg.replace(eps=e)
        res = run_batch(model, c, lv.start_points(Y, z0), [Target(lv, kappa, surface_id)],
                        guards=_guards(model, levels))
        _record(record, f"exit_time_eps_{e:g}", res)
        bad = res.n_timeout + res.n_nonfinite
        if bad > EXIT_TIME_TIMEOUT_LIMIT * c.n_traj:
            raise TimeoutDominated(f"eps = {e}: {bad} of {c.n_traj} trajectories hit t_max = {c.t_max}")
        t = res.t[res.outcome == HIT]
        means.append(float(t.mean()))
        ses.append(float(t.std(ddof=1) / math.sqrt(len(t))) if len(t) > 1 else math.nan)
        hits.append(int(len(t)))
        tos.append(int(bad))
        starts.append(z0)
    xs = np.log(1.0 / np.array(eps_list))
    if gamma > 0:
        fit = "power"
        ys = np.log(means)
        se = np.array(ses) / np.array(means)
    else:
        fit = "log"
        ys = np.array(means)
        se = np.array(ses)
    slope, slope_se, icpt, r2 = _weighted_line(xs, ys, se)
    return ExitTimeStats(surface_id, kappa, eps_list, means, ses, hits, tos, starts, gamma, fit, slope, slope_se,
                         icpt, r2, _metadata(cfg, r=r, start_fraction=start_fraction))


# ----------------------------------------------------------------------------
# initial weights over attracting surfaces


@dataclass
class PxEstimate(_Exportable):
    """Which attracting surface a trajectory from ``x`` settles near first."""

    x: list
    surfaces: list
    weights: list
    stderr: list
    kappa: float
    eps: float
    n_traj: int
    n_timeout: int
    sensitivity: float | None = None
    metadata: dict = field(default_factory=dict)


def estimate_p_x(model, x, eps, cfg, kappa_probe=KAPPA_PROBE, r=2.0, sensitivity=False, solutions=None,
                 record=None):
    """Weights ``p^x_k`` of first entry into small neighbourhoods of attracting surfaces.

    The neighbourhood of surface ``k`` is the sub-level set ``zeta_k <=
    kappa``, with ``kappa = kappa_probe`` for ``eps = 0`` and ``r * eps``
    otherwise. With ``sensitivity`` the estimate is repeated at twice the
    radius and the largest weight change is reported.

    Raises
    ------
    ValueError
        If the model has no attracting surface.
    TooManyTimeouts
        If more than 1% of the trajectories enter no neighbourhood.
    """
    sols = solutions if solutions is not None else solve_model(model)
    ids = attracting_surfaces(model, sols)
    if not ids:
        raise ValueError("the model has no attracting surface")
    kappa = kappa_probe if eps == 0 else r * eps
    levels = level_functions(model, sols)
    cfg = cfg.replace(eps=eps)

    def once(k):
        targets = [Target(levels[i], k, i, mode="below") for i in ids]
        res = run_batch(model, cfg, np.asarray(x, float), targets, guards=_guards(model, levels))
        _record(record, f"p_x_kappa_{k:g}", res)
        bad = res.n_timeout + res.n_nonfinite
        if bad > EXIT_PROB_TIMEOUT_LIMIT * cfg.n_traj:
            raise TooManyTimeouts(f"{bad} of {cfg.n_traj} trajectories reached no attracting surface by "
                                  f"t = {cfg.t_max}")
        hit = res.target[res.outcome == HIT]
        n = len(hit)
        w = np.array([np.mean(hit == j) for j in range(len(ids))]) if n else np.full(len(ids), math.nan)
        return w, n, bad

    w, n, bad = once(kappa)
    sens = None
    if sensitivity:
        w2, _, _ = once(2.0 * kappa)
        sens = float(np.max(np.abs(w2 - w)))
    return PxEstimate(list(np.asarray(x, float)), ids, w.tolist(), [_binomial_se(p, n) for p in w], kappa, eps, n,
                      bad, sens, _metadata(cfg, kappa_probe=kappa_probe, r=r))


# ----------------------------------------------------------------------------
# transition matrix between attracting surfaces


@dataclass
class QMatrixEstimate(_Exportable):
    """Transition frequencies between attracting surfaces at two perturbation sizes.

    ``q`` and ``stderr`` belong to ``eps``; ``q_half`` and ``stderr_half`` to
    ``eps / 2``. ``drift`` is the largest entrywise difference; ``converged``
    holds when every difference is below its combined 3-sigma plus 0.02.
    """

    surfaces: list
    eps: float
    r: float
    q: np.ndarray
    stderr: np.ndarray
    q_half: np.ndarray | None
    stderr_half: np.ndarray | None
    drift: float
    converged: bool
    n_timeout: list
    metadata: dict = field(default_factory=dict)

    def row_sums(self):
        return self.q.sum(axis=1)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["from", "to", "q", "stderr", "q_half_eps", "stderr_half_eps"])
            m = len(self.surfaces)
            for i in range(m):
                for j in range(m):
                    if i == j:
                        continue
                    half = [] if self.q_half is None else [repr(float(self.q_half[i, j])),
                                                          repr(float(self.stderr_half[i, j]))]
                    wr.writerow([self.surfaces[i], self.surfaces[j], repr(float(self.q[i, j])),
                                 repr(float(self.stderr[i, j]))] + half)


def _qmatrix_once(model, ids, levels, eps, r, cfg, record=None):
    m = len(ids)
    q = np.zeros((m, m))
    se = np.zeros((m, m))
    tos = []
    cfg = cfg.replace(eps=eps)
    k = r * eps
    for a, i in enumerate(ids):
        surface = model.surfaces[i]
        if k >= surface.chart_radius / 10:
            raise ValueError(f"r * eps = {k} is not below a tenth of the chart radius of surface {i}")
        others = [j for j in ids if j != i]
        targets = [Target(levels[j], k, j, mode="below") for j in others]
        # decorrelate rows by giving each its own seed
        c = cfg.replace(seed=cfg.seed + 7919 * a)
        x0 = levels[i].start_points(sample_angles(surface, c.n_traj, c.seed), k)
        res = run_batch(model, c, x0, targets, guards=_guards(model, levels))
        _record(record, f"qmatrix_eps_{eps:g}_from_{i}", res)
        bad = res.n_timeout + res.n_nonfinite
        if bad > EXIT_PROB_TIMEOUT_LIMIT * c.n_traj:
            raise TooManyTimeouts(f"surface {i}: {bad} of {c.n_traj} trajectories found no other surface by "
                                  f"t = {c.t_max}")
        hit = res.target[res.outcome == HIT]
        n = len(hit)
        for b, j in enumerate(others):
            col = ids.index(j)
            p = float(np.mean(hit == b)) if n else math.nan
            q[a, col] = p
            se[a, col] = _binomial_se(p, n)
        tos.append(int(bad))
    return q, se, tos


def estimate_qmatrix(model, eps, r, cfg, halving=True, solutions=None, record=None):
    """Estimate ``q_ij`` by running the perturbed process between neighbourhoods.

    For each attracting surface ``i`` trajectories start on
    ``Gamma^i_{r eps}`` and stop at the first entry into ``zeta_j <= r eps``
    for some other attracting surface ``j``. With ``halving`` the estimate
    is repeated at ``eps / 2`` as a convergence diagnostic.

    Raises
    ------
    ValueError
        Fewer than two attracting surfaces, or ``r eps`` not small against
        the chart radius.
    TooManyTimeouts
    """
    sols = solutions if solutions is not None else solve_model(model)
    ids = attracting_surfaces(model, sols)
    if len(ids) < 2:
        raise ValueError("need at least two attracting surfaces")
    levels = level_functions(model, sols)
    q, se, tos = _qmatrix_once(model, ids, levels, eps, r, cfg, record)
    qh = seh = None
    drift, ok = 0.0, True
    if halving:
        qh, seh, tos_h = _qmatrix_once(model, ids, levels, eps / 2, r, cfg, record)
        tos = tos + tos_h
        diff = np.abs(q - qh)
        drift = float(diff.max())
        ok = bool(np.all(diff <= 3.0 * np.hypot(se, seh) + 0.02))
    return QMatrixEstimate(ids, eps, r, q, se, qh, seh, drift, ok, tos, _metadata(cfg, r=r))


# ----------------------------------------------------------------------------
# embedded chain


@dataclass
class ChainSpec(_Exportable):
    """Exponents, transition matrix and initial weights of the embedded chain.

    States are the attracting surfaces ordered by decreasing exponent.
    """

    gammas: np.ndarray
    q: np.ndarray
    p0: np.ndarray

    def __post_init__(self):
        self.gammas = np.asarray(self.gammas, dtype=float)
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        self.p0 = np.asarray(self.p0, dtype=float)
        m = len(self.gammas)
        if m < 1:
            raise ValueError("the chain needs at least one state")
        if self.q.shape != (m, m) or self.p0.shape != (m,):
            raise ValueError(f"shapes disagree: {m} exponents, q {self.q.shape}, p0 {self.p0.shape}")
        if np.any(np.diff(self.gammas) > 0):
            raise ValueError("exponents must be sorted in decreasing order")
        if np.any(self.gammas <= 0):
            raise ValueError("exponents of chain states must be positive")
        if np.any(self.p0 < 0) or abs(self.p0.sum() - 1.0) > 1e-12:
            raise ValueError("initial weights must be nonnegative and sum to 1")
        if np.any(self.q < 0):
            raise ValueError("transition probabilities must be nonnegative")

    @property
    def size(self):
        return len(self.gammas)


def chain_hitting_distribution(chain, l):
    """Law of the chain at its first visit to the ``l`` leading states.

    First-step analysis: with ``T`` the trailing (transient) states,
    ``B = (I - Q_TT)^-1 Q_TA`` and the result is ``p0_A + p0_T B``.

    Raises
    ------
    ValueError
        If ``l`` is not in ``1 .. size``.
    AbsorptionFailure
        If ``I - Q_TT`` is singular to working precision.
    """
    m = chain.size
    if not 1 <= l <= m:
        raise ValueError(f"l must lie in 1..{m}")
    if l == m:
        return chain.p0.copy()
    A = slice(0, l)
    T = slice(l, m)
    K = np.eye(m - l) - chain.q[T, T]
    with warnings.catch_warnings():
        # singularity is detected and reported below
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(K, check_finite=True)
    diag = np.abs(np.diag(lu))
    if diag.min() <= 1e3 * np.finfo(float).eps * max(diag.max(), 1.0):
        raise AbsorptionFailure("transient block is singular; some states never reach the leading ones")
    B = linalg.lu_solve((lu, piv), chain.q[T, A])
    return chain.p0[A] + chain.p0[T] @ B


def simulate_chain(chain, l, n, seed=0, max_steps=100_000):
    """Monte Carlo frequencies of the state first reached among the ``l`` leading ones."""
    rng = np.random.default_rng(seed)
    m = chain.size
    state = rng.choice(m, size=n, p=chain.p0)
    P = chain.q / chain.q.sum(axis=1, keepdims=True)
    cum = np.cumsum(P, axis=1)
    active = state >= l
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        u = rng.random(idx.size)
        nxt = (u[:, None] > cum[state[idx]]).sum(axis=1)
        state[idx] = np.minimum(nxt, m - 1)
        active[idx] = state[idx] >= l
    else:
        raise AbsorptionFailure("chain simulation did not absorb")
    return np.bincount(state, minlength=l)[:l] / n


# ----------------------------------------------------------------------------
# endpoint laws


@dataclass
class OccupationHistogram(_Exportable):
    """Masses of a two-dimensional binning of the first two coordinates.

    ``removed`` is the mass assigned to surface neighbourhoods before
    binning (zero when nothing was removed) and ``outside`` the mass beyond
    the bins, so ``masses.sum() + outside + removed == 1``.
    """

    edges_x: np.ndarray
    edges_y: np.ndarray
    masses: np.ndarray
    outside: float
    total: int
    removed: float = 0.0
    near_surface: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["x_lo", "x_hi", "y_lo", "y_hi", "mass"])
            for i in range(len(self.edges_x) - 1):
                for j in range(len(self.edges_y) - 1):
                    wr.writerow([repr(float(self.edges_x[i])), repr(float(self.edges_x[i + 1])),
                                 repr(float(self.edges_y[j])), repr(float(self.edges_y[j + 1])),
                                 repr(float(self.masses[i, j]))])
            wr.writerow(["outside", "", "", "", repr(float(self.outside))])


def tv_distance(h1, h2):
    """Total-variation distance between two histograms on the same bins."""
    if h1.masses.shape != h2.masses.shape or not (np.allclose(h1.edges_x, h2.edges_x)
                                                   and np.allclose(h1.edges_y, h2.edges_y)):
        raise ValueError("histograms use different bins")
    return 0.5 * (float(np.abs(h1.masses - h2.masses).sum()) + abs(h1.outside - h2.outside)
                  + abs(h1.removed - h2.removed))


def default_edges(model, bins=20, extent=None):
    """Square bin edges covering ``[-extent, extent]^2``; the default is twice the confinement radius."""
    if extent is None:
        extent = 2.0 * model.confinement.radius if model.confinement is not None else 2.0
    e = np.linspace(-extent, extent, bins + 1)
    return e, e.copy()


def _histogram(points, edges, total_count=None, removed=0.0):
    ex, ey = edges
    h, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=(ex, ey))
    n = total_count if total_count is not None else len(points)
    masses = h / n
    outside = (len(points) - h.sum()) / n
    return OccupationHistogram(ex, ey, masses, float(outside), int(n), float(removed))


@dataclass
class MetastableResult(_Exportable):
    """Endpoint law at one time: surface weights plus the binned remainder."""

    t: float
    eps: float
    surfaces: list
    weights: list
    stderr: list
    kappa_report: float
    histogram: OccupationHistogram
    n_traj: int
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["surface_id", "weight", "stderr"])
            for s, w, e in zip(self.surfaces, self.weights, self.stderr):
                wr.writerow([s, repr(float(w)), repr(float(e))])
            wr.writerow(["remainder", repr(float(1.0 - sum(self.weights))), ""])


def metastable_distribution(model, x, eps, t, cfg, kappa_report=KAPPA_REPORT, bins=20, extent=None,
                            solutions=None, record=None):
    """Law of ``X^eps_t`` from ``x`` over ``cfg.n_traj`` runs.

    Endpoints with adapted radius below ``kappa_report`` of an attracting
    surface count towards that surface; the rest are binned.

    Raises
    ------
    NonFinite
        If any trajectory leaves the bounding box.
    """
    sols = solutions if solutions is not None else solve_model(model)
    ids = attracting_surfaces(model, sols)
    levels = level_functions(model, sols)
    cfg = cfg.replace(eps=eps, t_max=t)
    res = run_batch(model, cfg, np.asarray(x, float), (), guards=_guards(model, levels))
    _record(record, f"endpoints_t_{t:g}", res)
    if res.n_nonfinite:
        raise NonFinite(f"{res.n_nonfinite} trajectories left the bounding box")
    X = res.x
    n = len(X)
    claimed = np.full(n, -1)
    for k, i in enumerate(ids):
        near = (levels[i](X) < kappa_report) & (claimed < 0)
        claimed[near] = k
    weights = [float(np.mean(claimed == k)) for k in range(len(ids))]
    rest = X[claimed < 0]
    hist = _histogram(rest, default_edges(model, bins, extent), total_count=n, removed=float(sum(weights)))
    return MetastableResult(t, eps, ids, weights, [_binomial_se(w, n) for w in weights], kappa_report, hist, n,
                            _metadata(cfg, x=list(np.asarray(x, float))))


def window_times(gammas, eps):
    """Representative times ``eps^{-(gamma_{l+1} + gamma_l)/2}`` of each window, ``gamma_{m+1} = 0``."""
    g = list(gammas) + [0.0]
    return [eps ** (-(g[l + 1] + g[l]) / 2.0) for l in range(len(gammas))]


@dataclass
class MetastableProfile(_Exportable):
    """Predicted and simulated surface weights in each time-scale window."""

    eps: float
    gammas: list
    windows: list

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["l", "t", "surface_id", "predicted", "empirical", "stderr"])
            for w in self.windows:
                for s, p, e, se in zip(w["surfaces"], w["predicted"], w["empirical"], w["stderr"]):
                    wr.writerow([w["l"], repr(w["t"]), s, repr(p), repr(e), repr(se)])


def metastable_profile(model, x, eps, chain, cfg, kappa_report=KAPPA_REPORT, solutions=None):
    """Simulated endpoint weights at the representative time of every window.

    ``chain`` supplies the prediction ``p^{x,l}``; its states must be the
    attracting surfaces in decreasing-exponent order.
    """
    sols = solutions if solutions is not None else solve_model(model)
    ids = attracting_surfaces(model, sols)
    if len(ids) != chain.size:
        raise ValueError("chain size does not match the number of attracting surfaces")
    windows = []
    for l, t in enumerate(window_times(chain.gammas, eps), start=1):
        pred = chain_hitting_distribution(chain, l)
        res = metastable_distribution(model, x, eps, t, cfg, kappa_report, solutions=sols)
        windows.append({"l": l, "t": t, "surfaces": ids, "predicted": list(pred) + [0.0] * (len(ids) - l),
                        "empirical": res.weights, "stderr": res.stderr})
    return MetastableProfile(eps, list(chain.gammas), windows)


def unperturbed_invariant_measure(model, cfg, x0=None, burn_in=None, every=None, bins=20, extent=None,
                                  near=(1e-3, 1e-2, 1e-1), solutions=None):
    """Long-run occupation of the unperturbed process.

    An ensemble of ``cfg.n_traj`` chains runs for ``cfg.t_max`` from ``x0``
    (default: half the confinement radius along the first axis); states
    after ``burn_in`` are sampled every ``every`` time units.

    Raises
    ------
    ValueError
        If some surface is attracting or the model has no confinement.
    """
    sols = solutions if solutions is not None else solve_model(model)
    if any(s.gamma > 0 for s in sols):
        raise ValueError("the long-run occupation is only defined when every surface is repelling")
    if model.confinement is None:
        raise ValueError("the model needs confinement")
    if x0 is None:
        x0 = np.zeros(model.dim)
        x0[0] = 0.5 * model.confinement.radius
    burn_in = 0.2 * cfg.t_max if burn_in is None else burn_in
    every = max(cfg.dt, 0.1) if every is None else every
    edges = default_edges(model, bins, extent)
    counts, outside, near_counts, total = run_occupation(model, cfg.replace(eps=0.0), x0, burn_in, every, edges, near)
    if total == 0:
        raise ValueError("no samples after burn-in; increase t_max")
    near_mass = {f"surface_{s}": {repr(thr): near_counts[s, k] / total for k, thr in enumerate(near)}
                 for s in range(len(model.surfaces))}
    return OccupationHistogram(edges[0], edges[1], counts / total, outside / total, total, 0.0, near_mass)


# ----------------------------------------------------------------------------
# Cauchy problem


@dataclass
class CauchyEstimate(_Exportable):
    """Monte Carlo value of ``u(t, x) = E g(X^eps_t)``."""

    x: list
    t: float
    eps: float
    value: float
    stderr: float
    n_traj: int
    metadata: dict = field(default_factory=dict)


def feynman_kac(model, g, x, eps, t, cfg, solutions=None, record=None):
    """Average of ``g`` over endpoints of ``cfg.n_traj`` runs of length ``t``.

    Parameters
    ----------
    g : callable
        Maps ``(n, d)`` points to ``(n,)`` values, e.g. an
        :class:`~metalab.expr.Expression`.

    Raises
    ------
    NonFinite
        If a trajectory or ``g`` produces a non-finite value.
    """
    levels = level_functions(model, solutions)
    c = cfg.replace(eps=eps, t_max=t)
    res = run_batch(model, c, np.asarray(x, float), (), guards=_guards(model, levels))
    _record(record, "endpoints", res)
    if res.n_nonfinite:
        raise NonFinite(f"{res.n_nonfinite} trajectories left the bounding box")
    vals = np.asarray(g(res.x), dtype=float)
    if vals.shape == ():
        vals = np.full(len(res.x), float(vals))
    if not np.all(np.isfinite(vals)):
        raise NonFinite("g is not finite at some endpoint")
    n = len(vals)
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return CauchyEstimate(list(np.asarray(x, float)), t, eps, float(vals.mean()), se, n, _metadata(c))


__all__ = [
    "HIT", "TIMEOUT", "NONFINITE", "KAPPA_PROBE", "KAPPA_REPORT", "SimConfig",
    "exit_probability_law", "radial_exit_probability", "radial_mean_exit_time", "radial_scale_density",
    "gbm_log_moment", "level_functions", "attracting_surfaces", "sample_angles",
    "ExitProbEstimate", "estimate_exit_prob", "ExitTimeStats", "estimate_exit_time_scaling",
    "PxEstimate", "estimate_p_x", "QMatrixEstimate", "estimate_qmatrix", "ChainSpec",
    "chain_hitting_distribution", "simulate_chain", "OccupationHistogram", "tv_distance", "default_edges",
    "MetastableResult", "metastable_distribution", "window_times", "MetastableProfile", "metastable_profile",
    "unperturbed_invariant_measure", "CauchyEstimate", "feynman_kac",
]
