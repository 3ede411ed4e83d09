"""Exit probabilities and exit times of the linear point model against exact oracles.

Three experiments, each writing a CSV with (x, y, yerr) columns plus the
oracle value:

* ``exit_prob_sweep.csv``: two-sided exit frequency over a sweep of start
  levels, unperturbed and perturbed, against the power law;
* ``exit_time_attracting.csv``: mean escape time from an attracting point
  for decreasing eps, with the exact radial mean as the oracle;
* ``exit_time_repelling.csv``: the same for a repelling point.

Usage: python scripts/exit_laws.py [--quick] [--out DIR]
"""

from __future__ import annotations

import argparse
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metalab import meta
from metalab.model import linear_point_model
from metalab.sim import SimConfig


@dataclass
class ExitLawConfig:
    kappa1: float = 0.1
    kappa2: float = 0.4
    zetas: tuple = (0.12, 0.16, 0.2, 0.25, 0.3, 0.35)
    eps_prob: tuple = (0.0, 0.01)
    n_prob: int = 10_000
    dt_prob: float = 1e-4
    kappa: float = 0.4
    eps_list: tuple = (0.1, 0.05, 0.025, 0.0125)
    n_time: int = 2000
    perturbation: float = 0.1
    seed: int = 0
    out: Path = field(default_factory=lambda: Path("runs/exit_laws"))

    def quick(self):
        self.n_prob, self.n_time, self.dt_prob = 1000, 300, 1e-3
        return self


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows([[repr(float(v)) if isinstance(v, float) else v for v in r] for r in rows])


def exit_prob_sweep(cfg):
    model = linear_point_model(perturbation=cfg.perturbation)
    rows = []
    for eps in cfg.eps_prob:
        sim = SimConfig(dt=cfg.dt_prob, n_traj=cfg.n_prob, adaptive=True, seed=cfg.seed, t_max=50.0)
        for z in cfg.zetas:
            est = meta.estimate_exit_prob(model, 0, z, cfg.kappa1, cfg.kappa2, eps, sim)
            # the perturbed radius has an exact scale function too
            exact = meta.radial_exit_probability(z, cfg.kappa1, cfg.kappa2, -0.5, 1.0, cfg.perturbation * eps)
            rows.append([eps, z, est.p_hat, est.stderr, est.predicted, exact])
            print(f"eps {eps:<6g} zeta {z:<5g} p = {est.p_hat:.4f} +/- {est.stderr:.4f}  "
                  f"power law {est.predicted:.4f}  exact radial {exact:.4f}")
    _write(cfg.out / "exit_prob_sweep.csv", ["eps", "zeta", "p_hat", "stderr", "power_law", "radial_exact"], rows)


def exit_time_scaling(cfg, a, r, dt, t_max, name):
    model = linear_point_model(a=a, perturbation=cfg.perturbation)
    sim = SimConfig(dt=dt, n_traj=cfg.n_time, adaptive=True, seed=cfg.seed, t_max=t_max)
    st = meta.estimate_exit_time_scaling(model, 0, cfg.kappa, list(cfg.eps_list), sim, r=r)
    rows = []
    for e, m, se, z0 in zip(st.eps, st.mean, st.stderr, st.start_level):
        exact = meta.radial_mean_exit_time(z0, cfg.kappa, a, 1.0, cfg.perturbation * e)
        rows.append([e, math.log(1 / e), m, se, exact])
        print(f"{name}: eps {e:<7g} mean {m:9.3f} +/- {se:.3f}  exact {exact:9.3f}")
    print(f"{name}: fit {st.fit}, slope {st.slope:.4f} +/- {st.slope_stderr:.4f}, R^2 {st.r_squared:.4f}, "
          f"gamma {st.gamma:.4f}")
    _write(cfg.out / f"exit_time_{name}.csv", ["eps", "log_inv_eps", "mean", "stderr", "radial_exact"], rows)
    return st


def run(cfg: ExitLawConfig):
    cfg.out.mkdir(parents=True, exist_ok=True)
    exit_prob_sweep(cfg)
    exit_time_scaling(cfg, -0.5, 0.5, 1e-2, 20_000.0, "attracting")
    exit_time_scaling(cfg, 0.5, 1.0, 1e-3, 200.0, "repelling")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="small sample sizes for a smoke run")
    ap.add_argument("--out", type=Path, default=ExitLawConfig().out)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = ExitLawConfig(out=args.out, seed=args.seed)
    run(cfg.quick() if args.quick else cfg)
