"""Idle-step counts, ISR, and the ISR elbow used to pick l."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import posterior_step
from .schedule import Schedule


@dataclass
class IdleStats:
    schedule: str
    num_steps: int
    seq_len: int
    length: int
    eta_analytic: float
    eta_prime_analytic: float
    isr: float
    eta_simulated_mean: float | None = None
    eta_simulated_var: float | None = None
    runs: int = 0

    @property
    def stderr(self) -> float | None:
        if self.runs < 2 or self.eta_simulated_var is None:
            return None
        return math.sqrt(self.eta_simulated_var / self.runs)


def step_reveal_mass(sch: Schedule, T: int) -> np.ndarray:
    """alpha_{1-(k+1)/T} - alpha_{1-k/T} for k = 0..T-1."""
    k = np.arange(T)
    return sch.alpha(1.0 - (k + 1) / T) - sch.alpha(1.0 - k / T)


def expected_idle_steps(sch: Schedule, T: int, seq_len: int) -> float:
    """sum_k (1 - delta_k)^seq_len, evaluated as exp(seq_len * log1p(-delta_k))."""
    if T < 1 or seq_len < 1:
        raise ValueError("T and seq_len must be >= 1")
    delta = np.clip(step_reveal_mass(sch, T), 0.0, 1.0)
    with np.errstate(divide="ignore"):
        terms = np.exp(seq_len * np.log1p(-delta))
    return float(terms.sum())


def isr(sch: Schedule, T: int, L: int, length: int) -> float:
    return expected_idle_steps(sch, T, L * length) / T


def large_t_idle_approx(T: int, seq_len: int) -> float:
    """T * exp(-seq_len / T), the linear-schedule large-T form."""
    return T * math.exp(-seq_len / T)


def simulate_idle_runs(sch: Schedule, T: int, seq_len: int, runs: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Idle steps of ``runs`` model-free reverse trajectories over ``seq_len`` entries.

    The denoiser is a fixed dummy target (all zeros); only the mask pattern
    matters for idleness.
    """
    m = 1
    counts = np.zeros(runs, dtype=np.int64)
    target = np.zeros((runs, seq_len), dtype=np.int64)
    grid = np.full((runs, seq_len), m, dtype=np.int64)
    for k in range(T):
        t = 1.0 - k / T
        s = 1.0 - (k + 1) / T
        new = posterior_step(grid, target, s, t, sch, rng, m)
        counts += (new == grid).all(axis=1)
        grid = new
    return counts


def simulate_idle_steps(sch: Schedule, T: int, L: int, length: int, runs: int,
                        rng: np.random.Generator) -> IdleStats:
    if runs < 1:
        raise ValueError("runs must be >= 1")
    counts = simulate_idle_runs(sch, T, L * length, runs, rng)
    stats = analytic_stats(sch, T, L, length)
    stats.eta_simulated_mean = float(counts.mean())
    stats.eta_simulated_var = float(counts.var(ddof=1)) if runs > 1 else 0.0
    stats.runs = runs
    return stats


def analytic_stats(sch: Schedule, T: int, L: int, length: int) -> IdleStats:
    eta = expected_idle_steps(sch, T, L)
    eta_p = expected_idle_steps(sch, T, L * length)
    return IdleStats(str(sch), T, L, length, eta, eta_p, eta_p / T)


def elbow_index(xs, ys, tol: float = 0.05) -> int:
    """Index of the elbow of a decreasing curve.

    Both axes are scaled to [0, 1]. A curve with no convex bend (all scaled
    second differences ~ 0) has no elbow and yields index 0. Otherwise the
    elbow is the first point whose remaining drop to the curve's minimum is
    at most ``tol`` of the total drop.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) < 3:
        raise ValueError("need at least 3 candidates")
    order = np.argsort(xs)
    x, y = xs[order], ys[order]
    span_x = x[-1] - x[0]
    span_y = y.max() - y.min()
    if span_x <= 0 or span_y <= 0:
        return int(order[0])
    xn = (x - x[0]) / span_x
    yn = (y - y.min()) / span_y
    slope = np.diff(yn) / np.diff(xn)
    bend = np.diff(slope)
    if np.all(np.abs(bend) < 1e-9):
        return int(order[0])
    i = int(np.argmax(yn <= tol))
    return int(order[i])


def isr_elbow(sch: Schedule, T: int, L: int, candidates, tol: float = 0.05) -> int:
    cands = sorted(int(c) for c in candidates)
    ys = [isr(sch, T, L, c) for c in cands]
    return cands[elbow_index(cands, ys, tol)]
